use std::cmp::Ordering;

use super::boxes::{iou, BBox};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// In `[0, 1]`.
    pub score: f64,
    pub class_id: usize,
    /// Pyramid level (0-based) that produced the detection.
    pub level: usize,
}

/// Greedy non-maximum suppression, applied to each class separately.
///
/// Candidates are visited by descending score, ties broken by input order. A
/// candidate is dropped when its IoU with an already kept box of the same
/// class exceeds `threshold`, so kept boxes overlap pairwise by at most
/// `threshold`. Output order is the visit order.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= threshold) {
            kept.push(*d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f64, x2: f64, score: f64) -> Detection {
        Detection { bbox: BBox::new(x1, 0.0, x2, 10.0), score, class_id: 0, level: 0 }
    }

    #[test]
    fn empty_input() {
        assert!(nms(&[], 0.6).is_empty());
    }

    #[test]
    fn suppresses_above_threshold() {
        // width-10 boxes offset by d: IoU = (10-d)/(10+d); d = 30/17 gives 0.7
        let d = 30.0 / 17.0;
        let a = det(0.0, 10.0, 0.8);
        let b = det(d, 10.0 + d, 0.9);
        assert!((iou(&a.bbox, &b.bbox) - 0.7).abs() < 1e-12);
        let out = nms(&[a, b], 0.6);
        assert_eq!(out, vec![b]);
    }

    #[test]
    fn keeps_below_threshold() {
        // d = 10/3 gives IoU 0.5
        let d = 10.0 / 3.0;
        let a = det(0.0, 10.0, 0.9);
        let b = det(d, 10.0 + d, 0.8);
        assert!((iou(&a.bbox, &b.bbox) - 0.5).abs() < 1e-12);
        assert_eq!(nms(&[a, b], 0.6), vec![a, b]);
    }

    #[test]
    fn classes_do_not_suppress_each_other() {
        let a = det(0.0, 10.0, 0.9);
        let b = Detection { class_id: 1, ..det(0.0, 10.0, 0.8) };
        assert_eq!(nms(&[a, b], 0.6).len(), 2);
    }

    #[test]
    fn score_ties_keep_earlier_input() {
        let a = det(0.0, 10.0, 0.5);
        let b = det(0.5, 10.5, 0.5);
        assert_eq!(nms(&[a, b], 0.6), vec![a]);
        assert_eq!(nms(&[b, a], 0.6), vec![b]);
    }
}
