//! Single-class average precision at a fixed IoU matching threshold.

use std::cmp::Ordering;

use super::boxes::{iou, BBox};
use super::nms::Detection;
use crate::error::{Error, Result};

/// All-point interpolated AP over a set of images.
///
/// Detections from every image are ranked by descending score (ties keep
/// image, then input, order). Each detection is matched to the unmatched
/// ground-truth box of its image with the highest IoU, provided that IoU is
/// at least `iou_threshold`; otherwise it is a false positive.
pub fn evaluate_ap(dets: &[Vec<Detection>], ground_truth: &[Vec<BBox>], iou_threshold: f64) -> Result<f64> {
    if dets.len() != ground_truth.len() {
        return Err(Error::invalid(format!("{} detection lists for {} images", dets.len(), ground_truth.len())));
    }
    let n_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut ranked: Vec<(usize, &Detection)> = dets.iter().enumerate().flat_map(|(img, ds)| ds.iter().map(move |d| (img, d))).collect();
    ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal));

    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (img, d) in ranked {
        let best = ground_truth[img]
            .iter()
            .enumerate()
            .filter(|(k, _)| !matched[img][*k])
            .map(|(k, g)| (k, iou(&d.bbox, g)))
            .filter(|(_, v)| *v >= iou_threshold)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)));
        match best {
            Some((k, _)) => {
                matched[img][k] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    Ok(pr_area(&tp_flags, n_gt))
}

/// Area under the monotone precision envelope for a ranked TP/FP list.
pub fn pr_area(tp_flags: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(tp_flags.len());
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        tp += is_tp as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // envelope: precision at recall r is the best precision at any recall >= r
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    area
}
