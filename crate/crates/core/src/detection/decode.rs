use super::boxes::BBox;
use super::loss::{decode_box, PRED_CHANNELS};
use super::nms::{nms, Detection};
use crate::pyramid::NUM_LEVELS;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    pub log_size_clamp: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_threshold: 0.01, nms_threshold: 0.6, max_detections: 100, log_size_clamp: 4.0 }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Turns the three `(N, 5, H, W)` prediction maps into per-image detection
/// lists, clipped to the image and filtered by NMS.
pub fn decode_detections<T: Real>(
    preds: [&Tensor<T>; NUM_LEVELS],
    strides: [usize; NUM_LEVELS],
    image_size: usize,
    cfg: &DecodeConfig,
) -> Vec<Vec<Detection>> {
    let batch = preds[0].shape().n;
    let limit = image_size as f64;
    (0..batch)
        .map(|n| {
            let mut cands = Vec::new();
            for (level, (p, &stride)) in preds.iter().zip(&strides).enumerate() {
                let s = p.shape();
                debug_assert_eq!(s.c, PRED_CHANNELS);
                for i in 0..s.h {
                    for j in 0..s.w {
                        let score = sigmoid(p.at(n, 0, i, j).to_f64().unwrap());
                        if score < cfg.score_threshold {
                            continue;
                        }
                        let raw = [1, 2, 3, 4].map(|c| p.at(n, c, i, j).to_f64().unwrap());
                        let ([cx, cy, w, h], _) = decode_box(raw, i, j, stride, cfg.log_size_clamp);
                        let b = BBox::from_center(cx, cy, w, h);
                        let bbox = BBox::new(b.x1.clamp(0.0, limit), b.y1.clamp(0.0, limit), b.x2.clamp(0.0, limit), b.y2.clamp(0.0, limit));
                        if bbox.is_valid() {
                            cands.push(Detection { bbox, score, class_id: 0, level });
                        }
                    }
                }
            }
            let mut kept = nms(&cands, cfg.nms_threshold);
            kept.truncate(cfg.max_detections);
            kept
        })
        .collect()
}
