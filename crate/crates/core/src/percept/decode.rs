use serde::{Deserialize, Serialize};

use super::geometry::{rotated_iou, wrap_angle, ObjectBox};
use super::{Detection, DetectionSet, RawHeadOutput, REGRESSION_CHANNELS};
use crate::error::Result;
use crate::ndgrad::kernels::sigmoid;
use crate::world::GridMeta;

/// Log-extent clamp applied when decoding, so a wild logit cannot yield an
/// unbounded box.
const LOG_EXTENT_CLAMP: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub conf_floor: f64,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            conf_floor: 0.25,
            nms_iou: 0.15,
        }
    }
}

/// Regression target for `bbox` relative to cell `(row, col)`.
///
/// Yaw is encoded at twice its angle: a box is unchanged by a half turn, and
/// doubling makes `(sin, cos)` continuous across that symmetry.
pub fn regression_target(bbox: &ObjectBox, meta: &GridMeta, row: usize, col: usize) -> [f64; REGRESSION_CHANNELS] {
    let (cx, cy) = meta.cell_center(row, col);
    let (s, c) = (2.0 * bbox.yaw).sin_cos();
    [
        (bbox.center_x - cx) / meta.cell_m,
        (bbox.center_y - cy) / meta.cell_m,
        bbox.length.ln(),
        bbox.width.ln(),
        s,
        c,
    ]
}

fn decode_cell(reg: &[f64; REGRESSION_CHANNELS], meta: &GridMeta, row: usize, col: usize) -> ObjectBox {
    let (cx, cy) = meta.cell_center(row, col);
    let clamp = |v: f64| v.clamp(-LOG_EXTENT_CLAMP, LOG_EXTENT_CLAMP).exp();
    let yaw = if reg[4] == 0.0 && reg[5] == 0.0 {
        0.0
    } else {
        reg[4].atan2(reg[5]) / 2.0
    };
    ObjectBox::new(
        cx + reg[0] * meta.cell_m,
        cy + reg[1] * meta.cell_m,
        clamp(reg[2]),
        clamp(reg[3]),
        wrap_angle(yaw),
    )
}

/// Greedy NMS: visit in descending confidence, drop anything overlapping a
/// kept box at `iou_threshold` or more. Ties keep input order.
pub fn greedy_nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        let suppressed = kept
            .iter()
            .any(|k| rotated_iou(&k.bbox, &d.bbox).unwrap_or(0.0) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Thresholds cells at `conf_floor` and runs NMS.
pub fn decode_nms(raw: &RawHeadOutput, meta: &GridMeta, cfg: &DecodeConfig, frame: usize) -> Result<DetectionSet> {
    let (_, h, w) = raw.objectness.dims3()?;
    let mut candidates = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let p = sigmoid(raw.objectness.at3(0, row, col));
            if p < cfg.conf_floor {
                continue;
            }
            let mut reg = [0.0; REGRESSION_CHANNELS];
            for (ch, r) in reg.iter_mut().enumerate() {
                *r = raw.regression.at3(ch, row, col);
            }
            candidates.push(Detection {
                bbox: decode_cell(&reg, meta, row, col),
                confidence: p,
            });
        }
    }
    Ok(DetectionSet {
        frame,
        coords: super::CoordFrame::World,
        detections: greedy_nms(candidates, cfg.nms_iou),
    })
}
