//! Heterogeneous encoders, the frozen fusion module and detection head, box
//! decoding with NMS, and oriented-box geometry.
//!
//! The pipeline for one agent is `encode → fuse → head → decode`. Encoders
//! differ by family: channel count, kernel size, activation, and a fixed
//! channel permutation plus per-channel affine applied to their output. Two
//! families therefore never share a feature space, even on identical input.

mod decode;
mod encoder;
mod fusion;
pub mod geometry;
mod head;
mod model;

use serde::{Deserialize, Serialize};

pub use decode::{decode_nms, greedy_nms, regression_target, DecodeConfig};
pub use encoder::{encode, encode_on, Activation, BoundEncoder, EncoderFamily, EncoderWeights, FamilyRegistry};
pub use fusion::{fuse, fuse_on, BoundFusion, FusionWeights};
pub use geometry::{rotated_iou, ObjectBox};
pub use head::{detect_head, detect_head_on, BoundHead, HeadWeights, REGRESSION_CHANNELS};
pub use model::{ModelWeights, WEIGHTS_FORMAT_VERSION};

use crate::ndgrad::Tensor;
use crate::world::{AgentId, GridMeta};

/// Encoder output for one agent and frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[C, H, W]`.
    pub values: Tensor,
    pub family: String,
    pub meta: GridMeta,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: ObjectBox,
    pub confidence: f64,
}

/// Frame in which detection boxes are expressed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CoordFrame {
    /// The shared world / ego-aligned BEV frame.
    World,
    /// Local to an agent's sensor pose.
    Sensor { agent: AgentId, x: f64, y: f64, yaw: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame: usize,
    pub coords: CoordFrame,
    /// Sorted by descending confidence.
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn empty(frame: usize) -> Self {
        Self {
            frame,
            coords: CoordFrame::World,
            detections: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Boxes re-expressed in the world frame.
    pub fn to_world(&self) -> DetectionSet {
        match self.coords {
            CoordFrame::World => self.clone(),
            CoordFrame::Sensor { x, y, yaw, .. } => DetectionSet {
                frame: self.frame,
                coords: CoordFrame::World,
                detections: self
                    .detections
                    .iter()
                    .map(|d| Detection {
                        bbox: d.bbox.transformed(yaw, x, y),
                        confidence: d.confidence,
                    })
                    .collect(),
            },
        }
    }

    /// Boxes re-expressed relative to a sensor pose.
    pub fn to_sensor(&self, agent: AgentId, x: f64, y: f64, yaw: f64) -> DetectionSet {
        let world = self.to_world();
        let (s, c) = (-yaw).sin_cos();
        DetectionSet {
            frame: self.frame,
            coords: CoordFrame::Sensor { agent, x, y, yaw },
            detections: world
                .detections
                .iter()
                .map(|d| {
                    let (dx, dy) = (d.bbox.center_x - x, d.bbox.center_y - y);
                    Detection {
                        bbox: ObjectBox::new(c * dx - s * dy, s * dx + c * dy, d.bbox.length, d.bbox.width, d.bbox.yaw - yaw),
                        confidence: d.confidence,
                    }
                })
                .collect(),
        }
    }
}

/// Raw per-cell head output before decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawHeadOutput {
    /// `[1, H, W]` logits; the sigmoid is applied at decode time.
    pub objectness: Tensor,
    /// `[6, H, W]`: `dx, dy, ln l, ln w, sin yaw, cos yaw` per cell.
    pub regression: Tensor,
}
