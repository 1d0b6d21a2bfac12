use super::{FeatureMap, RawHeadOutput};
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::{derive, normal_tensor, seeded};

/// `dx, dy, ln l, ln w, sin yaw, cos yaw`.
pub const REGRESSION_CHANNELS: usize = 6;

/// Prior objectness logit at init, roughly a 5% positive rate.
const OBJECTNESS_PRIOR: f64 = -3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    /// `[1, C, 1, 1]`.
    pub obj_w: Tensor,
    pub obj_b: Tensor,
    /// `[6, C, 1, 1]`.
    pub reg_w: Tensor,
    pub reg_b: Tensor,
}

impl HeadWeights {
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = seeded(derive(seed, 0x4EAD));
        let std = (1.0 / channels as f64).sqrt();
        Self {
            obj_w: normal_tensor(&[1, channels, 1, 1], std, &mut rng),
            obj_b: Tensor::full(&[1], OBJECTNESS_PRIOR),
            reg_w: normal_tensor(&[REGRESSION_CHANNELS, channels, 1, 1], 0.1 * std, &mut rng),
            // typical car extents so early regression starts near the data
            reg_b: Tensor::new(&[REGRESSION_CHANNELS], vec![0.0, 0.0, 4.2f64.ln(), 1.85f64.ln(), 0.0, 1.0])
                .expect("bias shape"),
        }
    }

    pub fn channels(&self) -> usize {
        self.obj_w.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.obj_w, &self.obj_b, &self.reg_w, &self.reg_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.obj_w, &mut self.obj_b, &mut self.reg_w, &mut self.reg_b]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHead {
        BoundHead {
            params: self.tensors().map(|t| tape.leaf(t.clone(), trainable)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub params: [Var; 4],
}

/// Records the head; returns `(objectness logits [1,H,W], regression [6,H,W])`.
pub fn detect_head_on(tape: &mut Tape, head: &BoundHead, features: Var) -> Result<(Var, Var)> {
    let [ow, ob, rw, rb] = head.params;
    let obj = tape.conv2d(features, ow, ob, 0)?;
    let reg = tape.conv2d(features, rw, rb, 0)?;
    Ok((obj, reg))
}

pub fn detect_head(features: &FeatureMap, weights: &HeadWeights) -> Result<RawHeadOutput> {
    if features.channels() != weights.channels() {
        return Err(Error::ChannelMismatch {
            family: features.family.clone(),
            expected: weights.channels(),
            got: features.channels(),
        });
    }
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let x = tape.constant(features.values.clone());
    let (obj, reg) = detect_head_on(&mut tape, &bound, x)?;
    Ok(RawHeadOutput {
        objectness: tape.value(obj).clone(),
        regression: tape.value(reg).clone(),
    })
}
