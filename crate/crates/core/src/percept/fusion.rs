use super::FeatureMap;
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::{derive, normal_tensor, seeded};

/// Attention-weighted fusion: a 1×1 score conv per candidate, softmax across
/// candidates at each cell, then the weighted sum of candidate features.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    /// `[1, C, 1, 1]`.
    pub score_w: Tensor,
    /// `[1]`.
    pub score_b: Tensor,
}

impl FusionWeights {
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = seeded(derive(seed, 0xF0F0));
        Self {
            score_w: normal_tensor(&[1, channels, 1, 1], (1.0 / channels as f64).sqrt(), &mut rng),
            score_b: Tensor::zeros(&[1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.score_w.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.score_w, &self.score_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.score_w, &mut self.score_b]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundFusion {
        BoundFusion {
            params: self.tensors().map(|t| tape.leaf(t.clone(), trainable)),
            channels: self.channels(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundFusion {
    pub params: [Var; 2],
    channels: usize,
}

/// Records fusion of `candidates` (each `[C, H, W]`) on `tape`.
pub fn fuse_on(tape: &mut Tape, fusion: &BoundFusion, candidates: &[Var]) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::invalid("fusion needs at least one candidate"));
    }
    for &c in candidates {
        let got = tape.shape(c)[0];
        if got != fusion.channels {
            return Err(Error::ChannelMismatch {
                family: "fusion input".into(),
                expected: fusion.channels,
                got,
            });
        }
    }
    let [w, b] = fusion.params;
    let scores: Vec<Var> = candidates
        .iter()
        .map(|&c| tape.conv2d(c, w, b, 0))
        .collect::<Result<_>>()?;
    let scores = tape.concat(&scores)?;
    let weights = tape.softmax_channels(scores)?;
    let mut acc: Option<Var> = None;
    for (i, &c) in candidates.iter().enumerate() {
        let wi = tape.slice_channels(weights, i, 1)?;
        let term = tape.mul(c, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Frozen fusion of feature maps that already share the ego's channel space.
pub fn fuse(candidates: &[FeatureMap], weights: &FusionWeights) -> Result<FeatureMap> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::invalid("fusion needs at least one candidate"))?;
    for c in candidates {
        if c.channels() != weights.channels() {
            return Err(Error::ChannelMismatch {
                family: c.family.clone(),
                expected: weights.channels(),
                got: c.channels(),
            });
        }
    }
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let vars: Vec<Var> = candidates.iter().map(|c| tape.constant(c.values.clone())).collect();
    let out = fuse_on(&mut tape, &bound, &vars)?;
    Ok(FeatureMap {
        values: tape.value(out).clone(),
        family: first.family.clone(),
        meta: first.meta,
    })
}
