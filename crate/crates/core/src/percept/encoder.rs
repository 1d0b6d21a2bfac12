use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Unary, Var};
use crate::rng::{derive, normal_tensor, seeded, uniform_tensor};
use crate::world::Observation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    ExpLin,
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Relu => Unary::Relu,
            Activation::ExpLin => Unary::ExpLin,
        }
    }
}

/// One encoder family: architecture plus the fixed output permutation and
/// per-channel affine that define its semantic space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderFamily {
    pub id: String,
    pub channels: usize,
    pub mid_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub permutation: Vec<usize>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl EncoderFamily {
    /// Builds a family; the permutation and affine constants are drawn from `seed`.
    pub fn new(id: &str, channels: usize, mid_channels: usize, kernel: usize, activation: Activation, seed: u64) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("family {id}: kernel {kernel} must be odd")));
        }
        if channels == 0 || mid_channels == 0 {
            return Err(Error::invalid(format!("family {id}: channel counts must be positive")));
        }
        let mut rng = seeded(derive(seed, 0xFA17));
        let mut permutation: Vec<usize> = (0..channels).collect();
        permutation.shuffle(&mut rng);
        let scale = uniform_tensor(&[channels], 0.5, 2.0, &mut rng).into_data();
        let shift = uniform_tensor(&[channels], -0.3, 0.3, &mut rng).into_data();
        Ok(Self {
            id: id.to_string(),
            channels,
            mid_channels,
            kernel,
            activation,
            permutation,
            scale,
            shift,
        })
    }

    /// Random initial weights for pretraining.
    pub fn init_weights(&self, seed: u64) -> EncoderWeights {
        let mut rng = seeded(derive(seed, 0xE4C0));
        let k2 = (self.kernel * self.kernel) as f64;
        EncoderWeights {
            conv1_w: normal_tensor(&[self.mid_channels, 1, self.kernel, self.kernel], (2.0 / k2).sqrt(), &mut rng),
            conv1_b: Tensor::zeros(&[self.mid_channels]),
            conv2_w: normal_tensor(
                &[self.channels, self.mid_channels, self.kernel, self.kernel],
                (2.0 / (k2 * self.mid_channels as f64)).sqrt(),
                &mut rng,
            ),
            conv2_b: Tensor::zeros(&[self.channels]),
        }
    }
}

/// Registered encoder families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyRegistry {
    pub families: Vec<EncoderFamily>,
}

impl Default for FamilyRegistry {
    /// Two families with different widths and activations.
    fn default() -> Self {
        Self {
            families: vec![
                EncoderFamily::new("lp", 16, 16, 5, Activation::Relu, 11).expect("valid family"),
                EncoderFamily::new("ls", 24, 16, 5, Activation::ExpLin, 23).expect("valid family"),
            ],
        }
    }
}

impl FamilyRegistry {
    pub fn get(&self, id: &str) -> Result<&EncoderFamily> {
        self.families
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| Error::UnknownFamily(id.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
}

impl EncoderWeights {
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b]
    }

    pub fn bind(&self, tape: &mut Tape, family: &EncoderFamily, trainable: bool) -> BoundEncoder {
        let c = family.channels;
        BoundEncoder {
            params: self.tensors().map(|t| tape.leaf(t.clone(), trainable)),
            scale: tape.constant(Tensor::new(&[c, 1, 1], family.scale.clone()).expect("scale shape")),
            shift: tape.constant(Tensor::new(&[c, 1, 1], family.shift.clone()).expect("shift shape")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    pub params: [Var; 4],
    scale: Var,
    shift: Var,
}

/// Records the encoder on `tape` for an observation grid `obs` (`[1,H,W]`).
pub fn encode_on(tape: &mut Tape, family: &EncoderFamily, enc: &BoundEncoder, obs: Var) -> Result<Var> {
    let pad = family.kernel / 2;
    let act = family.activation.unary();
    let [w1, b1, w2, b2] = enc.params;
    let h = tape.conv2d(obs, w1, b1, pad)?;
    let h = tape.unary(h, act);
    let h = tape.conv2d(h, w2, b2, pad)?;
    let h = tape.unary(h, act);
    let h = tape.permute_channels(h, &family.permutation)?;
    let h = tape.mul(h, enc.scale)?;
    tape.add(h, enc.shift)
}

/// Frozen encoder pass.
pub fn encode(obs: &Observation, family: &EncoderFamily, weights: &EncoderWeights) -> Result<FeatureMap> {
    if weights.conv2_w.shape()[0] != family.channels {
        return Err(Error::Shape {
            op: "encode",
            dim: "encoder output channels",
            expected: family.channels,
            got: weights.conv2_w.shape()[0],
        });
    }
    let (_, h, w) = obs.grid.dims3()?;
    if (h, w) != (obs.meta.rows, obs.meta.cols) {
        return Err(Error::Shape {
            op: "encode",
            dim: "observation rows",
            expected: obs.meta.rows,
            got: h,
        });
    }
    let mut tape = Tape::new();
    let enc = weights.bind(&mut tape, family, false);
    let x = tape.constant(obs.grid.clone());
    let out = encode_on(&mut tape, family, &enc, x)?;
    Ok(FeatureMap {
        values: tape.value(out).clone(),
        family: family.id.clone(),
        meta: obs.meta,
    })
}
