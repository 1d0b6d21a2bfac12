//! Per-collaborator feature adapter: a 1×1 channel projection into the ego's
//! width, then channel attention and spatial attention, added back onto the
//! projection through a zero-initialized output gate.
//!
//! At creation the gate is zero, so the adapter is exactly the projection, and
//! the projection is exactly the identity when the channel counts match.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Axis, ReduceMode, Tape, Tensor, Var};
use crate::percept::FeatureMap;
use crate::rng::{derive, normal_tensor, seeded};
use crate::world::AgentId;

pub const SAM_KERNEL: usize = 7;
/// Std of a width-changing projection at creation, in units of `1/√C_src`.
pub const PROJ_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub c_src: usize,
    pub c_ego: usize,
    pub reduction: usize,
    /// `[C_ego, C_src, 1, 1]` and `[C_ego]`.
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    /// `[C_ego/r, C_ego]`.
    pub mlp_w1: Tensor,
    /// `[C_ego, C_ego/r]`.
    pub mlp_w2: Tensor,
    /// `[1, 2, 7, 7]` and `[1]`.
    pub sam_w: Tensor,
    pub sam_b: Tensor,
    /// `[C_ego, C_ego, 1, 1]` and `[C_ego]`, zero at creation.
    pub gate_w: Tensor,
    pub gate_b: Tensor,
}

pub fn adapter_init(c_src: usize, c_ego: usize, reduction: usize, seed: u64) -> Result<AdapterParams> {
    if reduction == 0 || c_src < reduction || c_ego < reduction {
        return Err(Error::invalid(format!(
            "adapter needs C_src ({c_src}) and C_ego ({c_ego}) >= r ({reduction}) >= 1"
        )));
    }
    if !c_ego.is_multiple_of(reduction) {
        return Err(Error::invalid(format!("reduction {reduction} does not divide C_ego {c_ego}")));
    }
    let mut rng = seeded(derive(seed, 0xADA9));
    let proj_w = if c_src == c_ego {
        Tensor::from_fn(&[c_ego, c_src, 1, 1], |i| if i / c_src == i % c_src { 1.0 } else { 0.0 })
    } else {
        normal_tensor(&[c_ego, c_src, 1, 1], PROJ_INIT_GAIN / (c_src as f64).sqrt(), &mut rng)
    };
    let hidden = c_ego / reduction;
    Ok(AdapterParams {
        c_src,
        c_ego,
        reduction,
        proj_w,
        proj_b: Tensor::zeros(&[c_ego]),
        mlp_w1: normal_tensor(&[hidden, c_ego], 0.1, &mut rng),
        mlp_w2: normal_tensor(&[c_ego, hidden], 0.1, &mut rng),
        sam_w: normal_tensor(&[1, 2, SAM_KERNEL, SAM_KERNEL], 0.05, &mut rng),
        sam_b: Tensor::zeros(&[1]),
        gate_w: Tensor::zeros(&[c_ego, c_ego, 1, 1]),
        gate_b: Tensor::zeros(&[c_ego]),
    })
}

impl AdapterParams {
    pub fn dims(&self) -> (usize, usize) {
        (self.c_src, self.c_ego)
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.proj_w,
            &self.proj_b,
            &self.mlp_w1,
            &self.mlp_w2,
            &self.sam_w,
            &self.sam_b,
            &self.gate_w,
            &self.gate_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.mlp_w1,
            &mut self.mlp_w2,
            &mut self.sam_w,
            &mut self.sam_b,
            &mut self.gate_w,
            &mut self.gate_b,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAdapter {
        BoundAdapter {
            params: self.tensors().map(|t| tape.leaf(t.clone(), trainable)),
            c_src: self.c_src,
            c_ego: self.c_ego,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAdapter {
    pub params: [Var; 8],
    c_src: usize,
    c_ego: usize,
}

/// Intermediate values of one adapter pass, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AdapterTrace {
    pub output: Var,
    pub channel_gate: Var,
    pub spatial_gate: Var,
}

fn shared_mlp(tape: &mut Tape, w1: Var, w2: Var, descriptor: Var, c: usize) -> Result<Var> {
    let d = tape.reshape(descriptor, &[c, 1])?;
    let h = tape.matmul(w1, d)?;
    let h = tape.relu(h);
    tape.matmul(w2, h)
}

pub fn adapter_forward_on(tape: &mut Tape, adapter: &BoundAdapter, features: Var) -> Result<AdapterTrace> {
    let got = tape.shape(features)[0];
    if got != adapter.c_src {
        return Err(Error::Shape {
            op: "adapter_forward",
            dim: "source channels",
            expected: adapter.c_src,
            got,
        });
    }
    let c = adapter.c_ego;
    let [pw, pb, w1, w2, sw, sb, gw, gb] = adapter.params;
    let p = tape.conv2d(features, pw, pb, 0)?;

    let avg = tape.reduce(p, Axis::Spatial, ReduceMode::Mean)?;
    let max = tape.reduce(p, Axis::Spatial, ReduceMode::Max)?;
    let a = shared_mlp(tape, w1, w2, avg, c)?;
    let m = shared_mlp(tape, w1, w2, max, c)?;
    let logits = tape.add(a, m)?;
    let logits = tape.reshape(logits, &[c, 1, 1])?;
    let channel_gate = tape.sigmoid(logits);
    let pc = tape.mul(p, channel_gate)?;

    let cmean = tape.reduce(pc, Axis::Channel, ReduceMode::Mean)?;
    let cmax = tape.reduce(pc, Axis::Channel, ReduceMode::Max)?;
    let pooled = tape.concat(&[cmean, cmax])?;
    let s = tape.conv2d(pooled, sw, sb, SAM_KERNEL / 2)?;
    let spatial_gate = tape.sigmoid(s);
    let refined = tape.mul(pc, spatial_gate)?;

    let gated = tape.conv2d(refined, gw, gb, 0)?;
    let output = tape.add(p, gated)?;
    Ok(AdapterTrace {
        output,
        channel_gate,
        spatial_gate,
    })
}

/// Maps `f` into the ego's feature space; the result carries `ego_family`.
pub fn adapter_forward(f: &FeatureMap, params: &AdapterParams, ego_family: &str) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(f.values.clone());
    let out = adapter_forward_on(&mut tape, &bound, x)?;
    Ok(FeatureMap {
        values: tape.value(out.output).clone(),
        family: ego_family.to_string(),
        meta: f.meta,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterKey {
    Agent(AgentId),
    Family(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    params: AdapterParams,
    frozen: bool,
}

/// The ego's adapters, one per collaborator (or per family when sharing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterRegistry {
    pub c_ego: usize,
    pub reduction: usize,
    pub seed: u64,
    pub share_by_family: bool,
    entries: BTreeMap<AdapterKey, Entry>,
}

impl AdapterRegistry {
    pub fn new(c_ego: usize, reduction: usize, seed: u64, share_by_family: bool) -> Self {
        Self {
            c_ego,
            reduction,
            seed,
            share_by_family,
            entries: BTreeMap::new(),
        }
    }

    pub fn key(&self, agent: AgentId, family: &str) -> AdapterKey {
        if self.share_by_family {
            AdapterKey::Family(family.to_string())
        } else {
            AdapterKey::Agent(agent)
        }
    }

    /// Returns the adapter for `agent`, creating it on first use. The init
    /// seed depends only on the key, so creation order does not matter.
    pub fn get_or_create(&mut self, agent: AgentId, family: &str, c_src: usize) -> Result<&mut AdapterParams> {
        let key = self.key(agent, family);
        if let Some(e) = self.entries.get(&key) {
            if e.params.c_src != c_src {
                return Err(Error::AdapterDims {
                    id: agent,
                    existing: e.params.dims(),
                    requested: (c_src, self.c_ego),
                });
            }
        } else {
            let tag = match &key {
                AdapterKey::Agent(id) => *id as u64,
                AdapterKey::Family(f) => f.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3)),
            };
            let params = adapter_init(c_src, self.c_ego, self.reduction, derive(self.seed, tag))?;
            self.entries.insert(key.clone(), Entry { params, frozen: false });
        }
        Ok(&mut self.entries.get_mut(&key).expect("present").params)
    }

    pub fn get(&self, key: &AdapterKey) -> Option<&AdapterParams> {
        self.entries.get(key).map(|e| &e.params)
    }

    pub fn set(&mut self, key: &AdapterKey, params: AdapterParams) -> Result<()> {
        let e = self
            .entries
            .get_mut(key)
            .ok_or_else(|| Error::invalid(format!("no adapter for {key:?}")))?;
        if e.frozen {
            return Err(Error::invalid(format!("adapter {key:?} is frozen")));
        }
        if e.params.dims() != params.dims() {
            return Err(Error::invalid(format!("adapter {key:?} dims cannot change")));
        }
        e.params = params;
        Ok(())
    }

    pub fn freeze(&mut self, key: &AdapterKey) -> Result<()> {
        self.entries
            .get_mut(key)
            .map(|e| e.frozen = true)
            .ok_or_else(|| Error::invalid(format!("no adapter for {key:?}")))
    }

    pub fn is_frozen(&self, key: &AdapterKey) -> bool {
        self.entries.get(key).is_some_and(|e| e.frozen)
    }

    /// Bit-exact copy of one adapter.
    pub fn snapshot(&self, key: &AdapterKey) -> Option<AdapterParams> {
        self.get(key).cloned()
    }

    pub fn keys(&self) -> impl Iterator<Item = &AdapterKey> {
        self.entries.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::kernels::sigmoid;
    use crate::rng::uniform_tensor;
    use crate::world::GridMeta;

    fn fmap(values: Tensor) -> FeatureMap {
        let h = values.shape()[1];
        FeatureMap {
            values,
            family: "ls".into(),
            meta: GridMeta::centered(h, 1.0),
        }
    }

    /// Loops only: no tape, no shared kernels.
    fn oracle(x: &Tensor, a: &AdapterParams) -> Tensor {
        let (cs, h, w) = x.dims3().unwrap();
        let c = a.c_ego;
        let hid = c / a.reduction;
        let mut p = vec![0.0; c * h * w];
        for o in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = a.proj_b.data()[o];
                    for i in 0..cs {
                        s += a.proj_w.data()[o * cs + i] * x.at3(i, y, xx);
                    }
                    p[(o * h + y) * w + xx] = s;
                }
            }
        }
        let mlp = |d: &[f64]| -> Vec<f64> {
            let hidden: Vec<f64> = (0..hid)
                .map(|j| (0..c).map(|i| a.mlp_w1.data()[j * c + i] * d[i]).sum::<f64>().max(0.0))
                .collect();
            (0..c)
                .map(|i| (0..hid).map(|j| a.mlp_w2.data()[i * hid + j] * hidden[j]).sum())
                .collect()
        };
        let plane = |o: usize| &p[o * h * w..(o + 1) * h * w];
        let avg: Vec<f64> = (0..c).map(|o| plane(o).iter().sum::<f64>() / (h * w) as f64).collect();
        let mx: Vec<f64> = (0..c).map(|o| plane(o).iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let (ma, mm) = (mlp(&avg), mlp(&mx));
        let gc: Vec<f64> = (0..c).map(|o| sigmoid(ma[o] + mm[o])).collect();
        let mut pc = p.clone();
        for o in 0..c {
            for v in &mut pc[o * h * w..(o + 1) * h * w] {
                *v *= gc[o];
            }
        }
        let mut pooled = vec![0.0; 2 * h * w];
        for cell in 0..h * w {
            let vals: Vec<f64> = (0..c).map(|o| pc[o * h * w + cell]).collect();
            pooled[cell] = vals.iter().sum::<f64>() / c as f64;
            pooled[h * w + cell] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        let half = (SAM_KERNEL / 2) as isize;
        let mut gs = vec![0.0; h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut s = a.sam_b.data()[0];
                for ch in 0..2 {
                    for ky in 0..SAM_KERNEL as isize {
                        for kx in 0..SAM_KERNEL as isize {
                            let (sy, sx) = (y + ky - half, xx + kx - half);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let kw = a.sam_w.data()[(ch * SAM_KERNEL + ky as usize) * SAM_KERNEL + kx as usize];
                            s += kw * pooled[ch * h * w + sy as usize * w + sx as usize];
                        }
                    }
                }
                gs[y as usize * w + xx as usize] = sigmoid(s);
            }
        }
        let mut out = vec![0.0; c * h * w];
        for o in 0..c {
            for cell in 0..h * w {
                let mut s = a.gate_b.data()[o];
                for i in 0..c {
                    s += a.gate_w.data()[o * c + i] * pc[i * h * w + cell] * gs[cell];
                }
                out[o * h * w + cell] = p[o * h * w + cell] + s;
            }
        }
        Tensor::new(&[c, h, w], out).unwrap()
    }

    fn randomize(a: &mut AdapterParams, seed: u64) {
        let mut rng = seeded(seed);
        for t in a.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = normal_tensor(&shape, 0.5, &mut rng);
        }
    }

    #[test]
    fn identity_at_init_for_matching_widths() {
        let a = adapter_init(16, 16, 4, 3).unwrap();
        let mut rng = seeded(8);
        for _ in 0..10 {
            let x = uniform_tensor(&[16, 6, 6], -3.0, 3.0, &mut rng);
            let out = adapter_forward(&fmap(x.clone()), &a, "lp").unwrap();
            assert_eq!(out.values, x);
            assert_eq!(out.family, "lp");
        }
    }

    #[test]
    fn init_is_deterministic_and_shapes_follow_dims() {
        assert_eq!(adapter_init(24, 16, 4, 5).unwrap(), adapter_init(24, 16, 4, 5).unwrap());
        let a = adapter_init(24, 16, 4, 5).unwrap();
        assert!(a.gate_w.data().iter().all(|&v| v == 0.0) && a.gate_b.data().iter().all(|&v| v == 0.0));
        let out = adapter_forward(&fmap(Tensor::zeros(&[24, 5, 7])), &a, "lp");
        assert_eq!(out.unwrap().values.shape(), &[16, 5, 7]);
        assert!(matches!(adapter_init(24, 18, 4, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        for seed in 0..20 {
            let mut a = adapter_init(6, 8, 2, seed).unwrap();
            randomize(&mut a, seed + 100);
            let x = uniform_tensor(&[6, 5, 4], -1.0, 1.0, &mut seeded(seed + 200));
            let got = adapter_forward(&fmap(x.clone()), &a, "lp").unwrap();
            assert!(got.values.max_abs_diff(&oracle(&x, &a)) < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn constant_plane_gives_gates_in_open_interval() {
        let mut a = adapter_init(4, 4, 2, 1).unwrap();
        randomize(&mut a, 9);
        let mut tape = Tape::new();
        let bound = a.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[4, 5, 5], 0.7));
        let tr = adapter_forward_on(&mut tape, &bound, x).unwrap();
        let (gc, gs) = (tape.value(tr.channel_gate), tape.value(tr.spatial_gate));
        assert!(gc.data().iter().chain(gs.data()).all(|&g| g > 0.0 && g < 1.0));
        // mean and max descriptors coincide, so the gate is 2·MLP(p)
        let p: Vec<f64> = (0..4)
            .map(|o| (0..4).map(|i| a.proj_w.data()[o * 4 + i] * 0.7).sum::<f64>() + a.proj_b.data()[o])
            .collect();
        let hidden: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|i| a.mlp_w1.data()[j * 4 + i] * p[i]).sum::<f64>().max(0.0))
            .collect();
        for o in 0..4 {
            let m: f64 = (0..2).map(|j| a.mlp_w2.data()[o * 2 + j] * hidden[j]).sum();
            assert!((gc.data()[o] - sigmoid(2.0 * m)).abs() < 1e-12);
        }
    }

    #[test]
    fn registry_isolation_and_dims() {
        let mut reg = AdapterRegistry::new(16, 4, 7, false);
        reg.get_or_create(1, "ls", 24).unwrap();
        reg.get_or_create(2, "ls", 24).unwrap();
        let k1 = reg.key(1, "ls");
        let k2 = reg.key(2, "ls");
        let before = reg.snapshot(&k2).unwrap();
        let mut trained = reg.snapshot(&k1).unwrap();
        trained.gate_b.data_mut()[0] = 1.0;
        reg.set(&k1, trained.clone()).unwrap();
        assert_eq!(reg.snapshot(&k2).unwrap(), before);
        assert_eq!(reg.snapshot(&k1).unwrap(), trained);
        assert_eq!(reg.get_or_create(1, "ls", 24).unwrap().dims(), (24, 16));
        assert!(matches!(reg.get_or_create(1, "ls", 16), Err(Error::AdapterDims { .. })));
        reg.freeze(&k1).unwrap();
        assert!(reg.set(&k1, trained).is_err());
    }

    #[test]
    fn family_sharing_keys_by_family() {
        let mut reg = AdapterRegistry::new(16, 4, 7, true);
        reg.get_or_create(1, "ls", 24).unwrap().gate_b.data_mut()[0] = 2.0;
        assert_eq!(reg.get_or_create(2, "ls", 24).unwrap().gate_b.data()[0], 2.0);
        assert_eq!(reg.keys().count(), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = adapter_init(24, 16, 4, 1).unwrap();
        assert_eq!(AdapterParams::from_json(&a.to_json().unwrap()).unwrap(), a);
    }
}
