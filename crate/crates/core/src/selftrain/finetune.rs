use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::loss::{assign_targets, detection_loss_on};
use super::optim::OptimState;
use super::{lr_schedule, SupportEntry, SupportSet, TrainConfig};
use crate::adapter::{adapter_forward_on, AdapterParams, BoundAdapter};
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Var};
use crate::percept::{detect_head_on, fuse_on, BoundFusion, BoundHead, ModelWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's steps, measured before each update.
    pub loss: f64,
    /// Positive cells summed over the epoch's steps.
    pub positives: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// `epoch,lr,loss,positives` with an optional leading comment line.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("epoch,lr,loss,positives\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:e},{:.12e},{}", e.epoch, e.lr, e.loss, e.positives);
        }
        out
    }
}

/// Records `head(fuse([ego?] ++ Φ(group)))` for one support entry.
pub fn stage_one_forward(
    tape: &mut Tape,
    adapter: &BoundAdapter,
    fusion: &BoundFusion,
    head: &BoundHead,
    entry: &SupportEntry,
    include_ego: bool,
) -> Result<(Var, Var)> {
    let mut candidates = Vec::with_capacity(entry.group.len() + 1);
    if include_ego {
        let ego = entry
            .ego_feature
            .as_ref()
            .ok_or_else(|| Error::invalid("support entry lacks the ego feature"))?;
        candidates.push(tape.constant(ego.values.clone()));
    }
    for f in &entry.group {
        let x = tape.constant(f.values.clone());
        candidates.push(adapter_forward_on(tape, adapter, x)?.output);
    }
    let fused = fuse_on(tape, fusion, &candidates)?;
    detect_head_on(tape, head, fused)
}

/// Trains only `params`; the ego's fusion and head enter every graph as constants.
pub fn fine_tune_adapter(
    support: &SupportSet,
    ego: &ModelWeights,
    mut params: AdapterParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(AdapterParams, TrainLog)> {
    if support.entries.is_empty() {
        return Err(Error::EmptySupport);
    }
    cfg.validate()?;
    let mut state = OptimState::new();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let (mut loss_sum, mut positives) = (0.0, 0);
        for entry in &support.entries {
            let meta = entry.group[0].meta;
            let targets = assign_targets(&entry.labels, &meta);
            let mut tape = Tape::new();
            let adapter = params.bind(&mut tape, true);
            let fusion = ego.fusion.bind(&mut tape, false);
            let head = ego.head.bind(&mut tape, false);
            let (obj, reg) = stage_one_forward(&mut tape, &adapter, &fusion, &head, entry, cfg.include_ego_feature)?;
            let loss = detection_loss_on(&mut tape, obj, reg, &targets, cfg.lambda_cls, cfg.lambda_reg, cfg.focal_gamma)?;
            let value = tape.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, seed });
            }
            let grads = tape.backward(loss.total)?;
            let g: Vec<_> = adapter.params.iter().map(|&v| grads.get(v)).collect();
            state.step(&cfg.optimizer, lr, params.tensors_mut().into(), &g);
            loss_sum += value;
            positives += targets.positives;
            step += 1;
        }
        log.epochs.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / support.entries.len() as f64,
            positives,
        });
    }
    Ok((params, log))
}
