//! Homogeneous base-model training: one family's encoder, fusion and head are
//! trained jointly on ground truth from generated scenarios where every agent
//! uses that family.
//!
//! Each step picks one viewing agent. Half the time it fuses only its own
//! feature and learns what it alone observes; otherwise it fuses every agent's
//! feature (its own first) and learns what any of them observes. The base
//! model therefore works both solo and collaboratively.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Var};
use crate::percept::{detect_head_on, encode_on, fuse_on, EncoderFamily, ModelWeights, ObjectBox};
use crate::rng::{derive, seeded};
use crate::selftrain::{
    assign_targets, detection_loss_on, lr_schedule, EpochLog, OptimState, Optimizer, PseudoLabelSet, TrainConfig,
    TrainLog,
};
use crate::world::{generate_scenario, render_observation, visible_objects, Observation, Scenario, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Training scenarios per family.
    pub scenarios: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub optimizer: Optimizer,
    /// Probability that a step trains the solo (ego-only) view.
    pub solo_fraction: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub focal_gamma: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            scenarios: 6,
            epochs: 10,
            base_lr: 0.005,
            optimizer: Optimizer::adam(),
            solo_fraction: 0.5,
            lambda_cls: 1.0,
            lambda_reg: 2.0,
            focal_gamma: 2.0,
            seed: 1000,
        }
    }
}

impl PretrainConfig {
    /// The fine-tuning schedule shape stretched over `epochs`: warmup for the
    /// first 40%, decay by 10× at 60% and 80%.
    pub fn schedule(&self) -> TrainConfig {
        let at = |f: f64| ((self.epochs as f64 * f).round() as usize).max(1);
        let warmup = at(0.4);
        let m0 = at(0.6).max(warmup + 1);
        let m1 = at(0.8).max(m0);
        TrainConfig {
            base_lr: self.base_lr,
            warmup_epochs: warmup,
            milestones: [m0, m1],
            epochs: self.epochs.max(m1),
            optimizer: self.optimizer,
            lambda_cls: self.lambda_cls,
            lambda_reg: self.lambda_reg,
            focal_gamma: self.focal_gamma,
            ..TrainConfig::default()
        }
    }
}

/// Rendered observations for every frame and agent of a scenario, indexed
/// `[frame][agent position]`.
pub fn render_all(scenario: &Scenario, noise_seed: u64) -> Vec<Vec<Observation>> {
    scenario
        .frames
        .iter()
        .map(|f| {
            scenario
                .agents
                .iter()
                .map(|a| render_observation(f, a, &scenario.sensor, &scenario.grid, noise_seed))
                .collect()
        })
        .collect()
}

/// Objects of `frame` visible to any agent at the given positions.
pub fn ground_truth(scenario: &Scenario, frame: usize, agents: &[usize], min_rays: usize) -> Vec<ObjectBox> {
    let f = &scenario.frames[frame];
    let vis = visible_objects(f, agents.iter().map(|&i| &scenario.agents[i]), &scenario.sensor, min_rays);
    f.objects.iter().zip(vis).filter(|(_, v)| *v).map(|(o, _)| *o).collect()
}

struct Sample {
    scenario: usize,
    frame: usize,
    view: usize,
    solo: bool,
}

/// Trains `family`'s base model. Deterministic in `(world, family, cfg)`.
pub fn pretrain_family(world: &WorldConfig, family: &EncoderFamily, cfg: &PretrainConfig) -> Result<(ModelWeights, TrainLog)> {
    let homog = world.homogeneous(&family.id);
    let schedule = cfg.schedule();
    schedule.validate()?;
    let mut scenarios = Vec::with_capacity(cfg.scenarios);
    for s in 0..cfg.scenarios {
        scenarios.push(generate_scenario(&homog, homog.max_support, derive(cfg.seed, s as u64))?);
    }
    let observations: Vec<_> = scenarios.iter().map(|s| render_all(s, s.seed)).collect();
    let mut rng = seeded(derive(cfg.seed, 0x9E7));
    let mut samples = Vec::new();
    for (si, s) in scenarios.iter().enumerate() {
        for frame in 0..s.frames.len() {
            for view in 0..s.agents.len() {
                samples.push(Sample {
                    scenario: si,
                    frame,
                    view,
                    solo: false,
                });
            }
        }
    }
    let mut weights = ModelWeights::init(family, derive(cfg.seed, 0xBA5E));
    let mut state = OptimState::new();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        let lr = lr_schedule(epoch, &schedule)?;
        samples.shuffle(&mut rng);
        for s in samples.iter_mut() {
            s.solo = rng.random_bool(cfg.solo_fraction);
        }
        let (mut loss_sum, mut positives) = (0.0, 0);
        for s in &samples {
            let scenario = &scenarios[s.scenario];
            let obs = &observations[s.scenario][s.frame];
            let mut members = vec![s.view];
            if !s.solo {
                members.extend((0..scenario.agents.len()).filter(|&i| i != s.view));
            }
            let gt = ground_truth(scenario, s.frame, &members, homog.min_visible_rays);
            let targets = assign_targets(&PseudoLabelSet::from_boxes(&gt, s.frame), &scenario.grid);

            let mut tape = Tape::new();
            let enc = weights.encoder.bind(&mut tape, family, true);
            let fusion = weights.fusion.bind(&mut tape, true);
            let head = weights.head.bind(&mut tape, true);
            let feats: Vec<Var> = members
                .iter()
                .map(|&m| {
                    let x = tape.constant(obs[m].grid.clone());
                    encode_on(&mut tape, family, &enc, x)
                })
                .collect::<Result<_>>()?;
            let fused = fuse_on(&mut tape, &fusion, &feats)?;
            let (o, r) = detect_head_on(&mut tape, &head, fused)?;
            let loss = detection_loss_on(&mut tape, o, r, &targets, cfg.lambda_cls, cfg.lambda_reg, cfg.focal_gamma)?;
            let value = tape.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    seed: cfg.seed,
                });
            }
            let grads = tape.backward(loss.total)?;
            let vars: Vec<Var> = enc.params.iter().chain(&fusion.params).chain(&head.params).copied().collect();
            let g: Vec<_> = vars.iter().map(|&v| grads.get(v)).collect();
            state.step(&cfg.optimizer, lr, weights.tensors_mut(), &g);
            loss_sum += value;
            positives += targets.positives;
            step += 1;
        }
        log::info!("pretrain {}: epoch {epoch} lr {lr:e} loss {:.5}", family.id, loss_sum / samples.len() as f64);
        log.epochs.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / samples.len().max(1) as f64,
            positives,
        });
    }
    Ok((weights, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percept::FamilyRegistry;

    fn tiny() -> (WorldConfig, PretrainConfig) {
        let world = WorldConfig {
            grid_size: 12,
            object_count: [2, 3],
            ego_range: 6.0,
            collaborator_range: 6.0,
            query_frames: 2,
            max_support: 1,
            ..Default::default()
        };
        let cfg = PretrainConfig {
            scenarios: 1,
            epochs: 3,
            ..Default::default()
        };
        (world, cfg)
    }

    #[test]
    fn schedule_scales_with_epochs() {
        let s = PretrainConfig::default().schedule();
        assert_eq!((s.warmup_epochs, s.milestones, s.epochs), (4, [6, 8], 10));
        s.validate().unwrap();
        let short = PretrainConfig { epochs: 2, ..Default::default() }.schedule();
        short.validate().unwrap();
    }

    #[test]
    fn pretraining_is_deterministic_and_logged() {
        let (world, cfg) = tiny();
        let fam = FamilyRegistry::default().get("lp").unwrap().clone();
        let (a, log_a) = pretrain_family(&world, &fam, &cfg).unwrap();
        let (b, log_b) = pretrain_family(&world, &fam, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.epochs.len(), 3);
        assert_ne!(a.to_bytes(), ModelWeights::init(&fam, 0).to_bytes());
    }

    #[test]
    fn ground_truth_is_union_of_visible() {
        let (world, _) = tiny();
        let s = generate_scenario(&world, 0, 3).unwrap();
        let all: Vec<usize> = (0..s.agents.len()).collect();
        let union = ground_truth(&s, 0, &all, world.min_visible_rays);
        let ego_only = ground_truth(&s, 0, &[0], world.min_visible_rays);
        assert!(ego_only.len() <= union.len());
        assert!(ego_only.iter().all(|b| union.contains(b)));
    }
}
