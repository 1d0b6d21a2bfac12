//! The two-stage collaboration protocol and its baselines.
//!
//! A [`CollabSession`] walks one scenario frame by frame. In `phcp` mode each
//! heterogeneous collaborator first spends `k` frames in Stage I, sending its
//! feature together with its group's detections while the ego predicts alone.
//! After the k-th frame the ego trains that collaborator's adapter once,
//! freezes it, and the collaborator switches to Stage II, sending features
//! only. The other modes never train anything.

mod message;
mod trace;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use message::{
    decode_message, encode_message, Message, MessageKind, MessageSummary, EMPTY_DETECTIONS_BYTES, HEADER_BYTES, MESSAGE_VERSION,
};
pub use trace::{payload_report, read_trace, write_trace, PayloadRow, TraceIndex, TraceIndexEntry, TraceRecord};

use crate::adapter::{adapter_forward, AdapterRegistry};
use crate::error::{Error, Result};
use crate::percept::{
    decode_nms, detect_head, encode, fuse, greedy_nms, DecodeConfig, DetectionSet, EncoderFamily, FamilyRegistry,
    FeatureMap, ModelWeights,
};
use crate::rng::derive;
use crate::selftrain::{build_support_set, fine_tune_adapter, StageOneRecord, TrainConfig, TrainLog};
use crate::world::{render_observation, AgentId, AgentSpec, Observation, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Phcp,
    /// Features fused as-is, zero-padded or truncated to the ego's width.
    Direct,
    /// Union of every agent's own detections, then NMS.
    Late,
    /// Raw scans merged into the ego's occupancy grid.
    Early,
    /// Upper bound: every agent re-assigned the ego's family.
    Homog,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Phcp, Mode::Direct, Mode::Late, Mode::Early, Mode::Homog];

    pub fn label(&self) -> &'static str {
        match self {
            Mode::Phcp => "phcp",
            Mode::Direct => "direct",
            Mode::Late => "late",
            Mode::Early => "early",
            Mode::Homog => "homog",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub decode: DecodeConfig,
    pub train: TrainConfig,
    /// Channel reduction ratio of the adapter's attention MLP.
    pub reduction: usize,
    /// One adapter per encoder family instead of per collaborator.
    pub share_by_family: bool,
    /// During Stage I, late-fuse received detections into the ego's output
    /// instead of predicting from the ego's feature alone.
    pub stage_one_late_fusion: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            train: TrainConfig::tuned(),
            reduction: 4,
            share_by_family: false,
            stage_one_late_fusion: false,
        }
    }
}

/// Pretrained base models keyed by family id.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub families: FamilyRegistry,
    weights: BTreeMap<String, ModelWeights>,
}

impl Models {
    pub fn new(families: FamilyRegistry) -> Self {
        Self {
            families,
            weights: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, weights: ModelWeights) -> Result<()> {
        weights.check_family(self.families.get(&weights.family)?)?;
        self.weights.insert(weights.family.clone(), weights);
        Ok(())
    }

    pub fn stack(&self, family: &str) -> Result<(&EncoderFamily, &ModelWeights)> {
        let fam = self.families.get(family)?;
        let w = self
            .weights
            .get(family)
            .ok_or_else(|| Error::MissingWeights(family.to_string()))?;
        Ok((fam, w))
    }

    /// Full single-family pipeline on already-encoded candidates.
    pub fn predict(&self, family: &str, candidates: &[FeatureMap], decode: &DecodeConfig, frame: usize) -> Result<DetectionSet> {
        let (_, w) = self.stack(family)?;
        let fused = fuse(candidates, &w.fusion)?;
        let raw = detect_head(&fused, &w.head)?;
        decode_nms(&raw, &fused.meta, decode, frame)
    }

    pub fn encode(&self, obs: &Observation, family: &str) -> Result<FeatureMap> {
        let (fam, w) = self.stack(family)?;
        encode(obs, fam, &w.encoder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollabPhase {
    StageOne { remaining: usize },
    StageTwo,
}

pub struct CollabSession<'a> {
    scenario: &'a Scenario,
    models: &'a Models,
    cfg: &'a ProtocolConfig,
    mode: Mode,
    seed: u64,
    established: bool,
    phases: BTreeMap<AgentId, CollabPhase>,
    registry: AdapterRegistry,
    stage_one: Vec<StageOneRecord>,
    ego_stage_one: Vec<(usize, FeatureMap)>,
    trace: Vec<TraceRecord>,
    train_logs: BTreeMap<AgentId, TrainLog>,
    training_calls: BTreeMap<AgentId, usize>,
}

impl<'a> CollabSession<'a> {
    pub fn new(scenario: &'a Scenario, models: &'a Models, cfg: &'a ProtocolConfig, mode: Mode, seed: u64) -> Result<Self> {
        let ego = scenario.ego();
        let (fam, _) = models.stack(&ego.encoder_family)?;
        if mode != Mode::Homog {
            for a in scenario.collaborators() {
                models.stack(&a.encoder_family)?;
            }
        }
        cfg.train.validate()?;
        Ok(Self {
            scenario,
            models,
            cfg,
            mode,
            seed,
            established: false,
            phases: BTreeMap::new(),
            registry: AdapterRegistry::new(fam.channels, cfg.reduction, derive(seed, 0xADA), cfg.share_by_family),
            stage_one: Vec::new(),
            ego_stage_one: Vec::new(),
            trace: Vec::new(),
            train_logs: BTreeMap::new(),
            training_calls: BTreeMap::new(),
        })
    }

    fn ego(&self) -> &'a AgentSpec {
        self.scenario.ego()
    }

    fn heterogeneous(&self, a: &AgentSpec) -> bool {
        a.encoder_family != self.ego().encoder_family
    }

    /// Handshake. In `phcp` mode heterogeneous collaborators enter Stage I for
    /// the scenario's `k` support frames (straight to Stage II when `k` is 0).
    pub fn establish(&mut self) -> Result<()> {
        let k = self.scenario.k();
        for a in self.scenario.collaborators() {
            let phase = if self.mode == Mode::Phcp && self.heterogeneous(a) && k > 0 {
                CollabPhase::StageOne { remaining: k }
            } else {
                CollabPhase::StageTwo
            };
            if self.mode == Mode::Phcp && self.heterogeneous(a) {
                let c = self.models.stack(&a.encoder_family)?.0.channels;
                self.registry.get_or_create(a.agent_id, &a.encoder_family, c)?;
            }
            self.phases.insert(a.agent_id, phase);
        }
        self.established = true;
        Ok(())
    }

    /// Handshake with adapters trained elsewhere: every collaborator starts
    /// in Stage II and no training happens.
    pub fn establish_with(&mut self, registry: AdapterRegistry) -> Result<()> {
        if self.mode != Mode::Phcp {
            return Err(Error::invalid("pretrained adapters only apply to phcp mode"));
        }
        self.registry = registry;
        for a in self.scenario.collaborators() {
            if self.heterogeneous(a) {
                let key = self.registry.key(a.agent_id, &a.encoder_family);
                if self.registry.get(&key).is_none() {
                    return Err(Error::invalid(format!("no adapter for agent {}", a.agent_id)));
                }
            }
            self.phases.insert(a.agent_id, CollabPhase::StageTwo);
        }
        self.established = true;
        Ok(())
    }

    pub fn phase(&self, agent: AgentId) -> Option<CollabPhase> {
        self.phases.get(&agent).copied()
    }

    pub fn registry(&self) -> &AdapterRegistry {
        &self.registry
    }

    /// Adapters the ego already holds, e.g. for agents outside this scenario.
    /// Only available before the handshake.
    pub fn registry_mut(&mut self) -> Result<&mut AdapterRegistry> {
        if self.established {
            return Err(Error::invalid("registry is owned by the running session"));
        }
        Ok(&mut self.registry)
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn train_logs(&self) -> &BTreeMap<AgentId, TrainLog> {
        &self.train_logs
    }

    /// Number of adapter trainings per collaborator.
    pub fn training_calls(&self) -> &BTreeMap<AgentId, usize> {
        &self.training_calls
    }

    fn send(&mut self, sender: AgentId, frame: usize, kind: MessageKind) -> Result<MessageKind> {
        let (msg, bytes) = Message::seal(sender, frame, kind)?;
        self.trace.push(TraceRecord {
            summary: msg.summary(),
            bytes,
        });
        Ok(msg.kind)
    }

    fn observe(&self, frame: usize, agent: &AgentSpec) -> Observation {
        let s = self.scenario;
        render_observation(&s.frames[frame], agent, &s.sensor, &s.grid, derive(s.seed, self.seed))
    }

    /// Detections of `agent`'s homogeneous group, fused with its own model.
    fn group_detections(&self, agent: &AgentSpec, feats: &BTreeMap<AgentId, FeatureMap>, frame: usize) -> Result<DetectionSet> {
        let mut group = vec![feats[&agent.agent_id].clone()];
        group.extend(
            self.scenario
                .collaborators()
                .filter(|b| b.agent_id != agent.agent_id && b.encoder_family == agent.encoder_family)
                .map(|b| feats[&b.agent_id].clone()),
        );
        self.models.predict(&agent.encoder_family, &group, &self.cfg.decode, frame)
    }

    /// Runs one frame and returns the ego's detections in the world frame.
    pub fn step(&mut self, frame: usize) -> Result<DetectionSet> {
        if !self.established {
            return Err(Error::SessionNotEstablished);
        }
        if frame >= self.scenario.frames.len() {
            return Err(Error::invalid(format!("frame {frame} out of range")));
        }
        let ego = self.ego();
        let ego_family = ego.encoder_family.as_str();
        let ego_obs = self.observe(frame, ego);
        let collabs: Vec<&AgentSpec> = self.scenario.collaborators().collect();
        match self.mode {
            Mode::Phcp => self.step_phcp(frame, &ego_obs, &collabs),
            Mode::Direct | Mode::Homog => {
                let ego_feat = self.models.encode(&ego_obs, ego_family)?;
                let c_ego = ego_feat.channels();
                let mut candidates = vec![ego_feat];
                for a in &collabs {
                    let fam = if self.mode == Mode::Homog { ego_family } else { a.encoder_family.as_str() };
                    let f = self.models.encode(&self.observe(frame, a), fam)?;
                    let MessageKind::StageTwo { mut feature } = self.send(a.agent_id, frame, MessageKind::StageTwo { feature: f })? else {
                        unreachable!("sent a feature message");
                    };
                    if feature.channels() != c_ego {
                        feature.values = feature.values.pad_or_truncate_channels(c_ego)?;
                        feature.family = ego_family.to_string();
                    }
                    candidates.push(feature);
                }
                self.models.predict(ego_family, &candidates, &self.cfg.decode, frame)
            }
            Mode::Late => {
                let ego_feat = self.models.encode(&ego_obs, ego_family)?;
                let mut all = self.models.predict(ego_family, &[ego_feat], &self.cfg.decode, frame)?;
                for a in &collabs {
                    let f = self.models.encode(&self.observe(frame, a), &a.encoder_family)?;
                    let own = self.models.predict(&a.encoder_family, &[f], &self.cfg.decode, frame)?;
                    let MessageKind::Late { detections } = self.send(a.agent_id, frame, MessageKind::Late { detections: own })? else {
                        unreachable!("sent a detection message");
                    };
                    all.detections.extend(detections.to_world().detections);
                }
                all.detections = greedy_nms(all.detections, self.cfg.decode.nms_iou);
                Ok(all)
            }
            Mode::Early => {
                let mut merged = ego_obs.clone();
                for a in &collabs {
                    let obs = self.observe(frame, a);
                    let MessageKind::Early { scan } = self.send(a.agent_id, frame, MessageKind::Early { scan: obs.scan })? else {
                        unreachable!("sent a scan message");
                    };
                    let occ = scan.rasterize(&self.scenario.grid);
                    for (m, o) in merged.grid.data_mut().iter_mut().zip(occ.data()) {
                        *m = m.max(*o);
                    }
                }
                let f = self.models.encode(&merged, ego_family)?;
                self.models.predict(ego_family, &[f], &self.cfg.decode, frame)
            }
        }
    }

    fn step_phcp(&mut self, frame: usize, ego_obs: &Observation, collabs: &[&AgentSpec]) -> Result<DetectionSet> {
        let ego_family = self.ego().encoder_family.clone();
        let ego_feat = self.models.encode(ego_obs, &ego_family)?;
        let mut own_feats = BTreeMap::new();
        for a in collabs {
            own_feats.insert(a.agent_id, self.models.encode(&self.observe(frame, a), &a.encoder_family)?);
        }
        let mut candidates = vec![ego_feat.clone()];
        let mut received_dets = Vec::new();
        let mut stage_one_any = false;
        for a in collabs {
            let feature = own_feats[&a.agent_id].clone();
            match self.phases[&a.agent_id] {
                CollabPhase::StageOne { .. } => {
                    stage_one_any = true;
                    let detections = self.group_detections(a, &own_feats, frame)?;
                    let MessageKind::StageOne { feature, detections } =
                        self.send(a.agent_id, frame, MessageKind::StageOne { feature, detections })?
                    else {
                        unreachable!("sent a Stage I message");
                    };
                    received_dets.extend(detections.to_world().detections.iter().copied());
                    self.stage_one.push(StageOneRecord {
                        frame,
                        sender: a.agent_id,
                        feature,
                        detections,
                    });
                }
                CollabPhase::StageTwo => {
                    let MessageKind::StageTwo { feature } = self.send(a.agent_id, frame, MessageKind::StageTwo { feature })? else {
                        unreachable!("sent a Stage II message");
                    };
                    if self.heterogeneous(a) {
                        let key = self.registry.key(a.agent_id, &a.encoder_family);
                        let params = self.registry.get(&key).ok_or_else(|| Error::invalid(format!("no adapter for {key:?}")))?;
                        candidates.push(adapter_forward(&feature, params, &ego_family)?);
                    } else {
                        candidates.push(feature);
                    }
                }
            }
        }
        // While any collaborator is still in Stage I the ego predicts from its
        // own feature alone.
        if stage_one_any {
            candidates.truncate(1);
        }
        let mut out = self.models.predict(&ego_family, &candidates, &self.cfg.decode, frame)?;
        if stage_one_any {
            self.ego_stage_one.push((frame, ego_feat));
            if self.cfg.stage_one_late_fusion {
                out.detections.extend(received_dets);
                out.detections = greedy_nms(out.detections, self.cfg.decode.nms_iou);
            }
        }
        for a in collabs {
            if let Some(CollabPhase::StageOne { remaining }) = self.phases.get(&a.agent_id).copied() {
                if remaining > 1 {
                    self.phases.insert(a.agent_id, CollabPhase::StageOne { remaining: remaining - 1 });
                } else {
                    self.train(a)?;
                    self.phases.insert(a.agent_id, CollabPhase::StageTwo);
                }
            }
        }
        Ok(out)
    }

    /// Trains and freezes `a`'s adapter on its Stage I traffic. Runs once.
    fn train(&mut self, a: &AgentSpec) -> Result<()> {
        if self.training_calls.contains_key(&a.agent_id) {
            return Err(Error::invalid(format!("adapter for agent {} already trained", a.agent_id)));
        }
        let frames: Vec<usize> = self
            .stage_one
            .iter()
            .filter(|r| r.sender == a.agent_id)
            .map(|r| r.frame)
            .collect();
        let ego_feats: Vec<FeatureMap> = frames
            .iter()
            .map(|f| {
                self.ego_stage_one
                    .iter()
                    .find(|(g, _)| g == f)
                    .map(|(_, x)| x.clone())
                    .ok_or_else(|| Error::invalid(format!("no ego feature for frame {f}")))
            })
            .collect::<Result<_>>()?;
        let ego_family = self.ego().encoder_family.clone();
        let support = build_support_set(a.agent_id, &ego_family, &frames, &self.stage_one, Some(&ego_feats), self.cfg.train.pseudo_mode)?;
        let key = self.registry.key(a.agent_id, &a.encoder_family);
        let init = self
            .registry
            .snapshot(&key)
            .ok_or_else(|| Error::invalid(format!("no adapter for {key:?}")))?;
        if self.registry.is_frozen(&key) {
            // A family-shared adapter already trained by a peer.
            self.training_calls.insert(a.agent_id, 0);
            return Ok(());
        }
        let (_, ego_w) = self.models.stack(&ego_family)?;
        let seed = derive(self.seed, 0x5EED ^ a.agent_id as u64);
        let (params, log) = fine_tune_adapter(&support, ego_w, init, &self.cfg.train, seed)?;
        self.registry.set(&key, params)?;
        self.registry.freeze(&key)?;
        self.train_logs.insert(a.agent_id, log);
        self.training_calls.insert(a.agent_id, 1);
        Ok(())
    }

    pub fn into_parts(self) -> (Vec<TraceRecord>, AdapterRegistry, BTreeMap<AgentId, TrainLog>, BTreeMap<AgentId, usize>) {
        (self.trace, self.registry, self.train_logs, self.training_calls)
    }
}

/// Everything one scenario run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub scenario_id: String,
    pub mode: Mode,
    pub seed: u64,
    /// Ego detections indexed by frame; frames the run skipped are empty.
    pub predictions: Vec<DetectionSet>,
    pub trace: Vec<TraceRecord>,
    pub registry: AdapterRegistry,
    pub train_logs: BTreeMap<AgentId, TrainLog>,
    pub training_calls: BTreeMap<AgentId, usize>,
}

impl RunOutput {
    /// Predictions on the scenario's query frames.
    pub fn query_predictions(&self, scenario: &Scenario) -> Vec<DetectionSet> {
        scenario.split.query.iter().map(|&f| self.predictions[f].clone()).collect()
    }
}

/// Runs the support frames, then the query frames.
pub fn run_scenario(scenario: &Scenario, models: &Models, cfg: &ProtocolConfig, mode: Mode, seed: u64) -> Result<RunOutput> {
    let mut session = CollabSession::new(scenario, models, cfg, mode, seed)?;
    session.establish()?;
    let frames: Vec<usize> = scenario.split.support.iter().chain(&scenario.split.query).copied().collect();
    let mut out = finish(session, scenario, frames.iter().copied(), mode, seed)?;
    out.predictions = spread(out.predictions, &frames, scenario.frames.len());
    Ok(out)
}

/// Places per-step predictions at their frame index; unvisited frames are empty.
fn spread(preds: Vec<DetectionSet>, frames: &[usize], total: usize) -> Vec<DetectionSet> {
    let mut full: Vec<DetectionSet> = (0..total).map(DetectionSet::empty).collect();
    for (p, &f) in preds.into_iter().zip(frames) {
        full[f] = p;
    }
    full
}

/// Runs only the query frames with adapters trained on another scenario.
pub fn run_with_adapters(
    scenario: &Scenario,
    models: &Models,
    cfg: &ProtocolConfig,
    registry: AdapterRegistry,
    seed: u64,
) -> Result<RunOutput> {
    let mut session = CollabSession::new(scenario, models, cfg, Mode::Phcp, seed)?;
    session.establish_with(registry)?;
    let frames = scenario.split.query.clone();
    let mut out = finish(session, scenario, frames.iter().copied(), Mode::Phcp, seed)?;
    out.predictions = spread(out.predictions, &frames, scenario.frames.len());
    Ok(out)
}

fn finish(
    mut session: CollabSession<'_>,
    scenario: &Scenario,
    frames: impl Iterator<Item = usize>,
    mode: Mode,
    seed: u64,
) -> Result<RunOutput> {
    let predictions = frames.map(|f| session.step(f)).collect::<Result<Vec<_>>>()?;
    let (trace, registry, train_logs, training_calls) = session.into_parts();
    Ok(RunOutput {
        scenario_id: scenario.scenario_id.clone(),
        mode,
        seed,
        predictions,
        trace,
        registry,
        train_logs,
        training_calls,
    })
}
