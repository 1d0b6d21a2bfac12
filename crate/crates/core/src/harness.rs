//! Experiment harness: TOML configuration, the on-disk layout, and one
//! function per CLI command. Every report carries the SHA-256 fingerprint of
//! the canonical JSON form of the configuration that produced it.
//!
//! Outputs never contain timestamps or host data, so rerunning a command with
//! the same configuration rewrites byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{aggregate, cross_matrix, iou_key, matrix_csv, matrix_plot_data, off_diagonal_median, Report, ScenarioResult};
use crate::percept::{FamilyRegistry, ModelWeights};
use crate::pretrain::{ground_truth, pretrain_family, PretrainConfig};
use crate::protocol::{payload_report, run_scenario, run_with_adapters, write_trace, Mode, Models, PayloadRow, ProtocolConfig, RunOutput};
use crate::rng::derive;
use crate::selftrain::PseudoMode;
use crate::world::{generate_scenario, Scenario, WorldConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Environment variable that overrides the output root.
pub const OUTPUT_ENV: &str = "PHCP_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Each seed generates its own `scenarios` scenarios and drives sensor
    /// noise and adapter initialization.
    pub seeds: Vec<u64>,
    pub scenarios: usize,
    /// Support frames per collaborator.
    pub k: usize,
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seeds: vec![1, 2, 3, 4, 5],
            scenarios: 8,
            k: 5,
            world: WorldConfig::default(),
            pretrain: PretrainConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() || self.scenarios == 0 {
            return Err(Error::Config("need at least one seed and one scenario".into()));
        }
        if self.k > self.world.max_support {
            return Err(Error::Config(format!("k = {} exceeds world.max_support = {}", self.k, self.world.max_support)));
        }
        self.world.validate()?;
        self.protocol.train.validate()?;
        let d = &self.protocol.decode;
        if !(0.0..=1.0).contains(&d.conf_floor) || !(0.0..=1.0).contains(&d.nms_iou) {
            return Err(Error::Config("decode thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the configuration's JSON serialization.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Fingerprint of only the parts the base models depend on.
    pub fn model_fingerprint(&self) -> String {
        let json = serde_json::to_vec(&(&self.world, &self.pretrain)).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Ego family first, then each distinct collaborator family.
    pub fn families(&self) -> Vec<String> {
        let mut f = vec![self.world.ego_family.clone()];
        for c in &self.world.collaborator_families {
            if !f.contains(c) {
                f.push(c.clone());
            }
        }
        f
    }
}

/// One scenario of the suite with the seed that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub seed: u64,
    pub scenario: Scenario,
}

/// The evaluation suite: `scenarios` scenarios per seed, with `k` support frames.
pub fn build_suite(cfg: &ExperimentConfig, k: usize) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(cfg.seeds.len() * cfg.scenarios);
    for &seed in &cfg.seeds {
        for i in 0..cfg.scenarios {
            let mut scenario = generate_scenario(&cfg.world, k, derive(seed, i as u64))?;
            scenario.scenario_id = format!("s{seed}-{i}");
            out.push(SuiteEntry { seed, scenario });
        }
    }
    Ok(out)
}

/// Trains every family the world uses.
pub fn pretrain_models(cfg: &ExperimentConfig) -> Result<(Models, BTreeMap<String, crate::selftrain::TrainLog>)> {
    let registry = FamilyRegistry::default();
    let trained: Vec<_> = cfg
        .families()
        .par_iter()
        .map(|f| {
            let fam = registry.get(f)?;
            pretrain_family(&cfg.world, fam, &cfg.pretrain).map(|(w, log)| (f.clone(), w, log))
        })
        .collect::<Result<_>>()?;
    let mut models = Models::new(registry);
    let mut logs = BTreeMap::new();
    for (f, w, log) in trained {
        models.insert(w)?;
        logs.insert(f, log);
    }
    Ok((models, logs))
}

/// Ground truth of every query frame: objects visible to any agent.
pub fn query_ground_truth(scenario: &Scenario, min_rays: usize) -> Vec<Vec<crate::percept::ObjectBox>> {
    let all: Vec<usize> = (0..scenario.agents.len()).collect();
    scenario.split.query.iter().map(|&f| ground_truth(scenario, f, &all, min_rays)).collect()
}

/// Runs `mode` over the suite and scores the query frames.
pub fn evaluate_suite(
    cfg: &ExperimentConfig,
    protocol: &ProtocolConfig,
    models: &Models,
    suite: &[SuiteEntry],
    mode: Mode,
) -> Result<(Report, Vec<RunOutput>)> {
    let runs: Vec<(ScenarioResult, RunOutput)> = suite
        .par_iter()
        .map(|e| {
            let out = run_scenario(&e.scenario, models, protocol, mode, e.seed)?;
            let gts = query_ground_truth(&e.scenario, cfg.world.min_visible_rays);
            let res = ScenarioResult::evaluate(&e.scenario.scenario_id, e.seed, &out.query_predictions(&e.scenario), &gts)?;
            Ok((res, out))
        })
        .collect::<Result<_>>()?;
    let (results, outputs): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok((aggregate(mode.label(), results, &cfg.fingerprint(), &cfg.seeds)?, outputs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub msap: BTreeMap<String, f64>,
    pub wsap: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn msap(&self, setting: &str, iou: f64) -> Option<f64> {
        self.row(setting).map(|r| r.msap[&iou_key(iou)])
    }

    pub fn wsap(&self, setting: &str, iou: f64) -> Option<f64> {
        self.row(setting).map(|r| r.wsap[&iou_key(iou)])
    }

    /// Metrics as rows and settings as columns, restricted to IoU `iou`.
    pub fn table_csv(&self, iou: f64) -> String {
        let key = iou_key(iou);
        let mut out = format!("# fingerprint {}\nmetric,{}\n", self.fingerprint, self.settings().join(","));
        for (name, pick) in [("mSAP", true), ("wSAP", false)] {
            let cells: Vec<String> = self
                .rows
                .iter()
                .map(|r| format!("{:.6}", if pick { r.msap[&key] } else { r.wsap[&key] }))
                .collect();
            let _ = writeln!(out, "{name}@{key},{}", cells.join(","));
        }
        out
    }

    /// One row per setting with every threshold.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# fingerprint {}\nsetting,iou,msap,wsap\n", self.fingerprint);
        for r in &self.rows {
            for (k, v) in &r.msap {
                let _ = writeln!(out, "{},{},{:.6},{:.6}", r.setting, k, v, r.wsap[k]);
            }
        }
        out
    }

    fn settings(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.setting.clone()).collect()
    }
}

fn ablation_row(setting: String, r: &Report) -> AblationRow {
    AblationRow {
        setting,
        msap: r.msap.clone(),
        wsap: r.wsap.clone(),
    }
}

/// Shot counts; `k = 0` is direct fusion.
pub fn ablate_shots(cfg: &ExperimentConfig, models: &Models, shots: &[usize]) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(shots.len());
    for &k in shots {
        let suite = build_suite(cfg, k)?;
        let mode = if k == 0 { Mode::Direct } else { Mode::Phcp };
        let (report, _) = evaluate_suite(cfg, &cfg.protocol, models, &suite, mode)?;
        log::info!("shots k={k}: mSAP@0.7 {:.4}", report.msap(0.7));
        rows.push(ablation_row(format!("k={k}"), &report));
    }
    Ok(AblationReport {
        ablation: "shots".into(),
        fingerprint: cfg.fingerprint(),
        seeds: cfg.seeds.clone(),
        rows,
    })
}

/// Hard thresholds plus soft labels.
pub fn ablate_threshold(cfg: &ExperimentConfig, models: &Models, suite: &[SuiteEntry], modes: &[PseudoMode]) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(modes.len());
    for &pm in modes {
        let mut protocol = cfg.protocol.clone();
        protocol.train.pseudo_mode = pm;
        let (report, _) = evaluate_suite(cfg, &protocol, models, suite, Mode::Phcp)?;
        let setting = match pm {
            PseudoMode::Hard { tau } => format!("tau={tau}"),
            PseudoMode::Soft { .. } => "soft".into(),
        };
        log::info!("threshold {setting}: mSAP@0.7 {:.4}", report.msap(0.7));
        rows.push(ablation_row(setting, &report));
    }
    Ok(AblationReport {
        ablation: "threshold".into(),
        fingerprint: cfg.fingerprint(),
        seeds: cfg.seeds.clone(),
        rows,
    })
}

pub fn default_threshold_modes() -> Vec<PseudoMode> {
    vec![
        PseudoMode::Hard { tau: 0.2 },
        PseudoMode::Hard { tau: 0.3 },
        PseudoMode::Hard { tau: 0.5 },
        PseudoMode::Hard { tau: 0.7 },
        PseudoMode::Soft {
            floor: PseudoMode::DEFAULT_SOFT_FLOOR,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrixReport {
    pub fingerprint: String,
    pub iou: f64,
    /// Scenario index within a seed.
    pub ids: Vec<String>,
    /// Per seed: `raw[i][j]` is AP on scenario j with adapters trained on i.
    pub raw: BTreeMap<u64, Vec<Vec<f64>>>,
    /// Seed average of the diagonal-normalized matrices.
    pub normalized: Vec<Vec<f64>>,
    pub off_diagonal_median: f64,
}

/// Per seed, trains adapters on each scenario and evaluates them on every
/// scenario of that seed.
pub fn cross_scenario(cfg: &ExperimentConfig, models: &Models, suite: &[SuiteEntry], iou: f64) -> Result<CrossMatrixReport> {
    let trained: Vec<RunOutput> = suite
        .par_iter()
        .map(|e| run_scenario(&e.scenario, models, &cfg.protocol, Mode::Phcp, e.seed))
        .collect::<Result<_>>()?;
    cross_scenario_from(cfg, models, suite, &trained, iou)
}

/// As [`cross_scenario`], reusing phcp runs aligned with `suite`.
pub fn cross_scenario_from(
    cfg: &ExperimentConfig,
    models: &Models,
    suite: &[SuiteEntry],
    trained: &[RunOutput],
    iou: f64,
) -> Result<CrossMatrixReport> {
    if trained.len() != suite.len() || trained.iter().any(|t| t.mode != Mode::Phcp) {
        return Err(Error::invalid("cross matrix needs one phcp run per suite entry"));
    }
    let mut raw = BTreeMap::new();
    let mut sum: Option<Vec<Vec<f64>>> = None;
    for &seed in &cfg.seeds {
        let idx: Vec<usize> = (0..suite.len()).filter(|&i| suite[i].seed == seed).collect();
        let n = idx.len();
        let cells: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|c| {
                let (i, j) = (idx[c / n], idx[c % n]);
                let target = &suite[j].scenario;
                let out = run_with_adapters(target, models, &cfg.protocol, trained[i].registry.clone(), seed)?;
                let gts = query_ground_truth(target, cfg.world.min_visible_rays);
                crate::eval::ap_at_iou(&out.query_predictions(target), &gts, iou)
            })
            .collect::<Result<_>>()?;
        let m: Vec<Vec<f64>> = cells.chunks(n).map(<[f64]>::to_vec).collect();
        let norm = cross_matrix(&m)?;
        match sum.as_mut() {
            None => sum = Some(norm),
            Some(s) => {
                for (srow, nrow) in s.iter_mut().zip(&norm) {
                    for (a, b) in srow.iter_mut().zip(nrow) {
                        *a += b;
                    }
                }
            }
        }
        raw.insert(seed, m);
    }
    let count = cfg.seeds.len() as f64;
    let normalized: Vec<Vec<f64>> = sum
        .expect("at least one seed")
        .into_iter()
        .enumerate()
        .map(|(i, row)| row.into_iter().enumerate().map(|(j, v)| if i == j { 1.0 } else { v / count }).collect())
        .collect();
    let median = off_diagonal_median(&normalized).unwrap_or(1.0);
    Ok(CrossMatrixReport {
        fingerprint: cfg.fingerprint(),
        iou,
        ids: (0..cfg.scenarios).map(|i| format!("sc{i}")).collect(),
        raw,
        normalized,
        off_diagonal_median: median,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub fingerprint: String,
    pub rows: Vec<PayloadRow>,
}

impl BandwidthReport {
    pub fn bytes_per_frame(&self, mode: Mode, kind: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.mode == mode.label() && r.kind == kind)
            .map(|r| r.bytes_per_frame)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# fingerprint {}\nmode,kind,messages,frames,bytes_per_message,bytes_per_frame\n", self.fingerprint);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3},{:.3}",
                r.mode, r.kind, r.messages, r.frames, r.bytes_per_message, r.bytes_per_frame
            );
        }
        out
    }
}

/// Payload statistics of every mode over `suite`.
pub fn bandwidth(cfg: &ExperimentConfig, models: &Models, suite: &[SuiteEntry]) -> Result<BandwidthReport> {
    let mut rows = Vec::new();
    for mode in [Mode::Early, Mode::Phcp, Mode::Direct, Mode::Late] {
        let outs: Vec<RunOutput> = suite
            .par_iter()
            .map(|e| run_scenario(&e.scenario, models, &cfg.protocol, mode, e.seed))
            .collect::<Result<_>>()?;
        // Frame numbers repeat across scenarios, so count frames per scenario.
        let mut per_kind: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
        for o in &outs {
            for r in payload_report(mode.label(), o.trace.iter().map(|t| &t.summary)) {
                let e = per_kind.entry(r.kind).or_default();
                e.0 += r.messages;
                e.1 += r.frames;
                e.2 += (r.bytes_per_message * r.messages as f64).round() as usize;
            }
        }
        for (kind, (messages, frames, bytes)) in per_kind {
            rows.push(PayloadRow {
                mode: mode.label().into(),
                kind,
                messages,
                frames,
                bytes_per_message: bytes as f64 / messages as f64,
                bytes_per_frame: bytes as f64 / frames as f64,
            });
        }
    }
    Ok(BandwidthReport {
        fingerprint: cfg.fingerprint(),
        rows,
    })
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Directory layout under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn scenario_path(&self, id: &str) -> PathBuf {
        self.data_dir().join(format!("{id}.json"))
    }

    pub fn model_path(&self, family: &str) -> PathBuf {
        self.root.join("models").join(format!("{family}.bin"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn manifest_path(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub outputs: Vec<ManifestEntry>,
}

/// Collects written files and records them in the command's manifest.
pub struct Outputs<'a> {
    layout: &'a Layout,
    written: Vec<ManifestEntry>,
}

impl<'a> Outputs<'a> {
    pub fn new(layout: &'a Layout) -> Self {
        Self {
            layout,
            written: Vec::new(),
        }
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.record(path, bytes);
        Ok(())
    }

    fn record(&mut self, path: &Path, bytes: &[u8]) {
        let rel = path.strip_prefix(&self.layout.root).unwrap_or(path);
        self.written.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.written.iter().map(|e| self.layout.root.join(&e.path)).collect()
    }

    pub fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            fingerprint: cfg.fingerprint(),
            seeds: cfg.seeds.clone(),
            config: cfg.clone(),
            outputs: self.written.clone(),
        };
        let path = self.layout.manifest_path(command);
        let json = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&path, json.as_bytes())?;
        self.record(&path, json.as_bytes());
        Ok(self.paths())
    }
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// `gen-data`: writes every suite scenario.
pub fn cmd_gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let mut out = Outputs::new(layout);
    for e in build_suite(cfg, cfg.k)? {
        out.write(&layout.scenario_path(&e.scenario.scenario_id), e.scenario.to_json()?.as_bytes())?;
    }
    out.finish("gen-data", cfg)
}

/// `pretrain`: trains base models and their logs.
pub fn cmd_pretrain(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let (models, logs) = pretrain_models(cfg)?;
    let mut out = Outputs::new(layout);
    for f in cfg.families() {
        let (_, w) = models.stack(&f)?;
        out.write(&layout.model_path(&f), &w.to_bytes())?;
        let comment = format!("pretrain {f} model-fingerprint {}", cfg.model_fingerprint());
        out.write(&layout.logs().join(format!("pretrain-{f}.csv")), logs[&f].to_csv(Some(&comment)).as_bytes())?;
    }
    out.finish("pretrain", cfg)
}

pub fn load_models(cfg: &ExperimentConfig, layout: &Layout) -> Result<Models> {
    let registry = FamilyRegistry::default();
    let mut models = Models::new(registry.clone());
    for f in cfg.families() {
        let path = layout.model_path(&f);
        if !path.exists() {
            return Err(Error::MissingPrerequisite { path, command: "pretrain" });
        }
        models.insert(ModelWeights::load(&path, registry.get(&f)?)?)?;
    }
    Ok(models)
}

/// Loads the suite written by `gen-data`, checking it matches `cfg`.
pub fn load_suite(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<SuiteEntry>> {
    let expected = build_suite(cfg, cfg.k)?;
    let mut out = Vec::with_capacity(expected.len());
    for e in expected {
        let path = layout.scenario_path(&e.scenario.scenario_id);
        if !path.exists() {
            return Err(Error::MissingPrerequisite { path, command: "gen-data" });
        }
        let scenario = Scenario::from_json(&fs::read_to_string(&path)?)?;
        if scenario != e.scenario {
            return Err(Error::Config(format!(
                "{} was generated with a different configuration; rerun gen-data",
                path.display()
            )));
        }
        out.push(SuiteEntry { seed: e.seed, scenario });
    }
    Ok(out)
}

/// `run --mode`: scores one mode, writing reports, training logs and the
/// first scenario's trace.
pub fn cmd_run(cfg: &ExperimentConfig, layout: &Layout, mode: Mode) -> Result<(Report, Vec<PathBuf>)> {
    let models = load_models(cfg, layout)?;
    let suite = load_suite(cfg, layout)?;
    let (report, outputs) = evaluate_suite(cfg, &cfg.protocol, &models, &suite, mode)?;
    let mut out = Outputs::new(layout);
    let reports = layout.reports();
    out.write(&reports.join(format!("{mode}.json")), &json(&report)?)?;
    out.write(&reports.join(format!("{mode}.csv")), report.to_csv().as_bytes())?;
    for o in &outputs {
        for (agent, log) in &o.train_logs {
            let path = layout.logs().join(format!("{mode}-{}-agent{agent}.csv", o.scenario_id));
            out.write(&path, log.to_csv(Some(&format!("fingerprint {}", report.fingerprint))).as_bytes())?;
        }
    }
    if let Some(first) = outputs.first() {
        let path = layout.traces().join(format!("{mode}-{}.trace", first.scenario_id));
        fs::create_dir_all(layout.traces())?;
        write_trace(&path, &first.scenario_id, mode.label(), &first.trace)?;
        let mut index_path = path.clone().into_os_string();
        index_path.push(".index.json");
        for p in [path, PathBuf::from(index_path)] {
            let bytes = fs::read(&p)?;
            out.record(&p, &bytes);
        }
    }
    Ok((report, out.finish(&format!("run-{mode}"), cfg)?))
}

fn write_ablation(layout: &Layout, out: &mut Outputs<'_>, name: &str, report: &AblationReport, iou: f64) -> Result<()> {
    let reports = layout.reports();
    out.write(&reports.join(format!("{name}.json")), &json(report)?)?;
    out.write(&reports.join(format!("{name}.csv")), report.to_csv().as_bytes())?;
    out.write(&reports.join(format!("{name}-table.csv")), report.table_csv(iou).as_bytes())
}

pub fn cmd_ablate_shots(cfg: &ExperimentConfig, layout: &Layout, shots: &[usize]) -> Result<(AblationReport, Vec<PathBuf>)> {
    let models = load_models(cfg, layout)?;
    let report = ablate_shots(cfg, &models, shots)?;
    let mut out = Outputs::new(layout);
    write_ablation(layout, &mut out, "ablate-shots", &report, 0.7)?;
    Ok((report, out.finish("ablate-shots", cfg)?))
}

pub fn cmd_ablate_threshold(cfg: &ExperimentConfig, layout: &Layout, modes: &[PseudoMode]) -> Result<(AblationReport, Vec<PathBuf>)> {
    let models = load_models(cfg, layout)?;
    let suite = load_suite(cfg, layout)?;
    let report = ablate_threshold(cfg, &models, &suite, modes)?;
    let mut out = Outputs::new(layout);
    write_ablation(layout, &mut out, "ablate-threshold", &report, 0.7)?;
    Ok((report, out.finish("ablate-threshold", cfg)?))
}

pub fn cmd_cross_matrix(cfg: &ExperimentConfig, layout: &Layout, iou: f64) -> Result<(CrossMatrixReport, Vec<PathBuf>)> {
    let models = load_models(cfg, layout)?;
    let suite = load_suite(cfg, layout)?;
    let report = cross_scenario(cfg, &models, &suite, iou)?;
    let mut out = Outputs::new(layout);
    let reports = layout.reports();
    out.write(&reports.join("cross-matrix.json"), &json(&report)?)?;
    out.write(
        &reports.join("cross-matrix.csv"),
        matrix_csv(&report.ids, &report.normalized, &report.fingerprint).as_bytes(),
    )?;
    out.write(
        &reports.join("cross-matrix.plot.csv"),
        matrix_plot_data(&report.normalized, &report.fingerprint).as_bytes(),
    )?;
    Ok((report, out.finish("cross-matrix", cfg)?))
}

/// `bandwidth`: payload statistics over the first seed's scenarios.
pub fn cmd_bandwidth(cfg: &ExperimentConfig, layout: &Layout) -> Result<(BandwidthReport, Vec<PathBuf>)> {
    let models = load_models(cfg, layout)?;
    let suite = load_suite(cfg, layout)?;
    let first: Vec<SuiteEntry> = suite.into_iter().filter(|e| e.seed == cfg.seeds[0]).collect();
    let report = bandwidth(cfg, &models, &first)?;
    let mut out = Outputs::new(layout);
    out.write(&layout.reports().join("bandwidth.json"), &json(&report)?)?;
    out.write(&layout.reports().join("bandwidth.csv"), report.to_csv().as_bytes())?;
    Ok((report, out.finish("bandwidth", cfg)?))
}
