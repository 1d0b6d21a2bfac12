//! Detection metrics: AP at an IoU threshold, mSAP/wSAP aggregation over
//! scenarios, and the diagonal-normalized cross-scenario matrix.
//!
//! Conventions: no ground truth and no predictions scores 1.0; no ground truth
//! with predictions scores 0.0. wSAP is the minimum scenario AP.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::percept::{rotated_iou, DetectionSet, ObjectBox};

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Map key for an IoU threshold, e.g. `"0.5"`.
pub fn iou_key(iou: f64) -> String {
    format!("{iou:.1}")
}

/// Greedy per-frame matching: predictions in descending confidence each take
/// the highest-IoU unmatched ground truth with IoU ≥ `iou`. Returns, in
/// prediction order, the matched ground-truth index or `None`.
pub fn match_frame(preds: &DetectionSet, gts: &[ObjectBox], iou: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.detections.len()).collect();
    order.sort_by(|&a, &b| preds.detections[b].confidence.total_cmp(&preds.detections[a].confidence));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.detections.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = rotated_iou(&preds.detections[i].bbox, gt).unwrap_or(0.0);
            if v >= iou && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

/// Ranked `(confidence, is_true_positive)` over all frames plus the GT count.
fn ranked(preds: &[DetectionSet], gts: &[Vec<ObjectBox>], iou: f64) -> Result<(Vec<(f64, bool)>, usize)> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!("{} prediction frames vs {} ground-truth frames", preds.len(), gts.len())));
    }
    let mut hits = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        for (d, m) in p.detections.iter().zip(match_frame(p, g, iou)) {
            hits.push((d.confidence, m.is_some()));
        }
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((hits, gts.iter().map(Vec::len).sum()))
}

/// All-point interpolated AP over the global confidence ranking.
pub fn ap_at_iou(preds: &[DetectionSet], gts: &[Vec<ObjectBox>], iou: f64) -> Result<f64> {
    let (hits, n_gt) = ranked(preds, gts, iou)?;
    if n_gt == 0 {
        return Ok(if hits.is_empty() { 1.0 } else { 0.0 });
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in hits.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// Fraction of `gts` entries flagged in `subset` that some prediction matches.
pub fn recall_on(preds: &[DetectionSet], gts: &[Vec<ObjectBox>], subset: &[Vec<bool>], iou: f64) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, g), s) in preds.iter().zip(gts).zip(subset) {
        let matched: Vec<usize> = match_frame(p, g, iou).into_iter().flatten().collect();
        for (gi, &flag) in s.iter().enumerate() {
            if flag {
                total += 1;
                hit += matched.contains(&gi) as usize;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMatch {
    pub frame: usize,
    pub predictions: usize,
    pub ground_truth: usize,
    /// True positives at IoU 0.5.
    pub matched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario_id: String,
    pub seed: u64,
    pub ap: BTreeMap<String, f64>,
    pub frame_count: usize,
    pub frames: Vec<FrameMatch>,
}

impl ScenarioResult {
    pub fn evaluate(scenario_id: &str, seed: u64, preds: &[DetectionSet], gts: &[Vec<ObjectBox>]) -> Result<Self> {
        let mut ap = BTreeMap::new();
        for iou in IOU_THRESHOLDS {
            ap.insert(iou_key(iou), ap_at_iou(preds, gts, iou)?);
        }
        let frames = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| FrameMatch {
                frame: p.frame,
                predictions: p.len(),
                ground_truth: g.len(),
                matched: match_frame(p, g, 0.5).iter().flatten().count(),
            })
            .collect();
        Ok(Self {
            scenario_id: scenario_id.to_string(),
            seed,
            ap,
            frame_count: preds.len(),
            frames,
        })
    }

    pub fn ap(&self, iou: f64) -> f64 {
        self.ap[&iou_key(iou)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub scenarios: Vec<ScenarioResult>,
    pub msap: BTreeMap<String, f64>,
    pub wsap: BTreeMap<String, f64>,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
}

pub fn aggregate(mode: &str, results: Vec<ScenarioResult>, fingerprint: &str, seeds: &[u64]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::invalid("cannot aggregate zero scenarios"));
    }
    let mut msap = BTreeMap::new();
    let mut wsap = BTreeMap::new();
    for iou in IOU_THRESHOLDS {
        let vals: Vec<f64> = results.iter().map(|r| r.ap(iou)).collect();
        msap.insert(iou_key(iou), vals.iter().sum::<f64>() / vals.len() as f64);
        wsap.insert(iou_key(iou), vals.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    Ok(Report {
        mode: mode.to_string(),
        scenarios: results,
        msap,
        wsap,
        fingerprint: fingerprint.to_string(),
        seeds: seeds.to_vec(),
    })
}

impl Report {
    pub fn msap(&self, iou: f64) -> f64 {
        self.msap[&iou_key(iou)]
    }

    pub fn wsap(&self, iou: f64) -> f64 {
        self.wsap[&iou_key(iou)]
    }

    /// `scenario,mode,iou,ap` rows after a fingerprint comment.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# fingerprint {}\nscenario,mode,iou,ap\n", self.fingerprint);
        for r in &self.scenarios {
            for (k, v) in &r.ap {
                let _ = writeln!(out, "{},{},{},{:.6}", r.scenario_id, self.mode, k, v);
            }
        }
        out
    }
}

/// Normalizes `raw[i][j]` (trained on i, evaluated on j) by the diagonal `raw[j][j]`.
pub fn cross_matrix(raw: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = raw.len();
    if raw.iter().any(|row| row.len() != n) {
        return Err(Error::invalid("cross matrix must be square"));
    }
    for j in 0..n {
        if !(raw[j][j] > 0.0) {
            return Err(Error::DegenerateDiagonal(j));
        }
    }
    Ok((0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { raw[i][j] / raw[j][j] }).collect())
        .collect())
}

/// Median of the off-diagonal entries.
pub fn off_diagonal_median(m: &[Vec<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = m
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, &x)| x))
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn matrix_csv(ids: &[String], m: &[Vec<f64>], fingerprint: &str) -> String {
    let mut out = format!("# fingerprint {fingerprint}\ntrain\\eval,{}\n", ids.join(","));
    for (id, row) in ids.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{id},{}", cells.join(","));
    }
    out
}

/// `x,y,value` triples: x is the evaluation scenario index, y the training one.
pub fn matrix_plot_data(m: &[Vec<f64>], fingerprint: &str) -> String {
    let mut out = format!("# fingerprint {fingerprint}\nx,y,value\n");
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{j},{i},{v:.6}");
        }
    }
    out
}
