use super::PseudoLabelSet;
use crate::error::Result;
use crate::ndgrad::{Tape, Tensor, Unary, Var};
use crate::percept::{regression_target, RawHeadOutput, REGRESSION_CHANNELS};
use crate::world::GridMeta;

/// Dense training targets for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[1, H, W]` classification targets.
    pub cls: Tensor,
    /// `[6, H, W]` regression targets, zero off positives.
    pub reg: Tensor,
    /// `[1, H, W]` indicator of positive cells.
    pub mask: Tensor,
    pub positives: usize,
    /// Labels whose center fell outside the grid.
    pub skipped: usize,
}

/// Center-cell assignment. When two labels share a cell the higher target wins.
pub fn assign_targets(labels: &PseudoLabelSet, meta: &GridMeta) -> Targets {
    let (h, w) = (meta.rows, meta.cols);
    let mut cls = Tensor::zeros(&[1, h, w]);
    let mut reg = Tensor::zeros(&[REGRESSION_CHANNELS, h, w]);
    let mut mask = Tensor::zeros(&[1, h, w]);
    let mut skipped = 0;
    for l in &labels.labels {
        let Some((r, c)) = meta.cell_of(l.bbox.center_x, l.bbox.center_y) else {
            skipped += 1;
            continue;
        };
        if mask.at3(0, r, c) > 0.0 && cls.at3(0, r, c) >= l.target {
            continue;
        }
        cls.set3(0, r, c, l.target);
        mask.set3(0, r, c, 1.0);
        for (ch, v) in regression_target(&l.bbox, meta, r, c).into_iter().enumerate() {
            reg.set3(ch, r, c, v);
        }
    }
    if skipped > 0 {
        log::warn!("frame {}: {skipped} label(s) outside the grid skipped", labels.frame);
    }
    let positives = mask.data().iter().filter(|&&m| m > 0.0).count();
    Targets {
        cls,
        reg,
        mask,
        positives,
        skipped,
    }
}

/// Scalar loss nodes for one frame.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `λ_cls · mean focal-BCE + λ_reg · (smooth-L1 summed over channels, averaged over positives)`.
pub fn detection_loss_on(
    tape: &mut Tape,
    objectness: Var,
    regression: Var,
    targets: &Targets,
    lambda_cls: f64,
    lambda_reg: f64,
    focal_gamma: f64,
) -> Result<LossBreakdown> {
    let focal = tape.focal_bce(objectness, &targets.cls, focal_gamma)?;
    let cls = tape.mean(focal);
    let reg = if targets.positives == 0 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let t = tape.constant(targets.reg.clone());
        let m = tape.constant(targets.mask.clone());
        let diff = tape.sub(regression, t)?;
        let diff = tape.mul(diff, m)?;
        let per = tape.unary(diff, Unary::SmoothL1);
        let s = tape.sum(per);
        tape.scale(s, 1.0 / targets.positives as f64)
    };
    let a = tape.scale(cls, lambda_cls);
    let b = tape.scale(reg, lambda_reg);
    let total = tape.add(a, b)?;
    Ok(LossBreakdown { total, cls, reg })
}

/// Loss value of a raw head output against labels.
pub fn detection_loss(
    raw: &RawHeadOutput,
    labels: &PseudoLabelSet,
    meta: &GridMeta,
    lambda_cls: f64,
    lambda_reg: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let o = tape.constant(raw.objectness.clone());
    let r = tape.constant(raw.regression.clone());
    let t = assign_targets(labels, meta);
    let l = detection_loss_on(&mut tape, o, r, &t, lambda_cls, lambda_reg, 2.0)?;
    Ok(tape.value(l.total).item())
}
