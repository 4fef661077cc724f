//! Segmentation cross entropy and the pixel-prototype contrastive loss.

use std::sync::Arc;

use log::debug;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::L2_EPS;
use crate::tensor::{Scalar, Tensor};

/// Auxiliary loss settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxConfig {
    pub tau: f64,
    /// L2-normalize pixel vectors and prototypes before dot products.
    pub normalize: bool,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self { tau: 0.07, normalize: true }
    }
}

fn binary_target<F: Scalar>(mask: &Tensor<F>) -> Result<Arc<Vec<F>>> {
    if let Some(v) = mask.data().iter().find(|&&v| v != F::zero() && v != F::one()) {
        return Err(Error::Input(format!("mask value {v:?} is not binary")));
    }
    Ok(Arc::new(mask.data().to_vec()))
}

/// Mean BCE between `logits: [H×W]` and a binary mask.
pub fn seg_loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, mask: &Tensor<F>) -> Result<Var> {
    if tape.shape(logits) != mask.shape() {
        return Err(Error::dim("seg_loss", tape.shape(logits), mask.shape()));
    }
    let t = binary_target(mask)?;
    tape.bce_with_logits(logits, t)
}

/// Nearest-neighbor resample of a binary `[H×W]` mask to `h×w`.
pub fn downsample_nearest<F: Scalar>(mask: &Tensor<F>, h: usize, w: usize) -> Result<Vec<bool>> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::dim("downsample mask", s, &[h, w]));
    }
    let (mh, mw) = (s[0], s[1]);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        // Source pixel containing the target pixel center.
        let sy = ((2 * y + 1) * mh / (2 * h)).min(mh - 1);
        for x in 0..w {
            let sx = ((2 * x + 1) * mw / (2 * w)).min(mw - 1);
            out.push(mask.data()[sy * mw + sx] > F::c(0.5));
        }
    }
    Ok(out)
}

/// One contrastive direction: `anchors` against `proto` with `others` as
/// distractors, `−mean log(e^{a·p/τ} / (e^{a·p/τ} + Σ e^{a·o/τ}))`.
fn info_nce_term<F: Scalar>(tape: &mut Tape<F>, anchors: Var, proto: Var, others: Var, tau: f64) -> Result<Var> {
    let same = tape.matmul_t(anchors, proto, false, true)?;
    let opp = tape.matmul_t(anchors, others, false, true)?;
    let logits = tape.concat(&[same, opp], 1)?;
    let logits = tape.scale(logits, F::c(1.0 / tau));
    let lp = tape.log_softmax(logits, 1)?;
    let first = tape.narrow(lp, 1, 0, 1)?;
    let m = tape.mean(first);
    Ok(tape.scale(m, -F::one()))
}

fn mean_rows<F: Scalar>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let w = tape.constant_vec(&[1, n], vec![F::c(1.0 / n as f64); n])?;
    tape.matmul(w, x)
}

/// Contrastive loss on `y1: [h×w×d]` against the mask. `None` when either
/// pixel set is empty after downsampling.
pub fn aux_loss<F: Scalar>(tape: &mut Tape<F>, y1: Var, mask: &Tensor<F>, cfg: AuxConfig) -> Result<Option<Var>> {
    let s = tape.shape(y1).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("aux_loss", &s, &[0, 0, 0]));
    }
    binary_target(mask)?;
    let fg = downsample_nearest(mask, s[0], s[1])?;
    let pos: Vec<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
    let neg: Vec<usize> = (0..fg.len()).filter(|&i| !fg[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        debug!("aux loss skipped: {} positive, {} negative pixels", pos.len(), neg.len());
        return Ok(None);
    }
    let flat = tape.reshape(y1, &[s[0] * s[1], s[2]])?;
    let yp = tape.select_rows(flat, &pos)?;
    let yn = tape.select_rows(flat, &neg)?;
    let pp = mean_rows(tape, yp)?;
    let pn = mean_rows(tape, yn)?;
    let (yp, yn, pp, pn) = if cfg.normalize {
        let eps = F::c(L2_EPS);
        (
            tape.l2_normalize(yp, eps),
            tape.l2_normalize(yn, eps),
            tape.l2_normalize(pp, eps),
            tape.l2_normalize(pn, eps),
        )
    } else {
        (yp, yn, pp, pn)
    };
    let p2n = info_nce_term(tape, yp, pp, yn, cfg.tau)?;
    let n2p = info_nce_term(tape, yn, pn, yp, cfg.tau)?;
    Ok(Some(tape.add(p2n, n2p)?))
}

/// Per-image loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageLoss {
    pub seg: f64,
    /// Zero when the image was skipped.
    pub aux: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub seg: f64,
    pub aux: f64,
    pub lambda: f64,
    pub per_image: Vec<ImageLoss>,
}

/// `(1/B) Σ_j (seg_j + λ·aux_j)` as a graph node plus its numeric report.
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    seg: &[Var],
    aux: &[Option<Var>],
    lambda: f64,
) -> Result<(Var, LossReport)> {
    if seg.is_empty() || seg.len() != aux.len() {
        return Err(Error::Contract("total_loss needs one seg and one aux entry per image".into()));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("aux weight must be ≥ 0, got {lambda}")));
    }
    let b = seg.len() as f64;
    let mut per_image = Vec::with_capacity(seg.len());
    let mut terms = Vec::with_capacity(seg.len());
    for (&s, a) in seg.iter().zip(aux) {
        let sv = tape.value(s)[0].to_f64().unwrap_or(f64::NAN);
        let (term, av) = match a {
            Some(a) if lambda > 0.0 => {
                let av = tape.value(*a)[0].to_f64().unwrap_or(f64::NAN);
                let w = tape.scale(*a, F::c(lambda));
                (tape.add(s, w)?, av)
            }
            Some(a) => (s, tape.value(*a)[0].to_f64().unwrap_or(f64::NAN)),
            None => (s, 0.0),
        };
        per_image.push(ImageLoss { seg: sv, aux: av });
        terms.push(term);
    }
    let stacked = if terms.len() == 1 { terms[0] } else { tape.concat(&terms, 0)? };
    let total = tape.mean(stacked);
    let seg_mean = per_image.iter().map(|l| l.seg).sum::<f64>() / b;
    let aux_mean = per_image.iter().map(|l| l.aux).sum::<f64>() / b;
    let report = LossReport {
        total: tape.value(total)[0].to_f64().unwrap_or(f64::NAN),
        seg: seg_mean,
        aux: aux_mean,
        lambda,
        per_image,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {} (seg {}, aux {})",
            report.total, report.seg, report.aux
        )));
    }
    Ok((total, report))
}
