//! Central-difference verification of tape gradients.
//!
//! For each checked coordinate the analytic gradient is compared with
//! `(f(x+h) − f(x−h)) / 2h` using
//! `|a − fd| / max(|a|, |fd|, 1e-6)`. A coordinate whose perturbations
//! land on different sides of a piecewise kink (a ReLU changing sign, an
//! L2 norm crossing its floor) is excluded: neither side's derivative is
//! meaningful there.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::vocab;
use crate::error::{Error, Result};
use crate::losses::{aux_loss, seg_loss, total_loss, AuxConfig};
use crate::model::{CoupAlign, ModelConfig};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::{Graph, Mode};
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Denominator floor. At `h = 1e-5` central differences of an O(1) loss
/// carry roughly 1e-11 of rounding noise, so smaller gradients are compared
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub compared: usize,
    pub excluded: usize,
    /// `(label, analytic, finite difference)` at the worst coordinate.
    pub worst: Option<(String, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.compared += other.compared;
        self.excluded += other.excluded;
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_error > self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.tol = self.tol.max(other.tol);
    }
}

pub fn rel_error(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let val = tape.value(v);
    if val.len() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar output, got {:?}", tape.shape(v))));
    }
    if !val[0].is_finite() {
        let culprit = tape
            .first_non_finite()
            .map(|(i, name)| format!("{name} node #{i}"))
            .unwrap_or_else(|| "output".into());
        return Err(Error::NonFinite(format!("forward value of {culprit}")));
    }
    Ok(val[0])
}

struct Probe {
    label: String,
    analytic: f64,
}

fn compare(
    probes: Vec<Probe>,
    base_sig: u64,
    h: f64,
    tol: f64,
    mut eval: impl FnMut(usize, f64) -> Result<(f64, u64)>,
) -> Result<GradCheckReport> {
    let mut rep = GradCheckReport {
        tol,
        ..Default::default()
    };
    for (i, p) in probes.into_iter().enumerate() {
        let (fp, sp) = eval(i, h)?;
        let (fm, sm) = eval(i, -h)?;
        if sp != base_sig || sm != base_sig {
            rep.excluded += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let e = rel_error(p.analytic, fd);
        rep.compared += 1;
        if e > rep.max_rel_error || rep.worst.is_none() {
            rep.max_rel_error = rep.max_rel_error.max(e);
            rep.worst = Some((p.label, p.analytic, fd));
        }
    }
    Ok(rep)
}

/// Checks `f` with respect to every coordinate of `x`.
pub fn grad_check<B>(f: B, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    let sig = tape.kink_signature();
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    let probes = analytic
        .iter()
        .enumerate()
        .map(|(i, &a)| Probe {
            label: format!("x[{i}]"),
            analytic: a,
        })
        .collect();
    let mut work = x.clone();
    compare(probes, sig, h, tol, |i, d| {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + d;
        let mut t = Tape::new();
        let v = t.input(&work);
        let o = f(&mut t, v);
        work.data_mut()[i] = orig;
        let o = o?;
        Ok((scalar_of(&t, o)?, t.kink_signature()))
    })
}

/// Which parameter coordinates a model-level check perturbs.
#[derive(Debug, Clone, Copy)]
pub struct Sampling {
    /// At most this many coordinates per parameter tensor (`usize::MAX` = all).
    pub per_param: usize,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            per_param: usize::MAX,
            seed: 0,
        }
    }
}

/// Checks a graph-building closure with respect to the trainable
/// parameters of `store`. The closure runs in train mode.
pub fn grad_check_params<B>(
    build: B,
    store: &ParamStore<f64>,
    sampling: Sampling,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new(store, Mode::Train);
    let out = build(&mut g)?;
    scalar_of(&g.tape, out)?;
    let sig = g.tape.kink_signature();
    let grads = g.tape.backward(out)?;
    let mut by_param: std::collections::HashMap<ParamId, &[f64]> = std::collections::HashMap::new();
    for (id, gv) in grads.params() {
        by_param.insert(*id, gv.as_slice());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    let mut probes = Vec::new();
    for id in store.trainable() {
        let n = store.get(id).len();
        let picks: Vec<usize> = if sampling.per_param >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, sampling.per_param).into_vec();
            v.sort_unstable();
            v
        };
        for c in picks {
            let a = by_param.get(&id).map_or(0.0, |g| g[c]);
            probes.push(Probe {
                label: format!("{}[{c}]", store.name(id)),
                analytic: a,
            });
            coords.push((id, c));
        }
    }
    let mut work = store.clone();
    compare(probes, sig, h, tol, |i, d| {
        let (id, c) = coords[i];
        let orig = work.get(id).data()[c];
        work.get_mut(id).data_mut()[c] = orig + d;
        let res = {
            let mut g = Graph::new(&work, Mode::Train);
            build(&mut g).and_then(|o| Ok((scalar_of(&g.tape, o)?, g.tape.kink_signature())))
        };
        work.get_mut(id).data_mut()[c] = orig;
        res
    })
}

/// Model used by [`check_pipeline`]: 16×16 images, four tokens, two
/// proposals, every alignment path enabled.
pub fn pipeline_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        patch: 1,
        c1: 4,
        dim: 8,
        joint: 8,
        heads: 2,
        mlp_ratio: 2,
        t_max: 4,
        fusion_heads: 2,
        queries: 2,
        dq: 8,
        ds: 4,
        decoder_layers: 1,
        decoder_heads: 2,
        ..ModelConfig::default()
    }
}

/// Random two-sample batch for [`pipeline_config`]: noise images, a
/// rectangular mask each, and `[CLS, w, w, PAD]` token rows.
pub fn pipeline_batch(seed: u64) -> Vec<(Tensor<f64>, Vec<u32>, Tensor<f64>)> {
    let cfg = pipeline_config();
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..2)
        .map(|_| {
            let img: Vec<f64> = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let (y0, x0) = (rng.random_range(0..h / 2), rng.random_range(0..w / 2));
            let (y1, x1) = (y0 + rng.random_range(3..h / 2), x0 + rng.random_range(3..w / 2));
            let mask: Vec<f64> = (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    (y >= y0 && y < y1 && x >= x0 && x < x1) as u8 as f64
                })
                .collect();
            let v = vocab::size() as u32;
            let tokens = vec![vocab::CLS, rng.random_range(2..v), rng.random_range(2..v), vocab::PAD];
            (
                Tensor::new(&[h, w, 3], img).unwrap(),
                tokens,
                Tensor::new(&[h, w], mask).unwrap(),
            )
        })
        .collect()
}

/// End-to-end check of the batch loss (segmentation plus auxiliary term)
/// with respect to sampled coordinates of every trainable parameter.
pub fn check_pipeline(seed: u64, h: f64, tol: f64, per_param: usize) -> Result<GradCheckReport> {
    let cfg = pipeline_config();
    let (model, store) = CoupAlign::init::<f64>(&cfg, seed)?;
    let batch = pipeline_batch(seed);
    let aux = AuxConfig::default();
    grad_check_params(
        |g| {
            let items: Vec<(&Tensor<f64>, &[u32])> = batch.iter().map(|(i, t, _)| (i, t.as_slice())).collect();
            let outs = model.forward_batch(g, &items)?;
            let mut segs = Vec::new();
            let mut auxs = Vec::new();
            for (o, (_, _, m)) in outs.iter().zip(&batch) {
                segs.push(seg_loss(&mut g.tape, o.logits, m)?);
                auxs.push(aux_loss(&mut g.tape, o.y1, m, aux)?);
            }
            Ok(total_loss(&mut g.tape, &segs, &auxs, 0.1)?.0)
        },
        &store,
        Sampling { per_param, seed },
        h,
        tol,
    )
}
