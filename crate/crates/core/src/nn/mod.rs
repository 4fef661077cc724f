//! Neural building blocks composed from tape primitives.

pub mod params;

use std::sync::Arc;

use log::warn;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use params::{Init, ParamId, ParamStore};

/// Variance floor shared by layer and batch normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Norm floor for L2 normalization and cosine similarity.
pub const L2_EPS: f64 = 1e-12;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<F> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<F>,
    /// Unbiased batch variance.
    pub var: Vec<F>,
}

/// A forward pass in progress: the tape plus read access to parameters.
pub struct Graph<'s, F: Scalar> {
    pub tape: Tape<F>,
    pub store: &'s ParamStore<F>,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate<F>>,
    /// When set, attention maps are copied out under these names.
    pub record: Option<Vec<(String, Tensor<F>)>>,
}

impl<'s, F: Scalar> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            bn_updates: Vec::new(),
            record: None,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn c(&self, v: f64) -> F {
        F::c(v)
    }

    pub fn keep(&mut self, name: impl FnOnce() -> String, v: Var) {
        if self.record.is_some() {
            let t = self.tape.to_tensor(v);
            if let Some(r) = self.record.as_mut() {
                r.push((name(), t));
            }
        }
    }

    /// Folds the recorded batch-norm statistics into the running buffers.
    pub fn apply_bn_updates(updates: &[BnUpdate<F>], store: &mut ParamStore<F>) {
        let m = F::c(BN_MOMENTUM);
        let keep = F::one() - m;
        for u in updates {
            for (r, &b) in store.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in store.get_mut(u.var_id).data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + m * b;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = init.uniform(&format!("{name}.w"), &[fan_in, fan_out], bound)?;
        let b = if bias {
            Some(init.constant(&format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    /// `x·W (+ b)` for `x: rows×fan_in`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.p(b);
                g.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    /// Normalizes each last-axis row, then applies the affine map.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let axis = g.tape.shape(x).len() - 1;
        let (n, _, _) = g.tape.standardize(x, axis, F::c(NORM_EPS))?;
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        let y = g.tape.mul(n, gamma)?;
        g.tape.add(y, beta)
    }
}

/// Per-channel batch normalization over the rows of an `R×C` matrix.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub name: String,
}

impl BatchNorm {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            running_mean: init.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: init.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            name: name.to_string(),
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("batch_norm", &shape, &[2]));
        }
        let rows = shape[0];
        let normed = match g.mode {
            Mode::Train => {
                if rows == 1 {
                    warn!("{}: batch norm over a single value per channel; output collapses to beta", self.name);
                }
                let (n, mean, var) = g.tape.standardize(x, 0, F::c(NORM_EPS))?;
                let unbias = if rows > 1 {
                    F::c(rows as f64 / (rows as f64 - 1.0))
                } else {
                    F::one()
                };
                g.bn_updates.push(BnUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean,
                    var: var.into_iter().map(|v| v * unbias).collect(),
                });
                n
            }
            Mode::Eval => {
                let rm = g.store.get(self.running_mean).data().to_vec();
                let rv = g.store.get(self.running_var).data();
                let inv: Vec<F> = rv.iter().map(|&v| F::one() / (v + F::c(NORM_EPS)).sqrt()).collect();
                let shift: Vec<F> = rm.iter().zip(&inv).map(|(&m, &i)| -m * i).collect();
                let c = inv.len();
                let inv = g.tape.constant_vec(&[c], inv)?;
                let shift = g.tape.constant_vec(&[c], shift)?;
                let y = g.tape.mul(x, inv)?;
                g.tape.add(y, shift)?
            }
        };
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        let y = g.tape.mul(normed, gamma)?;
        g.tape.add(y, beta)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, out, true)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Expands a per-key validity mask to a full `nq×nk` score mask.
pub fn key_mask(nq: usize, keys: &[bool]) -> Arc<Vec<bool>> {
    Arc::new((0..nq).flat_map(|_| keys.iter().copied()).collect())
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{name}: {heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(init, &format!("{name}.k"), kv_dim, dim, true)?,
            v: Linear::new(init, &format!("{name}.v"), kv_dim, dim, true)?,
            o: Linear::new(init, &format!("{name}.o"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// Attends from `xq: nq×dim` to `xkv: nk×kv_dim`. `keep` flags valid
    /// keys; masked keys receive zero weight.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        xq: Var,
        xkv: Var,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let nq = g.tape.shape(xq)[0];
        let nk = g.tape.shape(xkv)[0];
        if let Some(k) = keep {
            if k.len() != nk {
                return Err(Error::dim("attention key mask", &[nk], &[k.len()]));
            }
            if !k.iter().any(|&b| b) {
                return Err(Error::Contract("attention over an all-masked key set".into()));
            }
        }
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let dh = self.dim / self.heads;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let mask = keep.map(|k| key_mask(nq, k));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.tape.narrow(q, 1, h * dh, dh)?,
                    g.tape.narrow(k, 1, h * dh, dh)?,
                    g.tape.narrow(v, 1, h * dh, dh)?,
                )
            };
            let s = g.tape.matmul_t(qh, kh, false, true)?;
            let s = g.tape.scale(s, scale);
            let p = g.tape.softmax_masked(s, 1, mask.as_deref().map(|m| m.as_slice()))?;
            outs.push(g.tape.matmul(p, vh)?);
        }
        let ctx = if outs.len() == 1 { outs[0] } else { g.tape.concat(&outs, 1)? };
        self.o.forward(g, ctx)
    }
}

/// Pre-norm transformer block: `x + Attn(LN x)`, then `x + MLP(LN x)`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, keep)?;
        let x = g.tape.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.tape.add(x, m)
    }
}
