//! Mask generator, multi-scale segmentation head and sentence-mask
//! alignment.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::params::{Init, ParamId};
use crate::nn::{BatchNorm, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, L2_EPS};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim)?,
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim)?,
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross_attn"), dim, dim, heads)?,
            ln3: LayerNorm::new(init, &format!("{name}.ln3"), dim)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, 2 * dim, dim)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, q: Var, mem: Var) -> Result<Var> {
        let h = self.ln1.forward(g, q)?;
        let a = self.self_attn.forward(g, h, h, None)?;
        let q = g.tape.add(q, a)?;
        let h = self.ln2.forward(g, q)?;
        let a = self.cross_attn.forward(g, h, mem, None)?;
        let q = g.tape.add(q, a)?;
        let h = self.ln3.forward(g, q)?;
        let m = self.mlp.forward(g, h)?;
        g.tape.add(q, m)
    }
}

/// Query decoder producing `Q_o: [N×d_q]` from learned queries and `S_o`.
#[derive(Debug, Clone)]
pub struct MaskGenerator {
    pub queries: ParamId,
    pub mem_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub n: usize,
    pub dq: usize,
}

impl MaskGenerator {
    pub fn new<F: Scalar>(
        init: &mut Init<F>,
        n: usize,
        dq: usize,
        mem_channels: usize,
        layers: usize,
        heads: usize,
    ) -> Result<Self> {
        if n < 1 {
            return Err(Error::Config("decoder needs at least one query".into()));
        }
        Ok(Self {
            queries: init.normal("dec.queries", &[n, dq], 0.02)?,
            mem_proj: Linear::new(init, "dec.mem_proj", mem_channels, dq, true)?,
            layers: (0..layers)
                .map(|i| DecoderLayer::new(init, &format!("dec.layer{i}"), dq, heads))
                .collect::<Result<Vec<_>>>()?,
            n,
            dq,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, so: Var) -> Result<Var> {
        let s = g.tape.shape(so).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("mask_generator", &s, &[0, 0, 0]));
        }
        let mem = g.tape.reshape(so, &[s[0] * s[1], s[2]])?;
        let mem = self.mem_proj.forward(g, mem)?;
        let mut q = g.p(self.queries);
        for layer in &self.layers {
            q = layer.forward(g, q, mem)?;
        }
        Ok(q)
    }
}

/// Placement of the normalization inside each refinement conv pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegOrder {
    /// conv → ReLU → batch norm
    ReluNorm,
    /// conv → batch norm → ReLU
    NormRelu,
}

impl FromStr for SegOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-relu-bn" => Ok(SegOrder::ReluNorm),
            "conv-bn-relu" => Ok(SegOrder::NormRelu),
            _ => Err(Error::Config(format!(
                "seg.order must be conv-relu-bn or conv-bn-relu, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for SegOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegOrder::ReluNorm => "conv-relu-bn",
            SegOrder::NormRelu => "conv-bn-relu",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub size: usize,
}

impl Conv {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, size: usize, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / ((size * size * cin) as f64).sqrt();
        Ok(Self {
            k: init.uniform(&format!("{name}.k"), &[size, size, cin, cout], bound)?,
            b: init.constant(&format!("{name}.b"), &[cout], 0.0)?,
            size,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let k = g.p(self.k);
        let y = g.tape.conv2d(x, k, 1, self.size / 2)?;
        let b = g.p(self.b);
        g.tape.add(y, b)
    }
}

/// Applies a row-wise batch norm to several `h×w×C` maps as one batch.
fn batch_norm_maps<F: Scalar>(g: &mut Graph<F>, bn: &BatchNorm, maps: &[Var]) -> Result<Vec<Var>> {
    let shapes: Vec<Vec<usize>> = maps.iter().map(|&m| g.tape.shape(m).to_vec()).collect();
    let mut rows = Vec::with_capacity(maps.len());
    for (&m, s) in maps.iter().zip(&shapes) {
        rows.push(g.tape.reshape(m, &[s[0] * s[1], s[2]])?);
    }
    let all = if rows.len() == 1 { rows[0] } else { g.tape.concat(&rows, 0)? };
    let normed = bn.forward(g, all)?;
    let mut out = Vec::with_capacity(maps.len());
    let mut start = 0;
    for s in &shapes {
        let n = s[0] * s[1];
        let part = if maps.len() == 1 { normed } else { g.tape.narrow(normed, 0, start, n)? };
        out.push(g.tape.reshape(part, s)?);
        start += n;
    }
    Ok(out)
}

/// `ρ`: two conv / ReLU / batch-norm units.
#[derive(Debug, Clone)]
pub struct Refine {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl Refine {
    fn unit<F: Scalar>(g: &mut Graph<F>, conv: &Conv, bn: &BatchNorm, xs: &[Var], order: SegOrder) -> Result<Vec<Var>> {
        let ys = xs.iter().map(|&x| conv.forward(g, x)).collect::<Result<Vec<_>>>()?;
        match order {
            SegOrder::ReluNorm => {
                let ys: Vec<Var> = ys.into_iter().map(|y| g.tape.relu(y)).collect();
                batch_norm_maps(g, bn, &ys)
            }
            SegOrder::NormRelu => {
                let ys = batch_norm_maps(g, bn, &ys)?;
                Ok(ys.into_iter().map(|y| g.tape.relu(y)).collect())
            }
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, xs: &[Var], order: SegOrder) -> Result<Vec<Var>> {
        let h = Self::unit(g, &self.conv1, &self.bn1, xs, order)?;
        Self::unit(g, &self.conv2, &self.bn2, &h, order)
    }
}

/// `Y_i = Up(ρ_i(Y_{i+1})) + γ_i(V_i)` for `i = 4..1`, from `Y_5 = S_o`.
#[derive(Debug, Clone)]
pub struct SegHead {
    /// Indexed by stage, `levels[0]` is stage 1.
    pub rho: Vec<Refine>,
    pub gamma: Vec<Conv>,
    pub ds: usize,
    pub order: SegOrder,
}

impl SegHead {
    /// `channels[i]` is the channel count of `V_{i+1}`; `channels[4]` of `S_o`.
    pub fn new<F: Scalar>(init: &mut Init<F>, channels: &[usize; 5], ds: usize, order: SegOrder) -> Result<Self> {
        let mut rho = Vec::new();
        let mut gamma = Vec::new();
        for i in 1..=4 {
            let cin = if i == 4 { channels[4] } else { ds };
            let n = format!("dec.seg.level{i}");
            rho.push(Refine {
                conv1: Conv::new(init, &format!("{n}.rho.conv1"), 3, cin, ds)?,
                bn1: BatchNorm::new(init, &format!("{n}.rho.bn1"), ds)?,
                conv2: Conv::new(init, &format!("{n}.rho.conv2"), 3, ds, ds)?,
                bn2: BatchNorm::new(init, &format!("{n}.rho.bn2"), ds)?,
            });
            gamma.push(Conv::new(init, &format!("{n}.gamma"), 1, channels[i - 1], ds)?);
        }
        Ok(Self { rho, gamma, ds, order })
    }

    /// Runs the recurrence for a whole batch so batch norm sees every
    /// sample. `vs[b][i]` is `V_{i+1}` of sample `b`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, so: &[Var], vs: &[[Var; 4]]) -> Result<Vec<Var>> {
        if so.len() != vs.len() || so.is_empty() {
            return Err(Error::Contract("seg_head needs one S_o and one stage set per sample".into()));
        }
        let mut y = so.to_vec();
        for i in (1..=4).rev() {
            let r = self.rho[i - 1].forward(g, &y, self.order)?;
            let mut next = Vec::with_capacity(y.len());
            for (b, &rb) in r.iter().enumerate() {
                let up = g.tape.bilinear_upsample(rb, 2)?;
                let skip = self.gamma[i - 1].forward(g, vs[b][i - 1])?;
                let (su, ss) = (g.tape.shape(up).to_vec(), g.tape.shape(skip).to_vec());
                if su != ss {
                    return Err(Error::Contract(format!(
                        "seg head level {i}: upsampled {su:?} does not match skip {ss:?}"
                    )));
                }
                next.push(g.tape.add(up, skip)?);
            }
            y = next;
        }
        Ok(y)
    }
}

/// Sentence-mask alignment output for one sample.
pub struct SmaOut {
    /// `[1×N]` proposal weights.
    pub q_w: Var,
    /// `[N×P]` per-proposal maps.
    pub y_n: Var,
    /// `[h×w×1]` combined logits.
    pub m: Var,
}

#[derive(Debug, Clone)]
pub struct Sma {
    pub wq: ParamId,
    pub wy: ParamId,
}

impl Sma {
    pub fn new<F: Scalar>(init: &mut Init<F>, dq: usize, ds: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            wq: init.uniform("dec.sma.Wq", &[dq, dim], 1.0 / (dq as f64).sqrt())?,
            wy: init.uniform("dec.sma.Wy", &[ds, dim], 1.0 / (ds as f64).sqrt())?,
        })
    }

    /// `Q_w = softmax(cos(L_g, Q_o W_Q))`, `Y_N = (Q_o W_Q)(Y_1 W_Y)ᵀ`,
    /// `M = Q_w Y_N`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, qo: Var, y1: Var, lg: Var) -> Result<SmaOut> {
        let s = g.tape.shape(y1).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("sma", &s, &[0, 0, 0]));
        }
        let p = s[0] * s[1];
        let wq = g.p(self.wq);
        let qh = g.tape.matmul(qo, wq)?;
        let flat = g.tape.reshape(y1, &[p, s[2]])?;
        let wy = g.p(self.wy);
        let yh = g.tape.matmul(flat, wy)?;
        let y_n = g.tape.matmul_t(qh, yh, false, true)?;
        let eps = F::c(L2_EPS);
        let lgn = g.tape.l2_normalize(lg, eps);
        let qn = g.tape.l2_normalize(qh, eps);
        let sim = g.tape.matmul_t(lgn, qn, false, true)?;
        let q_w = g.tape.softmax(sim, 1)?;
        let m = g.tape.matmul(q_w, y_n)?;
        let m = g.tape.reshape(m, &[s[0], s[1], 1])?;
        Ok(SmaOut { q_w, y_n, m })
    }
}
