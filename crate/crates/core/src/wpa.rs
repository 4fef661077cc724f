//! Word-pixel alignment: bidirectional cross attention between one stage's
//! pixel and word features, gated and added back to both streams.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::params::{Init, ParamId};
use crate::nn::{key_mask, Graph, Linear};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WpaMode {
    Bi,
    /// Language to vision only.
    Uni,
    Off,
}

impl FromStr for WpaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" => Ok(WpaMode::Bi),
            "uni" => Ok(WpaMode::Uni),
            "off" | "none" => Ok(WpaMode::Off),
            _ => Err(Error::Config(format!("wpa.mode must be bi, uni or off, got {s:?}"))),
        }
    }
}

impl fmt::Display for WpaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WpaMode::Bi => "bi",
            WpaMode::Uni => "uni",
            WpaMode::Off => "off",
        })
    }
}

/// `tanh(MLP(x)) ⊙ x`, applied per row.
#[derive(Debug, Clone)]
pub struct Gate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Gate {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, dim, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), dim, dim, true)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.relu(h);
        let h = self.fc2.forward(g, h)?;
        let h = g.tape.tanh(h);
        g.tape.mul(h, x)
    }
}

#[derive(Debug, Clone)]
pub struct WpaStage {
    pub stage: usize,
    pub wv: ParamId,
    pub wl: ParamId,
    pub wl_hat: ParamId,
    pub wv_hat: ParamId,
    /// Gates the vision-to-language context before it joins the words.
    pub gate_v: Gate,
    /// Gates the language-to-vision context before it joins the pixels.
    pub gate_l: Gate,
    pub channels: usize,
    pub lang_dim: usize,
    pub joint: usize,
}

/// Bidirectional attention result.
pub struct BiAttn {
    /// `V'`: vision context per word, `[T×D]`.
    pub v_prime: Var,
    /// `L'`: language context per pixel, `[HW×C]`.
    pub l_prime: Var,
    /// Pixel-to-word weights, `[HW×T]`.
    pub attn: Var,
}

fn proj<F: Scalar>(init: &mut Init<F>, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
    init.uniform(name, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

impl WpaStage {
    pub fn new<F: Scalar>(init: &mut Init<F>, stage: usize, channels: usize, lang_dim: usize, joint: usize) -> Result<Self> {
        let n = format!("wpa.stage{stage}");
        Ok(Self {
            stage,
            wv: proj(init, &format!("{n}.Wv"), channels, joint)?,
            wl: proj(init, &format!("{n}.Wl"), lang_dim, joint)?,
            wl_hat: proj(init, &format!("{n}.Wl_hat"), joint, channels)?,
            wv_hat: proj(init, &format!("{n}.Wv_hat"), joint, lang_dim)?,
            gate_v: Gate::new(init, &format!("{n}.gate_v"), lang_dim)?,
            gate_l: Gate::new(init, &format!("{n}.gate_l"), channels)?,
            channels,
            lang_dim,
            joint,
        })
    }

    /// Cross attention between `v: [HW×C]` and `l: [T×D]`. Padded words get
    /// zero weight from every pixel, and their own context rows are zero.
    pub fn bi_attn<F: Scalar>(&self, g: &mut Graph<F>, v: Var, l: Var, keep: &[bool]) -> Result<BiAttn> {
        let (sv, sl) = (g.tape.shape(v).to_vec(), g.tape.shape(l).to_vec());
        if sv.len() != 2 || sv[1] != self.channels {
            return Err(Error::dim("bi_attn vision", &sv, &[0, self.channels]));
        }
        if sl.len() != 2 || sl[1] != self.lang_dim || sl[0] != keep.len() {
            return Err(Error::dim("bi_attn language", &sl, &[keep.len(), self.lang_dim]));
        }
        let (p, t) = (sv[0], sl[0]);
        let wv = g.p(self.wv);
        let wl = g.p(self.wl);
        let vh = g.tape.matmul(v, wv)?;
        let lh = g.tape.matmul(l, wl)?;
        let scores = g.tape.matmul_t(vh, lh, false, true)?;
        let scores = g.tape.scale(scores, F::c(1.0 / (self.joint as f64).sqrt()));

        let mask = key_mask(p, keep);
        let attn = g.tape.softmax_masked(scores, 1, Some(&mask))?;
        let wl_hat = g.p(self.wl_hat);
        let ctx = g.tape.matmul(attn, lh)?;
        let l_prime = g.tape.matmul(ctx, wl_hat)?;

        let st = g.tape.transpose(scores)?;
        let row_mask: Vec<bool> = keep.iter().flat_map(|&k| std::iter::repeat_n(k, p)).collect();
        let attn_t = g.tape.softmax_masked(st, 1, Some(&row_mask))?;
        let wv_hat = g.p(self.wv_hat);
        let ctx = g.tape.matmul(attn_t, vh)?;
        let v_prime = g.tape.matmul(ctx, wv_hat)?;
        debug_assert_eq!(g.tape.shape(v_prime), &[t, self.lang_dim]);
        Ok(BiAttn { v_prime, l_prime, attn })
    }

    /// Next-stage inputs `(V + Gate(L'), L + Gate(V'))` for `v: [h×w×C]`.
    pub fn step<F: Scalar>(&self, g: &mut Graph<F>, v: Var, l: Var, keep: &[bool], mode: WpaMode) -> Result<(Var, Var)> {
        if mode == WpaMode::Off {
            return Ok((v, l));
        }
        let s = g.tape.shape(v).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("wpa_step", &s, &[0, 0, self.channels]));
        }
        let flat = g.tape.reshape(v, &[s[0] * s[1], s[2]])?;
        let ba = self.bi_attn(g, flat, l, keep)?;
        let stage = self.stage;
        g.keep(|| format!("wpa.stage{stage}.attn"), ba.attn);
        let gl = self.gate_l.forward(g, ba.l_prime)?;
        let gl = g.tape.reshape(gl, &s)?;
        let v_next = g.tape.add(v, gl)?;
        let l_next = match mode {
            WpaMode::Bi => {
                let gv = self.gate_v.forward(g, ba.v_prime)?;
                g.tape.add(l, gv)?
            }
            _ => l,
        };
        Ok((v_next, l_next))
    }
}
