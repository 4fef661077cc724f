//! Cross-modal fusion after the encoders: one multi-head attention layer
//! over the concatenated pixel and word tokens, returned to the pixel grid
//! with a residual.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::params::{Init, ParamId};
use crate::nn::{Graph, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct CrossFusion {
    pub wv: Linear,
    pub wl: Linear,
    pub pos: ParamId,
    pub ln: LayerNorm,
    pub attn: MultiHeadAttention,
    pub out: Linear,
    pub grid: (usize, usize),
    pub channels: usize,
    pub dim: usize,
}

impl CrossFusion {
    pub fn new<F: Scalar>(
        init: &mut Init<F>,
        grid: (usize, usize),
        channels: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            wv: Linear::new(init, "fusion.Wv", channels, dim, false)?,
            wl: Linear::new(init, "fusion.Wl", dim, dim, false)?,
            pos: init.normal("fusion.pos", &[grid.0 * grid.1, dim], 0.02)?,
            ln: LayerNorm::new(init, "fusion.ln", dim)?,
            attn: MultiHeadAttention::new(init, "fusion.attn", dim, dim, heads)?,
            out: Linear::new(init, "fusion.out", dim, channels, true)?,
            grid,
            channels,
            dim,
        })
    }

    /// `S_o = CrossAttn([V_o W_v + e_p; L_o W_l])[..HW] W_out + V_o`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, vo: Var, lo: Var, keep: &[bool]) -> Result<Var> {
        let s = g.tape.shape(vo).to_vec();
        let (h, w) = self.grid;
        if s != [h, w, self.channels] {
            return Err(Error::dim("fuse vision", &s, &[h, w, self.channels]));
        }
        let sl = g.tape.shape(lo).to_vec();
        if sl.len() != 2 || sl[1] != self.dim || sl[0] != keep.len() {
            return Err(Error::dim("fuse language", &sl, &[keep.len(), self.dim]));
        }
        let n = h * w;
        let flat = g.tape.reshape(vo, &[n, self.channels])?;
        let v = self.wv.forward(g, flat)?;
        let pos = g.p(self.pos);
        let v = g.tape.add(v, pos)?;
        let l = self.wl.forward(g, lo)?;
        let f = g.tape.concat(&[v, l], 0)?;
        let f = self.ln.forward(g, f)?;
        let mut mask = vec![true; n];
        mask.extend_from_slice(keep);
        let a = self.attn.forward(g, f, f, Some(&mask))?;
        let a = g.tape.narrow(a, 0, 0, n)?;
        let a = self.out.forward(g, a)?;
        let a = g.tape.reshape(a, &s)?;
        g.tape.add(a, vo)
    }
}
