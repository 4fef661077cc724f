//! Four-stage toy image and language encoders.
//!
//! The image side embeds `p×p` patches into `V_1` at `H/p × W/p × C_1`; each
//! stage then merges 2×2 neighborhoods (halving extents, doubling channels)
//! and runs one pre-norm attention block. The language side embeds tokens
//! with a learned position table and runs one masked block per stage.

use std::sync::Arc;

use crate::autodiff::Var;
use crate::data::vocab::PAD;
use crate::error::{Error, Result};
use crate::nn::params::{Init, ParamId};
use crate::nn::{EncoderBlock, Graph, LayerNorm, Linear};
use crate::tensor::Scalar;

pub const STAGES: usize = 4;

#[derive(Debug, Clone)]
pub struct ImageStage {
    pub merge_ln: LayerNorm,
    pub reduce: Linear,
    pub block: EncoderBlock,
    pub in_channels: usize,
}

impl ImageStage {
    pub fn new<F: Scalar>(init: &mut Init<F>, name: &str, channels: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            merge_ln: LayerNorm::new(init, &format!("{name}.merge.ln"), 4 * channels)?,
            reduce: Linear::new(init, &format!("{name}.merge.reduce"), 4 * channels, 2 * channels, false)?,
            block: EncoderBlock::new(init, &format!("{name}.block"), 2 * channels, heads, mlp_ratio)?,
            in_channels: channels,
        })
    }

    /// `[h×w×C] → [h/2 × w/2 × 2C]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, v: Var) -> Result<Var> {
        let s = g.tape.shape(v).to_vec();
        let [h, w, c] = s[..] else {
            return Err(Error::dim("image_stage", &s, &[0, 0, self.in_channels]));
        };
        if c != self.in_channels {
            return Err(Error::dim("image_stage", &s, &[h, w, self.in_channels]));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Contract(format!("image stage input {h}×{w} has an odd extent")));
        }
        let m = g.tape.space_to_depth(v, 2)?;
        let m = g.tape.reshape(m, &[h * w / 4, 4 * c])?;
        let m = self.merge_ln.forward(g, m)?;
        let m = self.reduce.forward(g, m)?;
        let out = self.block.forward(g, m, None)?;
        g.tape.reshape(out, &[h / 2, w / 2, 2 * c])
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch: usize,
    pub embed: Linear,
    pub embed_ln: LayerNorm,
    pub pos: ParamId,
    pub stages: Vec<ImageStage>,
    pub grid: (usize, usize),
    pub c1: usize,
}

impl ImageEncoder {
    pub fn new<F: Scalar>(
        init: &mut Init<F>,
        height: usize,
        width: usize,
        patch: usize,
        c1: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let grid = (height / patch, width / patch);
        let embed = Linear::new(init, "enc.img.embed.proj", 3 * patch * patch, c1, true)?;
        let embed_ln = LayerNorm::new(init, "enc.img.embed.ln", c1)?;
        let pos = init.normal("enc.img.embed.pos", &[grid.0 * grid.1, c1], 0.02)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut c = c1;
        for i in 1..=STAGES {
            stages.push(ImageStage::new(init, &format!("enc.img.stage{i}"), c, heads, mlp_ratio)?);
            c *= 2;
        }
        Ok(Self { patch, embed, embed_ln, pos, stages, grid, c1 })
    }

    /// Patch embedding: `[H×W×3] → V_1 = [H/p × W/p × C_1]`.
    pub fn embed<F: Scalar>(&self, g: &mut Graph<F>, image: Var) -> Result<Var> {
        let s = g.tape.shape(image).to_vec();
        let (gh, gw) = self.grid;
        if s != [gh * self.patch, gw * self.patch, 3] {
            return Err(Error::dim("patch_embed", &s, &[gh * self.patch, gw * self.patch, 3]));
        }
        let x = if self.patch == 1 { image } else { g.tape.space_to_depth(image, self.patch)? };
        let x = g.tape.reshape(x, &[gh * gw, 3 * self.patch * self.patch])?;
        let x = self.embed.forward(g, x)?;
        let x = self.embed_ln.forward(g, x)?;
        let pos = g.p(self.pos);
        let x = g.tape.add(x, pos)?;
        g.tape.reshape(x, &[gh, gw, self.c1])
    }

    /// Channel count of `V_i` for `i` in `1..=5` (5 is the encoder output).
    pub fn channels(&self, i: usize) -> usize {
        self.c1 << (i - 1)
    }
}

#[derive(Debug, Clone)]
pub struct LanguageEncoder {
    pub table: ParamId,
    pub pos: ParamId,
    pub stages: Vec<EncoderBlock>,
    pub vocab: usize,
    pub t_max: usize,
    pub dim: usize,
}

impl LanguageEncoder {
    pub fn new<F: Scalar>(
        init: &mut Init<F>,
        vocab: usize,
        t_max: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let table = init.normal("enc.lang.embed", &[vocab, dim], 1.0)?;
        let pos = init.normal("enc.lang.pos", &[t_max, dim], 0.02)?;
        let stages = (1..=STAGES)
            .map(|i| EncoderBlock::new(init, &format!("enc.lang.stage{i}"), dim, heads, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { table, pos, stages, vocab, t_max, dim })
    }

    /// `E = table[ids] + pos[0..T]` and the validity mask (`false` at PAD).
    pub fn embed_tokens<F: Scalar>(&self, g: &mut Graph<F>, ids: &[u32]) -> Result<(Var, Vec<bool>)> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if ids.len() > self.t_max {
            return Err(Error::Input(format!("{} tokens exceed the limit of {}", ids.len(), self.t_max)));
        }
        let mut idx = Vec::with_capacity(ids.len() * self.dim);
        for &t in ids {
            if t as usize >= self.vocab {
                return Err(Error::Input(format!("token id {t} out of range for vocabulary of {}", self.vocab)));
            }
            let base = t as usize * self.dim;
            idx.extend(base..base + self.dim);
        }
        let t = ids.len();
        let table = g.p(self.table);
        let e = g.tape.gather(table, Arc::new(idx), &[t, self.dim])?;
        let pos = g.p(self.pos);
        let pos = if t == self.t_max { pos } else { g.tape.narrow(pos, 0, 0, t)? };
        let e = g.tape.add(e, pos)?;
        Ok((e, ids.iter().map(|&i| i != PAD).collect()))
    }

    /// `L_{i+1}` from `L_i`, stage index `i` in `1..=4`.
    pub fn stage<F: Scalar>(&self, g: &mut Graph<F>, i: usize, l: Var, keep: &[bool]) -> Result<Var> {
        self.stages[i - 1].forward(g, l, Some(keep))
    }
}

/// `L_g`: the first (classification) row, `[1×D]`.
pub fn extract_sentence<F: Scalar>(g: &mut Graph<F>, l: Var) -> Result<Var> {
    g.tape.narrow(l, 0, 0, 1)
}
