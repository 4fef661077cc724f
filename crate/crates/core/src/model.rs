//! The assembled network: encoders interleaved with word-pixel alignment,
//! cross fusion, mask generator, segmentation head and sentence-mask
//! alignment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::data::vocab;
use crate::decoder::{Conv, MaskGenerator, SegHead, SegOrder, Sma};
use crate::encoders::{extract_sentence, ImageEncoder, LanguageEncoder, STAGES};
use crate::error::{Error, Result};
use crate::fusion::CrossFusion;
use crate::nn::params::{Init, ParamStore};
use crate::nn::Graph;
use crate::tensor::{Scalar, Tensor};
use crate::wpa::{WpaMode, WpaStage};

/// Architecture and ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub c1: usize,
    /// Language width `D`.
    pub dim: usize,
    /// Joint width `d` inside word-pixel alignment.
    pub joint: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub t_max: usize,
    pub wpa_mode: WpaMode,
    pub wpa_stages: [bool; 4],
    pub fusion_heads: usize,
    pub queries: usize,
    pub dq: usize,
    pub ds: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub sma: bool,
    pub seg_order: SegOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch: 4,
            c1: 16,
            dim: 32,
            joint: 32,
            heads: 2,
            mlp_ratio: 2,
            vocab: vocab::size(),
            t_max: 16,
            wpa_mode: WpaMode::Bi,
            wpa_stages: [true; 4],
            fusion_heads: 2,
            queries: 16,
            dq: 32,
            ds: 16,
            decoder_layers: 2,
            decoder_heads: 2,
            sma: true,
            seg_order: SegOrder::ReluNorm,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("c1", self.c1),
            ("dim", self.dim),
            ("joint", self.joint),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("t_max", self.t_max),
            ("fusion.heads", self.fusion_heads),
            ("queries", self.queries),
            ("dq", self.dq),
            ("ds", self.ds),
            ("decoder.heads", self.decoder_heads),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        let unit = self.patch << STAGES;
        if self.height % unit != 0 || self.width % unit != 0 {
            return Err(Error::Config(format!(
                "image {}×{} must be divisible by {unit} (patch {} and four 2× merges)",
                self.height, self.width, self.patch
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary needs at least CLS and PAD".into()));
        }
        for (name, dim, heads) in [
            ("dim", self.dim, self.heads),
            ("dim/fusion.heads", self.dim, self.fusion_heads),
            ("dq/decoder.heads", self.dq, self.decoder_heads),
        ] {
            if dim % heads != 0 {
                return Err(Error::Config(format!("{name}: {heads} heads do not divide {dim}")));
            }
        }
        if (self.c1 * 2) % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide stage widths", self.heads)));
        }
        Ok(())
    }

    fn wpa_enabled(&self, stage: usize) -> WpaMode {
        if self.wpa_stages[stage - 1] {
            self.wpa_mode
        } else {
            WpaMode::Off
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoupAlign {
    pub cfg: ModelConfig,
    pub image: ImageEncoder,
    pub language: LanguageEncoder,
    pub wpa: Vec<WpaStage>,
    pub fusion: CrossFusion,
    pub generator: MaskGenerator,
    pub seg: SegHead,
    pub sma: Sma,
    /// 1×1 readout used when sentence-mask alignment is disabled.
    pub head_off: Conv,
}

/// Per-sample forward results.
pub struct Outputs {
    /// `[H×W]` logits.
    pub logits: Var,
    /// `[h_1×w_1×d_s]`.
    pub y1: Var,
    /// `[1×N]`, absent with alignment off.
    pub q_w: Option<Var>,
    /// `[N×P]`, absent with alignment off.
    pub y_n: Option<Var>,
    /// `[h_1×w_1×1]` logits before the final upsampling.
    pub m: Var,
    pub l_g: Var,
}

impl CoupAlign {
    /// Builds the network and its parameters from a seed.
    pub fn init<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let image = ImageEncoder::new(&mut init, cfg.height, cfg.width, cfg.patch, cfg.c1, cfg.heads, cfg.mlp_ratio)?;
        let language = LanguageEncoder::new(&mut init, cfg.vocab, cfg.t_max, cfg.dim, cfg.heads, cfg.mlp_ratio)?;
        let wpa = (1..=STAGES)
            .map(|i| WpaStage::new(&mut init, i, image.channels(i), cfg.dim, cfg.joint))
            .collect::<Result<Vec<_>>>()?;
        let unit = cfg.patch << STAGES;
        let grid = (cfg.height / unit, cfg.width / unit);
        let co = image.channels(5);
        let fusion = CrossFusion::new(&mut init, grid, co, cfg.dim, cfg.fusion_heads)?;
        let generator = MaskGenerator::new(&mut init, cfg.queries, cfg.dq, co, cfg.decoder_layers, cfg.decoder_heads)?;
        let channels = [image.channels(1), image.channels(2), image.channels(3), image.channels(4), co];
        let seg = SegHead::new(&mut init, &channels, cfg.ds, cfg.seg_order)?;
        let sma = Sma::new(&mut init, cfg.dq, cfg.ds, cfg.dim)?;
        let head_off = Conv::new(&mut init, "dec.head_off", 1, cfg.ds, 1)?;
        let model = Self {
            cfg: cfg.clone(),
            image,
            language,
            wpa,
            fusion,
            generator,
            seg,
            sma,
            head_off,
        };
        Ok((model, store))
    }

    /// Full forward pass over a batch sharing one graph (batch norm in the
    /// segmentation head normalizes across the batch).
    pub fn forward_batch<F: Scalar>(&self, g: &mut Graph<F>, batch: &[(&Tensor<F>, &[u32])]) -> Result<Vec<Outputs>> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut sos = Vec::with_capacity(batch.len());
        let mut stages = Vec::with_capacity(batch.len());
        let mut sentences = Vec::with_capacity(batch.len());
        let mut queries = Vec::with_capacity(batch.len());
        for (b, (image, tokens)) in batch.iter().enumerate() {
            let x = g.tape.constant(image);
            let mut v = self.image.embed(g, x)?;
            let (mut l, keep) = self.language.embed_tokens(g, tokens)?;
            if !keep.iter().any(|&k| k) {
                return Err(Error::Contract(format!("sample {b}: expression is all padding")));
            }
            let mut vs = [v; 4];
            for i in 1..=STAGES {
                let mode = self.cfg.wpa_enabled(i);
                let (vi, li) = self.wpa[i - 1].step(g, v, l, &keep, mode)?;
                vs[i - 1] = vi;
                v = self.image.stages[i - 1].forward(g, vi)?;
                l = self.language.stage(g, i, li, &keep)?;
            }
            let lg = extract_sentence(g, l)?;
            let so = self.fusion.forward(g, v, l, &keep)?;
            queries.push(self.generator.forward(g, so)?);
            sos.push(so);
            stages.push(vs);
            sentences.push(lg);
        }
        let y1s = self.seg.forward(g, &sos, &stages)?;
        let mut out = Vec::with_capacity(batch.len());
        for ((y1, qo), lg) in y1s.into_iter().zip(queries).zip(sentences) {
            let (m, q_w, y_n) = if self.cfg.sma {
                let s = self.sma.forward(g, qo, y1, lg)?;
                g.keep(|| "dec.sma.q_w".into(), s.q_w);
                (s.m, Some(s.q_w), Some(s.y_n))
            } else {
                (self.head_off.forward(g, y1)?, None, None)
            };
            let up = if self.cfg.patch == 1 { m } else { g.tape.bilinear_upsample(m, self.cfg.patch)? };
            let logits = g.tape.reshape(up, &[self.cfg.height, self.cfg.width])?;
            out.push(Outputs { logits, y1, q_w, y_n, m, l_g: lg });
        }
        Ok(out)
    }
}
