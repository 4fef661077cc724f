//! Run configuration as `key = value` text with dotted keys.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::decoder::SegOrder;
use crate::error::{Error, Result};
use crate::losses::AuxConfig;
use crate::model::ModelConfig;
use crate::wpa::WpaMode;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub lr_end: f64,
    pub max_decay_epoch: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 3e-5,
            lr_end: 1.5e-5,
            max_decay_epoch: 25.0,
            power: 0.9,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Dataset directory with `train/`, `val/`, `test/`; generated in memory when unset.
    pub data_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub lambda: f64,
    pub aux: AuxConfig,
    pub aux_enabled: bool,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 1234,
            n_train: 500,
            n_val: 100,
            n_test: 100,
            data_dir: None,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            lambda: 0.1,
            aux: AuxConfig::default(),
            aux_enabled: true,
            epochs: 30,
            batch: 16,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// Parses a stage list such as `1,2,3,4`, `3,4` or `none`.
pub fn parse_stages(v: &str) -> Result<[bool; 4]> {
    let mut out = [false; 4];
    if v == "none" || v.is_empty() {
        return Ok(out);
    }
    for part in v.split(',') {
        let i: usize = parse("wpa.stages", part.trim())?;
        if !(1..=4).contains(&i) {
            return Err(Error::Config(format!("wpa.stages: stage {i} outside 1..4")));
        }
        out[i - 1] = true;
    }
    Ok(out)
}

pub fn render_stages(s: &[bool; 4]) -> String {
    let v: Vec<String> = (1..=4).filter(|&i| s[i - 1]).map(|i| i.to_string()).collect();
    if v.is_empty() {
        "none".into()
    } else {
        v.join(",")
    }
}

impl RunConfig {
    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.train" => self.n_train = parse(key, v)?,
            "data.val" => self.n_val = parse(key, v)?,
            "data.test" => self.n_test = parse(key, v)?,
            "data.dir" => self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "model.height" => m.height = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.c1" => m.c1 = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.t_max" => m.t_max = parse(key, v)?,
            "wpa.mode" => m.wpa_mode = v.parse::<WpaMode>()?,
            "wpa.stages" => m.wpa_stages = parse_stages(v)?,
            "wpa.dim" => m.joint = parse(key, v)?,
            "fusion.heads" => m.fusion_heads = parse(key, v)?,
            "decoder.queries" => m.queries = parse(key, v)?,
            "decoder.dq" => m.dq = parse(key, v)?,
            "decoder.ds" => m.ds = parse(key, v)?,
            "decoder.layers" => m.decoder_layers = parse(key, v)?,
            "decoder.heads" => m.decoder_heads = parse(key, v)?,
            "sma.enabled" => m.sma = parse_bool(key, v)?,
            "seg.order" => m.seg_order = v.parse::<SegOrder>()?,
            "optim.lr0" => o.lr0 = parse(key, v)?,
            "optim.lr_end" => o.lr_end = parse(key, v)?,
            "optim.max_decay_epoch" => o.max_decay_epoch = parse(key, v)?,
            "optim.power" => o.power = parse(key, v)?,
            "optim.weight_decay" => o.weight_decay = parse(key, v)?,
            "optim.beta1" => o.beta1 = parse(key, v)?,
            "optim.beta2" => o.beta2 = parse(key, v)?,
            "optim.eps" => o.eps = parse(key, v)?,
            "loss.lambda" => self.lambda = parse(key, v)?,
            "aux.tau" => self.aux.tau = parse(key, v)?,
            "aux.normalize" => self.aux.normalize = parse_bool(key, v)?,
            "aux.enabled" => self.aux_enabled = parse_bool(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if o.lr0 < 0.0 || o.lr_end < 0.0 || o.lr_end > o.lr0 {
            return Err(Error::Config(format!(
                "learning rates need 0 ≤ lr_end ≤ lr0, got lr0 {} and lr_end {}",
                o.lr0, o.lr_end
            )));
        }
        if o.power <= 0.0 || o.max_decay_epoch <= 0.0 {
            return Err(Error::Config("optim.power and optim.max_decay_epoch must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::Config("AdamW needs β in [0,1), ε > 0, weight decay ≥ 0".into()));
        }
        if self.lambda < 0.0 || self.aux.tau <= 0.0 {
            return Err(Error::Config("loss.lambda must be ≥ 0 and aux.tau > 0".into()));
        }
        if self.batch == 0 || self.epochs == 0 || self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("train.batch, train.epochs, data.train and data.val must be positive".into()));
        }
        Ok(())
    }

    /// Effective auxiliary weight.
    pub fn aux_weight(&self) -> f64 {
        if self.aux_enabled {
            self.lambda
        } else {
            0.0
        }
    }

    /// Every key with its resolved value, one per line.
    pub fn render(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let lines = [
            ("seed", self.seed.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.train", self.n_train.to_string()),
            ("data.val", self.n_val.to_string()),
            ("data.test", self.n_test.to_string()),
            ("data.dir", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.c1", m.c1.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.t_max", m.t_max.to_string()),
            ("wpa.mode", m.wpa_mode.to_string()),
            ("wpa.stages", render_stages(&m.wpa_stages)),
            ("wpa.dim", m.joint.to_string()),
            ("fusion.heads", m.fusion_heads.to_string()),
            ("decoder.queries", m.queries.to_string()),
            ("decoder.dq", m.dq.to_string()),
            ("decoder.ds", m.ds.to_string()),
            ("decoder.layers", m.decoder_layers.to_string()),
            ("decoder.heads", m.decoder_heads.to_string()),
            ("sma.enabled", m.sma.to_string()),
            ("seg.order", m.seg_order.to_string()),
            ("optim.lr0", format!("{:?}", o.lr0)),
            ("optim.lr_end", format!("{:?}", o.lr_end)),
            ("optim.max_decay_epoch", format!("{:?}", o.max_decay_epoch)),
            ("optim.power", format!("{:?}", o.power)),
            ("optim.weight_decay", format!("{:?}", o.weight_decay)),
            ("optim.beta1", format!("{:?}", o.beta1)),
            ("optim.beta2", format!("{:?}", o.beta2)),
            ("optim.eps", format!("{:?}", o.eps)),
            ("loss.lambda", format!("{:?}", self.lambda)),
            ("aux.tau", format!("{:?}", self.aux.tau)),
            ("aux.normalize", self.aux.normalize.to_string()),
            ("aux.enabled", self.aux_enabled.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch", self.batch.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of [`render`](Self::render).
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
