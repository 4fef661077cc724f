//! Training loop, evaluation, checkpoints and ablation grids.

pub mod ablate;
pub mod config;
pub mod optim;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{aux_loss, seg_loss, total_loss, LossReport};
use crate::metrics::{EvalAccumulator, Metrics, HISTOGRAM_EDGES};
use crate::model::CoupAlign;
use crate::nn::params::ParamStore;
use crate::nn::{Graph, Mode};
use crate::tensor::{catn, Tensor};

pub use config::{OptimConfig, RunConfig};
pub use optim::{poly_lr, AdamW};

/// Train, validation and test samples.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Splits {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let m = &cfg.model;
        let gen = |split, n| data::generate_split(cfg.data_seed, split, n, m.height, m.width, m.t_max);
        Ok(Self {
            train: gen(Split::Train, cfg.n_train)?,
            val: gen(Split::Val, cfg.n_val)?,
            test: gen(Split::Test, cfg.n_test)?,
        })
    }

    /// Reads `train/`, `val/` and `test/` dataset directories.
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: data::load(&dir.join("train"))?,
            val: data::load(&dir.join("val"))?,
            test: data::load(&dir.join("test"))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        data::save(&self.train, &dir.join("train"))?;
        data::save(&self.val, &dir.join("val"))?;
        data::save(&self.test, &dir.join("test"))
    }

    /// Loads `cfg.data_dir` when set, otherwise generates from `cfg.data_seed`.
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data_dir {
            Some(d) => Self::load(d),
            None => Self::generate(cfg),
        }
    }

    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_seg: f64,
    pub loss_aux: f64,
    pub lr: f64,
}

impl TraceRow {
    pub const HEADER: &'static str = "step,loss_total,loss_seg,loss_aux,lr";
    pub fn csv(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.loss_total, self.loss_seg, self.loss_aux, self.lr
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val: Metrics,
}

fn check_sample(cfg: &RunConfig, s: &Sample) -> Result<()> {
    let m = &cfg.model;
    if s.image.shape() != [m.height, m.width, 3] {
        return Err(Error::Input(format!(
            "sample image is {:?}, model expects {}×{}×3",
            s.image.shape(),
            m.height,
            m.width
        )));
    }
    Ok(())
}

/// Sigmoid ≥ 0.5, i.e. logit ≥ 0.
pub fn binarize(logits: &[f32]) -> Vec<bool> {
    logits.iter().map(|&x| x >= 0.0).collect()
}

pub fn mask_bits(mask: &Tensor<f32>) -> Vec<bool> {
    mask.data().iter().map(|&v| v > 0.5).collect()
}

/// `[H×W]` logits for each sample, evaluated in inference mode.
pub fn predict(model: &CoupAlign, store: &ParamStore<f32>, samples: &[Sample], batch: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let mut g = Graph::new(store, Mode::Eval);
        let items: Vec<(&Tensor<f32>, &[u32])> = chunk.iter().map(|s| (&s.image, s.tokens.as_slice())).collect();
        let outs = model.forward_batch(&mut g, &items)?;
        for o in outs {
            out.push(g.tape.to_tensor(o.logits));
        }
    }
    Ok(out)
}

pub fn evaluate(model: &CoupAlign, store: &ParamStore<f32>, samples: &[Sample], batch: usize) -> Result<EvalAccumulator> {
    let preds = predict(model, store, samples, batch)?;
    let mut acc = EvalAccumulator::new();
    for (p, s) in preds.iter().zip(samples) {
        acc.accumulate(&binarize(p.data()), &mask_bits(&s.mask))?;
    }
    Ok(acc)
}

/// Mutable training state; one [`step`](Trainer::step) per batch.
pub struct Trainer<'d> {
    pub cfg: RunConfig,
    pub model: CoupAlign,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub data: &'d Splits,
    pub epoch: usize,
    pub batch_index: usize,
    order: Vec<usize>,
    pub best: Option<EpochRecord>,
    pub best_store: Option<ParamStore<f32>>,
    pub trace: Vec<TraceRow>,
    pub history: Vec<EpochRecord>,
    pub last_loss: Option<LossReport>,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &RunConfig, data: &'d Splits) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Input("training needs non-empty train and val splits".into()));
        }
        for s in data.train.iter().chain(&data.val) {
            check_sample(cfg, s)?;
        }
        let (model, store) = CoupAlign::init::<f32>(&cfg.model, cfg.seed)?;
        let opt = AdamW::new(&store);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            opt,
            data,
            epoch: 0,
            batch_index: 0,
            order: epoch_order(cfg.seed, 0, data.train.len()),
            best: None,
            best_store: None,
            trace: Vec::new(),
            history: Vec::new(),
            last_loss: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.cfg.batch)
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn lr(&self) -> f64 {
        let t = self.epoch as f64 + self.batch_index as f64 / self.batches_per_epoch() as f64;
        poly_lr(t, &self.cfg.optim)
    }

    /// Loss and gradients of one batch; accumulates into the store's grads.
    fn batch_loss(&mut self, idx: &[usize]) -> Result<(LossReport, Vec<crate::nn::BnUpdate<f32>>)> {
        let samples: Vec<&Sample> = idx.iter().map(|&i| &self.data.train[i]).collect();
        let mut g = Graph::new(&self.store, Mode::Train);
        let items: Vec<(&Tensor<f32>, &[u32])> = samples.iter().map(|s| (&s.image, s.tokens.as_slice())).collect();
        let outs = self.model.forward_batch(&mut g, &items)?;
        let lambda = self.cfg.aux_weight();
        let mut segs = Vec::with_capacity(outs.len());
        let mut auxs = Vec::with_capacity(outs.len());
        for (o, s) in outs.iter().zip(&samples) {
            segs.push(seg_loss(&mut g.tape, o.logits, &s.mask)?);
            auxs.push(if lambda > 0.0 {
                aux_loss(&mut g.tape, o.y1, &s.mask, self.cfg.aux)?
            } else {
                None
            });
        }
        let (loss, report) = total_loss(&mut g.tape, &segs, &auxs, lambda)?;
        let bn = std::mem::take(&mut g.bn_updates);
        let grads = g.tape.backward(loss)?;
        grads.accumulate_into(&mut self.store);
        Ok((report, bn))
    }

    /// One optimizer step; evaluates on validation at epoch ends.
    pub fn step(&mut self) -> Result<TraceRow> {
        if self.done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let b = self.cfg.batch;
        let start = self.batch_index * b;
        let end = (start + b).min(self.order.len());
        let idx = self.order[start..end].to_vec();
        let lr = self.lr();
        self.store.zero_grads();
        let (report, bn) = self.batch_loss(&idx)?;
        Graph::apply_bn_updates(&bn, &mut self.store);
        self.opt.update(&mut self.store, lr, &self.cfg.optim)?;
        let row = TraceRow {
            step: self.opt.step,
            loss_total: report.total,
            loss_seg: report.seg,
            loss_aux: report.aux,
            lr,
        };
        self.last_loss = Some(report);
        self.trace.push(row);
        self.batch_index += 1;
        if self.batch_index == self.batches_per_epoch() {
            self.end_epoch()?;
        }
        Ok(row)
    }

    fn end_epoch(&mut self) -> Result<()> {
        let val = evaluate(&self.model, &self.store, &self.data.val, self.cfg.batch)?.finalize()?;
        info!(
            "epoch {} val oIoU {:.4} mIoU {:.4} prec@0.5 {:.4}",
            self.epoch + 1,
            val.oiou,
            val.miou,
            val.prec50
        );
        let rec = EpochRecord { epoch: self.epoch, val };
        self.history.push(rec);
        if self.best.is_none_or(|b| val.oiou > b.val.oiou) {
            self.best = Some(rec);
            self.best_store = Some(self.store.clone());
        }
        self.epoch += 1;
        self.batch_index = 0;
        self.order = epoch_order(self.cfg.seed, self.epoch, self.data.train.len());
        Ok(())
    }

    /// Runs to the configured epoch count.
    pub fn run(&mut self) -> Result<()> {
        while !self.done() {
            self.step()?;
        }
        Ok(())
    }

    /// Parameters of the best validation epoch (current ones if none yet).
    pub fn best_params(&self) -> &ParamStore<f32> {
        self.best_store.as_ref().unwrap_or(&self.store)
    }

    /// Writes `params.catn`, `optim.catn`, `state.txt` (and `best.catn`).
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        catn::save(&dir.join("params.catn"), &self.store.to_entries())?;
        catn::save(&dir.join("optim.catn"), &self.opt.to_entries(&self.store))?;
        if let Some(b) = &self.best_store {
            catn::save(&dir.join("best.catn"), &b.to_entries())?;
        }
        let mut s = String::new();
        let _ = writeln!(s, "format = 1");
        let _ = writeln!(s, "config_hash = {}", self.cfg.hash());
        let _ = writeln!(s, "seed = {}", self.cfg.seed);
        let _ = writeln!(s, "step = {}", self.opt.step);
        let _ = writeln!(s, "epoch = {}", self.epoch);
        let _ = writeln!(s, "batch_index = {}", self.batch_index);
        let _ = writeln!(s, "shuffle_stream = {}", self.epoch + 1);
        if let Some(b) = &self.best {
            let v = &b.val;
            let _ = writeln!(
                s,
                "best = {} {:016x} {:016x} {:016x} {:016x} {:016x} {}",
                b.epoch,
                v.oiou.to_bits(),
                v.miou.to_bits(),
                v.prec50.to_bits(),
                v.prec70.to_bits(),
                v.prec90.to_bits(),
                v.n
            );
        }
        for r in &self.history {
            let v = &r.val;
            let _ = writeln!(
                s,
                "history = {} {:016x} {:016x} {:016x} {:016x} {:016x} {}",
                r.epoch,
                v.oiou.to_bits(),
                v.miou.to_bits(),
                v.prec50.to_bits(),
                v.prec70.to_bits(),
                v.prec90.to_bits(),
                v.n
            );
        }
        fs::write(dir.join("state.txt"), s)?;
        Ok(())
    }

    /// Restores a trainer from [`save_checkpoint`](Self::save_checkpoint)
    /// output; the run configuration must hash identically.
    pub fn resume(cfg: &RunConfig, data: &'d Splits, dir: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        let text = fs::read_to_string(dir.join("state.txt"))
            .map_err(|e| Error::Input(format!("{}: {e}", dir.join("state.txt").display())))?;
        let mut fields: Vec<(String, String)> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("checkpoint state: malformed line {line:?}")))?;
            fields.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |k: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(n, _)| n == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Input(format!("checkpoint state is missing {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Input(format!("checkpoint state: bad {k}")))
        };
        if num("format")? != 1 {
            return Err(Error::UnsupportedVersion(num("format")? as u32));
        }
        if get("config_hash")? != cfg.hash() {
            return Err(Error::Config("checkpoint was written under a different configuration".into()));
        }
        t.store.load_entries(&catn::load(&dir.join("params.catn"))?)?;
        t.opt.load_entries(&t.store, &catn::load(&dir.join("optim.catn"))?)?;
        if t.opt.step != num("step")? {
            return Err(Error::Input("checkpoint step does not match optimizer state".into()));
        }
        t.epoch = num("epoch")? as usize;
        t.batch_index = num("batch_index")? as usize;
        t.order = epoch_order(cfg.seed, t.epoch, data.train.len());
        let parse_rec = |v: &str| -> Result<EpochRecord> {
            let p: Vec<&str> = v.split_whitespace().collect();
            let bad = || Error::Input(format!("checkpoint state: bad record {v:?}"));
            if p.len() != 7 {
                return Err(bad());
            }
            let f = |s: &str| u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| bad());
            Ok(EpochRecord {
                epoch: p[0].parse().map_err(|_| bad())?,
                val: Metrics {
                    oiou: f(p[1])?,
                    miou: f(p[2])?,
                    prec50: f(p[3])?,
                    prec70: f(p[4])?,
                    prec90: f(p[5])?,
                    n: p[6].parse().map_err(|_| bad())?,
                },
            })
        };
        for (k, v) in &fields {
            match k.as_str() {
                "best" => t.best = Some(parse_rec(v)?),
                "history" => t.history.push(parse_rec(v)?),
                _ => {}
            }
        }
        if t.best.is_some() {
            let mut b = t.store.clone();
            b.load_entries(&catn::load(&dir.join("best.catn"))?)?;
            t.best_store = Some(b);
        }
        Ok(t)
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub best: EpochRecord,
    pub history: Vec<EpochRecord>,
    pub trace: Vec<TraceRow>,
    pub best_store: ParamStore<f32>,
    pub model: CoupAlign,
}

/// Trains in memory without writing files.
pub fn train(cfg: &RunConfig, data: &Splits) -> Result<RunResult> {
    let mut t = Trainer::new(cfg, data)?;
    t.run()?;
    finish(t)
}

fn finish(t: Trainer<'_>) -> Result<RunResult> {
    let best = t.best.ok_or_else(|| Error::Contract("no completed epoch".into()))?;
    Ok(RunResult {
        best,
        history: t.history.clone(),
        trace: t.trace.clone(),
        best_store: t.best_store.clone().unwrap_or_else(|| t.store.clone()),
        model: t.model,
    })
}

fn metrics_row(split: &str, m: &Metrics) -> String {
    format!(
        "{split},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
        m.oiou, m.miou, m.prec50, m.prec70, m.prec90, m.n
    )
}

pub const METRICS_HEADER: &str = "split,oIoU,mIoU,prec50,prec70,prec90,n";

pub fn histogram_header() -> String {
    let mut h = String::from("split");
    for w in HISTOGRAM_EDGES.windows(2) {
        let _ = write!(h, ",{:.1}-{:.1}", w[0], w[1]);
    }
    h
}

/// Evaluates `splits` and writes `metrics.csv` and `histogram.csv` to `out`.
pub fn write_eval(
    model: &CoupAlign,
    store: &ParamStore<f32>,
    splits: &[(&str, &[Sample])],
    batch: usize,
    out: &Path,
) -> Result<Vec<(String, Metrics)>> {
    fs::create_dir_all(out)?;
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut hist = format!("{}\n", histogram_header());
    let mut res = Vec::new();
    for (name, samples) in splits {
        let acc = evaluate(model, store, samples, batch)?;
        let m = acc.finalize()?;
        metrics.push_str(&metrics_row(name, &m));
        metrics.push('\n');
        let h: Vec<String> = acc.iou_histogram(&HISTOGRAM_EDGES).iter().map(|c| c.to_string()).collect();
        let _ = writeln!(hist, "{name},{}", h.join(","));
        res.push((name.to_string(), m));
    }
    fs::write(out.join("metrics.csv"), metrics)?;
    fs::write(out.join("histogram.csv"), hist)?;
    Ok(res)
}

/// Full run with artifacts in `out`: `config.resolved.txt`, `trace.csv`,
/// `epochs.csv`, `metrics.csv`, `histogram.csv`, `best.catn` and a
/// `checkpoint/` directory refreshed every epoch. With `resume`, training
/// continues from that checkpoint directory.
pub fn train_to_dir(cfg: &RunConfig, data: &Splits, out: &Path, resume: Option<&Path>) -> Result<RunResult> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.txt"), cfg.render())?;
    let mut t = match resume {
        Some(dir) => Trainer::resume(cfg, data, dir)?,
        None => Trainer::new(cfg, data)?,
    };
    let trace_path = out.join("trace.csv");
    let mut trace = if resume.is_some() && trace_path.exists() {
        // Keep rows up to the checkpoint step; later ones are recomputed.
        let text = fs::read_to_string(&trace_path)?;
        let kept: Vec<&str> = text
            .lines()
            .filter(|l| match l.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                Some(step) => step <= t.opt.step,
                None => true,
            })
            .collect();
        let mut f = fs::File::create(&trace_path)?;
        for l in kept {
            writeln!(f, "{l}")?;
        }
        f
    } else {
        let mut f = fs::File::create(&trace_path)?;
        writeln!(f, "{}", TraceRow::HEADER)?;
        f
    };
    let ckpt = out.join("checkpoint");
    while !t.done() {
        let epoch = t.epoch;
        match t.step() {
            Ok(row) => writeln!(trace, "{}", row.csv())?,
            Err(e) => {
                if matches!(e, Error::NonFinite(_)) {
                    t.save_checkpoint(&out.join("last_good"))?;
                }
                return Err(e);
            }
        }
        if t.epoch != epoch {
            t.save_checkpoint(&ckpt)?;
        }
    }
    trace.flush()?;
    let mut epochs = format!("epoch,{}\n", &METRICS_HEADER[6..]);
    for r in &t.history {
        epochs.push_str(&metrics_row(&(r.epoch + 1).to_string(), &r.val));
        epochs.push('\n');
    }
    fs::write(out.join("epochs.csv"), epochs)?;
    let best = t.best_params().clone();
    catn::save(&out.join("best.catn"), &best.to_entries())?;
    let mut splits: Vec<(&str, &[Sample])> = vec![("val", &data.val)];
    if !data.test.is_empty() {
        splits.push(("test", &data.test));
    }
    write_eval(&t.model, &best, &splits, cfg.batch, out)?;
    finish(t)
}
