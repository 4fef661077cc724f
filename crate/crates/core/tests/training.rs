use std::fs;

use coupalign::metrics::Metrics;
use coupalign::model::CoupAlign;
use coupalign::nn::params::ParamStore;
use coupalign::tensor::{catn, Tensor};
use coupalign::train::ablate::{ablate, check_orderings, grid, summarize, AblationRow, GRIDS};
use coupalign::train::{poly_lr, train, train_to_dir, AdamW, OptimConfig, RunConfig, Splits, TraceRow, Trainer};
use coupalign::Error;

/// A model and dataset small enough for a few epochs in a test.
fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_text(
        "
        model.height = 32
        model.width = 32
        model.patch = 2
        model.c1 = 4
        model.dim = 8
        wpa.dim = 8
        decoder.queries = 4
        decoder.dq = 8
        decoder.ds = 4
        decoder.layers = 1
        data.train = 12
        data.val = 4
        data.test = 2
        train.batch = 4
        train.epochs = 2
        optim.lr0 = 1e-3
        optim.lr_end = 1e-4
        optim.max_decay_epoch = 2
        ",
    )
    .unwrap();
    c
}

fn bits(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    store
        .ids()
        .map(|id| (store.name(id).to_string(), store.get(id).data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn trace_csv(rows: &[TraceRow]) -> String {
    rows.iter().map(|r| r.csv() + "\n").collect()
}

// ---- schedule and optimizer ----

#[test]
fn poly_schedule_examples() {
    let c = OptimConfig::default();
    assert!((poly_lr(0.0, &c) - 3e-5).abs() < 1e-15);
    assert!((poly_lr(c.max_decay_epoch, &c) - 1.5e-5).abs() < 1e-15);
    assert_eq!(poly_lr(c.max_decay_epoch + 7.0, &c), c.lr_end);
    assert_eq!(poly_lr(-1.0, &c), c.lr0);
    let linear = OptimConfig { power: 1.0, ..c };
    assert!((poly_lr(c.max_decay_epoch / 2.0, &linear) - 2.25e-5).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for i in 0..=60 {
        let lr = poly_lr(i as f64 * 0.5, &c);
        assert!(lr <= prev);
        prev = lr;
    }
}

fn one_param(v: f32) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert("theta", Tensor::new(&[1], vec![v]).unwrap().with_grad()).unwrap();
    s
}

fn adam_step(theta: f32, grad: f32, lr: f64, wd: f64) -> f32 {
    let mut s = one_param(theta);
    let id = s.id("theta").unwrap();
    s.add_grad(id, &[grad]);
    let mut opt = AdamW::new(&s);
    let cfg = OptimConfig { weight_decay: wd, ..OptimConfig::default() };
    opt.update(&mut s, lr, &cfg).unwrap();
    s.get(id).data()[0]
}

#[test]
fn adamw_examples() {
    assert_eq!(adam_step(0.7, 0.0, 0.1, 0.0), 0.7);
    assert!((adam_step(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-6);
    // first step moves by lr regardless of gradient scale
    assert!((adam_step(1.0, -250.0, 0.1, 0.0) - 1.1).abs() < 1e-6);
    let lr = 0.1;
    let wd = 0.01;
    assert!((adam_step(2.0, 0.0, lr, wd) - 2.0 * (1.0 - lr * wd) as f32).abs() < 1e-7);
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let mut s = one_param(1.0);
    let id = s.id("theta").unwrap();
    s.add_grad(id, &[f32::NAN]);
    let mut opt = AdamW::new(&s);
    assert!(matches!(opt.update(&mut s, 0.1, &OptimConfig::default()), Err(Error::NonFinite(_))));
    assert_eq!(s.get(id).data()[0], 1.0);
}

// ---- configuration ----

#[test]
fn config_render_round_trips() {
    let c = tiny();
    let mut back = RunConfig::default();
    back.apply_text(&c.render()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    let mut other = c.clone();
    other.set("seed", "9").unwrap();
    assert_ne!(other.hash(), c.hash());
}

#[test]
fn config_errors() {
    let mut c = RunConfig::default();
    assert!(matches!(c.set("model.depth", "3"), Err(Error::Config(_))));
    assert!(matches!(c.set("train.batch", "many"), Err(Error::Config(_))));
    assert!(matches!(c.set("sma.enabled", "maybe"), Err(Error::Config(_))));
    assert!(matches!(c.set("wpa.stages", "0,5"), Err(Error::Config(_))));
    assert!(matches!(c.apply_text("seed 3"), Err(Error::Config(_))));
    assert!(matches!(c.apply_overrides(&["seed"]), Err(Error::Config(_))));
    c.apply_overrides(&["wpa.stages=3,4", "optim.lr0 = 0.01"]).unwrap();
    assert_eq!(c.model.wpa_stages, [false, false, true, true]);
    assert_eq!(c.optim.lr0, 0.01);

    let bad_lr = RunConfig { optim: OptimConfig { lr0: 1e-5, lr_end: 1e-4, ..OptimConfig::default() }, ..RunConfig::default() };
    assert!(matches!(bad_lr.validate(), Err(Error::Config(_))));
    let no_batch = RunConfig { batch: 0, ..RunConfig::default() };
    assert!(matches!(no_batch.validate(), Err(Error::Config(_))));
    RunConfig::default().validate().unwrap();
}

// ---- checkpoint files ----

#[test]
fn parameter_store_survives_a_catn_round_trip() {
    let (_, store) = CoupAlign::init::<f32>(&tiny().model, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.catn");
    catn::save(&path, &store.to_entries()).unwrap();
    let (_, mut other) = CoupAlign::init::<f32>(&tiny().model, 4).unwrap();
    assert_ne!(bits(&other), bits(&store));
    other.load_entries(&catn::load(&path).unwrap()).unwrap();
    assert_eq!(bits(&other), bits(&store));

    let (_, mut wrong) = CoupAlign::init::<f32>(&RunConfig::default().model, 4).unwrap();
    assert!(wrong.load_entries(&catn::load(&path).unwrap()).is_err());
}

// ---- training runs ----

#[test]
fn identical_runs_produce_identical_traces() {
    let cfg = tiny();
    let data = Splits::generate(&cfg).unwrap();
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
    assert_eq!(bits(&a.best_store), bits(&b.best_store));
    assert_eq!(a.trace.len(), 2 * 3);
    for w in a.trace.windows(2) {
        assert!(w[1].lr <= w[0].lr);
        assert_eq!(w[1].step, w[0].step + 1);
    }
    assert!(a.trace.iter().all(|r| r.loss_total.is_finite() && r.loss_seg > 0.0));
    assert_eq!(a.history.len(), 2);
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let mut cfg = tiny();
    cfg.apply_overrides(&["optim.lr0=0", "optim.lr_end=0", "train.epochs=1"]).unwrap();
    let data = Splits::generate(&cfg).unwrap();
    let (_, init) = CoupAlign::init::<f32>(&cfg.model, cfg.seed).unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.run().unwrap();
    for id in init.trainable() {
        assert_eq!(init.get(id).data(), t.store.get(id).data(), "{}", init.name(id));
    }
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let mut cfg = tiny();
    cfg.set("train.epochs", "3").unwrap();
    let data = Splits::generate(&cfg).unwrap();
    let full = train(&cfg, &data).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    // stop mid-epoch so the shuffle position matters
    for _ in 0..4 {
        t.step().unwrap();
    }
    t.save_checkpoint(dir.path()).unwrap();
    drop(t);
    let mut r = Trainer::resume(&cfg, &data, dir.path()).unwrap();
    assert_eq!(r.opt.step, 4);
    r.run().unwrap();
    assert_eq!(trace_csv(&r.trace), trace_csv(&full.trace[4..]));
    assert_eq!(r.history, full.history);
    assert_eq!(bits(r.best_params()), bits(&full.best_store));

    let mut other = cfg.clone();
    other.set("seed", "1").unwrap();
    assert!(matches!(Trainer::resume(&other, &data, dir.path()), Err(Error::Config(_))));
}

#[test]
fn smoke_run_writes_every_artifact() {
    let mut cfg = tiny();
    cfg.set("train.epochs", "1").unwrap();
    let data = Splits::generate(&cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let res = train_to_dir(&cfg, &data, out.path(), None).unwrap();
    for f in ["config.resolved.txt", "trace.csv", "epochs.csv", "metrics.csv", "histogram.csv", "best.catn"] {
        assert!(out.path().join(f).is_file(), "missing {f}");
    }
    for f in ["params.catn", "optim.catn", "state.txt", "best.catn"] {
        assert!(out.path().join("checkpoint").join(f).is_file(), "missing checkpoint/{f}");
    }
    let trace = fs::read_to_string(out.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);
    assert_eq!(trace.lines().next().unwrap(), TraceRow::HEADER);
    let metrics = fs::read_to_string(out.path().join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("val,")));
    assert!(metrics.lines().any(|l| l.starts_with("test,")));
    let resolved = fs::read_to_string(out.path().join("config.resolved.txt")).unwrap();
    let mut back = RunConfig::default();
    back.apply_text(&resolved).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(res.history.len(), 1);
}

#[test]
fn wrong_image_size_is_an_input_error() {
    let cfg = tiny();
    let data = Splits::generate(&RunConfig { model: RunConfig::default().model, ..tiny() }).unwrap();
    assert!(matches!(Trainer::new(&cfg, &data), Err(Error::Input(_))));
}

// ---- ablations ----

#[test]
fn grids_have_the_expected_cells() {
    let sizes: Vec<usize> = GRIDS.iter().map(|g| grid(g).unwrap().len()).collect();
    assert_eq!(sizes, vec![1, 5, 12, 7, 3]);
    assert!(matches!(grid("everything"), Err(Error::Config(_))));
    let base = tiny();
    for g in GRIDS {
        for cell in grid(g).unwrap() {
            cell.apply(&base).unwrap().validate().unwrap();
        }
    }
}

#[test]
fn ablation_rows_cover_every_cell_and_seed() {
    let mut cfg = tiny();
    cfg.set("train.epochs", "1").unwrap();
    let data = Splits::generate(&cfg).unwrap();
    let cells = grid("queries").unwrap();
    let rows = ablate(&cfg, &cells[..2], &[0, 1], &data).unwrap();
    assert_eq!(rows.len(), 2 * 2);
    let sums = summarize(&rows);
    assert_eq!(sums.len(), 2);
    assert!(sums.iter().all(|s| s.seeds == 2));
}

fn row(cell: &str, seed: u64, miou: f64) -> AblationRow {
    AblationRow {
        cell: cell.into(),
        seed,
        best_epoch: 0,
        val: Metrics { oiou: miou, miou, prec50: 0.0, prec70: 0.0, prec90: 0.0, n: 10 },
    }
}

#[test]
fn orderings_respect_the_tolerance() {
    let rows = vec![row("a", 0, 0.50), row("a", 1, 0.60), row("b", 0, 0.56), row("b", 1, 0.5599)];
    let sums = summarize(&rows);
    let a = sums.iter().find(|s| s.cell == "a").unwrap();
    assert!((a.miou.mean - 0.55).abs() < 1e-12);
    let o = check_orderings(&sums, &[("a", "b")], 0.01).unwrap();
    assert!(o[0].holds);
    let o = check_orderings(&sums, &[("a", "b")], 0.0).unwrap();
    assert!(!o[0].holds);
    assert!(check_orderings(&sums, &[("a", "c")], 0.01).is_err());
}
