//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single PASS/FAIL line to stderr (uncaptured) before asserting.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use coupalign::autodiff::Tape;
use coupalign::decoder::Sma;
use coupalign::gradcheck::{check_pipeline, DEFAULT_H, DEFAULT_TOL};
use coupalign::losses::{aux_loss, seg_loss, AuxConfig};
use coupalign::metrics::{EvalAccumulator, HISTOGRAM_EDGES};
use coupalign::nn::params::{Init, ParamStore};
use coupalign::nn::{Graph, Mode};
use coupalign::tensor::{catn, Tensor};
use coupalign::train::ablate::{ablate, check_orderings, grid, summarize, AblationRow};
use coupalign::train::{train, train_to_dir, RunConfig, RunResult, Splits, Trainer};
use coupalign::wpa::WpaStage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::*;

/// Criteria run one at a time so wall-clock budgets are not shared.
static SERIAL: Mutex<()> = Mutex::new(());

const SEEDS: [u64; 3] = [0, 1, 2];
const MIOU_TARGET: f64 = 0.60;
const PREC_TARGET: f64 = 0.60;
const TRAIN_BUDGET: Duration = Duration::from_secs(20 * 60);
const ABLATION_TOL: f64 = 0.01;

fn report(n: usize, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} [{verdict}] {name}: {detail}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn toy_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.conf");
    RunConfig::from_file(&path).unwrap()
}

fn bits(store: &ParamStore<f32>) -> Vec<u32> {
    store.ids().flat_map(|id| store.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

// ---- 1: gradients ----

#[test]
fn criterion_1_gradient_integrity() {
    let _g = lock();
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut compared = 0;
    for (name, shape, build) in op_suite() {
        for seed in SEEDS {
            let rep = op_grad_check(&shape, &build, seed, DEFAULT_H, DEFAULT_TOL).unwrap();
            compared += rep.compared;
            if rep.max_rel_error > worst.0 {
                worst = (rep.max_rel_error, format!("{name} seed {seed}"));
            }
            if !rep.passed() || rep.compared == 0 {
                failures.push(format!("{name} seed {seed}"));
            }
        }
    }
    for seed in SEEDS {
        let rep = check_pipeline(seed, DEFAULT_H, DEFAULT_TOL, 4).unwrap();
        compared += rep.compared;
        if rep.max_rel_error > worst.0 {
            worst = (rep.max_rel_error, format!("pipeline seed {seed}"));
        }
        if !rep.passed() || rep.compared == 0 {
            failures.push(format!("pipeline seed {seed}: {:?}", rep.worst));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 120.0;
    report(
        1,
        "gradient integrity",
        ok,
        &format!(
            "{compared} coordinates, max rel err {:.2e} ({}), {secs:.1} s, failures {failures:?}",
            worst.0, worst.1
        ),
    );
    assert!(ok);
}

// ---- 2: oracles ----

#[test]
fn criterion_2_oracle_equivalence() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 5];
    for _ in 0..20 {
        let mut tape = Tape::<f64>::new();
        let (m, k, n) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let (av, bv) = (tape.constant(&a), tape.constant(&b));
        let c = tape.matmul(av, bv).unwrap();
        worst[0] = worst[0].max(max_abs_diff(tape.value(c), &naive_matmul(a.data(), b.data(), m, k, n)));

        let (h, w, cin, cout) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..4), rng.random_range(1..4));
        let ks = [1, 3][rng.random_range(0..2)];
        let x = rand_tensor(&mut rng, &[h, w, cin]);
        let kern = rand_tensor(&mut rng, &[ks, ks, cin, cout]);
        let (xv, kv) = (tape.constant(&x), tape.constant(&kern));
        let y = tape.conv2d(xv, kv, 1, ks / 2).unwrap();
        let oracle = naive_conv(x.data(), h, w, cin, kern.data(), ks, ks, cout, ks / 2);
        worst[1] = worst[1].max(max_abs_diff(tape.value(y), &oracle));

        let f = [2, 4][rng.random_range(0..2)];
        let x = rand_tensor(&mut rng, &[h, w, 1]);
        let xv = tape.constant(&x);
        let y = tape.bilinear_upsample(xv, f).unwrap();
        worst[2] = worst[2].max(max_abs_diff(tape.value(y), &naive_upsample(x.data(), h, w, f)));

        let (h, w, d) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..5));
        let y1 = rand_tensor(&mut rng, &[h, w, d]);
        let mut fg: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
        fg[0] = true;
        fg[1] = false;
        let mask = Tensor::new(&[h, w], fg.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let tau = rng.random_range(0.05..1.0);
        let normalize = rng.random_bool(0.7);
        let yv = tape.constant(&y1);
        let l = aux_loss(&mut tape, yv, &mask, AuxConfig { tau, normalize }).unwrap().unwrap();
        let want = info_nce_oracle(y1.data(), d, &fg, tau, normalize);
        worst[3] = worst[3].max((tape.value(l)[0] - want).abs());

        let logits = Tensor::new(&[h, w], (0..h * w).map(|_| rng.random_range(-8.0..8.0)).collect()).unwrap();
        let lv = tape.constant(&logits);
        let l = seg_loss(&mut tape, lv, &mask).unwrap();
        worst[4] = worst[4].max((tape.value(l)[0] - bce_oracle(logits.data(), mask.data())).abs());
    }
    let ok = worst.iter().all(|&e| e < 1e-6);
    report(
        2,
        "oracle equivalence",
        ok,
        &format!(
            "max abs diff over 20 cases: matmul {:.1e}, conv2d {:.1e}, bilinear {:.1e}, InfoNCE {:.1e}, BCE {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
    assert!(ok);
}

// ---- 3: metrics ----

#[test]
fn criterion_3_metric_exactness() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut acc = EvalAccumulator::new();
    let (mut sum_i, mut sum_u) = (0u64, 0u64);
    let mut ious = Vec::new();
    let mut mismatches = 0;
    let mut monotone = true;
    for case in 0..100 {
        let dp = [0.0, 0.2, 0.5, 0.8][case % 4];
        let dg = [0.3, 0.0, 0.6, 0.1][case % 4];
        let pred: Vec<bool> = (0..64).map(|_| rng.random_bool(dp)).collect();
        let gt: Vec<bool> = (0..64).map(|_| rng.random_bool(dg)).collect();
        let (mut i, mut u) = (0u64, 0u64);
        for y in 0..8 {
            for x in 0..8 {
                let (p, g) = (pred[y * 8 + x], gt[y * 8 + x]);
                if p && g {
                    i += 1;
                }
                if p || g {
                    u += 1;
                }
            }
        }
        let o = acc.accumulate(&pred, &gt).unwrap();
        mismatches += (o.intersection != i || o.union != u) as usize;
        sum_i += i;
        sum_u += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
        let m = acc.finalize().unwrap();
        monotone &= m.prec90 <= m.prec70 && m.prec70 <= m.prec50;
    }
    let m = acc.finalize().unwrap();
    let n = ious.len() as f64;
    let above = |e: f64| ious.iter().filter(|&&v| v > e).count();
    let mut hist = vec![0usize; HISTOGRAM_EDGES.len() - 1];
    for &v in &ious {
        for k in 0..hist.len() {
            if v >= HISTOGRAM_EDGES[k] && v < HISTOGRAM_EDGES[k + 1] {
                hist[k] += 1;
            }
        }
    }
    let exact = mismatches == 0
        && acc.total_intersection == sum_i
        && acc.total_union == sum_u
        && m.oiou == sum_i as f64 / sum_u as f64
        && (m.miou - ious.iter().sum::<f64>() / n).abs() < 1e-15
        && (m.prec50 * n).round() as usize == above(0.5)
        && (m.prec70 * n).round() as usize == above(0.7)
        && (m.prec90 * n).round() as usize == above(0.9)
        && acc.iou_histogram(&HISTOGRAM_EDGES) == hist;
    let ok = exact && monotone;
    report(
        3,
        "metric exactness",
        ok,
        &format!(
            "100 pairs, count mismatches {mismatches}, Σ∩ {sum_i} Σ∪ {sum_u}, histogram {hist:?}, monotone {monotone}"
        ),
    );
    assert!(ok);
}

// ---- 4: alignment ----

#[test]
fn criterion_4_alignment_invariants() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut max_norm_err = 0.0f64;
    let mut min_weight = f64::INFINITY;
    let mut max_scale_err = 0.0f64;
    let mut single_ok = true;
    for case in 0..1000u64 {
        let (dq, ds, d) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..6));
        let n = if case % 10 == 0 { 1 } else { rng.random_range(2..17) };
        let mut store = ParamStore::<f64>::new();
        let mut prng = ChaCha8Rng::seed_from_u64(case);
        let sma = Sma::new(&mut Init::new(&mut store, &mut prng), dq, ds, d).unwrap();
        let qo = rand_tensor(&mut rng, &[n, dq]);
        let y1 = rand_tensor(&mut rng, &[3, 2, ds]);
        let lg = rand_tensor(&mut rng, &[1, d]);
        let run = |lg: &Tensor<f64>| {
            let mut g = Graph::new(&store, Mode::Eval);
            let (q, y, l) = (g.tape.constant(&qo), g.tape.constant(&y1), g.tape.constant(lg));
            let o = sma.forward(&mut g, q, y, l).unwrap();
            (g.tape.value(o.q_w).to_vec(), g.tape.value(o.y_n).to_vec(), g.tape.value(o.m).to_vec())
        };
        let (qw, yn, m) = run(&lg);
        max_norm_err = max_norm_err.max((qw.iter().sum::<f64>() - 1.0).abs());
        min_weight = qw.iter().copied().fold(min_weight, f64::min);
        if n == 1 {
            single_ok &= yn == m;
        }
        let big = Tensor::new(&[1, d], lg.data().iter().map(|x| x * 1e3).collect()).unwrap();
        let (qw2, _, _) = run(&big);
        max_scale_err = qw.iter().zip(&qw2).map(|(a, b)| (a - b).abs()).fold(max_scale_err, f64::max);
    }

    let mut masked_max = 0.0f64;
    for case in 0..200u64 {
        let t = rng.random_range(1..8);
        let mut keep: Vec<bool> = (0..t).map(|_| rng.random_bool(0.6)).collect();
        keep[0] = true;
        let mut store = ParamStore::<f64>::new();
        let mut prng = ChaCha8Rng::seed_from_u64(case);
        let wpa = WpaStage::new(&mut Init::new(&mut store, &mut prng), 1, 4, 6, 5).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let v = g.tape.constant(&rand_tensor(&mut rng, &[7, 4]));
        let l = g.tape.constant(&rand_tensor(&mut rng, &[t, 6]));
        let ba = wpa.bi_attn(&mut g, v, l, &keep).unwrap();
        for row in g.tape.value(ba.attn).chunks(t) {
            for (a, &k) in row.iter().zip(&keep) {
                if !k {
                    masked_max = masked_max.max(a.abs());
                }
            }
        }
    }
    let ok = max_norm_err <= 1e-6 && min_weight > 0.0 && single_ok && max_scale_err <= 1e-6 && masked_max == 0.0;
    report(
        4,
        "alignment invariants",
        ok,
        &format!(
            "1000 inputs: |ΣQ_w − 1| ≤ {max_norm_err:.1e}, min Q_w {min_weight:.1e}, N=1 M = Y_N {single_ok}, \
             scale drift {max_scale_err:.1e}; 200 masks: max masked attention {masked_max:.1e}"
        ),
    );
    assert!(ok);
}

// ---- 5 and 6: training ----

struct TimedRun {
    seed: u64,
    secs: f64,
    result: RunResult,
}

fn toy_data() -> &'static Splits {
    static DATA: OnceLock<Splits> = OnceLock::new();
    DATA.get_or_init(|| Splits::generate(&toy_config()).unwrap())
}

/// The full model trained under each seed, shared by criteria 5 and 6.
fn full_runs() -> &'static [TimedRun] {
    static RUNS: OnceLock<Vec<TimedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = toy_config();
                cfg.seed = seed;
                let start = Instant::now();
                let result = train(&cfg, toy_data()).unwrap();
                TimedRun { seed, secs: start.elapsed().as_secs_f64(), result }
            })
            .collect()
    })
}

#[test]
fn criterion_5_toy_training() {
    let _g = lock();
    let cfg = toy_config();
    let m = &cfg.model;
    assert_eq!((m.wpa_mode.to_string().as_str(), m.wpa_stages, m.sma, cfg.aux_enabled, m.queries), ("bi", [true; 4], true, true, 16));
    assert_eq!((cfg.n_train, cfg.n_val, cfg.n_test, cfg.epochs), (500, 100, 100, 30));
    let runs = full_runs();
    let primary = &runs[0];
    let reached = primary
        .result
        .history
        .iter()
        .find(|r| r.val.miou >= MIOU_TARGET && r.val.prec50 >= PREC_TARGET);
    let in_time = primary.secs < TRAIN_BUDGET.as_secs_f64();
    let ok = reached.is_some() && in_time;
    let best = primary.result.best;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} mIoU {:.3} prec@0.5 {:.3} ({:.0} s)", r.seed, r.result.best.val.miou, r.result.best.val.prec50, r.secs))
        .collect();
    report(
        5,
        "toy training",
        ok,
        &format!(
            "seed {}: target mIoU ≥ {MIOU_TARGET} and prec@0.5 ≥ {PREC_TARGET} first met at epoch {}; \
             best epoch {} mIoU {:.4} prec@0.5 {:.4}; {:.0} s; all seeds: {}",
            primary.seed,
            reached.map_or("never".to_string(), |r| (r.epoch + 1).to_string()),
            best.epoch + 1,
            best.val.miou,
            best.val.prec50,
            primary.secs,
            per_seed.join("; ")
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_directional_ablation() {
    let _g = lock();
    let base = toy_config();
    let mut rows: Vec<AblationRow> = full_runs()
        .iter()
        .map(|r| AblationRow {
            cell: "full".into(),
            seed: r.seed,
            best_epoch: r.result.best.epoch,
            val: r.result.best.val,
        })
        .collect();
    let cells: Vec<_> = grid("components").unwrap().into_iter().filter(|c| c.name != "full").collect();
    rows.extend(ablate(&base, &cells, &SEEDS, toy_data()).unwrap());
    let sums = summarize(&rows);
    let pairs = [("full", "uni-wpa"), ("uni-wpa", "no-wpa"), ("full", "sma-off"), ("full", "aux-off")];
    let orders = check_orderings(&sums, &pairs, ABLATION_TOL).unwrap();
    let ok = orders.iter().all(|o| o.holds);
    let means: Vec<String> = sums.iter().map(|s| format!("{} {:.4}±{:.4}", s.cell, s.miou.mean, s.miou.sd)).collect();
    let gaps: Vec<String> = orders
        .iter()
        .map(|o| format!("{} − {} = {:+.4}{}", o.better, o.worse, o.gap, if o.holds { "" } else { " VIOLATED" }))
        .collect();
    report(
        6,
        "directional ablation",
        ok,
        &format!("mean val mIoU: {}; gaps: {}", means.join(", "), gaps.join(", ")),
    );
    assert!(ok);
}

// ---- 7: determinism and persistence ----

fn short_config() -> RunConfig {
    let mut c = toy_config();
    c.apply_overrides(&["data.train=48", "data.val=16", "data.test=8", "train.epochs=2"]).unwrap();
    c
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let _g = lock();
    let cfg = short_config();
    let data = Splits::generate(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = |n: &str| -> PathBuf { tmp.path().join(n) };

    train_to_dir(&cfg, &data, &dir("a"), None).unwrap();
    train_to_dir(&cfg, &data, &dir("b"), None).unwrap();
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    let trace_same = read(dir("a").join("trace.csv")) == read(dir("b").join("trace.csv"));
    let best_same = read(dir("a").join("best.catn")) == read(dir("b").join("best.catn"));

    // CATN: every dtype round-trips bit for bit
    let (_, store) = coupalign::model::CoupAlign::init::<f32>(&cfg.model, 7).unwrap();
    let mut entries = store.to_entries();
    let f64s = Tensor::<f64>::new(&[3], vec![1.0 / 3.0, -0.0, f64::MIN_POSITIVE]).unwrap();
    entries.push(("f64".into(), catn::to_any(&f64s)));
    let bytes = catn::encode(&entries).unwrap();
    let back = catn::decode(&bytes).unwrap();
    let catn_same = catn::encode(&back).unwrap() == bytes && back.len() == entries.len();
    let mut reloaded = store.clone();
    reloaded.load_entries(&back[..back.len() - 1]).unwrap();
    let store_same = bits(&reloaded) == bits(&store);

    // checkpoint round trip and resume from the middle of an epoch
    let full = train(&cfg, &data).unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    for _ in 0..t.batches_per_epoch() + 1 {
        t.step().unwrap();
    }
    t.save_checkpoint(&dir("ck1")).unwrap();
    let done_steps = t.trace.len();
    drop(t);
    let mut r = Trainer::resume(&cfg, &data, &dir("ck1")).unwrap();
    r.save_checkpoint(&dir("ck2")).unwrap();
    let ckpt_same = ["params.catn", "optim.catn", "state.txt", "best.catn"]
        .iter()
        .all(|f| read(dir("ck1").join(f)) == read(dir("ck2").join(f)));
    r.run().unwrap();
    let trace_rows = |rows: &[coupalign::train::TraceRow]| rows.iter().map(|x| x.csv()).collect::<Vec<_>>();
    let resume_same = trace_rows(&r.trace) == trace_rows(&full.trace[done_steps..])
        && bits(&r.store) == bits(&train_final_store(&cfg, &data))
        && bits(r.best_params()) == bits(&full.best_store)
        && r.history == full.history;

    let ok = trace_same && best_same && catn_same && store_same && ckpt_same && resume_same;
    report(
        7,
        "determinism and persistence",
        ok,
        &format!(
            "trace.csv identical {trace_same}, best.catn identical {best_same}, CATN {catn_same}, \
             store reload {store_same}, checkpoint {ckpt_same}, resume equals uninterrupted {resume_same}"
        ),
    );
    assert!(ok);
}

fn train_final_store(cfg: &RunConfig, data: &Splits) -> ParamStore<f32> {
    let mut t = Trainer::new(cfg, data).unwrap();
    t.run().unwrap();
    t.store
}

// ---- 8: loss anchors ----

#[test]
fn criterion_8_loss_anchors() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mask = Tensor::new(&[64, 64], (0..4096).map(|_| rng.random_bool(0.3) as u8 as f64).collect()).unwrap();
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(&Tensor::zeros(&[64, 64]));
    let l = seg_loss(&mut tape, z, &mask).unwrap();
    let seg = tape.value(l)[0];
    let seg_err = (seg - std::f64::consts::LN_2).abs();

    let y1 = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
    let yv = tape.constant(&y1);
    let a = aux_loss(&mut tape, yv, &m, AuxConfig { tau: 1.0, normalize: true }).unwrap().unwrap();
    let nce = tape.value(a)[0];
    let nce_err = (nce - 0.626524).abs();
    let ok = seg_err <= 1e-6 && nce_err <= 1e-5;
    report(
        8,
        "loss anchors",
        ok,
        &format!("zero-logit BCE {seg:.9} (|Δ ln 2| {seg_err:.1e}), orthogonal InfoNCE {nce:.6} (|Δ| {nce_err:.1e})"),
    );
    assert!(ok);
}
