use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use coupalign::data::{self, Split};
use coupalign::error::{Error, Result};
use coupalign::gradcheck::{check_pipeline, DEFAULT_H, DEFAULT_TOL};
use coupalign::model::CoupAlign;
use coupalign::nn::{Graph, Mode};
use coupalign::tensor::catn;
use coupalign::train::ablate::{self, check_orderings};
use coupalign::train::{self, RunConfig, Splits};

#[derive(Parser)]
#[command(name = "coupalign", version, about = "Referring image segmentation on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits.
    GenData {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        /// Training samples.
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long = "n-val", default_value_t = 100)]
        n_val: usize,
        #[arg(long = "n-test", default_value_t = 100)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its artifacts.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate saved parameters on val and test.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Parameter file, usually `best.catn`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val,test", value_delimiter = ',')]
        splits: Vec<String>,
    },
    /// Train an ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// One of single, components, table5, position, queries.
        #[arg(long, default_value = "components")]
        grid: String,
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of the whole pipeline at 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_H)]
        h: f64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Write proposal weights and per-word attention maps as PGM images.
    ExportAttn {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(d) = &run.data {
        cfg.data_dir = Some(d.clone());
    }
    cfg.apply_overrides(&run.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(run: &RunArgs) -> PathBuf {
    run.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/latest"))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("split must be train, val or test, got {s:?}"))),
    }
}

fn load_params(cfg: &RunConfig, path: &Path) -> Result<(CoupAlign, coupalign::nn::params::ParamStore<f32>)> {
    let (model, mut store) = CoupAlign::init::<f32>(&cfg.model, cfg.seed)?;
    store.load_entries(&catn::load(path)?)?;
    Ok((model, store))
}

/// 8-bit binary PGM of one map, min-max normalized.
fn write_pgm(path: &Path, h: usize, w: usize, v: &[f32]) -> Result<()> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(v.iter().map(|&x| (((x - lo) / span) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

fn export_attn(cfg: &RunConfig, ckpt: &Path, split: Split, index: usize, out: &Path) -> Result<()> {
    let splits = Splits::for_config(cfg)?;
    let samples = splits.get(split);
    let s = samples
        .get(index)
        .ok_or_else(|| Error::Input(format!("{split} split has {} samples, no index {index}", samples.len())))?;
    let (model, store) = load_params(cfg, ckpt)?;
    let mut g = Graph::new(&store, Mode::Eval);
    g.record = Some(Vec::new());
    let outs = model.forward_batch(&mut g, &[(&s.image, s.tokens.as_slice())])?;
    let logits = g.tape.to_tensor(outs[0].logits);
    fs::create_dir_all(out)?;
    let (h, w) = (cfg.model.height, cfg.model.width);
    write_pgm(&out.join("prediction.pgm"), h, w, logits.data())?;
    write_pgm(&out.join("ground_truth.pgm"), h, w, s.mask.data())?;
    let words: Vec<String> = s
        .tokens
        .iter()
        .map(|&t| data::vocab::word(t).unwrap_or("?").trim_matches(['<', '>']).to_string())
        .collect();
    let mut index_txt = format!("expression = {}\n", s.expression());
    for (name, t) in g.record.take().unwrap_or_default() {
        if name == "dec.sma.q_w" {
            let n = t.len();
            write_pgm(&out.join("q_w.pgm"), 1, n, t.data())?;
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:.4}")).collect();
            index_txt.push_str(&format!("q_w = {}\n", vals.join(" ")));
            continue;
        }
        // Pixel-to-word weights [HW×T]: one map per valid word.
        let stage = name.trim_start_matches("wpa.").trim_end_matches(".attn");
        let (p, tcount) = (t.shape()[0], t.shape()[1]);
        let side = (p as f64).sqrt() as usize;
        let (gh, gw) = if side * side == p { (side, side) } else { (1, p) };
        for j in 0..tcount {
            if s.tokens[j] == data::vocab::PAD {
                continue;
            }
            let map: Vec<f32> = (0..p).map(|i| t.data()[i * tcount + j]).collect();
            let file = format!("{stage}_word{j}_{}.pgm", words[j]);
            write_pgm(&out.join(&file), gh, gw, &map)?;
            index_txt.push_str(&format!("{file} = {stage} attention to {:?}\n", words[j]));
        }
    }
    fs::write(out.join("index.txt"), index_txt)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData {
            seed,
            n,
            n_val,
            n_test,
            height,
            width,
            out,
        } => {
            let t = data::DEFAULT_T_MAX;
            let splits = Splits {
                train: data::generate_split(seed, Split::Train, n, height, width, t)?,
                val: data::generate_split(seed, Split::Val, n_val, height, width, t)?,
                test: data::generate_split(seed, Split::Test, n_test, height, width, t)?,
            };
            splits.save(&out)?;
            info!("wrote {n}/{n_val}/{n_test} samples to {}", out.display());
        }
        Command::Train { run, resume } => {
            let cfg = resolve(&run)?;
            let data = Splits::for_config(&cfg)?;
            let out = out_dir(&run);
            let r = train::train_to_dir(&cfg, &data, &out, resume.as_deref())?;
            let v = r.best.val;
            println!(
                "best epoch {}: val oIoU {:.4} mIoU {:.4} prec@0.5 {:.4}; artifacts in {}",
                r.best.epoch + 1,
                v.oiou,
                v.miou,
                v.prec50,
                out.display()
            );
        }
        Command::Eval { run, checkpoint, splits } => {
            let cfg = resolve(&run)?;
            let data = Splits::for_config(&cfg)?;
            let (model, store) = load_params(&cfg, &checkpoint)?;
            let out = out_dir(&run);
            let chosen = splits
                .iter()
                .map(|s| Ok((s.as_str(), data.get(parse_split(s)?))))
                .collect::<Result<Vec<_>>>()?;
            let res = train::write_eval(&model, &store, &chosen, cfg.batch, &out)?;
            println!("{}", train::METRICS_HEADER);
            for (name, m) in res {
                println!(
                    "{name},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
                    m.oiou, m.miou, m.prec50, m.prec70, m.prec90, m.n
                );
            }
        }
        Command::Ablate { run, grid, seeds } => {
            let cfg = resolve(&run)?;
            let cells = ablate::grid(&grid)?;
            let data = Splits::for_config(&cfg)?;
            let rows = ablate::ablate(&cfg, &cells, &seeds, &data)?;
            let sums = ablate::summarize(&rows);
            let out = out_dir(&run);
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation_runs.csv"), ablate::rows_csv(&rows))?;
            fs::write(out.join("ablation.csv"), ablate::summary_csv(&sums))?;
            let table = ablate::summary_table(&sums);
            fs::write(out.join("ablation.txt"), &table)?;
            print!("{table}");
            if grid == "components" || grid == "table5" {
                let pairs: &[(&str, &str)] = if grid == "components" {
                    &[("full", "uni-wpa"), ("uni-wpa", "no-wpa"), ("full", "sma-off"), ("full", "aux-off")]
                } else {
                    &[("bi-wpa/sma/aux", "uni-wpa/sma/aux"), ("uni-wpa/sma/aux", "no-wpa/sma/aux")]
                };
                for o in check_orderings(&sums, pairs, 0.01)? {
                    println!(
                        "{} {} ≥ {} (mIoU gap {:+.4})",
                        if o.holds { "ok  " } else { "FLAG" },
                        o.better,
                        o.worse,
                        o.gap
                    );
                }
            }
        }
        Command::Gradcheck { seeds, h, tol } => {
            let mut ok = true;
            for seed in 0..seeds {
                let r = check_pipeline(seed, h, tol, 4)?;
                let worst = r.worst.as_ref().map(|w| w.0.as_str()).unwrap_or("-");
                println!(
                    "seed {seed}: max rel err {:.3e} over {} coordinates ({} excluded at kinks), worst {worst}: {}",
                    r.max_rel_error,
                    r.compared,
                    r.excluded,
                    if r.passed() { "pass" } else { "FAIL" }
                );
                ok &= r.passed();
            }
            if !ok {
                return Err(Error::Contract("gradient check exceeded tolerance".into()));
            }
        }
        Command::ExportAttn {
            run,
            checkpoint,
            split,
            index,
        } => {
            let cfg = resolve(&run)?;
            let out = out_dir(&run);
            export_attn(&cfg, &checkpoint, parse_split(&split)?, index, &out)?;
            println!("attention maps written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
