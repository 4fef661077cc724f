//! Ablation grids: each cell is a set of config overrides trained over
//! several seeds and summarized as mean ± sd.

use std::fmt::Write as _;

use log::info;

use super::{train, RunConfig, Splits};
use crate::error::{Error, Result};
use crate::metrics::Metrics;

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Cell {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut c = base.clone();
        for (k, v) in &self.overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }
}

pub const GRIDS: [&str; 5] = ["single", "components", "table5", "position", "queries"];

/// Named grids. `components` is the full model against each single
/// component removed or weakened.
pub fn grid(name: &str) -> Result<Vec<Cell>> {
    let cells = match name {
        "single" => vec![Cell::new("full", &[])],
        "components" => vec![
            Cell::new("full", &[]),
            Cell::new("uni-wpa", &[("wpa.mode", "uni")]),
            Cell::new("no-wpa", &[("wpa.mode", "off")]),
            Cell::new("sma-off", &[("sma.enabled", "false")]),
            Cell::new("aux-off", &[("aux.enabled", "false")]),
        ],
        "table5" => {
            let mut v = Vec::new();
            for (wn, w) in [("no-wpa", "off"), ("uni-wpa", "uni"), ("bi-wpa", "bi")] {
                for (sn, s) in [("sma", "true"), ("no-sma", "false")] {
                    for (an, a) in [("aux", "true"), ("no-aux", "false")] {
                        v.push(Cell::new(
                            &format!("{wn}/{sn}/{an}"),
                            &[("wpa.mode", w), ("sma.enabled", s), ("aux.enabled", a)],
                        ));
                    }
                }
            }
            v
        }
        "position" => ["1,2,3,4", "1,2", "3,4", "4", "3", "2", "1"]
            .iter()
            .map(|s| Cell::new(&format!("stages {s}"), &[("wpa.stages", s)]))
            .collect(),
        "queries" => ["4", "16", "64"]
            .iter()
            .map(|n| Cell::new(&format!("N={n}"), &[("decoder.queries", n)]))
            .collect(),
        _ => {
            return Err(Error::Config(format!(
                "unknown ablation grid {name:?}; known: {}",
                GRIDS.join(", ")
            )))
        }
    };
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub val: Metrics,
}

/// Trains every cell under every seed; rows are cell-major.
pub fn ablate(base: &RunConfig, cells: &[Cell], seeds: &[u64], data: &Splits) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for cell in cells {
        for &seed in seeds {
            let mut cfg = cell.apply(base)?;
            cfg.seed = seed;
            info!("ablation cell {} seed {seed}", cell.name);
            let r = train(&cfg, data)?;
            rows.push(AblationRow {
                cell: cell.name.clone(),
                seed,
                best_epoch: r.best.epoch,
                val: r.best.val,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (zero for one seed).
    pub sd: f64,
}

pub fn stat(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Stat { mean, sd }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: String,
    pub seeds: usize,
    pub oiou: Stat,
    pub miou: Stat,
    pub prec50: Stat,
}

/// Groups rows by cell in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<CellSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.cell.as_str()) {
            names.push(&r.cell);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| r.cell == name).collect();
            let pick = |f: fn(&Metrics) -> f64| stat(&rs.iter().map(|r| f(&r.val)).collect::<Vec<_>>());
            CellSummary {
                cell: name.to_string(),
                seeds: rs.len(),
                oiou: pick(|m| m.oiou),
                miou: pick(|m| m.miou),
                prec50: pick(|m| m.prec50),
            }
        })
        .collect()
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("cell,seed,best_epoch,oIoU,mIoU,prec50,prec70,prec90,n\n");
    for r in rows {
        let m = &r.val;
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.cell,
            r.seed,
            r.best_epoch + 1,
            m.oiou,
            m.miou,
            m.prec50,
            m.prec70,
            m.prec90,
            m.n
        );
    }
    s
}

pub fn summary_csv(sums: &[CellSummary]) -> String {
    let mut s = String::from("cell,seeds,oIoU_mean,oIoU_sd,mIoU_mean,mIoU_sd,prec50_mean,prec50_sd\n");
    for c in sums {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            c.cell, c.seeds, c.oiou.mean, c.oiou.sd, c.miou.mean, c.miou.sd, c.prec50.mean, c.prec50.sd
        );
    }
    s
}

/// Aligned text table.
pub fn summary_table(sums: &[CellSummary]) -> String {
    let w = sums.iter().map(|c| c.cell.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<w$}  {:>15}  {:>15}  {:>15}\n", "cell", "oIoU", "mIoU", "prec@0.5");
    for c in sums {
        let f = |st: Stat| format!("{:.3} ± {:.3}", st.mean, st.sd);
        let _ = writeln!(s, "{:<w$}  {:>15}  {:>15}  {:>15}", c.cell, f(c.oiou), f(c.miou), f(c.prec50));
    }
    s
}

/// A directional expectation `better ≥ worse − tol` on mean val mIoU.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    pub better: String,
    pub worse: String,
    pub gap: f64,
    pub holds: bool,
}

pub fn check_orderings(sums: &[CellSummary], pairs: &[(&str, &str)], tol: f64) -> Result<Vec<Ordering>> {
    let find = |n: &str| {
        sums.iter()
            .find(|c| c.cell == n)
            .ok_or_else(|| Error::Contract(format!("no ablation cell named {n}")))
    };
    pairs
        .iter()
        .map(|(b, w)| {
            let gap = find(b)?.miou.mean - find(w)?.miou.mean;
            Ok(Ordering {
                better: b.to_string(),
                worse: w.to_string(),
                gap,
                holds: gap >= -tol,
            })
        })
        .collect()
}
