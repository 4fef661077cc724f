//! oIoU, mIoU, prec@ε and the failure-case IoU histogram.

use crate::error::{Error, Result};

pub const THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];
pub const HISTOGRAM_EDGES: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Exact intersection and union pixel counts of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    /// Empty prediction on empty ground truth counts as a perfect match.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn overlap(pred: &[bool], gt: &[bool]) -> Result<Overlap> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut o = Overlap { intersection: 0, union: 0 };
    for (&p, &g) in pred.iter().zip(gt) {
        o.intersection += (p && g) as u64;
        o.union += (p || g) as u64;
    }
    Ok(o)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalAccumulator {
    pub total_intersection: u64,
    pub total_union: u64,
    pub samples: Vec<Overlap>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub oiou: f64,
    pub miou: f64,
    pub prec50: f64,
    pub prec70: f64,
    pub prec90: f64,
    pub n: usize,
}

impl Metrics {
    pub fn prec(&self) -> [f64; 3] {
        [self.prec50, self.prec70, self.prec90]
    }
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &[bool], gt: &[bool]) -> Result<Overlap> {
        let o = overlap(pred, gt)?;
        self.total_intersection += o.intersection;
        self.total_union += o.union;
        self.samples.push(o);
        Ok(o)
    }

    /// Appends another shard; order of samples follows the call order.
    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.total_intersection += other.total_intersection;
        self.total_union += other.total_union;
        self.samples.extend_from_slice(&other.samples);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ious(&self) -> Vec<f64> {
        self.samples.iter().map(Overlap::iou).collect()
    }

    pub fn finalize(&self) -> Result<Metrics> {
        if self.samples.is_empty() {
            return Err(Error::Contract("no samples to evaluate".into()));
        }
        let n = self.samples.len();
        let ious = self.ious();
        let frac = |eps: f64| ious.iter().filter(|&&v| v > eps).count() as f64 / n as f64;
        Ok(Metrics {
            oiou: if self.total_union == 0 {
                1.0
            } else {
                self.total_intersection as f64 / self.total_union as f64
            },
            miou: ious.iter().sum::<f64>() / n as f64,
            prec50: frac(THRESHOLDS[0]),
            prec70: frac(THRESHOLDS[1]),
            prec90: frac(THRESHOLDS[2]),
            n,
        })
    }

    /// Counts of samples per half-open bucket `[edges[k], edges[k+1])`.
    /// Samples at or above the last edge are not counted.
    pub fn iou_histogram(&self, edges: &[f64]) -> Vec<usize> {
        let mut counts = vec![0; edges.len().saturating_sub(1)];
        for iou in self.ious() {
            if let Some(k) = (0..counts.len()).find(|&k| iou >= edges[k] && iou < edges[k + 1]) {
                counts[k] += 1;
            }
        }
        counts
    }
}
