//! Accuracy and calibration metrics over predicted class distributions.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no prediction records")]
    EmptyRecords,
    #[error("bin count must be at least 1")]
    NoBins,
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub true_label: usize,
}

impl PredictionRecord {
    pub fn new(probs: Vec<f64>, true_label: usize) -> Self {
        Self { probs, true_label }
    }

    /// Most probable class; ties go to the lowest id.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted()]
    }

    pub fn correct(&self) -> bool {
        self.predicted() == self.true_label
    }
}

/// Checks the simplex constraints on every record.
pub fn validate(records: &[PredictionRecord]) -> Result<()> {
    for (index, r) in records.iter().enumerate() {
        let bad = |reason: String| Err(MetricsError::InvalidRecord { index, reason });
        if r.probs.is_empty() {
            return bad("empty probability vector".into());
        }
        if r.true_label >= r.probs.len() {
            return bad(format!("label {} outside {} classes", r.true_label, r.probs.len()));
        }
        if r.probs.iter().any(|&p| !(p >= 0.0)) {
            return bad("negative or NaN probability".into());
        }
        let s: f64 = r.probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return bad(format!("probabilities sum to {s}"));
        }
    }
    Ok(())
}

fn nonempty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        Err(MetricsError::EmptyRecords)
    } else {
        Ok(())
    }
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    nonempty(records)?;
    let hits = records.iter().filter(|r| r.correct()).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Mean squared distance to the one-hot label, in `[0, 2]`.
pub fn brier(records: &[PredictionRecord]) -> Result<f64> {
    nonempty(records)?;
    let total: f64 = records
        .iter()
        .map(|r| {
            r.probs
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let d = p - if k == r.true_label { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_conf: f64,
    pub accuracy: f64,
}

/// Equal-width confidence bins; empty bins report zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
}

/// Bin of a confidence in `[0, 1]` among `bins` half-open bins; 1.0 falls in
/// the last one.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).floor() as usize).min(bins - 1)
}

pub fn reliability_export(records: &[PredictionRecord], bins: usize) -> Result<ReliabilityBins> {
    nonempty(records)?;
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for r in records {
        let c = r.confidence();
        let b = bin_index(c, bins);
        count[b] += 1;
        conf[b] += c;
        hits[b] += usize::from(r.correct());
    }
    let bins = (0..bins)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: n,
                mean_conf: if n > 0 { conf[b] / n as f64 } else { 0.0 },
                accuracy: if n > 0 { hits[b] as f64 / n as f64 } else { 0.0 },
            }
        })
        .collect();
    Ok(ReliabilityBins { bins })
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    fn gaps(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.bins.iter().filter(|b| b.count > 0).map(|b| (b.count, (b.accuracy - b.mean_conf).abs()))
    }

    pub fn ece(&self) -> f64 {
        let n = self.total() as f64;
        self.gaps().map(|(c, g)| c as f64 / n * g).sum()
    }

    pub fn mce(&self) -> f64 {
        self.gaps().map(|(_, g)| g).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "count", "mean_conf", "accuracy"])?;
        for b in &self.bins {
            w.write_record([fmt(b.lo), fmt(b.hi), b.count.to_string(), fmt(b.mean_conf), fmt(b.accuracy)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest decimal that round-trips.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Weighted mean gap between accuracy and confidence over equal-width bins.
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<f64> {
    Ok(reliability_export(records, bins)?.ece())
}

/// Largest gap between accuracy and confidence over non-empty bins.
pub fn mce(records: &[PredictionRecord], bins: usize) -> Result<f64> {
    Ok(reliability_export(records, bins)?.mce())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub brier: f64,
}

impl MetricSummary {
    pub fn compute(records: &[PredictionRecord], bins: usize) -> Result<Self> {
        let rel = reliability_export(records, bins)?;
        Ok(Self { accuracy: accuracy(records)?, ece: rel.ece(), mce: rel.mce(), brier: brier(records)? })
    }

    /// Elementwise mean.
    pub fn mean(items: &[Self]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&Self) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self { accuracy: sum(|m| m.accuracy), ece: sum(|m| m.ece), mce: sum(|m| m.mce), brier: sum(|m| m.brier) })
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: String,
    pub dataset: String,
    pub size: String,
    pub seed: u64,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub brier: f64,
}

pub const METRICS_HEADER: [&str; 8] = ["algorithm", "dataset", "size", "seed", "accuracy", "ece", "mce", "brier"];

impl MetricsRow {
    pub fn new(algorithm: &str, dataset: &str, size: &str, seed: u64, m: MetricSummary) -> Self {
        Self {
            algorithm: algorithm.into(),
            dataset: dataset.into(),
            size: size.into(),
            seed,
            accuracy: m.accuracy,
            ece: m.ece,
            mce: m.mce,
            brier: m.brier,
        }
    }

    fn record(&self) -> [String; 8] {
        [
            self.algorithm.clone(),
            self.dataset.clone(),
            self.size.clone(),
            self.seed.to_string(),
            fmt(self.accuracy),
            fmt(self.ece),
            fmt(self.mce),
            fmt(self.brier),
        ]
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
