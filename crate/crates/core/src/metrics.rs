//! Classification metrics, personalization gains and traffic counters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which score drives gain computation and reported curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MacroF1,
    Accuracy,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::MacroF1 => write!(f, "macro_f1"),
            Metric::Accuracy => write!(f, "accuracy"),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro_f1" => Ok(Metric::MacroF1),
            "accuracy" => Ok(Metric::Accuracy),
            other => Err(Error::Config {
                path: "metric".into(),
                detail: format!("unknown metric `{other}` (expected macro_f1 or accuracy)"),
            }),
        }
    }
}

pub fn score(metric: Metric, preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    match metric {
        Metric::MacroF1 => macro_f1(preds, labels, n_classes),
        Metric::Accuracy => accuracy(preds, labels),
    }
}

/// Unweighted mean over classes of per-class F1. A class absent from
/// both predictions and labels contributes F1 = 0 and still counts in
/// the divisor, so the score is comparable across shards with
/// different class support.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_pairs(preds, labels, n_classes)?;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnn = vec![0usize; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[y] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fnn[c];
        if denom > 0 {
            total += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(total / n_classes as f64)
}

/// Fraction of correct predictions; identical to micro-averaged F1.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Data(format!(
            "accuracy needs matching non-empty slices, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_pairs(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<()> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Data(format!(
            "metric needs matching non-empty slices, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    for &v in preds.iter().chain(labels) {
        if v >= n_classes {
            return Err(Error::IndexOutOfRange {
                label: v,
                n_classes,
            });
        }
    }
    Ok(())
}

/// Weighted mean with index-order accumulation.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() || values.is_empty() {
        return Err(Error::Data(format!(
            "weighted mean needs matching non-empty slices, got {} and {}",
            values.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Data("negative weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data("weights sum to zero".into()));
    }
    let mut acc = 0.0;
    for (v, w) in values.iter().zip(weights) {
        acc += v * (w / total);
    }
    Ok(acc)
}

/// Relative improvement of the personalized modes over full sharing,
/// in percent of the fully shared score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub s_fm: f64,
    pub s_ph: f64,
    pub s_phf: f64,
    pub ph_gain: f64,
    pub phf_gain: f64,
    /// Personalization gain: the better of the two mode gains.
    pub pg: f64,
}

pub fn gains(s_fm: f64, s_ph: f64, s_phf: f64) -> Result<GainReport> {
    if s_fm <= 0.0 {
        return Err(Error::UndefinedGain { s_fm });
    }
    let ph_gain = (s_ph - s_fm) / s_fm * 100.0;
    let phf_gain = (s_phf - s_fm) / s_fm * 100.0;
    Ok(GainReport {
        s_fm,
        s_ph,
        s_phf,
        ph_gain,
        phf_gain,
        pg: ph_gain.max(phf_gain),
    })
}

/// Parameter traffic of one round, split by direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    /// Parameters sent server -> clients.
    pub dispatched_params: u64,
    /// Parameters sent clients -> server.
    pub returned_params: u64,
}

impl CommStats {
    pub fn total_params(&self) -> u64 {
        self.dispatched_params + self.returned_params
    }

    /// Bytes on the wire for 8-byte scalars.
    pub fn total_bytes(&self) -> u64 {
        self.total_params() * 8
    }
}

impl std::ops::AddAssign for CommStats {
    fn add_assign(&mut self, rhs: Self) {
        self.dispatched_params += rhs.dispatched_params;
        self.returned_params += rhs.returned_params;
    }
}
