//! GLUE-style evaluation metrics and cross-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    pub n_examples: usize,
}

/// Mean and population standard deviation of per-seed values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Binary confusion counts with class 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(preds: &[usize], labels: &[usize]) -> Result<Self> {
        check_lengths(preds.len(), labels.len())?;
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            if p > 1 || y > 1 {
                return Err(Error::Metric(format!(
                    "binary metric got class {}",
                    p.max(y)
                )));
            }
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                _ => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Metric("empty input".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// F1 of the positive class; 0 when precision + recall is 0.
pub fn f1_binary(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let c = Confusion::from_predictions(preds, labels)?;
    // 2PR/(P+R) reduces to 2TP/(2TP+FP+FN); P+R = 0 exactly when TP = 0.
    if c.tp == 0 {
        return Ok(0.0);
    }
    let tp2 = 2.0 * c.tp as f64;
    Ok(tp2 / (tp2 + c.fp as f64 + c.fn_ as f64))
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn matthews_corr(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let c = Confusion::from_predictions(preds, labels)?;
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return Ok(0.0);
    }
    let denom = factors.iter().product::<f64>().sqrt();
    Ok((tp * tn - fp * fn_) / denom)
}

/// Correlation value plus whether it was undefined (zero variance) and
/// replaced by 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

/// Fractional ranks (1-based); tied values share the average of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_lengths(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::Metric("correlation needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_lengths(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::Metric("correlation needs at least 2 points".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn aggregate_seeds(values: &[f64]) -> Result<SeedAggregate> {
    if values.len() < 2 {
        return Err(Error::Metric(format!(
            "seed aggregation needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SeedAggregate {
        values: values.to_vec(),
        mean,
        std: var.sqrt(),
    })
}
