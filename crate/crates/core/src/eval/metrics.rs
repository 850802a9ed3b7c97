use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub mf1: f64,
    pub ari: f64,
}

impl Metrics {
    /// All three metrics. `num_states` bounds the labels for macro F1.
    pub fn compute(pred: &[usize], truth: &[usize], num_states: usize) -> Result<Self> {
        Ok(Self {
            acc: accuracy(pred, truth)?,
            mf1: macro_f1(pred, truth, num_states)?,
            ari: adjusted_rand_index(pred, truth)?,
        })
    }
}

fn check_lengths(pred: &[usize], truth: &[usize], min: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.len() < min {
        return Err(Error::Data(format!(
            "metric needs at least {min} labels, got {}",
            truth.len()
        )));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth, 1)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean per-class F1 over the classes that occur in `truth`.
pub fn macro_f1(pred: &[usize], truth: &[usize], num_states: usize) -> Result<f64> {
    if num_states == 0 {
        return Err(Error::Config("macro F1 needs at least one class".into()));
    }
    check_lengths(pred, truth, 1)?;
    if let Some(&s) = pred.iter().chain(truth).find(|&&s| s >= num_states) {
        return Err(Error::Data(format!("label {s} outside [0, {num_states})")));
    }
    let mut tp = vec![0usize; num_states];
    let mut fp = vec![0usize; num_states];
    let mut fn_ = vec![0usize; num_states];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let present: Vec<usize> = (0..num_states).filter(|&k| tp[k] + fn_[k] > 0).collect();
    let total: f64 = present
        .iter()
        .map(|&k| 2.0 * tp[k] as f64 / (2 * tp[k] + fp[k] + fn_[k]) as f64)
        .sum();
    Ok(total / present.len() as f64)
}

fn pairs(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Pair-counting adjusted Rand index. Identical partitions score 1, also
/// when the chance-adjusted ratio is 0/0.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth, 2)?;
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    let mut cols: HashMap<usize, f64> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *cells.entry((p, t)).or_default() += 1.0;
        *rows.entry(p).or_default() += 1.0;
        *cols.entry(t).or_default() += 1.0;
    }
    let index: f64 = cells.values().map(|&n| pairs(n)).sum();
    let a: f64 = rows.values().map(|&n| pairs(n)).sum();
    let b: f64 = cols.values().map(|&n| pairs(n)).sum();
    let expected = a * b / pairs(truth.len() as f64);
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of timesteps where a fine local state, merged by `factor`,
/// equals the coarse local state.
pub fn level_consistency(fine: &[usize], coarse: &[usize], factor: usize) -> Result<f64> {
    check_lengths(fine, coarse, 1)?;
    if factor == 0 {
        return Err(Error::Config("coarsening factor must be positive".into()));
    }
    let agree = fine.iter().zip(coarse).filter(|(f, c)| **f / factor == **c).count();
    Ok(agree as f64 / fine.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 1, 2, 2], &[1, 2, 2, 2]).unwrap(), 0.75);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn macro_f1_examples() {
        let v = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[3, 3, 1], &[3, 3, 1], 5).unwrap(), 1.0);
        assert!(macro_f1(&[0], &[0], 0).unwrap_err().is_config());
    }

    #[test]
    fn ari_examples() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(adjusted_rand_index(&[5, 5, 2, 2], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[1, 1, 1], &[4, 4, 4]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 1, 2], &[2, 0, 1]).unwrap(), 1.0);
        assert!(adjusted_rand_index(&[0], &[0]).is_err());
    }

    #[test]
    fn consistency() {
        assert_eq!(level_consistency(&[0, 1, 2, 3], &[0, 0, 1, 0], 2).unwrap(), 0.75);
    }
}
