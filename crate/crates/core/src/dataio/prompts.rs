//! Ground-truth prompt sampling.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::types::{Prompt, Subsequence, WindowSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of distinct windows prompts are drawn from.
    pub window_concentration: usize,
    /// Probability that a prompt is a label prompt rather than a boundary one.
    pub kind_mix: f64,
    /// Incorrect classes per label prompt; `None` means `min(3, K - 1)`.
    pub n_neg: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_concentration: 2,
            kind_mix: 0.5,
            n_neg: None,
        }
    }
}

/// `round(density * len)`.
pub fn prompt_budget(density: f64, len: usize) -> usize {
    (density * len as f64).round() as usize
}

/// Pick `concentration` distinct windows uniformly, returned sorted.
pub fn choose_windows(spec: &WindowSpec, concentration: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if concentration == 0 || concentration > spec.windows {
        return Err(Error::Config(format!(
            "window concentration {concentration} outside [1, {}]",
            spec.windows
        )));
    }
    let mut w = sample(rng, spec.windows, concentration).into_vec();
    w.sort_unstable();
    Ok(w)
}

/// Choose windows, then sample `budget` prompts inside them.
pub fn sample_prompts(
    subseq: &Subsequence,
    spec: &WindowSpec,
    level: usize,
    budget: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Prompt>> {
    if budget == 0 {
        return Err(Error::Config("prompt budget must be at least 1".into()));
    }
    let chosen = choose_windows(spec, cfg.window_concentration, rng)?;
    sample_prompts_in(subseq, spec, &chosen, level, budget, &BTreeSet::new(), cfg, rng)
}

/// Sample `budget` prompts at distinct timestamps drawn uniformly from the
/// union of `windows`, skipping timestamps in `used`. Timestamps are returned
/// in increasing order.
#[allow(clippy::too_many_arguments)]
pub fn sample_prompts_in(
    subseq: &Subsequence,
    spec: &WindowSpec,
    windows: &[usize],
    level: usize,
    budget: usize,
    used: &BTreeSet<usize>,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Prompt>> {
    let g = *subseq.level(level)?;
    let truth = &subseq.labels[level];
    let mut covered = BTreeSet::new();
    for &j in windows {
        if j >= spec.windows {
            return Err(Error::Config(format!("window {j} does not exist")));
        }
        covered.extend(spec.window_range(j).filter(|t| *t < truth.len() && !used.contains(t)));
    }
    let candidates: Vec<usize> = covered.into_iter().collect();
    if budget > candidates.len() {
        return Err(Error::Budget(format!(
            "{budget} prompts requested but only {} unused timestamps remain",
            candidates.len()
        )));
    }
    let mut picked: Vec<usize> = sample(rng, candidates.len(), budget)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();

    let n_neg = cfg.n_neg.unwrap_or(3).min(g.num_states - 1);
    Ok(picked
        .into_iter()
        .map(|t| {
            if rng.gen::<f64>() < cfg.kind_mix {
                let correct = truth[t];
                let others: Vec<usize> = g.range().filter(|&s| s != correct).collect();
                let mut incorrect: Vec<usize> = sample(rng, others.len(), n_neg)
                    .into_iter()
                    .map(|i| others[i])
                    .collect();
                incorrect.sort_unstable();
                Prompt::label(t, level, correct, incorrect)
            } else {
                let present = t == 0 || truth[t] != truth[t - 1];
                Prompt::boundary(t, level, present)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::types::{Granularity, PromptKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn subseq(labels: Vec<usize>) -> Subsequence {
        Subsequence {
            index: 0,
            series_id: "s".into(),
            origin_offset: 0,
            channels: 1,
            data: vec![0.0; labels.len()],
            labels: vec![labels],
            granularities: vec![Granularity { level: 0, num_states: 4, state_offset: 0 }],
        }
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(prompt_budget(0.05, 704), 35);
        assert_eq!(prompt_budget(0.0, 704), 0);
    }

    #[test]
    fn label_only_and_consistency() {
        let spec = WindowSpec::new(16, 4, 4).unwrap();
        let labels: Vec<usize> = (0..28).map(|t| (t / 5) % 4).collect();
        let sub = subseq(labels.clone());
        let cfg = SamplerConfig { kind_mix: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = sample_prompts(&sub, &spec, 0, 10, &cfg, &mut rng).unwrap();
        assert_eq!(ps.len(), 10);
        for p in &ps {
            match &p.kind {
                PromptKind::Label { correct_state, incorrect_states } => {
                    assert_eq!(*correct_state, labels[p.t_c]);
                    assert_eq!(incorrect_states.len(), 3);
                    assert!(!incorrect_states.contains(correct_state));
                }
                _ => panic!("expected label prompt"),
            }
        }
    }

    #[test]
    fn constant_truth_boundaries_absent_except_start() {
        let spec = WindowSpec::new(8, 8, 2).unwrap();
        let sub = subseq(vec![2; 16]);
        let cfg = SamplerConfig { kind_mix: 0.0, window_concentration: 2, n_neg: None };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = sample_prompts(&sub, &spec, 0, 16, &cfg, &mut rng).unwrap();
        for p in ps {
            assert_eq!(p.kind, PromptKind::Boundary { present: p.t_c == 0 });
        }
    }

    #[test]
    fn prompts_stay_inside_chosen_windows() {
        let spec = WindowSpec::new(10, 10, 6).unwrap();
        let sub = subseq(vec![0; 60]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chosen = choose_windows(&spec, 2, &mut rng).unwrap();
        let ps = sample_prompts_in(&sub, &spec, &chosen, 0, 20, &BTreeSet::new(), &SamplerConfig::default(), &mut rng).unwrap();
        let mut hit: BTreeSet<usize> = BTreeSet::new();
        for p in &ps {
            hit.insert(p.t_c / 10);
        }
        assert_eq!(hit.into_iter().collect::<Vec<_>>(), chosen);
    }

    #[test]
    fn exhausted_budget_is_an_error() {
        let spec = WindowSpec::new(4, 4, 2).unwrap();
        let sub = subseq(vec![0; 8]);
        let used: BTreeSet<usize> = [0, 1].into();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_prompts_in(&sub, &spec, &[0], 0, 3, &used, &SamplerConfig::default(), &mut rng);
        assert!(matches!(err, Err(Error::Budget(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = WindowSpec::new(16, 4, 4).unwrap();
        let sub = subseq((0..28).map(|t| t % 4).collect());
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            sample_prompts(&sub, &spec, 0, 6, &SamplerConfig::default(), &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }
}
