//! Piecewise-stationary synthetic series with known state sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::{Dataset, Granularity, LabeledSeries, StateSequence, TimeSeries};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_series: usize,
    pub length: usize,
    pub channels: usize,
    pub num_fine_states: usize,
    /// Inclusive `[min, max]` state duration in timesteps.
    pub segment_len_range: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_series: 8,
            length: 20_000,
            channels: 3,
            num_fine_states: 8,
            segment_len_range: (50, 400),
            noise_std: 0.3,
            seed: 0,
        }
    }
}

/// Per-state, per-channel signal shape `offset + amplitude * sin(2 pi f tau)`,
/// `tau` counted from the segment start.
#[derive(Clone, Copy, Debug)]
struct Template {
    offset: f64,
    amplitude: f64,
    frequency: f64,
}

impl Template {
    fn at(&self, tau: usize) -> f64 {
        self.offset + self.amplitude * (std::f64::consts::TAU * self.frequency * tau as f64).sin()
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    let (lo, hi) = cfg.segment_len_range;
    if cfg.num_fine_states < 2 {
        return Err(Error::Config(format!(
            "need at least 2 fine states, got {}",
            cfg.num_fine_states
        )));
    }
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!(
            "invalid segment length range [{lo}, {hi}]"
        )));
    }
    if cfg.num_series == 0 || cfg.length == 0 || cfg.channels == 0 {
        return Err(Error::Config(
            "num_series, length and channels must be positive".into(),
        ));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(Error::Config(format!("invalid noise std {}", cfg.noise_std)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates: Vec<Vec<Template>> = (0..cfg.num_fine_states)
        .map(|_| {
            (0..cfg.channels)
                .map(|_| Template {
                    offset: rng.gen_range(-2.0..2.0),
                    amplitude: rng.gen_range(0.3..1.2),
                    frequency: rng.gen_range(0.005..0.08),
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");

    let width = (cfg.num_series.max(2) - 1).to_string().len().max(3);
    let mut series = Vec::with_capacity(cfg.num_series);
    for i in 0..cfg.num_series {
        let mut states = Vec::with_capacity(cfg.length);
        let mut values = Vec::with_capacity(cfg.length * cfg.channels);
        let mut state = rng.gen_range(0..cfg.num_fine_states);
        while states.len() < cfg.length {
            let dur = rng.gen_range(lo..=hi).min(cfg.length - states.len());
            for tau in 0..dur {
                for tpl in &templates[state] {
                    let eps = if cfg.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    values.push(tpl.at(tau) + eps);
                }
                states.push(state);
            }
            let step = rng.gen_range(1..cfg.num_fine_states);
            state = (state + step) % cfg.num_fine_states;
        }
        series.push(LabeledSeries {
            series: TimeSeries::new(format!("{i:0width$}"), cfg.channels, values)?,
            labels: vec![StateSequence::new(states, cfg.num_fine_states, 0)?],
        });
    }
    Dataset::new(
        "synthetic",
        (0..cfg.channels).map(|c| format!("ch_{c}")).collect(),
        vec![Granularity {
            level: 0,
            num_states: cfg.num_fine_states,
            state_offset: 0,
        }],
        series,
    )
}
