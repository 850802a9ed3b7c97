use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evenly sampled multivariate series, stored row-major `len x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    series_id: String,
    len: usize,
    channels: usize,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(series_id: impl Into<String>, channels: usize, values: Vec<f64>) -> Result<Self> {
        let series_id = series_id.into();
        if channels == 0 {
            return Err(Error::Data(format!("series `{series_id}` has no channels")));
        }
        if values.is_empty() || values.len() % channels != 0 {
            return Err(Error::Data(format!(
                "series `{series_id}`: {} values do not form rows of {channels} channels",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "series `{series_id}`: non-finite value at timestep {}",
                i / channels
            )));
        }
        Ok(Self {
            len: values.len() / channels,
            series_id,
            channels,
            values,
        })
    }

    pub fn series_id(&self) -> &str {
        &self.series_id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    /// Rows `[start, end)` as a flat row-major buffer.
    pub fn rows(&self, start: usize, end: usize) -> &[f64] {
        &self.values[start * self.channels..end * self.channels]
    }

    pub(crate) fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Self::new(self.series_id.clone(), self.channels, self.rows(start, end).to_vec())
    }
}

/// Per-timestep labels of one granularity level, local to `[0, num_states)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateSequence {
    states: Vec<usize>,
    num_states: usize,
    granularity_level: usize,
}

impl StateSequence {
    pub fn new(states: Vec<usize>, num_states: usize, granularity_level: usize) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::Data("a state sequence needs at least one state".into()));
        }
        if let Some((t, s)) = states.iter().enumerate().find(|(_, &s)| s >= num_states) {
            return Err(Error::Data(format!(
                "state {s} at timestep {t} is outside [0, {num_states})"
            )));
        }
        Ok(Self {
            states,
            num_states,
            granularity_level,
        })
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn granularity_level(&self) -> usize {
        self.granularity_level
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub(crate) fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            states: self.states[start..end].to_vec(),
            num_states: self.num_states,
            granularity_level: self.granularity_level,
        }
    }
}

/// Position of one granularity level inside the unified label space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Granularity {
    pub level: usize,
    pub num_states: usize,
    pub state_offset: usize,
}

impl Granularity {
    pub fn contains(&self, unified: usize) -> bool {
        (self.state_offset..self.state_offset + self.num_states).contains(&unified)
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.state_offset..self.state_offset + self.num_states
    }
}

/// Total number of unified states across levels.
pub fn total_states(levels: &[Granularity]) -> usize {
    levels
        .iter()
        .map(|g| g.state_offset + g.num_states)
        .max()
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub series: TimeSeries,
    /// One sequence per granularity level, indexed by level.
    pub labels: Vec<StateSequence>,
}

impl LabeledSeries {
    /// Labels of `level` mapped into the unified space.
    pub fn unified_labels(&self, level: &Granularity) -> Vec<usize> {
        self.labels[level.level]
            .states()
            .iter()
            .map(|s| s + level.state_offset)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channels: Vec<String>,
    pub granularities: Vec<Granularity>,
    pub series: Vec<LabeledSeries>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        channels: Vec<String>,
        granularities: Vec<Granularity>,
        series: Vec<LabeledSeries>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            channels,
            granularities,
            series,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Size of the unified label space, `K_total`.
    pub fn label_space(&self) -> usize {
        total_states(&self.granularities)
    }

    pub fn num_levels(&self) -> usize {
        self.granularities.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels.len();
        let mut next = 0;
        for (i, g) in self.granularities.iter().enumerate() {
            if g.level != i {
                return Err(Error::Data(format!("granularity {i} is tagged level {}", g.level)));
            }
            if g.state_offset != next || g.num_states == 0 {
                return Err(Error::Data(format!(
                    "granularity levels must use consecutive disjoint ranges (level {i} starts at {}, expected {next})",
                    g.state_offset
                )));
            }
            next += g.num_states;
        }
        for s in &self.series {
            let id = s.series.series_id();
            if s.series.channels() != c {
                return Err(Error::Data(format!(
                    "series `{id}` has {} channels, dataset has {c}",
                    s.series.channels()
                )));
            }
            if s.labels.len() != self.granularities.len() {
                return Err(Error::Data(format!(
                    "series `{id}` has {} label levels, dataset has {}",
                    s.labels.len(),
                    self.granularities.len()
                )));
            }
            for (lab, g) in s.labels.iter().zip(&self.granularities) {
                if lab.len() != s.series.len() {
                    return Err(Error::Data(format!(
                        "series `{id}` level {}: {} labels for {} timesteps",
                        g.level,
                        lab.len(),
                        s.series.len()
                    )));
                }
                if lab.num_states() != g.num_states || lab.granularity_level() != g.level {
                    return Err(Error::Data(format!(
                        "series `{id}` level {} does not match the dataset's granularity table",
                        g.level
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Window geometry within a subsequence: `windows` windows of length
/// `window_len`, `hop` timesteps apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_len: usize,
    pub hop: usize,
    pub windows: usize,
}

impl WindowSpec {
    pub fn new(window_len: usize, hop: usize, windows: usize) -> Result<Self> {
        let spec = Self {
            window_len,
            hop,
            windows,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 || self.hop > self.window_len || self.windows == 0 {
            return Err(Error::Config(format!(
                "invalid window spec: T={}, hop={}, W={} (need T >= 1, 1 <= hop <= T, W >= 1)",
                self.window_len, self.hop, self.windows
            )));
        }
        Ok(())
    }

    /// `L_s = T + (W - 1) hop`.
    pub fn subsequence_len(&self) -> usize {
        self.window_len + (self.windows - 1) * self.hop
    }

    pub fn window_range(&self, j: usize) -> std::ops::Range<usize> {
        j * self.hop..j * self.hop + self.window_len
    }

    /// Indices of the windows covering timestep `t`.
    pub fn covering_windows(&self, t: usize) -> std::ops::RangeInclusive<usize> {
        let last = (t / self.hop).min(self.windows - 1);
        let first = if t + 1 > self.window_len {
            (t + 1 - self.window_len).div_ceil(self.hop)
        } else {
            0
        };
        first..=last
    }
}

/// A non-overlapping slice of length `L_s` of one series; owns one memory bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Subsequence {
    pub index: usize,
    pub series_id: String,
    pub origin_offset: usize,
    pub channels: usize,
    /// Row-major `len x channels`.
    pub data: Vec<f64>,
    /// Unified-space labels per granularity level.
    pub labels: Vec<Vec<usize>>,
    pub granularities: Vec<Granularity>,
}

impl Subsequence {
    pub fn len(&self) -> usize {
        self.data.len() / self.channels.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.channels..end * self.channels]
    }

    pub fn level(&self, level: usize) -> Result<&Granularity> {
        self.granularities
            .get(level)
            .ok_or_else(|| Error::Data(format!("granularity level {level} does not exist")))
    }

    /// Stable identifier `<series>/<index>`.
    pub fn key(&self) -> String {
        format!("{}/{}", self.series_id, self.index)
    }
}

/// One window of a subsequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub index: usize,
    /// Offset of the first timestep inside the subsequence.
    pub start: usize,
    pub len: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub labels: Vec<Vec<usize>>,
}

/// A single-timestamp supervision cue.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub t_c: usize,
    #[serde(default)]
    pub level: usize,
    #[serde(flatten)]
    pub kind: PromptKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptKind {
    Label {
        correct_state: usize,
        #[serde(default)]
        incorrect_states: Vec<usize>,
    },
    Boundary {
        present: bool,
    },
}

impl Prompt {
    pub fn label(t_c: usize, level: usize, correct_state: usize, incorrect_states: Vec<usize>) -> Self {
        Self {
            t_c,
            level,
            kind: PromptKind::Label {
                correct_state,
                incorrect_states,
            },
        }
    }

    pub fn boundary(t_c: usize, level: usize, present: bool) -> Self {
        Self {
            t_c,
            level,
            kind: PromptKind::Boundary { present },
        }
    }

    pub fn is_label(&self) -> bool {
        matches!(self.kind, PromptKind::Label { .. })
    }

    /// Check against a subsequence length and granularity table. State
    /// indices are unified-space ids.
    pub fn validate(&self, len: usize, levels: &[Granularity]) -> Result<()> {
        if self.t_c >= len {
            return Err(Error::Data(format!(
                "prompt timestamp {} outside [0, {len})",
                self.t_c
            )));
        }
        let g = levels
            .get(self.level)
            .ok_or_else(|| Error::Data(format!("prompt level {} does not exist", self.level)))?;
        if let PromptKind::Label {
            correct_state,
            incorrect_states,
        } = &self.kind
        {
            for &s in std::iter::once(correct_state).chain(incorrect_states) {
                if !g.contains(s) {
                    return Err(Error::Data(format!(
                        "state {s} is outside level {}'s range [{}, {})",
                        g.level,
                        g.state_offset,
                        g.state_offset + g.num_states
                    )));
                }
            }
            if incorrect_states.contains(correct_state) {
                return Err(Error::Data(format!(
                    "state {correct_state} is marked both correct and incorrect"
                )));
            }
            let mut seen = incorrect_states.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != incorrect_states.len() {
                return Err(Error::Data("duplicate incorrect states".into()));
            }
        }
        Ok(())
    }
}
