//! Event-sourced sessions. A session's state is a pure function of its
//! event log and the loaded model; the HTTP layer only appends events.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use promptseg::dataio::{Granularity, Prompt, PromptKind, Subsequence, WindowSpec};
use promptseg::eval::{accuracy, memory_tokens, subsequence_logits};
use promptseg::membank::MemoryBank;
use promptseg::model::Model;

use crate::error::ApiError;

/// The loaded model plus the data-side settings it was trained with.
#[derive(Debug)]
pub struct Engine {
    pub model: Model<f32>,
    pub spec: WindowSpec,
    pub granularities: Vec<Granularity>,
    pub channel_names: Vec<String>,
}

impl Engine {
    pub fn channels(&self) -> usize {
        self.model.config().channels
    }

    pub fn len(&self) -> usize {
        self.spec.subsequence_len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: String,
        at: u64,
        level: usize,
        /// Row-major `L_s x C`.
        data: Vec<f64>,
        truth: Option<Vec<Vec<usize>>>,
        bundled: Option<usize>,
        sample_seed: u64,
    },
    Prompts {
        at: u64,
        iteration: usize,
        prompts: Vec<Prompt>,
    },
    Infer {
        at: u64,
    },
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub subseq: Subsequence,
    pub has_truth: bool,
    pub level: usize,
    pub bundled: Option<usize>,
    pub sample_seed: u64,
    pub bank: MemoryBank,
    pub infer_count: usize,
    pub log: Vec<Event>,
    pub created_at: u64,
    pub updated_at: u64,
}

pub fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Session {
    /// Validate a creation event and build the empty session.
    pub fn create(engine: &Engine, event: Event) -> Result<Self, ApiError> {
        let Event::Created { id, at, level, data, truth, bundled, sample_seed } = &event else {
            return Err(ApiError::internal("session log must start with a creation event"));
        };
        let (c, len) = (engine.channels(), engine.len());
        if data.len() != len * c {
            return Err(ApiError::bad_request(format!(
                "series has {} values, expected {len} timesteps x {c} channels",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ApiError::bad_request("series contains non-finite values"));
        }
        if *level >= engine.granularities.len() {
            return Err(ApiError::bad_request(format!(
                "level {level} does not exist; the model has {} levels",
                engine.granularities.len()
            )));
        }
        if let Some(truth) = truth {
            if truth.len() != engine.granularities.len() || truth.iter().any(|t| t.len() != len) {
                return Err(ApiError::bad_request(format!(
                    "ground truth needs {} sequences of length {len}",
                    engine.granularities.len()
                )));
            }
            for (g, t) in engine.granularities.iter().zip(truth) {
                if let Some(s) = t.iter().find(|s| !g.contains(**s)) {
                    return Err(ApiError::invalid(format!(
                        "ground-truth state {s} is outside level {}'s range",
                        g.level
                    )));
                }
            }
        }
        let subseq = Subsequence {
            index: 0,
            series_id: id.clone(),
            origin_offset: 0,
            channels: c,
            data: data.clone(),
            labels: truth.clone().unwrap_or_default(),
            granularities: engine.granularities.clone(),
        };
        Ok(Self {
            id: id.clone(),
            subseq,
            has_truth: truth.is_some(),
            level: *level,
            bundled: *bundled,
            sample_seed: *sample_seed,
            bank: MemoryBank::new(id.clone(), engine.model.config().d_model, None)?,
            infer_count: 0,
            created_at: *at,
            updated_at: *at,
            log: vec![event],
        })
    }

    /// Rebuild a session by replaying its log from the creation event.
    pub fn replay(engine: &Engine, events: Vec<Event>) -> Result<Self, ApiError> {
        let mut it = events.into_iter();
        let first = it.next().ok_or_else(|| ApiError::internal("empty session log"))?;
        let mut session = Self::create(engine, first)?;
        for event in it {
            match &event {
                Event::Prompts { prompts, .. } => {
                    session.validate_prompts(engine, prompts)?;
                    let tokens = session.encode(engine, &event)?;
                    session.commit(event, tokens)?;
                }
                Event::Infer { .. } => session.commit(event, Vec::new())?,
                Event::Created { .. } => return Err(ApiError::internal("second creation event in log")),
            }
        }
        Ok(session)
    }

    pub fn prompts(&self) -> impl Iterator<Item = &Prompt> {
        self.log.iter().flat_map(|e| match e {
            Event::Prompts { prompts, .. } => prompts.as_slice(),
            _ => &[],
        })
    }

    pub fn used_timestamps(&self) -> BTreeSet<usize> {
        self.prompts().map(|p| p.t_c).collect()
    }

    /// Iteration tag for tokens written now: one past the completed infer calls.
    pub fn next_iteration(&self) -> usize {
        self.infer_count + 1
    }

    /// Reject anything the bank write could not accept, before any mutation.
    pub fn validate_prompts(&self, engine: &Engine, prompts: &[Prompt]) -> Result<(), ApiError> {
        if prompts.is_empty() {
            return Err(ApiError::invalid("no prompts given"));
        }
        let n_neg_max = engine.model.config().n_neg_max;
        for p in prompts {
            p.validate(engine.len(), &engine.granularities)
                .map_err(|e| ApiError::invalid(e.to_string()))?;
            if let PromptKind::Label { incorrect_states, .. } = &p.kind {
                if incorrect_states.len() > n_neg_max {
                    return Err(ApiError::invalid(format!(
                        "{} incorrect states exceed the maximum {n_neg_max}",
                        incorrect_states.len()
                    )));
                }
            }
        }
        let mut seen: BTreeSet<(usize, bool)> = self.prompts().map(|p| (p.t_c, p.is_label())).collect();
        for p in prompts {
            if !seen.insert((p.t_c, p.is_label())) {
                let kind = if p.is_label() { "label" } else { "boundary" };
                return Err(ApiError::conflict(format!("a {kind} prompt at t = {} already exists", p.t_c)));
            }
        }
        Ok(())
    }

    /// Memory tokens a prompts event would write; no mutation.
    pub fn encode(&self, engine: &Engine, event: &Event) -> Result<Vec<promptseg::membank::MemoryToken>, ApiError> {
        match event {
            Event::Prompts { iteration, prompts, .. } => {
                Ok(memory_tokens(&engine.model, &self.subseq.data, prompts, *iteration)?)
            }
            _ => Ok(Vec::new()),
        }
    }

    /// Apply an already validated event.
    pub fn commit(&mut self, event: Event, tokens: Vec<promptseg::membank::MemoryToken>) -> Result<(), ApiError> {
        match &event {
            Event::Prompts { at, .. } => {
                self.bank.write(tokens)?;
                self.updated_at = *at;
            }
            Event::Infer { at } => {
                self.infer_count += 1;
                self.updated_at = *at;
            }
            Event::Created { .. } => return Err(ApiError::internal("session already created")),
        }
        self.log.push(event);
        Ok(())
    }

    /// Read the whole bank in every window; the session is not changed.
    pub fn predict(&self, engine: &Engine) -> Result<PredictionResponse, ApiError> {
        let logits = subsequence_logits(&engine.model, &self.subseq, &engine.spec, self.bank.read_all().as_ref())?;
        let mut levels = Vec::with_capacity(engine.granularities.len());
        for g in &engine.granularities {
            let mut states = Vec::with_capacity(logits.rows());
            let mut confidence = Vec::with_capacity(logits.rows());
            for t in 0..logits.rows() {
                let row = &logits.row(t)[g.range()];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let z: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
                let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                states.push(g.state_offset + best);
                confidence.push(1.0 / z);
            }
            let accuracy = if self.has_truth {
                Some(accuracy(&states, &self.subseq.labels[g.level])?)
            } else {
                None
            };
            levels.push(LevelPrediction {
                level: g.level,
                state_offset: g.state_offset,
                num_states: g.num_states,
                states,
                confidence,
                accuracy,
            });
        }
        let current = &levels[self.level];
        Ok(PredictionResponse {
            session_id: self.id.clone(),
            iteration: self.bank.tokens().map(|t| t.iteration).max().unwrap_or(0),
            bank_size: self.bank.len(),
            length: logits.rows(),
            level: self.level,
            states: current.states.clone(),
            confidence: current.confidence.clone(),
            accuracy: current.accuracy,
            density: self.used_timestamps().len() as f64 / logits.rows() as f64,
            levels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPrediction {
    pub level: usize,
    pub state_offset: usize,
    pub num_states: usize,
    /// Unified state ids, argmax restricted to this level.
    pub states: Vec<usize>,
    /// Probability of the chosen state among this level's states.
    pub confidence: Vec<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub session_id: String,
    /// Newest iteration tag in the bank, 0 when empty. Depends only on the
    /// bank, so repeated infers return identical bodies.
    pub iteration: usize,
    pub bank_size: usize,
    pub length: usize,
    pub level: usize,
    pub states: Vec<usize>,
    pub confidence: Vec<f64>,
    pub accuracy: Option<f64>,
    /// Fraction of timesteps carrying a prompt.
    pub density: f64,
    pub levels: Vec<LevelPrediction>,
}

/// One JSON-lines event log per session under `dir`.
#[derive(Clone, Debug, Default)]
pub struct LogStore {
    dir: Option<PathBuf>,
}

impl LogStore {
    pub fn new(dir: Option<PathBuf>) -> std::io::Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        Ok(Self { dir })
    }

    fn path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.jsonl"))
    }

    pub fn append(&self, id: &str, event: &Event) -> Result<(), ApiError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let line = serde_json::to_string(event).map_err(|e| ApiError::internal(e.to_string()))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(Self::path(dir, id))
            .map_err(|e| ApiError::internal(format!("session log: {e}")))?;
        writeln!(f, "{line}").map_err(|e| ApiError::internal(format!("session log: {e}")))
    }

    pub fn remove(&self, id: &str) -> Result<(), ApiError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        match fs::remove_file(Self::path(dir, id)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(ApiError::internal(format!("session log: {e}"))),
            _ => Ok(()),
        }
    }

    /// Every stored log, in file-name order.
    pub fn load_all(&self) -> std::io::Result<Vec<Vec<Event>>> {
        let Some(dir) = &self.dir else { return Ok(Vec::new()) };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut out = Vec::new();
        for p in paths {
            let mut events = Vec::new();
            for line in BufReader::new(fs::File::open(&p)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let event = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", p.display()))
                })?;
                events.push(event);
            }
            out.push(events);
        }
        Ok(out)
    }
}
