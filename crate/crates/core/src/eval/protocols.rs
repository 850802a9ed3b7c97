use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{level_consistency, Metrics};
use crate::dataio::{choose_windows, prompt_budget, sample_prompts, sample_prompts_in, Granularity, Prompt, SamplerConfig, Subsequence, WindowSpec};
use crate::error::{Error, Result};
use crate::membank::{MemoryBank, MemoryToken, TokenKind};
use crate::model::Model;
use crate::rng::stream;
use crate::substrate::Tensor;

/// Per-timestep logits `L_s x K` of a subsequence: every window is decoded
/// against `memory` and overlapping windows are averaged.
pub fn subsequence_logits(
    model: &Model<f32>,
    subseq: &Subsequence,
    spec: &WindowSpec,
    memory: Option<&Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let ls = spec.subsequence_len();
    if subseq.len() != ls {
        return Err(Error::Data(format!(
            "subsequence has length {}, window spec needs {ls}",
            subseq.len()
        )));
    }
    if spec.window_len != model.config().window_len {
        return Err(Error::Config(format!(
            "window length {} does not match the model's {}",
            spec.window_len,
            model.config().window_len
        )));
    }
    let k = model.config().num_states;
    let mut sum = vec![0f64; ls * k];
    let mut count = vec![0usize; ls];
    for j in 0..spec.windows {
        let r = spec.window_range(j);
        let p = model.predict_window(subseq.rows(r.start, r.end), r.start, memory)?;
        for (i, t) in r.enumerate() {
            count[t] += 1;
            for (s, &v) in sum[t * k..(t + 1) * k].iter_mut().zip(p.logits.row(i)) {
                *s += v as f64;
            }
        }
    }
    let data = sum
        .chunks(k)
        .zip(&count)
        .flat_map(|(row, &n)| row.iter().map(move |&v| (v / n as f64) as f32))
        .collect();
    Tensor::from_vec(ls, k, data)
}

/// Argmax over the states of one level only, as unified ids.
pub fn restricted_argmax(logits: &Tensor<f32>, level: &Granularity) -> Vec<usize> {
    (0..logits.rows())
        .map(|t| {
            let row = &logits.row(t)[level.range()];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            level.state_offset + best
        })
        .collect()
}

/// Encode prompts against `data` and wrap them as bank tokens tagged `iteration`.
pub fn memory_tokens(model: &Model<f32>, data: &[f64], prompts: &[Prompt], iteration: usize) -> Result<Vec<MemoryToken>> {
    let m = model.encode_prompts(data, prompts)?;
    Ok(prompts
        .iter()
        .enumerate()
        .map(|(i, p)| MemoryToken {
            vector: m.row(i).to_vec(),
            anchor: p.t_c,
            iteration,
            kind: if p.is_label() { TokenKind::Label } else { TokenKind::Boundary },
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub density: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            density: 0.05,
            seed: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Predictions of one level pass over a list of subsequences.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPredictions {
    pub level: Granularity,
    /// Argmax over the whole unified label space, per subsequence.
    pub pred: Vec<Vec<usize>>,
    /// Argmax within this level's range, per subsequence.
    pub restricted: Vec<Vec<usize>>,
    pub truth: Vec<Vec<usize>>,
}

impl LevelPredictions {
    fn metrics(&self, num_states: usize) -> Result<Metrics> {
        Metrics::compute(&self.pred.concat(), &self.truth.concat(), num_states)
    }
}

fn check_subsequences(subseqs: &[Subsequence]) -> Result<&[Granularity]> {
    let first = subseqs
        .first()
        .ok_or_else(|| Error::Config("evaluation needs at least one subsequence".into()))?;
    Ok(&first.granularities)
}

/// Single-iteration protocol: for each level and subsequence, one write of
/// `round(density L_s)` prompts into a fresh bank, then one read.
pub fn single_iteration_predictions(
    model: &Model<f32>,
    subseqs: &[Subsequence],
    spec: &WindowSpec,
    settings: &EvalSettings,
) -> Result<Vec<LevelPredictions>> {
    let levels = check_subsequences(subseqs)?.to_vec();
    let budget = prompt_budget(settings.density, spec.subsequence_len());
    let d = model.config().d_model;
    levels
        .iter()
        .map(|g| {
            let mut out = LevelPredictions {
                level: *g,
                pred: Vec::new(),
                restricted: Vec::new(),
                truth: Vec::new(),
            };
            for (i, s) in subseqs.iter().enumerate() {
                let mut bank = MemoryBank::new(s.key(), d, None)?;
                if budget > 0 {
                    let mut rng = stream(settings.seed, &[g.level as u64, i as u64]);
                    let prompts = sample_prompts(s, spec, g.level, budget, &settings.sampler, &mut rng)?;
                    bank.write(memory_tokens(model, &s.data, &prompts, 1)?)?;
                }
                let logits = subsequence_logits(model, s, spec, bank.read_all().as_ref())?;
                out.pred.push(logits.argmax_rows());
                out.restricted.push(restricted_argmax(&logits, g));
                out.truth.push(s.labels[g.level].clone());
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Single,
    Iterative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub num_states: usize,
    pub acc: f64,
    pub mf1: f64,
    pub ari: f64,
    pub timesteps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub acc: f64,
    pub delta_pp: f64,
}

/// Per-iteration accuracy (mean over levels) with deltas in percentage
/// points. `baseline_acc` is the empty-bank accuracy that `deltas[0]` is
/// measured from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterativeCurve {
    pub baseline_acc: f64,
    pub acc: Vec<f64>,
    pub deltas_pp: Vec<f64>,
}

impl IterativeCurve {
    pub fn from_acc(baseline_acc: f64, acc: Vec<f64>) -> Self {
        let mut prev = baseline_acc;
        let deltas_pp = acc
            .iter()
            .map(|&a| {
                let d = 100.0 * (a - prev);
                prev = a;
                d
            })
            .collect();
        Self {
            baseline_acc,
            acc,
            deltas_pp,
        }
    }

    pub fn points(&self) -> Vec<CurvePoint> {
        self.acc
            .iter()
            .zip(&self.deltas_pp)
            .enumerate()
            .map(|(i, (&acc, &delta_pp))| CurvePoint {
                iteration: i + 1,
                acc,
                delta_pp,
            })
            .collect()
    }
}

/// Metrics as mean over levels (headline), per level, and pooled over the
/// concatenation of all level passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub density: f64,
    pub acc: f64,
    pub mf1: f64,
    pub ari: f64,
    pub per_level: Vec<LevelReport>,
    pub pooled: Metrics,
    #[serde(default)]
    pub curve: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_acc: Option<f64>,
    pub seed: u64,
    pub prompts_per_subsequence: usize,
    pub subsequences: usize,
}

impl EvalReport {
    fn from_levels(
        protocol: Protocol,
        levels: &[LevelPredictions],
        num_states: usize,
        density: f64,
        seed: u64,
        prompts: usize,
        subsequences: usize,
    ) -> Result<Self> {
        let mut per_level = Vec::new();
        for lp in levels {
            let m = lp.metrics(num_states)?;
            per_level.push(LevelReport {
                level: lp.level.level,
                num_states: lp.level.num_states,
                acc: m.acc,
                mf1: m.mf1,
                ari: m.ari,
                timesteps: lp.truth.iter().map(Vec::len).sum(),
            });
        }
        let n = per_level.len() as f64;
        let pred: Vec<usize> = levels.iter().flat_map(|l| l.pred.concat()).collect();
        let truth: Vec<usize> = levels.iter().flat_map(|l| l.truth.concat()).collect();
        Ok(Self {
            protocol,
            density,
            acc: per_level.iter().map(|l| l.acc).sum::<f64>() / n,
            mf1: per_level.iter().map(|l| l.mf1).sum::<f64>() / n,
            ari: per_level.iter().map(|l| l.ari).sum::<f64>() / n,
            pooled: Metrics::compute(&pred, &truth, num_states)?,
            per_level,
            curve: Vec::new(),
            baseline_acc: None,
            seed,
            prompts_per_subsequence: prompts,
            subsequences,
        })
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let proto = match self.protocol {
            Protocol::Single => "single",
            Protocol::Iterative => "iterative",
        };
        let _ = writeln!(
            s,
            "protocol {proto}  density {:.4}  prompts/subsequence {}  subsequences {}  seed {}",
            self.density, self.prompts_per_subsequence, self.subsequences, self.seed
        );
        let _ = writeln!(s, "{:<8} {:>7} {:>10} {:>8} {:>8} {:>8}", "level", "states", "timesteps", "ACC", "MF1", "ARI");
        for l in &self.per_level {
            let _ = writeln!(
                s,
                "{:<8} {:>7} {:>10} {:>8.4} {:>8.4} {:>8.4}",
                l.level, l.num_states, l.timesteps, l.acc, l.mf1, l.ari
            );
        }
        let _ = writeln!(s, "{:<8} {:>7} {:>10} {:>8.4} {:>8.4} {:>8.4}", "mean", "", "", self.acc, self.mf1, self.ari);
        let _ = writeln!(
            s,
            "{:<8} {:>7} {:>10} {:>8.4} {:>8.4} {:>8.4}",
            "pooled", "", "", self.pooled.acc, self.pooled.mf1, self.pooled.ari
        );
        if !self.curve.is_empty() {
            let _ = writeln!(s, "\n{:<10} {:>8} {:>10}", "iteration", "ACC", "delta pp");
            if let Some(a0) = self.baseline_acc {
                let _ = writeln!(s, "{:<10} {:>8.4} {:>10}", 0, a0, "");
            }
            for p in &self.curve {
                let _ = writeln!(s, "{:<10} {:>8.4} {:>10.3}", p.iteration, p.acc, p.delta_pp);
            }
        }
        s
    }
}

pub fn single_iteration_eval(
    model: &Model<f32>,
    subseqs: &[Subsequence],
    spec: &WindowSpec,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let levels = single_iteration_predictions(model, subseqs, spec, settings)?;
    EvalReport::from_levels(
        Protocol::Single,
        &levels,
        model.config().num_states,
        settings.density,
        settings.seed,
        prompt_budget(settings.density, spec.subsequence_len()),
        subseqs.len(),
    )
}

/// Agreement between merged fine-level predictions and coarse-level
/// predictions, using level-restricted argmax in both passes. The coarse
/// level must have been derived from the fine one by `factor`.
pub fn level_agreement(fine: &LevelPredictions, coarse: &LevelPredictions, factor: usize) -> Result<f64> {
    let f: Vec<usize> = fine.restricted.concat().iter().map(|s| s - fine.level.state_offset).collect();
    let c: Vec<usize> = coarse.restricted.concat().iter().map(|s| s - coarse.level.state_offset).collect();
    level_consistency(&f, &c, factor)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterativeSettings {
    pub n_prompts: usize,
    pub iterations: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for IterativeSettings {
    fn default() -> Self {
        Self {
            n_prompts: 4,
            iterations: 8,
            seed: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Iterative protocol: per level and subsequence, `iterations` rounds of
/// writing `n_prompts` fresh prompts and reading all windows. The report's
/// metrics are those after the last round.
pub fn iterative_eval(
    model: &Model<f32>,
    subseqs: &[Subsequence],
    spec: &WindowSpec,
    settings: &IterativeSettings,
) -> Result<(IterativeCurve, EvalReport)> {
    let levels = check_subsequences(subseqs)?.to_vec();
    if settings.n_prompts == 0 || settings.iterations == 0 {
        return Err(Error::Config("iterative evaluation needs n_prompts >= 1 and iterations >= 1".into()));
    }
    let d = model.config().d_model;
    let mut baseline = Vec::new();
    let mut per_round = vec![Vec::new(); settings.iterations];
    let mut finals = Vec::new();
    for g in &levels {
        let mut hits0 = 0usize;
        let mut hits = vec![0usize; settings.iterations];
        let mut total = 0usize;
        let mut last = LevelPredictions {
            level: *g,
            pred: Vec::new(),
            restricted: Vec::new(),
            truth: Vec::new(),
        };
        for (i, s) in subseqs.iter().enumerate() {
            let truth = &s.labels[g.level];
            let count = |pred: &[usize]| pred.iter().zip(truth).filter(|(p, t)| p == t).count();
            total += truth.len();
            hits0 += count(&subsequence_logits(model, s, spec, None)?.argmax_rows());

            let mut rng = stream(settings.seed, &[g.level as u64, i as u64]);
            let windows = choose_windows(spec, settings.sampler.window_concentration, &mut rng)?;
            let mut bank = MemoryBank::new(s.key(), d, None)?;
            let mut used = BTreeSet::new();
            let mut logits = None;
            for (r, h) in hits.iter_mut().enumerate() {
                let prompts = sample_prompts_in(s, spec, &windows, g.level, settings.n_prompts, &used, &settings.sampler, &mut rng)?;
                used.extend(prompts.iter().map(|p| p.t_c));
                bank.write(memory_tokens(model, &s.data, &prompts, r + 1)?)?;
                let l = subsequence_logits(model, s, spec, bank.read_all().as_ref())?;
                *h += count(&l.argmax_rows());
                logits = Some(l);
            }
            let l = logits.expect("at least one iteration");
            last.pred.push(l.argmax_rows());
            last.restricted.push(restricted_argmax(&l, g));
            last.truth.push(truth.clone());
        }
        baseline.push(hits0 as f64 / total as f64);
        for (r, h) in hits.into_iter().enumerate() {
            per_round[r].push(h as f64 / total as f64);
        }
        finals.push(last);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let curve = IterativeCurve::from_acc(mean(&baseline), per_round.iter().map(|v| mean(v)).collect());
    let cumulative = settings.n_prompts * settings.iterations;
    let mut report = EvalReport::from_levels(
        Protocol::Iterative,
        &finals,
        model.config().num_states,
        cumulative as f64 / spec.subsequence_len() as f64,
        settings.seed,
        cumulative,
        subseqs.len(),
    )?;
    report.curve = curve.points();
    report.baseline_acc = Some(curve.baseline_acc);
    Ok((curve, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_telescopes() {
        let c = IterativeCurve::from_acc(0.5, vec![0.55, 0.6, 0.58, 0.7]);
        let mut a = c.baseline_acc;
        for (d, want) in c.deltas_pp.iter().zip(&c.acc) {
            a += d / 100.0;
            assert!((a - want).abs() < 1e-9);
        }
        assert_eq!(c.points()[0].iteration, 1);
    }

    #[test]
    fn restricted_argmax_stays_in_range() {
        let t = Tensor::from_rows(&[vec![9.0, 1.0, 2.0], vec![0.0, 3.0, -1.0]]).unwrap();
        let g = Granularity { level: 1, num_states: 2, state_offset: 1 };
        assert_eq!(restricted_argmax(&t, &g), vec![2, 1]);
    }
}
