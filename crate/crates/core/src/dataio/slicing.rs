use super::types::{Dataset, Granularity, LabeledSeries, StateSequence, Subsequence, Window, WindowSpec};
use crate::error::{Error, Result};

/// Merge neighbouring states: `s -> s / factor`, `K -> ceil(K / factor)`.
pub fn coarsen(labels: &StateSequence, factor: usize) -> Result<StateSequence> {
    if factor < 2 {
        return Err(Error::Config(format!("coarsening factor must be >= 2, got {factor}")));
    }
    StateSequence::new(
        labels.states().iter().map(|s| s / factor).collect(),
        labels.num_states().div_ceil(factor),
        labels.granularity_level() + 1,
    )
}

impl Dataset {
    /// Append a level obtained by coarsening the finest level by `factor`.
    pub fn add_coarse_level(&mut self, factor: usize) -> Result<&Granularity> {
        let fine = *self
            .granularities
            .first()
            .ok_or_else(|| Error::Data("dataset has no label levels".into()))?;
        let level = self.granularities.len();
        let state_offset = self.label_space();
        let mut num_states = 0;
        for s in &mut self.series {
            let mut c = coarsen(&s.labels[fine.level], factor)?;
            num_states = c.num_states();
            c = StateSequence::new(c.states().to_vec(), num_states, level)?;
            s.labels.push(c);
        }
        if self.series.is_empty() {
            num_states = fine.num_states.div_ceil(factor);
        }
        self.granularities.push(Granularity {
            level,
            num_states,
            state_offset,
        });
        self.validate()?;
        Ok(self.granularities.last().expect("just pushed"))
    }

    /// Split every series by timestep index into consecutive parts.
    pub fn chronological_split(&self, fractions: [f64; 3]) -> Result<(Dataset, Dataset, Dataset)> {
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::Config(format!(
                "split fractions {fractions:?} must be non-negative and sum to 1"
            )));
        }
        let mut parts: [Vec<LabeledSeries>; 3] = Default::default();
        for s in &self.series {
            let len = s.series.len();
            let [a, b] = split_points(len, fractions);
            if a == 0 || b <= a || len <= b {
                return Err(Error::Data(format!(
                    "series `{}` of length {len} is too short for three nonempty parts",
                    s.series.series_id()
                )));
            }
            for (part, (start, end)) in parts.iter_mut().zip([(0, a), (a, b), (b, len)]) {
                part.push(LabeledSeries {
                    series: s.series.slice(start, end)?,
                    labels: s.labels.iter().map(|l| l.slice(start, end)).collect(),
                });
            }
        }
        let [train, val, test] = parts;
        let make = |series| Dataset {
            name: self.name.clone(),
            channels: self.channels.clone(),
            granularities: self.granularities.clone(),
            series,
        };
        Ok((make(train), make(val), make(test)))
    }

    /// Subsequences of every series, in series order.
    pub fn subsequences(&self, spec: &WindowSpec) -> Result<Vec<Subsequence>> {
        let mut out = Vec::new();
        for s in &self.series {
            out.extend(slice_subsequences(s, &self.granularities, spec)?);
        }
        Ok(out)
    }
}

/// Boundaries `[floor(f0 L), floor((f0 + f1) L)]`.
pub fn split_points(len: usize, fractions: [f64; 3]) -> [usize; 2] {
    // the epsilon keeps exact products such as 0.7 * 1000 from flooring down
    let cut = |f: f64| ((f * len as f64) + 1e-9).floor() as usize;
    [cut(fractions[0]), cut(fractions[0] + fractions[1])]
}

/// `M = floor(L / L_s)` non-overlapping subsequences; the tail is dropped.
pub fn slice_subsequences(
    series: &LabeledSeries,
    granularities: &[Granularity],
    spec: &WindowSpec,
) -> Result<Vec<Subsequence>> {
    spec.validate()?;
    let ls = spec.subsequence_len();
    let m = series.series.len() / ls;
    let unified: Vec<Vec<usize>> = granularities
        .iter()
        .map(|g| series.unified_labels(g))
        .collect();
    Ok((0..m)
        .map(|i| {
            let (start, end) = (i * ls, (i + 1) * ls);
            Subsequence {
                index: i,
                series_id: series.series.series_id().to_string(),
                origin_offset: start,
                channels: series.series.channels(),
                data: series.series.rows(start, end).to_vec(),
                labels: unified.iter().map(|l| l[start..end].to_vec()).collect(),
                granularities: granularities.to_vec(),
            }
        })
        .collect())
}

/// The `W` windows of a subsequence; window `j` covers `[j hop, j hop + T)`.
pub fn windows(subseq: &Subsequence, spec: &WindowSpec) -> Result<Vec<Window>> {
    spec.validate()?;
    if subseq.len() != spec.subsequence_len() {
        return Err(Error::Data(format!(
            "subsequence has length {}, window spec needs {}",
            subseq.len(),
            spec.subsequence_len()
        )));
    }
    Ok((0..spec.windows)
        .map(|j| {
            let r = spec.window_range(j);
            Window {
                index: j,
                start: r.start,
                len: spec.window_len,
                channels: subseq.channels,
                data: subseq.rows(r.start, r.end).to_vec(),
                labels: subseq.labels.iter().map(|l| l[r.clone()].to_vec()).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::types::TimeSeries;

    fn seq(states: &[usize], k: usize) -> StateSequence {
        StateSequence::new(states.to_vec(), k, 0).unwrap()
    }

    fn toy_dataset(len: usize) -> Dataset {
        let values = (0..len * 2).map(|i| i as f64).collect();
        let labels: Vec<usize> = (0..len).map(|t| (t / 7) % 4).collect();
        Dataset::new(
            "toy",
            vec!["a".into(), "b".into()],
            vec![Granularity { level: 0, num_states: 4, state_offset: 0 }],
            vec![LabeledSeries {
                series: TimeSeries::new("000", 2, values).unwrap(),
                labels: vec![seq(&labels, 4)],
            }],
        )
        .unwrap()
    }

    #[test]
    fn coarsen_examples() {
        let c = coarsen(&seq(&[0, 0, 1, 1, 2, 3], 4), 2).unwrap();
        assert_eq!(c.states(), &[0, 0, 0, 0, 1, 1]);
        assert_eq!(c.granularity_level(), 1);
        assert_eq!(coarsen(&seq(&[11], 12), 2).unwrap().num_states(), 6);
        assert_eq!(coarsen(&seq(&[42], 43), 4).unwrap().num_states(), 11);
        assert!(coarsen(&seq(&[0], 2), 1).unwrap_err().is_config());
    }

    #[test]
    fn coarse_level_uses_disjoint_range() {
        let mut d = toy_dataset(50);
        let g = *d.add_coarse_level(2).unwrap();
        assert_eq!(g, Granularity { level: 1, num_states: 2, state_offset: 4 });
        assert_eq!(d.label_space(), 6);
        let u = d.series[0].unified_labels(&g);
        assert!(u.iter().all(|&s| (4..6).contains(&s)));
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_points(1000, [0.7, 0.15, 0.15]), [700, 850]);
        assert_eq!(split_points(10, [0.7, 0.15, 0.15]), [7, 8]);
        let d = toy_dataset(10);
        let (a, b, c) = d.chronological_split([0.7, 0.15, 0.15]).unwrap();
        assert_eq!(
            (a.series[0].series.len(), b.series[0].series.len(), c.series[0].series.len()),
            (7, 1, 2)
        );
        assert_eq!(b.series[0].series.row(0), d.series[0].series.row(7));
        assert!(d.chronological_split([0.5, 0.5, 0.1]).unwrap_err().is_config());
        assert!(matches!(
            toy_dataset(3).chronological_split([0.7, 0.15, 0.15]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn slicing_counts() {
        let spec = WindowSpec::new(256, 64, 8).unwrap();
        let d = toy_dataset(1500);
        let subs = d.subsequences(&spec).unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[1].origin_offset, 704);
        assert_eq!(toy_dataset(704).subsequences(&spec).unwrap().len(), 1);
        assert!(toy_dataset(703).subsequences(&spec).unwrap().is_empty());
    }

    #[test]
    fn window_edges() {
        let spec = WindowSpec::new(256, 64, 8).unwrap();
        let d = toy_dataset(704);
        let sub = &d.subsequences(&spec).unwrap()[0];
        let ws = windows(sub, &spec).unwrap();
        assert_eq!(ws.len(), 8);
        assert_eq!((ws[0].start, ws[7].start), (0, 448));
        assert_eq!(ws[7].data.len(), 256 * 2);
        assert_eq!(&ws[7].data[..2], sub.rows(448, 449));

        let one = WindowSpec::new(704, 1, 1).unwrap();
        assert_eq!(windows(sub, &one).unwrap()[0].data, sub.data);
        let wrong = WindowSpec::new(100, 10, 2).unwrap();
        assert!(windows(sub, &wrong).is_err());
    }
}
