//! Dataset directories: `meta.json` plus one `series_<id>.csv` per series.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{Dataset, Granularity, LabeledSeries, StateSequence, TimeSeries};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    name: String,
    channels: Vec<String>,
    granularities: Vec<Granularity>,
    version: u32,
    /// Series ids in dataset order. Older directories omit it; ids are then
    /// discovered from file names and sorted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    series: Option<Vec<String>>,
}

fn series_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("series_{id}.csv"))
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        name: dataset.name.clone(),
        channels: dataset.channels.clone(),
        granularities: dataset.granularities.clone(),
        version: FORMAT_VERSION,
        series: Some(
            dataset
                .series
                .iter()
                .map(|s| s.series.series_id().to_string())
                .collect(),
        ),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    let c = dataset.num_channels();
    let mut header = vec!["t".to_string()];
    header.extend((0..c).map(|i| format!("ch_{i}")));
    header.extend(dataset.granularities.iter().map(|g| format!("state_g{}", g.level)));
    for s in &dataset.series {
        let path = series_path(dir, s.series.series_id());
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        w.write_record(&header).map_err(|e| csv_io(&path, e))?;
        let unified: Vec<Vec<usize>> = dataset
            .granularities
            .iter()
            .map(|g| s.unified_labels(g))
            .collect();
        let mut record = Vec::with_capacity(header.len());
        for t in 0..s.series.len() {
            record.clear();
            record.push(t.to_string());
            // `Display` for f64 prints the shortest string that parses back exactly
            record.extend(s.series.row(t).iter().map(|v| v.to_string()));
            record.extend(unified.iter().map(|l| l[t].to_string()));
            w.write_record(&record).map_err(|e| csv_io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::Data(format!(
            "dataset metadata not found: expected {}",
            meta_path.display()
        )));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        row: e.line(),
        message: e.to_string(),
    })?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: meta.version,
            expected: FORMAT_VERSION,
        });
    }
    let ids = match meta.series {
        Some(ids) => ids,
        None => discover_ids(dir)?,
    };
    let series = ids
        .iter()
        .map(|id| read_series(&series_path(dir, id), id, meta.channels.len(), &meta.granularities))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(meta.name, meta.channels, meta.granularities, series)
}

fn discover_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_prefix("series_").and_then(|n| n.strip_suffix(".csv")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

fn read_series(path: &Path, id: &str, channels: usize, levels: &[Granularity]) -> Result<LabeledSeries> {
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;

    let mut expected = vec!["t".to_string()];
    expected.extend((0..channels).map(|i| format!("ch_{i}")));
    expected.extend(levels.iter().map(|g| format!("state_g{}", g.level)));
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(
            1,
            format!("header {:?}, expected {:?}", header.iter().collect::<Vec<_>>(), expected),
        ));
    }

    let width = expected.len();
    let mut values = Vec::new();
    let mut states: Vec<Vec<usize>> = vec![Vec::new(); levels.len()];
    for (i, rec) in r.records().enumerate() {
        // row numbers are 1-based file lines; the header is line 1
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(row, e.to_string()))?;
        if rec.len() != width {
            return Err(parse_err(row, format!("{} fields, expected {width}", rec.len())));
        }
        let t: usize = rec[0]
            .parse()
            .map_err(|_| parse_err(row, format!("bad timestep `{}`", &rec[0])))?;
        if t != i {
            return Err(parse_err(row, format!("timestep {t}, expected {i}")));
        }
        for c in 0..channels {
            let v: f64 = rec[1 + c]
                .parse()
                .map_err(|_| parse_err(row, format!("bad value `{}` in ch_{c}", &rec[1 + c])))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("non-finite value in ch_{c}")));
            }
            values.push(v);
        }
        for (k, g) in levels.iter().enumerate() {
            let field = &rec[1 + channels + k];
            let s: usize = field
                .parse()
                .map_err(|_| parse_err(row, format!("bad state `{field}`")))?;
            if !g.contains(s) {
                return Err(parse_err(
                    row,
                    format!("state {s} outside level {} range [{}, {})", g.level, g.state_offset, g.state_offset + g.num_states),
                ));
            }
            states[k].push(s - g.state_offset);
        }
    }
    if values.is_empty() {
        return Err(parse_err(2, "series has no rows".into()));
    }
    Ok(LabeledSeries {
        series: TimeSeries::new(id, channels, values)?,
        labels: states
            .into_iter()
            .zip(levels)
            .map(|(s, g)| StateSequence::new(s, g.num_states, g.level))
            .collect::<Result<_>>()?,
    })
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{generate_synthetic, SynthConfig};

    fn small() -> Dataset {
        let mut d = generate_synthetic(&SynthConfig {
            num_series: 2,
            length: 300,
            channels: 2,
            num_fine_states: 4,
            segment_len_range: (20, 60),
            noise_std: 0.3,
            seed: 5,
        })
        .unwrap();
        d.add_coarse_level(2).unwrap();
        d
    }

    #[test]
    fn round_trip_is_lossless() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn out_of_range_state_names_the_row() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join("series_000.csv");
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<&str> = lines[3].split(',').collect();
        let n = fields.len();
        fields[n - 2] = "99";
        lines[3] = fields.join(",");
        fs::write(&p, lines.join("\n")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { row, message, .. }) => {
                assert_eq!(row, 4);
                assert!(message.contains("99"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_rejected() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join("series_001.csv");
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("300,1.0\n");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { row: 302, .. })));
    }

    #[test]
    fn missing_meta_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("meta.json"), "{err}");
    }
}
