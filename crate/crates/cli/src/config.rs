//! Resolved run configuration: defaults, then a config file, then flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use promptseg::dataio::WindowSpec;
use promptseg::model::ModelConfig;
use promptseg::training::TrainConfig;
use promptseg::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dir: PathBuf,
    #[serde(alias = "T")]
    pub window_len: usize,
    pub hop: usize,
    #[serde(alias = "W")]
    pub windows: usize,
    /// Train / validation / test fractions of every series.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::new(),
            window_len: 256,
            hop: 64,
            windows: 8,
            split: [0.70, 0.15, 0.15],
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.window_len, self.hop, self.windows)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

const ALIASES: [&str; 11] = ["T", "W", "D", "P", "C", "K_total", "T_ctx", "N_p", "N_r", "window_len", "context_len"];

fn keys<T: Serialize>(v: &T) -> BTreeSet<String> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

/// Parsed config file plus whether it fixed the context length.
#[derive(Debug)]
pub struct FileConfig {
    pub config: RunConfig,
    pub sets_context_len: bool,
}

/// Read a config file: sectioned (`data`/`model`/`train`), flat (all field
/// names at top level), or a run manifest (its `config` entry).
pub fn read_config_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut v: Value = serde_json::from_str(&text)?;
    if let Some(inner) = v.get("config") {
        v = inner.clone();
    }
    let Value::Object(map) = &v else {
        return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
    };
    let sectioned = ["data", "model", "train"].iter().any(|k| map.contains_key(*k));
    if sectioned {
        if let Some(k) = map.keys().find(|k| !["data", "model", "train"].contains(&k.as_str())) {
            return Err(Error::Config(format!("{}: unknown section `{k}`", path.display())));
        }
        let sets_context_len = v
            .get("model")
            .is_some_and(|m| m.get("context_len").is_some() || m.get("T_ctx").is_some());
        let config: RunConfig = serde_json::from_value(v)?;
        return Ok(FileConfig { config, sets_context_len });
    }
    let d = RunConfig::default();
    let mut known = keys(&d.data);
    known.extend(keys(&d.model));
    known.extend(keys(&d.train));
    known.extend(ALIASES.iter().map(|s| s.to_string()));
    if let Some(k) = map.keys().find(|k| !known.contains(*k)) {
        return Err(Error::Config(format!("{}: unknown config key `{k}`", path.display())));
    }
    Ok(FileConfig {
        sets_context_len: map.contains_key("context_len") || map.contains_key("T_ctx"),
        config: RunConfig {
            data: serde_json::from_value(v.clone())?,
            model: serde_json::from_value(v.clone())?,
            train: serde_json::from_value(v)?,
        },
    })
}

/// Parse a grid value list such as `0.5T,1T,2T,4T` or `4,8,16,32`. A `T`
/// suffix multiplies by `window_len`.
pub fn parse_grid(spec: &str, window_len: usize) -> Result<(String, Vec<usize>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid `{spec}` is not of the form key=v1,v2,...")))?;
    let key = key.trim().to_ascii_lowercase();
    if key != "tctx" && key != "windows" {
        return Err(Error::Config(format!("unknown grid key `{key}` (expected tctx or windows)")));
    }
    let mut out = Vec::new();
    for raw in values.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let value = if let Some(mult) = raw.strip_suffix(['T', 't']) {
            let m: f64 = if mult.is_empty() { 1.0 } else { mult.parse().map_err(|_| Error::Config(format!("bad grid value `{raw}`")))? };
            let v = m * window_len as f64;
            if (v - v.round()).abs() > 1e-9 || v.round() < 1.0 {
                return Err(Error::Config(format!("grid value `{raw}` is not a positive whole number of timesteps")));
            }
            v.round() as usize
        } else {
            raw.parse().map_err(|_| Error::Config(format!("bad grid value `{raw}`")))?
        };
        if value == 0 {
            return Err(Error::Config(format!("grid value `{raw}` must be positive")));
        }
        out.push(value);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("grid `{spec}` has no values")));
    }
    Ok((key, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values() {
        assert_eq!(parse_grid("tctx=0.5T,1T,2T,4T", 256).unwrap(), ("tctx".into(), vec![128, 256, 512, 1024]));
        assert_eq!(parse_grid("windows=4,8,16,32", 256).unwrap().1, vec![4, 8, 16, 32]);
        assert!(parse_grid("depth=1,2", 256).unwrap_err().is_config());
        assert!(parse_grid("windows=", 256).unwrap_err().is_config());
        assert!(parse_grid("tctx=0.25T", 10).unwrap_err().is_config());
    }

    #[test]
    fn flat_and_sectioned_files() {
        let dir = tempfile::tempdir().unwrap();
        let flat = dir.path().join("flat.json");
        std::fs::write(&flat, r#"{"N_p": 2, "D": 64, "hop": 32, "lr": 0.001}"#).unwrap();
        let f = read_config_file(&flat).unwrap();
        assert_eq!((f.config.train.n_prompts, f.config.model.d_model, f.config.data.hop), (2, 64, 32));
        assert!(!f.sets_context_len);

        let sec = dir.path().join("sec.json");
        std::fs::write(&sec, r#"{"config": {"model": {"T_ctx": 64}, "train": {"seed": 4}}}"#).unwrap();
        let f = read_config_file(&sec).unwrap();
        assert_eq!((f.config.model.context_len, f.config.train.seed), (64, 4));
        assert!(f.sets_context_len);

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"learning_rate": 1}"#).unwrap();
        assert!(read_config_file(&bad).unwrap_err().is_config());
    }
}
