//! Key=value config files, value resolution, grid parsing, manifests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use daedalus::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// A line-oriented `key=value` config file; `#` starts a comment.
#[derive(Default, Debug)]
pub struct ConfigFile {
    map: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::invalid(format!(
                    "{}:{}: expected key=value, got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { map })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::invalid(format!("config key '{key}': {e}"))),
        }
    }
}

/// Flag > config file > default.
pub fn resolve<T>(flag: Option<T>, cfg: Option<T>, default: T) -> T {
    flag.or(cfg).unwrap_or(default)
}

/// Parse a numeric grid: either `a,b,c` or `start:end:step` (inclusive end,
/// within half a step).
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parse = |s: &str| -> Result<f64> {
        s.trim().parse().map_err(|_| Error::invalid(format!("bad number '{s}' in grid '{spec}'")))
    };
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::invalid(format!("grid '{spec}' must be start:end:step")));
        }
        let (start, end, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        if step <= 0.0 || end < start {
            return Err(Error::invalid(format!("grid '{spec}' is not increasing")));
        }
        let mut out = Vec::new();
        let n = ((end - start) / step + 0.5).floor() as usize;
        for i in 0..=n {
            out.push(start + step * i as f64);
        }
        Ok(out)
    } else {
        spec.split(',').map(parse).collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The reproducibility record every command writes next to its primary
/// artifact: the fully resolved configuration plus hashes of everything
/// consumed and produced.
#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.config.insert(key.to_string(), value.into());
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// `adv.png` + "result" -> `adv.result.json`; `adv.png` -> `adv.delta.png`.
pub fn sidecar(primary: &Path, tag: &str, ext: &str) -> PathBuf {
    let stem = primary.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    primary.with_file_name(format!("{stem}.{tag}.{ext}"))
}
