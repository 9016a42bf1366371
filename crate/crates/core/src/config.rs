//! Flat `key = value` config files and run manifests.

use std::path::Path;

use crate::error::{Error, Result};

/// Environment variable consulted when no `--seed` is given.
pub const SEED_ENV: &str = "MAPL_SEED";

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// ignored; a repeated key is an error.
pub fn parse_config(text: &str, path: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            reason,
        };
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(format!("expected `key = value`, got `{line}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(err(format!("invalid key `{key}`")));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(err(format!("key `{key}` set twice")));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

pub fn render_config(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// `flag`, else `MAPL_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Everything needed to re-run a command: its argument vector (with the
/// seed made explicit), the resolved configuration and the paths it touched.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
    pub version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            argv,
            config: Vec::new(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: 0.0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("command = {}\n", self.command);
        out.push_str(&format!(
            "argv = {}\n",
            serde_json::to_string(&self.argv).expect("strings serialize")
        ));
        out.push_str(&format!("version = {}\n", self.version));
        for (k, v) in &self.seeds {
            out.push_str(&format!("seed.{k} = {v}\n"));
        }
        for (k, v) in &self.inputs {
            out.push_str(&format!("input.{k} = {v}\n"));
        }
        for (k, v) in &self.outputs {
            out.push_str(&format!("output.{k} = {v}\n"));
        }
        for (k, v) in &self.config {
            out.push_str(&format!("config.{k} = {v}\n"));
        }
        out.push_str(&format!("duration_secs = {:.3}\n", self.duration_secs));
        out
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let pairs = parse_config(text, path)?;
        let missing = |k: &str| Error::Parse {
            path: path.to_string(),
            line: 0,
            reason: format!("manifest lacks `{k}`"),
        };
        let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let argv: Vec<String> = serde_json::from_str(get("argv").ok_or_else(|| missing("argv"))?)
            .map_err(|e| Error::Parse {
                path: path.to_string(),
                line: 0,
                reason: format!("argv: {e}"),
            })?;
        let mut m = Self::new(get("command").ok_or_else(|| missing("command"))?, argv);
        m.version = get("version").unwrap_or_default().to_string();
        m.duration_secs = get("duration_secs").and_then(|v| v.parse().ok()).unwrap_or(0.0);
        for (k, v) in &pairs {
            let owned = |s: &str| (s.to_string(), v.clone());
            if let Some(s) = k.strip_prefix("seed.") {
                let seed = v.parse().map_err(|_| Error::config(k.as_str(), "not an integer"))?;
                m.seeds.push((s.to_string(), seed));
            } else if let Some(s) = k.strip_prefix("input.") {
                m.inputs.push(owned(s));
            } else if let Some(s) = k.strip_prefix("output.") {
                m.outputs.push(owned(s));
            } else if let Some(s) = k.strip_prefix("config.") {
                m.config.push(owned(s));
            }
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}
