//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are skipped. Lists are comma separated.
//! Unknown or repeated keys are errors; missing keys keep the DependencyViT-T
//! defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{DEFAULT_ALPHA, DEFAULT_BETA2, DEFAULT_TAU_AFFINITY};
use crate::model::ModelConfig;
use crate::tree::DEFAULT_MIN_PART_SIZE;

pub const KEYS: [&str; 14] = [
    "image_size",
    "patch_size",
    "channels",
    "heads",
    "layers",
    "temperature",
    "prune_layers",
    "kept_tokens",
    "num_classes",
    "seed",
    "min_part_size",
    "beta2",
    "alpha",
    "tau_affinity",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub min_part_size: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub tau_affinity: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::depvit_t(),
            min_part_size: DEFAULT_MIN_PART_SIZE,
            beta2: DEFAULT_BETA2,
            alpha: DEFAULT_ALPHA,
            tau_affinity: DEFAULT_TAU_AFFINITY,
        }
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        let mut prune_layers: Vec<usize> = Vec::new();
        let mut kept: Vec<usize> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value")))?;
            let key = KEYS
                .iter()
                .copied()
                .find(|k| *k == key)
                .ok_or_else(|| Error::Config(format!("line {lineno}: unknown key {key:?}")))?;
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {lineno}: {key} given twice")));
            }
            seen.push(key);
            let m = &mut cfg.model;
            match key {
                "image_size" => m.image_size = scalar(key, value, lineno)?,
                "patch_size" => m.patch_size = scalar(key, value, lineno)?,
                "channels" => m.channels = scalar(key, value, lineno)?,
                "heads" => m.heads = scalar(key, value, lineno)?,
                "layers" => m.layers = scalar(key, value, lineno)?,
                "temperature" => m.temperature = scalar(key, value, lineno)?,
                "prune_layers" => prune_layers = list(key, value, lineno)?,
                "kept_tokens" => kept = list(key, value, lineno)?,
                "num_classes" => m.num_classes = scalar(key, value, lineno)?,
                "seed" => m.seed = scalar(key, value, lineno)?,
                "min_part_size" => cfg.min_part_size = scalar(key, value, lineno)?,
                "beta2" => cfg.beta2 = scalar(key, value, lineno)?,
                "alpha" => cfg.alpha = scalar(key, value, lineno)?,
                "tau_affinity" => cfg.tau_affinity = scalar(key, value, lineno)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        if prune_layers.len() != kept.len() {
            return Err(Error::Config(format!(
                "prune_layers has {} entries, kept_tokens has {}",
                prune_layers.len(),
                kept.len()
            )));
        }
        cfg.model.prune_schedule = prune_layers.into_iter().zip(kept).collect();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn scalar<V: FromStr>(key: &str, value: &str, lineno: usize) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {lineno}: bad value {value:?} for {key}")))
}

fn list<V: FromStr>(key: &str, value: &str, lineno: usize) -> Result<Vec<V>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| scalar(key, v.trim(), lineno)).collect()
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(0.0..=1.0).contains(&self.min_part_size) {
            return Err(Error::Config(format!("min_part_size {} outside [0, 1]", self.min_part_size)));
        }
        for (k, v) in [("beta2", self.beta2), ("alpha", self.alpha), ("tau_affinity", self.tau_affinity)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} {v} must be a non-negative number")));
            }
        }
        Ok(())
    }

    /// Every key, in the documented order; parses back to `self`.
    pub fn render(&self) -> String {
        let m = &self.model;
        let join = |v: Vec<usize>| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "image_size = {}", m.image_size);
        let _ = writeln!(s, "patch_size = {}", m.patch_size);
        let _ = writeln!(s, "channels = {}", m.channels);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "layers = {}", m.layers);
        let _ = writeln!(s, "temperature = {}", m.temperature);
        let _ = writeln!(s, "prune_layers = {}", join(m.prune_schedule.iter().map(|p| p.0).collect()));
        let _ = writeln!(s, "kept_tokens = {}", join(m.prune_schedule.iter().map(|p| p.1).collect()));
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "min_part_size = {}", self.min_part_size);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "tau_affinity = {}", self.tau_affinity);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_the_tiny_model() {
        let c: RunConfig = "".parse().unwrap();
        assert_eq!(c.model, ModelConfig::depvit_t());
        assert_eq!(c.beta2, 0.3);
        assert_eq!(c.min_part_size, 0.01);
    }

    #[test]
    fn lite_schedule_parses() {
        let c: RunConfig = "channels = 384 # small\nprune_layers = 2, 5,8,11\nkept_tokens=160,128,96,64\n"
            .parse()
            .unwrap();
        assert_eq!(c.model, ModelConfig::lite_s());
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "colour = 3",
            "heads = 12\nheads = 12",
            "heads",
            "heads = twelve",
            "prune_layers = 2\n",
            "prune_layers = 2\nkept_tokens = 300",
            "min_part_size = 2",
            "heads = 7",
        ] {
            assert!(bad.parse::<RunConfig>().is_err(), "{bad:?}");
        }
        let msg = "colour = 3".parse::<RunConfig>().unwrap_err().to_string();
        assert!(msg.contains("colour"), "{msg}");
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig {
            model: ModelConfig::lite_t(),
            ..RunConfig::default()
        };
        c.model.temperature = 0.1 + 1e-17;
        c.tau_affinity = 1.0 / 3.0;
        assert_eq!(c.render().parse::<RunConfig>().unwrap(), c);
        let t = RunConfig {
            model: ModelConfig::toy(),
            ..RunConfig::default()
        };
        assert_eq!(t.render().parse::<RunConfig>().unwrap(), t);
    }
}
