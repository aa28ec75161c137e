// SPDX-License-Identifier: Apache-2.0

//! Plain-text experiment configuration: one `key = value` per line, `#`
//! starts a comment. Lists are comma separated. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SndError};
use crate::privacy::Eta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Snd,
    TokEmbPriv,
    Text2Text,
    NoNoise,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Snd => "snd",
            Method::TokEmbPriv => "tok_emb_priv",
            Method::Text2Text => "text2text",
            Method::NoNoise => "no_noise",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SndError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snd" => Ok(Method::Snd),
            "tok_emb_priv" => Ok(Method::TokEmbPriv),
            "text2text" => Ok(Method::Text2Text),
            "no_noise" => Ok(Method::NoNoise),
            other => Err(SndError::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Every knob of a run. Defaults give the desk-scale setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub etas: Vec<Eta>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub output: Option<PathBuf>,

    // World.
    pub world_seed: u64,
    pub vocab_size: usize,
    pub dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_d_kv: usize,
    pub encoder_d_ff: usize,
    pub encoder_init_std: f64,
    pub seq_len: usize,
    pub corpus_size: usize,
    pub task_size: usize,
    pub zipf_exponent: f64,
    pub designated_count: usize,
    pub attribute_strength: f64,
    pub validation_fraction: f64,

    // Denoiser.
    pub denoiser_layers: usize,
    pub denoiser_heads: usize,
    pub denoiser_d_kv: usize,
    pub denoiser_d_ff: usize,
    pub denoiser_lr: f64,
    pub denoiser_batch: usize,
    pub denoiser_epochs: usize,
    pub samples_per_sequence: usize,
    pub clip: bool,
    pub partition_samples: usize,

    // Downstream classifier.
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    pub classifier_batch: usize,

    // Privacy evaluation.
    pub n: usize,
    pub k: usize,
    pub geometry_samples: usize,
    pub noise_draws: usize,

    // Model-update drill.
    pub drift_steps: usize,
    pub drift_lr: f64,
    pub finetune_fraction: f64,
    pub finetune_epochs: usize,

    // Network.
    pub endpoint: Option<String>,
    pub registry: Option<PathBuf>,
    pub max_connections: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "default".into(),
            etas: vec![Eta::Finite(1.0)],
            seeds: vec![0],
            methods: vec![Method::Snd, Method::TokEmbPriv, Method::Text2Text, Method::NoNoise],
            output: None,
            world_seed: 0,
            vocab_size: 1000,
            dim: 32,
            encoder_layers: 2,
            encoder_heads: 4,
            encoder_d_kv: 8,
            encoder_d_ff: 64,
            encoder_init_std: 0.1,
            seq_len: 16,
            corpus_size: 2000,
            task_size: 2000,
            zipf_exponent: 1.1,
            designated_count: 50,
            attribute_strength: 2.5,
            validation_fraction: 0.1,
            denoiser_layers: 2,
            denoiser_heads: 4,
            denoiser_d_kv: 8,
            denoiser_d_ff: 64,
            denoiser_lr: 1e-3,
            denoiser_batch: 32,
            denoiser_epochs: 2,
            samples_per_sequence: 4,
            clip: true,
            partition_samples: 4000,
            classifier_epochs: 40,
            classifier_lr: 3e-3,
            classifier_batch: 32,
            n: 4000,
            k: 3,
            geometry_samples: 200,
            noise_draws: 10_000,
            drift_steps: 50,
            drift_lr: 3e-5,
            finetune_fraction: 0.1,
            finetune_epochs: 1,
            endpoint: None,
            registry: None,
            max_connections: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SndError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(SndError::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "scenario" => self.scenario = v.to_string(),
            "eta" | "etas" => {
                self.etas = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<Eta>().map_err(|e| SndError::Config(format!("`{key}`: {e}"))))
                    .collect::<Result<_>>()?
            }
            "seed" | "seeds" => self.seeds = parse_list(key, v)?,
            "method" | "methods" => self.methods = parse_list(key, v)?,
            "output" => self.output = Some(PathBuf::from(v)),
            "world_seed" => self.world_seed = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "encoder_heads" => self.encoder_heads = parse(key, v)?,
            "encoder_d_kv" => self.encoder_d_kv = parse(key, v)?,
            "encoder_d_ff" => self.encoder_d_ff = parse(key, v)?,
            "encoder_init_std" => self.encoder_init_std = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "corpus_size" => self.corpus_size = parse(key, v)?,
            "task_size" => self.task_size = parse(key, v)?,
            "zipf_exponent" => self.zipf_exponent = parse(key, v)?,
            "designated_count" => self.designated_count = parse(key, v)?,
            "attribute_strength" => self.attribute_strength = parse(key, v)?,
            "validation_fraction" => self.validation_fraction = parse(key, v)?,
            "denoiser_layers" => self.denoiser_layers = parse(key, v)?,
            "denoiser_heads" => self.denoiser_heads = parse(key, v)?,
            "denoiser_d_kv" => self.denoiser_d_kv = parse(key, v)?,
            "denoiser_d_ff" => self.denoiser_d_ff = parse(key, v)?,
            "denoiser_lr" => self.denoiser_lr = parse(key, v)?,
            "denoiser_batch" => self.denoiser_batch = parse(key, v)?,
            "denoiser_epochs" | "epochs" => self.denoiser_epochs = parse(key, v)?,
            "samples_per_sequence" => self.samples_per_sequence = parse(key, v)?,
            "clip" => self.clip = parse_bool(key, v)?,
            "partition_samples" => self.partition_samples = parse(key, v)?,
            "classifier_epochs" => self.classifier_epochs = parse(key, v)?,
            "classifier_lr" => self.classifier_lr = parse(key, v)?,
            "classifier_batch" => self.classifier_batch = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "geometry_samples" => self.geometry_samples = parse(key, v)?,
            "noise_draws" => self.noise_draws = parse(key, v)?,
            "drift_steps" => self.drift_steps = parse(key, v)?,
            "drift_lr" => self.drift_lr = parse(key, v)?,
            "finetune_fraction" => self.finetune_fraction = parse(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            "endpoint" => self.endpoint = Some(v.to_string()),
            "registry" => self.registry = Some(PathBuf::from(v)),
            "max_connections" => self.max_connections = Some(parse(key, v)?),
            other => return Err(SndError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Applies every assignment in `text` on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SndError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key, value)
                .map_err(|e| SndError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SndError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.etas.is_empty() {
            return Err(SndError::Config("eta list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(SndError::Config("seed list is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(SndError::Config("method list is empty".into()));
        }
        let positive = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("seq_len", self.seq_len),
            ("corpus_size", self.corpus_size),
            ("task_size", self.task_size),
            ("samples_per_sequence", self.samples_per_sequence),
            ("denoiser_batch", self.denoiser_batch),
            ("k", self.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SndError::Config(format!("`{name}` must be positive")));
            }
        }
        if self.designated_count > self.vocab_size {
            return Err(SndError::Config("designated_count exceeds vocab_size".into()));
        }
        if self.encoder_heads * self.encoder_d_kv == 0 || self.denoiser_heads * self.denoiser_d_kv == 0 {
            return Err(SndError::Config("attention sizes must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(SndError::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction <= 1.0) {
            return Err(SndError::Config("finetune_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let cfg = ExperimentConfig::parse_str(
            "# sweep\nscenario = sweep\netas = 1, 10, inf\nseeds=1,2\nmethods = snd,no_noise\nclip = false  # off\n",
        )
        .unwrap();
        assert_eq!(cfg.scenario, "sweep");
        assert_eq!(cfg.etas, vec![Eta::Finite(1.0), Eta::Finite(10.0), Eta::Infinite]);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.methods, vec![Method::Snd, Method::NoNoise]);
        assert!(!cfg.clip);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse_str("bogus = 1").is_err());
        assert!(ExperimentConfig::parse_str("seeds = x").is_err());
        assert!(ExperimentConfig::parse_str("no equals sign").is_err());
        assert!(ExperimentConfig::parse_str("etas = -1").is_err());
        assert!(ExperimentConfig::parse_str("methods = magic").is_err());
        let empty = ExperimentConfig::parse_str("etas = ").unwrap();
        assert!(empty.validate().is_err());
    }
}
