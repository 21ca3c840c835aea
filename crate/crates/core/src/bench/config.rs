//! Run configuration: a versioned JSON document, strict about unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bpsim::{CostModel, Protocol};
use crate::error::{LopaError, Result};
use crate::model::{random_hmm_with, HmmModel, HmmShape, ModelBackend, ScriptedModel};
use crate::types::{BlockConfig, DecodeConfig, SequenceState, TokenId};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Random HMM; instance `r` of a suite uses `seed + r`.
    Hmm {
        n_hidden: usize,
        vocab_size: usize,
        seed: u64,
        #[serde(default)]
        shape: HmmShape,
    },
    /// Named hand-written fixture.
    Scripted { fixture: String, vocab_size: usize },
    /// HMM parameters read from a JSON file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub fwd_base: f64,
    pub fwd_per_token: f64,
    pub bcast_base: f64,
    pub bcast_per_byte: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostSpec {
    Preset(String),
    Custom(CostParams),
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec::Preset("ideal".into())
    }
}

impl CostSpec {
    pub fn build(&self, devices: usize) -> Result<CostModel> {
        let cm = match self {
            CostSpec::Preset(name) => CostModel::preset(name, devices)?,
            CostSpec::Custom(p) => CostModel {
                fwd_base: p.fwd_base,
                fwd_per_token: p.fwd_per_token,
                bcast_base: p.bcast_base,
                bcast_per_byte: p.bcast_per_byte,
                devices,
            },
        };
        cm.validate()?;
        Ok(cm)
    }
}

/// Grid axes. An omitted axis runs only the base value from the config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub k: Option<Vec<usize>>,
    #[serde(default)]
    pub tau: Option<Vec<f64>>,
    #[serde(default)]
    pub devices: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub formats: Vec<Format>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub prompt_len: usize,
    pub gen_len: usize,
    pub decode: DecodeConfig,
    #[serde(default)]
    pub block: Option<BlockConfig>,
    #[serde(default)]
    pub cost_model: CostSpec,
    #[serde(default = "one")]
    pub devices: usize,
    #[serde(default = "two_phase")]
    pub protocol: Protocol,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn one() -> usize {
    1
}

fn two_phase() -> Protocol {
    Protocol::TwoPhase
}

fn field(name: &str, e: LopaError) -> LopaError {
    match e {
        LopaError::InvalidConfig(msg) | LopaError::InvalidModel(msg) => {
            LopaError::InvalidConfig(format!("{name}: {msg}"))
        }
        other => LopaError::InvalidConfig(format!("{name}: {other}")),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| LopaError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative model file paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LopaError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let ModelSpec::File { path: model_path } = &mut cfg.model {
            if model_path.is_relative() {
                if let Some(dir) = path.parent() {
                    *model_path = dir.join(&*model_path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(LopaError::InvalidConfig(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        if self.gen_len == 0 {
            return Err(LopaError::InvalidConfig("gen_len: must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(LopaError::InvalidConfig("repetitions: must be >= 1".into()));
        }
        if self.devices == 0 {
            return Err(LopaError::InvalidConfig("devices: must be >= 1".into()));
        }
        self.decode.validate().map_err(|e| field("decode", e))?;
        if let Some(b) = &self.block {
            b.validate().map_err(|e| field("block", e))?;
        }
        self.cost_model.build(self.devices).map_err(|e| field("cost_model", e))?;
        match &self.model {
            ModelSpec::Hmm {
                n_hidden,
                vocab_size,
                ..
            } => {
                if *n_hidden == 0 || *vocab_size == 0 {
                    return Err(LopaError::InvalidConfig(
                        "model: n_hidden and vocab_size must be >= 1".into(),
                    ));
                }
            }
            ModelSpec::Scripted { fixture, vocab_size } => {
                fixtures::build(fixture, *vocab_size).map_err(|e| field("model.fixture", e))?;
            }
            ModelSpec::File { .. } => {}
        }
        let sweep = &self.sweep;
        for (name, empty) in [
            ("sweep.k", sweep.k.as_ref().is_some_and(Vec::is_empty)),
            ("sweep.tau", sweep.tau.as_ref().is_some_and(Vec::is_empty)),
            ("sweep.devices", sweep.devices.as_ref().is_some_and(Vec::is_empty)),
        ] {
            if empty {
                return Err(LopaError::InvalidConfig(format!("{name}: axis must not be empty")));
            }
        }
        for &tau in sweep.tau.iter().flatten() {
            DecodeConfig { tau, ..self.decode.clone() }
                .validate()
                .map_err(|e| field("sweep.tau", e))?;
        }
        if sweep.devices.iter().flatten().any(|&d| d == 0) {
            return Err(LopaError::InvalidConfig("sweep.devices: must be >= 1".into()));
        }
        Ok(())
    }

    pub fn k_axis(&self) -> Vec<usize> {
        self.sweep.k.clone().unwrap_or_else(|| vec![self.decode.branch_budget])
    }

    pub fn tau_axis(&self) -> Vec<f64> {
        self.sweep.tau.clone().unwrap_or_else(|| vec![self.decode.tau])
    }

    pub fn devices_axis(&self) -> Vec<usize> {
        self.sweep.devices.clone().unwrap_or_else(|| vec![self.devices])
    }

    /// Model and starting state for repetition `rep`.
    pub fn instance(&self, rep: usize) -> Result<(Box<dyn ModelBackend>, SequenceState)> {
        let prompt_seed = self.decode.seed.wrapping_add(rep as u64);
        let (model, prompt): (Box<dyn ModelBackend>, Vec<TokenId>) = match &self.model {
            ModelSpec::Hmm {
                n_hidden,
                vocab_size,
                seed,
                shape,
            } => {
                let hmm = random_hmm_with(*n_hidden, *vocab_size, seed.wrapping_add(rep as u64), *shape)?;
                let prompt = hmm.sample_tokens(self.prompt_len, prompt_seed);
                (Box::new(hmm), prompt)
            }
            ModelSpec::Scripted { fixture, vocab_size } => {
                let m = fixtures::build(fixture, *vocab_size)?;
                (Box::new(m), vec![0; self.prompt_len])
            }
            ModelSpec::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| LopaError::InvalidConfig(format!("model.path {}: {e}", path.display())))?;
                let hmm = HmmModel::from_json(&text).map_err(|e| field("model.path", e))?;
                let prompt = hmm.sample_tokens(self.prompt_len, prompt_seed);
                (Box::new(hmm), prompt)
            }
        };
        let state = SequenceState::new(&prompt, self.gen_len, model.vocab_size())?;
        Ok((model, state))
    }
}

/// Named scripted models usable from config files.
pub mod fixtures {
    use super::*;

    pub const NAMES: &[&str] = &["one_hot", "uniform"];

    pub fn build(name: &str, vocab_size: usize) -> Result<ScriptedModel> {
        match name {
            "one_hot" => {
                let mut d = vec![0.0; vocab_size];
                *d.last_mut().ok_or(LopaError::EmptyVocab)? = 1.0;
                ScriptedModel::new(vocab_size)?.with_default(d)
            }
            "uniform" => ScriptedModel::new(vocab_size),
            other => Err(LopaError::InvalidConfig(format!(
                "unknown fixture {other:?}, expected one of {NAMES:?}"
            ))),
        }
    }
}
