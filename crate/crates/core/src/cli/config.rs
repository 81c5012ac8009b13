//! Versioned TOML configuration for the command-line front end.
//!
//! Every file carries `version = 1`; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annealing::AttenuationSpec;
use crate::cost::CostConfig;
use crate::error::{Error, Result};
use crate::heredity::HereditySpec;
use crate::model::{ModelConfig, Policies};
use crate::pruning::{Fraction, PruneSchedule};
use crate::tensor::Seed;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let t = ModelConfig::toy();
        Self {
            num_layers: t.num_layers,
            model_dim: t.model_dim,
            num_heads: t.num_heads,
            mlp_dim: t.mlp_dim,
            vocab_size: t.vocab_size,
            max_positions: t.max_positions,
        }
    }
}

impl ModelDims {
    pub fn to_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            mlp_dim: self.mlp_dim,
            vocab_size: self.vocab_size,
            max_positions: self.max_positions,
            seed: Seed(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSpec {
    pub n_system: usize,
    pub n_visual: usize,
    pub n_instruction: usize,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            n_system: 4,
            n_visual: 20,
            n_instruction: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HereditySection {
    pub lazy_layers: HereditySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub max_new_tokens: usize,
    pub record_attention: bool,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            record_attention: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub out_dir: PathBuf,
    pub format: Format,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            format: Format::Csv,
        }
    }
}

/// Everything `run` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default)]
    pub prune: PruneSchedule,
    #[serde(default)]
    pub attenuation: AttenuationSpec,
    #[serde(default)]
    pub heredity: HereditySection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelDims::default(),
            prompt: PromptSpec::default(),
            prune: PruneSchedule::default(),
            attenuation: AttenuationSpec::default(),
            heredity: HereditySection::default(),
            generation: GenerationSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn policies(&self) -> Policies {
        Policies {
            schedule: self.prune.clone(),
            attenuation: self.attenuation,
            heredity: self.heredity.lazy_layers.clone(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_config(self.seed)
    }

    pub fn prompt_seed(&self) -> Seed {
        Seed(self.seed).derive(0x5052_4f4d_5054)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        let cfg = self.model_config();
        cfg.validate()?;
        self.policies().validate(cfg.num_layers)?;
        if self.generation.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// Grid axes for `sweep`. When `keep_fraction` is set, each stride gets the
/// step ratio that lands on it and `ratios` must be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub strides: Vec<usize>,
    pub ratios: Vec<Fraction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep_fraction: Option<Fraction>,
    pub first_ratio: Fraction,
    pub start_layer: usize,
    /// Cosine attenuation horizons; empty means no annealing.
    pub taus: Vec<f64>,
    /// Lazy-layer sets; empty means none.
    pub lazy_sets: Vec<HereditySpec>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            strides: vec![1, 2, 4, 7, 14, 28],
            ratios: Vec::new(),
            keep_fraction: Some(Fraction::from_micros(10_000)),
            first_ratio: Fraction::from_micros(500_000),
            start_layer: 3,
            taus: Vec::new(),
            lazy_sets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Toy engine used for wall clock and the trace checksum.
    #[serde(default = "SweepConfig::default_model")]
    pub model: ModelDims,
    #[serde(default = "SweepConfig::default_prompt")]
    pub prompt: PromptSpec,
    #[serde(default = "SweepConfig::default_generation")]
    pub generation: GenerationSection,
    /// Deployment-scale dimensions for the analytic columns.
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl SweepConfig {
    fn default_model() -> ModelDims {
        ModelDims {
            num_layers: 32,
            model_dim: 16,
            num_heads: 2,
            mlp_dim: 32,
            vocab_size: 32,
            max_positions: 128,
        }
    }

    fn default_prompt() -> PromptSpec {
        PromptSpec {
            n_system: 2,
            n_visual: 40,
            n_instruction: 6,
        }
    }

    fn default_generation() -> GenerationSection {
        GenerationSection {
            max_new_tokens: 4,
            record_attention: false,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            model: Self::default_model(),
            prompt: Self::default_prompt(),
            generation: Self::default_generation(),
            cost: CostConfig::default(),
            grid: GridSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostFile {
    pub version: u32,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub prune: PruneSchedule,
    #[serde(default)]
    pub attenuation: AttenuationSpec,
    #[serde(default)]
    pub heredity: HereditySection,
    #[serde(default = "CostFile::default_gen_len")]
    pub gen_len: usize,
    /// When set, `cost.n_text` is solved from this baseline FLOPs total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate_flops: Option<f64>,
}

impl CostFile {
    fn default_gen_len() -> usize {
        1
    }
}

impl Default for CostFile {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            cost: CostConfig::default(),
            prune: PruneSchedule::default(),
            attenuation: AttenuationSpec::default(),
            heredity: HereditySection::default(),
            gen_len: 1,
            calibrate_flops: None,
        }
    }
}

pub fn check_version(v: u32) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(Error::config(format!(
            "unsupported config version {v} (expected {CONFIG_VERSION})"
        )));
    }
    Ok(())
}

pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_toml(&text)
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
}
