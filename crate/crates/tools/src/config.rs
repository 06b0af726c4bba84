//! Run configuration. Every knob that affects results lives here; the hash of
//! its canonical TOML form stamps every artifact of a run.

use std::fs;
use std::path::{Path, PathBuf};

use cbm_core::decompose::{DEFAULT_SPARSITY, DEFAULT_STOP_TOL};
use cbm_core::explain::DEFAULT_TOP_CONCEPTS;
use cbm_core::head::{InitMode, TrainConfig, DEFAULT_PROMPT_TEMPLATE};
use cbm_core::sae::SaeConfig;
use cbm_core::select::{DEFAULT_BOTTLENECK, DEFAULT_DEPENDENCE_TOL};
use cbm_core::OmpConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToolError};
use crate::labeler::endpoint::{sha256_hex, ChatEndpointConfig};
use crate::labeler::{DEFAULT_SCORE_THRESHOLD, DEFAULT_TOP_K};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extract: Option<ExtractConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelConfig>,
    pub pool: PoolConfig,
    #[serde(default)]
    pub select: SelectConfig,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training manifest; probing images are its first `probing` rows.
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Class-prompt embeddings, one row per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    #[serde(default = "default_probing")]
    pub probing: usize,
}

fn default_probing() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    /// Defaults to `8d / max(1, d/64)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<usize>,
    #[serde(default = "default_l1")]
    pub l1_penalty: f64,
    #[serde(default = "default_sae_epochs")]
    pub epochs: usize,
    #[serde(default = "default_sae_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_sae_batch")]
    pub batch_size: usize,
}

fn default_l1() -> f64 {
    SaeConfig::default().l1_penalty
}
fn default_sae_epochs() -> usize {
    SaeConfig::default().epochs
}
fn default_sae_lr() -> f64 {
    SaeConfig::default().learning_rate
}
fn default_sae_batch() -> usize {
    SaeConfig::default().batch_size
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            atoms: None,
            l1_penalty: default_l1(),
            epochs: default_sae_epochs(),
            learning_rate: default_sae_lr(),
            batch_size: default_sae_batch(),
        }
    }
}

impl ExtractConfig {
    pub fn sae(&self, dim: usize, seed: u64) -> SaeConfig {
        SaeConfig {
            atoms: self.atoms.unwrap_or_else(|| cbm_core::sae::default_atoms(dim)),
            l1_penalty: self.l1_penalty,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            ..SaeConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    pub endpoint: ChatEndpointConfig,
    /// Image file per training row, one path per line.
    pub images: PathBuf,
    pub task: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_threshold")]
    pub score_threshold: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_threshold() -> u8 {
    DEFAULT_SCORE_THRESHOLD
}

/// Text embeddings of the candidate concepts, joined to labeler output by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub embeddings: PathBuf,
    pub names: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub m: usize,
    pub dependence_tol: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_BOTTLENECK,
            dependence_tol: DEFAULT_DEPENDENCE_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    pub sparsity: usize,
    pub stop_tol: f64,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            sparsity: DEFAULT_SPARSITY,
            stop_tol: DEFAULT_STOP_TOL,
        }
    }
}

impl DecomposeConfig {
    pub fn omp(&self) -> OmpConfig {
        OmpConfig {
            sparsity: self.sparsity,
            stop_tol: self.stop_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// "zeroshot-prompt" or "zeros".
    pub init: String,
    /// Zero-shot only when false.
    pub train: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub prompt_template: String,
}

impl Default for HeadConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            init: InitMode::ZeroshotPrompt.as_str().into(),
            train: true,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
        }
    }
}

impl HeadConfig {
    pub fn init_mode(&self) -> Result<InitMode> {
        InitMode::parse(&self.init)
            .ok_or_else(|| ToolError::Config(format!("unknown head init {:?}", self.init)))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    pub top: usize,
    /// Explain the first `count` evaluation images; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            top: DEFAULT_TOP_CONCEPTS,
            count: None,
        }
    }
}

impl RunConfig {
    /// Reads a config; relative paths resolve against the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ToolError::storage(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ToolError::parse(path, e.to_string()))?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| *p = base.join(&*p);
        fix(&mut self.data.train);
        self.data.test.as_mut().map(fix);
        self.data.prompts.as_mut().map(fix);
        fix(&mut self.pool.embeddings);
        fix(&mut self.pool.names);
        if let Some(l) = &mut self.label {
            fix(&mut l.images);
            l.endpoint.mock_transcript.as_mut().map(fix);
            l.cache_dir.as_mut().map(fix);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.select.m == 0 {
            return Err(ToolError::Config("select.m must be at least 1".into()));
        }
        if self.decompose.sparsity == 0 {
            return Err(ToolError::Config("decompose.sparsity must be at least 1".into()));
        }
        if self.data.probing == 0 {
            return Err(ToolError::Config("data.probing must be at least 1".into()));
        }
        if self.label.is_some() && self.extract.is_none() {
            return Err(ToolError::Config("labeling needs an [extract] section".into()));
        }
        if let Some(l) = &self.label {
            l.endpoint.validate()?;
            if !(1..=10).contains(&l.score_threshold) {
                return Err(ToolError::Config("label.score_threshold must be in 1..=10".into()));
            }
        }
        let mode = self.head.init_mode()?;
        if mode == InitMode::ZeroshotPrompt && self.data.prompts.is_none() {
            return Err(ToolError::Config(
                "zero-shot initialization needs data.prompts".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
train = "train.toml"
prompts = "prompts.emb"

[pool]
embeddings = "pool.emb"
names = "pool.txt"
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.select.m, 300);
        assert_eq!(cfg.decompose.sparsity, 32);
        assert_eq!(cfg.head.epochs, 50);
        assert_eq!(cfg.head.batch_size, 64);
        assert_eq!(cfg.head.learning_rate, 5e-5);
        assert_eq!(cfg.explain.top, 3);
        assert_eq!(cfg.head.prompt_template, "This is a photo of [cls]");
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a: RunConfig = toml::from_str(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.select.m = 10;
        assert_ne!(a.hash(), b.hash());
        let back: RunConfig = toml::from_str(&a.to_toml()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.data.prompts = None;
        assert!(cfg.validate().is_err());
        cfg.head.init = "zeros".into();
        assert!(cfg.validate().is_ok());
        cfg.head.init = "random".into();
        assert!(cfg.validate().is_err());
    }
}
