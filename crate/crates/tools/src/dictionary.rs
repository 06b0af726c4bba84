//! Dictionary files: `decoder.emb` (atoms as rows), `encoder.emb`, and a
//! `dictionary.toml` with sizes, hyperparameters, encoder bias and loss trace.

use std::fs;
use std::path::Path;

use cbm_core::sae::{EpochLoss, SaeConfig};
use cbm_core::SparseDictionary;
use serde::{Deserialize, Serialize};

use crate::emb::{read_f64, write_f64};
use crate::error::{Result, ToolError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryMeta {
    pub atoms: usize,
    pub dim: usize,
    pub l1_penalty: f64,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub encoder_bias: Vec<f64>,
    pub trace_reconstruction: Vec<f64>,
    pub trace_l1: Vec<f64>,
}

pub fn save_dictionary(dict: &SparseDictionary, cfg: &SaeConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ToolError::storage(dir, e))?;
    write_f64(dict.decoder(), &dir.join("decoder.emb"), "sae decoder")?;
    write_f64(dict.encoder_weights(), &dir.join("encoder.emb"), "sae encoder")?;
    let meta = DictionaryMeta {
        atoms: dict.atoms(),
        dim: dict.dim(),
        l1_penalty: dict.l1_penalty(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        encoder_bias: dict.encoder_bias().to_vec(),
        trace_reconstruction: dict.trace().iter().map(|t| t.reconstruction).collect(),
        trace_l1: dict.trace().iter().map(|t| t.l1).collect(),
    };
    let text = toml::to_string(&meta).map_err(|e| ToolError::Config(e.to_string()))?;
    let p = dir.join("dictionary.toml");
    fs::write(&p, text).map_err(|e| ToolError::storage(&p, e))
}

pub fn load_dictionary(dir: &Path) -> Result<SparseDictionary> {
    let p = dir.join("dictionary.toml");
    let text = fs::read_to_string(&p).map_err(|e| ToolError::storage(&p, e))?;
    let meta: DictionaryMeta = toml::from_str(&text).map_err(|e| ToolError::parse(&p, e.to_string()))?;
    if meta.trace_l1.len() != meta.trace_reconstruction.len() {
        return Err(ToolError::parse(&p, "loss trace columns differ in length"));
    }
    let trace = meta
        .trace_reconstruction
        .iter()
        .zip(&meta.trace_l1)
        .map(|(&reconstruction, &l1)| EpochLoss {
            reconstruction,
            l1,
            total: reconstruction + meta.l1_penalty * l1,
        })
        .collect();
    let dict = SparseDictionary::from_parts(
        read_f64(&dir.join("decoder.emb"))?,
        read_f64(&dir.join("encoder.emb"))?,
        meta.encoder_bias,
        meta.l1_penalty,
        trace,
    )?;
    if (dict.atoms(), dict.dim()) != (meta.atoms, meta.dim) {
        return Err(ToolError::parse(&p, "sizes disagree with the stored matrices"));
    }
    Ok(dict)
}
