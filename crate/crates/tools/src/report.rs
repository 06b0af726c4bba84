//! Run artifacts: selection report, residual curve, sparse codes, head files,
//! explanations and ablation tables. Text artifacts carry the config hash in
//! their first line; binary ones are stamped through `artifacts.toml`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cbm_core::ablation::{AblationPoint, AssociationResult};
use cbm_core::head::InitMode;
use cbm_core::select::FIRST_STEP_RULE;
use cbm_core::{ConceptBank, Explanation, LinearHead, SelectionReport, SparseCode};
use serde::{Deserialize, Serialize};

use crate::dataset::read_names;
use crate::emb::{load_embeddings, read_f64, write_f64};
use crate::error::{Result, ToolError};
use crate::labeler::endpoint::sha256_hex;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ToolError::storage(path, e))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ToolError::storage(path, e))?;
    toml::from_str(&text).map_err(|e| ToolError::parse(path, e.to_string()))
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| ToolError::Config(e.to_string()))?;
    write_text(path, &text)
}

/// Concept bank from an embeddings file and a names file (one per row).
pub fn load_bank(embeddings: &Path, names: &Path) -> Result<ConceptBank> {
    let x = load_embeddings(embeddings)?;
    let names = read_names(names)?;
    if names.len() != x.rows() {
        return Err(ToolError::Manifest(format!(
            "{} names for {} concept embeddings",
            names.len(),
            x.rows()
        )));
    }
    Ok(ConceptBank::new(names, x)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub cfg_hash: String,
    pub first_step_rule: String,
    pub stop: String,
    pub initial_residual: f64,
    pub selected: Vec<usize>,
    pub names: Vec<String>,
    pub residual_trace: Vec<f64>,
    pub pruned: Vec<usize>,
    pub pruned_names: Vec<String>,
}

impl SelectionFile {
    pub fn new(report: &SelectionReport, pool: &ConceptBank, cfg_hash: &str) -> Self {
        Self {
            cfg_hash: cfg_hash.into(),
            first_step_rule: FIRST_STEP_RULE.into(),
            stop: report.stop.as_str().into(),
            initial_residual: report.initial_residual,
            selected: report.selected.clone(),
            names: report.names.clone(),
            residual_trace: report.residual_trace.clone(),
            pruned: report.pruned.clone(),
            pruned_names: report.pruned.iter().map(|&j| pool.name(j).to_string()).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_toml(self, path)
    }

    /// The selected concepts as a bank, taken from the pool they index.
    pub fn bank(&self, pool: &ConceptBank) -> Result<ConceptBank> {
        if let Some(&bad) = self.selected.iter().find(|&&j| j >= pool.len()) {
            return Err(ToolError::Manifest(format!(
                "selection refers to concept {bad} of a {}-concept pool",
                pool.len()
            )));
        }
        Ok(pool.subset(&self.selected)?)
    }
}

pub fn residual_csv(report: &SelectionReport, cfg_hash: &str) -> String {
    let mut s = format!("# cfg_hash={cfg_hash}\nstep,concept,name,residual\n");
    let _ = writeln!(s, "0,,,{}", report.initial_residual);
    for (k, ((&j, name), r)) in report
        .selected
        .iter()
        .zip(&report.names)
        .zip(&report.residual_trace)
        .enumerate()
    {
        let _ = writeln!(s, "{},{j},{},{r}", k + 1, csv_field(name));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One line per image: `index<TAB>concept:coef ...<TAB>residual_norm`, with
/// concepts in pick order.
pub fn codes_text(codes: &[SparseCode], cfg_hash: &str) -> String {
    let mut s = format!("# cfg_hash={cfg_hash}\n# image\tconcept:coefficient ...\tresidual_norm\n");
    for (i, c) in codes.iter().enumerate() {
        let pairs: Vec<String> = c
            .support
            .iter()
            .zip(&c.coefficients)
            .map(|(j, w)| format!("{j}:{w}"))
            .collect();
        let _ = writeln!(s, "{i}\t{}\t{}", pairs.join(" "), c.residual_norm);
    }
    s
}

pub fn parse_codes(text: &str) -> std::result::Result<Vec<(Vec<usize>, Vec<f64>, f64)>, String> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split('\t');
            let (_, pairs, r) = (parts.next(), parts.next(), parts.next());
            let (Some(pairs), Some(r)) = (pairs, r) else {
                return Err(format!("malformed code line {l:?}"));
            };
            let mut support = Vec::new();
            let mut coef = Vec::new();
            for p in pairs.split_whitespace() {
                let (j, w) = p.split_once(':').ok_or_else(|| format!("bad pair {p:?}"))?;
                support.push(j.parse().map_err(|_| format!("bad concept {j:?}"))?);
                coef.push(w.parse().map_err(|_| format!("bad coefficient {w:?}"))?);
            }
            let r = r.parse().map_err(|_| format!("bad residual {r:?}"))?;
            Ok((support, coef, r))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub cfg_hash: String,
    pub class_names: Vec<String>,
    pub bias: Vec<f64>,
    pub init_mode: String,
    pub in_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
}

/// Writes `<stem>.emb` (class-major weights) and `<stem>.toml`.
pub fn save_head(
    head: &LinearHead,
    training: Option<TrainingMeta>,
    dir: &Path,
    stem: &str,
    cfg_hash: &str,
) -> Result<()> {
    write_f64(head.weights(), &dir.join(format!("{stem}.emb")), "head weights")?;
    let meta = HeadMeta {
        cfg_hash: cfg_hash.into(),
        class_names: head.class_names().to_vec(),
        bias: head.bias().to_vec(),
        init_mode: head.init_mode().as_str().into(),
        in_dim: head.in_dim(),
        training,
    };
    write_toml(&meta, &dir.join(format!("{stem}.toml")))
}

/// Loads a head from `<path>` (the `.emb`) and the sidecar next to it.
pub fn load_head(emb: &Path) -> Result<LinearHead> {
    let sidecar = emb.with_extension("toml");
    let meta: HeadMeta = read_toml(&sidecar)?;
    let weights = read_f64(emb)?;
    if weights.cols() != meta.in_dim {
        return Err(ToolError::parse(&sidecar, "in_dim disagrees with the weights"));
    }
    let mode = InitMode::parse(&meta.init_mode)
        .ok_or_else(|| ToolError::parse(&sidecar, format!("unknown init mode {:?}", meta.init_mode)))?;
    Ok(LinearHead::from_parts(weights, meta.bias, meta.class_names, mode)?)
}

pub fn explanation_text(e: &Explanation) -> String {
    let mut s = format!(
        "image {}: {} (logit {:.6}, bias {:.6}, residual {:.6})\n",
        e.image, e.class_name, e.logit, e.bias, e.residual_norm
    );
    if let Some(note) = e.note {
        let _ = writeln!(s, "  note: {note}");
    }
    for c in &e.contributions {
        let _ = writeln!(
            s,
            "  {:+.6}  {} (concept {}, score {:.6})",
            c.contribution, c.name, c.concept, c.coefficient
        );
    }
    if !e.complete {
        s.push_str("  (partial: further concepts omitted)\n");
    }
    s
}

pub fn explanations_text(es: &[Explanation], cfg_hash: &str) -> String {
    let mut s = format!("# cfg_hash={cfg_hash}\n");
    for e in es {
        s.push_str(&explanation_text(e));
    }
    s
}

pub fn ablation_csv(points: &[AblationPoint], cfg_hash: &str) -> String {
    let mut s = format!("# cfg_hash={cfg_hash}\nstrategy,m,selected,residual,accuracy\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.strategy.as_str(),
            p.m,
            p.selected,
            p.residual,
            p.accuracy
        );
    }
    s
}

pub fn association_csv(r: &AssociationResult, cfg_hash: &str) -> String {
    format!(
        "# cfg_hash={cfg_hash}\narm,accuracy\ndecomposition,{}\nsimilarity,{}\n",
        r.decomposition_accuracy, r.similarity_accuracy
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
}

/// Lists every artifact of a run with its checksum under one config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub cfg_hash: String,
    #[serde(rename = "artifact")]
    pub artifacts: Vec<ArtifactEntry>,
}

impl ArtifactIndex {
    pub fn collect(dir: &Path, files: &[&str], cfg_hash: &str) -> Result<Self> {
        let artifacts = files
            .iter()
            .map(|f| {
                let p = dir.join(f);
                let bytes = fs::read(&p).map_err(|e| ToolError::storage(&p, e))?;
                Ok(ArtifactEntry {
                    file: f.to_string(),
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg_hash: cfg_hash.into(),
            artifacts,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_toml(self, path)
    }
}
