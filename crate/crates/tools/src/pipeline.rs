//! End-to-end run: load embeddings, optionally learn and name atoms, select
//! the bottleneck, decompose, fit the head and explain. Every artifact is
//! written as soon as its stage finishes, so a failed run keeps what it got.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use cbm_core::head::train;
use cbm_core::sae::train_dictionary;
use cbm_core::{
    explain, omp_decompose, select_concepts, ConceptBank, InitMode, LinearHead, Matrix, OmpConfig,
    SparseCode, SparseDictionary,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExtractConfig, LabelConfig, RunConfig};
use crate::dataset::{read_names, Dataset, DatasetManifest};
use crate::dictionary::save_dictionary;
use crate::emb::{load_embeddings, write_f64};
use crate::error::{Result, StageExt, ToolError};
use crate::labeler::{label_atoms, CandidateFile, LabelOutcome, Labeler};
use crate::report::{
    codes_text, explanations_text, load_bank, residual_csv, save_head, ArtifactIndex,
    SelectionFile, TrainingMeta,
};

pub const SELECTION: &str = "selection.toml";
pub const RESIDUAL: &str = "residual.csv";
pub const CODES: &str = "codes.txt";
pub const RECONSTRUCTED: &str = "reconstructed.emb";
pub const HEAD: &str = "head.emb";
pub const HEAD_META: &str = "head.toml";
pub const EXPLANATIONS: &str = "explanations.txt";
pub const METRICS: &str = "metrics.toml";
pub const CANDIDATES: &str = "candidates.toml";
pub const INDEX: &str = "artifacts.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads for decomposition; 0 lets rayon decide.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cfg_hash: String,
    pub split: String,
    pub images: usize,
    pub selected: usize,
    pub pruned: usize,
    pub stop: String,
    pub mean_residual_norm: f64,
    pub head_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeroshot_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeroshot_reconstructed_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_requests: Option<usize>,
}

/// Decomposes every row on a pool of `threads` workers; output order follows
/// the input.
pub fn decompose_parallel(
    x: &Matrix,
    bank: &ConceptBank,
    cfg: &OmpConfig,
    threads: usize,
) -> Result<(Vec<SparseCode>, Matrix)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ToolError::Config(e.to_string()))?;
    let codes: Vec<SparseCode> = pool.install(|| {
        (0..x.rows())
            .into_par_iter()
            .map(|r| {
                let row = x.row(r);
                if row.iter().all(|&v| v == 0.0) {
                    return Err(cbm_core::Error::DegenerateRow { row: r });
                }
                omp_decompose(row, bank, cfg).map_err(|e| cbm_core::Error::AtRow {
                    row: r,
                    source: Box::new(e),
                })
            })
            .collect::<cbm_core::Result<_>>()
    })?;
    let mut recon = Matrix::zeros(x.rows(), x.cols());
    for (r, c) in codes.iter().enumerate() {
        recon.row_mut(r).copy_from_slice(&c.reconstructed);
    }
    Ok((codes, recon))
}

/// Class prompts, one normalized row per class.
pub fn load_prompts(path: &Path, classes: usize) -> Result<Matrix> {
    let p = load_embeddings(path)?;
    if p.rows() != classes {
        return Err(ToolError::Manifest(format!(
            "{}: {} prompt embeddings for {classes} classes",
            path.display(),
            p.rows()
        )));
    }
    Ok(p)
}

pub fn probing_rows(train: &Matrix, n: usize) -> Matrix {
    let idx: Vec<usize> = (0..n.min(train.rows())).collect();
    train.select_rows(&idx)
}

pub fn extract_atoms(
    probing: &Matrix,
    cfg: &ExtractConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<SparseDictionary> {
    let sae = cfg.sae(probing.cols(), seed);
    let dict = train_dictionary(probing, &sae)?;
    if let Some(dir) = out {
        save_dictionary(&dict, &sae, dir)?;
    }
    if let Some(last) = dict.trace().last() {
        log::info!(
            "dictionary: {} atoms, reconstruction {:.6}, l1 {:.6}",
            dict.atoms(),
            last.reconstruction,
            last.l1
        );
    }
    Ok(dict)
}

/// Image paths listed one per line, resolved against the list's directory.
pub fn read_image_list(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(read_names(path)?.into_iter().map(|p| base.join(p)).collect())
}

pub fn label_with(
    labeler: &Labeler,
    dict: &SparseDictionary,
    probing: &Matrix,
    cfg: &LabelConfig,
) -> Result<LabelOutcome> {
    let mut paths = read_image_list(&cfg.images)?;
    if paths.len() < probing.rows() {
        return Err(ToolError::Manifest(format!(
            "{} lists {} images for {} probing embeddings",
            cfg.images.display(),
            paths.len(),
            probing.rows()
        )));
    }
    paths.truncate(probing.rows());
    label_atoms(labeler, dict, probing, &paths, &cfg.task, cfg.top_k, cfg.score_threshold)
}

/// Pool entries whose names match a kept candidate, case-insensitively, in
/// pool order. Returns the restricted pool and the candidate names with no
/// text embedding.
pub fn restrict_pool(pool: &ConceptBank, kept: &[String]) -> Result<(ConceptBank, Vec<String>)> {
    let by_name: HashMap<String, usize> = pool
        .names()
        .iter()
        .enumerate()
        .map(|(j, n)| (n.to_lowercase(), j))
        .collect();
    let mut idx = Vec::new();
    let mut missing = Vec::new();
    for name in kept {
        match by_name.get(&name.to_lowercase()) {
            Some(&j) => idx.push(j),
            None => missing.push(name.clone()),
        }
    }
    idx.sort_unstable();
    idx.dedup();
    Ok((pool.subset(&idx)?, missing))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ToolError::storage(path, e))
}

struct Loaded {
    train: Dataset,
    eval: Dataset,
    prompts: Option<Matrix>,
    pool: ConceptBank,
}

fn load_inputs(cfg: &RunConfig) -> Result<Loaded> {
    let train = DatasetManifest::read(&cfg.data.train)?.load()?;
    let eval = match &cfg.data.test {
        Some(p) => DatasetManifest::read(p)?.load()?,
        None => train.clone(),
    };
    if eval.classes != train.classes {
        return Err(ToolError::Manifest("train and test class lists differ".into()));
    }
    if eval.x.cols() != train.x.cols() {
        return Err(ToolError::Manifest("train and test dimensions differ".into()));
    }
    let prompts = cfg
        .data
        .prompts
        .as_deref()
        .map(|p| load_prompts(p, train.classes.len()))
        .transpose()?;
    let pool = load_bank(&cfg.pool.embeddings, &cfg.pool.names)?;
    if pool.dim() != train.x.cols() {
        return Err(ToolError::Manifest(format!(
            "concept pool has dimension {}, images {}",
            pool.dim(),
            train.x.cols()
        )));
    }
    Ok(Loaded {
        train,
        eval,
        prompts,
        pool,
    })
}

/// Runs every stage and returns the evaluation metrics. Errors name the
/// stage that failed.
pub fn run_pipeline(cfg: &RunConfig, opts: &RunOptions) -> Result<Metrics> {
    cfg.validate().stage("config")?;
    let hash = cfg.hash();
    let out = opts.out_dir.as_path();
    fs::create_dir_all(out)
        .map_err(|e| ToolError::storage(out, e))
        .stage("config")?;
    write(&out.join("config.toml"), &cfg.to_toml()).stage("config")?;
    log::info!("run {hash} into {}", out.display());

    let data = load_inputs(cfg).stage("embkit")?;
    let probing = probing_rows(&data.train.x, cfg.data.probing);
    let mut files: Vec<&str> = vec!["config.toml"];

    let mut pool = data.pool.clone();
    let mut label_requests = None;
    if let Some(ex) = &cfg.extract {
        let dict = extract_atoms(&probing, ex, cfg.seed, Some(&out.join("dictionary"))).stage("extract")?;
        if let Some(lc) = &cfg.label {
            let labeler = Labeler::new(&lc.endpoint, lc.cache_dir.as_deref()).stage("label")?;
            let outcome = label_with(&labeler, &dict, &probing, lc).stage("label")?;
            label_requests = Some(labeler.request_count());
            CandidateFile {
                concepts: outcome.scored.clone(),
                warnings: outcome.warnings.clone(),
            }
            .write(&out.join(CANDIDATES))
            .stage("label")?;
            files.push(CANDIDATES);
            let kept: Vec<String> = outcome.kept.iter().map(|c| c.name.clone()).collect();
            let (restricted, missing) = restrict_pool(&pool, &kept).stage("label")?;
            for name in &missing {
                log::warn!("labeled concept {name:?} has no text embedding in the pool");
            }
            if restricted.is_empty() {
                return Err(ToolError::Config(
                    "no labeled concept matches the embedding pool".into(),
                ))
                .stage("label");
            }
            log::info!("{} labeled concepts matched the pool", restricted.len());
            pool = restricted;
        }
    }

    let report = select_concepts(&probing, &pool, cfg.select.m, cfg.select.dependence_tol).stage("select")?;
    SelectionFile::new(&report, &pool, &hash)
        .write(&out.join(SELECTION))
        .stage("select")?;
    write(&out.join(RESIDUAL), &residual_csv(&report, &hash)).stage("select")?;
    files.extend([SELECTION, RESIDUAL]);
    let bank = pool.subset(&report.selected).stage("select")?;
    log::info!(
        "selected {} concepts ({}), {} pruned",
        bank.len(),
        report.stop,
        report.pruned.len()
    );

    let omp = cfg.decompose.omp();
    let (_, train_recon) = decompose_parallel(&data.train.x, &bank, &omp, opts.threads).stage("decompose")?;
    let (codes, eval_recon) = decompose_parallel(&data.eval.x, &bank, &omp, opts.threads).stage("decompose")?;
    write(&out.join(CODES), &codes_text(&codes, &hash)).stage("decompose")?;
    write_f64(&eval_recon, &out.join(RECONSTRUCTED), "reconstructed").stage("decompose")?;
    files.extend([CODES, RECONSTRUCTED]);

    let mode = cfg.head.init_mode().stage("head")?;
    let classes = data.train.classes.clone();
    let init = match (mode, &data.prompts) {
        (InitMode::ZeroshotPrompt, Some(p)) => LinearHead::init_zeroshot(p, classes.clone()),
        _ => LinearHead::zeros(bank.dim(), classes.clone()),
    }
    .stage("head")?;
    let (zeroshot_accuracy, zeroshot_reconstructed_accuracy) = if mode == InitMode::ZeroshotPrompt {
        (
            Some(init.accuracy(&data.eval.x, &data.eval.labels).stage("head")?),
            Some(init.accuracy(&eval_recon, &data.eval.labels).stage("head")?),
        )
    } else {
        (None, None)
    };
    let (head, training) = if cfg.head.train {
        let tc = cfg.head.train_config(cfg.seed);
        let (h, trace) = train(&init, &train_recon, &data.train.labels, &tc).stage("head")?;
        let meta = TrainingMeta {
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            learning_rate: tc.learning_rate,
            weight_decay: tc.weight_decay,
            seed: tc.seed,
            loss_trace: trace,
        };
        (h, Some(meta))
    } else {
        (init, None)
    };
    save_head(&head, training, out, "head", &hash).stage("head")?;
    files.extend([HEAD, HEAD_META]);

    let count = cfg.explain.count.unwrap_or(codes.len()).min(codes.len());
    let explanations = codes[..count]
        .iter()
        .enumerate()
        .map(|(i, c)| explain(&head, &bank, i, c, cfg.explain.top))
        .collect::<cbm_core::Result<Vec<_>>>()
        .stage("explain")?;
    write(&out.join(EXPLANATIONS), &explanations_text(&explanations, &hash)).stage("explain")?;
    files.push(EXPLANATIONS);

    let metrics = Metrics {
        cfg_hash: hash.clone(),
        split: data.eval.split.clone().unwrap_or_else(|| "train".into()),
        images: codes.len(),
        selected: bank.len(),
        pruned: report.pruned.len(),
        stop: report.stop.as_str().into(),
        mean_residual_norm: codes.iter().map(|c| c.residual_norm).sum::<f64>() / codes.len() as f64,
        head_accuracy: head.accuracy(&eval_recon, &data.eval.labels).stage("explain")?,
        zeroshot_accuracy,
        zeroshot_reconstructed_accuracy,
        label_requests,
    };
    let text = toml::to_string(&metrics).map_err(|e| ToolError::Config(e.to_string())).stage("explain")?;
    write(&out.join(METRICS), &text).stage("explain")?;
    files.push(METRICS);

    ArtifactIndex::collect(out, &files, &hash)
        .and_then(|idx| idx.write(&out.join(INDEX)))
        .stage("explain")?;
    Ok(metrics)
}
