//! Synthetic on-disk fixture: a concept world written in the exchange
//! formats, placeholder image files, and a recorded chat transcript that
//! replays the labeling stage offline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cbm_core::linalg::dot;
use cbm_core::synth::{ConceptWorld, ConceptWorldConfig};
use cbm_core::{EmbeddingMatrix, Matrix};

use crate::config::{DataConfig, ExtractConfig, LabelConfig, PoolConfig, RunConfig};
use crate::dataset::{write_labels, write_names, DatasetManifest};
use crate::emb::write_matrix;
use crate::error::{Result, ToolError};
use crate::labeler::endpoint::{prompt_text, ChatEndpointConfig, ChatRequest, RecordingTransport};
use crate::labeler::Labeler;
use crate::pipeline::{extract_atoms, label_with, probing_rows};

pub const TASK: &str = "synthetic object";
pub const MODEL: &str = "fixture-vlm";
/// Name every summary adds; the recorded scorer marks it low.
pub const BACKGROUND_CONCEPT: &str = "plain grey background";

#[derive(Debug, Clone)]
pub struct FixtureOptions {
    pub world: ConceptWorldConfig,
    /// Probing images (with placeholder image files) taken from the train split.
    pub probing: usize,
    /// Atoms learned for the labeled run.
    pub atoms: usize,
    pub sae_epochs: usize,
    pub bottleneck: usize,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            world: ConceptWorldConfig::default(),
            probing: 500,
            atoms: 64,
            sae_epochs: 20,
            bottleneck: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub dir: PathBuf,
    /// Config over the whole candidate pool.
    pub run: PathBuf,
    /// Config that learns atoms and names them through the transcript.
    pub labeled_run: PathBuf,
    pub transcript: PathBuf,
    pub world: ConceptWorld,
}

fn emb(m: &Matrix, path: &Path, tag: &str) -> Result<()> {
    write_matrix(&EmbeddingMatrix::from_matrix(m, tag), path)
}

fn write_split(dir: &Path, name: &str, x: &Matrix, y: &[usize], classes: &[String]) -> Result<()> {
    emb(x, &dir.join(format!("{name}.emb")), name)?;
    write_labels(y, &dir.join(format!("{name}-labels.txt")))?;
    DatasetManifest {
        embeddings: format!("{name}.emb").into(),
        labels: format!("{name}-labels.txt").into(),
        classes: classes.to_vec(),
        split: Some(name.into()),
    }
    .write(&dir.join(format!("{name}.toml")))
}

fn image_name(i: usize) -> String {
    format!("images/{i:05}.img")
}

/// The two concepts an image shows most strongly.
fn visible_concepts(world: &ConceptWorld, i: usize) -> [usize; 2] {
    let x = world.train_x.row(i);
    let mut s: Vec<(usize, f64)> = world
        .concepts
        .row_iter()
        .enumerate()
        .map(|(j, c)| (j, dot(x, c)))
        .collect();
    s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    [s[0].0, s[1].0]
}

fn concept_name(j: usize) -> String {
    format!("concept-{j:02}")
}

/// Scripted endpoint behaviour used while recording.
fn respond(world: &ConceptWorld, req: &ChatRequest) -> String {
    if let Some(img) = req.messages.iter().find_map(|m| m.image.as_deref()) {
        let stem = Path::new(img).file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let i: usize = stem.parse().expect("fixture image names are indices");
        let [a, b] = visible_concepts(world, i);
        return format!(
            "The object shows {} and {} against a {BACKGROUND_CONCEPT}.",
            concept_name(a),
            concept_name(b)
        );
    }
    let text = prompt_text(req);
    if let Some(line) = text.lines().find_map(|l| l.strip_prefix("Concept: ")) {
        return if line == BACKGROUND_CONCEPT { "2" } else { "8" }.into();
    }
    // Summaries: the three concepts mentioned most often.
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for word in text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '-')) {
        if word.starts_with("concept-") && word.len() > "concept-".len() {
            *counts.entry(word.to_string()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut lines: Vec<String> = ranked
        .iter()
        .take(3)
        .map(|(n, c)| format!("{n}: visible in {c} of the images"))
        .collect();
    lines.push(format!("{BACKGROUND_CONCEPT}: the backdrop behind the object"));
    lines
        .iter()
        .enumerate()
        .map(|(k, l)| format!("{}. {l}", k + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Writes the fixture into `dir` and records the labeling transcript.
pub fn make_fixture(dir: &Path, opts: &FixtureOptions) -> Result<Fixture> {
    let world = ConceptWorld::generate(&opts.world)?;
    if opts.probing == 0 || opts.probing > opts.world.train {
        return Err(ToolError::Config("probing must be between 1 and the train size".into()));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| ToolError::storage(&images, e))?;

    write_split(dir, "train", &world.train_x, &world.train_y, &world.class_names)?;
    write_split(dir, "test", &world.test_x, &world.test_y, &world.class_names)?;
    emb(&world.prompts, &dir.join("prompts.emb"), "class prompts")?;
    emb(world.pool.embeddings(), &dir.join("pool.emb"), "concept pool")?;
    write_names(world.pool.names(), &dir.join("pool.txt"))?;
    write_names(&world.class_names, &dir.join("classes.txt"))?;

    let mut listed = Vec::with_capacity(opts.probing);
    for i in 0..opts.probing {
        let name = image_name(i);
        let p = dir.join(&name);
        fs::write(&p, format!("synthetic image {i}\n")).map_err(|e| ToolError::storage(&p, e))?;
        listed.push(name);
    }
    write_names(&listed, &dir.join("images.txt"))?;

    let base = RunConfig {
        seed: 0,
        data: DataConfig {
            train: "train.toml".into(),
            test: Some("test.toml".into()),
            prompts: Some("prompts.emb".into()),
            probing: opts.probing,
        },
        extract: None,
        label: None,
        pool: PoolConfig {
            embeddings: "pool.emb".into(),
            names: "pool.txt".into(),
        },
        select: crate::config::SelectConfig {
            m: opts.bottleneck,
            ..Default::default()
        },
        decompose: Default::default(),
        head: Default::default(),
        explain: crate::config::ExplainConfig {
            top: 3,
            count: Some(20),
        },
    };
    let mut labeled = base.clone();
    labeled.extract = Some(ExtractConfig {
        atoms: Some(opts.atoms),
        epochs: opts.sae_epochs,
        ..Default::default()
    });
    labeled.label = Some(LabelConfig {
        endpoint: ChatEndpointConfig::mock("transcript.json", MODEL),
        images: "images.txt".into(),
        task: TASK.into(),
        top_k: crate::labeler::DEFAULT_TOP_K,
        score_threshold: crate::labeler::DEFAULT_SCORE_THRESHOLD,
        cache_dir: None,
    });
    let run = dir.join("run.toml");
    let labeled_run = dir.join("run-labeled.toml");
    for (cfg, path) in [(&base, &run), (&labeled, &labeled_run)] {
        fs::write(path, cfg.to_toml()).map_err(|e| ToolError::storage(path, e))?;
    }

    // Record against exactly what the labeled run will load.
    let cfg = RunConfig::read(&labeled_run)?;
    let train = DatasetManifest::read(&cfg.data.train)?.load()?;
    let probing = probing_rows(&train.x, cfg.data.probing);
    let lc = cfg.label.as_ref().expect("labeled config");
    let dict = extract_atoms(&probing, cfg.extract.as_ref().expect("extract"), cfg.seed, None)?;
    let scripted = Arc::new(world.clone());
    let recorder = Arc::new(RecordingTransport::new(move |req: &ChatRequest| respond(&scripted, req)));
    let labeler = Labeler::with_transport(&lc.endpoint, Box::new(Arc::clone(&recorder)), None)?;
    label_with(&labeler, &dict, &probing, lc)?;
    let transcript = dir.join("transcript.json");
    recorder.snapshot().write(&transcript)?;

    Ok(Fixture {
        dir: dir.to_path_buf(),
        run,
        labeled_run,
        transcript,
        world,
    })
}
