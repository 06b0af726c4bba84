use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cbm_core::ablation::{ablate_association, ablate_selection, Downstream, HeadSetup, Strategy};
use cbm_core::head::train;
use cbm_core::sae::SaeConfig;
use cbm_core::{explain, select_concepts, ConceptBank, InitMode, LinearHead, Matrix};
use cbm_tools::config::{ExtractConfig, LabelConfig, RunConfig};
use cbm_tools::dataset::{read_names, write_names, Dataset, DatasetManifest};
use cbm_tools::dictionary::load_dictionary;
use cbm_tools::emb::{load_embeddings, read_matrix, write_f64};
use cbm_tools::fixture::{make_fixture, FixtureOptions};
use cbm_tools::labeler::endpoint::ChatEndpointConfig;
use cbm_tools::labeler::{filter_candidates, CandidateFile, Labeler, DEFAULT_SCORE_THRESHOLD, DEFAULT_TOP_K};
use cbm_tools::pipeline::{
    decompose_parallel, extract_atoms, label_with, load_prompts, probing_rows, restrict_pool,
    run_pipeline, RunOptions,
};
use cbm_tools::report::{
    ablation_csv, association_csv, codes_text, explanations_text, load_bank, load_head,
    residual_csv, save_head, SelectionFile, TrainingMeta,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cbm", version, about = "Concept bottlenecks over frozen joint embeddings")]
struct Cli {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for decomposition (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PoolArgs {
    /// Concept text embeddings.
    #[arg(long)]
    pool: PathBuf,
    /// Concept names, one per pool row.
    #[arg(long)]
    names: PathBuf,
}

#[derive(Args)]
struct BankArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(long)]
    selection: PathBuf,
}

impl BankArgs {
    fn load(&self) -> Result<ConceptBank> {
        let pool = load_bank(&self.pool.pool, &self.pool.names)?;
        Ok(SelectionFile::read(&self.selection)?.bank(&pool)?)
    }
}

#[derive(Args)]
struct EndpointArgs {
    /// Chat endpoint URL.
    #[arg(long, conflicts_with = "mock_transcript")]
    endpoint: Option<String>,
    /// Replay responses from a recorded transcript instead.
    #[arg(long)]
    mock_transcript: Option<PathBuf>,
    #[arg(long, default_value = "vlm")]
    model: String,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
    score_threshold: u8,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an embedding file or dataset manifest.
    ExportCheck {
        path: PathBuf,
    },
    /// Learn a sparse dictionary over probing image embeddings.
    ExtractAtoms {
        /// Image embeddings or dataset manifest.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 2000)]
        probing: usize,
        #[arg(long)]
        atoms: Option<usize>,
        #[arg(long, default_value_t = SaeConfig::default().l1_penalty)]
        l1: f64,
        #[arg(long, default_value_t = SaeConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = SaeConfig::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = SaeConfig::default().batch_size)]
        batch: usize,
    },
    /// Name dictionary atoms through a chat endpoint.
    LabelConcepts {
        #[arg(long)]
        dictionary: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Image files, one per embedding row.
        #[arg(long)]
        image_list: PathBuf,
        #[arg(long, default_value_t = 2000)]
        probing: usize,
        #[arg(long)]
        task: String,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Greedy reconstruction-guided concept selection.
    Select {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 2000)]
        probing: usize,
        #[command(flatten)]
        pool: PoolArgs,
        /// Restrict the pool to concepts kept by the labeler.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
        score_threshold: u8,
        #[arg(short, long, default_value_t = cbm_core::select::DEFAULT_BOTTLENECK)]
        m: usize,
    },
    /// Sparse decomposition of image embeddings over the selected concepts.
    Decompose {
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        bank: BankArgs,
        #[arg(short, long, default_value_t = cbm_core::decompose::DEFAULT_SPARSITY)]
        n: usize,
    },
    /// Train a linear head on reconstructed embeddings.
    TrainHead {
        /// Training manifest.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        bank: BankArgs,
        #[arg(long, default_value = "zeroshot-prompt")]
        init: String,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(short, long, default_value_t = cbm_core::decompose::DEFAULT_SPARSITY)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 5e-5)]
        lr: f64,
    },
    /// Zero-shot head from class prompt embeddings.
    Zeroshot {
        #[arg(long)]
        prompts: PathBuf,
        /// Class names, one per prompt row.
        #[arg(long)]
        classes: PathBuf,
    },
    /// Predict classes; with a bank, predicts from reconstructions.
    Predict {
        #[arg(long)]
        head: PathBuf,
        /// Image embeddings or dataset manifest (reports accuracy).
        #[arg(long)]
        images: PathBuf,
        #[arg(long, requires = "selection")]
        pool: Option<PathBuf>,
        #[arg(long, requires = "selection")]
        names: Option<PathBuf>,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(short, long, default_value_t = cbm_core::decompose::DEFAULT_SPARSITY)]
        n: usize,
    },
    /// Concept-level explanations of head predictions.
    Explain {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        bank: BankArgs,
        #[arg(short, long, default_value_t = cbm_core::decompose::DEFAULT_SPARSITY)]
        n: usize,
        #[arg(long, default_value_t = cbm_core::explain::DEFAULT_TOP_CONCEPTS)]
        top: usize,
    },
    /// Bottleneck-size and association sweeps for the run configuration.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "greedy,random,kmeans")]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Full pipeline from the run configuration.
    Run,
    /// Write a synthetic fixture with a recorded labeling transcript.
    MakeFixture,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Embeddings from an `.emb` file, or the dataset behind a manifest.
fn load_images(path: &Path) -> Result<(Matrix, Option<Dataset>)> {
    if path.extension().is_some_and(|e| e == "toml") {
        let ds = DatasetManifest::read(path)?.load()?;
        Ok((ds.x.clone(), Some(ds)))
    } else {
        Ok((load_embeddings(path)?, None))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!("--config is required for this command");
    };
    let mut cfg = RunConfig::read(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out_dir.clone();
    let tag = format!("cli seed={seed}");
    match &cli.command {
        Command::Run => {
            let cfg = run_config(&cli)?;
            let m = run_pipeline(
                &cfg,
                &RunOptions {
                    out_dir: out,
                    threads: cli.threads,
                },
            )?;
            print!("{}", toml::to_string(&m)?);
        }
        Command::MakeFixture => {
            let fx = make_fixture(&out, &FixtureOptions::default())?;
            println!("fixture written to {}", fx.dir.display());
            println!("run: {}", fx.run.display());
            println!("labeled run: {}", fx.labeled_run.display());
        }
        Command::ExportCheck { path } => {
            if path.extension().is_some_and(|e| e == "toml") {
                let ds = DatasetManifest::read(path)?.load()?;
                println!(
                    "{}: {} rows, dim {}, {} classes",
                    path.display(),
                    ds.x.rows(),
                    ds.x.cols(),
                    ds.classes.len()
                );
            } else {
                let m = read_matrix(path)?;
                m.check_nonzero_rows()?;
                let norms: Vec<f64> = (0..m.rows()).map(|r| m.row_norm(r)).collect();
                let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = norms.iter().cloned().fold(0.0, f64::max);
                println!(
                    "{}: {} rows, dim {}, row norms in [{min:.6}, {max:.6}]",
                    path.display(),
                    m.rows(),
                    m.dim()
                );
            }
        }
        Command::ExtractAtoms {
            images,
            probing,
            atoms,
            l1,
            epochs,
            lr,
            batch,
        } => {
            let (x, _) = load_images(images)?;
            let ex = ExtractConfig {
                atoms: *atoms,
                l1_penalty: *l1,
                epochs: *epochs,
                learning_rate: *lr,
                batch_size: *batch,
            };
            let dict = extract_atoms(&probing_rows(&x, *probing), &ex, seed, Some(&out))?;
            println!("{} atoms written to {}", dict.atoms(), out.display());
        }
        Command::LabelConcepts {
            dictionary,
            images,
            image_list,
            probing,
            task,
            endpoint,
        } => {
            let dict = load_dictionary(dictionary)?;
            let (x, _) = load_images(images)?;
            let mut ep = ChatEndpointConfig::mock(PathBuf::new(), &endpoint.model);
            ep.base_url = endpoint.endpoint.clone();
            ep.mock_transcript = endpoint.mock_transcript.clone();
            ep.max_in_flight = endpoint.max_in_flight;
            let lc = LabelConfig {
                endpoint: ep,
                images: image_list.clone(),
                task: task.clone(),
                top_k: endpoint.top_k,
                score_threshold: endpoint.score_threshold,
                cache_dir: endpoint.cache_dir.clone(),
            };
            let labeler = Labeler::new(&lc.endpoint, lc.cache_dir.as_deref())?;
            let outcome = label_with(&labeler, &dict, &probing_rows(&x, *probing), &lc)?;
            fs::create_dir_all(&out)?;
            CandidateFile {
                concepts: outcome.scored.clone(),
                warnings: outcome.warnings.clone(),
            }
            .write(&out.join("candidates.toml"))?;
            let kept: Vec<String> = outcome.kept.iter().map(|c| c.name.clone()).collect();
            write_names(&kept, &out.join("concepts.txt"))?;
            println!(
                "{} candidates, {} kept, {} warnings, {} requests",
                outcome.scored.len(),
                kept.len(),
                outcome.warnings.len(),
                labeler.request_count()
            );
        }
        Command::Select {
            images,
            probing,
            pool,
            candidates,
            score_threshold,
            m,
        } => {
            let (x, _) = load_images(images)?;
            let mut bank = load_bank(&pool.pool, &pool.names)?;
            if let Some(c) = candidates {
                let file = CandidateFile::read(c)?;
                let kept: Vec<String> = filter_candidates(&file.concepts, *score_threshold)
                    .into_iter()
                    .map(|c| c.name)
                    .collect();
                bank = restrict_pool(&bank, &kept)?.0;
            }
            let x = probing_rows(&x, *probing);
            let report = select_concepts(&x, &bank, *m, cbm_core::select::DEFAULT_DEPENDENCE_TOL)?;
            fs::create_dir_all(&out)?;
            SelectionFile::new(&report, &bank, &tag).write(&out.join("selection.toml"))?;
            write(&out.join("residual.csv"), &residual_csv(&report, &tag))?;
            println!(
                "selected {} ({}), pruned {}, residual {:.6} of {:.6}",
                report.selected.len(),
                report.stop,
                report.pruned.len(),
                report.final_residual(),
                report.initial_residual
            );
        }
        Command::Decompose { images, bank, n } => {
            let (x, _) = load_images(images)?;
            let bank = bank.load()?;
            let omp = cbm_core::OmpConfig::with_sparsity(*n);
            let (codes, recon) = decompose_parallel(&x, &bank, &omp, cli.threads)?;
            fs::create_dir_all(&out)?;
            write(&out.join("codes.txt"), &codes_text(&codes, &tag))?;
            write_f64(&recon, &out.join("reconstructed.emb"), "reconstructed")?;
            println!("{} images decomposed over {} concepts", codes.len(), bank.len());
        }
        Command::TrainHead {
            data,
            bank,
            init,
            prompts,
            n,
            epochs,
            batch,
            lr,
        } => {
            let ds = DatasetManifest::read(data)?.load()?;
            let bank = bank.load()?;
            let omp = cbm_core::OmpConfig::with_sparsity(*n);
            let (_, recon) = decompose_parallel(&ds.x, &bank, &omp, cli.threads)?;
            let start = match InitMode::parse(init) {
                Some(InitMode::ZeroshotPrompt) => {
                    let Some(p) = prompts else {
                        bail!("--init zeroshot-prompt needs --prompts");
                    };
                    LinearHead::init_zeroshot(&load_prompts(p, ds.classes.len())?, ds.classes.clone())?
                }
                Some(InitMode::Zeros) => LinearHead::zeros(ds.x.cols(), ds.classes.clone())?,
                None => bail!("unknown --init {init:?}"),
            };
            let tc = cbm_core::TrainConfig {
                epochs: *epochs,
                batch_size: *batch,
                learning_rate: *lr,
                seed,
                ..Default::default()
            };
            let (head, trace) = train(&start, &recon, &ds.labels, &tc)?;
            fs::create_dir_all(&out)?;
            let meta = TrainingMeta {
                epochs: tc.epochs,
                batch_size: tc.batch_size,
                learning_rate: tc.learning_rate,
                weight_decay: tc.weight_decay,
                seed,
                loss_trace: trace,
            };
            save_head(&head, Some(meta), &out, "head", &tag)?;
            println!("train accuracy {:.4}", head.accuracy(&recon, &ds.labels)?);
        }
        Command::Zeroshot { prompts, classes } => {
            let names = read_names(classes)?;
            let head = LinearHead::init_zeroshot(&load_prompts(prompts, names.len())?, names)?;
            fs::create_dir_all(&out)?;
            save_head(&head, None, &out, "head", &tag)?;
            println!("zero-shot head over {} classes", head.num_classes());
        }
        Command::Predict {
            head,
            images,
            pool,
            names,
            selection,
            n,
        } => {
            let head = load_head(head)?;
            let (mut x, ds) = load_images(images)?;
            if let (Some(pool), Some(names), Some(selection)) = (pool, names, selection) {
                let bank = BankArgs {
                    pool: PoolArgs {
                        pool: pool.clone(),
                        names: names.clone(),
                    },
                    selection: selection.clone(),
                }
                .load()?;
                let omp = cbm_core::OmpConfig::with_sparsity(*n);
                x = decompose_parallel(&x, &bank, &omp, cli.threads)?.1;
            }
            let pred = head.predict_rows(&x)?;
            for (i, p) in pred.iter().enumerate() {
                println!("{i}\t{}", head.class_names()[*p]);
            }
            if let Some(ds) = ds {
                eprintln!("accuracy {:.4}", head.accuracy(&x, &ds.labels)?);
            }
        }
        Command::Explain {
            head,
            images,
            bank,
            n,
            top,
        } => {
            let head = load_head(head)?;
            let (x, _) = load_images(images)?;
            let bank = bank.load()?;
            let omp = cbm_core::OmpConfig::with_sparsity(*n);
            let (codes, _) = decompose_parallel(&x, &bank, &omp, cli.threads)?;
            let es = codes
                .iter()
                .enumerate()
                .map(|(i, c)| explain(&head, &bank, i, c, *top))
                .collect::<cbm_core::Result<Vec<_>>>()?;
            fs::create_dir_all(&out)?;
            write(&out.join("explanations.txt"), &explanations_text(&es, &tag))?;
            println!("{} explanations written", es.len());
        }
        Command::Ablate {
            grid,
            strategies,
            seeds,
        } => {
            let cfg = run_config(&cli)?;
            let hash = cfg.hash();
            let train_ds = DatasetManifest::read(&cfg.data.train)?.load()?;
            let Some(test) = &cfg.data.test else {
                bail!("ablation needs data.test");
            };
            let test_ds = DatasetManifest::read(test)?.load()?;
            let pool = load_bank(&cfg.pool.embeddings, &cfg.pool.names)?;
            let x = probing_rows(&train_ds.x, cfg.data.probing);
            let data = Downstream {
                train_x: &train_ds.x,
                train_y: &train_ds.labels,
                test_x: &test_ds.x,
                test_y: &test_ds.labels,
                class_names: &train_ds.classes,
            };
            let setup = HeadSetup {
                omp: cfg.decompose.omp(),
                train: cfg.head.train_config(cfg.seed),
            };
            let mut points = Vec::new();
            for s in strategies {
                let Some(strategy) = Strategy::parse(s) else {
                    bail!("unknown strategy {s:?}");
                };
                // The greedy rule is deterministic; one pass suffices.
                let runs = if strategy == Strategy::Greedy { 1 } else { *seeds };
                for k in 0..runs {
                    points.extend(ablate_selection(&x, &pool, grid, strategy, cfg.seed + k, &data, &setup)?);
                }
            }
            fs::create_dir_all(&out)?;
            write(&out.join("ablation.csv"), &ablation_csv(&points, &hash))?;
            let report = select_concepts(&x, &pool, cfg.select.m, cfg.select.dependence_tol)?;
            let bank = pool.subset(&report.selected)?;
            let assoc = ablate_association(&bank, &data, &setup)?;
            write(&out.join("association.csv"), &association_csv(&assoc, &hash))?;
            print!("{}", ablation_csv(&points, &hash));
            print!("{}", association_csv(&assoc, &hash));
        }
    }
    Ok(())
}
