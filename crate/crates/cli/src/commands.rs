//! Subcommands. Each one reads the run configuration, applies its flag
//! overrides and works inside the checkpoint directory.

use std::path::{Path, PathBuf};

use capret_core::captioning::{evaluate_corpus, generate_caption, CorpusScore};
use capret_core::config::RunConfig;
use capret_core::data::{generate_synthetic_dataset, load_and_preprocess_image, load_manifest, DatasetManifest, Split};
use capret_core::model::{load_backbones, load_vocab, CapRetModel, ModelDir};
use capret_core::pipeline::{
    append_metrics, finetune_encoders, init_model, pretrain_decoder, save_frozen_parts, train_bridge_stage,
};
use capret_core::retrieval::{build_index, embed_query, evaluate_split, search, RecallTable, RetrievalIndex};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::{round_score, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "capret",
    version,
    about = "Captioning and text-to-image retrieval over a frozen decoder"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `paths.checkpoint_dir` (and the environment variable).
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Overrides `paths.manifest`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic captioned dataset.
    Synthgen {
        #[arg(short = 'n', long, default_value_t = 32)]
        n_images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Initialize the model and pretrain the decoder on training captions.
    PretrainLm {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Contrastive fine-tuning of the vision encoder.
    TrainClip {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the bridge with the joint captioning and retrieval loss.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Text-to-image recall on a split.
    EvalRetrieval {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        json: bool,
    },
    /// Caption a split and score against its references.
    EvalCaption {
        #[arg(long, default_value = "test")]
        split: Split,
        /// Per-image JSON-lines log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Build the retrieval index over a split.
    Index {
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Rank indexed images for a text query.
    Retrieve {
        #[arg(short = 'q', long)]
        query: String,
        #[arg(short = 'k', long)]
        k: Option<usize>,
    },
    /// Caption one image file.
    Caption {
        #[arg(short = 'i', long)]
        image: PathBuf,
    },
    /// Serve search and captioning over HTTP.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
}

/// One ranked image as printed by `retrieve` and returned by `/search`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub uri: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchHit>,
}

/// Top-`k` indexed images for `query`; shared by the CLI and the service.
pub fn search_text(model: &CapRetModel, index: &RetrievalIndex, query: &str, k: usize) -> CliResult<SearchResponse> {
    let q = embed_query(&model.backbones, &model.bridge, &model.vocab, query)?;
    let ranked = search(index, query, q.view(), k)?;
    let results = ranked
        .items
        .into_iter()
        .map(|item| SearchHit {
            uri: index.uri_of(&item.id).unwrap_or_default().to_string(),
            score: round_score(item.score),
            id: item.id,
        })
        .collect();
    Ok(SearchResponse { results })
}

pub fn load_config(global: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(dir) = &global.checkpoint_dir {
        cfg.paths.checkpoint_dir = dir.clone();
    }
    if let Some(m) = &global.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    Ok(cfg)
}

fn manifest(cfg: &RunConfig) -> CliResult<DatasetManifest> {
    let path = cfg
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.manifest: required by this command (or pass --manifest)".into()))?;
    Ok(load_manifest(path)?)
}

/// Loads the index of a model directory, or reports that none was built.
pub fn load_index(dir: &ModelDir) -> CliResult<RetrievalIndex> {
    if !dir.index().is_dir() {
        return Err(CliError::Runtime(format!(
            "index not found at {}; run `capret index` first",
            dir.index().display()
        )));
    }
    Ok(RetrievalIndex::load(&dir.index())?)
}

fn load_model(dir: &ModelDir) -> CliResult<CapRetModel> {
    if !dir.bridge_best().is_dir() {
        return Err(CliError::Runtime(format!(
            "no trained bridge in {}; run `capret train` first",
            dir.root().display()
        )));
    }
    Ok(CapRetModel::load(dir)?)
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn recall_text(split: Split, t: &RecallTable) -> String {
    format!(
        "{:<6} {:>7} {:>7} {:>7} {:>7}\n{:<6} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
        "split", "R@1", "R@5", "R@10", "mR", split, t.r1, t.r5, t.r10, t.mean
    )
}

fn caption_text(split: Split, s: &CorpusScore) -> String {
    format!(
        "{:<6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n{:<6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
        "split",
        "BLEU-1",
        "BLEU-2",
        "BLEU-3",
        "BLEU-4",
        "ROUGE-L",
        "CIDEr-D",
        split,
        s.bleu1,
        s.bleu2,
        s.bleu3,
        s.bleu4,
        s.rouge_l,
        s.cider_d
    )
}

/// Frozen parts of the model directory, initialized and saved on first use.
fn frozen_parts(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    dir: &ModelDir,
) -> CliResult<(
    capret_core::data::Vocabulary,
    capret_core::backbones::BackboneBundle<f32>,
)> {
    if dir.vocab().is_file() {
        return Ok((load_vocab(&dir.vocab())?, load_backbones(&dir.backbones())?));
    }
    tracing::warn!("no backbones in {}; initializing untrained ones", dir.root().display());
    let (vocab, backbones) = init_model(cfg, manifest)?;
    save_frozen_parts(dir, &vocab, &backbones)?;
    Ok((vocab, backbones))
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli.global)?;
    let dir = ModelDir::new(cfg.paths.checkpoint_dir.clone());
    match cli.command {
        Command::Synthgen { n_images, seed, out } => {
            let m = generate_synthetic_dataset(n_images, seed, &out)?;
            println!(
                "wrote {} images to {}",
                m.records.len(),
                out.join("manifest.json").display()
            );
        }
        Command::PretrainLm { steps } => {
            if let Some(s) = steps {
                cfg.lm.steps = s;
            }
            cfg.validate()?;
            let m = manifest(&cfg)?;
            let (vocab, mut backbones) = init_model(&cfg, &m)?;
            let curve = pretrain_decoder(&cfg, &m, &vocab, &mut backbones)?;
            save_frozen_parts(&dir, &vocab, &backbones)?;
            let summary =
                json!({"stage": "lm", "steps": curve.len(), "first_loss": curve.first(), "last_loss": curve.last()});
            append_metrics(&dir.metrics(), &summary)?;
            println!("{summary}");
        }
        Command::TrainClip { steps, lr } => {
            if let Some(s) = steps {
                cfg.stage1.steps = s;
            }
            if let Some(lr) = lr {
                cfg.stage1.lr = lr;
            }
            cfg.validate()?;
            let m = manifest(&cfg)?;
            let (vocab, mut backbones) = frozen_parts(&cfg, &m, &dir)?;
            let report = finetune_encoders(&cfg, &m, &vocab, &mut backbones)?;
            save_frozen_parts(&dir, &vocab, &backbones)?;
            append_metrics(&dir.metrics(), &json!({"stage": "encoders", "record": report}))?;
            let last = report.epochs.last().and_then(|e| e.val_t2i);
            println!(
                "val text-to-image R@1: {} -> {}",
                report.baseline_t2i.map_or("n/a".into(), |t| format!("{:.2}", t.r1)),
                last.map_or("n/a".into(), |t| format!("{:.2}", t.r1))
            );
        }
        Command::Train {
            steps,
            lr,
            batch_size,
            seed,
            resume,
        } => {
            if let Some(s) = steps {
                cfg.train.max_steps = s;
            }
            if let Some(lr) = lr {
                cfg.train.base_lr = lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let m = manifest(&cfg)?;
            let (vocab, backbones) = frozen_parts(&cfg, &m, &dir)?;
            let (_, report) = train_bridge_stage(&cfg, &m, &vocab, &backbones, Some(&dir), resume)?;
            match report.evals.last() {
                Some(e) => println!(
                    "{}",
                    serde_json::to_string(e).map_err(|e| CliError::Runtime(e.to_string()))?
                ),
                None => println!("no steps run"),
            }
        }
        Command::EvalRetrieval { split, json } => {
            cfg.validate()?;
            let m = manifest(&cfg)?;
            let model = load_model(&dir)?;
            let table = evaluate_split(&model.backbones, &model.bridge, &model.vocab, &m, split)?;
            if json {
                print_json(&json!({"split": split, "recall": table}))?;
            } else {
                println!("{}", recall_text(split, &table));
            }
        }
        Command::EvalCaption { split, log, json } => {
            cfg.validate()?;
            let m = manifest(&cfg)?;
            let model = load_model(&dir)?;
            let (score, _) = evaluate_corpus(
                &model.backbones,
                &model.bridge,
                &model.vocab,
                &m,
                split,
                &cfg.generation,
                log.as_deref(),
            )?;
            if json {
                print_json(&json!({"split": split, "score": score}))?;
            } else {
                println!("{}", caption_text(split, &score));
            }
        }
        Command::Index { split } => {
            cfg.validate()?;
            let m = manifest(&cfg)?;
            let model = load_model(&dir)?;
            let (index, skipped) = build_index(&model.backbones, &model.bridge, &m, split)?;
            index.save(&dir.index())?;
            println!(
                "indexed {} images ({} skipped) into {}",
                index.len(),
                skipped,
                dir.index().display()
            );
        }
        Command::Retrieve { query, k } => {
            cfg.validate()?;
            let k = k.unwrap_or(cfg.serve.default_k);
            if k == 0 {
                return Err(CliError::Config("k: must be at least 1".into()));
            }
            let index = load_index(&dir)?;
            let model = load_model(&dir)?;
            print_json(&search_text(&model, &index, &query, k)?)?;
        }
        Command::Caption { image } => {
            cfg.validate()?;
            let model = load_model(&dir)?;
            println!("{}", caption_file(&model, &cfg, &image)?);
        }
        Command::Serve { addr } => {
            if let Some(a) = addr {
                cfg.serve.addr = a;
            }
            cfg.validate()?;
            crate::service::serve_blocking(cfg, &dir)?;
        }
    }
    Ok(())
}

pub fn caption_file(model: &CapRetModel, cfg: &RunConfig, path: &Path) -> CliResult<String> {
    let image = load_and_preprocess_image(path)?;
    let g = generate_caption(&model.backbones, &model.bridge, &model.vocab, &image, &cfg.generation)?;
    Ok(g.text)
}
