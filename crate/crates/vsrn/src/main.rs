//! Command-line harness: corpus generation, training, retrieval
//! evaluation (with optional ensembling and fold averaging), and
//! attention-map export.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vsrn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vsrn::config::TrainConfig;
use vsrn::corpus::{generate_synthetic_corpus, load_corpus, save_corpus, CorpusSpec, Split};
use vsrn::error::Error;
use vsrn::eval::{format_report, write_report};
use vsrn::model::image_attention_values;
use vsrn::train::{evaluate_models, train};
use vsrn::viz::{region_rank_scores, render_heatmap, write_graymap};

#[derive(Parser)]
#[command(
    name = "vsrn",
    about = "Visual semantic reasoning for image-text matching at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic region/caption corpus.
    GenData {
        /// Output corpus path; a .vocab sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Items in the train split.
        #[arg(long, default_value_t = 64)]
        train: usize,
        /// Items in the validation split.
        #[arg(long, default_value_t = 16)]
        val: usize,
        /// Items in the test split.
        #[arg(long, default_value_t = 16)]
        test: usize,
        /// Number of distinct concepts.
        #[arg(long, default_value_t = 12)]
        concepts: usize,
        /// Concepts sampled per item.
        #[arg(long, default_value_t = 3)]
        concepts_per_item: usize,
        /// Regions per image.
        #[arg(long, default_value_t = 6)]
        regions: usize,
        /// Raw region feature dimension.
        #[arg(long, default_value_t = 64)]
        feature_dim: usize,
        #[arg(long, default_value_t = 64)]
        canvas_width: u32,
        #[arg(long, default_value_t = 64)]
        canvas_height: u32,
    },
    /// Train a model and keep the best-validation snapshot.
    Train {
        /// Config file (key = value lines); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional copy of the per-epoch log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate checkpoints; several checkpoints are ensembled by averaging
    /// their similarity scores.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path; repeat to ensemble.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
        /// Corpus split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Contiguous equal-size folds to average over.
        #[arg(long, default_value_t = 1)]
        folds: usize,
    },
    /// Render the attention map of one corpus item as a binary graymap.
    Attend {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Item index into the whole corpus (train, then val, then test).
        #[arg(long)]
        item: usize,
        /// Output path for the P5 graymap.
        #[arg(long)]
        out: PathBuf,
        /// Rank-score emphasis factor.
        #[arg(long, default_value_t = 50.0)]
        lambda: f64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> vsrn::Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            train,
            val,
            test,
            concepts,
            concepts_per_item,
            regions,
            feature_dim,
            canvas_width,
            canvas_height,
        } => {
            let spec = CorpusSpec {
                n_train: train,
                n_val: val,
                n_test: test,
                n_concepts: concepts,
                concepts_per_item,
                k_regions: regions,
                feature_dim,
                canvas_width,
                canvas_height,
                seed,
            };
            let corpus = generate_synthetic_corpus(&spec)?;
            save_corpus(&corpus, &out)?;
            println!(
                "wrote {} items ({} train / {} val / {} test), vocabulary of {}, to {}",
                corpus.items.len(),
                corpus.n_train,
                corpus.n_val,
                corpus.n_test,
                corpus.vocab.size(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            corpus,
            out,
            log,
            seed,
        } => {
            let mut train_config = match config {
                Some(path) => TrainConfig::parse(&fs::read_to_string(path)?)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = seed {
                train_config.seed = seed;
            }
            let corpus = load_corpus(&corpus)?;
            let outcome = train(&train_config, &corpus)?;
            let mut log_text = String::new();
            for entry in &outcome.log {
                let line = entry.format_line();
                println!("{line}");
                log_text.push_str(&line);
                log_text.push('\n');
            }
            if let Some(log_path) = log {
                fs::write(log_path, log_text)?;
            }
            save_checkpoint(&outcome.best, &out)?;
            println!(
                "best epoch {} with val_rsum {:.4}; checkpoint written to {}",
                outcome.best.epoch,
                outcome.best.val_rsum,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            corpus,
            checkpoint,
            out,
            split,
            folds,
        } => {
            let corpus = load_corpus(&corpus)?;
            let split: Split = split.parse()?;
            let checkpoints: Vec<Checkpoint> = checkpoint
                .iter()
                .map(|path| load_checkpoint(path))
                .collect::<vsrn::Result<_>>()?;
            let models: Vec<_> = checkpoints
                .iter()
                .map(|c| c.to_model().map(|m| (m, c.config.clone())))
                .collect::<vsrn::Result<_>>()?;
            let model_refs: Vec<(&vsrn::model::ModelParams, &TrainConfig)> =
                models.iter().map(|(m, c)| (m, c)).collect();
            let report = evaluate_models(&model_refs, corpus.split_items(split), folds)?;
            write_report(&report, &out)?;
            print!("{}", format_report(&report));
            Ok(())
        }
        Command::Attend {
            corpus,
            checkpoint,
            item,
            out,
            lambda,
        } => {
            let corpus = load_corpus(&corpus)?;
            let checkpoint = load_checkpoint(&checkpoint)?;
            let model = checkpoint.to_model()?;
            let corpus_item = corpus.items.get(item).ok_or_else(|| {
                Error::Parameter(format!(
                    "item {item} out of range for corpus of {}",
                    corpus.items.len()
                ))
            })?;
            let regions = &corpus_item.regions;
            let (v_star, repr) =
                image_attention_values(&model, &checkpoint.config, regions, item)?;
            let scores = region_rank_scores(
                &v_star,
                regions.k(),
                checkpoint.config.joint_dim,
                &repr,
                lambda,
            )?;
            let map = render_heatmap(
                regions.boxes(),
                &scores,
                corpus.canvas_width as usize,
                corpus.canvas_height as usize,
            )?;
            write_graymap(&map, &out)?;
            println!(
                "wrote {}x{} attention map for item {item} to {}",
                corpus.canvas_width,
                corpus.canvas_height,
                out.display()
            );
            Ok(())
        }
    }
}
