//! `vte`: train, evaluate and apply the visual taxonomy expansion model.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, files or
//! configuration), 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use thiserror::Error;

use vte_core::config::TrainConfig;
use vte_core::embeddings::{load_embeddings, EmbeddingTable, Modality};
use vte_core::inference::{
    evaluate, expand, load_candidates, parse_predictions, predictions_to_jsonl, score_all, ModelScorer,
};
use vte_core::model::Model;
use vte_core::synth::{generate, SynthConfig};
use vte_core::taxonomy::Taxonomy;
use vte_core::training::{grad_check, grad_check_setup, image_key_for, positives_from_taxonomy, train, TrainData, TrainingPair};

/// Largest relative gradient error `grad-check` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "vte", version, about = "Multimodal taxonomy expansion")]
struct Cli {
    /// `key = value` configuration file applied over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Per-key override, applied last; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; takes precedence over the config file and `VTE_SEED`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch loss log.
    Train {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Positive pairs as candidate TSV; defaults to every taxonomy edge.
        #[arg(long)]
        positives: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log as JSON lines; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score labeled candidates with a model, or score existing predictions.
    Eval {
        #[arg(long, requires_all = ["text", "candidates"], conflicts_with = "predictions")]
        model: Option<PathBuf>,
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Prediction JSON lines with gold labels, evaluated as they are.
        #[arg(long, required_unless_present = "model")]
        predictions: Option<PathBuf>,
        /// Metrics JSON; printed to standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        predictions_out: Option<PathBuf>,
    },
    /// Attach candidate edges to a taxonomy level by level.
    Expand {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        candidates: PathBuf,
        /// Expanded taxonomy as edge TSV.
        #[arg(long)]
        edges_out: PathBuf,
        #[arg(long)]
        predictions_out: PathBuf,
    },
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a random batch.
    GradCheck,
    /// Write prototype membership of every image as JSON lines.
    ProtoDump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Printed to standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] vte_core::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Invalid(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("VTE_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Invalid(format!("VTE_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// Layers, lowest precedence first: `base`, `VTE_SEED`, the config file,
/// `--seed`, then `--set` overrides.
fn resolve_train(cli: &Cli, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(p) = &cli.config {
        cfg.apply_text(&read_text(p)?).map_err(|e| e.with_source_path(p))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_synth(cli: &Cli) -> Result<SynthConfig> {
    let mut cfg = SynthConfig::default();
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(p) = &cli.config {
        cfg.apply_text(&read_text(p)?).map_err(|e| e.with_source_path(p))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("override {o:?} is not key=value")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

trait SourcePath {
    fn with_source_path(self, path: &Path) -> CliError;
}

impl SourcePath for vte_core::Error {
    fn with_source_path(self, path: &Path) -> CliError {
        match self {
            vte_core::Error::Parse { line, message, .. } => {
                CliError::Invalid(format!("{}: line {line}: {message}", path.display()))
            }
            other => other.into(),
        }
    }
}

fn print_resolved(title: &str, text: &str) {
    println!("# resolved {title}");
    print!("{text}");
}

fn load_table(text: &Path, images: Option<&Path>) -> Result<EmbeddingTable> {
    let mut table = load_embeddings(text, Modality::Text)?.table;
    if let Some(p) = images {
        table.merge(load_embeddings(p, Modality::Image)?.table)?;
    }
    Ok(table)
}

fn load_model(path: &Path, cli: &Cli) -> Result<Model> {
    let mut model = Model::load(path)?;
    let cfg = resolve_train(cli, model.config.clone())?;
    let shape = |c: &TrainConfig| (c.k, c.d, c.d_z, c.detector_hidden);
    if shape(&cfg) != shape(&model.config) {
        return Err(CliError::Invalid(format!(
            "overrides change the shape of checkpoint {}",
            path.display()
        )));
    }
    model.config = cfg;
    print_resolved("config", &model.config.to_text());
    Ok(model)
}

impl Command {
    /// Files the subcommand reads.
    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<Option<&Path>> = Vec::new();
        match self {
            Command::Train {
                taxonomy,
                text,
                images,
                positives,
                ..
            } => v.extend([Some(taxonomy.as_path()), Some(text.as_path()), images.as_deref(), positives.as_deref()]),
            Command::Eval {
                model,
                text,
                images,
                candidates,
                predictions,
                ..
            } => v.extend([model, text, images, candidates, predictions].map(|p| p.as_deref())),
            Command::Expand {
                model,
                taxonomy,
                text,
                images,
                candidates,
                ..
            } => v.extend([
                Some(model.as_path()),
                Some(taxonomy.as_path()),
                Some(text.as_path()),
                images.as_deref(),
                Some(candidates.as_path()),
            ]),
            Command::ProtoDump { model, images, .. } => v.extend([Some(model.as_path()), Some(images.as_path())]),
            Command::Synth { .. } | Command::GradCheck => {}
        }
        v.into_iter().flatten().collect()
    }
}

fn run(cli: &Cli) -> Result<()> {
    let inputs = cli.command.inputs();
    if let Some(missing) = inputs.iter().chain(cli.config.as_deref().iter()).find(|p| !p.is_file()) {
        return Err(CliError::Invalid(format!("{}: no such file", missing.display())));
    }
    match &cli.command {
        Command::Train {
            taxonomy,
            text,
            images,
            positives,
            out,
            log,
        } => {
            let cfg = resolve_train(cli, TrainConfig::default())?;
            print_resolved("config", &cfg.to_text());
            let tax = Taxonomy::load_edges(taxonomy)?;
            let emb = load_table(text, images.as_deref())?;
            let pairs: Vec<TrainingPair> = match positives {
                Some(p) => load_candidates(p)?
                    .into_iter()
                    .filter(|c| c.label != Some(0))
                    .map(|c| {
                        let key = c.image.clone().or_else(|| image_key_for(&emb, &c.hypo));
                        TrainingPair::positive(&c.hyper, &c.hypo, key.as_deref())
                    })
                    .collect(),
                None => positives_from_taxonomy(&tax, &emb),
            };
            let pool: Vec<String> = emb.text_entries().map(|(k, _)| k.to_string()).collect();
            let data = TrainData {
                taxonomy: &tax,
                embeddings: &emb,
                positives: &pairs,
                random_pool: &pool,
            };
            let (model, epochs) = train(&cfg, &data)?;
            model.save(out)?;
            let log_path = log.clone().unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".log.jsonl");
                PathBuf::from(s)
            });
            let mut lines = String::new();
            for e in &epochs {
                lines.push_str(&serde_json::to_string(e).map_err(|e| CliError::Failed(e.to_string()))?);
                lines.push('\n');
            }
            write_text(&log_path, &lines)?;
            info!("wrote {} and {}", out.display(), log_path.display());
            Ok(())
        }
        Command::Eval {
            model,
            text,
            images,
            candidates,
            predictions,
            out,
            predictions_out,
        } => {
            let preds = match (model, predictions) {
                (Some(m), _) => {
                    let model = load_model(m, cli)?;
                    let text = text.as_deref().expect("required by clap");
                    let emb = load_table(text, images.as_deref())?;
                    let cands = load_candidates(candidates.as_deref().expect("required by clap"))?;
                    let scorer = ModelScorer {
                        model: &model,
                        embeddings: &emb,
                    };
                    score_all(&scorer, &cands, model.config.threshold)?
                }
                (None, Some(p)) => {
                    let cfg = resolve_train(cli, TrainConfig::default())?;
                    print_resolved("config", &cfg.to_text());
                    parse_predictions(&read_text(p)?).map_err(|e| e.with_source_path(p))?
                }
                (None, None) => unreachable!("required by clap"),
            };
            if let Some(p) = predictions_out {
                write_text(p, &predictions_to_jsonl(&preds))?;
            }
            let json = evaluate(&preds)?.to_json();
            match out {
                Some(p) => write_text(p, &json),
                None => {
                    print!("{json}");
                    Ok(())
                }
            }
        }
        Command::Expand {
            model,
            taxonomy,
            text,
            images,
            candidates,
            edges_out,
            predictions_out,
        } => {
            let model = load_model(model, cli)?;
            let tax = Taxonomy::load_edges(taxonomy)?;
            let emb = load_table(text, images.as_deref())?;
            let cands = load_candidates(candidates)?;
            let scorer = ModelScorer {
                model: &model,
                embeddings: &emb,
            };
            let result = expand(&scorer, &tax, &cands, model.config.threshold);
            info!("accepted {} of {} candidates", result.accepted.len(), cands.len());
            write_text(edges_out, &result.taxonomy.to_tsv())?;
            write_text(predictions_out, &predictions_to_jsonl(&result.predictions))
        }
        Command::Synth { out } => {
            let cfg = resolve_synth(cli)?;
            print_resolved("synth config", &cfg.to_text());
            generate(&cfg)?.write(out)?;
            Ok(())
        }
        Command::GradCheck => {
            let cfg = resolve_train(cli, TrainConfig::default())?;
            print_resolved("config", &cfg.to_text());
            let (model, batch) = grad_check_setup(cfg.seed, cfg.detector_hidden)?;
            let entries = grad_check(&model, &batch, 1e-5)?;
            let mut worst: f64 = 0.0;
            for e in &entries {
                println!("{}\t{:.3e}", e.tensor, e.max_rel_err);
                worst = worst.max(e.max_rel_err);
            }
            println!("max\t{worst:.3e}");
            if worst < GRAD_TOLERANCE {
                Ok(())
            } else {
                Err(CliError::Failed(format!(
                    "max relative error {worst:.3e} exceeds {GRAD_TOLERANCE:e}"
                )))
            }
        }
        Command::ProtoDump { model, images, out } => {
            let model = load_model(model, cli)?;
            let table = load_embeddings(images, Modality::Image)?.table;
            let mut encoded = Vec::with_capacity(table.image_len());
            for (key, img) in table.image_entries() {
                encoded.push((key, model.heads.encode_image(img)?));
            }
            let clusters = model
                .prototypes
                .dump_clusters(encoded.iter().map(|(k, v)| (*k, v.as_slice())))?;
            let mut lines = String::new();
            for (proto, members) in &clusters {
                let rec = serde_json::json!({ "prototype": proto, "size": members.len(), "members": members });
                lines.push_str(&rec.to_string());
                lines.push('\n');
            }
            match out {
                Some(p) => write_text(p, &lines),
                None => {
                    print!("{lines}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
