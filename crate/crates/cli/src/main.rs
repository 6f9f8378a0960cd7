//! `nearmiss`: data generation, extraction, encoding, training, evaluation and
//! ablation for the semantic-flow near-miss classifier.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nearmiss_core::classifier::Task;
use nearmiss_core::clipio::Split;
use nearmiss_core::pipeline::{
    ablation_extract_config, ablation_matrix, block_keys, derive_seed, encode_clips,
    evaluate_classifier, fit_encoder, load_manifest, read_encodings, run_ablation, run_extract,
    separated_config, store_loader, train_classifier, write_encodings, Encoder, EncoderSpec,
    EvalReport, PipelineConfig,
};
use nearmiss_core::semanticflow::ChannelMode;
use nearmiss_core::synthscenes::{generate_dataset, DatasetConfig};
use nearmiss_core::{Classifier, Error};

const EXIT_VALIDATION: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "nearmiss", version, about = "Semantic-flow near-miss video classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["recognition", "detection"])]
    task: Option<String>,
    #[arg(long, value_parser = ["combined", "separated", "off"])]
    channels: Option<String>,
    /// Adds IDT (HoG/HoF/MBH) descriptors.
    #[arg(long)]
    with_idt: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (frames, masks, manifest).
    GenData {
        /// Dataset preset TOML; overrides --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract pooled descriptors for every clip into a store.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Descriptor store directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit PCA and codebooks on the training split.
    Codebook {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: PathBuf,
        /// Encoder directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every clip into a VLAD vector (JSON lines).
    Encode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the one-vs-rest classifier on the training split.
    Train {
        #[arg(long)]
        encodings: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Model file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on the test split.
    Eval {
        #[arg(long)]
        encodings: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Report directory (report.txt, summary.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the six-configuration ablation plus the separated-channel row.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Reuse an existing ablation store instead of `<out>/store`.
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

/// Failure that still produced usable output.
#[derive(Debug)]
struct Partial(String);

impl std::fmt::Display for Partial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Partial {}

fn resolve_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = &common.task {
        cfg.task = t.parse::<Task>()?;
    }
    if let Some(c) = &common.channels {
        cfg.extract.channels = c.parse::<ChannelMode>()?;
    }
    if common.with_idt {
        cfg.extract.use_idt = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            config,
            preset,
            seed,
            out,
        } => {
            let mut dc = match config {
                Some(p) => DatasetConfig::from_toml(
                    &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => DatasetConfig::preset(&preset)?,
            };
            if let Some(s) = seed {
                dc.seed = s;
            }
            let records = generate_dataset(&dc, &out)?;
            println!("generated {} clips in {}", records.len(), out.display());
        }
        Command::Extract {
            manifest,
            common,
            out,
        } => {
            let cfg = resolve_config(&common)?;
            let records = load_manifest(&manifest)?;
            let report = run_extract(&records, &cfg.extract, &out, cfg.max_failure_fraction)?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            println!(
                "extracted {} clips ({} cached, {} empty, {} failed)",
                report.extracted,
                report.cached,
                report.empty.len(),
                report.failed.len()
            );
            if !report.failed.is_empty() {
                return Err(Partial(format!("{} clips failed extraction", report.failed.len())).into());
            }
        }
        Command::Codebook {
            manifest,
            common,
            store,
            out,
        } => {
            let cfg = resolve_config(&common)?;
            let records = load_manifest(&manifest)?;
            let train: Vec<_> = records
                .into_iter()
                .filter(|r| r.split == Split::Train)
                .collect();
            let spec = EncoderSpec {
                keys: block_keys(cfg.extract.channels, &cfg.extract.layers, cfg.extract.use_idt),
                encode: cfg.encode.clone(),
                seed: derive_seed(cfg.seed, "encoder"),
            };
            let encoder = fit_encoder(&train, &spec, &store_loader(&store))?;
            encoder.save(&out)?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            println!("encoder with {}-dim vectors written to {}", encoder.dim(), out.display());
        }
        Command::Encode {
            manifest,
            store,
            encoder,
            out,
        } => {
            let records = load_manifest(&manifest)?;
            let enc = Encoder::load(&encoder)?;
            let encodings = encode_clips(&records, &enc, &store_loader(&store))?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_encodings(&out, &encodings)?;
            println!("encoded {} clips", encodings.len());
        }
        Command::Train {
            encodings,
            common,
            out,
        } => {
            let cfg = resolve_config(&common)?;
            let enc = read_encodings(&encodings)?;
            let model = train_classifier(&enc, cfg.task, cfg.classifier.c, derive_seed(cfg.seed, "classifier"))?;
            write_text(&out, &(serde_json::to_string(&model)? + "\n"))?;
            println!("trained {} model on {} dims", cfg.task, model.dim());
        }
        Command::Eval {
            encodings,
            model,
            common,
            out,
        } => {
            let mut cfg = resolve_config(&common)?;
            let enc = read_encodings(&encodings)?;
            let text = fs::read_to_string(&model).with_context(|| format!("reading {}", model.display()))?;
            let model: Classifier = serde_json::from_str(&text)
                .map_err(|e| Error::Decode { path: model.clone(), reason: e.to_string() })?;
            cfg.task = model.task.task;
            let metrics = evaluate_classifier(&model, &enc)?;
            let report = EvalReport {
                config: cfg,
                vector_dim: model.dim(),
                n_train: enc.iter().filter(|e| e.split == Split::Train).count(),
                n_test: enc.iter().filter(|e| e.split == Split::Test).count(),
                metrics,
            };
            report.write(&out)?;
            print!("{}", report.text());
        }
        Command::Ablate {
            manifest,
            common,
            out,
            store,
        } => {
            let cfg = resolve_config(&common)?;
            let records = load_manifest(&manifest)?;
            let store = store.unwrap_or_else(|| out.join("store"));
            let ecfg = ablation_extract_config(&cfg.extract);
            let extract = run_extract(&records, &ecfg, &store, cfg.max_failure_fraction)?;
            let mut configs = ablation_matrix();
            configs.push(separated_config());
            let report = run_ablation(&records, &store, &cfg, &configs);
            write_text(&out.join("ablation.txt"), &report.table())?;
            write_text(&out.join("ablation.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            print!("{}", report.table());
            if let Some(a) = report.aborted {
                return Err(Partial(a).into());
            }
            if !extract.failed.is_empty() {
                return Err(Partial(format!("{} clips failed extraction", extract.failed.len())).into());
            }
        }
    }
    Ok(())
}

/// 2 when some clips failed or a run stopped part-way, 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let partial = err.downcast_ref::<Partial>().is_some()
        || matches!(err.downcast_ref::<Error>(), Some(Error::TooManyFailures { .. }));
    if partial {
        EXIT_PARTIAL
    } else {
        EXIT_VALIDATION
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
