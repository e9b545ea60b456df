use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vocalis_core::pipeline::{EvalArgs, Pipeline, PipelineConfig};

/// Singing-voice detection with layers transferred from a speech-in-music model.
#[derive(Debug, Parser)]
#[command(name = "vocalis", version)]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Raw `key.path=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the built-in toy corpus.
    Toy,
    /// Mix speech with music into the labeled source corpus and index the target corpus.
    Synth {
        #[arg(long, alias = "snr", allow_hyphen_values = true)]
        snr_db: Option<f64>,
        /// Clean speech directory, instead of the toy corpus.
        #[arg(long)]
        speech: Option<PathBuf>,
        /// Instrumental music directory, instead of the toy corpus.
        #[arg(long)]
        music: Option<PathBuf>,
    },
    /// Compute and cache log-mel spectrograms.
    Features,
    /// Train the source CNN.
    TrainSource {
        #[command(flatten)]
        train: TrainFlags,
        /// Context block length T.
        #[arg(long)]
        context_frames: Option<usize>,
    },
    /// Train the target CRNN, with transfer from the source model unless disabled.
    TrainTarget {
        #[command(flatten)]
        train: TrainFlags,
        /// Layers to transfer: l1, l2, l3 or all, comma separated.
        #[arg(long, alias = "transfer-layer", value_delimiter = ',')]
        layers: Vec<String>,
        /// fixed or finetune.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        no_transfer: bool,
    },
    /// Score a checkpoint on a test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Local MUSDB18 copy in WAV stem layout; scores its test tracks.
        #[arg(long)]
        musdb: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter patterns by gradient ascent.
    Viz {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        layer: Option<String>,
        /// Filter index, repeatable.
        #[arg(long = "filter")]
        filters: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Export hidden features of sampled test blocks as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Retrain the source model over several context lengths.
    SweepT {
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
    },
    /// Every step except sweep-t, in order.
    Run,
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

/// A TOML string literal.
fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl TrainFlags {
    fn overrides(&self, section: &str, out: &mut Vec<String>) {
        if let Some(v) = self.epochs {
            out.push(format!("train.{section}.max_epochs={v}"));
        }
        if let Some(v) = self.lr {
            out.push(format!("train.{section}.learning_rate={v:?}"));
        }
        if let Some(v) = self.batch_size {
            out.push(format!("train.{section}.batch_size={v}"));
        }
        if let Some(v) = self.patience {
            out.push(format!("train.{section}.patience={v}"));
        }
    }
}

/// Flags become `key=value` overrides so they are validated like the file
/// and recorded verbatim in run records.
fn overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.set.clone();
    if let Some(d) = &cli.work_dir {
        o.push(format!("paths.work_dir={}", quote(&d.display().to_string())));
    }
    if let Some(s) = cli.seed {
        o.push(format!("seed={s}"));
    }
    match &cli.command {
        Command::Synth { snr_db, speech, music } => {
            if let Some(v) = snr_db {
                o.push(format!("synth.snr_db={v:?}"));
            }
            if let Some(d) = speech {
                o.push(format!("paths.speech_dir={}", quote(&d.display().to_string())));
            }
            if let Some(d) = music {
                o.push(format!("paths.music_dir={}", quote(&d.display().to_string())));
            }
        }
        Command::TrainSource { train, context_frames } => {
            train.overrides("source", &mut o);
            if let Some(t) = context_frames {
                o.push(format!("model.context_frames={t}"));
            }
        }
        Command::TrainTarget {
            train,
            layers,
            mode,
            no_transfer,
        } => {
            train.overrides("target", &mut o);
            if !layers.is_empty() {
                let list: Vec<String> = layers.iter().map(|l| quote(&l.to_ascii_lowercase())).collect();
                o.push(format!("transfer.layers=[{}]", list.join(", ")));
            }
            if let Some(m) = mode {
                o.push(format!("transfer.mode={}", quote(&m.to_ascii_lowercase())));
            }
            if *no_transfer {
                o.push("transfer.enabled=false".into());
            }
        }
        Command::Viz {
            layer,
            filters,
            steps,
            eta,
            ..
        } => {
            if let Some(l) = layer {
                o.push(format!("viz.layer={}", quote(l)));
            }
            if !filters.is_empty() {
                let list: Vec<String> = filters.iter().map(usize::to_string).collect();
                o.push(format!("viz.filters=[{}]", list.join(", ")));
            }
            if let Some(s) = steps {
                o.push(format!("viz.steps={s}"));
            }
            if let Some(e) = eta {
                o.push(format!("viz.eta={e:?}"));
            }
        }
        Command::ExportFeatures { layer, samples, .. } => {
            if let Some(l) = layer {
                o.push(format!("viz.export_layer={}", quote(l)));
            }
            if let Some(n) = samples {
                o.push(format!("viz.export_samples={n}"));
            }
        }
        Command::SweepT { frames } if !frames.is_empty() => {
            let list: Vec<String> = frames.iter().map(usize::to_string).collect();
            o.push(format!("sweep.frames=[{}]", list.join(", ")));
        }
        _ => {}
    }
    o
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let overrides = overrides(&cli);
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p, &overrides),
        None => PipelineConfig::parse("", &overrides),
    }
    .context("loading configuration")?;
    let pipeline = Pipeline::new(config, overrides);
    let lines = match &cli.command {
        Command::Toy => vec![pipeline.toy()?],
        Command::Synth { .. } => vec![pipeline.synth()?],
        Command::Features => vec![pipeline.features()?],
        Command::TrainSource { .. } => vec![pipeline.train_source()?],
        Command::TrainTarget { .. } => vec![pipeline.train_target()?],
        Command::Eval {
            checkpoint,
            manifest,
            musdb,
            out,
        } => vec![pipeline.eval(&EvalArgs {
            checkpoint: checkpoint.clone(),
            manifest: manifest.clone(),
            musdb: musdb.clone(),
            out: out.clone(),
        })?],
        Command::Viz { checkpoint, .. } => vec![pipeline.viz(checkpoint.as_deref())?],
        Command::ExportFeatures { checkpoint, .. } => vec![pipeline.export_features(checkpoint.as_deref())?],
        Command::SweepT { .. } => vec![pipeline.sweep_t()?],
        Command::Run => pipeline.run_all()?,
        Command::Config => vec![pipeline.config.to_toml()],
    };
    for l in lines {
        println!("{l}");
    }
    Ok(())
}
