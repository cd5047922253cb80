use std::path::PathBuf;
use std::process::ExitCode;

use accomp_cli::ablate::ablate;
use accomp_cli::error::EXIT_USAGE;
use accomp_cli::pipeline::{bridge_sample_cmd, gen_data, sample, train, train_bridge};
use accomp_cli::plot::plot_report;
use accomp_cli::{CliError, Conditioning, ExperimentConfig, Layout, Variant};
use accomp_core::metrics::AdherenceRegistry;
use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "accomp", version, about = "Train, sample and evaluate latent accompaniment models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (JSON). Desk defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset manifest and reference embeddings.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a DiT (dit-diffusion or c-dit) or the bridge.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample latents and their embeddings from a trained variant.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        conditioning: Option<String>,
        /// Sampler steps (default: 50 for diffusion, 5 for c-dit).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Evaluate every variant x conditioning cell and write the report.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Restrict the grid to one variant.
        #[arg(long)]
        variant: Option<String>,
        /// Restrict the grid to one conditioning setting.
        #[arg(long)]
        conditioning: Option<String>,
    },
    /// Render one SVG chart per metric of a report CSV.
    Plot {
        /// Report CSV written by `ablate`.
        report: PathBuf,
        /// Directory for the charts (default: next to the report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the text-to-audio embedding bridge.
    BridgeTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample bridged audio-side embeddings for held-out prompts.
    BridgeSample {
        #[command(flatten)]
        common: Common,
        /// text-style (default) or style (unconditional bridge).
        #[arg(long)]
        conditioning: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn load_config(common: &Common, variant: Option<&str>) -> anyhow::Result<(ExperimentConfig, Layout)> {
    let variant = variant.map(str::parse::<Variant>).transpose()?;
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(variant.unwrap_or(Variant::DitDiffusion)),
    };
    if let Some(v) = variant {
        cfg.model_variant = v;
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let layout = Layout::new(cfg.output_dir.clone(), cfg.seed());
    Ok((cfg, layout))
}

fn parse_cond(c: Option<&str>) -> Result<Option<Conditioning>, CliError> {
    c.map(str::parse).transpose()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let (cfg, layout) = load_config(&common, None)?;
            let m = gen_data(&cfg, &layout).context("gen-data failed")?;
            println!("{} stems; manifest in {}", m.count, layout.data_dir().display());
        }
        Command::Train { common, variant, steps } => {
            let (mut cfg, layout) = load_config(&common, variant.as_deref())?;
            let v = cfg.model_variant;
            if let Some(s) = steps {
                match v {
                    Variant::Bridge => cfg.bridge.steps = s,
                    _ => cfg.training.steps = s,
                }
            }
            let n = if v == Variant::Bridge { cfg.bridge.steps } else { cfg.training.steps };
            let out = train(&cfg, &layout, v, n).with_context(|| format!("training {v} failed"))?;
            let tail = &out.losses[out.losses.len().saturating_sub(100)..];
            println!(
                "{v}: {} steps, final mean loss {:.6}, checkpoint {}",
                out.losses.len(),
                tail.iter().sum::<f64>() / tail.len().max(1) as f64,
                out.checkpoint.display()
            );
        }
        Command::BridgeTrain { common, steps } => {
            let (mut cfg, layout) = load_config(&common, None)?;
            if let Some(s) = steps {
                cfg.bridge.steps = s;
            }
            let out = train_bridge(&cfg, &layout, cfg.bridge.steps).context("training the bridge failed")?;
            println!("bridge: {} steps, checkpoint {}", out.losses.len(), out.checkpoint.display());
        }
        Command::Sample { common, variant, conditioning, steps, count } => {
            let (mut cfg, layout) = load_config(&common, variant.as_deref())?;
            let v = cfg.model_variant;
            let cond = parse_cond(conditioning.as_deref())?.unwrap_or(Conditioning::StyleCtx);
            if let Some(s) = steps {
                match v {
                    Variant::CDit => cfg.sampling.consistency_steps = s,
                    _ => cfg.sampling.diffusion_steps = s,
                }
                cfg.validate()?;
            }
            let n = count.unwrap_or(cfg.sampling.count);
            let out = sample(&cfg, &layout, v, cond, n).with_context(|| format!("sampling {v} / {cond} failed"))?;
            let calls = out.manifest.calls_per_sample.map_or("-".to_string(), |c| c.to_string());
            println!("{n} samples -> {} ({calls} network calls per sample)", out.samples.display());
        }
        Command::BridgeSample { common, conditioning, steps, count } => {
            let (mut cfg, layout) = load_config(&common, None)?;
            let cond = parse_cond(conditioning.as_deref())?.unwrap_or(Conditioning::TextStyle);
            if let Some(s) = steps {
                cfg.bridge.sample_steps = s;
                cfg.validate()?;
            }
            let n = count.unwrap_or(cfg.sampling.count);
            let out = bridge_sample_cmd(&cfg, &layout, cond, n).context("bridge sampling failed")?;
            println!("{n} bridged embeddings -> {}", out.samples.display());
        }
        Command::Ablate { common, variant, conditioning } => {
            let (mut cfg, layout) = load_config(&common, None)?;
            if let Some(v) = variant.as_deref() {
                cfg.evaluation.variants = vec![v.parse()?];
            }
            if let Some(c) = parse_cond(conditioning.as_deref())? {
                cfg.conditioning = vec![c];
            }
            let report = ablate(&cfg, &layout, &AdherenceRegistry::new()).context("ablation failed")?;
            print!("{}", report.to_table());
            println!("report: {}", layout.report_csv().display());
        }
        Command::Plot { report, out } => {
            let text = std::fs::read_to_string(&report).map_err(|e| CliError::io(&report, e))?;
            let dir = out.unwrap_or_else(|| report.parent().map(|p| p.join("plots")).unwrap_or_else(|| "plots".into()));
            let files = plot_report(&text, &dir).with_context(|| format!("cannot plot {}", report.display()))?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<CliError>().map_or(EXIT_USAGE, CliError::exit_code))
        }
    }
}
