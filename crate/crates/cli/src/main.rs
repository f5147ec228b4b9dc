use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relcon_core::clirun::{self, Ablation, RunConfig};
use relcon_core::relconloss::LossVariant;
use relcon_core::Result;

#[derive(Parser)]
#[command(name = "relcon", version, about = "Relative contrastive pre-training for accelerometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted fields take desk-preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct Variant {
    /// Ablation to apply; repeatable.
    #[arg(long = "ablate", value_name = "NAME")]
    ablate: Vec<Ablation>,
    /// Contrastive loss: relcon, binary or log_ratio.
    #[arg(long)]
    loss: Option<LossVariant>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (CSV files plus dataset.json).
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the reconstruction distance network.
    TrainDistance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: Variant,
    },
    /// Pre-train the encoder against a frozen distance network.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: Variant,
        /// Frozen distance checkpoint; overrides checkpoints.distance
        #[arg(long)]
        distance: Option<PathBuf>,
    },
    /// Write embeddings for every evaluation window.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint; overrides checkpoints.encoder
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Frozen-embedding probes on held-out users.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint; overrides checkpoints.encoder
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Fine-tune encoder and linear head jointly.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint; overrides checkpoints.encoder
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Join run directories into one comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories holding metrics.json.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Run name (directory name) used for the percentage deltas.
        #[arg(long)]
        baseline: Option<String>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, variant: &Variant) {
    for &a in &variant.ablate {
        cfg.ablation.set(a);
    }
    if let Some(l) = variant.loss {
        cfg.ablation.loss_variant = Some(l);
    }
}

fn with_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if let Some(p) = flag {
        *slot = Some(p.clone());
    }
}

fn print_metrics(report: &relcon_core::evalkit::MetricsReport, out: &Path) {
    for (k, v) in &report.scalars {
        println!("{k}\t{v:.6}");
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    println!("outputs in {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { common } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.data.synthetic.seed = s;
            }
            clirun::cmd_gen_synth(&cfg, &common.out)?;
            println!("dataset written to {}", common.out.display());
        }
        Command::TrainDistance { common, variant } => {
            let mut cfg = load(&common)?;
            apply(&mut cfg, &variant);
            print_metrics(&clirun::cmd_train_distance(&cfg, &common.out)?, &common.out);
        }
        Command::TrainEncoder { common, variant, distance } => {
            let mut cfg = load(&common)?;
            apply(&mut cfg, &variant);
            with_path(&mut cfg.checkpoints.distance, &distance);
            print_metrics(&clirun::cmd_train_encoder(&cfg, &common.out)?, &common.out);
        }
        Command::Embed { common, encoder } => {
            let mut cfg = load(&common)?;
            with_path(&mut cfg.checkpoints.encoder, &encoder);
            println!("{}", clirun::cmd_embed(&cfg, &common.out)?.display());
        }
        Command::Probe { common, encoder } => {
            let mut cfg = load(&common)?;
            with_path(&mut cfg.checkpoints.encoder, &encoder);
            print_metrics(&clirun::cmd_probe(&cfg, &common.out)?, &common.out);
        }
        Command::Finetune { common, encoder } => {
            let mut cfg = load(&common)?;
            with_path(&mut cfg.checkpoints.encoder, &encoder);
            print_metrics(&clirun::cmd_finetune(&cfg, &common.out)?, &common.out);
        }
        Command::Report { common, runs, baseline } => {
            let table = clirun::cmd_report(&runs, baseline.as_deref(), &common.out)?;
            println!("{} runs x {} metrics against {}", table.rows.len(), table.metrics.len(), table.baseline);
            println!("report written to {}", common.out.join(clirun::REPORT_CSV).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    relcon_core::tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
