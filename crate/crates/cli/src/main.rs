use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deepbeam::dataset::{build_dataset, read_dataset, split_dataset, write_dataset, DatasetConfig, DatasetFile};
use deepbeam::estimator::PhaseRegressor;
use deepbeam::harness::{emit_report, run_ber_sweep, run_phase_sweep, run_relay_sim, ExperimentConfig, RunResults};
use deepbeam::nn::{evaluate, fit, load_checkpoint, save_checkpoint, Architecture, PhaseModel, TrainConfig};

#[derive(Parser)]
#[command(name = "deepbeam", version, about = "Learned two-antenna receive beamforming workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic training data.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Train the phase estimator on a dataset file.
    Train(TrainArgs),
    /// Evaluation sweeps.
    Eval {
        #[command(subcommand)]
        action: EvalCmd,
    },
    /// Two-hop relay simulation.
    Relay {
        #[command(subcommand)]
        action: RelayCmd,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Build(BuildArgs),
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long, default_value_t = 60_000)]
    records: usize,
    #[arg(long, default_value_t = 0.0)]
    snr_min: f64,
    #[arg(long, default_value_t = 35.0)]
    snr_max: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    chunk_len: usize,
    /// Skip the per-record random rotation.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Disable per-batch rotation augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report directory.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    BerSweep(RunArgs),
    PhaseSweep(RunArgs),
}

#[derive(Subcommand)]
enum RelayCmd {
    Sim(RunArgs),
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Dataset { action: DatasetCmd::Build(a) } => build(a),
        Command::Train(a) => train(a),
        Command::Eval { action: EvalCmd::BerSweep(a) } => run(a, |cfg, model| {
            Ok(RunResults {
                ber_curves: run_ber_sweep(cfg, model)?,
                ..Default::default()
            })
        }),
        Command::Eval { action: EvalCmd::PhaseSweep(a) } => run(a, |cfg, model| {
            let Some(model) = model else { bail!("phase sweep needs a checkpoint") };
            Ok(RunResults {
                phase_sweep: run_phase_sweep(model, cfg)?,
                ..Default::default()
            })
        }),
        Command::Relay { action: RelayCmd::Sim(a) } => run(a, |cfg, model| {
            Ok(RunResults {
                relay: run_relay_sim(cfg, model)?,
                ..Default::default()
            })
        }),
    }
}

fn build(a: BuildArgs) -> Result<()> {
    let cfg = DatasetConfig {
        records: a.records,
        snr_min_db: a.snr_min,
        snr_max_db: a.snr_max,
        seed: a.seed,
        chunk_len: a.chunk_len,
        augment: !a.no_augment,
    };
    let t = Instant::now();
    let records = build_dataset(&cfg)?;
    write_dataset(&a.out, &DatasetFile::new(a.chunk_len, records)?)?;
    println!("wrote {} records to {} in {:.1}s", a.records, a.out.display(), t.elapsed().as_secs_f64());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let file = read_dataset(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;
    let (train, val, test) = split_dataset(file.records, a.seed)?;
    println!("train {} / val {} / test {}", train.len(), val.len(), test.len());
    let arch = Architecture {
        chunk_len: file.chunk_len,
        ..Default::default()
    };
    let cfg = TrainConfig {
        initial_lr: a.lr,
        batch_size: a.batch,
        max_epochs: a.epochs,
        seed: a.seed,
        augment: !a.no_augment,
        ..Default::default()
    };
    let model = PhaseModel::<f32>::new(arch, a.seed)?;
    let t = Instant::now();
    let (model, history) = fit(model, &train, &val, &cfg, |s| {
        println!(
            "epoch {:3}  train {:.4}  val {:.4}  lr {:.2e}  {:.0}s",
            s.epoch,
            s.train_loss,
            s.val_loss,
            s.lr,
            t.elapsed().as_secs_f64()
        );
    })?;
    save_checkpoint(&model, &a.out)?;
    println!(
        "best epoch {} (val {:.4}); test MSE {:.4}; saved {}",
        history.best_epoch,
        history.best_val_loss(),
        evaluate(&model, &test)?,
        a.out.display()
    );
    Ok(())
}

fn run(a: RunArgs, body: impl FnOnce(&ExperimentConfig, Option<&dyn PhaseRegressor>) -> Result<RunResults>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    let model = cfg.checkpoint.as_deref().map(load_model).transpose()?;
    let results = body(&cfg, model.as_ref().map(|m| m as &dyn PhaseRegressor))?;
    for curve in &results.ber_curves {
        println!("{}", curve.mode);
        for p in &curve.points {
            println!("  {:6.2} dB  BER {:.3e}  ({} bits)", p.snr_db, p.ber, p.bits);
        }
    }
    for r in &results.relay {
        println!(
            "seed {}  {:15}  fwd SNR {:6.2} dB  PLR {:.4}",
            r.channel_seed,
            r.path.name(),
            r.forwarded_snr_db,
            r.plr
        );
    }
    for f in emit_report(&results, &cfg, &a.out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<PhaseModel<f32>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}
