//! Command-line harness: trains models, runs attack sweeps, and emits
//! metric reports from a JSON experiment config.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use switchlab::config::{DefenseConfig, ExperimentConfig};
use switchlab::error::Error;
use switchlab::experiment::{
    self, emit_report, ReportBundle, TrainedModel,
};
use switchlab::rng::seed_chain;

#[derive(Parser)]
#[command(name = "switchlab", about = "Adversarial-robustness experiment harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's out-dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model + defense and save a checkpoint.
    Train(Common),
    /// Train a hierarchical-random-switching model bottom-up.
    HrsTrain(Common),
    /// Run the configured attack sweeps and emit ASR tables.
    Attack(Common),
    /// Run the defense-efficiency sweep (scatter + summary).
    Des(Common),
    /// Measure input-gradient dispersion of the configured model.
    Gradstd(Common),
    /// Train an adversarial program against the configured target.
    Reprogram(Common),
    /// Run the full pipeline and emit every report table.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c)
            | Command::HrsTrain(c)
            | Command::Attack(c)
            | Command::Des(c)
            | Command::Gradstd(c)
            | Command::Reprogram(c)
            | Command::Report(c) => c,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    cfg.out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: set out-dir in the config or pass --out".into()))
}

fn save_checkpoint(model: &TrainedModel, dir: &std::path::Path) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("model.swnb");
    let mut buf = Vec::new();
    match model {
        TrainedModel::Net(m) => switchlab::checkpoint::save_network(&mut buf, &m.net)?,
        TrainedModel::Hrs(m) => switchlab::checkpoint::save_hrs(&mut buf, m)?,
    }
    std::fs::write(&path, buf)?;
    Ok(path)
}

fn train_and_save(cfg: &ExperimentConfig, require_hrs: bool) -> Result<(), Error> {
    if require_hrs && !matches!(cfg.defense, DefenseConfig::Hrs { .. }) {
        return Err(Error::Config("hrs-train requires a defense of kind \"hrs\"".into()));
    }
    let dir = out_dir(cfg)?;
    let (train, test) = experiment::prepare_data(&cfg.dataset, cfg.seed)?;
    let tc = cfg.train.to_train_config();
    let model = experiment::build_model(&cfg.model, &cfg.defense, &train, &tc, cfg.seed)?;
    let acc = model.clean_accuracy(&test, seed_chain(cfg.seed, &[0xc1ea4]))?;
    let path = save_checkpoint(&model, &dir)?;
    let mut bundle = base_bundle(cfg);
    bundle.accuracy.push(experiment::AccuracyRow {
        model: cfg.defense.label(),
        clean_accuracy: acc,
    });
    emit_report(&bundle, &dir)?;
    println!("model: {}", cfg.defense.label());
    println!("clean accuracy: {acc:.2}%");
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn base_bundle(cfg: &ExperimentConfig) -> ReportBundle {
    ReportBundle { config_hash: cfg.hash(), seed: cfg.seed, ..Default::default() }
}

fn run(cmd: &Command) -> Result<(), Error> {
    let cfg = load_config(cmd.common())?;
    match cmd {
        Command::Train(_) => train_and_save(&cfg, false),
        Command::HrsTrain(_) => train_and_save(&cfg, true),
        Command::Attack(_) => {
            if cfg.attacks.is_empty() {
                return Err(Error::Config("attack subcommand needs a non-empty attacks list".into()));
            }
            let dir = out_dir(&cfg)?;
            let (train, test) = experiment::prepare_data(&cfg.dataset, cfg.seed)?;
            let tc = cfg.train.to_train_config();
            let model = experiment::build_model(&cfg.model, &cfg.defense, &train, &tc, cfg.seed)?;
            let mut bundle = base_bundle(&cfg);
            experiment::evaluate_attacks(
                model.as_model(),
                &cfg.defense.label(),
                &test,
                &cfg.attacks,
                &mut bundle,
                cfg.seed,
            )?;
            emit_report(&bundle, &dir)?;
            for row in &bundle.asr {
                println!(
                    "{} {} ({}) eps={:.4}: ASR {:.2}% over {} examples",
                    row.model, row.attack, row.mode, row.epsilon, row.asr, row.attacked
                );
            }
            Ok(())
        }
        Command::Des(_) => {
            let spec = cfg
                .des
                .clone()
                .ok_or_else(|| Error::Config("des subcommand needs a \"des\" config section".into()))?;
            let dir = out_dir(&cfg)?;
            let (train, test) = experiment::prepare_data(&cfg.dataset, cfg.seed)?;
            let mut bundle = base_bundle(&cfg);
            experiment::run_des_sweep(&cfg, &spec, &train, &test, &mut bundle)?;
            emit_report(&bundle, &dir)?;
            for row in &bundle.des_summary {
                println!(
                    "{}: mean DES {:.3} (variance {:.3})",
                    row.family, row.mean_des, row.variance_des
                );
            }
            Ok(())
        }
        Command::Gradstd(_) => {
            let spec = cfg.grad_std.clone().unwrap_or_default();
            let dir = out_dir(&cfg)?;
            let (train, test) = experiment::prepare_data(&cfg.dataset, cfg.seed)?;
            let tc = cfg.train.to_train_config();
            let model = experiment::build_model(&cfg.model, &cfg.defense, &train, &tc, cfg.seed)?;
            let s = switchlab::metrics::gradient_std(
                model.as_model(),
                &test,
                spec.examples,
                spec.samples,
                spec.kappa,
                seed_chain(cfg.seed, &[0x677264]),
            )?;
            let mut bundle = base_bundle(&cfg);
            bundle.grad_std.push(experiment::GradStdRow {
                model: cfg.defense.label(),
                grad_std: s,
            });
            emit_report(&bundle, &dir)?;
            println!("{}: grad std {s:.6}", cfg.defense.label());
            Ok(())
        }
        Command::Reprogram(_) => {
            let spec = cfg.reprogram.clone().ok_or_else(|| {
                Error::Config("reprogram subcommand needs a \"reprogram\" config section".into())
            })?;
            let dir = out_dir(&cfg)?;
            let (train, test) = experiment::prepare_data(&cfg.dataset, cfg.seed)?;
            let tc = cfg.train.to_train_config();
            let model = experiment::build_model(&cfg.model, &cfg.defense, &train, &tc, cfg.seed)?;
            let hw = experiment::dataset_hw(&cfg.dataset, test.inputs[0].len())?;
            let mut bundle = base_bundle(&cfg);
            let report = experiment::run_reprogram(&cfg, &spec, &model, hw, &mut bundle)?;
            emit_report(&bundle, &dir)?;
            println!(
                "reprogramming vs {}: test accuracy {:.2}% after {} epochs ({} program params)",
                cfg.defense.label(),
                report.test_accuracy,
                report.epochs_run,
                report.program_params
            );
            Ok(())
        }
        Command::Report(_) => {
            let dir = out_dir(&cfg)?;
            let bundle = experiment::run_experiment(&cfg)?;
            emit_report(&bundle, &dir)?;
            println!("report written to {} (config {})", dir.display(), &bundle.config_hash[..12]);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
