use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use kspace_dx::experiment::{
    evaluate_seed, load_classifier, load_policy, oversampled, run_pipeline, seed_data, train_classifier, train_sampler,
    write_seed_data, Artifacts, ClassifierRole, EvalOutputs, ExperimentConfig, ExperimentError, Models, Stage,
};
use kspace_dx::policy::RewardKind;

#[derive(Parser)]
#[command(version, about = "Active k-space line selection for diagnosis from undersampled MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (key = value with [section] headers); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reward {
    Classification,
    Reconstruction,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test phantom splits and save them under data/.
    GenData(Common),
    /// Train the undersampled-input classifier.
    PretrainClassifier(Common),
    /// Train the fully sampled oracle classifier.
    TrainOracle(Common),
    /// Train sampling policies against the pretrained classifier.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        reward: Reward,
    },
    /// Metrics at each configured sample rate.
    EvalRates(Common),
    /// Metrics after every acquired line, plus per-step traces.
    EvalLines(Common),
    /// Acquisition-frequency heatmaps.
    Heatmap(Common),
    /// The whole pipeline for every seed, with summary and manifest.
    RunAll(Common),
    /// Print the effective config.
    ShowConfig(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage<T>(stage: Stage, seed: u64, r: Result<T, ExperimentError>) -> Result<T> {
    r.with_context(|| format!("stage {stage} (seed {seed}) failed"))
}

fn train_classifiers(cfg: &ExperimentConfig, art: &Artifacts, role: ClassifierRole) -> Result<()> {
    let st = match role {
        ClassifierRole::Oracle => Stage::Oracle,
        ClassifierRole::Pretrained => Stage::Pretrain,
    };
    for &seed in &cfg.seeds {
        let data = stage(Stage::Data, seed, seed_data(cfg, seed))?;
        let balanced = stage(Stage::Oversample, seed, oversampled(&data.train, seed))?;
        let t = Instant::now();
        stage(st, seed, train_classifier(cfg, seed, role, &balanced, &data.val, art))?;
        eprintln!("seed {seed}: {} classifier trained in {:.1?}", role.name(), t.elapsed());
    }
    Ok(())
}

fn train_policies(cfg: &ExperimentConfig, art: &Artifacts, reward: Reward) -> Result<()> {
    let kinds: &[RewardKind] = match reward {
        Reward::Classification => &[RewardKind::Classification],
        Reward::Reconstruction => &[RewardKind::Reconstruction],
        Reward::Both => &[RewardKind::Classification, RewardKind::Reconstruction],
    };
    for &seed in &cfg.seeds {
        let pretrained = stage(Stage::Pretrain, seed, load_classifier(cfg, art, seed, ClassifierRole::Pretrained))?;
        let data = stage(Stage::Data, seed, seed_data(cfg, seed))?;
        let balanced = stage(Stage::Oversample, seed, oversampled(&data.train, seed))?;
        for &kind in kinds {
            let st = match kind {
                RewardKind::Classification => Stage::PolicyClassification,
                RewardKind::Reconstruction => Stage::PolicyReconstruction,
            };
            let t = Instant::now();
            stage(st, seed, train_sampler(cfg, seed, kind, &pretrained, &balanced, art))?;
            eprintln!("seed {seed}: {st} done in {:.1?}", t.elapsed());
        }
    }
    Ok(())
}

/// A missing checkpoint is `None`; any other failure is an error.
fn optional<T>(r: Result<T, ExperimentError>) -> Result<Option<T>, ExperimentError> {
    match r {
        Ok(m) => Ok(Some(m)),
        Err(ExperimentError::Missing(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn evaluate(cfg: &ExperimentConfig, art: &Artifacts, outputs: EvalOutputs) -> Result<()> {
    for &seed in &cfg.seeds {
        let models = Models {
            oracle: stage(Stage::Evaluate, seed, optional(load_classifier(cfg, art, seed, ClassifierRole::Oracle)))?,
            pretrained: stage(Stage::Evaluate, seed, load_classifier(cfg, art, seed, ClassifierRole::Pretrained))?,
            policy_classification: stage(
                Stage::Evaluate,
                seed,
                optional(load_policy(cfg, art, seed, RewardKind::Classification)),
            )?,
            policy_reconstruction: stage(
                Stage::Evaluate,
                seed,
                optional(load_policy(cfg, art, seed, RewardKind::Reconstruction)),
            )?,
        };
        let data = stage(Stage::Data, seed, seed_data(cfg, seed))?;
        let summary = stage(Stage::Evaluate, seed, evaluate_seed(cfg, seed, &models, &data.test, outputs, art))?;
        if let Some(o) = summary.oracle {
            println!("seed {seed} oracle AUC {:.4}", o.auc);
        }
        for m in &summary.methods {
            let last = m.rates.last().expect("rates validated nonempty");
            println!(
                "seed {seed} cf {} {:<22} AUC at {:.0}%: {:.4}",
                m.center_fraction,
                m.method.name(),
                last.rate * 100.0,
                last.result.auc
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (common, cmd) = match &cli.command {
        Command::GenData(c)
        | Command::PretrainClassifier(c)
        | Command::TrainOracle(c)
        | Command::EvalRates(c)
        | Command::EvalLines(c)
        | Command::Heatmap(c)
        | Command::RunAll(c)
        | Command::ShowConfig(c) => (c, &cli.command),
        Command::TrainPolicy { common, .. } => (common, &cli.command),
    };
    let cfg = load_config(common)?;
    if let Command::ShowConfig(_) = cmd {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let art = Artifacts::new(&cfg.out_dir)?;
    match cmd {
        Command::GenData(_) => {
            for &seed in &cfg.seeds {
                for path in stage(Stage::Data, seed, write_seed_data(&cfg, seed, &art))? {
                    println!("{}", path.display());
                }
            }
        }
        Command::PretrainClassifier(_) => train_classifiers(&cfg, &art, ClassifierRole::Pretrained)?,
        Command::TrainOracle(_) => train_classifiers(&cfg, &art, ClassifierRole::Oracle)?,
        Command::TrainPolicy { reward, .. } => train_policies(&cfg, &art, *reward)?,
        Command::EvalRates(_) => evaluate(&cfg, &art, EvalOutputs { rates: true, lines: false, traces: false, heatmaps: false })?,
        Command::EvalLines(_) => evaluate(&cfg, &art, EvalOutputs { rates: false, lines: true, traces: true, heatmaps: false })?,
        Command::Heatmap(_) => evaluate(&cfg, &art, EvalOutputs { rates: false, lines: false, traces: false, heatmaps: true })?,
        Command::RunAll(_) => {
            let start = Instant::now();
            let mut progress = |st: Stage, seed: u64| eprintln!("[{:>7.1?}] seed {seed}: {st}", start.elapsed());
            run_pipeline(&cfg, &mut progress)?;
            let report = std::fs::read_to_string(art.path("report.txt")).context("reading report")?;
            print!("{report}");
            eprintln!("artifacts in {} ({:.1?})", cfg.out_dir.display(), start.elapsed());
        }
        Command::ShowConfig(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
