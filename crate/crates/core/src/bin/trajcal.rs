use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajcal::data_model::EpochWindow;
use trajcal::pipeline::{
    cmd_calibrate, cmd_evaluate, cmd_fuse, cmd_pipeline, cmd_pseudo, cmd_simulate, cmd_train_toy, CalibrationKind,
    EvalInput, Outcome, PipelineConfig,
};
use trajcal::pseudo_label::Method;
use trajcal::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

/// Calibrated pseudo-labels from training dynamics.
#[derive(Parser)]
#[command(name = "trajcal", version)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// JSON object mirroring the pipeline configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Inclusive epoch range used for averaging, as LO,HI.
    #[arg(long, global = true, value_parser = parse_window)]
    epoch_window: Option<EpochWindow>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset, its study map and synthetic trajectories.
    Simulate {
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        num_studies: Option<usize>,
    },
    /// Train the toy classifier and record its per-epoch logits.
    TrainToy {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Pseudo-label file; recorded labels are used when absent.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Fit a calibration map on epoch-averaged validation logits.
    Calibrate {
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// temperature or dirichlet
        #[arg(long, default_value = "temperature")]
        method: String,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        /// Output file [default: <out-dir>/calibration.json]
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build pseudo-labels for the train split.
    Pseudo {
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// onehot, rt4u, pseudo_t or pseudo_d
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Output file [default: <out-dir>/pseudo_labels.jsonl]
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute balanced metrics and AURC for a prediction file or a model.
    Evaluate {
        #[arg(long, conflicts_with_all = ["model", "dataset"])]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        subgroup_tag: Option<String>,
    },
    /// Fuse video-level predictions into study-level predictions.
    Fuse {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        study_map: Option<PathBuf>,
        #[arg(long)]
        normal_class: Option<usize>,
    },
    /// Run every stage end to end and write the method comparison table.
    Pipeline,
}

fn parse_window(s: &str) -> Result<EpochWindow, String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: u32 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: u32 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok(EpochWindow::new(lo, hi))
}

/// Flag value, else the config-file value, else a usage error.
fn input(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf, Error> {
    let path = flag
        .or_else(|| from_config.clone())
        .ok_or_else(|| Error::Usage(format!("--{name} is required")))?;
    exists(&path)?;
    Ok(path)
}

fn exists(path: &Path) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!("input file not found: {}", path.display())))
    }
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let mut cfg = match &cli.shared.config {
        Some(path) => {
            exists(path)?;
            PipelineConfig::load(path)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.shared.seed {
        cfg = cfg.with_seed(seed);
    }
    if cli.shared.epoch_window.is_some() {
        cfg.epoch_window = cli.shared.epoch_window;
    }
    let out_dir = cli.shared.out_dir;
    let paths = cfg.paths.clone();

    match cli.command {
        Command::Simulate { num_classes, num_studies } => {
            if let Some(c) = num_classes {
                cfg.sim.num_classes = c;
            }
            if let Some(n) = num_studies {
                cfg.sim.num_studies = n;
            }
            cmd_simulate(&cfg, &out_dir)
        }
        Command::TrainToy { dataset, labels } => {
            let dataset = input(dataset, &paths.dataset, "dataset")?;
            let labels = match labels.or(paths.pseudo_labels) {
                Some(p) => {
                    exists(&p)?;
                    Some(p)
                }
                None => None,
            };
            cmd_train_toy(&cfg, &dataset, labels.as_deref(), &out_dir)
        }
        Command::Calibrate {
            trajectory,
            method,
            lambda1,
            lambda2,
            output,
        } => {
            let trajectory = input(trajectory, &paths.trajectory, "trajectory")?;
            let kind: CalibrationKind = method.parse()?;
            if let Some(l) = lambda1 {
                cfg.regularizer.lambda1 = l;
            }
            if let Some(l) = lambda2 {
                cfg.regularizer.lambda2 = l;
            }
            cfg.regularizer.validate()?;
            cfg.optimizer.validate()?;
            let output = output
                .or(paths.calibration)
                .unwrap_or_else(|| out_dir.join("calibration.json"));
            cmd_calibrate(&cfg, &trajectory, kind, &output)
        }
        Command::Pseudo {
            trajectory,
            method,
            calibration,
            output,
        } => {
            let trajectory = input(trajectory, &paths.trajectory, "trajectory")?;
            let method: Method = match method {
                Some(m) => m.parse()?,
                None => cfg.method,
            };
            let calibration = match calibration.or(paths.calibration) {
                Some(p) => {
                    exists(&p)?;
                    Some(p)
                }
                None => None,
            };
            let output = output
                .or(paths.pseudo_labels)
                .unwrap_or_else(|| out_dir.join("pseudo_labels.jsonl"));
            cmd_pseudo(&cfg, &trajectory, method, calibration.as_deref(), &output)
        }
        Command::Evaluate {
            predictions,
            model,
            dataset,
            subgroup_tag,
        } => {
            cfg.subgroup_tag = subgroup_tag;
            match (predictions, model) {
                (_, Some(model)) => {
                    exists(&model)?;
                    let dataset = input(dataset, &paths.dataset, "dataset")?;
                    cmd_evaluate(&cfg, EvalInput::Model { model: &model, dataset: &dataset }, &out_dir)
                }
                (predictions, None) => {
                    let predictions = input(predictions, &paths.predictions, "predictions")?;
                    cmd_evaluate(&cfg, EvalInput::Predictions(&predictions), &out_dir)
                }
            }
        }
        Command::Fuse {
            predictions,
            study_map,
            normal_class,
        } => {
            let predictions = input(predictions, &paths.predictions, "predictions")?;
            let study_map = input(study_map, &paths.study_map, "study-map")?;
            if let Some(c) = normal_class {
                cfg.normal_class = c;
            }
            cmd_fuse(&cfg, &predictions, &study_map, &out_dir)
        }
        Command::Pipeline => {
            let out = cmd_pipeline(&cfg, &out_dir)?;
            Ok(out)
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Parse { .. } | Error::Data(_) => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(out) => {
            for line in &out.messages {
                println!("{line}");
            }
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            if out.warnings.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_NOT_CONVERGED)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
