//! `stable-koopman`: train, verify, project and evaluate stable Koopman
//! models from the command line.
//!
//! Exit codes: 0 success or certified, 1 refused by the certificate,
//! 2 usage, parse or data error, 3 numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use stable_koopman::checkpoint::Checkpoint;
use stable_koopman::data::{write_dataset, Dataset, Split};
use stable_koopman::edmd::{edmd_fit, lift_dataset, Dictionary};
use stable_koopman::model::KoopmanModel;
use stable_koopman::projection::{pgd_project_detailed, ProjectionMode};
use stable_koopman::stability::{certify_stable, format_report};
use stable_koopman::trainer::{evaluate, train_with, TrainHistory};
use stable_koopman::{DenseMatrix, Error};

use config::{load_dataset, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "stable-koopman",
    version,
    about = "Learn Koopman models with a certified stable linear part"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, history, metrics and barrier report.
    Train(TrainArgs),
    /// Check a matrix against the hypercube certificate (exit 1 if refused).
    Verify(VerifyArgs),
    /// Project a matrix onto the barrier constraint.
    Project(ProjectArgs),
    /// Fit K by least squares on a fixed dictionary.
    Edmd(EdmdArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write a synthetic dataset as CSV files plus a manifest.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: manifest, CSV directory, CSV file or synthetic:<kind>.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: run]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mode: Option<ProjectionMode>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Override any config key, e.g. `--set lifted_dim=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Matrix CSV file.
    matrix: PathBuf,
    /// Required barrier margin.
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    /// Matrix CSV file to project.
    matrix: PathBuf,
    /// Previous iterate whose barrier values relax the thresholds
    /// [default: none, every row must reach h >= margin]
    #[arg(long)]
    prev: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = ProjectionMode::Symmetric)]
    mode: ProjectionMode,
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    #[arg(long, default_value = "projected")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EdmdArgs {
    /// Dataset: manifest, CSV directory, CSV file or synthetic:<kind>.
    dataset: String,
    /// identity or monomials:<degree>
    #[arg(long, default_value = "identity")]
    dictionary: String,
    /// Trajectories held out when the source has no split.
    #[arg(long, default_value_t = 2)]
    validation: usize,
    #[arg(long, default_value = "edmd")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Dataset: manifest, CSV directory, CSV file or synthetic:<kind>.
    dataset: String,
    #[arg(long, default_value = "validation")]
    split: Split,
    /// Trajectories held out when the source has no split.
    #[arg(long, default_value_t = 2)]
    validation: usize,
    /// Also write metrics.csv and metrics.txt here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// s-curve, hook, spiral-in or spiral
    kind: String,
    #[arg(long, default_value_t = 7)]
    n_traj: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    validation: usize,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

/// Failure carrying its exit code.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) | Error::Singular { .. } => 3,
            _ => 2,
        };
        Failure(code, e.to_string())
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let command = Cli::command().mut_subcommand("train", |c| c.after_help(RunConfig::help_text()));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Project(a) => cmd_project(a),
        Command::Edmd(a) => cmd_edmd(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn build_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure(2, format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
        cfg.base = PathBuf::from(".");
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(x) = a.alpha {
        cfg.train.alpha = x;
    }
    if let Some(m) = a.mode {
        cfg.train.mode = m;
    }
    if let Some(m) = a.margin {
        cfg.train.margin = m;
    }
    if let Some(h) = a.horizon {
        cfg.train.weights.horizon = h;
    }
    if cfg.dataset.is_none() {
        return Err(Failure(
            2,
            "missing required key `dataset` (set it in the config or pass --dataset)".into(),
        ));
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = build_config(&a)?;
    let dataset = cfg.prepared_dataset()?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.state_dim = dataset.dim();
    let mut model = KoopmanModel::new(&model_cfg)?;
    create_dir(&cfg.out)?;

    let checkpoint = |model: &KoopmanModel| {
        let mut c = Checkpoint::new(model.clone());
        c.preprocessing = Some(dataset.preprocessing().clone());
        c.meta = cfg.entries();
        c
    };
    let ckpt_path = cfg.out.join("model.ckpt");
    let mut history = TrainHistory::default();
    let mut save_error = None;
    let epochs = cfg.train.epochs;
    let outcome = train_with(&mut model, &dataset, &cfg.train, &mut history, |r, m| {
        let e = r.epoch + 1;
        if e % 100 == 0 || e == epochs {
            eprintln!(
                "epoch {e:>5}  loss {:.4e}  margin {:+.3e}",
                r.loss, r.margin_after
            );
        }
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 {
            if let Err(err) = checkpoint(m).save(&ckpt_path) {
                save_error.get_or_insert(err);
            }
        }
    });

    write(&cfg.out.join("history.csv"), &history.to_csv())?;
    checkpoint(&model).save(&ckpt_path)?;
    model.k.write_csv(&cfg.out.join("K.csv"))?;
    if let Err(e) = outcome {
        eprintln!(
            "training aborted after {} iterations; last committed parameters saved to {}",
            history.records.len(),
            ckpt_path.display()
        );
        return Err(e.into());
    }
    if let Some(e) = save_error {
        return Err(e.into());
    }

    let split = if dataset.split(Split::Validation).is_empty() {
        Split::Train
    } else {
        Split::Validation
    };
    let metrics = evaluate(&model, &dataset, split)?;
    write(&cfg.out.join("metrics.csv"), &metrics.to_csv())?;
    let table = format!("split: {}\n{}", split.name(), metrics.to_table());
    write(&cfg.out.join("metrics.txt"), &table)?;
    let report = format_report(&model.k, 0.0)?;
    write(&cfg.out.join("barrier.txt"), &report)?;

    print!("{table}");
    let certified = certify_stable(&model.k, 0.0)?.is_certified();
    println!("K certified: {certified}");
    eprintln!(
        "trained in {:.1?}, artifacts in {}",
        history.elapsed,
        cfg.out.display()
    );
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let k = DenseMatrix::read_csv(&a.matrix)?;
    if !k.is_square() {
        return Err(Failure(
            2,
            format!("matrix is {}x{}, expected square", k.rows(), k.cols()),
        ));
    }
    print!("{}", format_report(&k, a.margin)?);
    Ok(if certify_stable(&k, a.margin)?.is_certified() {
        0
    } else {
        1
    })
}

fn cmd_project(a: ProjectArgs) -> CmdResult {
    let k = DenseMatrix::read_csv(&a.matrix)?;
    let prev = match &a.prev {
        Some(p) => DenseMatrix::read_csv(p)?,
        // h = 1 on every row of the zero matrix, so every threshold is 0
        None => DenseMatrix::zeros(k.rows(), k.cols()),
    };
    let proj = pgd_project_detailed(&k, &prev, a.alpha, a.mode, a.margin)?;
    create_dir(&a.out)?;
    proj.matrix.write_csv(&a.out.join("projected.csv"))?;
    let mut report = String::from("# before\n");
    report.push_str(&format_report(&k, 0.0)?);
    report.push_str("# after\n");
    report.push_str(&format_report(&proj.matrix, 0.0)?);
    report.push_str(&format!(
        "# projection\nmode: {}\nalpha: {:?}\nmoved_rows: {:?}\ndisplacement: {:?}\n",
        a.mode.name(),
        a.alpha,
        proj.moved_rows,
        proj.displacement(&k)
    ));
    write(&a.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(0)
}

fn parse_dictionary(s: &str) -> Result<Dictionary<'static>, Failure> {
    if s == "identity" {
        return Ok(Dictionary::Identity);
    }
    s.strip_prefix("monomials:")
        .and_then(|p| p.parse().ok())
        .filter(|p| *p >= 1)
        .map(Dictionary::Monomials)
        .ok_or_else(|| {
            Failure(
                2,
                format!("unknown dictionary {s:?} (expected identity or monomials:<degree>)"),
            )
        })
}

fn cmd_edmd(a: EdmdArgs) -> CmdResult {
    let dictionary = parse_dictionary(&a.dictionary)?;
    let ds = load_dataset(&a.dataset, Path::new("."), a.validation, 7, 0.0, 0)?;
    let pairs = lift_dataset(&ds.split(Split::Train), dictionary)?;
    let k = edmd_fit(&pairs)?;
    create_dir(&a.out)?;
    k.write_csv(&a.out.join("edmd_k.csv"))?;
    let report = format_report(&k, 0.0)?;
    write(&a.out.join("barrier.txt"), &report)?;
    print!("{report}");
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let raw = load_dataset(&a.dataset, Path::new("."), a.validation, 7, 0.0, 0)?;
    let ds: Dataset = match &ckpt.preprocessing {
        Some(p) => raw.with_preprocessing(p)?,
        None => raw,
    };
    let metrics = evaluate(&ckpt.model, &ds, a.split)?;
    let table = format!("split: {}\n{}", a.split.name(), metrics.to_table());
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("metrics.csv"), &metrics.to_csv())?;
        write(&out.join("metrics.txt"), &table)?;
    }
    print!("{table}");
    Ok(0)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let spec = format!("synthetic:{}", a.kind);
    let ds = load_dataset(
        &spec,
        Path::new("."),
        a.validation,
        a.n_traj,
        a.noise,
        a.seed,
    )?;
    let stem = a.kind.replace('-', "_");
    let manifest = write_dataset(&ds, &a.out, &stem)?;
    println!("{}", manifest.display());
    Ok(0)
}
