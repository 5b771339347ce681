//! Command-line front end. Exit codes: 0 success, 1 invalid model or
//! config, 2 unreadable or malformed input and output failures.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::enkf::{CoupledFilter, CoupledState};
use crate::ensemble::{sample_cov, sample_mean};
use crate::error::{Error, Result};
use crate::experiment::{run_study_with_workers, ConvergenceReport, StudyConfig, StudySpec};
use crate::format::to_canonical_json;
use crate::kf::kf_run;
use crate::model::{validate_model, GaussianState, LinearModel};

pub const SEED_ENV: &str = "ENKF_LAB_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "enkf-lab", version, about = "Kalman filter and EnKF convergence experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a model file.
    Validate { model: PathBuf },
    /// Run the exact Kalman filter and write kf.json.
    Kf {
        model: PathBuf,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
    /// Run one coupled EnKF/reference trajectory and write enkf.json.
    Enkf {
        model: PathBuf,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
        #[arg(short = 'n', long = "members", default_value_t = 100)]
        members: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        #[arg(long = "dump-trajectories")]
        dump_trajectories: bool,
    },
    /// Run a replicated convergence study.
    Study {
        model: PathBuf,
        study: PathBuf,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Both)]
        format: OutputFormat,
        #[arg(long = "dump-trajectories")]
        dump_trajectories: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_IO } else { EXIT_OK };
        }
    };
    run(cli.command)
}

pub fn run(command: Command) -> i32 {
    let result = match command {
        Command::Validate { model } => return cmd_validate(&model),
        Command::Kf { model, out } => cmd_kf(&model, &out),
        Command::Enkf {
            model,
            out,
            members,
            seed,
            replicate,
            dump_trajectories,
        } => cmd_enkf(&model, &out, members, seed, replicate, dump_trajectories),
        Command::Study {
            model,
            study,
            out,
            seed,
            format,
            dump_trajectories,
            workers,
        } => cmd_study(&StudyArgs {
            model_path: model,
            study_path: study,
            out,
            seed,
            format,
            dump_trajectories,
            workers,
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_failure() {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

pub fn cmd_validate(model_path: &Path) -> i32 {
    let model = match LinearModel::load(model_path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match validate_model(&model) {
        Ok(()) => {
            eprintln!(
                "{}: valid (m={}, d={}, {} steps)",
                model_path.display(),
                model.state_dim,
                model.obs_dim,
                model.num_steps()
            );
            EXIT_OK
        }
        Err(violations) => {
            for v in violations {
                eprintln!("{}: {v}", model_path.display());
            }
            EXIT_INVALID
        }
    }
}

fn rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[derive(Serialize)]
struct GaussianJson {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl From<&GaussianState> for GaussianJson {
    fn from(g: &GaussianState) -> Self {
        Self {
            mean: vec_of(&g.mean),
            cov: rows(&g.cov),
        }
    }
}

#[derive(Serialize)]
struct KfStepJson {
    k: usize,
    forecast: GaussianJson,
    gain: Vec<Vec<f64>>,
    analysis: GaussianJson,
}

#[derive(Serialize)]
struct KfJson {
    initial: GaussianJson,
    steps: Vec<KfStepJson>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn load_valid(model_path: &Path) -> Result<LinearModel> {
    LinearModel::load(model_path)?.validated()
}

pub fn cmd_kf(model_path: &Path, out: &Path) -> Result<()> {
    let model = load_valid(model_path)?;
    let traj = kf_run(&model, &model.initial)?;
    let json = KfJson {
        initial: (&traj.initial).into(),
        steps: traj
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| KfStepJson {
                k: i + 1,
                forecast: (&s.forecast).into(),
                gain: rows(s.gain.matrix()),
                analysis: (&s.analysis).into(),
            })
            .collect(),
    };
    prepare_out(out)?;
    write_file(&out.join("kf.json"), &to_canonical_json(&json))
}

/// Seed precedence: flag, then study file, then the environment, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Parse {
            context: SEED_ENV.into(),
            message: format!("not an unsigned integer: {v:?}"),
        }),
        Err(_) => Ok(0),
    }
}

#[derive(Serialize)]
struct EnkfStepJson {
    k: usize,
    enkf: GaussianJson,
    reference: GaussianJson,
    kf: GaussianJson,
    ensemble_gain: Option<Vec<Vec<f64>>>,
    exact_gain: Option<Vec<Vec<f64>>>,
    member1_error: f64,
}

#[derive(Serialize)]
struct EnkfJson {
    seed: u64,
    replicate: u64,
    members: usize,
    steps: Vec<EnkfStepJson>,
}

pub fn cmd_enkf(
    model_path: &Path,
    out: &Path,
    members: usize,
    seed: Option<u64>,
    replicate: u64,
    dump: bool,
) -> Result<()> {
    let model = load_valid(model_path)?;
    let seed = resolve_seed(seed, None)?;
    let filter = CoupledFilter::new(&model, seed)?;
    let states = filter.run(replicate, members)?;
    let mut steps = Vec::with_capacity(states.len());
    for s in &states {
        steps.push(EnkfStepJson {
            k: s.step,
            enkf: (&GaussianState::new(sample_mean(&s.enkf), sample_cov(&s.enkf))).into(),
            reference: (&GaussianState::new(sample_mean(&s.reference), sample_cov(&s.reference))).into(),
            kf: filter.kf().analysis(s.step)?.into(),
            ensemble_gain: s.ensemble_gain.as_ref().map(|g| rows(g.matrix())),
            exact_gain: s.exact_gain.as_ref().map(|g| rows(g.matrix())),
            member1_error: (s.enkf.member(0) - s.reference.member(0)).norm(),
        });
    }
    prepare_out(out)?;
    write_file(
        &out.join("enkf.json"),
        &to_canonical_json(&EnkfJson {
            seed,
            replicate,
            members,
            steps,
        }),
    )?;
    if dump {
        dump_trajectory(&out.join("trajectories"), seed, replicate, &states)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DumpEntry {
    k: usize,
    enkf: String,
    reference: String,
    ensemble_gain: Option<Vec<Vec<f64>>>,
    exact_gain: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct DumpIndex {
    seed: u64,
    replicate: u64,
    #[serde(rename = "N")]
    n: usize,
    steps: Vec<DumpEntry>,
}

/// Writes `step{k}_enkf.bin` / `step{k}_reference.bin` snapshots plus an
/// `index.json` listing steps and gains.
pub fn dump_trajectory(dir: &Path, seed: u64, replicate: u64, states: &[CoupledState]) -> Result<()> {
    prepare_out(dir)?;
    let mut entries = Vec::with_capacity(states.len());
    for s in states {
        let enkf = format!("step{}_enkf.bin", s.step);
        let reference = format!("step{}_reference.bin", s.step);
        s.enkf.save_binary(dir.join(&enkf))?;
        s.reference.save_binary(dir.join(&reference))?;
        entries.push(DumpEntry {
            k: s.step,
            enkf,
            reference,
            ensemble_gain: s.ensemble_gain.as_ref().map(|g| rows(g.matrix())),
            exact_gain: s.exact_gain.as_ref().map(|g| rows(g.matrix())),
        });
    }
    let index = DumpIndex {
        seed,
        replicate,
        n: states.first().map_or(0, |s| s.size()),
        steps: entries,
    };
    write_file(&dir.join("index.json"), &to_canonical_json(&index))
}

pub struct StudyArgs {
    pub model_path: PathBuf,
    pub study_path: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub format: OutputFormat,
    pub dump_trajectories: bool,
    pub workers: Option<usize>,
}

pub fn write_report(report: &ConvergenceReport, out: &Path, format: OutputFormat) -> Result<()> {
    prepare_out(out)?;
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        write_file(&out.join("report.json"), &report.to_json())?;
    }
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        write_file(&out.join("report.csv"), &report.entries_csv())?;
        write_file(&out.join("slopes.csv"), &report.slopes_csv())?;
    }
    Ok(())
}

pub fn cmd_study(args: &StudyArgs) -> Result<()> {
    let model = load_valid(&args.model_path)?;
    let spec = StudySpec::load(&args.study_path)?;
    let seed = resolve_seed(args.seed, spec.seed)?;
    let config = StudyConfig::new(model, spec, seed);
    let report = run_study_with_workers(&config, args.workers)?;
    write_report(&report, &args.out, args.format)?;

    if args.dump_trajectories {
        let filter = CoupledFilter::new(&config.model, seed)?;
        for &n in &config.n_grid {
            let states = filter.run(0, n)?;
            dump_trajectory(&args.out.join("trajectories").join(format!("N{n}")), seed, 0, &states)?;
        }
    }

    // one line per metric: the fit at the last step that has one
    let mut seen: Vec<String> = Vec::new();
    for s in report.slopes.iter().rev() {
        let label = s.key.to_string();
        if seen.contains(&label) {
            continue;
        }
        seen.push(label.clone());
    }
    seen.reverse();
    for label in seen {
        if let Some(s) = report.slopes.iter().rev().find(|s| s.key.to_string() == label) {
            println!(
                "{label} k={}: slope {:.4} ± {:.4} (max residual), {} points",
                s.k, s.fit.slope, s.fit.max_residual, s.fit.points
            );
        }
    }
    for t in &report.moment_monitor {
        if t.flagged {
            println!("MOMENT_MONITOR[p={}] k={}: flagged, max/min {:.3}", t.p, t.k, t.max_over_min);
        }
    }
    Ok(())
}
