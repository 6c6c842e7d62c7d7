//! Command-line front end: `generate`, `train`, `eval`, `rollout`,
//! `gradcheck` and `config`.
//!
//! Exit codes: 0 success, 2 usage, 3 data or I/O, 4 numerical failure
//! (non-finite loss, solver divergence, failed gradient check),
//! 5 invalid configuration.
//!
//! Environment: `IKNO_OUTPUT_ROOT` prefixes every relative output path,
//! `IKNO_THREADS` sizes the worker pool.

pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ikno::archive::{Archive, Precision};
use ikno::datagen::{build_dataset, Dataset, DatasetSpec, Task};
use ikno::eval::{resolution_sweep, EvalReport};
use ikno::grid::WindowPair;
use ikno::inn::InnConfig;
use ikno::model::{IknoConfig, IknoModel};
use ikno::seed::rng_for;
use ikno::spectral::{Activation, TruncationSpec};
use ikno::train::{format_history, gradient_check, model_archive, model_from_archive, GradCheckReport, Trainer};
use ikno::{IknoError, Result};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_CONFIG: i32 = 5;

/// Exit code for a library error.
pub fn exit_code(e: &IknoError) -> i32 {
    match e {
        IknoError::Config(_) => EXIT_CONFIG,
        IknoError::NonFinite { .. } | IknoError::Solver { .. } | IknoError::CheckFailed(_) => EXIT_NUMERIC,
        IknoError::Shape(_)
        | IknoError::Input(_)
        | IknoError::InsufficientLength { .. }
        | IknoError::DegenerateTarget { .. }
        | IknoError::Format(_)
        | IknoError::PathExists(_)
        | IknoError::Io(_) => EXIT_DATA,
    }
}

#[derive(Parser, Debug)]
#[command(name = "ikno", version, about = "Invertible Koopman neural operator: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset archive for one of the built-in PDE tasks.
    Generate(GenerateArgs),
    /// Train a model; writes run.toml, loss_history.tsv and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on every resolution stored in a dataset.
    Eval(EvalArgs),
    /// Roll a checkpoint forward from windows stored in an archive.
    Rollout(RolloutArgs),
    /// Compare reverse-mode gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Print a default configuration as TOML.
    Config(ConfigArgs),
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Full dataset spec as TOML (see `ikno config --dataset <task>`); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training resolution per spatial axis.
    #[arg(long)]
    pub res: Option<usize>,
    /// Resolution of the reference solver (Burgers and heat).
    #[arg(long)]
    pub fine_res: Option<usize>,
    /// Comma-separated zero-shot test resolutions.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Output archive; defaults to `<task>.ikno`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration TOML; defaults for the task are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Rollout steps; defaults to every stored target step.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// `test` covers the test split at every stored resolution.
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Output directory for sweep.csv, curve.csv, report.txt and report.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Also render per-step error curves as PNG.
    #[arg(long)]
    pub plot: bool,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Archive holding a `window` array, `[batch ×] R… × T_d`.
    #[arg(long)]
    pub window: PathBuf,
    #[arg(long)]
    pub steps: usize,
    /// Output archive with a `prediction` array, `batch × R… × steps`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only `double` is accepted; finite differences are meaningless in single.
    #[arg(long, default_value = "double")]
    pub precision: Precision,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    #[arg(long, value_parser = parse_task, default_value = "burgers1d")]
    pub task: Task,
    /// Print the dataset spec instead of the run configuration.
    #[arg(long)]
    pub dataset: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("IKNO_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        // a second call in the same process finds the pool already built
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Resolves a relative output path against `IKNO_OUTPUT_ROOT`.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os("IKNO_OUTPUT_ROOT") {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(&a).map(|p| println!("wrote {}", p.display())),
        Command::Train(a) => cmd_train(&a).map(|p| println!("wrote {}", p.display())),
        Command::Eval(a) => cmd_eval(&a).map(|r| print!("{}", r.table())),
        Command::Rollout(a) => cmd_rollout(&a).map(|p| println!("wrote {}", p.display())),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|s| print!("{s}")),
        Command::Config(a) => cmd_config(&a).map(|s| print!("{s}")),
    }
}

fn toml_err(e: impl std::fmt::Display) -> IknoError {
    IknoError::Config(e.to_string())
}

pub fn dataset_spec(a: &GenerateArgs) -> Result<DatasetSpec> {
    let mut spec = match (&a.config, a.task) {
        (Some(p), _) => toml::from_str::<DatasetSpec>(&std::fs::read_to_string(p)?).map_err(toml_err)?,
        (None, Some(t)) => DatasetSpec::for_task(t),
        (None, None) => return Err(IknoError::Config("either --task or --config is required".into())),
    };
    if let Some(t) = a.task {
        if t != spec.task {
            return Err(IknoError::Config(format!("--task {t} disagrees with the config task {}", spec.task)));
        }
    }
    if let Some(v) = a.train {
        spec.n_train = v;
    }
    if let Some(v) = a.test {
        spec.n_test = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.res {
        spec.resolution = v;
        if a.sweep.is_none() {
            spec.sweep.retain(|&r| r != v);
        }
    }
    if let Some(v) = a.fine_res {
        spec.burgers.fine_resolution = v;
        spec.heat.fine_resolution = v;
    }
    if let Some(v) = &a.sweep {
        spec.sweep = v.clone();
    }
    if let Some(v) = a.window {
        spec.window = v;
    }
    if let Some(v) = a.horizon {
        spec.horizon = v;
    }
    if let Some(v) = a.precision {
        spec.precision = v;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<PathBuf> {
    let spec = dataset_spec(a)?;
    let out = output_path(a.out.as_deref().unwrap_or(Path::new(&format!("{}.ikno", spec.task))));
    if out.exists() && !a.overwrite {
        return Err(IknoError::PathExists(out.display().to_string()));
    }
    let archive = build_dataset(&spec)?.to_archive()?;
    create_parent(&out)?;
    archive.save(&out, a.overwrite)?;
    Ok(out)
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

/// Loads an archive, naming the path in I/O errors.
pub fn open_archive(path: &Path) -> Result<Archive> {
    Archive::load(path).map_err(|e| match e {
        IknoError::Io(io) => IknoError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_archive(&open_archive(path)?)
}

pub fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, a.task) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(t)) => RunConfig::for_task(t),
        (None, None) => RunConfig::default(),
    };
    if let Some(t) = a.task {
        if t != cfg.task {
            return Err(IknoError::Config(format!("--task {t} disagrees with the config task {}", cfg.task)));
        }
    }
    if let Some(v) = &a.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.out {
        cfg.output_dir = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_compatible(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let s = &data.spec;
    if s.task != cfg.task {
        return Err(IknoError::Config(format!("dataset task {} but config task {}", s.task, cfg.task)));
    }
    if s.window != cfg.window {
        return Err(IknoError::Config(format!("dataset window {} but config window {}", s.window, cfg.window)));
    }
    let h = cfg.train_horizon.unwrap_or(cfg.horizon);
    if h > s.horizon || cfg.horizon > s.horizon {
        return Err(IknoError::Config(format!("dataset stores {} target steps, config asks for {h}", s.horizon)));
    }
    Ok(())
}

fn first_steps(w: &WindowPair, h: usize) -> WindowPair {
    let ax = ndarray::Axis(w.target.ndim() - 1);
    WindowPair { input: w.input.clone(), target: w.target.slice_axis(ax, ndarray::Slice::from(..h)).to_owned() }
}

fn tag_resolution(a: &mut Archive, data: &Dataset) {
    a.set_meta("train_resolution", data.spec.resolution);
}

fn best_archive(t: &Trainer, data: &Dataset) -> Result<Archive> {
    let mut model = t.model.clone();
    let mut a = match &t.best {
        Some(b) => {
            model.params = b.params.clone();
            let mut a = model_archive(&model)?;
            a.set_meta("best.epoch", b.epoch);
            a.set_meta("best.val_loss", format!("{:.17e}", b.val_loss));
            a
        }
        None => {
            let mut a = model_archive(&model)?;
            a.set_meta("best.epoch", t.epoch);
            a
        }
    };
    tag_resolution(&mut a, data);
    Ok(a)
}

fn save_checkpoint(t: &Trainer, data: &Dataset, path: &Path) -> Result<()> {
    let mut a = t.checkpoint()?;
    tag_resolution(&mut a, data);
    a.save(path, true)
}

/// Trains a model and returns the output directory.
///
/// Writes `run.toml`, `loss_history.tsv` (rewritten every epoch),
/// `last.ckpt` every `checkpoint_every` epochs, and at the end
/// `final.ckpt` (full trainer state) and `best.ckpt` (parameters with the
/// lowest validation loss, or the final ones without validation). After a
/// non-finite loss the last good state is saved to `last.ckpt`.
pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let cfg = run_config(a)?;
    let out = output_path(&cfg.output_dir);
    let data = load_dataset(&cfg.dataset)?;
    check_compatible(&cfg, &data)?;
    let last = out.join("last.ckpt");

    let mut trainer = if a.resume {
        let mut t = Trainer::from_checkpoint(&open_archive(&last)?)?;
        if t.model.config != cfg.model_config()? {
            return Err(IknoError::Config("checkpoint model does not match the run configuration".into()));
        }
        t.cfg.epochs = cfg.epochs;
        t
    } else {
        let occupied = out.is_dir() && std::fs::read_dir(&out)?.next().is_some();
        if occupied && !a.overwrite {
            return Err(IknoError::PathExists(out.display().to_string()));
        }
        let mut rng = rng_for(cfg.seed, "init", 0);
        Trainer::new(IknoModel::init(cfg.model_config()?, &mut rng)?, cfg.train_config())?
    };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("run.toml"), cfg.to_toml())?;

    let h = cfg.train_horizon.unwrap_or(cfg.horizon);
    let train = first_steps(&data.train, h);
    let val = (cfg.validate && data.test.input.shape()[0] > 0).then(|| first_steps(&data.test, h));
    let every = cfg.checkpoint_every;
    let history = out.join("loss_history.tsv");
    let result = trainer.train(&train, val.as_ref(), |t, rec| {
        std::fs::write(&history, format_history(&t.history))?;
        if rec.epoch % every == 0 || t.epoch == t.cfg.epochs {
            save_checkpoint(t, &data, &last)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        std::fs::write(&history, format_history(&trainer.history))?;
        save_checkpoint(&trainer, &data, &last)?;
        return Err(e);
    }
    std::fs::write(&history, format_history(&trainer.history))?;
    save_checkpoint(&trainer, &data, &out.join("final.ckpt"))?;
    best_archive(&trainer, &data)?.save(out.join("best.ckpt"), true)?;
    Ok(out)
}

const EVAL_CHUNK: usize = 8;

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let ckpt = open_archive(&a.checkpoint)?;
    let model = model_from_archive(&ckpt)?;
    let data = load_dataset(&a.dataset)?;
    if data.spec.window != model.config.window {
        return Err(IknoError::Config(format!(
            "dataset window {} but model window {}",
            data.spec.window, model.config.window
        )));
    }
    let train_res = ckpt.meta_parse("train_resolution").unwrap_or(data.spec.resolution);
    let sets: Vec<(usize, &WindowPair)> = match a.split {
        Split::Train => vec![(data.spec.resolution, &data.train)],
        Split::Test => {
            let mut v = vec![(data.spec.resolution, &data.test)];
            v.extend(data.sweep.iter().map(|(r, w)| (*r, w)));
            v
        }
    };
    if sets.iter().all(|(_, w)| w.input.shape()[0] == 0) {
        return Err(IknoError::Input("selected split is empty".into()));
    }
    let (rows, curves) = resolution_sweep(&model, train_res, &sets, a.horizon, EVAL_CHUNK)?;
    let report = EvalReport {
        checkpoint_id: a.checkpoint.display().to_string(),
        dataset_id: a.dataset.display().to_string(),
        horizon: curves.first().map_or(0, |c| c.steps.len()),
        rows,
        curves,
    };
    let out = output_path(&a.out);
    let names = ["sweep.csv", "curve.csv", "report.txt", "report.json"];
    if !a.overwrite {
        if let Some(n) = names.iter().find(|n| out.join(n).exists()) {
            return Err(IknoError::PathExists(out.join(n).display().to_string()));
        }
    }
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("sweep.csv"), report.sweep_csv())?;
    std::fs::write(out.join("curve.csv"), report.curve_csv())?;
    std::fs::write(out.join("report.txt"), report.table())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| IknoError::Format(e.to_string()))?;
    std::fs::write(out.join("report.json"), json)?;
    if a.plot {
        let rel: Vec<Vec<f64>> =
            report.curves.iter().map(|c| c.steps.iter().map(|s| s.rel_l2_percent).collect()).collect();
        let mae: Vec<Vec<f64>> = report.curves.iter().map(|c| c.steps.iter().map(|s| s.mae).collect()).collect();
        plot::line_chart(&rel, &out.join("curve_rel_l2.png"))?;
        plot::line_chart(&mae, &out.join("curve_mae.png"))?;
    }
    Ok(report)
}

/// Rolls a checkpoint forward. Unbatched windows (`R… × T_d`) get a
/// leading batch axis of one; the prediction always has one.
pub fn cmd_rollout(a: &RolloutArgs) -> Result<PathBuf> {
    let model = model_from_archive(&open_archive(&a.checkpoint)?)?;
    if a.steps == 0 {
        return Err(IknoError::Config("--steps must be positive".into()));
    }
    let mut window = open_archive(&a.window)?.array("window")?;
    if window.ndim() == model.config.spatial_rank() + 1 {
        window = window.insert_axis(ndarray::Axis(0));
    }
    let pred = model.rollout(&window, a.steps)?;
    let out = output_path(&a.out);
    if out.exists() && !a.overwrite {
        return Err(IknoError::PathExists(out.display().to_string()));
    }
    let mut arch = Archive::new();
    arch.set_meta("kind", "prediction");
    arch.set_meta("steps", a.steps);
    arch.set_meta("checkpoint", a.checkpoint.display());
    arch.insert_array("prediction", &pred, Precision::Double)?;
    create_parent(&out)?;
    arch.save(&out, a.overwrite)?;
    Ok(out)
}

/// Window 4, two coupling blocks of width 2 (observable width 4), hidden
/// width 8, 2 modes, `K^2`, one layer, a 16-point grid.
pub fn gradcheck_config() -> IknoConfig {
    IknoConfig {
        window: 4,
        horizon: 2,
        layers: 1,
        inn: InnConfig::uniform(4, 2, 2, 8).expect("valid coupling layout"),
        spec: TruncationSpec::new(vec![2], 2).expect("valid truncation"),
        activation: Activation::Gelu,
    }
}

pub const GRADCHECK_RES: usize = 16;

/// Finite-difference check of [`gradcheck_config`] on two smooth
/// trajectories drawn from `seed`.
pub fn gradcheck_report(seed: u64, delta: f64, samples: usize) -> Result<GradCheckReport> {
    let cfg = gradcheck_config();
    let mut rng = rng_for(seed, "gradcheck", 0);
    let model = IknoModel::init(cfg.clone(), &mut rng)?;
    let grf = ikno::datagen::GrfSpec::default();
    let batch = 2;
    let t = cfg.window + cfg.horizon;
    let mut series = ndarray::Array3::<f64>::zeros((batch, GRADCHECK_RES, t));
    for b in 0..batch {
        let u = ikno::datagen::sample_grf_1d(GRADCHECK_RES, &grf, &mut rng)?;
        let w = ikno::datagen::sample_grf_1d(GRADCHECK_RES, &grf, &mut rng)?;
        for x in 0..GRADCHECK_RES {
            for s in 0..t {
                let phase = s as f64 / t as f64;
                series[[b, x, s]] = (1.0 - phase) * u[x] + phase * w[x] + 0.5;
            }
        }
    }
    let input = series.slice(ndarray::s![.., .., ..cfg.window]).to_owned().into_dyn();
    let target = series.slice(ndarray::s![.., .., cfg.window..]).to_owned().into_dyn();
    gradient_check(&model, &input, &target, delta, samples, &mut rng)
}

/// Runs the finite-difference check and returns the report text; fails
/// with a numeric error when any block exceeds `tol`.
pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<String> {
    if a.precision != Precision::Double {
        return Err(IknoError::Config("gradient checks run in double precision only".into()));
    }
    if !(a.delta > 0.0 && a.tol > 0.0) {
        return Err(IknoError::Config("--delta and --tol must be positive".into()));
    }
    let rep = gradcheck_report(a.seed, a.delta, a.samples)?;
    let mut s = String::new();
    writeln!(s, "block\tchecked\tmax_rel_error").unwrap();
    for b in &rep.blocks {
        writeln!(s, "{}\t{}\t{:.3e}", b.name, b.checked, b.max_rel_error).unwrap();
    }
    let worst = rep.max_rel_error();
    let pass = worst < a.tol;
    writeln!(s, "total\t{}\t{:.3e}\t{}", rep.checked(), worst, if pass { "PASS" } else { "FAIL" }).unwrap();
    if !pass {
        print!("{s}");
        return Err(IknoError::CheckFailed(format!("max relative error {worst:.3e} exceeds {:.1e}", a.tol)));
    }
    Ok(s)
}

pub fn cmd_config(a: &ConfigArgs) -> Result<String> {
    if a.dataset {
        toml::to_string(&DatasetSpec::for_task(a.task)).map_err(toml_err)
    } else {
        Ok(RunConfig::for_task(a.task).to_toml())
    }
}
