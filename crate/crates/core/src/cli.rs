//! Command-line front end: synthesize data, train, generate trajectories,
//! evaluate against reference marginals and dump spline comparisons.
//!
//! Exit codes: 0 success, 2 usage or invalid input, 3 divergence,
//! 4 checkpoint mismatch, 5 evaluation time outside the trajectory range.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    dataset_means, gen_gaussian_sequence, grid_by_name, load_marginals, load_points,
    save_marginals, save_points, GaussianSequenceSpec, GridFile, MarginalDataset, TimeGrid,
};
use crate::error::Error;
use crate::metrics::{default_kernels, evaluate, Kernel, MetricReport, MIXTURE_SCALES};
use crate::nn::Mlp;
use crate::points::Points;
use crate::probpath::ScheduleMode;
use crate::sim::{integrate_ode, integrate_sde, uniform_grid, SdeSpec, Trajectories};
use crate::spline::{Knots, SplineFamily};
use crate::trainer::{train, window_starts, write_loss_log, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_EVAL_RANGE: i32 = 5;

pub const MARGINALS_FILE: &str = "marginals.csv";
pub const GRID_FILE: &str = "grid.json";
pub const INITIAL_FILE: &str = "initial.csv";
pub const FLOW_CKPT: &str = "flow.ckpt";
pub const SCORE_CKPT: &str = "score.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.json";

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    fn checkpoint(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CHECKPOINT,
            message: msg.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::TrainingDiverged { .. } | Error::IntegrationDiverged { .. } => EXIT_DIVERGED,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(
    name = "mmsfm",
    version,
    about = "Multi-marginal stochastic flow matching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a builtin Gaussian sequence onto a named grid.
    Synth(SynthArgs),
    /// Train flow and score networks.
    Train(TrainArgs),
    /// Integrate trained networks from initial conditions.
    Generate(GenerateArgs),
    /// Compare generated states with reference marginals.
    Evaluate(EvaluateArgs),
    /// Dense samples of both spline families on rolling windows.
    Splines(SplinesArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 200)]
    pub initial_samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub std: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding marginals.csv and grid.json, or a marginal CSV file.
    #[arg(long, conflicts_with = "dataset")]
    pub data: Option<PathBuf>,
    /// Builtin dataset generated on the fly.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Grid name; required with --dataset or a bare CSV file.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hold_out: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub schedule: Option<ScheduleMode>,
    #[arg(long)]
    pub spline: Option<SplineFamily>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Training output directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Initial conditions; defaults to initial.csv next to the training data.
    #[arg(long)]
    pub initial: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub steps_per_unit: usize,
    /// Number of particles; defaults to the size of the initial pool.
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Diffusion scale; defaults to the training sigma.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Integrate the flow ODE instead of the SDE.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Directory holding marginals.csv and grid.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with_all = ["time", "all"])]
    pub index: Option<usize>,
    #[arg(long, conflicts_with = "all")]
    pub time: Option<f64>,
    /// Evaluate every marginal after the first.
    #[arg(long)]
    pub all: bool,
    /// Gaussian kernel bandwidth; defaults to the median heuristic.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Mixture kernel bandwidths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub mixture_gammas: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplinesArgs {
    /// Point file with one row per grid time.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 50)]
    pub samples_per_interval: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Builtin { name: String, seed: u64 },
    Csv { path: PathBuf },
}

/// Optional metric kernel overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelParams {
    pub gaussian_gamma: Option<f64>,
    pub mixture_gammas: Option<Vec<f64>>,
}

/// Fully resolved training run, written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: Option<DataSource>,
    pub grid: Option<String>,
    pub grid_times: Vec<f64>,
    pub out: Option<PathBuf>,
    pub kernel: KernelParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            grid: None,
            grid_times: Vec::new(),
            out: None,
            kernel: KernelParams::default(),
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cmd: Command) -> CmdResult {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Splines(a) => cmd_splines(&a),
    }
}

fn create(path: &Path) -> CmdResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let f = File::create(path)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> CmdResult<BufReader<File>> {
    let f = File::open(path)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", path.display())))?;
    Ok(BufReader::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "output".into(), |s| s.to_os_string());
    let mut name = stem;
    name.push(".config.json");
    path.with_file_name(name)
}

pub fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let grid = grid_by_name(&a.grid)?;
    let means = dataset_means(&a.dataset)?;
    let spec = GaussianSequenceSpec {
        means,
        std: a.std,
        samples: a.samples,
        initial_samples: a.initial_samples,
        seed: a.seed,
    };
    let gen = gen_gaussian_sequence(&spec, &grid)?;
    fs::create_dir_all(&a.out)?;
    save_marginals(&gen.dataset, create(&a.out.join(MARGINALS_FILE))?)?;
    save_points(&gen.initial, create(&a.out.join(INITIAL_FILE))?)?;
    write_json(
        &a.out.join(GRID_FILE),
        &GridFile {
            name: a.grid.clone(),
            times: grid.times().to_vec(),
        },
    )?;
    write_json(
        &a.out.join("synth.json"),
        &serde_json::json!({
            "dataset": a.dataset,
            "grid": a.grid,
            "seed": a.seed,
            "samples": a.samples,
            "initial_samples": a.initial_samples,
            "std": a.std,
        }),
    )
}

/// Loads `marginals.csv` + `grid.json` from a directory.
pub fn load_data_dir(dir: &Path) -> CmdResult<(MarginalDataset, GridFile)> {
    let gf: GridFile = serde_json::from_reader(open(&dir.join(GRID_FILE))?)?;
    let grid = TimeGrid::new(gf.times.clone())?;
    let data = load_marginals(open(&dir.join(MARGINALS_FILE))?, &grid)?;
    Ok((data, gf))
}

fn resolve_run_config(a: &TrainArgs) -> CmdResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_reader(open(p)?)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    macro_rules! set {
        ($($f:ident),*) => {$( if let Some(v) = a.$f.clone() { t.$f = v; } )*};
    }
    set!(
        k,
        sigma,
        steps,
        lr,
        weight_decay,
        batch_size,
        seed,
        schedule,
        spline
    );
    if a.hold_out.is_some() {
        t.hold_out = a.hold_out;
    }
    if let Some(g) = &a.grid {
        cfg.grid = Some(g.clone());
    }
    if let Some(p) = &a.data {
        cfg.data = Some(DataSource::Csv { path: p.clone() });
    } else if let Some(name) = &a.dataset {
        cfg.data = Some(DataSource::Builtin {
            name: name.clone(),
            seed: a.data_seed.unwrap_or(0),
        });
    } else if let (Some(s), Some(DataSource::Builtin { seed, .. })) =
        (a.data_seed, cfg.data.as_mut())
    {
        *seed = s;
    }
    cfg.out = Some(a.out.clone());
    Ok(cfg)
}

fn load_run_data(cfg: &mut RunConfig) -> CmdResult<MarginalDataset> {
    let source = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::usage("one of --data or --dataset is required"))?;
    let data = match source {
        DataSource::Builtin { name, seed } => {
            let grid_name = cfg
                .grid
                .clone()
                .ok_or_else(|| Failure::usage("--grid is required with --dataset"))?;
            let grid = grid_by_name(&grid_name)?;
            let spec = GaussianSequenceSpec::new(dataset_means(&name)?, seed);
            gen_gaussian_sequence(&spec, &grid)?.dataset
        }
        DataSource::Csv { path } if path.is_dir() => {
            let (data, gf) = load_data_dir(&path)?;
            if cfg.grid.is_none() {
                cfg.grid = Some(gf.name);
            }
            data
        }
        DataSource::Csv { path } => {
            let grid_name = cfg
                .grid
                .clone()
                .ok_or_else(|| Failure::usage("--grid is required with a marginal CSV file"))?;
            load_marginals(open(&path)?, &grid_by_name(&grid_name)?)?
        }
    };
    cfg.grid_times = data.times().to_vec();
    Ok(data)
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult {
    let mut cfg = resolve_run_config(a)?;
    let data = load_run_data(&mut cfg)?;
    cfg.train.validate()?;
    let outcome = train(&data, &cfg.train)?;
    fs::create_dir_all(&a.out)?;
    let mut w = create(&a.out.join(FLOW_CKPT))?;
    outcome
        .flow
        .write_checkpoint(Some(&outcome.flow_opt), &mut w)?;
    w.flush()?;
    let mut w = create(&a.out.join(SCORE_CKPT))?;
    outcome
        .score
        .write_checkpoint(Some(&outcome.score_opt), &mut w)?;
    w.flush()?;
    write_loss_log(&outcome.history, create(&a.out.join(LOSS_FILE))?)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)
}

fn read_model(path: &Path) -> CmdResult<Mlp> {
    let r = open(path)?;
    Mlp::read_checkpoint(r)
        .map(|(m, _)| m)
        .map_err(|e| Failure::checkpoint(format!("{}: {e}", path.display())))
}

/// Trained networks plus the run configuration that produced them.
pub struct LoadedModel {
    pub flow: Mlp,
    pub score: Mlp,
    pub config: RunConfig,
}

pub fn load_model(dir: &Path) -> CmdResult<LoadedModel> {
    let config: RunConfig = serde_json::from_reader(open(&dir.join(CONFIG_FILE))?)?;
    let flow = read_model(&dir.join(FLOW_CKPT))?;
    let score = read_model(&dir.join(SCORE_CKPT))?;
    if flow.widths() != score.widths() {
        return Err(Failure::checkpoint(
            "flow and score checkpoints disagree on architecture",
        ));
    }
    Ok(LoadedModel {
        flow,
        score,
        config,
    })
}

#[derive(Debug, Serialize)]
struct GenerateRecord<'a> {
    model: &'a Path,
    initial: &'a Path,
    steps_per_unit: usize,
    particles: usize,
    seed: u64,
    sigma: f64,
    deterministic: bool,
    t0: f64,
    t1: f64,
    run: &'a RunConfig,
}

pub fn cmd_generate(a: &GenerateArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let initial_path = match &a.initial {
        Some(p) => p.clone(),
        None => match &model.config.data {
            Some(DataSource::Csv { path }) if path.is_dir() => path.join(INITIAL_FILE),
            _ => return Err(Failure::usage("--initial is required for this model")),
        },
    };
    let pool = load_points(open(&initial_path)?)?;
    if pool.dim() != model.flow.dim() {
        return Err(Failure::checkpoint(format!(
            "checkpoint dimension {} does not match initial conditions of dimension {}",
            model.flow.dim(),
            pool.dim()
        )));
    }
    let n = a.particles.unwrap_or(pool.rows());
    if n == 0 || n > pool.rows() {
        return Err(Failure::usage(format!(
            "--particles must be in 1..={} (size of the initial pool)",
            pool.rows()
        )));
    }
    let x0 = pool.select(&(0..n).collect::<Vec<_>>());
    let (t0, t1) = match model.config.grid_times.as_slice() {
        [first, .., last] => (*first, *last),
        _ => (0.0, 1.0),
    };
    let grid = uniform_grid(t0, t1, a.steps_per_unit)?;
    let sigma = a.sigma.unwrap_or(model.config.train.sigma);
    let traj = if a.deterministic {
        integrate_ode(&model.flow, &x0, &grid)?
    } else {
        let spec = SdeSpec::new(&model.flow, Some(&model.score), sigma)?;
        integrate_sde(&spec, &x0, &grid, a.seed)?
    };
    traj.write_csv(create(&a.out)?)?;
    write_json(
        &sidecar(&a.out),
        &GenerateRecord {
            model: &a.model,
            initial: &initial_path,
            steps_per_unit: a.steps_per_unit,
            particles: n,
            seed: a.seed,
            sigma,
            deterministic: a.deterministic,
            t0,
            t1,
            run: &model.config,
        },
    )
}

/// One evaluated marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub index: usize,
    pub time: f64,
    /// Grid time of the trajectory step actually compared.
    pub trajectory_time: f64,
    #[serde(flatten)]
    pub report: MetricReport,
}

fn kernels_for(a: &EvaluateArgs, x: &Points, y: &Points) -> (Kernel, Kernel) {
    let (g, m) = default_kernels(x, y);
    let g = a.gamma.map_or(g, |gamma| Kernel::Gaussian { gamma });
    let m = match &a.mixture_gammas {
        Some(gs) => Kernel::Mixture { gammas: gs.clone() },
        None => match a.gamma {
            Some(base) => Kernel::Mixture {
                gammas: MIXTURE_SCALES.iter().map(|s| s * base).collect(),
            },
            None => m,
        },
    };
    (g, m)
}

/// Metrics between the trajectory states nearest to marginal `index` and
/// that marginal.
pub fn evaluate_index(
    traj: &Trajectories,
    data: &MarginalDataset,
    index: usize,
    kernels: impl Fn(&Points, &Points) -> (Kernel, Kernel),
) -> CmdResult<Evaluation> {
    let m = data
        .marginals
        .get(index)
        .ok_or_else(|| Failure::usage(format!("index {index} out of range 0..{}", data.len())))?;
    let t = m.source_time;
    let step = traj.nearest_step(t).ok_or_else(|| Failure {
        code: EXIT_EVAL_RANGE,
        message: format!(
            "time {t} is outside the trajectory range [{}, {}]",
            traj.times()[0],
            traj.times()[traj.times().len() - 1]
        ),
    })?;
    let generated = traj.at_step(step);
    let report = evaluate(&generated, &m.points, Some(kernels(&generated, &m.points)))?;
    Ok(Evaluation {
        index,
        time: t,
        trajectory_time: traj.times()[step],
        report,
    })
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CmdResult {
    let traj = Trajectories::read_csv(open(&a.trajectories)?)?;
    let (data, _) = load_data_dir(&a.data)?;
    let indices: Vec<usize> = if a.all {
        (1..data.len()).collect()
    } else if let Some(i) = a.index {
        vec![i]
    } else if let Some(t) = a.time {
        let i = data.grid.index_of(t).ok_or_else(|| Failure {
            code: EXIT_EVAL_RANGE,
            message: format!("time {t} is not a marginal time of the dataset"),
        })?;
        vec![i]
    } else {
        return Err(Failure::usage(
            "one of --index, --time or --all is required",
        ));
    };
    let evals = indices
        .into_iter()
        .map(|i| evaluate_index(&traj, &data, i, |x, y| kernels_for(a, x, y)))
        .collect::<CmdResult<Vec<_>>>()?;
    if a.all {
        let mean_w1 = evals.iter().map(|e| e.report.w1).sum::<f64>() / evals.len() as f64;
        write_json(
            &a.out,
            &serde_json::json!({ "mean_w1": mean_w1, "evaluations": evals }),
        )
    } else {
        write_json(&a.out, &evals[0])
    }
}

pub fn cmd_splines(a: &SplinesArgs) -> CmdResult {
    let grid = grid_by_name(&a.grid)?;
    let pts = load_points(open(&a.points)?)?;
    if pts.rows() != grid.len() {
        return Err(Failure::usage(format!(
            "point file has {} rows but grid {} has {} times",
            pts.rows(),
            a.grid,
            grid.len()
        )));
    }
    if a.samples_per_interval == 0 {
        return Err(Failure::usage("--samples-per-interval must be positive"));
    }
    let times = grid.times();
    let mut out = csv::Writer::from_writer(create(&a.out)?);
    let mut header = vec!["t".to_string(), "window_id".into(), "family".into()];
    header.extend((0..pts.dim()).map(|j| format!("x_{j}")));
    out.write_record(&header)
        .map_err(|e| Failure::usage(e.to_string()))?;
    for i in window_starts(times.len(), a.k)? {
        let idx: Vec<usize> = (i..=i + a.k).collect();
        let wt = times[i..=i + a.k].to_vec();
        for family in [SplineFamily::MonotoneHermite, SplineFamily::NaturalCubic] {
            let curve = family.fit(Knots::new(wt.clone(), pts.select(&idx))?)?;
            let n = a.samples_per_interval * a.k;
            for s in 0..=n {
                let t = if s == n {
                    wt[a.k]
                } else {
                    wt[0] + (wt[a.k] - wt[0]) * s as f64 / n as f64
                };
                let x = curve.eval(t)?;
                let mut rec = vec![t.to_string(), i.to_string(), family.name().to_string()];
                rec.extend(x.iter().map(|v| v.to_string()));
                out.write_record(&rec)
                    .map_err(|e| Failure::usage(e.to_string()))?;
            }
        }
    }
    out.flush()?;
    write_json(
        &sidecar(&a.out),
        &serde_json::json!({
            "points": a.points,
            "grid": a.grid,
            "k": a.k,
            "samples_per_interval": a.samples_per_interval,
        }),
    )
}
