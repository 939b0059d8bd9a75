//! `nptc` command-line tool: stage-wise preprocessing with hashed artifacts, dataset
//! generation, training and evaluation.

mod artifact;
mod cache;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nptc::eikonal::{Axis, SeedPolicy, Side};
use nptc::frames::NormalPolicy;
use nptc::network::{OptimizerConfig, Task};
use nptc::operator::TapSpacing;
use nptc::pipeline::EpsilonPolicy;
use nptc::synthetic::ShapeFamily;
use nptc::NptcError;

use config::{PlaneSeed, RunConfig, Split};

#[derive(Parser)]
#[command(name = "nptc", version, about = "Narrow-band parallel transport convolution on point clouds")]
struct Cli {
    /// JSON run config; its keys override the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Narrow band around a cloud.
    Voxelize(VoxelizeArgs),
    /// Fast-marching distance on a band, interpolated to the points.
    Distance(DistanceArgs),
    /// Tangent frames from a distance artifact.
    Frames(FramesArgs),
    /// Farthest point sampling.
    Fps(FpsArgs),
    /// Convolution operator table from a frames artifact.
    OpBuild(OpBuildArgs),
    /// Applies an operator with random weights to per-point features.
    Conv(ConvArgs),
    /// Synthetic labelled dataset.
    GenData(GenDataArgs),
    /// Trains a network on a generated dataset.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Colored PLY of a distance artifact.
    ExportPly(ExportPlyArgs),
    /// Finite-difference check of a small network's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct VoxelizeArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    res: Option<usize>,
    /// `auto` (two voxels), `<c>h` (c voxels) or an absolute width.
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistanceArgs {
    #[arg(long)]
    band: Option<PathBuf>,
    /// `min:<axis>`, `index:<i>` or `plane:<axis>:<low|high>`.
    #[arg(long)]
    seed_policy: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalsArg {
    Auto,
    Input,
    Lpca,
}

#[derive(Args)]
struct FramesArgs {
    #[arg(long)]
    rho: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    normals: Option<NormalsArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FpsArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    start: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OpBuildArgs {
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Output points from an FPS artifact; all points when omitted.
    #[arg(long)]
    fps: Option<PathBuf>,
    /// Taps per axis (odd).
    #[arg(long)]
    taps: Option<usize>,
    /// Tap spacing: `auto` or an absolute value.
    #[arg(long)]
    delta: Option<String>,
    /// Multiplier for the automatic spacing.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvArgs {
    #[arg(long)]
    op: Option<PathBuf>,
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    fps: Option<PathBuf>,
    /// Whitespace table of input features; centered coordinates when omitted.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    c_out: Option<usize>,
    #[arg(long)]
    weight_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    clouds_per_class: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated shape families.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    no_rotate: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Segmentation,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory receiving `model.ckpt` and `metrics.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Number of augmented passes averaged per cloud.
    #[arg(long)]
    voting: Option<usize>,
    #[arg(long)]
    voting_seed: Option<u64>,
    /// Metrics CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExportPlyArgs {
    #[arg(long)]
    rho: Option<PathBuf>,
    /// Adds the u1 components as extra vertex properties.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    taps: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    /// Comma-separated seeds, one check each.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    tol: Option<f64>,
}

fn flag_error(flag: &str, value: &str) -> NptcError {
    NptcError::Config(format!("--{flag}: cannot parse {value:?}"))
}

fn parse_eps(s: &str) -> nptc::Result<EpsilonPolicy> {
    if s == "auto" {
        return Ok(EpsilonPolicy::Auto);
    }
    if let Some(c) = s.strip_suffix('h') {
        return c.parse().map(EpsilonPolicy::Cells).map_err(|_| flag_error("eps", s));
    }
    s.parse().map(EpsilonPolicy::Fixed).map_err(|_| flag_error("eps", s))
}

fn parse_seed_policy(s: &str, cfg: &mut RunConfig) -> nptc::Result<()> {
    let parts: Vec<&str> = s.split(':').collect();
    let axis = |a: &str| Axis::parse(a).ok_or_else(|| flag_error("seed-policy", s));
    match parts.as_slice() {
        ["min", a] => cfg.pipeline.seed_policy = SeedPolicy::MinCoordinate(axis(a)?),
        ["index", i] => {
            cfg.pipeline.seed_policy =
                SeedPolicy::FixedIndex(i.parse().map_err(|_| flag_error("seed-policy", s))?)
        }
        ["plane", a, side] => {
            let side = match *side {
                "low" => Side::Low,
                "high" => Side::High,
                _ => return Err(flag_error("seed-policy", s)),
            };
            cfg.plane_seed = Some(PlaneSeed { axis: axis(a)?, side });
        }
        _ => return Err(flag_error("seed-policy", s)),
    }
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn apply_flags(command: Command, cfg: &mut RunConfig) -> nptc::Result<Command> {
    let p = &mut cfg.paths;
    match &command {
        Command::Voxelize(a) => {
            set_path(&mut p.input, a.input.clone());
            set_path(&mut p.out, a.out.clone());
            set(&mut cfg.pipeline.resolution, a.res);
            if let Some(e) = &a.eps {
                cfg.pipeline.epsilon = parse_eps(e)?;
            }
        }
        Command::Distance(a) => {
            set_path(&mut p.band, a.band.clone());
            set_path(&mut p.out, a.out.clone());
            if let Some(s) = &a.seed_policy {
                parse_seed_policy(s, cfg)?;
            }
        }
        Command::Frames(a) => {
            set_path(&mut p.rho, a.rho.clone());
            set_path(&mut p.out, a.out.clone());
            set(&mut cfg.pipeline.k, a.k);
            if let Some(n) = a.normals {
                cfg.pipeline.normal_policy = match n {
                    NormalsArg::Auto => None,
                    NormalsArg::Input => Some(NormalPolicy::UseInput),
                    NormalsArg::Lpca => Some(NormalPolicy::LpcaCentroidOriented),
                };
            }
        }
        Command::Fps(a) => {
            set_path(&mut p.input, a.input.clone());
            set_path(&mut p.out, a.out.clone());
            if a.n.is_some() {
                cfg.fps.n = a.n;
            }
            set(&mut cfg.fps.start, a.start);
        }
        Command::OpBuild(a) => {
            set_path(&mut p.frames, a.frames.clone());
            set_path(&mut p.fps, a.fps.clone());
            set_path(&mut p.out, a.out.clone());
            set(&mut cfg.kernel.taps_per_axis, a.taps);
            match a.delta.as_deref() {
                None | Some("auto") => {
                    if let Some(alpha) = a.alpha {
                        cfg.kernel.spacing = TapSpacing::Auto { alpha };
                    }
                }
                Some(d) => {
                    cfg.kernel.spacing = TapSpacing::Fixed(d.parse().map_err(|_| flag_error("delta", d))?)
                }
            }
        }
        Command::Conv(a) => {
            set_path(&mut p.operator, a.op.clone());
            set_path(&mut p.frames, a.frames.clone());
            set_path(&mut p.fps, a.fps.clone());
            set_path(&mut p.features, a.features.clone());
            set_path(&mut p.out, a.out.clone());
            set(&mut cfg.conv.c_out, a.c_out);
            set(&mut cfg.conv.weight_seed, a.weight_seed);
        }
        Command::GenData(a) => {
            set_path(&mut p.out, a.out.clone());
            let d = &mut cfg.dataset;
            set(&mut d.clouds_per_class, a.clouds_per_class);
            set(&mut d.points_per_cloud, a.points);
            set(&mut d.seed, a.seed);
            set(&mut d.test_fraction, a.test_fraction);
            if a.no_rotate {
                d.rotate = false;
            }
            if let Some(names) = &a.families {
                d.families = names
                    .iter()
                    .map(|n| ShapeFamily::parse(n).ok_or_else(|| flag_error("families", n)))
                    .collect::<nptc::Result<_>>()?;
            }
        }
        Command::Train(a) => {
            set_path(&mut p.data, a.data.clone());
            set_path(&mut p.out, a.out.clone());
            set_path(&mut p.cache_dir, a.cache_dir.clone());
            let t = &mut cfg.train;
            set(&mut t.epochs, a.epochs);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.seed, a.seed);
            if let Some(task) = a.task {
                cfg.network.task = match task {
                    TaskArg::Classification => Task::Classification { classes: 0 },
                    TaskArg::Segmentation => Task::Segmentation { parts: 0 },
                };
            }
            let default_opt = match cfg.network.task {
                Task::Classification { .. } => OptimizerArg::Sgd,
                Task::Segmentation { .. } => OptimizerArg::Adam,
            };
            t.optimizer = match a.optimizer.unwrap_or(default_opt) {
                OptimizerArg::Sgd => OptimizerConfig::sgd(a.lr.unwrap_or(0.1)),
                OptimizerArg::Adam => OptimizerConfig::adam(a.lr.unwrap_or(0.002)),
            };
        }
        Command::Eval(a) => {
            set_path(&mut p.model, a.model.clone());
            set_path(&mut p.data, a.data.clone());
            set_path(&mut p.out, a.out.clone());
            set_path(&mut p.cache_dir, a.cache_dir.clone());
            if let Some(s) = a.split {
                cfg.eval.split = match s {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                    SplitArg::All => Split::All,
                };
            }
            set(&mut cfg.eval.voting_rounds, a.voting);
            set(&mut cfg.eval.voting_seed, a.voting_seed);
        }
        Command::ExportPly(a) => {
            set_path(&mut p.rho, a.rho.clone());
            set_path(&mut p.frames, a.frames.clone());
            set_path(&mut p.out, a.out.clone());
        }
        Command::Gradcheck(a) => {
            let g = &mut cfg.gradcheck;
            set(&mut g.points, a.points);
            set(&mut g.channels, a.channels);
            set(&mut g.taps_per_axis, a.taps);
            set(&mut g.levels, a.levels);
            set(&mut g.seeds, a.seeds.clone());
            set(&mut g.tolerance, a.tol);
        }
    }
    Ok(command)
}

pub(crate) fn log_config(cfg: &RunConfig) {
    eprintln!("config: {}", cfg.to_json());
}

#[derive(Debug)]
enum Failure {
    Core(NptcError),
    GradCheck(String),
}

impl From<NptcError> for Failure {
    fn from(e: NptcError) -> Self {
        Failure::Core(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::default();
    cfg.threads = cli.threads;
    let command = apply_flags(cli.command, &mut cfg)?;
    if let Some(path) = &cli.config {
        cfg = cfg.overlay_file(path)?;
    }
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| NptcError::Config(format!("threads: {e}")))?;
    }
    if !matches!(command, Command::Train(_)) {
        log_config(&cfg);
    }
    match command {
        Command::Voxelize(_) => commands::voxelize(&cfg)?,
        Command::Distance(_) => commands::distance(&cfg)?,
        Command::Frames(_) => commands::frames(&cfg)?,
        Command::Fps(_) => commands::fps(&cfg)?,
        Command::OpBuild(_) => commands::op_build(&cfg)?,
        Command::Conv(_) => commands::conv(&cfg)?,
        Command::GenData(_) => commands::gen_data(&cfg)?,
        Command::Train(_) => commands::train_cmd(cfg)?,
        Command::Eval(_) => commands::eval_cmd(&cfg)?,
        Command::ExportPly(_) => commands::export_ply(&cfg)?,
        Command::Gradcheck(_) => {
            let worst = commands::gradcheck(&cfg)?;
            if !(worst <= cfg.gradcheck.tolerance) {
                return Err(Failure::GradCheck(format!(
                    "max relative error {worst:.3e} exceeds {:.3e}",
                    cfg.gradcheck.tolerance
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (category, message) = match f {
                Failure::Core(e) => (e.category(), e.to_string()),
                Failure::GradCheck(m) => ("GradCheckFailed", m),
            };
            let message = message.replace('\n', " ");
            eprintln!("error[{category}]: {message}");
            ExitCode::FAILURE
        }
    }
}
