//! `pointneuron` command-line entry point.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use pointneuron::connectivity::GaeConfig;
use pointneuron::diff::load_weights;
use pointneuron::encoder::{EncoderConfig, DEFAULT_K};
use pointneuron::metrics::{DEFAULT_DMATCH, DEFAULT_DTHR};
use pointneuron::refine::{DEFAULT_GAP_DIST, DEFAULT_SPUR_LEN};
use pointneuron::selfcheck::{
    gae_gradcheck, skeleton_gradcheck, GRADCHECK_PROBES, GRADCHECK_SEED, GRADCHECK_STEP,
    GRADCHECK_TOL,
};
use pointneuron::skeleton::{DEFAULT_IOU, DEFAULT_LAMBDA};
use pointneuron::swc::{parse_swc, write_swc};
use pointneuron::synth::{write_dataset, SynthConfig};
use pointneuron::trainer::{
    load_training_set, read_file, score, trace, train_connectivity, train_skeleton, Model,
    PipelineConfig, Sampler, TrainConfig,
};
use pointneuron::volume::{read_volume, voxel_to_points, DEFAULT_PATCH_POINTS, DEFAULT_THETA};
use pointneuron::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "pointneuron",
    version,
    about = "Neuron tracing from 3D volumes via point clouds"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset of volumes and ground-truth SWC files.
    Synth(SynthArgs),
    /// Threshold a PNVOL volume into a point CSV (x,y,z,intensity).
    Voxel2point(Voxel2PointArgs),
    /// Train one stage of the model.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Reconstruct an SWC tree from a PNVOL volume.
    Trace(TraceArgs),
    /// Score a predicted SWC against ground truth; prints one JSON line.
    Eval(EvalArgs),
    /// Check analytic gradients of both losses against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand, Debug)]
enum TrainCommand {
    /// Encoder and proposal head.
    Skeleton(TrainSkeletonArgs),
    /// Graph auto-encoder on top of a frozen skeleton stage.
    Connectivity(TrainConnectivityArgs),
}

/// Pipeline and training knobs shared by several subcommands.
#[derive(Args, Debug, Clone)]
pub struct Knobs {
    /// Foreground intensity threshold
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
    /// Points per patch
    #[arg(long, default_value_t = DEFAULT_PATCH_POINTS)]
    pub np: usize,
    /// Objectness loss weight
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Suppression IoU threshold
    #[arg(long, default_value_t = DEFAULT_IOU)]
    pub iou: f64,
    /// Neighbors per EdgeConv graph
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Learning rate [default: 0.001 skeleton, 0.0005 connectivity]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs [default: 200 skeleton, 100 connectivity]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialization, patch sampling and masks
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leaf branches shorter than this are pruned (voxels)
    #[arg(long, default_value_t = DEFAULT_SPUR_LEN)]
    pub spur_len: f64,
    /// Fragments closer than this are joined (voxels)
    #[arg(long, default_value_t = DEFAULT_GAP_DIST)]
    pub gap_dist: f64,
    /// Distance above which a point counts as a structural difference
    #[arg(long, default_value_t = DEFAULT_DTHR)]
    pub dthr: f64,
    /// Matching distance for precision and recall
    #[arg(long, default_value_t = DEFAULT_DMATCH)]
    pub dmatch: f64,
    /// `key = value` file; flags given on the command line win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Knobs {
    fn pipeline(&self, sampler: Sampler) -> PipelineConfig {
        let mut p = PipelineConfig {
            theta: self.theta,
            n_p: self.np,
            encoder: EncoderConfig {
                k: self.k,
                ..EncoderConfig::default()
            },
            gae: GaeConfig::default(),
            sampler,
            spur_len: self.spur_len,
            gap_dist: self.gap_dist,
            seed: self.seed,
            ..PipelineConfig::default()
        };
        p.nms.iou_threshold = self.iou;
        p
    }

    fn train(&self, mut base: TrainConfig) -> CliResult<TrainConfig> {
        base.lr = self.lr.unwrap_or(base.lr);
        base.epochs = self.epochs.unwrap_or(base.epochs);
        base.seed = self.seed;
        base.loss.lambda = self.lambda;
        base.pipeline = self.pipeline(Sampler::Nms);
        base.validate()?;
        Ok(base)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cube edge length in voxels
    #[arg(long, default_value_t = 64)]
    dims: usize,
    /// Gaussian noise sigma
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    noise: f64,
    /// Fraction of voxels set to full intensity
    #[arg(long, default_value_t = SynthConfig::default().speckle_density)]
    speckle: f64,
    /// Erased runs per volume
    #[arg(long, default_value_t = 0)]
    gaps: usize,
}

#[derive(Args, Debug)]
struct Voxel2PointArgs {
    /// PNVOL volume
    input: PathBuf,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
    /// Foreground intensity threshold
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
}

#[derive(Args, Debug)]
struct TrainSkeletonArgs {
    /// Dataset directory written by `synth`
    #[arg(long)]
    data: PathBuf,
    /// Output directory for weights and loss history
    #[arg(long)]
    out: PathBuf,
    /// Drop the offset (Chamfer) term
    #[arg(long)]
    no_offsets: bool,
    /// Drop the objectness term
    #[arg(long)]
    no_objectness: bool,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args, Debug)]
struct TrainConnectivityArgs {
    /// Dataset directory written by `synth`
    #[arg(long)]
    data: PathBuf,
    /// Skeleton weights from `train skeleton`
    #[arg(long)]
    skeleton: PathBuf,
    /// Output directory for the combined model and loss history
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplerArg {
    Nms,
    Fps,
    Uniform,
}

impl From<SamplerArg> for Sampler {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Nms => Sampler::Nms,
            SamplerArg::Fps => Sampler::Fps,
            SamplerArg::Uniform => Sampler::Uniform,
        }
    }
}

#[derive(Args, Debug)]
struct TraceArgs {
    /// PNVOL volume
    input: PathBuf,
    /// Combined model from `train connectivity`
    #[arg(long)]
    model: PathBuf,
    /// Output SWC
    #[arg(long)]
    out: PathBuf,
    /// Skeletal point selection
    #[arg(long, value_enum, default_value_t = SamplerArg::Nms)]
    sampler: SamplerArg,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted SWC
    pred: PathBuf,
    /// Ground-truth SWC
    gt: PathBuf,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Probed parameter entries per loss
    #[arg(long, default_value_t = GRADCHECK_PROBES)]
    probes: usize,
    /// Central-difference step
    #[arg(long, default_value_t = GRADCHECK_STEP)]
    step: f64,
    /// Seed of the check instance
    #[arg(long, default_value_t = GRADCHECK_SEED)]
    seed: u64,
}

fn leaf(m: &ArgMatches) -> &ArgMatches {
    match m.subcommand() {
        Some((_, sub)) => leaf(sub),
        None => m,
    }
}

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    Ok(read_file(path)?)
}

fn write_output(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn run_synth(a: &SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        seed: a.seed,
        dims: [a.dims; 3],
        noise_sigma: a.noise,
        speckle_density: a.speckle,
        gaps: a.gaps,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let m = write_dataset(&a.out, &cfg, a.count)?;
    println!("wrote {} volumes to {}", m.volumes.len(), a.out.display());
    Ok(())
}

fn run_voxel2point(a: &Voxel2PointArgs) -> CliResult {
    let vol = read_volume(&read_input(&a.input)?)?;
    let cloud = voxel_to_points(&vol, a.theta)?;
    if cloud.is_empty() {
        log::warn!("no voxels above theta={}", a.theta);
    }
    let mut text = String::from("x,y,z,intensity\n");
    for p in &cloud.points {
        let [x, y, z] = p.position;
        let _ = writeln!(text, "{x},{y},{z},{}", p.intensity);
    }
    write_output(&a.out, text.as_bytes())?;
    println!("{} points", cloud.len());
    Ok(())
}

fn run_train_skeleton(a: &TrainSkeletonArgs) -> CliResult {
    let mut cfg = a.knobs.train(TrainConfig::skeleton())?;
    cfg.loss.use_offsets = !a.no_offsets;
    cfg.loss.use_objectness = !a.no_objectness;
    let volumes = load_training_set(&a.data, cfg.pipeline.theta)?;
    let out = train_skeleton(&volumes, &cfg, Some(&a.out))?;
    println!(
        "skeleton stage: {} epochs, final loss {:.4}",
        out.history.len(),
        out.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run_train_connectivity(a: &TrainConnectivityArgs) -> CliResult {
    let cfg = a.knobs.train(TrainConfig::connectivity())?;
    let skeleton = load_weights(&read_input(&a.skeleton)?)?;
    let volumes = load_training_set(&a.data, cfg.pipeline.theta)?;
    let out = train_connectivity(&skeleton, &volumes, &cfg, Some(&a.out))?;
    println!(
        "connectivity stage: {} epochs, final loss {:.4}",
        out.history.len(),
        out.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run_trace(a: &TraceArgs) -> CliResult {
    let cfg = a.knobs.pipeline(a.sampler.into());
    cfg.nms.validate()?;
    let model = Model::from_bytes(&read_input(&a.model)?)?;
    let vol = read_volume(&read_input(&a.input)?)?;
    let tree = trace(&model, &vol, &cfg)?;
    write_output(&a.out, &write_swc(&tree)?)?;
    println!("{} nodes, {} roots", tree.len(), tree.root_count());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> CliResult {
    let pred = parse_swc(&read_input(&a.pred)?)?;
    let gt = parse_swc(&read_input(&a.gt)?)?;
    let report = score(&pred, &gt, a.knobs.dthr, a.knobs.dmatch)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| CliError::Data(e.to_string()))?
    );
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> CliResult {
    if a.probes == 0 || !(a.step > 0.0) {
        return Err(CliError::Usage("probes and step must be positive".into()));
    }
    let enc = EncoderConfig::default();
    let skel = skeleton_gradcheck(&enc, a.probes, a.step, a.seed)?;
    let gae = gae_gradcheck(
        &GaeConfig::default(),
        enc.feature_dim + 4,
        a.probes,
        a.step,
        a.seed,
    )?;
    let mut ok = true;
    for (name, r) in [("skeleton", &skel), ("connectivity", &gae)] {
        let pass = r.max_rel_error <= GRADCHECK_TOL;
        ok &= pass;
        println!(
            "{name}: max relative error {:.3e} over {} probes ({})",
            r.max_rel_error,
            r.probes.len(),
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "gradient check exceeded tolerance {GRADCHECK_TOL:e}"
        )))
    }
}

fn dispatch(cmd: Command, matches: &ArgMatches) -> CliResult {
    let m = leaf(matches);
    match cmd {
        Command::Synth(a) => run_synth(&a),
        Command::Voxel2point(a) => run_voxel2point(&a),
        Command::Train(TrainCommand::Skeleton(mut a)) => {
            config::apply_config(&mut a.knobs, m)?;
            run_train_skeleton(&a)
        }
        Command::Train(TrainCommand::Connectivity(mut a)) => {
            config::apply_config(&mut a.knobs, m)?;
            run_train_connectivity(&a)
        }
        Command::Trace(mut a) => {
            config::apply_config(&mut a.knobs, m)?;
            run_trace(&a)
        }
        Command::Eval(mut a) => {
            config::apply_config(&mut a.knobs, m)?;
            run_eval(&a)
        }
        Command::Gradcheck(a) => run_gradcheck(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprintln!("error: a subcommand is required\n");
                    let _ = e.print();
                    ExitCode::from(1)
                }
                _ => {
                    let _ = e.print();
                    ExitCode::from(1)
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.cmd, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
