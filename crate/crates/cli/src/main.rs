//! `increg` command line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 registration
//! produced no component.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use increg::engine::{mst_baseline, run_incremental_with_report, RunOutcome};
use increg::eval::{emit_report, evaluate, GroundTruth, ReportFormat};
use increg::graph::{build_graph, ScanGraph};
use increg::io::ply::{write_ply, PlyEncoding};
use increg::io::{
    fuse_clouds, load_dataset, read_graph, read_models, read_poses, write_graph, write_models, write_poses,
    write_scene, Dataset,
};
use increg::refine::{
    build_coarse_model, coarse_configs, quantize_matches, refine_model, GeometricFeature, ScanFeatures,
};
use increg::synth::{generate_synthetic_scene, SceneConfig, SceneKind};
use increg::tracks::PoseMap;
use increg::{Error, PipelineConfig, RegistrationModel};

#[derive(Parser)]
#[command(name = "increg", version, about = "Incremental multiview point cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and verify the scan graph, then dump it as JSON.
    Graph(GraphArgs),
    /// Register scans incrementally (or with the MST baseline).
    Register(RegisterArgs),
    /// Quantize dense matches into a coarse model, or load one, and refine its tracks.
    Refine(RefineArgs),
    /// Score estimated poses against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Write all posed clouds into one world-frame PLY.
    Export(ExportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GraphArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output JSON path.
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Mst,
}

#[derive(Args)]
struct RegisterArgs {
    /// Scan graph written by `graph`.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    graph: Option<PathBuf>,
    /// Dataset manifest; the graph is built on the fly.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for poses.txt and models.json.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Global BA after this many registrations.
    #[arg(long)]
    global_every: Option<usize>,
    /// Global BA once the model grew by this fraction.
    #[arg(long)]
    global_growth: Option<f64>,
    #[arg(long)]
    no_local_ba: bool,
    #[arg(long)]
    no_global_ba: bool,
    /// Pool all candidate matches instead of clustering them.
    #[arg(long)]
    no_clustering: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RefineArgs {
    /// Dataset manifest; supplies the clouds and, without --model, the dense matches.
    #[arg(long)]
    manifest: PathBuf,
    /// Coarse models written by `register` or a previous `refine`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    /// Quantization cell size (m).
    #[arg(long)]
    cell: Option<f64>,
    /// Patch size.
    #[arg(short, long)]
    k: Option<usize>,
    /// Patch radius (m).
    #[arg(long, short)]
    r: Option<f64>,
    /// Refinement passes.
    #[arg(long)]
    repeat: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated poses.
    #[arg(long)]
    poses: PathBuf,
    /// Ground-truth poses; taken from the manifest when absent.
    #[arg(long, required_unless_present = "manifest")]
    ground_truth: Option<PathBuf>,
    /// Dataset manifest; its clouds are used for registration recall.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Report path; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "room")]
    kind: String,
    #[arg(long, default_value_t = 8)]
    scans: usize,
    #[arg(long)]
    overlap: Option<f64>,
    /// Point noise standard deviation (m).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Fraction of wrong keypoint matches.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    keypoints: Option<usize>,
    /// Also write this many dense point matches per overlapping pair.
    #[arg(long)]
    dense: Option<usize>,
    #[arg(long)]
    ascii: bool,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// Only this component; all of them when absent.
    #[arg(long)]
    component: Option<usize>,
    #[arg(long)]
    ascii: bool,
    #[arg(long, short)]
    out: PathBuf,
}

enum Failure {
    Data(Error),
    NoComponents,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn encoding(ascii: bool) -> PlyEncoding {
    if ascii {
        PlyEncoding::Ascii
    } else {
        PlyEncoding::BinaryLittleEndian
    }
}

fn write_outcome(dir: &Path, components: &[PoseMap], models: Option<&RunOutcome>, unregistered: &[usize]) -> CmdResult {
    fs::create_dir_all(dir)?;
    write_poses(&dir.join("poses.txt"), components, unregistered)?;
    if let Some(o) = models {
        write_models(&dir.join("models.json"), &o.models, &o.unregistered)?;
    }
    info!(
        "{} component(s), {} unregistered scan(s)",
        components.len(),
        unregistered.len()
    );
    if components.is_empty() {
        return Err(Failure::NoComponents);
    }
    Ok(())
}

fn graph(args: GraphArgs) -> CmdResult {
    let cfg = load_config(&args.common)?;
    let data = load_dataset(&args.manifest)?;
    let g = build_graph(&data.sources(), &cfg.graph_config())?;
    info!("{} scans, {} verified edges", g.node_count(), g.edges.len());
    write_graph(&args.out, &g)?;
    Ok(())
}

fn register(args: RegisterArgs) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.global_every {
        cfg.ba.global_every = n;
    }
    if let Some(g) = args.global_growth {
        cfg.ba.global_growth = g;
    }
    cfg.ba.local &= !args.no_local_ba;
    cfg.ba.global &= !args.no_global_ba;
    cfg.engine.clustering &= !args.no_clustering;
    cfg.validate()?;
    let g: ScanGraph = match (&args.graph, &args.manifest) {
        (Some(p), _) => read_graph(p)?,
        (None, Some(m)) => build_graph(&load_dataset(m)?.sources(), &cfg.graph_config())?,
        (None, None) => unreachable!("clap requires one of --graph and --manifest"),
    };
    if args.baseline == Some(Baseline::Mst) {
        let components = mst_baseline(&g);
        let unregistered: Vec<usize> = (0..g.node_count())
            .filter(|s| !components.iter().any(|c| c.contains_key(s)))
            .collect();
        return write_outcome(&args.out, &components, None, &unregistered);
    }
    let outcome = run_incremental_with_report(&g, &cfg.engine_config())?;
    let components: Vec<PoseMap> = outcome.models.iter().map(|m| m.poses.clone()).collect();
    write_outcome(&args.out, &components, Some(&outcome), &outcome.unregistered)
}

fn coarse_from_dense(data: &Dataset, cfg: &PipelineConfig) -> Result<RunOutcome, Error> {
    let dense = data
        .dense_matches
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("manifest has no dense matches; pass --model".into()))?;
    let quantized = quantize_matches(dense, data.clouds.len(), cfg.refine.cell)?;
    let (g, e) = coarse_configs(cfg.refine.cell, &cfg.graph_config(), &cfg.engine_config());
    build_coarse_model(&data.clouds, &quantized, data.overlap.clone(), &g, &e)
}

fn refine(args: RefineArgs) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    if let Some(c) = args.cell {
        cfg.refine.cell = c;
    }
    if let Some(k) = args.k {
        cfg.refine.k = k;
    }
    if let Some(r) = args.r {
        cfg.refine.radius = r;
    }
    if let Some(n) = args.repeat {
        cfg.refine.repeat = n;
    }
    cfg.validate()?;
    let data = load_dataset(&args.manifest)?;
    fs::create_dir_all(&args.out)?;
    let (coarse, unregistered): (Vec<RegistrationModel>, Vec<usize>) = match &args.model {
        Some(p) => read_models(p)?,
        None => {
            let o = coarse_from_dense(&data, &cfg)?;
            write_models(&args.out.join("coarse_models.json"), &o.models, &o.unregistered)?;
            let poses: Vec<PoseMap> = o.models.iter().map(|m| m.poses.clone()).collect();
            write_poses(&args.out.join("coarse_poses.txt"), &poses, &o.unregistered)?;
            (o.models, o.unregistered)
        }
    };
    let feature = GeometricFeature::default();
    let features: Vec<ScanFeatures> = data.clouds.iter().map(|c| ScanFeatures::new(c, &feature)).collect();
    let rc = cfg.refine_config();
    let mut refined = Vec::with_capacity(coarse.len());
    for m in &coarse {
        let (r, report) = refine_model(m, &features, &rc)?;
        info!(
            "component {}: {} refined, {} degenerate, {} rejected, energy {:.6e} -> {:.6e}",
            m.component, report.refined, report.degenerate, report.rejected, report.coarse_energy, report.final_energy
        );
        refined.push(r);
    }
    let outcome = RunOutcome {
        models: refined,
        unregistered,
    };
    let components: Vec<PoseMap> = outcome.models.iter().map(|m| m.poses.clone()).collect();
    write_outcome(&args.out, &components, Some(&outcome), &outcome.unregistered)
}

fn eval(args: EvalArgs) -> CmdResult {
    let cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let data = args.manifest.as_deref().map(load_dataset).transpose()?;
    let gt = match (&args.ground_truth, &data) {
        (Some(p), _) => GroundTruth {
            poses: read_poses(p)?.merged(),
        },
        (None, Some(d)) => d
            .ground_truth
            .clone()
            .ok_or_else(|| Error::InvalidInput("manifest has no ground truth".into()))?,
        (None, None) => unreachable!("clap requires --ground-truth or --manifest"),
    };
    let est = read_poses(&args.poses)?;
    let clouds = data.map(|d| d.clouds).unwrap_or_default();
    let report = evaluate(&est.components, &gt, &clouds, &cfg.eval_config())?;
    let format = match args.format {
        Format::Text => ReportFormat::Text,
        Format::Json => ReportFormat::Json,
    };
    let text = emit_report(&report, format);
    match &args.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn synth(args: SynthArgs) -> CmdResult {
    let defaults = SceneConfig::default();
    let cfg = SceneConfig {
        kind: args.kind.parse::<SceneKind>()?,
        scans: args.scans,
        overlap: args.overlap.unwrap_or(defaults.overlap),
        noise: args.noise,
        outlier_rate: args.outliers,
        seed: args.seed,
        groups: args.groups,
        spacing: args.spacing.unwrap_or(defaults.spacing),
        keypoints: args.keypoints.unwrap_or(defaults.keypoints),
        ..defaults
    };
    let scene = generate_synthetic_scene(&cfg)?;
    let dense = args.dense.map(|n| scene.dense_match_set(n, args.seed));
    let manifest = write_scene(&args.out, &scene, dense.as_ref(), encoding(args.ascii))?;
    info!("wrote {}", manifest.display());
    Ok(())
}

fn export(args: ExportArgs) -> CmdResult {
    let data = load_dataset(&args.manifest)?;
    let est = read_poses(&args.poses)?;
    let poses = match args.component {
        Some(c) => est
            .components
            .get(c)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no component {c} in {}", args.poses.display())))?,
        None => est.merged(),
    };
    if poses.is_empty() {
        return Err(Failure::NoComponents);
    }
    let fused = fuse_clouds(&data.clouds, &poses)?;
    write_ply(&args.out, &fused, encoding(args.ascii))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Graph(a) => graph(a),
        Command::Register(a) => register(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::NoComponents) => {
            eprintln!("error: registration produced no component");
            ExitCode::from(3)
        }
    }
}
