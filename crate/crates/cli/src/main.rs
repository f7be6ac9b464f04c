use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genreg_core::bench::{self, BenchConfig, PrCurve};
use genreg_core::features::{
    read_features, sidecar_path, FeatureData, FeatureField, NearestNeighbor, ViewFeatureStack,
};
use genreg_core::geometry::{voxel_downsample, RigidTransform};
use genreg_core::io::{read_camera, read_cloud, read_depth, write_cloud, write_depth};
use genreg_core::pipeline::{self, BranchInputs, FusionMode, GeoBranch, ImageBranch, PipelineConfig};
use genreg_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "genreg", version, about = "Point cloud registration with fused image and geometric correspondences")]
#[command(after_help = "Set GENREG_THREADS to cap the number of worker threads.\n\
Exit status: 0 success, 1 registration failure, 2 usage or format error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Back-project a depth image into a point cloud
    Lift(LiftArgs),
    /// Render a point cloud into a depth (pinhole) or range (f-theta) image
    Project(ProjectArgs),
    /// Estimate the rigid transform aligning a source cloud to a target cloud
    Register(RegisterArgs),
    /// Run the synthetic benchmark and write CSV/JSON reports
    Bench(BenchArgs),
    /// Precision-recall sweep of mutual nearest-neighbor matches
    PrCurve(PrCurveArgs),
}

#[derive(Args)]
struct LiftArgs {
    /// Depth image: 16-bit PNG in millimeters, or raw little-endian f32 meters
    #[arg(long)]
    depth: PathBuf,
    /// Camera sidecar JSON [default: <DEPTH>.json]
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Output cloud (.xyz text, anything else binary)
    #[arg(long)]
    out: PathBuf,
    /// Voxel size for centroid downsampling (meters)
    #[arg(long)]
    voxel: Option<f64>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    cloud: PathBuf,
    /// Camera sidecar JSON
    #[arg(long)]
    camera: PathBuf,
    /// Output image (.png millimeters, anything else raw f32 meters)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchInputs {
    #[arg(long, required_unless_present = "print_config")]
    src: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    tgt: Option<PathBuf>,
    /// Geometric feature files (FIF1)
    #[arg(long, requires = "tgt_geo")]
    src_geo: Option<PathBuf>,
    #[arg(long, requires = "src_geo")]
    tgt_geo: Option<PathBuf>,
    /// Image feature files (FIF1, K*K views)
    #[arg(long, requires = "tgt_img")]
    src_img: Option<PathBuf>,
    #[arg(long, requires = "src_img")]
    tgt_img: Option<PathBuf>,
    /// Pipeline configuration JSON; missing keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the fusion mode of the configuration
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    /// Print the effective configuration and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    inputs: MatchInputs,
    /// Ground-truth transform JSON; adds rre_deg and rte_m to the output
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Output JSON (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark configuration JSON; missing keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of trials, overriding the configuration
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, required_unless_present = "print_config")]
    out_dir: Option<PathBuf>,
    /// Print the effective configuration and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct PrCurveArgs {
    #[command(flatten)]
    inputs: MatchInputs,
    /// Ground-truth transform JSON
    #[arg(long, required_unless_present = "print_config")]
    gt: Option<PathBuf>,
    /// Match-correctness radius (meters)
    #[arg(long, default_value_t = 0.05)]
    radius: f64,
    /// Number of true correspondences for recall [default: source points
    /// whose transformed position has a target point within RADIUS]
    #[arg(long)]
    n_gt: Option<usize>,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::RegistrationFailed(_)
            | Error::TooFewCorrespondences(_)
            | Error::DegenerateConfiguration => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

/// Transform file layout shared by `register` output and `--gt` input.
#[derive(Serialize, Deserialize)]
struct TransformJson {
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Serialize)]
struct RegisterOutput {
    rotation: [f64; 9],
    translation: [f64; 3],
    n_matches: usize,
    n_inliers: usize,
    fusion_mode: FusionMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    rre_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rte_m: Option<f64>,
}

fn read_transform(path: &Path) -> Result<RigidTransform, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let t: TransformJson =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    RigidTransform::from_row_major(&t.rotation, &t.translation)
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, body: &str) -> CmdResult {
    match out {
        Some(p) => std::fs::write(p, body).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => {
            use std::io::Write;
            match std::io::stdout().lock().write_all(body.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(usage(format!("stdout: {e}"))),
                _ => Ok(()),
            }
        }
    }
}

fn cmd_lift(a: &LiftArgs) -> CmdResult {
    let camera = a.camera.clone().unwrap_or_else(|| sidecar_path(&a.depth));
    if !camera.exists() {
        return Err(usage(format!("camera sidecar not found: {}", camera.display())));
    }
    let cam = read_camera(&camera)?;
    let depth = read_depth(&a.depth, cam.width(), cam.height())?;
    let (mut cloud, _) = cam.lift(&depth)?;
    if let Some(v) = a.voxel {
        cloud = voxel_downsample(&cloud, v)?;
    }
    write_cloud(&a.out, &cloud)?;
    eprintln!("lifted {} points", cloud.len());
    Ok(())
}

fn cmd_project(a: &ProjectArgs) -> CmdResult {
    if !a.camera.exists() {
        return Err(usage(format!("camera sidecar not found: {}", a.camera.display())));
    }
    let cam = read_camera(&a.camera)?;
    let cloud = read_cloud(&a.cloud)?;
    let rendering = cam.render(&cloud)?;
    write_depth(&a.out, &rendering.depth)?;
    eprintln!("rendered {} of {} points", rendering.depth.valid_count(), cloud.len());
    Ok(())
}

fn load_config(path: Option<&Path>, fusion: Option<FusionMode>) -> Result<PipelineConfig, Failure> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(f) = fusion {
        cfg.fusion = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_geo(path: &Path) -> Result<FeatureField, Failure> {
    match read_features(path)?.0 {
        FeatureData::Geo(f) => Ok(f),
        FeatureData::Img(_) => Err(usage(format!(
            "{}: expected a geometric feature file, found image features",
            path.display()
        ))),
    }
}

fn read_img(path: &Path) -> Result<ViewFeatureStack, Failure> {
    match read_features(path)?.0 {
        FeatureData::Img(s) => Ok(s),
        FeatureData::Geo(f) => Ok(ViewFeatureStack::from_views(1, &[f])?),
    }
}

struct Loaded {
    cfg: PipelineConfig,
    src: genreg_core::geometry::PointCloud,
    tgt: genreg_core::geometry::PointCloud,
    geo: Option<(FeatureField, FeatureField)>,
    img: Option<(ViewFeatureStack, ViewFeatureStack)>,
}

impl Loaded {
    fn load(m: &MatchInputs) -> Result<Self, Failure> {
        let cfg = load_config(m.config.as_deref(), m.fusion)?;
        let geo = match (&m.src_geo, &m.tgt_geo) {
            (Some(s), Some(t)) => Some((read_geo(s)?, read_geo(t)?)),
            _ => None,
        };
        let img = match (&m.src_img, &m.tgt_img) {
            (Some(s), Some(t)) => Some((read_img(s)?, read_img(t)?)),
            _ => None,
        };
        let (Some(src), Some(tgt)) = (&m.src, &m.tgt) else {
            return Err(usage("--src and --tgt are required"));
        };
        Ok(Loaded {
            cfg,
            src: read_cloud(src)?,
            tgt: read_cloud(tgt)?,
            geo,
            img,
        })
    }

    fn inputs(&self) -> BranchInputs<'_> {
        BranchInputs {
            img: self.img.as_ref().map(|(s, t)| ImageBranch {
                src: s,
                tgt: t,
                src_coverage: None,
            }),
            geo: self.geo.as_ref().map(|(s, t)| GeoBranch { src: s, tgt: t }),
        }
    }
}

fn print_config(m: &MatchInputs) -> CmdResult {
    let cfg = load_config(m.config.as_deref(), m.fusion)?;
    emit(None, &(serde_json::to_string_pretty(&cfg).unwrap() + "\n"))
}

fn cmd_register(a: &RegisterArgs) -> CmdResult {
    if a.inputs.print_config {
        return print_config(&a.inputs);
    }
    let gt = a.gt.as_deref().map(read_transform).transpose()?;
    let loaded = Loaded::load(&a.inputs)?;
    let out = pipeline::register(&loaded.cfg, &loaded.src, &loaded.tgt, &loaded.inputs())?;
    let n_matches = out.matches.len();
    let mut result = out.registration?;
    if let Some(gt) = &gt {
        result = result.with_ground_truth(gt);
    }
    let t = &result.transform;
    let body = RegisterOutput {
        rotation: t.rotation_row_major(),
        translation: [t.translation.x, t.translation.y, t.translation.z],
        n_matches,
        n_inliers: result.inlier_indices.len(),
        fusion_mode: loaded.cfg.fusion,
        rre_deg: result.rre,
        rte_m: result.rte,
    };
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&body).unwrap() + "\n"))
}

fn cmd_bench(a: &BenchArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    if let Some(n) = a.seeds {
        cfg.seeds = n;
    }
    cfg.validate()?;
    if a.print_config {
        return emit(None, &(serde_json::to_string_pretty(&cfg).unwrap() + "\n"));
    }
    let dir = a.out_dir.as_ref().expect("required by clap");
    let report = bench::run_benchmark(&cfg)?;
    bench::write_report(&report, dir)?;
    use std::fmt::Write;
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<9} {:>5} {:>12} {:>12} {:>10} {:>9}",
        "method", "fail", "mean RRE", "median RRE", "mean RTE", "precision"
    );
    for s in &report.summary.methods {
        let _ = writeln!(
            table,
            "{:<9} {:>5} {:>10.4}deg {:>10.4}deg {:>9.4}m {:>9.3}",
            s.method.as_str(),
            s.failures,
            s.mean_rre_deg,
            s.median_rre_deg,
            s.mean_rte_m,
            s.mean_precision
        );
    }
    if let Some(c) = &report.summary.and_vs_or {
        if !c.flagged_seeds.is_empty() {
            let _ = writeln!(table, "noisy-and below noisy-or in seeds {:?}", c.flagged_seeds);
        }
    }
    emit(None, &table)
}

fn curve_csv(c: &PrCurve) -> String {
    let mut s = String::from("threshold,precision,recall,emitted,correct\n");
    for p in &c.points {
        let _ = writeln!(s, "{},{},{},{},{}", p.threshold, p.precision, p.recall, p.emitted, p.correct);
    }
    s
}

fn cmd_pr_curve(a: &PrCurveArgs) -> CmdResult {
    if a.inputs.print_config {
        return print_config(&a.inputs);
    }
    let gt = read_transform(a.gt.as_deref().ok_or_else(|| usage("--gt is required"))?)?;
    let loaded = Loaded::load(&a.inputs)?;
    let scores = pipeline::match_scores(&loaded.cfg, &loaded.inputs(), loaded.src.len(), loaded.tgt.len())?;
    let n_gt = match a.n_gt {
        Some(n) => n,
        None => {
            if !(a.radius > 0.0) {
                return Err(usage("--radius must be positive"));
            }
            let nn = NearestNeighbor::build(loaded.tgt.points(), a.radius);
            loaded
                .src
                .points()
                .iter()
                .filter(|p| nn.nearest_within(&gt.apply_point(p), a.radius).is_some())
                .count()
        }
    };
    let curve = bench::pr_curve(&scores, &loaded.src, &loaded.tgt, &gt, n_gt, a.radius)?;
    emit(a.out.as_deref(), &curve_csv(&curve))
}

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("GENREG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("GENREG_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Lift(a) => cmd_lift(a),
        Command::Project(a) => cmd_project(a),
        Command::Register(a) => cmd_register(a),
        Command::Bench(a) => cmd_bench(a),
        Command::PrCurve(a) => cmd_pr_curve(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("genreg: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
