use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use semfuse_core::ingest::load_sequence;
use semfuse_core::ingest::synthetic::{default_scene_spec, write_sequence, GroundTruth, SceneSpec};
use semfuse_core::io::{load_snapshot, save_snapshot, write_mesh_ply, write_point_cloud_ply, write_points_ply, REPORT_FILE};
use semfuse_core::pipeline::{
    evaluate_against_ground_truth, run_reconstruction, FeatureDir, FeatureProvider, FeatureStream, NoFeatures,
    PipelineConfig, WorkerMode,
};
use semfuse_core::query::{extract_region, rank_regions_above, read_query_file, ExtractMode, QuerySource, QueryVector, RegionGeometry};
use semfuse_core::semantic::SemanticConfig;
use semfuse_core::tsdf::VolumeConfig;

#[derive(Parser)]
#[command(name = "semfuse", version, about = "Semantic TSDF reconstruction and open-vocabulary queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse a sequence into a snapshot directory.
    Reconstruct(ReconstructArgs),
    /// Rank stored regions against query vectors and export their geometry.
    Query(QueryArgs),
    /// Score a snapshot against ground-truth voxel labels.
    Eval(EvalArgs),
    /// Report geometry and semantic lane throughput for a sequence.
    Bench(RunArgs),
    /// Write a synthetic sequence with features, queries and ground truth.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    voxel_size: f64,
    /// Run semantics every N frames; 0 disables them.
    #[arg(long, default_value_t = 3)]
    semantic_every: usize,
    /// Directory of `<frame_id>.ofrf` files; defaults to the manifest's.
    #[arg(long, conflicts_with = "feature_stream")]
    features: Option<PathBuf>,
    /// File of concatenated feature messages, or `-` for stdin.
    #[arg(long)]
    feature_stream: Option<PathBuf>,
    #[arg(long, default_value_t = 0.10)]
    match_threshold: f64,
    /// Run geometry and semantics on separate threads.
    #[arg(long)]
    two_lane: bool,
    /// Abort when a scheduled semantic frame has no features.
    #[arg(long)]
    fail_on_missing_features: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mesh,
    Voxels,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    state: PathBuf,
    /// `.ofqv` query file.
    #[arg(long, required_unless_present = "text", conflicts_with = "text")]
    queries: Option<PathBuf>,
    /// Text query, encoded by the bridge.
    #[arg(long)]
    text: Option<String>,
    /// Bridge executable; run as `<bridge> encode --text <text> --out <file>`.
    #[arg(long, default_value = "feature-bridge")]
    bridge: String,
    #[arg(long, default_value_t = 1)]
    top_k: usize,
    /// Drop regions scoring below this cosine similarity.
    #[arg(long)]
    min_score: Option<f64>,
    #[arg(long, value_enum, default_value_t = Mode::Mesh)]
    mode: Mode,
    /// Directory for per-region PLY files; defaults to `<state>/query`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    state: PathBuf,
    /// `.ofgt` ground-truth labels.
    #[arg(long)]
    gt: PathBuf,
    /// One query per class; defaults to `queries.ofqv` beside the labels.
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// `default` or a JSON scene file.
    #[arg(long, default_value = "default")]
    scene: String,
    #[arg(long)]
    out: PathBuf,
    /// Grid spacing for the ground-truth labels.
    #[arg(long, default_value_t = 0.02)]
    voxel_size: f64,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 240)]
    height: usize,
    /// Embedding dimension of the default scene.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Overrides the orbit frame count.
    #[arg(long)]
    frames: Option<usize>,
}

fn pipeline_config(args: &RunArgs) -> PipelineConfig {
    PipelineConfig {
        volume: VolumeConfig::with_voxel_size(args.voxel_size),
        semantic: SemanticConfig {
            match_threshold: args.match_threshold,
            ..Default::default()
        },
        semantic_every: args.semantic_every,
        worker_mode: if args.two_lane { WorkerMode::TwoLane } else { WorkerMode::Single },
        fail_on_missing_features: args.fail_on_missing_features,
    }
}

fn run_pipeline(args: &RunArgs) -> anyhow::Result<semfuse_core::Reconstruction> {
    let cfg = pipeline_config(args);
    let sequence = load_sequence(&args.manifest)?;
    let mut provider: Box<dyn FeatureProvider + Send> = match (&args.feature_stream, &args.features) {
        _ if cfg.semantic_every == 0 => Box::new(NoFeatures),
        (Some(p), _) if p == Path::new("-") => Box::new(FeatureStream::new(std::io::BufReader::new(std::io::stdin()))),
        (Some(p), _) => Box::new(FeatureStream::new(std::io::BufReader::new(
            std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?,
        ))),
        (None, Some(dir)) => Box::new(FeatureDir(dir.clone())),
        (None, None) => match &sequence.feature_dir {
            Some(dir) => Box::new(FeatureDir(dir.clone())),
            None => {
                log::warn!("no feature source given; running geometry only");
                Box::new(NoFeatures)
            }
        },
    };
    Ok(run_reconstruction(&cfg, &sequence, provider.as_mut())?)
}

fn reconstruct(args: &ReconstructArgs) -> anyhow::Result<()> {
    let rec = run_pipeline(&args.run)?;
    save_snapshot(&args.out, &rec.volume, &rec.dictionary)?;
    let band = rec.volume.config().semantic_band;
    write_point_cloud_ply(&args.out.join("points.ply"), &rec.volume.extract_point_cloud(band))?;
    let report = serde_json::to_string_pretty(&rec.report)?;
    std::fs::write(args.out.join(REPORT_FILE), &report)?;
    println!("{report}");
    Ok(())
}

fn encode_text(bridge: &str, text: &str) -> anyhow::Result<Vec<QueryVector>> {
    let out = std::env::temp_dir().join(format!("semfuse-query-{}.ofqv", std::process::id()));
    let status = std::process::Command::new(bridge)
        .args(["encode", "--text", text, "--out"])
        .arg(&out)
        .status()
        .with_context(|| format!("running text bridge `{bridge}`"))?;
    if !status.success() {
        bail!("text bridge `{bridge}` exited with {status}");
    }
    let queries = read_query_file(&out);
    let _ = std::fs::remove_file(&out);
    Ok(queries?
        .into_iter()
        .map(|q| QueryVector::new(q.values().to_vec(), QuerySource::Text))
        .collect::<Result<_, _>>()?)
}

fn query(args: &QueryArgs) -> anyhow::Result<()> {
    let (volume, dict) = load_snapshot(&args.state)?;
    let queries = match (&args.queries, &args.text) {
        (Some(path), _) => read_query_file(path)?,
        (None, Some(text)) => encode_text(&args.bridge, text)?,
        (None, None) => unreachable!("clap requires one of --queries or --text"),
    };
    let out_dir = args.out.clone().unwrap_or_else(|| args.state.join("query"));
    std::fs::create_dir_all(&out_dir)?;
    let mode = match args.mode {
        Mode::Mesh => ExtractMode::Mesh,
        Mode::Voxels => ExtractMode::Voxels,
    };
    let mut results = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let ranked = rank_regions_above(&dict, q, args.top_k, args.min_score.unwrap_or(f64::NEG_INFINITY))?;
        let mut regions = Vec::new();
        for r in &ranked {
            let path = out_dir.join(format!("query{qi}_region{}.ply", r.key));
            match extract_region(&volume, &dict, r.key, mode)? {
                RegionGeometry::Mesh(mesh) => write_mesh_ply(&path, &mesh)?,
                RegionGeometry::Voxels(points) => write_points_ply(&path, &points)?,
            }
            regions.push(json!({ "key": r.key, "score": r.score, "ply": path }));
        }
        results.push(json!({ "query": qi, "regions": regions }));
    }
    println!("{}", serde_json::to_string_pretty(&results)?);
    Ok(())
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let (volume, dict) = load_snapshot(&args.state)?;
    let gt = GroundTruth::read_file(&args.gt)?;
    let queries_path = args
        .queries
        .clone()
        .unwrap_or_else(|| args.gt.with_file_name("queries.ofqv"));
    let queries = read_query_file(&queries_path)?;
    let report = evaluate_against_ground_truth(&volume, &dict, &queries, &gt)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "mAcc": report.metrics.mean_accuracy,
            "f-mIoU": report.metrics.frequency_weighted_iou,
            "detail": report,
        }))?
    );
    Ok(())
}

fn bench(args: &RunArgs) -> anyhow::Result<()> {
    let rec = run_pipeline(args)?;
    let r = &rec.report;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "frames": r.frames,
            "geometry": { "fps": r.geometric_fps, "seconds": r.geometry_seconds },
            "semantic": {
                "frames": r.semantic_frames,
                "fps": r.semantic_fps,
                "ms_per_frame": r.semantic_ms_per_frame,
                "seconds": r.semantic_seconds,
            },
            "report": r,
        }))?
    );
    Ok(())
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut spec: SceneSpec = if args.scene == "default" {
        default_scene_spec(args.width, args.height, args.dim)
    } else {
        let text = std::fs::read_to_string(&args.scene).with_context(|| format!("reading scene {}", args.scene))?;
        serde_json::from_str(&text).with_context(|| format!("parsing scene {}", args.scene))?
    };
    if let Some(n) = args.frames {
        spec.orbit.frames = n;
    }
    let paths = write_sequence(&args.out, &spec, &VolumeConfig::with_voxel_size(args.voxel_size), 0.25)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "manifest": paths.manifest,
            "features": paths.features,
            "queries": paths.queries,
            "ground_truth": paths.ground_truth,
            "frames": spec.orbit.frames,
        }))?
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Reconstruct(a) => reconstruct(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
