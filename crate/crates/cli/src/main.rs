use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use psg4d::geometry::{self, FrameSource, PointCloudFrame};
use psg4d::io::{self, Modality, VideoMeta};
use psg4d::matching::{link_tracks, TrackerConfig};
use psg4d::metrics::{self, VideoPair};
use psg4d::model::{self, PointTube, SceneGraph4D, Tube, ValidationMode, Vocabulary};
use psg4d::narrate;
use psg4d::relate::{score_pairs_geometric, EntityGeometry, RuleKind, Rulebook};
use psg4d::synthgen::{self, DatasetRecipe, NoiseConfig, SceneRng};

/// Evaluate, generate and inspect 4D panoptic scene graphs.
#[derive(Parser)]
#[command(name = "psg4d", version)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, env = "PSG4D_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against a ground-truth dataset (R@K, mR@K).
    Evaluate(EvaluateArgs),
    /// Turn an RGB-D video into a point-cloud video.
    Convert(ConvertArgs),
    /// Link per-frame segments into entity tubes.
    Track(TrackArgs),
    /// Predict relations from tube geometry with a rulebook.
    Baseline(BaselineArgs),
    /// Write a synthetic dataset, optionally with noisy predictions.
    Generate(GenerateArgs),
    /// Describe a video's relations as timed text windows.
    Narrate(NarrateArgs),
    /// Check a dataset for structural problems.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth dataset root.
    #[arg(long)]
    gt: PathBuf,
    /// Prediction file.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
    k: Vec<usize>,
    #[arg(long = "viou-thresh", default_value_t = metrics::DEFAULT_VIOU_THRESHOLD)]
    viou_thresh: f64,
    /// Report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    /// RGB-D video directory.
    #[arg(long)]
    video: PathBuf,
    /// Maximum depth kept, meters.
    #[arg(long, default_value_t = geometry::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Output video directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    segments: PathBuf,
    /// Minimum cosine similarity to continue a track.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Optional minimum mask IoU between linked segments.
    #[arg(long = "iou-gate")]
    iou_gate: Option<f64>,
    /// Output prediction file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    /// Video directory inside a dataset.
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    rulebook: PathBuf,
    /// Output prediction file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    recipe: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset root to write.
    #[arg(long)]
    out: PathBuf,
    /// Noise configuration; writes predictions.json and oracle.json too.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// K values of the oracle.
    #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
    k: Vec<usize>,
}

#[derive(Args)]
struct NarrateArgs {
    /// Video directory inside a dataset.
    #[arg(long)]
    graph: PathBuf,
    /// Window length, seconds.
    #[arg(long, default_value_t = 30.0)]
    window: f64,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Output text file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    root: PathBuf,
}

/// Exit status of a command that ran to completion.
enum Outcome {
    Ok,
    Violations,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Evaluate(a) => evaluate(a),
        Command::Convert(a) => convert(a),
        Command::Track(a) => track(a),
        Command::Baseline(a) => baseline(a),
        Command::Generate(a) => generate(a),
        Command::Narrate(a) => narrate_cmd(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violations) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => io::write_bytes(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn print_violations(report: &serde_json::Value, to_stderr: bool) {
    let text = serde_json::to_string_pretty(report).expect("serializable");
    if to_stderr {
        eprintln!("{text}");
    } else {
        println!("{text}");
    }
}

fn evaluate(a: EvaluateArgs) -> Result<Outcome> {
    let dataset = io::read_dataset(&a.gt)?;
    let preds = io::read_predictions(&a.pred)?;
    let vocab = dataset.vocabulary();
    let mut by_id: BTreeMap<String, SceneGraph4D> = BTreeMap::new();
    let mut pred_violations = Vec::new();
    for p in preds {
        for v in model::validate_scene_graph(&p, vocab, ValidationMode::Prediction) {
            pred_violations.push(serde_json::json!({ "video_id": p.video_id, "violation": v }));
        }
        if !dataset.videos.iter().any(|v| v.meta.video_id == p.video_id) {
            bail!("prediction for unknown video {:?}", p.video_id);
        }
        if by_id.contains_key(&p.video_id) {
            bail!("video {:?} predicted twice", p.video_id);
        }
        by_id.insert(p.video_id.clone(), p);
    }
    if !dataset.violations.is_empty() || !pred_violations.is_empty() {
        print_violations(
            &serde_json::json!({ "ground_truth": dataset.violations, "predictions": pred_violations }),
            true,
        );
        return Ok(Outcome::Violations);
    }
    let empties: BTreeMap<String, SceneGraph4D> = dataset
        .videos
        .iter()
        .filter(|v| !by_id.contains_key(&v.meta.video_id))
        .map(|v| (v.meta.video_id.clone(), SceneGraph4D::empty(v.meta.video_id.clone(), vocab)))
        .collect();
    let pairs: Vec<VideoPair> = dataset
        .videos
        .iter()
        .map(|v| VideoPair {
            pred: by_id.get(&v.meta.video_id).unwrap_or_else(|| &empties[&v.meta.video_id]),
            gt: &v.graph,
        })
        .collect();
    let report = metrics::evaluate_dataset(&pairs, &a.k, a.viou_thresh)?;
    emit(a.out.as_deref(), &io::to_pretty_json(&report))?;
    Ok(Outcome::Ok)
}

/// Vocabulary of the dataset a video directory belongs to.
fn dataset_vocabulary(video_dir: &Path) -> Result<Vocabulary> {
    let manifest = video_dir
        .parent()
        .and_then(Path::parent)
        .map(|root| root.join("manifest.json"))
        .ok_or_else(|| anyhow!("{} is not inside a dataset", video_dir.display()))?;
    let m: io::Manifest = io::read_json(&manifest)?;
    Ok(m.vocabulary)
}

fn convert(a: ConvertArgs) -> Result<Outcome> {
    let (meta, graph) = io::read_video_docs(&a.video)?;
    if meta.modality != Modality::Rgbd {
        bail!("{} is not an RGB-D video", a.video.display());
    }
    let intrinsics = meta.intrinsics.context("RGB-D video needs intrinsics")?;
    let frames: Vec<u32> = (0..meta.frame_count)
        .filter(|&f| io::depth_path(&a.video, f).is_file())
        .collect();
    // frame → (row, col) → point index
    let lookups: Vec<(u32, BTreeMap<(u32, u32), u32>)> = frames
        .par_iter()
        .map(|&f| -> Result<_> {
            let depth = io::read_depth_image(&io::depth_path(&a.video, f), meta.depth_scale)?;
            let rgb_path = io::rgb_path(&a.video, f);
            let rgb = if rgb_path.is_file() {
                io::read_rgb_png(&rgb_path)?
            } else {
                geometry::RgbImage::filled(depth.height, depth.width, [128, 128, 128])
            };
            let pose = meta.pose(f).map_err(|r| anyhow!(r))?;
            let cloud: PointCloudFrame = geometry::depth_frame_to_points(&depth, &rgb, &intrinsics, &pose, a.lambda)?;
            io::write_point_frame(&io::points_path(&a.out, f), &cloud.points)?;
            let pixels = cloud.source_pixels.unwrap_or_default();
            Ok((f, pixels.into_iter().enumerate().map(|(i, px)| (px, i as u32)).collect()))
        })
        .collect::<Result<_>>()?;
    let lookups: BTreeMap<u32, BTreeMap<(u32, u32), u32>> = lookups.into_iter().collect();

    let mut entities = Vec::new();
    let mut dropped = BTreeSet::new();
    for e in &graph.entities {
        let Tube::Mask(t) = &e.tube else {
            bail!("entity {} of an RGB-D video has a point tube", e.entity_id);
        };
        let mut frames = BTreeMap::new();
        for (&f, mask) in &t.frames {
            let Some(lookup) = lookups.get(&f) else { continue };
            let w = mask.width() as u64;
            let idx: Vec<u32> = mask
                .pixel_indices()
                .filter_map(|p| lookup.get(&((p / w) as u32, (p % w) as u32)).copied())
                .collect();
            if !idx.is_empty() {
                frames.insert(f, idx);
            }
        }
        if frames.is_empty() {
            eprintln!("warning: entity {} has no points within lambda; dropped", e.entity_id);
            dropped.insert(e.entity_id);
            continue;
        }
        let mut e = e.clone();
        e.tube = Tube::Points(PointTube {
            entity_id: e.entity_id,
            frames,
        });
        entities.push(e);
    }
    let out_graph = SceneGraph4D {
        entities,
        triplets: graph
            .triplets
            .iter()
            .filter(|t| !dropped.contains(&t.subject_id) && !dropped.contains(&t.object_id))
            .cloned()
            .collect(),
        ..graph
    };
    let out_meta = VideoMeta {
        modality: Modality::Points,
        lambda: a.lambda,
        // points are already in the world frame
        extrinsics: None,
        ..meta
    };
    io::write_video_docs(&a.out, &out_meta, &out_graph)?;
    Ok(Outcome::Ok)
}

fn track(a: TrackArgs) -> Result<Outcome> {
    let (file, segments) = io::read_segments(&a.segments)?;
    let config = TrackerConfig {
        tau: a.tau,
        iou_gate: a.iou_gate,
    };
    let entities = link_tracks(&segments, &config)?;
    let graph = SceneGraph4D {
        video_id: file.video_id,
        entities,
        triplets: Vec::new(),
        vocabulary_ref: file.vocabulary_ref.clone(),
    };
    io::write_predictions(&a.out, &file.vocabulary_ref, &[graph])?;
    Ok(Outcome::Ok)
}

fn baseline(a: BaselineArgs) -> Result<Outcome> {
    let vocab = dataset_vocabulary(&a.video)?;
    let rulebook: Rulebook = io::read_json(&a.rulebook)?;
    rulebook.validate(&vocab)?;
    let (meta, graph) = io::read_video_docs(&a.video)?;
    let frames: BTreeSet<u32> = graph.entities.iter().flat_map(|e| e.tube.occupied_frames()).collect();
    let needs_voxels = rulebook.rules.iter().any(|r| r.kind == RuleKind::Contact);
    let lift = |source: FrameSource<'_>| -> Result<BTreeMap<u32, EntityGeometry>> {
        graph
            .entities
            .iter()
            .map(|e| {
                let points = geometry::tube_points(e, source);
                let voxels = if needs_voxels {
                    Some(
                        points
                            .iter()
                            .map(|(&f, p)| Ok((f, geometry::voxelize_points(p.iter().copied(), rulebook.voxel_size)?)))
                            .collect::<Result<_>>()?,
                    )
                } else {
                    None
                };
                let trajectory = points.iter().map(|(&f, p)| (f, geometry::centroid(p))).collect();
                Ok((e.entity_id, EntityGeometry { trajectory, voxels }))
            })
            .collect()
    };
    let geometry = match meta.modality {
        Modality::Rgbd => lift(FrameSource::Depth(&io::load_depth_sequence(&a.video, &meta, frames)?))?,
        Modality::Points => lift(FrameSource::Points(&io::load_point_clouds(&a.video, frames)?))?,
    };
    let triplets = score_pairs_geometric(&graph.entities, &geometry, &rulebook)?;
    let out = SceneGraph4D {
        triplets,
        vocabulary_ref: vocab.checksum(),
        ..graph
    };
    io::write_predictions(&a.out, &vocab.checksum(), std::slice::from_ref(&out))?;
    Ok(Outcome::Ok)
}

fn generate(a: GenerateArgs) -> Result<Outcome> {
    let recipe: DatasetRecipe = io::read_json(&a.recipe)?;
    let noise: Option<NoiseConfig> = a.noise.as_deref().map(io::read_json).transpose()?;
    let dataset = synthgen::generate_dataset(&recipe, a.seed)?;
    synthgen::write_generated_dataset(&a.out, &dataset)?;
    let Some(noise) = noise else {
        return Ok(Outcome::Ok);
    };
    let root = SceneRng::new(a.seed);
    let perturbed = dataset
        .scenes
        .par_iter()
        .map(|s| {
            let seed = root.split(&format!("noise/{}", s.recipe.video_id)).next_u64();
            synthgen::perturb_predictions(&s.gt, &dataset.vocabulary, &noise, seed, &a.k)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let preds: Vec<SceneGraph4D> = perturbed.iter().map(|p| p.pred.clone()).collect();
    io::write_predictions(&a.out.join("predictions.json"), &dataset.vocabulary.checksum(), &preds)?;
    let per_video: BTreeMap<&str, _> = perturbed.iter().map(|p| (p.pred.video_id.as_str(), &p.oracle)).collect();
    let per_k: BTreeMap<usize, synthgen::OracleRecall> = a
        .k
        .iter()
        .map(|k| (*k, synthgen::aggregate_oracle(perturbed.iter().map(|p| &p.oracle[k]))))
        .collect();
    let oracle = serde_json::json!({
        "config": { "ks": a.k, "viou_threshold": metrics::DEFAULT_VIOU_THRESHOLD },
        "per_k": per_k,
        "per_video": per_video,
    });
    io::write_bytes(&a.out.join("oracle.json"), &io::to_pretty_json(&oracle))?;
    Ok(Outcome::Ok)
}

fn narrate_cmd(a: NarrateArgs) -> Result<Outcome> {
    if !(a.window > 0.0 && a.fps > 0.0) {
        bail!("--window and --fps must be positive");
    }
    let vocab = dataset_vocabulary(&a.graph)?;
    let (meta, graph) = io::read_video_docs(&a.graph)?;
    let windows = narrate::narrate(&graph, &vocab, a.window, a.fps, Some(meta.frame_count));
    emit(a.out.as_deref(), narrate::render_windows(&windows).as_bytes())?;
    Ok(Outcome::Ok)
}

fn validate(a: ValidateArgs) -> Result<Outcome> {
    let dataset = io::read_dataset(&a.root)?;
    let ok = dataset.violations.is_empty();
    print_violations(
        &serde_json::json!({ "valid": ok, "videos": dataset.videos.len(), "violations": dataset.violations }),
        false,
    );
    Ok(if ok { Outcome::Ok } else { Outcome::Violations })
}
