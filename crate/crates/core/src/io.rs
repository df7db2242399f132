//! On-disk dataset layout and document formats.
//!
//! ```text
//! root/
//!   manifest.json                  vocabulary, its checksum, video list
//!   videos/<video_id>/
//!     video.json                   modality, fps, intrinsics, extrinsics
//!     masks.json                   entities and their tubes (RLE runs)
//!     relations.json               triplets
//!     depth/000000.png             16-bit grayscale, value / depth_scale = m
//!     rgb/000000.png               8-bit RGB
//!     points/000000.bin            u32 LE count, then count × 6 f32 LE
//! ```
//!
//! Documents are written canonically: fixed field order, map keys sorted,
//! shortest round-trip float formatting and entities sorted by id. The
//! manifest is pretty-printed; per-video documents are compact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    CameraIntrinsics, ColoredPoint, DepthImage, DepthSequence, PointCloudFrame, RgbImage, RigidTransform,
    DEFAULT_LAMBDA,
};
use crate::model::{
    validate_point_bounds, validate_scene_graph, EntityNode, FrameInterval, MaskTube, PointTube, RelationTriplet,
    SceneGraph4D, Tube, TubeKind, ValidationMode, Violation, Vocabulary,
};
use crate::matching::{FrameSegment, SegmentRegion};
use crate::overlap::RleMask;

pub const FORMAT: &str = "psg4d-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DEPTH_SCALE: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {reason}", path.display())]
    SchemaViolation { path: PathBuf, reason: String },
    #[error("{}: vocabulary checksum {found} does not match {expected}", path.display())]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },
}

fn schema(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::SchemaViolation {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::MissingFile(path.to_owned())
        } else {
            IoError::Io {
                path: path.to_owned(),
                source,
            }
        }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

/// Writes `bytes`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Parses a JSON document; syntax and schema errors carry line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| schema(path, e.to_string()))
}

pub fn to_compact_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(value).expect("documents serialize");
    out.push(b'\n');
    out
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("documents serialize");
    out.push(b'\n');
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub algorithm: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub vocabulary: Vocabulary,
    pub vocabulary_checksum: String,
    pub videos: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
}

impl Manifest {
    pub fn new(vocabulary: Vocabulary, videos: Vec<String>, generator: Option<GeneratorInfo>) -> Self {
        Self {
            format: FORMAT.to_owned(),
            version: FORMAT_VERSION,
            vocabulary_checksum: vocabulary.checksum(),
            vocabulary,
            videos,
            generator,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgbd,
    Points,
}

fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

/// Per-video capture metadata (`video.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub video_id: String,
    pub modality: Modality,
    pub frame_count: u32,
    pub fps: f64,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
    /// Frame → row-major camera-to-world matrix; absent frames use identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrinsics: Option<BTreeMap<u32, [f64; 16]>>,
}

impl VideoMeta {
    pub fn pose(&self, frame: u32) -> Result<RigidTransform, String> {
        match self.extrinsics.as_ref().and_then(|e| e.get(&frame)) {
            Some(m) => RigidTransform::from_row_major(*m).map_err(|e| format!("frame {frame}: {e}")),
            None => Ok(RigidTransform::identity()),
        }
    }
}

/// A tube on disk. Mask tubes carry their image shape and RLE runs per
/// frame; point tubes carry sorted point indices per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeDoc {
    pub kind: TubeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    pub frames: BTreeMap<u32, Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityDoc {
    pub entity_id: u32,
    pub category_id: u32,
    pub score: f64,
    pub tube: TubeDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<BTreeMap<u32, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationDoc {
    pub subject: u32,
    pub object: u32,
    pub predicate: u32,
    pub start: u32,
    pub end: u32,
    #[serde(default)]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasksDoc {
    pub video_id: String,
    pub vocabulary_ref: String,
    pub entities: Vec<EntityDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationsDoc {
    pub video_id: String,
    pub relations: Vec<RelationDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionVideo {
    pub video_id: String,
    pub entities: Vec<EntityDoc>,
    pub relations: Vec<RelationDoc>,
}

/// Model output for a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub vocabulary_ref: String,
    pub videos: Vec<PredictionVideo>,
}

pub fn entity_to_doc(e: &EntityNode) -> EntityDoc {
    let tube = match &e.tube {
        Tube::Mask(t) => TubeDoc {
            kind: TubeKind::Mask,
            height: Some(t.height),
            width: Some(t.width),
            frames: t.frames.iter().map(|(&f, m)| (f, m.runs().to_vec())).collect(),
        },
        Tube::Points(t) => TubeDoc {
            kind: TubeKind::Points,
            height: None,
            width: None,
            frames: t.frames.clone(),
        },
    };
    EntityDoc {
        entity_id: e.entity_id,
        category_id: e.category_id,
        score: e.score,
        tube,
        embeddings: e.embeddings.clone(),
    }
}

pub fn entity_from_doc(doc: EntityDoc) -> Result<EntityNode, String> {
    let id = doc.entity_id;
    let tube = match doc.tube.kind {
        TubeKind::Mask => {
            let (Some(height), Some(width)) = (doc.tube.height, doc.tube.width) else {
                return Err(format!("entity {id}: mask tube needs height and width"));
            };
            let frames = doc
                .tube
                .frames
                .into_iter()
                .map(|(f, runs)| {
                    RleMask::from_runs(height, width, runs)
                        .map(|m| (f, m))
                        .map_err(|e| format!("entity {id}, frame {f}: {e}"))
                })
                .collect::<Result<_, _>>()?;
            Tube::Mask(MaskTube {
                entity_id: id,
                height,
                width,
                frames,
            })
        }
        TubeKind::Points => {
            if doc.tube.height.is_some() || doc.tube.width.is_some() {
                return Err(format!("entity {id}: point tube has an image shape"));
            }
            Tube::Points(PointTube {
                entity_id: id,
                frames: doc.tube.frames,
            })
        }
    };
    Ok(EntityNode {
        entity_id: id,
        category_id: doc.category_id,
        score: doc.score,
        tube,
        embeddings: doc.embeddings,
    })
}

pub fn relation_to_doc(t: &RelationTriplet) -> RelationDoc {
    RelationDoc {
        subject: t.subject_id,
        object: t.object_id,
        predicate: t.predicate_id,
        start: t.interval.start(),
        end: t.interval.end(),
        confidence: Some(t.confidence),
    }
}

/// `default_confidence` fills in a missing confidence (ground truth); with
/// `None` the field is required.
pub fn relation_from_doc(doc: &RelationDoc, default_confidence: Option<f64>) -> Result<RelationTriplet, String> {
    let interval = FrameInterval::new(doc.start, doc.end).map_err(|e| e.to_string())?;
    let confidence = doc
        .confidence
        .or(default_confidence)
        .ok_or_else(|| format!("relation {}-{}-{} has no confidence", doc.subject, doc.predicate, doc.object))?;
    Ok(RelationTriplet {
        subject_id: doc.subject,
        object_id: doc.object,
        predicate_id: doc.predicate,
        interval,
        confidence,
    })
}

fn sorted_entity_docs(graph: &SceneGraph4D) -> Vec<EntityDoc> {
    let mut docs: Vec<EntityDoc> = graph.entities.iter().map(entity_to_doc).collect();
    docs.sort_by_key(|d| d.entity_id);
    docs
}

pub fn masks_doc(graph: &SceneGraph4D) -> MasksDoc {
    MasksDoc {
        video_id: graph.video_id.clone(),
        vocabulary_ref: graph.vocabulary_ref.clone(),
        entities: sorted_entity_docs(graph),
    }
}

pub fn relations_doc(graph: &SceneGraph4D) -> RelationsDoc {
    RelationsDoc {
        video_id: graph.video_id.clone(),
        relations: graph.triplets.iter().map(relation_to_doc).collect(),
    }
}

pub fn prediction_file(vocabulary_ref: &str, graphs: &[SceneGraph4D]) -> PredictionFile {
    PredictionFile {
        vocabulary_ref: vocabulary_ref.to_owned(),
        videos: graphs
            .iter()
            .map(|g| PredictionVideo {
                video_id: g.video_id.clone(),
                entities: sorted_entity_docs(g),
                relations: g.triplets.iter().map(relation_to_doc).collect(),
            })
            .collect(),
    }
}

pub fn write_predictions(path: &Path, vocabulary_ref: &str, graphs: &[SceneGraph4D]) -> Result<(), IoError> {
    write_bytes(path, &to_compact_json(&prediction_file(vocabulary_ref, graphs)))
}

/// Reads a prediction file into one graph per video, in file order.
pub fn read_predictions(path: &Path) -> Result<Vec<SceneGraph4D>, IoError> {
    let file: PredictionFile = read_json(path)?;
    let vocabulary_ref = file.vocabulary_ref;
    file.videos
        .into_iter()
        .map(|v| {
            let entities = v
                .entities
                .into_iter()
                .map(entity_from_doc)
                .collect::<Result<_, _>>()
                .map_err(|r| schema(path, format!("video {}: {r}", v.video_id)))?;
            let triplets = v
                .relations
                .iter()
                .map(|r| relation_from_doc(r, None))
                .collect::<Result<_, _>>()
                .map_err(|r| schema(path, format!("video {}: {r}", v.video_id)))?;
            Ok(SceneGraph4D {
                video_id: v.video_id,
                entities,
                triplets,
                vocabulary_ref: vocabulary_ref.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RegionDoc {
    Mask { height: u32, width: u32, runs: Vec<u32> },
    Points { indices: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDoc {
    pub frame: u32,
    pub region: RegionDoc,
    pub category_id: u32,
    pub score: f64,
    pub embedding: Vec<f64>,
}

/// Per-frame segments of one video, the input of tracking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentsFile {
    pub video_id: String,
    pub vocabulary_ref: String,
    pub segments: Vec<SegmentDoc>,
}

pub fn read_segments(path: &Path) -> Result<(SegmentsFile, Vec<FrameSegment>), IoError> {
    let file: SegmentsFile = read_json(path)?;
    let segments = file
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let region = match &s.region {
                RegionDoc::Mask { height, width, runs } => SegmentRegion::Mask(
                    RleMask::from_runs(*height, *width, runs.clone()).map_err(|e| schema(path, format!("segment {i}: {e}")))?,
                ),
                RegionDoc::Points { indices } => SegmentRegion::Points(indices.clone()),
            };
            Ok(FrameSegment {
                frame: s.frame,
                region,
                category_id: s.category_id,
                score: s.score,
                embedding: s.embedding.clone(),
            })
        })
        .collect::<Result<_, IoError>>()?;
    Ok((file, segments))
}

pub fn segment_doc(s: &FrameSegment) -> SegmentDoc {
    SegmentDoc {
        frame: s.frame,
        region: match &s.region {
            SegmentRegion::Mask(m) => RegionDoc::Mask {
                height: m.height(),
                width: m.width(),
                runs: m.runs().to_vec(),
            },
            SegmentRegion::Points(p) => RegionDoc::Points { indices: p.clone() },
        },
        category_id: s.category_id,
        score: s.score,
        embedding: s.embedding.clone(),
    }
}

pub fn video_dir(root: &Path, video_id: &str) -> PathBuf {
    root.join("videos").join(video_id)
}

pub fn depth_path(video_dir: &Path, frame: u32) -> PathBuf {
    video_dir.join("depth").join(format!("{frame:06}.png"))
}

pub fn rgb_path(video_dir: &Path, frame: u32) -> PathBuf {
    video_dir.join("rgb").join(format!("{frame:06}.png"))
}

pub fn points_path(video_dir: &Path, frame: u32) -> PathBuf {
    video_dir.join("points").join(format!("{frame:06}.bin"))
}

/// Writes `video.json`, `masks.json` and `relations.json`.
pub fn write_video_docs(dir: &Path, meta: &VideoMeta, graph: &SceneGraph4D) -> Result<(), IoError> {
    write_bytes(&dir.join("video.json"), &to_compact_json(meta))?;
    write_bytes(&dir.join("masks.json"), &to_compact_json(&masks_doc(graph)))?;
    write_bytes(&dir.join("relations.json"), &to_compact_json(&relations_doc(graph)))
}

/// Reads the three documents of a video directory. Ground-truth relations
/// without a confidence default to 1.0.
pub fn read_video_docs(dir: &Path) -> Result<(VideoMeta, SceneGraph4D), IoError> {
    let meta_path = dir.join("video.json");
    let meta: VideoMeta = read_json(&meta_path)?;
    let masks_path = dir.join("masks.json");
    let masks: MasksDoc = read_json(&masks_path)?;
    let rel_path = dir.join("relations.json");
    let rels: RelationsDoc = read_json(&rel_path)?;
    for (path, id) in [(&masks_path, &masks.video_id), (&rel_path, &rels.video_id)] {
        if *id != meta.video_id {
            return Err(schema(path, format!("video_id {id:?} differs from {:?} in video.json", meta.video_id)));
        }
    }
    if !(meta.fps > 0.0 && meta.depth_scale > 0.0 && meta.lambda > 0.0) {
        return Err(schema(&meta_path, "fps, depth_scale and lambda must be positive"));
    }
    if let Some(e) = &meta.extrinsics {
        for &frame in e.keys() {
            meta.pose(frame).map_err(|r| schema(&meta_path, r))?;
        }
    }
    let entities = masks
        .entities
        .into_iter()
        .map(entity_from_doc)
        .collect::<Result<_, _>>()
        .map_err(|r| schema(&masks_path, r))?;
    let triplets = rels
        .relations
        .iter()
        .map(|r| relation_from_doc(r, Some(1.0)))
        .collect::<Result<_, _>>()
        .map_err(|r| schema(&rel_path, r))?;
    let graph = SceneGraph4D {
        video_id: meta.video_id.clone(),
        entities,
        triplets,
        vocabulary_ref: masks.vocabulary_ref,
    };
    Ok((meta, graph))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub meta: VideoMeta,
    pub graph: SceneGraph4D,
}

/// A structural problem found while reading, with the file it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetViolation {
    pub path: String,
    #[serde(flatten)]
    pub violation: Violation,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub videos: Vec<VideoRecord>,
    pub violations: Vec<DatasetViolation>,
}

impl Dataset {
    pub fn vocabulary(&self) -> &Vocabulary {
        &self.manifest.vocabulary
    }
}

fn violation_file(v: &Violation) -> &'static str {
    match v {
        Violation::UnresolvedEntity { .. }
        | Violation::SelfRelation { .. }
        | Violation::UnknownPredicate { .. }
        | Violation::ConfidenceOutOfRange { .. }
        | Violation::NonUnitConfidence { .. } => "relations.json",
        _ => "masks.json",
    }
}

/// Writes manifest and per-video documents. Frame files are written
/// separately with [`write_depth_png`], [`write_rgb_png`] and
/// [`write_point_frame`].
pub fn write_dataset(
    root: &Path,
    vocabulary: &Vocabulary,
    videos: &[VideoRecord],
    generator: Option<GeneratorInfo>,
) -> Result<(), IoError> {
    let manifest = Manifest::new(
        vocabulary.clone(),
        videos.iter().map(|v| v.meta.video_id.clone()).collect(),
        generator,
    );
    write_bytes(&root.join("manifest.json"), &to_pretty_json(&manifest))?;
    for v in videos {
        write_video_docs(&video_dir(root, &v.meta.video_id), &v.meta, &v.graph)?;
    }
    Ok(())
}

/// Reads and checks a dataset. Unreadable or inconsistent files are errors;
/// graph-level invariant breaks are collected in `violations`.
pub fn read_dataset(root: &Path) -> Result<Dataset, IoError> {
    let manifest_path = root.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(schema(
            &manifest_path,
            format!("unsupported format {:?} version {}", manifest.format, manifest.version),
        ));
    }
    let expected = manifest.vocabulary.checksum();
    if manifest.vocabulary_checksum != expected {
        return Err(IoError::ChecksumMismatch {
            path: manifest_path,
            expected,
            found: manifest.vocabulary_checksum,
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut videos = Vec::new();
    let mut violations = Vec::new();
    for id in &manifest.videos {
        if !seen.insert(id) {
            return Err(schema(&manifest_path, format!("video {id:?} listed twice")));
        }
        let dir = video_dir(root, id);
        let (meta, graph) = read_video_docs(&dir)?;
        if meta.video_id != *id {
            return Err(schema(&dir.join("video.json"), format!("video_id {:?} differs from directory {id:?}", meta.video_id)));
        }
        if graph.vocabulary_ref != expected {
            return Err(IoError::ChecksumMismatch {
                path: dir.join("masks.json"),
                expected,
                found: graph.vocabulary_ref,
            });
        }
        let counts = check_frame_files(&dir, &meta, &graph)?;
        let mut found = validate_scene_graph(&graph, &manifest.vocabulary, ValidationMode::GroundTruth);
        found.extend(validate_point_bounds(&graph, &counts));
        found.sort();
        found.dedup();
        violations.extend(found.into_iter().map(|violation| DatasetViolation {
            path: format!("videos/{id}/{}", violation_file(&violation)),
            violation,
        }));
        videos.push(VideoRecord { meta, graph });
    }
    Ok(Dataset {
        manifest,
        videos,
        violations,
    })
}

/// Ensures every frame a tube touches has its frame file; returns point
/// counts for point-cloud videos.
fn check_frame_files(dir: &Path, meta: &VideoMeta, graph: &SceneGraph4D) -> Result<BTreeMap<u32, usize>, IoError> {
    let frames: std::collections::BTreeSet<u32> = graph
        .entities
        .iter()
        .flat_map(|e| match &e.tube {
            Tube::Mask(t) => t.frames.keys().copied().collect::<Vec<_>>(),
            Tube::Points(t) => t.frames.keys().copied().collect(),
        })
        .collect();
    let mut counts = BTreeMap::new();
    for f in frames {
        match meta.modality {
            Modality::Rgbd => {
                let p = depth_path(dir, f);
                if !p.is_file() {
                    return Err(IoError::MissingFile(p));
                }
            }
            Modality::Points => {
                counts.insert(f, read_point_count(&points_path(dir, f))? as usize);
            }
        }
    }
    Ok(counts)
}

fn image_err(path: &Path, e: image::ImageError) -> IoError {
    IoError::Image {
        path: path.to_owned(),
        reason: e.to_string(),
    }
}

fn encode_png<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    path: &Path,
    buffer: ImageBuffer<P, Vec<S>>,
) -> Result<(), IoError>
where
    [S]: image::EncodableLayout,
{
    let mut bytes = Cursor::new(Vec::new());
    buffer.write_to(&mut bytes, ImageFormat::Png).map_err(|e| image_err(path, e))?;
    write_bytes(path, bytes.get_ref())
}

/// Row-major raw depth values.
pub fn write_depth_png(path: &Path, height: u32, width: u32, raw: &[u16]) -> Result<(), IoError> {
    let buffer = ImageBuffer::<Luma<u16>, _>::from_raw(width, height, raw.to_vec())
        .ok_or_else(|| schema(path, "depth buffer size does not match shape"))?;
    encode_png(path, buffer)
}

/// Returns `(height, width, raw values)`.
pub fn read_depth_png(path: &Path) -> Result<(u32, u32, Vec<u16>), IoError> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| image_err(path, e))?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => Ok((buf.height(), buf.width(), buf.into_raw())),
        other => Err(schema(path, format!("expected 16-bit grayscale, found {:?}", other.color()))),
    }
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> Result<(), IoError> {
    let raw: Vec<u8> = image.data.iter().flatten().copied().collect();
    let buffer = ImageBuffer::<Rgb<u8>, _>::from_raw(image.width, image.height, raw)
        .ok_or_else(|| schema(path, "rgb buffer size does not match shape"))?;
    encode_png(path, buffer)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage, IoError> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| image_err(path, e))?;
    match img {
        image::DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            Ok(RgbImage::new(h, w, data))
        }
        other => Err(schema(path, format!("expected 8-bit RGB, found {:?}", other.color()))),
    }
}

/// Depth in meters from a stored frame.
pub fn read_depth_image(path: &Path, depth_scale: f64) -> Result<DepthImage, IoError> {
    let (h, w, raw) = read_depth_png(path)?;
    Ok(DepthImage::new(h, w, raw.into_iter().map(|v| v as f64 / depth_scale).collect()))
}

pub fn write_point_frame(path: &Path, points: &[ColoredPoint]) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(4 + points.len() * 24);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        let values = [
            p.position[0] as f32,
            p.position[1] as f32,
            p.position[2] as f32,
            p.color[0] as f32,
            p.color[1] as f32,
            p.color[2] as f32,
        ];
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_point_frame(path: &Path) -> Result<Vec<ColoredPoint>, IoError> {
    let bytes = read_bytes(path)?;
    let count = point_count(path, &bytes)? as usize;
    if bytes.len() != 4 + count * 24 {
        return Err(schema(path, format!("{} bytes for {count} points", bytes.len())));
    }
    let f = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    Ok((0..count)
        .map(|k| {
            let base = 4 + k * 24;
            let v: [f32; 6] = std::array::from_fn(|j| f(base + 4 * j));
            ColoredPoint {
                position: [v[0] as f64, v[1] as f64, v[2] as f64],
                color: [v[3] as u8, v[4] as u8, v[5] as u8],
            }
        })
        .collect())
}

fn point_count(path: &Path, bytes: &[u8]) -> Result<u32, IoError> {
    bytes
        .get(..4)
        .map(|h| u32::from_le_bytes(h.try_into().expect("4 bytes")))
        .ok_or_else(|| schema(path, "truncated point header"))
}

/// Reads only the count header of a point frame.
pub fn read_point_count(path: &Path) -> Result<u32, IoError> {
    use std::io::Read;
    let mut header = [0u8; 4];
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    file.read_exact(&mut header).map_err(|_| schema(path, "truncated point header"))?;
    Ok(u32::from_le_bytes(header))
}

/// Depth frames and poses of an RGB-D video for the given frames.
pub fn load_depth_sequence(
    dir: &Path,
    meta: &VideoMeta,
    frames: impl IntoIterator<Item = u32>,
) -> Result<DepthSequence, IoError> {
    let meta_path = dir.join("video.json");
    let intrinsics = meta
        .intrinsics
        .ok_or_else(|| schema(&meta_path, "RGB-D video needs intrinsics"))?;
    let mut out = BTreeMap::new();
    for f in frames {
        let depth = read_depth_image(&depth_path(dir, f), meta.depth_scale)?;
        let pose = meta.pose(f).map_err(|r| schema(&meta_path, r))?;
        out.insert(f, (depth, pose));
    }
    Ok(DepthSequence {
        intrinsics,
        frames: out,
    })
}

pub fn load_point_clouds(
    dir: &Path,
    frames: impl IntoIterator<Item = u32>,
) -> Result<BTreeMap<u32, PointCloudFrame>, IoError> {
    frames
        .into_iter()
        .map(|f| {
            let points = read_point_frame(&points_path(dir, f))?;
            Ok((
                f,
                PointCloudFrame {
                    points,
                    source_pixels: None,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ObjectClass;

    fn vocab() -> Vocabulary {
        Vocabulary::from_names(&["person", "cup"], &["holding", "near"]).unwrap()
    }

    fn graph(v: &Vocabulary) -> SceneGraph4D {
        let tube = |id: u32, r0: u32| {
            Tube::Mask(MaskTube {
                entity_id: id,
                height: 4,
                width: 4,
                frames: BTreeMap::from([(0, RleMask::rectangle(4, 4, r0, r0 + 1, 0, 4)), (1, RleMask::rectangle(4, 4, r0, r0 + 2, 1, 3))]),
            })
        };
        SceneGraph4D {
            video_id: "clip".into(),
            entities: vec![
                EntityNode {
                    entity_id: 0,
                    category_id: 0,
                    score: 1.0,
                    tube: tube(0, 0),
                    embeddings: None,
                },
                EntityNode {
                    entity_id: 1,
                    category_id: 1,
                    score: 1.0,
                    tube: tube(1, 2),
                    embeddings: Some(BTreeMap::from([(0, vec![0.25, -1.5])])),
                },
            ],
            triplets: vec![RelationTriplet {
                subject_id: 0,
                object_id: 1,
                predicate_id: 0,
                interval: FrameInterval::new(0, 2).unwrap(),
                confidence: 1.0,
            }],
            vocabulary_ref: v.checksum(),
        }
    }

    fn meta() -> VideoMeta {
        VideoMeta {
            video_id: "clip".into(),
            modality: Modality::Rgbd,
            frame_count: 2,
            fps: 30.0,
            depth_scale: 1000.0,
            lambda: 20.0,
            intrinsics: Some(CameraIntrinsics::new(4.0, 4.0, 2.0, 2.0, 4, 4).unwrap()),
            extrinsics: None,
        }
    }

    fn write_sample(root: &Path) -> VideoRecord {
        let v = vocab();
        let record = VideoRecord {
            meta: meta(),
            graph: graph(&v),
        };
        write_dataset(root, &v, std::slice::from_ref(&record), None).unwrap();
        let dir = video_dir(root, "clip");
        for f in 0..2 {
            write_depth_png(&depth_path(&dir, f), 4, 4, &[1500; 16]).unwrap();
            write_rgb_png(&rgb_path(&dir, f), &RgbImage::filled(4, 4, [1, 2, 3])).unwrap();
        }
        record
    }

    #[test]
    fn round_trip_is_lossless_and_byte_stable() {
        let tmp = tempfile::tempdir().unwrap();
        let record = write_sample(tmp.path());
        let ds = read_dataset(tmp.path()).unwrap();
        assert!(ds.violations.is_empty(), "{:?}", ds.violations);
        assert_eq!(ds.videos, vec![record]);

        let again = tempfile::tempdir().unwrap();
        write_dataset(again.path(), ds.vocabulary(), &ds.videos, None).unwrap();
        for rel in ["manifest.json", "videos/clip/masks.json", "videos/clip/relations.json", "videos/clip/video.json"] {
            assert_eq!(fs::read(tmp.path().join(rel)).unwrap(), fs::read(again.path().join(rel)).unwrap(), "{rel}");
        }
    }

    #[test]
    fn entity_order_does_not_change_bytes() {
        let v = vocab();
        let g = graph(&v);
        let mut swapped = g.clone();
        swapped.entities.reverse();
        assert_eq!(to_compact_json(&masks_doc(&g)), to_compact_json(&masks_doc(&swapped)));
    }

    #[test]
    fn duplicate_predicate_name_is_a_schema_violation() {
        let tmp = tempfile::tempdir().unwrap();
        write_sample(tmp.path());
        let path = tmp.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"near\"", "\"holding\"");
        fs::write(&path, text).unwrap();
        match read_dataset(tmp.path()) {
            Err(IoError::SchemaViolation { reason, .. }) => assert!(reason.contains("duplicate"), "{reason}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checksum_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        write_sample(tmp.path());
        let path = video_dir(tmp.path(), "clip").join("masks.json");
        let mut doc: MasksDoc = read_json(&path).unwrap();
        doc.vocabulary_ref = "sha256:00".into();
        write_bytes(&path, &to_compact_json(&doc)).unwrap();
        assert!(matches!(read_dataset(tmp.path()), Err(IoError::ChecksumMismatch { .. })));
    }

    #[test]
    fn missing_frame_file() {
        let tmp = tempfile::tempdir().unwrap();
        write_sample(tmp.path());
        let p = depth_path(&video_dir(tmp.path(), "clip"), 1);
        fs::remove_file(&p).unwrap();
        match read_dataset(tmp.path()) {
            Err(IoError::MissingFile(missing)) => assert_eq!(missing, p),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_position() {
        let tmp = tempfile::tempdir().unwrap();
        write_sample(tmp.path());
        let path = video_dir(tmp.path(), "clip").join("relations.json");
        fs::write(&path, "{\"video_id\": \"clip\",\n \"relations\": [{\"subject\": 0}]}").unwrap();
        match read_dataset(tmp.path()) {
            Err(IoError::SchemaViolation { reason, .. }) => assert!(reason.contains("line 2"), "{reason}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn violations_are_reported_per_file() {
        let tmp = tempfile::tempdir().unwrap();
        let v = vocab();
        let mut g = graph(&v);
        g.triplets[0].object_id = 0;
        let record = VideoRecord { meta: meta(), graph: g };
        write_dataset(tmp.path(), &v, &[record], None).unwrap();
        let dir = video_dir(tmp.path(), "clip");
        for f in 0..2 {
            write_depth_png(&depth_path(&dir, f), 4, 4, &[0; 16]).unwrap();
        }
        let ds = read_dataset(tmp.path()).unwrap();
        assert_eq!(ds.violations.len(), 1);
        assert_eq!(ds.violations[0].path, "videos/clip/relations.json");
        let json = serde_json::to_string(&ds.violations[0]).unwrap();
        assert!(json.contains("\"code\":\"SelfRelation\""), "{json}");
    }

    #[test]
    fn png_and_points_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("d.png");
        let raw: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        write_depth_png(&p, 3, 4, &raw).unwrap();
        assert_eq!(read_depth_png(&p).unwrap(), (3, 4, raw));
        let d = read_depth_image(&p, 1000.0).unwrap();
        assert_eq!(d.get(0, 1), 5.0);

        let rgb = RgbImage::new(1, 2, vec![[1, 2, 3], [250, 0, 7]]);
        let p = tmp.path().join("c.png");
        write_rgb_png(&p, &rgb).unwrap();
        assert_eq!(read_rgb_png(&p).unwrap(), rgb);

        let pts = vec![
            ColoredPoint {
                position: [0.5, -1.25, 3.0],
                color: [9, 8, 7],
            },
            ColoredPoint {
                position: [1.0, 2.0, 4.0],
                color: [255, 0, 0],
            },
        ];
        let p = tmp.path().join("p.bin");
        write_point_frame(&p, &pts).unwrap();
        assert_eq!(read_point_count(&p).unwrap(), 2);
        assert_eq!(read_point_frame(&p).unwrap(), pts);
        assert_eq!(fs::read(&p).unwrap().len(), 4 + 2 * 24);
    }

    #[test]
    fn predictions_require_confidence() {
        let tmp = tempfile::tempdir().unwrap();
        let v = vocab();
        let g = graph(&v);
        let path = tmp.path().join("pred.json");
        write_predictions(&path, &g.vocabulary_ref, std::slice::from_ref(&g)).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), vec![g]);
        let text = fs::read_to_string(&path).unwrap().replace(",\"confidence\":1.0", "");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_predictions(&path), Err(IoError::SchemaViolation { .. })));
    }

    #[test]
    fn vocabulary_document_shape() {
        let v = Vocabulary::new(
            vec![ObjectClass { id: 0, name: "floor".into(), is_thing: false }],
            vec![crate::model::PredicateClass { id: 0, name: "on".into() }],
        )
        .unwrap();
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(
            text,
            r#"{"objects":[{"id":0,"name":"floor","is_thing":false}],"predicates":[{"id":0,"name":"on"}]}"#
        );
        assert_eq!(serde_json::from_str::<Vocabulary>(&text).unwrap(), v);
    }
}
