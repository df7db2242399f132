//! Scene-graph domain types and structural validation.
//!
//! A [`SceneGraph4D`] holds, for one video, the tracked entities (each with a
//! segmentation tube over time) and the time-stamped relation triplets between
//! them. Graphs are plain data; [`validate_scene_graph`] reports every broken
//! invariant as a [`Violation`] rather than failing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::overlap::RleMask;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("interval [{start}, {end}) is empty or reversed")]
    InvalidInterval { start: u32, end: u32 },
    #[error("{kind} class ids must be dense 0..n-1; position {position} has id {id}")]
    SparseClassId {
        kind: &'static str,
        position: usize,
        id: u32,
    },
    #[error("duplicate {kind} class name {name:?}")]
    DuplicateClassName { kind: &'static str, name: String },
    #[error("vocabulary needs at least one {0} class")]
    EmptyVocabulary(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateClass {
    pub id: u32,
    pub name: String,
}

/// Object and predicate class lists. Ids are dense and names unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyParts")]
pub struct Vocabulary {
    objects: Vec<ObjectClass>,
    predicates: Vec<PredicateClass>,
}

#[derive(Deserialize)]
struct VocabularyParts {
    objects: Vec<ObjectClass>,
    predicates: Vec<PredicateClass>,
}

impl TryFrom<VocabularyParts> for Vocabulary {
    type Error = ModelError;

    fn try_from(parts: VocabularyParts) -> Result<Self, ModelError> {
        Self::new(parts.objects, parts.predicates)
    }
}

impl Vocabulary {
    pub fn new(objects: Vec<ObjectClass>, predicates: Vec<PredicateClass>) -> Result<Self, ModelError> {
        if objects.is_empty() {
            return Err(ModelError::EmptyVocabulary("object"));
        }
        if predicates.is_empty() {
            return Err(ModelError::EmptyVocabulary("predicate"));
        }
        check_classes("object", objects.iter().map(|c| (c.id, c.name.as_str())))?;
        check_classes("predicate", predicates.iter().map(|c| (c.id, c.name.as_str())))?;
        Ok(Self {
            objects,
            predicates,
        })
    }

    /// Convenience constructor from bare names; every object is a thing.
    pub fn from_names<S: AsRef<str>>(objects: &[S], predicates: &[S]) -> Result<Self, ModelError> {
        Self::new(
            objects
                .iter()
                .enumerate()
                .map(|(i, n)| ObjectClass {
                    id: i as u32,
                    name: n.as_ref().to_owned(),
                    is_thing: true,
                })
                .collect(),
            predicates
                .iter()
                .enumerate()
                .map(|(i, n)| PredicateClass {
                    id: i as u32,
                    name: n.as_ref().to_owned(),
                })
                .collect(),
        )
    }

    pub fn objects(&self) -> &[ObjectClass] {
        &self.objects
    }

    pub fn predicates(&self) -> &[PredicateClass] {
        &self.predicates
    }

    pub fn object_name(&self, id: u32) -> Option<&str> {
        self.objects.get(id as usize).map(|c| c.name.as_str())
    }

    pub fn predicate_name(&self, id: u32) -> Option<&str> {
        self.predicates.get(id as usize).map(|c| c.name.as_str())
    }

    pub fn has_object(&self, id: u32) -> bool {
        (id as usize) < self.objects.len()
    }

    pub fn has_predicate(&self, id: u32) -> bool {
        (id as usize) < self.predicates.len()
    }

    /// `sha256:<hex>` over the canonical JSON encoding of the vocabulary.
    pub fn checksum(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("vocabulary serializes");
        format!("sha256:{}", hex::encode(Sha256::digest(&canonical)))
    }
}

fn check_classes<'a>(
    kind: &'static str,
    classes: impl Iterator<Item = (u32, &'a str)>,
) -> Result<(), ModelError> {
    let mut names = BTreeSet::new();
    for (position, (id, name)) in classes.enumerate() {
        if id as usize != position {
            return Err(ModelError::SparseClassId { kind, position, id });
        }
        if !names.insert(name) {
            return Err(ModelError::DuplicateClassName {
                kind,
                name: name.to_owned(),
            });
        }
    }
    Ok(())
}

/// Half-open frame range `[start, end)` with `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameInterval {
    start: u32,
    end: u32,
}

impl FrameInterval {
    pub fn new(start: u32, end: u32) -> Result<Self, ModelError> {
        if start >= end {
            return Err(ModelError::InvalidInterval { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn end(&self) -> u32 {
        self.end
    }

    pub fn len(&self) -> u32 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: u32) -> bool {
        (self.start..self.end).contains(&frame)
    }
}

impl fmt::Display for FrameInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Per-frame pixel masks of one entity in an RGB-D video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTube {
    pub entity_id: u32,
    pub height: u32,
    pub width: u32,
    pub frames: BTreeMap<u32, RleMask>,
}

/// Per-frame point-index sets of one entity in a point-cloud video. Indices
/// refer to the shared per-frame point cloud of the video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointTube {
    pub entity_id: u32,
    pub frames: BTreeMap<u32, Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tube {
    Mask(MaskTube),
    Points(PointTube),
}

impl Tube {
    pub fn entity_id(&self) -> u32 {
        match self {
            Tube::Mask(t) => t.entity_id,
            Tube::Points(t) => t.entity_id,
        }
    }

    pub fn kind(&self) -> TubeKind {
        match self {
            Tube::Mask(_) => TubeKind::Mask,
            Tube::Points(_) => TubeKind::Points,
        }
    }

    /// Frames on which the tube selects at least one pixel or point.
    pub fn occupied_frames(&self) -> Vec<u32> {
        match self {
            Tube::Mask(t) => t
                .frames
                .iter()
                .filter(|(_, m)| !m.is_empty())
                .map(|(f, _)| *f)
                .collect(),
            Tube::Points(t) => t
                .frames
                .iter()
                .filter(|(_, p)| !p.is_empty())
                .map(|(f, _)| *f)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TubeKind {
    Mask,
    Points,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityNode {
    pub entity_id: u32,
    pub category_id: u32,
    /// Class probability; ground truth uses 1.0.
    pub score: f64,
    pub tube: Tube,
    /// Per-frame tracking embeddings, all of one dimension.
    pub embeddings: Option<BTreeMap<u32, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationTriplet {
    pub subject_id: u32,
    pub object_id: u32,
    pub predicate_id: u32,
    pub interval: FrameInterval,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph4D {
    pub video_id: String,
    pub entities: Vec<EntityNode>,
    pub triplets: Vec<RelationTriplet>,
    /// Checksum of the vocabulary the graph was written against.
    pub vocabulary_ref: String,
}

impl SceneGraph4D {
    pub fn empty(video_id: impl Into<String>, vocabulary: &Vocabulary) -> Self {
        Self {
            video_id: video_id.into(),
            entities: Vec::new(),
            triplets: Vec::new(),
            vocabulary_ref: vocabulary.checksum(),
        }
    }

    pub fn entity(&self, id: u32) -> Option<&EntityNode> {
        self.entities.iter().find(|e| e.entity_id == id)
    }

    /// Map from entity id to its position in `entities` (first occurrence).
    pub fn entity_index(&self) -> BTreeMap<u32, usize> {
        let mut index = BTreeMap::new();
        for (i, e) in self.entities.iter().enumerate() {
            index.entry(e.entity_id).or_insert(i);
        }
        index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    GroundTruth,
    Prediction,
}

/// One broken invariant. The derived ordering sorts by code (variant order)
/// and then by the offending id, which is the order validation reports in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "code")]
pub enum Violation {
    VocabularyMismatch,
    DuplicateEntity { entity: u32 },
    UnknownCategory { entity: u32, category: u32 },
    ScoreOutOfRange { entity: u32 },
    NonUnitScore { entity: u32 },
    TubeEntityMismatch { entity: u32 },
    MixedTubeKinds { entity: u32 },
    EmptyTube { entity: u32 },
    MaskShape { entity: u32, frame: u32 },
    UnsortedPointIndices { entity: u32, frame: u32 },
    PointIndexOutOfRange { entity: u32, frame: u32 },
    EmbeddingDimension { entity: u32 },
    PanopticOverlap { frame: u32 },
    UnresolvedEntity { entity: u32 },
    SelfRelation { triplet: usize },
    UnknownPredicate { triplet: usize, predicate: u32 },
    ConfidenceOutOfRange { triplet: usize },
    NonUnitConfidence { triplet: usize },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::VocabularyMismatch => "VocabularyMismatch",
            Violation::DuplicateEntity { .. } => "DuplicateEntity",
            Violation::UnknownCategory { .. } => "UnknownCategory",
            Violation::ScoreOutOfRange { .. } => "ScoreOutOfRange",
            Violation::NonUnitScore { .. } => "NonUnitScore",
            Violation::TubeEntityMismatch { .. } => "TubeEntityMismatch",
            Violation::MixedTubeKinds { .. } => "MixedTubeKinds",
            Violation::EmptyTube { .. } => "EmptyTube",
            Violation::MaskShape { .. } => "MaskShape",
            Violation::UnsortedPointIndices { .. } => "UnsortedPointIndices",
            Violation::PointIndexOutOfRange { .. } => "PointIndexOutOfRange",
            Violation::EmbeddingDimension { .. } => "EmbeddingDimension",
            Violation::PanopticOverlap { .. } => "PanopticOverlap",
            Violation::UnresolvedEntity { .. } => "UnresolvedEntity",
            Violation::SelfRelation { .. } => "SelfRelation",
            Violation::UnknownPredicate { .. } => "UnknownPredicate",
            Violation::ConfidenceOutOfRange { .. } => "ConfidenceOutOfRange",
            Violation::NonUnitConfidence { .. } => "NonUnitConfidence",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::VocabularyMismatch => write!(f, "VocabularyMismatch"),
            Violation::DuplicateEntity { entity }
            | Violation::ScoreOutOfRange { entity }
            | Violation::NonUnitScore { entity }
            | Violation::TubeEntityMismatch { entity }
            | Violation::MixedTubeKinds { entity }
            | Violation::EmptyTube { entity }
            | Violation::EmbeddingDimension { entity }
            | Violation::UnresolvedEntity { entity } => write!(f, "{}({entity})", self.code()),
            Violation::UnknownCategory { entity, category } => {
                write!(f, "UnknownCategory(entity={entity}, category={category})")
            }
            Violation::MaskShape { entity, frame }
            | Violation::UnsortedPointIndices { entity, frame }
            | Violation::PointIndexOutOfRange { entity, frame } => {
                write!(f, "{}(entity={entity}, frame={frame})", self.code())
            }
            Violation::PanopticOverlap { frame } => write!(f, "PanopticOverlap(frame={frame})"),
            Violation::SelfRelation { triplet }
            | Violation::ConfidenceOutOfRange { triplet }
            | Violation::NonUnitConfidence { triplet } => {
                write!(f, "{}(triplet={triplet})", self.code())
            }
            Violation::UnknownPredicate { triplet, predicate } => {
                write!(f, "UnknownPredicate(triplet={triplet}, predicate={predicate})")
            }
        }
    }
}

/// Reports every invariant violation of `graph`, sorted by code then id.
///
/// Ground-truth mode additionally requires unit scores and confidences and
/// that no two mask tubes share a pixel on any frame.
pub fn validate_scene_graph(
    graph: &SceneGraph4D,
    vocab: &Vocabulary,
    mode: ValidationMode,
) -> Vec<Violation> {
    let mut out = BTreeSet::new();
    if graph.vocabulary_ref != vocab.checksum() {
        out.insert(Violation::VocabularyMismatch);
    }

    let mut seen = BTreeSet::new();
    let first_kind = graph.entities.first().map(|e| e.tube.kind());
    let first_shape = graph.entities.iter().find_map(|e| match &e.tube {
        Tube::Mask(t) => Some((t.height, t.width)),
        Tube::Points(_) => None,
    });
    for e in &graph.entities {
        let id = e.entity_id;
        if !seen.insert(id) {
            out.insert(Violation::DuplicateEntity { entity: id });
        }
        if !vocab.has_object(e.category_id) {
            out.insert(Violation::UnknownCategory {
                entity: id,
                category: e.category_id,
            });
        }
        if !(0.0..=1.0).contains(&e.score) {
            out.insert(Violation::ScoreOutOfRange { entity: id });
        } else if mode == ValidationMode::GroundTruth && e.score != 1.0 {
            out.insert(Violation::NonUnitScore { entity: id });
        }
        if e.tube.entity_id() != id {
            out.insert(Violation::TubeEntityMismatch { entity: id });
        }
        if Some(e.tube.kind()) != first_kind {
            out.insert(Violation::MixedTubeKinds { entity: id });
        }
        if e.tube.occupied_frames().is_empty() {
            out.insert(Violation::EmptyTube { entity: id });
        }
        match &e.tube {
            Tube::Mask(t) => {
                for (&frame, mask) in &t.frames {
                    if mask.shape() != (t.height, t.width) || Some((t.height, t.width)) != first_shape {
                        out.insert(Violation::MaskShape { entity: id, frame });
                    }
                }
            }
            Tube::Points(t) => {
                for (&frame, idx) in &t.frames {
                    if idx.windows(2).any(|w| w[0] >= w[1]) {
                        out.insert(Violation::UnsortedPointIndices { entity: id, frame });
                    }
                }
            }
        }
        if let Some(emb) = &e.embeddings {
            let mut dims = emb.values().map(Vec::len);
            if let Some(d) = dims.next() {
                let bad = d == 0
                    || dims.any(|x| x != d)
                    || emb.values().flatten().any(|v| !v.is_finite());
                if bad {
                    out.insert(Violation::EmbeddingDimension { entity: id });
                }
            }
        }
    }

    if mode == ValidationMode::GroundTruth {
        for frame in panoptic_overlaps(graph) {
            out.insert(Violation::PanopticOverlap { frame });
        }
    }

    for (i, t) in graph.triplets.iter().enumerate() {
        for id in [t.subject_id, t.object_id] {
            if !seen.contains(&id) {
                out.insert(Violation::UnresolvedEntity { entity: id });
            }
        }
        if t.subject_id == t.object_id {
            out.insert(Violation::SelfRelation { triplet: i });
        }
        if !vocab.has_predicate(t.predicate_id) {
            out.insert(Violation::UnknownPredicate {
                triplet: i,
                predicate: t.predicate_id,
            });
        }
        if !(0.0..=1.0).contains(&t.confidence) {
            out.insert(Violation::ConfidenceOutOfRange { triplet: i });
        } else if mode == ValidationMode::GroundTruth && t.confidence != 1.0 {
            out.insert(Violation::NonUnitConfidence { triplet: i });
        }
    }
    out.into_iter().collect()
}

/// Checks point tubes against the per-frame point counts of their video.
pub fn validate_point_bounds(graph: &SceneGraph4D, point_counts: &BTreeMap<u32, usize>) -> Vec<Violation> {
    let mut out = BTreeSet::new();
    for e in &graph.entities {
        if let Tube::Points(t) = &e.tube {
            for (&frame, idx) in &t.frames {
                let count = point_counts.get(&frame).copied().unwrap_or(0);
                if idx.iter().any(|&i| i as usize >= count) {
                    out.insert(Violation::PointIndexOutOfRange {
                        entity: e.entity_id,
                        frame,
                    });
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Frames on which two tubes claim the same pixel or point.
fn panoptic_overlaps(graph: &SceneGraph4D) -> BTreeSet<u32> {
    let mut per_frame: BTreeMap<u32, Vec<(u64, u64)>> = BTreeMap::new();
    for e in &graph.entities {
        match &e.tube {
            Tube::Mask(t) => {
                for (&frame, mask) in &t.frames {
                    per_frame.entry(frame).or_default().extend(mask.foreground());
                }
            }
            Tube::Points(t) => {
                for (&frame, idx) in &t.frames {
                    per_frame
                        .entry(frame)
                        .or_default()
                        .extend(idx.iter().map(|&i| (i as u64, i as u64 + 1)));
                }
            }
        }
    }
    per_frame
        .into_iter()
        .filter_map(|(frame, mut spans)| {
            spans.sort_unstable();
            let clash = spans.windows(2).any(|w| w[1].0 < w[0].1);
            clash.then_some(frame)
        })
        .collect()
}
