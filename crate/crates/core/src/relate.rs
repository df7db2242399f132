//! Relation scoring: a pluggable scorer contract and a geometric baseline
//! that turns entity trajectories into time-stamped triplets.
//!
//! The baseline evaluates each rule per frame for every ordered entity pair,
//! groups satisfying frames into maximal runs of consecutive frames, and
//! emits one triplet per run that lasts at least `min_duration` frames.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Voxel;
use crate::model::{EntityNode, FrameInterval, RelationTriplet, Vocabulary};

/// Voxel edge used by contact rules unless a rulebook says otherwise.
pub const DEFAULT_CONTACT_VOXEL: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelateError {
    #[error("entity {0} has no trajectory")]
    MissingTrajectory(u32),
    #[error("rule {index}: {reason}")]
    InvalidRule { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// Centroid distance below the threshold.
    Near,
    /// Subject higher than object by more than the threshold (world z), with
    /// horizontal distance below the threshold.
    Above,
    /// Voxelized supports share at least one voxel.
    Contact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub predicate_id: u32,
    pub kind: RuleKind,
    /// Meters.
    pub threshold: f64,
    /// Frames.
    pub min_duration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rulebook {
    #[serde(default = "default_voxel")]
    pub voxel_size: f64,
    pub rules: Vec<Rule>,
}

fn default_voxel() -> f64 {
    DEFAULT_CONTACT_VOXEL
}

impl Rulebook {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), RelateError> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(RelateError::InvalidRule {
                index: 0,
                reason: format!("voxel_size must be positive, got {}", self.voxel_size),
            });
        }
        for (index, r) in self.rules.iter().enumerate() {
            let reason = if !(r.threshold > 0.0 && r.threshold.is_finite()) {
                format!("threshold must be positive, got {}", r.threshold)
            } else if r.min_duration < 1 {
                "min_duration must be at least 1".to_owned()
            } else if !vocab.has_predicate(r.predicate_id) {
                format!("unknown predicate {}", r.predicate_id)
            } else {
                continue;
            };
            return Err(RelateError::InvalidRule { index, reason });
        }
        Ok(())
    }
}

/// What the baseline knows about one entity in 3D.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityGeometry {
    /// Frame → centroid.
    pub trajectory: BTreeMap<u32, [f64; 3]>,
    /// Frame → occupied voxels at the rulebook's voxel size; needed by
    /// contact rules only.
    pub voxels: Option<BTreeMap<u32, Vec<Voxel>>>,
}

/// Anything that can rank relations between tracked entities.
pub trait RelationScorer {
    fn score(&self, entities: &[EntityNode]) -> Result<Vec<RelationTriplet>, RelateError>;
}

/// The geometric baseline bound to precomputed entity geometry.
pub struct GeometricScorer<'a> {
    pub geometry: &'a BTreeMap<u32, EntityGeometry>,
    pub rulebook: &'a Rulebook,
}

impl RelationScorer for GeometricScorer<'_> {
    fn score(&self, entities: &[EntityNode]) -> Result<Vec<RelationTriplet>, RelateError> {
        score_pairs_geometric(entities, self.geometry, self.rulebook)
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-frame confidence of a centroid rule, or `None` when it does not hold.
pub fn centroid_rule_confidence(kind: RuleKind, threshold: f64, subject: &[f64; 3], object: &[f64; 3]) -> Option<f64> {
    match kind {
        RuleKind::Near => {
            let d = distance(subject, object);
            (d < threshold).then(|| (1.0 - d / threshold).max(0.0))
        }
        RuleKind::Above => {
            let horizontal = ((subject[0] - object[0]).powi(2) + (subject[1] - object[1]).powi(2)).sqrt();
            (subject[2] - object[2] > threshold && horizontal < threshold).then(|| (1.0 - horizontal / threshold).max(0.0))
        }
        RuleKind::Contact => None,
    }
}

fn share_voxel(a: &[Voxel], b: &[Voxel]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Groups `(frame, confidence)` samples (ascending frames; `None` = rule
/// fails) into maximal runs of consecutive satisfying frames, keeping runs of
/// at least `min_duration` frames. Yields each run with its mean confidence.
pub fn maximal_runs(
    samples: impl IntoIterator<Item = (u32, Option<f64>)>,
    min_duration: u32,
) -> Vec<(FrameInterval, f64)> {
    let mut out = Vec::new();
    let mut open: Option<(u32, u32, f64)> = None; // (start, end, sum)
    let close = |run: Option<(u32, u32, f64)>, out: &mut Vec<(FrameInterval, f64)>| {
        if let Some((start, end, sum)) = run {
            if end - start >= min_duration {
                let interval = FrameInterval::new(start, end).expect("non-empty run");
                out.push((interval, sum / (end - start) as f64));
            }
        }
    };
    for (frame, conf) in samples {
        match (conf, open) {
            (Some(c), Some((start, end, sum))) if end == frame => open = Some((start, end + 1, sum + c)),
            (Some(c), run) => {
                close(run, &mut out);
                open = Some((frame, frame + 1, c));
            }
            (None, run) => {
                close(run, &mut out);
                open = None;
            }
        }
    }
    close(open, &mut out);
    out
}

/// Canonical output order: confidence descending, then subject, object,
/// predicate and start frame ascending.
pub fn sort_triplets(triplets: &mut [RelationTriplet]) {
    triplets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.subject_id.cmp(&b.subject_id))
            .then(a.object_id.cmp(&b.object_id))
            .then(a.predicate_id.cmp(&b.predicate_id))
            .then(a.interval.start().cmp(&b.interval.start()))
    });
}

/// Geometric baseline scorer. See the module docs for the rule semantics;
/// contact triplets always carry confidence 1.0.
pub fn score_pairs_geometric(
    entities: &[EntityNode],
    geometry: &BTreeMap<u32, EntityGeometry>,
    rulebook: &Rulebook,
) -> Result<Vec<RelationTriplet>, RelateError> {
    for e in entities {
        let g = geometry.get(&e.entity_id).ok_or(RelateError::MissingTrajectory(e.entity_id))?;
        let needs_voxels = rulebook.rules.iter().any(|r| r.kind == RuleKind::Contact);
        if needs_voxels && g.voxels.is_none() {
            return Err(RelateError::MissingTrajectory(e.entity_id));
        }
    }
    let ids: Vec<u32> = entities.iter().map(|e| e.entity_id).collect();
    let pairs: Vec<(u32, u32)> = ids
        .iter()
        .flat_map(|&s| ids.iter().filter(move |&&o| o != s).map(move |&o| (s, o)))
        .collect();

    let mut triplets: Vec<RelationTriplet> = pairs
        .par_iter()
        .flat_map_iter(|&(s, o)| {
            let (gs, go) = (&geometry[&s], &geometry[&o]);
            rulebook.rules.iter().flat_map(move |rule| {
                let samples: Vec<(u32, Option<f64>)> = match rule.kind {
                    RuleKind::Contact => {
                        let (vs, vo) = (gs.voxels.as_ref().expect("checked"), go.voxels.as_ref().expect("checked"));
                        let frames: BTreeSet<u32> = vs.keys().filter(|f| vo.contains_key(f)).copied().collect();
                        frames
                            .into_iter()
                            .map(|f| (f, share_voxel(&vs[&f], &vo[&f]).then_some(1.0)))
                            .collect()
                    }
                    kind => gs
                        .trajectory
                        .iter()
                        .filter_map(|(f, ps)| go.trajectory.get(f).map(|po| (*f, ps, po)))
                        .map(|(f, ps, po)| (f, centroid_rule_confidence(kind, rule.threshold, ps, po)))
                        .collect(),
                };
                maximal_runs(samples, rule.min_duration)
                    .into_iter()
                    .map(move |(interval, confidence)| RelationTriplet {
                        subject_id: s,
                        object_id: o,
                        predicate_id: rule.predicate_id,
                        interval,
                        confidence,
                    })
            })
        })
        .collect();
    sort_triplets(&mut triplets);
    Ok(triplets)
}
