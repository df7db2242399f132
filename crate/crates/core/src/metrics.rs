//! Triplet recall evaluation: R@K, mR@K and their dataset aggregation.
//!
//! A ground-truth triplet is recalled by a prediction among the top K when
//! subject, object and predicate labels all agree and both the subject and the
//! object tube overlap their ground-truth tubes with vIOU strictly above the
//! threshold. The credit is the temporal IoU of the two intervals, so recall
//! is soft. Predictions are visited in confidence order (ties by input order)
//! and each takes the first eligible unmatched ground-truth triplet.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{RelationTriplet, SceneGraph4D};
use crate::overlap::{self, IouThreshold, OverlapError};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];
pub const DEFAULT_VIOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction and ground truth use different vocabularies ({pred} vs {gt})")]
    VocabularyMismatch { pred: String, gt: String },
    #[error("K must be at least 1")]
    InvalidK,
    #[error("vIOU threshold must be finite, got {0}")]
    InvalidThreshold(f64),
    #[error("triplet references entity {0}, which is not in the graph")]
    UnresolvedEntity(u32),
    #[error("no predicate occurs in the ground truth")]
    NoGroundTruth,
    #[error("video id {0:?} appears more than once")]
    DuplicateVideoId(String),
    #[error(transparent)]
    Overlap(#[from] OverlapError),
}

/// One credited (ground truth, prediction) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripletMatch {
    pub gt_index: usize,
    pub pred_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallAtK {
    /// Absent when the ground truth has no triplets.
    pub recall: Option<f64>,
    /// Over predicates that occur in the ground truth.
    pub per_predicate: BTreeMap<u32, f64>,
    pub matched: Vec<TripletMatch>,
}

/// Scores one video; vIOU decisions are cached across K values.
struct VideoScorer<'a> {
    pred: &'a SceneGraph4D,
    gt: &'a SceneGraph4D,
    threshold: IouThreshold,
    pred_index: BTreeMap<u32, usize>,
    gt_index: BTreeMap<u32, usize>,
    tube_ok: HashMap<(u32, u32), bool>,
    /// Prediction indices by confidence descending, ties by input order.
    ranking: Vec<usize>,
}

impl<'a> VideoScorer<'a> {
    fn new(pred: &'a SceneGraph4D, gt: &'a SceneGraph4D, viou_threshold: f64) -> Result<Self, MetricsError> {
        if pred.vocabulary_ref != gt.vocabulary_ref {
            return Err(MetricsError::VocabularyMismatch {
                pred: pred.vocabulary_ref.clone(),
                gt: gt.vocabulary_ref.clone(),
            });
        }
        let threshold = IouThreshold::new(viou_threshold).ok_or(MetricsError::InvalidThreshold(viou_threshold))?;
        let mut ranking: Vec<usize> = (0..pred.triplets.len()).collect();
        ranking.sort_by(|&a, &b| pred.triplets[b].confidence.total_cmp(&pred.triplets[a].confidence));
        Ok(Self {
            pred,
            gt,
            threshold,
            pred_index: pred.entity_index(),
            gt_index: gt.entity_index(),
            tube_ok: HashMap::new(),
            ranking,
        })
    }

    fn category(graph: &SceneGraph4D, index: &BTreeMap<u32, usize>, id: u32) -> Result<u32, MetricsError> {
        index
            .get(&id)
            .map(|&i| graph.entities[i].category_id)
            .ok_or(MetricsError::UnresolvedEntity(id))
    }

    fn labels(graph: &SceneGraph4D, index: &BTreeMap<u32, usize>, t: &RelationTriplet) -> Result<(u32, u32, u32), MetricsError> {
        Ok((
            Self::category(graph, index, t.subject_id)?,
            t.predicate_id,
            Self::category(graph, index, t.object_id)?,
        ))
    }

    fn tubes_agree(&mut self, pred_entity: u32, gt_entity: u32) -> Result<bool, MetricsError> {
        if let Some(&ok) = self.tube_ok.get(&(pred_entity, gt_entity)) {
            return Ok(ok);
        }
        let p = &self.pred.entities[self.pred_index[&pred_entity]].tube;
        let g = &self.gt.entities[self.gt_index[&gt_entity]].tube;
        let ok = self.threshold.exceeded_by(&overlap::volume_iou(p, g)?);
        self.tube_ok.insert((pred_entity, gt_entity), ok);
        Ok(ok)
    }

    fn recall_at(&mut self, k: usize) -> Result<RecallAtK, MetricsError> {
        if k == 0 {
            return Err(MetricsError::InvalidK);
        }
        let gt_labels = self
            .gt
            .triplets
            .iter()
            .map(|t| Self::labels(self.gt, &self.gt_index, t))
            .collect::<Result<Vec<_>, _>>()?;
        let mut taken = vec![false; self.gt.triplets.len()];
        let mut matched = Vec::new();
        let top: Vec<usize> = self.ranking.iter().take(k).copied().collect();
        for pi in top {
            let p = &self.pred.triplets[pi];
            let labels = Self::labels(self.pred, &self.pred_index, p)?;
            for (gi, g) in self.gt.triplets.iter().enumerate() {
                if taken[gi] || gt_labels[gi] != labels {
                    continue;
                }
                if self.tubes_agree(p.subject_id, g.subject_id)? && self.tubes_agree(p.object_id, g.object_id)? {
                    taken[gi] = true;
                    matched.push(TripletMatch {
                        gt_index: gi,
                        pred_index: pi,
                        score: overlap::span_iou(&p.interval, &g.interval),
                    });
                    break;
                }
            }
        }

        let mut credit = vec![0.0; self.gt.triplets.len()];
        for m in &matched {
            credit[m.gt_index] = m.score;
        }
        let recall = (!credit.is_empty()).then(|| credit.iter().sum::<f64>() / credit.len() as f64);
        let mut by_predicate: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (g, c) in self.gt.triplets.iter().zip(&credit) {
            let e = by_predicate.entry(g.predicate_id).or_default();
            e.0 += c;
            e.1 += 1;
        }
        let per_predicate = by_predicate.into_iter().map(|(p, (sum, n))| (p, sum / n as f64)).collect();
        Ok(RecallAtK {
            recall,
            per_predicate,
            matched,
        })
    }
}

/// Soft triplet recall of `pred` against `gt` over the top `k` predictions.
pub fn recall_at_k(pred: &SceneGraph4D, gt: &SceneGraph4D, k: usize, viou_threshold: f64) -> Result<RecallAtK, MetricsError> {
    VideoScorer::new(pred, gt, viou_threshold)?.recall_at(k)
}

/// Unweighted mean of per-predicate recalls.
pub fn mean_recall_at_k(per_predicate: &BTreeMap<u32, f64>) -> Result<f64, MetricsError> {
    if per_predicate.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    Ok(per_predicate.values().sum::<f64>() / per_predicate.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedTriplet {
    pub video_id: String,
    pub gt_index: usize,
    pub pred_index: usize,
    pub score: f64,
}

/// Recall figures at one K, for a video or for the whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSummary {
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
    pub per_predicate_recall: BTreeMap<u32, f64>,
    pub matched: Vec<MatchedTriplet>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub ks: Vec<usize>,
    pub viou_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub config: ReportConfig,
    pub per_k: BTreeMap<usize, KSummary>,
    pub per_video: BTreeMap<String, BTreeMap<usize, KSummary>>,
}

/// A video's prediction paired with its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct VideoPair<'a> {
    pub pred: &'a SceneGraph4D,
    pub gt: &'a SceneGraph4D,
}

fn evaluate_video(pair: VideoPair<'_>, ks: &[usize], viou_threshold: f64) -> Result<BTreeMap<usize, KSummary>, MetricsError> {
    let mut scorer = VideoScorer::new(pair.pred, pair.gt, viou_threshold)?;
    let video_id = &pair.gt.video_id;
    ks.iter()
        .map(|&k| {
            let r = scorer.recall_at(k)?;
            let mean_recall = mean_recall_at_k(&r.per_predicate).ok();
            let matched = r
                .matched
                .into_iter()
                .map(|m| MatchedTriplet {
                    video_id: video_id.clone(),
                    gt_index: m.gt_index,
                    pred_index: m.pred_index,
                    score: m.score,
                })
                .collect();
            Ok((
                k,
                KSummary {
                    recall: r.recall,
                    mean_recall,
                    per_predicate_recall: r.per_predicate,
                    matched,
                },
            ))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Evaluates every video and macro-averages over videos whose ground truth
/// has at least one triplet. Videos run in parallel on the current rayon pool;
/// the reduction walks video ids in sorted order, so the report does not
/// depend on scheduling.
pub fn evaluate_dataset(pairs: &[VideoPair<'_>], ks: &[usize], viou_threshold: f64) -> Result<EvaluationReport, MetricsError> {
    if ks.contains(&0) {
        return Err(MetricsError::InvalidK);
    }
    let ks: Vec<usize> = ks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut seen = BTreeSet::new();
    for p in pairs {
        if !seen.insert(&p.gt.video_id) {
            return Err(MetricsError::DuplicateVideoId(p.gt.video_id.clone()));
        }
    }
    let results: Vec<(String, BTreeMap<usize, KSummary>)> = pairs
        .par_iter()
        .map(|&p| Ok((p.gt.video_id.clone(), evaluate_video(p, &ks, viou_threshold)?)))
        .collect::<Result<_, MetricsError>>()?;
    let per_video: BTreeMap<String, BTreeMap<usize, KSummary>> = results.into_iter().collect();

    let per_k = ks
        .iter()
        .map(|k| {
            let videos: Vec<&KSummary> = per_video.values().map(|v| &v[k]).filter(|s| s.recall.is_some()).collect();
            let predicates: BTreeSet<u32> = videos.iter().flat_map(|s| s.per_predicate_recall.keys().copied()).collect();
            let per_predicate_recall = predicates
                .into_iter()
                .filter_map(|p| mean(videos.iter().filter_map(|s| s.per_predicate_recall.get(&p).copied())).map(|m| (p, m)))
                .collect();
            let summary = KSummary {
                recall: mean(videos.iter().filter_map(|s| s.recall)),
                mean_recall: mean(videos.iter().filter_map(|s| s.mean_recall)),
                per_predicate_recall,
                matched: per_video.values().flat_map(|v| v[k].matched.iter().cloned()).collect(),
            };
            (*k, summary)
        })
        .collect();

    Ok(EvaluationReport {
        config: ReportConfig {
            ks,
            viou_threshold,
        },
        per_k,
        per_video,
    })
}
