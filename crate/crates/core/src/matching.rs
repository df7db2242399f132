//! Optimal assignment, tube-to-ground-truth matching and frame-to-frame
//! track linking.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{EntityNode, MaskTube, PointTube, Tube};
use crate::overlap::{self, IouThreshold, Overlap, OverlapError, RleMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("cost matrix is empty")]
    EmptyMatrix,
    #[error("cost matrix rows have different lengths")]
    RaggedMatrix,
    #[error("cost matrix contains a non-finite entry at ({0}, {1})")]
    NonFiniteCost(usize, usize),
    #[error("threshold {name} = {value} is outside [0, 1]")]
    InvalidThreshold { name: &'static str, value: f64 },
    #[error("segment {0} has a zero or non-finite embedding")]
    InvalidEmbedding(usize),
    #[error("segment {0} embedding dimension differs from the first segment")]
    EmbeddingDimension(usize),
    #[error("segment {0} mixes mask and point regions, or its mask shape differs")]
    RegionMismatch(usize),
    #[error(transparent)]
    Overlap(#[from] OverlapError),
}

/// Result of [`hungarian`]: `(row, col)` pairs sorted by row, and their cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost assignment of size `min(rows, cols)`.
///
/// Among all optimal assignments the lexicographically smallest sorted pair
/// list is returned, with costs compared under a small relative tolerance.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, MatchingError> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(MatchingError::EmptyMatrix);
    }
    if cost.iter().any(|r| r.len() != cols) {
        return Err(MatchingError::RaggedMatrix);
    }
    for (i, row) in cost.iter().enumerate() {
        if let Some(j) = row.iter().position(|c| !c.is_finite()) {
            return Err(MatchingError::NonFiniteCost(i, j));
        }
    }

    // Pad to square with zero-cost dummy rows/columns.
    let n = rows.max(cols);
    let mut square = vec![0.0; n * n];
    for (i, row) in cost.iter().enumerate() {
        square[i * n..i * n + cols].copy_from_slice(row);
    }
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;

    let all: Vec<usize> = (0..n).collect();
    let (mut current, best, duals) = solve_square(&square, n, &all, &all);
    let reduced = |i: usize, j: usize| square[i * n + j] - duals.0[i] - duals.1[j];

    // Fix rows in order, each to the smallest column that still admits an
    // optimal completion. Optimal assignments only use tight edges.
    let mut used = vec![false; n];
    let mut fixed_cost = 0.0;
    for r in 0..rows {
        let mut candidates: Vec<usize> = (0..cols)
            .filter(|&j| !used[j] && (reduced(r, j) <= tol || j == current[r]))
            .collect();
        if let Some(dummy) = (cols..n).find(|&j| !used[j]) {
            candidates.push(dummy);
        }
        let same = |a: usize, b: usize| a == b || (a >= cols && b >= cols);
        for c in candidates {
            if same(c, current[r]) {
                if c != current[r] {
                    // swap dummy columns so `current` stays a permutation
                    let other = current.iter().position(|&x| x == c).expect("permutation");
                    current.swap(r, other);
                }
                break;
            }
            let rest_rows: Vec<usize> = (r + 1..n).collect();
            let rest_cols: Vec<usize> = (0..n).filter(|&j| !used[j] && j != c).collect();
            let (sub, sub_cost, _) = solve_square(&square, n, &rest_rows, &rest_cols);
            if fixed_cost + square[r * n + c] + sub_cost <= best + tol {
                current[r] = c;
                for (k, &row) in rest_rows.iter().enumerate() {
                    current[row] = sub[k];
                }
                break;
            }
        }
        let c = current[r];
        used[c] = true;
        fixed_cost += square[r * n + c];
    }

    let pairs: Vec<(usize, usize)> = (0..rows)
        .filter(|&r| current[r] < cols)
        .map(|r| (r, current[r]))
        .collect();
    let total = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(Assignment { pairs, cost: total })
}

/// Shortest-augmenting-path Hungarian on the sub-matrix `row_ids × col_ids`
/// of the `n`-wide square matrix. Returns, per entry of `row_ids`, the chosen
/// column id (in the full matrix), the optimal cost, and row/column duals over
/// the full index space (meaningful only for the selected ids).
fn solve_square(
    square: &[f64],
    n: usize,
    row_ids: &[usize],
    col_ids: &[usize],
) -> (Vec<usize>, f64, (Vec<f64>, Vec<f64>)) {
    let k = row_ids.len();
    debug_assert_eq!(k, col_ids.len());
    let at = |i: usize, j: usize| square[row_ids[i - 1] * n + col_ids[j - 1]];
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut visited = vec![false; k + 1];
        loop {
            visited[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if visited[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if visited[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assigned = vec![0usize; k];
    let mut total = 0.0;
    for j in 1..=k {
        if p[j] > 0 {
            assigned[p[j] - 1] = col_ids[j - 1];
            total += at(p[j], j);
        }
    }
    let mut row_dual = vec![0.0; n];
    let mut col_dual = vec![0.0; n];
    for i in 1..=k {
        row_dual[row_ids[i - 1]] = u[i];
        col_dual[col_ids[i - 1]] = v[i];
    }
    (assigned, total, (row_dual, col_dual))
}

/// Maximum-total-vIOU one-to-one matching of predicted tubes to ground-truth
/// tubes. Matched pairs whose vIOU is below `min_viou` are dropped afterwards.
/// Returns gt index → (pred index, vIOU).
pub fn assign_tubes(
    pred: &[Tube],
    gt: &[Tube],
    min_viou: f64,
) -> Result<BTreeMap<usize, (usize, Overlap)>, MatchingError> {
    let threshold = IouThreshold::new(min_viou).ok_or(MatchingError::InvalidThreshold {
        name: "min_viou",
        value: min_viou,
    })?;
    if pred.is_empty() || gt.is_empty() {
        return Ok(BTreeMap::new());
    }
    let mut overlaps = Vec::with_capacity(gt.len());
    for g in gt {
        let row = pred
            .iter()
            .map(|p| overlap::volume_iou(p, g))
            .collect::<Result<Vec<_>, _>>()?;
        overlaps.push(row);
    }
    let cost: Vec<Vec<f64>> = overlaps
        .iter()
        .map(|row| row.iter().map(|o| 1.0 - o.iou()).collect())
        .collect();
    let assignment = hungarian(&cost)?;
    Ok(assignment
        .pairs
        .into_iter()
        .filter(|&(g, p)| threshold.reached_by(&overlaps[g][p]))
        .map(|(g, p)| (g, (p, overlaps[g][p])))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentRegion {
    Mask(RleMask),
    /// Sorted indices into the frame's point cloud.
    Points(Vec<u32>),
}

/// One frame-level segment awaiting association.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSegment {
    pub frame: u32,
    pub region: SegmentRegion,
    pub category_id: u32,
    pub score: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Minimum cosine similarity for a link.
    pub tau: f64,
    /// Optional minimum frame IoU for a link.
    pub iou_gate: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            iou_gate: None,
        }
    }
}

/// Tracks plus, for every input segment, the index of the track it joined.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracks {
    pub entities: Vec<EntityNode>,
    pub membership: Vec<usize>,
}

pub fn link_tracks(segments: &[FrameSegment], config: &TrackerConfig) -> Result<Vec<EntityNode>, MatchingError> {
    Ok(link_tracks_detailed(segments, config)?.entities)
}

/// Links segments of adjacent frames by cosine similarity of their
/// embeddings. A track is matched on its most recent embedding and can only be
/// extended from the immediately preceding frame.
pub fn link_tracks_detailed(segments: &[FrameSegment], config: &TrackerConfig) -> Result<Tracks, MatchingError> {
    if !(0.0..=1.0).contains(&config.tau) {
        return Err(MatchingError::InvalidThreshold {
            name: "tau",
            value: config.tau,
        });
    }
    if let Some(g) = config.iou_gate {
        if !(0.0..=1.0).contains(&g) {
            return Err(MatchingError::InvalidThreshold {
                name: "iou_gate",
                value: g,
            });
        }
    }
    let unit = normalized_embeddings(segments)?;
    check_regions(segments)?;

    let mut by_frame: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_frame.entry(s.frame).or_default().push(i);
    }

    // Each track: member segment indices; the last one is the match anchor.
    let mut tracks: Vec<Vec<usize>> = Vec::new();
    let mut membership = vec![usize::MAX; segments.len()];
    for (&frame, current) in &by_frame {
        let active: Vec<usize> = (0..tracks.len())
            .filter(|&t| frame > 0 && segments[*tracks[t].last().expect("non-empty")].frame == frame - 1)
            .collect();
        let mut taken = vec![false; current.len()];
        if !active.is_empty() {
            let cost: Vec<Vec<f64>> = active
                .iter()
                .map(|&t| {
                    let anchor = *tracks[t].last().expect("non-empty");
                    current.iter().map(|&s| 1.0 - dot(&unit[anchor], &unit[s])).collect()
                })
                .collect();
            for (r, c) in hungarian(&cost)?.pairs {
                let (t, s) = (active[r], current[c]);
                let anchor = *tracks[t].last().expect("non-empty");
                if dot(&unit[anchor], &unit[s]) < config.tau {
                    continue;
                }
                if let Some(gate) = config.iou_gate {
                    if region_iou(&segments[anchor].region, &segments[s].region) < gate {
                        continue;
                    }
                }
                tracks[t].push(s);
                membership[s] = t;
                taken[c] = true;
            }
        }
        for (c, &s) in current.iter().enumerate() {
            if !taken[c] {
                membership[s] = tracks.len();
                tracks.push(vec![s]);
            }
        }
    }

    let entities = tracks
        .iter()
        .enumerate()
        .map(|(id, members)| build_entity(id as u32, members, segments))
        .collect();
    Ok(Tracks { entities, membership })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized_embeddings(segments: &[FrameSegment]) -> Result<Vec<Vec<f64>>, MatchingError> {
    let dim = segments.first().map_or(0, |s| s.embedding.len());
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.embedding.len() != dim {
                return Err(MatchingError::EmbeddingDimension(i));
            }
            let norm = dot(&s.embedding, &s.embedding).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(MatchingError::InvalidEmbedding(i));
            }
            Ok(s.embedding.iter().map(|x| x / norm).collect())
        })
        .collect()
}

fn check_regions(segments: &[FrameSegment]) -> Result<(), MatchingError> {
    let Some(first) = segments.first() else {
        return Ok(());
    };
    for (i, s) in segments.iter().enumerate() {
        let ok = match (&first.region, &s.region) {
            (SegmentRegion::Mask(a), SegmentRegion::Mask(b)) => a.shape() == b.shape(),
            (SegmentRegion::Points(_), SegmentRegion::Points(p)) => p.windows(2).all(|w| w[0] < w[1]),
            _ => false,
        };
        if !ok {
            return Err(MatchingError::RegionMismatch(i));
        }
    }
    Ok(())
}

fn region_iou(a: &SegmentRegion, b: &SegmentRegion) -> f64 {
    match (a, b) {
        (SegmentRegion::Mask(a), SegmentRegion::Mask(b)) => overlap::frame_iou(a, b).map_or(0.0, |o| o.iou()),
        (SegmentRegion::Points(a), SegmentRegion::Points(b)) => {
            let ta = Tube::Points(PointTube {
                entity_id: 0,
                frames: BTreeMap::from([(0, a.clone())]),
            });
            let tb = Tube::Points(PointTube {
                entity_id: 0,
                frames: BTreeMap::from([(0, b.clone())]),
            });
            overlap::volume_iou(&ta, &tb).map_or(0.0, |o| o.iou())
        }
        _ => 0.0,
    }
}

fn build_entity(id: u32, members: &[usize], segments: &[FrameSegment]) -> EntityNode {
    // category: majority vote, ties to highest mean score, then lowest id
    let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for &m in members {
        let e = votes.entry(segments[m].category_id).or_default();
        e.0 += 1;
        e.1 += segments[m].score;
    }
    let mut category = 0;
    let mut best: Option<(usize, f64)> = None;
    for (&cat, &(count, sum)) in &votes {
        let mean = sum / count as f64;
        let better = match best {
            None => true,
            Some((bc, bm)) => count > bc || (count == bc && mean > bm),
        };
        if better {
            best = Some((count, mean));
            category = cat;
        }
    }
    let score = members.iter().map(|&m| segments[m].score).sum::<f64>() / members.len() as f64;

    let tube = match &segments[members[0]].region {
        SegmentRegion::Mask(first) => Tube::Mask(MaskTube {
            entity_id: id,
            height: first.height(),
            width: first.width(),
            frames: members
                .iter()
                .filter_map(|&m| match &segments[m].region {
                    SegmentRegion::Mask(mask) => Some((segments[m].frame, mask.clone())),
                    SegmentRegion::Points(_) => None,
                })
                .collect(),
        }),
        SegmentRegion::Points(_) => Tube::Points(PointTube {
            entity_id: id,
            frames: members
                .iter()
                .filter_map(|&m| match &segments[m].region {
                    SegmentRegion::Points(p) => Some((segments[m].frame, p.clone())),
                    SegmentRegion::Mask(_) => None,
                })
                .collect(),
        }),
    };
    EntityNode {
        entity_id: id,
        category_id: category,
        score,
        tube,
        embeddings: Some(
            members
                .iter()
                .map(|&m| (segments[m].frame, segments[m].embedding.clone()))
                .collect(),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use proptest::prelude::*;

    /// Brute-force minimum over all injective row→col (or col→row) maps.
    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let (n, m) = (cost.len(), cost[0].len());
        if n <= m {
            (0..m)
                .permutations(n)
                .map(|p| p.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        } else {
            (0..n)
                .permutations(m)
                .map(|p| p.iter().enumerate().map(|(c, &r)| cost[r][c]).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        }
    }

    #[test]
    fn diagonal_zero() {
        let cost = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn two_by_two() {
        let a = hungarian(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn errors() {
        assert_eq!(hungarian(&[]), Err(MatchingError::EmptyMatrix));
        assert_eq!(hungarian(&[vec![]]), Err(MatchingError::EmptyMatrix));
        assert_eq!(hungarian(&[vec![1.0], vec![1.0, 2.0]]), Err(MatchingError::RaggedMatrix));
        assert_eq!(hungarian(&[vec![f64::NAN]]), Err(MatchingError::NonFiniteCost(0, 0)));
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let a = hungarian(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        // Optimum 2 reachable via {(0,1),(1,0)} and {(0,0),(1,1)}.
        let a = hungarian(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        // Wide: row 0 can take col 0 or col 2 at equal cost.
        let a = hungarian(&[vec![0.0, 5.0, 0.0], vec![5.0, 0.0, 5.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        // Tall: rows 0 and 2 tie for the single column; row 0 wins.
        let a = hungarian(&[vec![1.0], vec![3.0], vec![1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        // Tall where leaving row 0 out is strictly better.
        let a = hungarian(&[vec![9.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
    }

    fn arb_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| {
            proptest::collection::vec(proptest::collection::vec(prop_oneof![-5.0f64..5.0, (0i32..3).prop_map(f64::from)], m), n)
        })
    }

    proptest! {
        #[test]
        fn matches_exhaustive_optimum(cost in arb_matrix()) {
            let a = hungarian(&cost).unwrap();
            let (n, m) = (cost.len(), cost[0].len());
            prop_assert_eq!(a.pairs.len(), n.min(m));
            prop_assert!(a.pairs.iter().map(|p| p.1).all_unique());
            prop_assert!((a.cost - brute_force_min(&cost)).abs() < 1e-9);
        }

        #[test]
        fn integer_ties_pick_lexicographic_minimum(cost in proptest::collection::vec(proptest::collection::vec(0i32..2, 4), 4)) {
            let cost: Vec<Vec<f64>> = cost.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
            let best = brute_force_min(&cost);
            let lexi = (0..4)
                .permutations(4)
                .find(|p| (p.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>() - best).abs() < 1e-12)
                .unwrap();
            let a = hungarian(&cost).unwrap();
            prop_assert_eq!(a.pairs.iter().map(|p| p.1).collect::<Vec<_>>(), lexi);
        }
    }

    fn tube(frames: &[(u32, RleMask)]) -> Tube {
        Tube::Mask(MaskTube {
            entity_id: 0,
            height: 10,
            width: 10,
            frames: frames.iter().cloned().collect(),
        })
    }

    #[test]
    fn assign_identity() {
        let gt: Vec<Tube> = (0..3).map(|i| tube(&[(0, RleMask::rectangle(10, 10, i * 3, i * 3 + 2, 0, 5))])).collect();
        let m = assign_tubes(&gt, &gt, 0.5).unwrap();
        assert_eq!(m.len(), 3);
        for (g, (p, o)) in m {
            assert_eq!(g, p);
            assert_eq!(o.iou(), 1.0);
        }
    }

    #[test]
    fn assign_prefers_higher_viou() {
        // gt: 10 pixels; pred A covers 9 of them (0.9), pred B 4 (0.4).
        let gt = vec![tube(&[(0, RleMask::rectangle(10, 10, 0, 1, 0, 10))])];
        let a = tube(&[(0, RleMask::rectangle(10, 10, 0, 1, 0, 9))]);
        let b = tube(&[(0, RleMask::rectangle(10, 10, 0, 1, 0, 4))]);
        for preds in [vec![b.clone(), a.clone()], vec![a, b]] {
            let m = assign_tubes(&preds, &gt, 0.0).unwrap();
            let (p, o) = m[&0];
            assert_eq!(o, Overlap::new(9, 10));
            assert_eq!(preds[p], preds.iter().find(|t| overlap::volume_iou(t, &gt[0]).unwrap().intersection == 9).unwrap().clone());
        }
    }

    #[test]
    fn assign_threshold_filters() {
        let gt = vec![tube(&[(0, RleMask::rectangle(10, 10, 0, 1, 0, 10))])];
        let pred = vec![tube(&[(0, RleMask::rectangle(10, 10, 0, 1, 0, 3))])];
        assert!(assign_tubes(&pred, &gt, 0.5).unwrap().is_empty());
        assert_eq!(assign_tubes(&pred, &gt, 0.3).unwrap().len(), 1);
        let points = vec![Tube::Points(PointTube { entity_id: 0, frames: BTreeMap::from([(0, vec![1])]) })];
        assert!(matches!(
            assign_tubes(&points, &gt, 0.5),
            Err(MatchingError::Overlap(OverlapError::KindMismatch))
        ));
    }

    fn greedy_total(ious: &[Vec<f64>]) -> f64 {
        let mut cells: Vec<(f64, usize, usize)> = ious
            .iter()
            .enumerate()
            .flat_map(|(g, r)| r.iter().enumerate().map(move |(p, &v)| (v, g, p)))
            .collect();
        cells.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut used_g, mut used_p, mut total) = (vec![], vec![], 0.0);
        for (v, g, p) in cells {
            if !used_g.contains(&g) && !used_p.contains(&p) {
                used_g.push(g);
                used_p.push(p);
                total += v;
            }
        }
        total
    }

    proptest! {
        #[test]
        fn assignment_beats_greedy(
            gt_boxes in proptest::collection::vec((0u32..8, 0u32..8, 1u32..4, 1u32..4), 1..5),
            pred_boxes in proptest::collection::vec((0u32..8, 0u32..8, 1u32..4, 1u32..4), 1..5),
        ) {
            let mk = |b: &(u32, u32, u32, u32)| tube(&[(0, RleMask::rectangle(10, 10, b.0, b.0 + b.2, b.1, b.1 + b.3))]);
            let gt: Vec<Tube> = gt_boxes.iter().map(mk).collect();
            let pred: Vec<Tube> = pred_boxes.iter().map(mk).collect();
            let ious: Vec<Vec<f64>> = gt.iter().map(|g| pred.iter().map(|p| overlap::volume_iou(p, g).unwrap().iou()).collect()).collect();
            let m = assign_tubes(&pred, &gt, 0.0).unwrap();
            let total: f64 = m.values().map(|(_, o)| o.iou()).sum();
            prop_assert!(total >= greedy_total(&ious) - 1e-9);
        }
    }

    fn seg(frame: u32, emb: Vec<f64>, category: u32) -> FrameSegment {
        FrameSegment {
            frame,
            region: SegmentRegion::Mask(RleMask::rectangle(4, 4, 0, 1, 0, 1)),
            category_id: category,
            score: 0.9,
            embedding: emb,
        }
    }

    #[test]
    fn single_object_single_track() {
        let segs: Vec<_> = (0..5).map(|f| seg(f, vec![1.0, 2.0, 3.0], 0)).collect();
        let tracks = link_tracks(&segs, &TrackerConfig::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        let Tube::Mask(t) = &tracks[0].tube else { panic!() };
        assert_eq!(t.frames.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(tracks[0].embeddings.as_ref().unwrap().len(), 5);
    }

    #[test]
    fn identity_pairing_by_cosine() {
        let n = (0.995f64 * 0.995 + 0.0995 * 0.0995).sqrt();
        let a2 = vec![0.995 / n, 0.0995 / n];
        let b2 = vec![0.0995 / n, 0.995 / n];
        // Four cosines: straight ≈ 0.995, crossed ≈ 0.0995
        assert!((a2[0] - 0.995).abs() < 0.01 && (a2[1] - 0.0995).abs() < 0.01);
        // frame 2 lists the segments in swapped order
        let segs = vec![seg(1, vec![1.0, 0.0], 0), seg(1, vec![0.0, 1.0], 1), seg(2, b2, 1), seg(2, a2, 0)];
        let t = link_tracks_detailed(&segs, &TrackerConfig { tau: 0.5, iou_gate: None }).unwrap();
        assert_eq!(t.entities.len(), 2);
        assert_eq!(t.membership, vec![0, 1, 1, 0]);
    }

    #[test]
    fn low_similarity_splits_tracks() {
        let c = 0.3f64;
        let s = (1.0 - c * c).sqrt();
        let segs = vec![
            seg(0, vec![1.0, 0.0, 0.0], 0),
            seg(0, vec![0.0, 1.0, 0.0], 0),
            seg(1, vec![c, 0.0, s], 0),
            seg(1, vec![0.0, c, s], 0),
        ];
        // Best cosine across frames is 0.3 < τ.
        let t = link_tracks(&segs, &TrackerConfig { tau: 0.5, iou_gate: None }).unwrap();
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn gap_breaks_tracks_and_gate_applies() {
        let segs = vec![seg(0, vec![1.0, 0.0], 0), seg(2, vec![1.0, 0.0], 0)];
        assert_eq!(link_tracks(&segs, &TrackerConfig::default()).unwrap().len(), 2);

        let mut moved = seg(1, vec![1.0, 0.0], 0);
        moved.region = SegmentRegion::Mask(RleMask::rectangle(4, 4, 3, 4, 3, 4));
        let segs = vec![seg(0, vec![1.0, 0.0], 0), moved];
        assert_eq!(link_tracks(&segs, &TrackerConfig::default()).unwrap().len(), 1);
        let gated = TrackerConfig { tau: 0.5, iou_gate: Some(0.1) };
        assert_eq!(link_tracks(&segs, &gated).unwrap().len(), 2);
    }

    #[test]
    fn category_vote_and_score() {
        let mut segs = vec![seg(0, vec![1.0], 2), seg(1, vec![1.0], 1), seg(2, vec![1.0], 1), seg(3, vec![1.0], 2)];
        segs[0].score = 0.9;
        segs[3].score = 0.9;
        segs[1].score = 0.5;
        segs[2].score = 0.4;
        let t = link_tracks(&segs, &TrackerConfig::default()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].category_id, 2);
        assert!((t[0].score - 0.675).abs() < 1e-12);
    }

    #[test]
    fn tracker_errors() {
        let segs = vec![seg(0, vec![0.0, 0.0], 0)];
        assert_eq!(link_tracks(&segs, &TrackerConfig::default()), Err(MatchingError::InvalidEmbedding(0)));
        let bad = TrackerConfig { tau: 1.5, iou_gate: None };
        assert!(matches!(link_tracks(&[], &bad), Err(MatchingError::InvalidThreshold { .. })));
        let segs = vec![seg(0, vec![1.0, 0.0], 0), seg(1, vec![1.0], 0)];
        assert_eq!(link_tracks(&segs, &TrackerConfig::default()), Err(MatchingError::EmbeddingDimension(1)));
        assert!(link_tracks(&[], &TrackerConfig::default()).unwrap().is_empty());
    }

    fn arb_segments() -> impl Strategy<Value = Vec<FrameSegment>> {
        proptest::collection::vec(
            (0u32..6, proptest::collection::vec(-1.0f64..1.0, 3), 0u32..3),
            1..25,
        )
        .prop_map(|raw| {
            raw.into_iter()
                .map(|(f, mut e, c)| {
                    e[0] += 2.5; // keep away from the zero vector
                    seg(f, e, c)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn tracks_partition_segments(segs in arb_segments(), tau in 0.0f64..1.0) {
            let t = link_tracks_detailed(&segs, &TrackerConfig { tau, iou_gate: None }).unwrap();
            let mut count = vec![0usize; t.entities.len()];
            for (i, &m) in t.membership.iter().enumerate() {
                prop_assert!(m < t.entities.len());
                count[m] += 1;
                let Tube::Mask(tube) = &t.entities[m].tube else { unreachable!() };
                prop_assert!(tube.frames.contains_key(&segs[i].frame));
            }
            for (e, c) in t.entities.iter().zip(count) {
                prop_assert_eq!(e.embeddings.as_ref().unwrap().len(), c);
            }
        }

        #[test]
        fn scaling_embeddings_preserves_tracks(segs in arb_segments(), tau in 0.0f64..1.0, k in 0.01f64..100.0) {
            let scaled: Vec<_> = segs.iter().cloned().map(|mut s| { s.embedding.iter_mut().for_each(|x| *x *= k); s }).collect();
            let cfg = TrackerConfig { tau, iou_gate: None };
            let a = link_tracks_detailed(&segs, &cfg).unwrap();
            let b = link_tracks_detailed(&scaled, &cfg).unwrap();
            prop_assert_eq!(a.membership, b.membership);
        }
    }
}
