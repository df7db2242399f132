//! Plain-text narration of a scene graph in fixed time windows, meant to be
//! pasted into a language-model prompt.

use std::fmt::Write as _;

use crate::model::{SceneGraph4D, Vocabulary};

pub const NOTHING_OBSERVED: &str = "nothing observed";

/// One window's text.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowText {
    pub index: usize,
    pub start_seconds: f64,
    pub end_seconds: f64,
    /// Event lines; empty when nothing happened in the window.
    pub lines: Vec<String>,
}

impl WindowText {
    pub fn render(&self) -> String {
        let mut out = format!(
            "window {} [{:.1}s, {:.1}s)\n",
            self.index + 1,
            self.start_seconds,
            self.end_seconds
        );
        if self.lines.is_empty() {
            out.push_str(NOTHING_OBSERVED);
            out.push('\n');
        }
        for line in &self.lines {
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

fn label(name: Option<&str>, id: u32) -> String {
    name.map(str::to_owned).unwrap_or_else(|| format!("#{id}"))
}

/// Splits the video into consecutive windows of `window_seconds` and lists
/// every triplet overlapping each window, clamped to it.
///
/// The number of windows covers `frame_count` frames when given, otherwise
/// the last frame any triplet or tube touches; there is always at least one.
/// Unknown ids are written as `#<id>`.
pub fn narrate(
    graph: &SceneGraph4D,
    vocab: &Vocabulary,
    window_seconds: f64,
    fps: f64,
    frame_count: Option<u32>,
) -> Vec<WindowText> {
    assert!(window_seconds > 0.0 && fps > 0.0, "window and fps must be positive");
    let extent = frame_count.unwrap_or_else(|| {
        let triplet_end = graph.triplets.iter().map(|t| t.interval.end()).max().unwrap_or(0);
        let tube_end = graph
            .entities
            .iter()
            .filter_map(|e| e.tube.occupied_frames().last().map(|f| f + 1))
            .max()
            .unwrap_or(0);
        triplet_end.max(tube_end)
    });
    let duration = extent as f64 / fps;
    let windows = ((duration / window_seconds).ceil() as usize).max(1);

    let category = |id: u32| graph.entity(id).map(|e| e.category_id);
    let object_name = |id: u32| match category(id) {
        Some(c) => label(vocab.object_name(c), c),
        None => format!("entity#{id}"),
    };

    (0..windows)
        .map(|w| {
            let ws = w as f64 * window_seconds;
            let we = ws + window_seconds;
            let mut events: Vec<(f64, String, String, String, f64)> = graph
                .triplets
                .iter()
                .filter_map(|t| {
                    let s = t.interval.start() as f64 / fps;
                    let e = t.interval.end() as f64 / fps;
                    (s < we && e > ws).then(|| {
                        (
                            s.max(ws),
                            object_name(t.subject_id),
                            label(vocab.predicate_name(t.predicate_id), t.predicate_id),
                            object_name(t.object_id),
                            e.min(we),
                        )
                    })
                })
                .collect();
            events.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| a.1.cmp(&b.1))
                    .then_with(|| a.2.cmp(&b.2))
                    .then_with(|| a.3.cmp(&b.3))
                    .then_with(|| a.4.total_cmp(&b.4))
            });
            WindowText {
                index: w,
                start_seconds: ws,
                end_seconds: we,
                lines: events
                    .into_iter()
                    .map(|(s, subj, pred, obj, e)| format!("from {s:.1}s to {e:.1}s, {subj} {pred} {obj}"))
                    .collect(),
            }
        })
        .collect()
}

/// All windows rendered one after another, separated by blank lines.
pub fn render_windows(windows: &[WindowText]) -> String {
    windows.iter().map(WindowText::render).collect::<Vec<_>>().join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EntityNode, FrameInterval, PointTube, RelationTriplet, Tube};
    use std::collections::BTreeMap;

    fn vocab() -> Vocabulary {
        Vocabulary::from_names(&["person", "coffee", "table"], &["drink", "on"]).unwrap()
    }

    fn entity(id: u32, category: u32) -> EntityNode {
        EntityNode {
            entity_id: id,
            category_id: category,
            score: 1.0,
            tube: Tube::Points(PointTube {
                entity_id: id,
                frames: BTreeMap::from([(0, vec![id])]),
            }),
            embeddings: None,
        }
    }

    fn graph(triplets: &[(u32, u32, u32, u32, u32)]) -> SceneGraph4D {
        SceneGraph4D {
            video_id: "v".into(),
            entities: vec![entity(0, 0), entity(1, 1), entity(2, 2)],
            triplets: triplets
                .iter()
                .map(|&(s, p, o, a, b)| RelationTriplet {
                    subject_id: s,
                    object_id: o,
                    predicate_id: p,
                    interval: FrameInterval::new(a, b).unwrap(),
                    confidence: 1.0,
                })
                .collect(),
            vocabulary_ref: vocab().checksum(),
        }
    }

    #[test]
    fn single_event_in_first_window() {
        let w = narrate(&graph(&[(0, 0, 1, 0, 90)]), &vocab(), 30.0, 30.0, None);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].lines, vec!["from 0.0s to 3.0s, person drink coffee"]);
    }

    #[test]
    fn empty_graph_reads_nothing_observed() {
        let w = narrate(&graph(&[]), &vocab(), 30.0, 30.0, Some(1800));
        assert_eq!(w.len(), 2);
        for win in &w {
            assert!(win.lines.is_empty());
            assert!(win.render().ends_with("nothing observed\n"));
        }
    }

    #[test]
    fn spanning_event_is_clamped_in_each_window() {
        // 20 s to 40 s with 30 s windows
        let w = narrate(&graph(&[(1, 1, 2, 600, 1200)]), &vocab(), 30.0, 30.0, None);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].lines, vec!["from 20.0s to 30.0s, coffee on table"]);
        assert_eq!(w[1].lines, vec!["from 30.0s to 40.0s, coffee on table"]);
    }

    #[test]
    fn lines_sorted_by_start_then_names() {
        let w = narrate(
            &graph(&[(1, 1, 2, 30, 60), (0, 0, 1, 30, 45), (0, 0, 1, 0, 10)]),
            &vocab(),
            30.0,
            30.0,
            None,
        );
        assert_eq!(
            w[0].lines,
            vec![
                "from 0.0s to 0.3s, person drink coffee",
                "from 1.0s to 2.0s, coffee on table",
                "from 1.0s to 1.5s, person drink coffee",
            ]
        );
    }
}
