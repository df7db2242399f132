//! 4D panoptic scene graphs: entity tubes over time, relation triplets with
//! frame intervals, the recall metrics used to score them, and a synthetic
//! RGB-D scene generator with exactly known ground truth.

pub mod geometry;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod narrate;
pub mod overlap;
pub mod relate;
pub mod synthgen;

pub use model::{EntityNode, FrameInterval, RelationTriplet, SceneGraph4D, Tube, Vocabulary};
pub use overlap::{Overlap, RleMask};
