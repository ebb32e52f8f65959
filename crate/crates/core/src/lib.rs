//! Curation toolkit that turns annotated, gravity-aligned 3D indoor scans into
//! unambiguous multi-task dialogue data.
//!
//! The crate is organized by pipeline concern:
//!
//! * [`geometry`] – 7-DOF box fitting, signed angles, SAT overlap and sampled
//!   box-to-box distance.
//! * [`imaging`] – overexposure filtering, 90° rotation canonicalization,
//!   depth-ordered label maps, frame sampling and object view ranking.
//! * [`label_graph`] – label subsumption graph and distractor grouping.
//! * [`scene_graph`] – rule-based spatial relations plus oracle-driven
//!   relation correction.
//! * [`referring`] – comparative disambiguation and spatial anchoring.
//! * [`oracle`] – prompt templates, response validation, retries, the HTTP
//!   client and a deterministic scripted mock.
//! * [`taskgen`] – caption, grounding and QA sample generation with balancing.
//! * [`eval`] – EM, relaxed EM, mean relative accuracy and per-task reports.
//! * [`pipeline`] – manifests, configuration and staged, cached execution.

pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod label_graph;
pub mod oracle;
pub mod pipeline;
pub mod referring;
pub mod scene_graph;
pub mod taskgen;
mod util;

use serde::{Deserialize, Serialize};

pub use geometry::{Obb7, Point3, PointCloud, Vec2};
pub use label_graph::LabelGraph;
pub use referring::{Referral, ReferralSet};
pub use scene_graph::{RelationTriple, SceneGraph};
pub use taskgen::{QaSample, Split, TaskKind};

/// Identifier of an annotated object within a scene.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Serialize,
    Deserialize,
    schemars::JsonSchema,
)]
#[serde(transparent)]
pub struct ObjectId(pub u32);

impl std::fmt::Display for ObjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
