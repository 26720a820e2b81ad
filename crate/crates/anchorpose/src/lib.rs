//! Anchor-based rotation estimation for rigid objects.
//!
//! Estimating a rotation by descending a point-cloud matching loss fails on
//! symmetric objects: the loss has spurious local minima, and a single
//! descent gets trapped. This crate implements the anchor formulation that
//! fixes it — a fixed, well-spread set of rotations (an anchor group) splits
//! the problem into one small local solve per anchor plus a discrete
//! selection, so some anchor always starts inside the right basin.
//!
//! The pieces:
//!
//! - [`so3`]: canonical unit quaternions, exponential/logarithm maps, and
//!   rotation-matrix conversion.
//! - [`anchors`]: the anchor groups (12, 24, or 60 rotations with exact
//!   closure under composition) and nearest-anchor queries.
//! - [`losses`]: point-cloud matching losses (symmetry-aware and paired),
//!   the per-anchor probabilistic objective, anchor regularization, and the
//!   combined training objective.
//! - [`voting`]: translation recovery by RANSAC over a center-pointing
//!   direction field.
//! - [`fit`]: descent-based fitting — the direct baseline that exhibits the
//!   trapping pathology and the anchored fitter that escapes it.
//! - [`metrics`]: average-distance pose errors, accuracy curves, and AUC.
//! - [`models`]: ASCII PLY model IO and synthetic shape generation (with
//!   symmetry-exact sampling).
//! - [`bench`]: a reproducible end-to-end benchmark harness.
//! - [`rng`]: named, indexed random sub-streams that keep every result
//!   independent of thread count.

pub mod anchors;
pub mod bench;
pub mod fit;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod so3;
pub mod voting;

pub use anchors::{AnchorGroupKind, AnchorSet};
pub use fit::{fit_anchored, fit_direct, FitConfig, FitResult};
pub use losses::{ObjectModel, Pose};
pub use metrics::{add_auto, PoseRecord};
pub use so3::UnitQuaternion;
pub use voting::{ransac_vote, RansacConfig, VectorField};

/// Every code block in the guide compiles and runs with the test suite, so
/// the book can never drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rotations.md")]
    mod rotations {}
    #[doc = include_str!("../../../book/src/anchors.md")]
    mod anchors {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/voting.md")]
    mod voting {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
