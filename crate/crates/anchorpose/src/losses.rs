//! Rotation losses and per-anchor uncertainty.
//!
//! The core quantity is the shape-match loss: the mean distance between a
//! model cloud under a candidate rotation and the same cloud under the
//! ground-truth rotation. For symmetric objects the per-point distance is
//! taken to the *nearest* ground-truth point, which makes the loss invariant
//! to the object's ambiguity but also non-convex enough to strand a descent
//! fitter far from any global minimum.
//!
//! The anchor formulation fits a small deviation from every anchor and lets
//! each anchor report its own uncertainty `sigma`; the probabilistic loss
//! `sum_i ln(sigma_i) + d_i / sigma_i` is minimized per anchor at
//! `sigma_i = d_i`, so after training (or fitting) the smallest sigma marks
//! the anchor that actually reached the target.

use std::fmt;

use rayon::prelude::*;

use crate::anchors::AnchorSet;
use crate::so3::{UnitQuaternion, Vec3};

/// Lower clamp for per-anchor uncertainties. Keeps `ln sigma` and `d / sigma`
/// finite when an anchor fits its target exactly.
pub const SIGMA_MIN: f64 = 1e-6;

/// Smooth-L1 changes from quadratic to linear at this absolute error.
const SMOOTH_L1_KNEE: f64 = 1.0;

/// Errors reported by loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// A sigma left the valid `[SIGMA_MIN, 1]` interval.
    SigmaOutOfRange {
        index: usize,
        value: f64,
    },
    /// Paired slices disagree in length.
    LengthMismatch {
        left: usize,
        right: usize,
    },
    /// An objective returned a non-finite value during differentiation.
    NonFiniteObjective {
        coordinate: usize,
    },
    /// Model construction problems.
    EmptyModel,
    DegenerateModel {
        diameter: f64,
    },
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::SigmaOutOfRange { index, value } => {
                write!(f, "sigma[{index}] = {value} outside [{SIGMA_MIN}, 1]")
            }
            LossError::LengthMismatch { left, right } => {
                write!(f, "paired inputs differ in length: {left} vs {right}")
            }
            LossError::NonFiniteObjective { coordinate } => {
                write!(f, "objective is not finite near coordinate {coordinate}")
            }
            LossError::EmptyModel => write!(f, "object model has no points"),
            LossError::DegenerateModel { diameter } => {
                write!(f, "object model diameter {diameter} is not positive")
            }
        }
    }
}

impl std::error::Error for LossError {}

/// A rigid object represented by a point cloud.
#[derive(Clone, Debug)]
pub struct ObjectModel {
    id: String,
    points: Vec<Vec3>,
    diameter: f64,
    symmetric: bool,
}

impl ObjectModel {
    /// Builds a model and computes its diameter (largest pairwise distance).
    ///
    /// Needs at least two distinct points so the diameter is positive; the
    /// diameter normalizes every loss and threshold downstream.
    pub fn new(
        id: impl Into<String>,
        points: Vec<Vec3>,
        symmetric: bool,
    ) -> Result<Self, LossError> {
        if points.is_empty() {
            return Err(LossError::EmptyModel);
        }
        let diameter = crate::models::compute_diameter(&points).unwrap_or(0.0);
        // Also rejects a NaN diameter (from non-finite coordinates).
        if !(diameter.is_finite() && diameter > 0.0) {
            return Err(LossError::DegenerateModel { diameter });
        }
        Ok(ObjectModel {
            id: id.into(),
            points,
            diameter,
            symmetric,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Whether the object has rotational ambiguity (continuous or discrete).
    pub fn symmetric(&self) -> bool {
        self.symmetric
    }
}

/// A rigid pose: rotation plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn transform(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }
}

/// Per-anchor deviations and uncertainties, one entry per anchor.
#[derive(Clone, Debug)]
pub struct AnchorPrediction {
    deviations: Vec<UnitQuaternion>,
    sigmas: Vec<f64>,
}

impl AnchorPrediction {
    pub fn new(deviations: Vec<UnitQuaternion>, sigmas: Vec<f64>) -> Result<Self, LossError> {
        if deviations.len() != sigmas.len() {
            return Err(LossError::LengthMismatch {
                left: deviations.len(),
                right: sigmas.len(),
            });
        }
        Ok(AnchorPrediction { deviations, sigmas })
    }

    pub fn deviations(&self) -> &[UnitQuaternion] {
        &self.deviations
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.deviations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deviations.is_empty()
    }
}

/// One anchor's contribution to the probabilistic loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorEvaluation {
    pub index: usize,
    /// Raw shape-match loss of this anchor's total rotation, meters.
    pub loss: f64,
    /// Loss divided by the model diameter.
    pub normalized: f64,
}

/// Weights combining the loss terms; see [`total_loss`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Weight of the anchor-separation regularizer.
    pub regularization: f64,
    /// Weight of the translation term.
    pub translation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            regularization: 2.0,
            translation: 5.0,
        }
    }
}

/// Mean distance between the model under `rotation` and under `gt`.
///
/// Symmetric models match each rotated point to its nearest ground-truth
/// point (exact O(M^2) scan); asymmetric models pair points by index. The
/// result is in meters and is zero exactly when the rotations agree (or
/// differ by a sampling symmetry of the model).
pub fn shape_match_loss(
    rotation: &UnitQuaternion,
    gt: &UnitQuaternion,
    model: &ObjectModel,
) -> f64 {
    let targets: Vec<Vec3> = model.points.iter().map(|p| gt.rotate(*p)).collect();
    shape_match_against_targets(rotation, model.points(), &targets, model.symmetric)
}

/// Shape-match loss against a pre-rotated target cloud (shared with the
/// fitter, which reuses one target cloud across many candidate rotations).
pub(crate) fn shape_match_against_targets(
    rotation: &UnitQuaternion,
    points: &[Vec3],
    targets: &[Vec3],
    symmetric: bool,
) -> f64 {
    debug_assert_eq!(points.len(), targets.len());
    let mut total = 0.0;
    if symmetric {
        for p in points {
            let rp = rotation.rotate(*p);
            let mut best = f64::INFINITY;
            for t in targets {
                best = best.min((rp - t).norm_squared());
            }
            total += best.sqrt();
        }
    } else {
        for (p, t) in points.iter().zip(targets) {
            total += (rotation.rotate(*p) - t).norm();
        }
    }
    total / points.len() as f64
}

/// Full rotation represented by anchor `index` and its deviation:
/// the anchor applied first, then the deviation.
pub fn total_rotation(
    index: usize,
    deviation: &UnitQuaternion,
    anchors: &AnchorSet,
) -> UnitQuaternion {
    deviation.compose(&anchors.quats()[index])
}

/// Uncertainty-weighted multi-anchor loss:
/// `sum_i ln(sigma_i) + d_i / sigma_i` with `d_i` the diameter-normalized
/// shape-match loss of anchor `i`'s total rotation.
///
/// Returns the total together with the per-anchor evaluations (index order).
/// Per-anchor terms are evaluated in parallel and reduced by index, so the
/// result does not depend on thread scheduling.
pub fn probabilistic_loss(
    prediction: &AnchorPrediction,
    gt: &UnitQuaternion,
    anchors: &AnchorSet,
    model: &ObjectModel,
) -> Result<(f64, Vec<AnchorEvaluation>), LossError> {
    if prediction.len() != anchors.len() {
        return Err(LossError::LengthMismatch {
            left: prediction.len(),
            right: anchors.len(),
        });
    }
    for (index, &sigma) in prediction.sigmas().iter().enumerate() {
        if !(SIGMA_MIN..=1.0).contains(&sigma) {
            return Err(LossError::SigmaOutOfRange {
                index,
                value: sigma,
            });
        }
    }

    let targets: Vec<Vec3> = model.points.iter().map(|p| gt.rotate(*p)).collect();
    let evaluations: Vec<AnchorEvaluation> = (0..anchors.len())
        .into_par_iter()
        .map(|index| {
            let rotation = total_rotation(index, &prediction.deviations()[index], anchors);
            let loss =
                shape_match_against_targets(&rotation, model.points(), &targets, model.symmetric);
            AnchorEvaluation {
                index,
                loss,
                normalized: loss / model.diameter,
            }
        })
        .collect();

    // Sequential sum in index order keeps the total bit-identical no matter
    // how the parallel map was scheduled.
    let mut total = 0.0;
    for (eval, &sigma) in evaluations.iter().zip(prediction.sigmas()) {
        total += sigma.ln() + eval.normalized / sigma;
    }
    Ok((total, evaluations))
}

/// Separation regularizer: penalizes a deviation that drags its total
/// rotation closer (in absolute quaternion dot product) to a foreign anchor
/// than to its own.
///
/// Zero exactly when every total rotation stays inside its own Voronoi cell.
pub fn regularization_loss(
    prediction: &AnchorPrediction,
    anchors: &AnchorSet,
) -> Result<f64, LossError> {
    if prediction.len() != anchors.len() {
        return Err(LossError::LengthMismatch {
            left: prediction.len(),
            right: anchors.len(),
        });
    }
    let mut total = 0.0;
    for (index, deviation) in prediction.deviations().iter().enumerate() {
        let rotation = total_rotation(index, deviation, anchors);
        let own = rotation.dot(&anchors.quats()[index]).abs();
        let mut worst_foreign = f64::NEG_INFINITY;
        for (j, anchor) in anchors.quats().iter().enumerate() {
            if j != index {
                worst_foreign = worst_foreign.max(rotation.dot(anchor).abs());
            }
        }
        total += (worst_foreign - own).max(0.0);
    }
    Ok(total)
}

/// Smooth-L1 (Huber-style) distance between paired vector lists, averaged
/// over points and components. `gt` entries are expected to be unit vectors
/// (direction fields); the knee sits at error 1.
pub fn smooth_l1_vectors(pred: &[Vec3], gt: &[Vec3]) -> Result<f64, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(LossError::LengthMismatch { left: 0, right: 0 });
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for k in 0..3 {
            let e = (p[k] - g[k]).abs();
            total += if e < SMOOTH_L1_KNEE {
                0.5 * e * e
            } else {
                e - 0.5 * SMOOTH_L1_KNEE
            };
        }
    }
    Ok(total / (3 * pred.len()) as f64)
}

/// Weighted sum of the three training terms.
pub fn total_loss(rotation: f64, regularization: f64, translation: f64, w: &LossWeights) -> f64 {
    rotation + w.regularization * regularization + w.translation * translation
}

/// The anchor claiming the smallest uncertainty (ties: lowest index) and its
/// total rotation.
pub fn select_best(prediction: &AnchorPrediction, anchors: &AnchorSet) -> (usize, UnitQuaternion) {
    assert_eq!(prediction.len(), anchors.len());
    assert!(!prediction.is_empty());
    let mut best = 0usize;
    for (i, &sigma) in prediction.sigmas().iter().enumerate() {
        if sigma < prediction.sigmas()[best] {
            best = i;
        }
    }
    (
        best,
        total_rotation(best, &prediction.deviations()[best], anchors),
    )
}

/// Central-difference gradient of a black-box objective.
///
/// Errors if the objective is non-finite at any probe point.
pub fn grad_fd<F>(objective: F, point: &[f64], eps: f64) -> Result<Vec<f64>, LossError>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = objective(&probe);
        probe[i] = orig - eps;
        let minus = objective(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LossError::NonFiniteObjective { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}
