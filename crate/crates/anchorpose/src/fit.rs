//! Descent-based rotation fitting.
//!
//! The fitter minimizes the point-cloud matching loss over rotations with a
//! finite-difference gradient in the tangent space and a strict-decrease
//! backtracking line search. Its purpose here is twofold: `fit_direct` shows
//! how a single descent gets trapped in the spurious minima that symmetric
//! objects produce, and `fit_anchored` shows how restarting one constrained
//! descent per rotation anchor escapes them — the minimum over anchors of a
//! per-anchor local solve replaces one global nonconvex solve.
//!
//! For symmetric objects the matching loss uses nearest-point
//! correspondences, which makes the objective piecewise smooth. Each
//! accepted iterate refreezes the correspondence; the gradient is taken on
//! the frozen (index-paired, smooth) surrogate while acceptance is always
//! judged on the true loss.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorGroupKind, AnchorSet};
use crate::losses::{
    shape_match_against_targets, AnchorPrediction, LossError, ObjectModel, SIGMA_MIN,
};
use crate::rng::substream;
use crate::so3::{exp_map, random_rotation, TangentVec, UnitQuaternion};

/// Step size below which the line search is considered exhausted.
const MIN_STEP: f64 = 1e-12;

/// Absolute loss below which there is nothing left to gain.
const LOSS_FLOOR: f64 = 1e-15;

/// Gradient norm treated as exactly zero.
const GRAD_FLOOR: f64 = 1e-14;

/// Normalized-loss threshold for a "recovered the rotation" verdict in
/// comparisons.
pub const SUCCESS_TOL: f64 = 1e-3;

/// Errors from fitting.
#[derive(Debug, Clone, PartialEq)]
pub enum FitError {
    /// The objective produced a non-finite value during differentiation.
    NonFinite { coordinate: usize },
}

impl fmt::Display for FitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitError::NonFinite { coordinate } => {
                write!(
                    f,
                    "objective became non-finite along coordinate {coordinate}"
                )
            }
        }
    }
}

impl std::error::Error for FitError {}

impl From<LossError> for FitError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::NonFiniteObjective { coordinate } => FitError::NonFinite { coordinate },
            other => unreachable!("descent objective raised {other}"),
        }
    }
}

/// Descent controls.
///
/// Deserializes leniently: omitted fields take their defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Candidate evaluations per descent.
    pub max_iters: usize,
    /// Initial (and maximum) step length in radians.
    pub step_size: f64,
    /// Finite-difference half-width.
    pub fd_eps: f64,
    /// Loss improvements below this count as a stall.
    pub converge_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 200,
            step_size: 0.05,
            fd_eps: 1e-5,
            converge_tol: 1e-8,
        }
    }
}

/// One descent's outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub rotation: UnitQuaternion,
    /// Final matching loss divided by the model diameter.
    pub normalized_loss: f64,
    /// Candidate evaluations consumed.
    pub iters: usize,
    /// True when the descent stopped on its own (step collapse, zero
    /// gradient, or loss floor) rather than by hitting `max_iters`.
    pub converged: bool,
    /// Normalized loss after every accepted step, starting value included.
    pub loss_trace: Vec<f64>,
}

/// Anchored fit output: one constrained descent per anchor plus the
/// selection that turns them into a single estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnchoredFit {
    /// Per-anchor results, index-aligned with the anchor set. Rotations are
    /// total rotations (deviation composed onto the anchor).
    pub per_anchor: Vec<FitResult>,
    /// Index of the winning anchor (lowest uncertainty).
    pub selected_index: usize,
}

impl AnchoredFit {
    pub fn selected(&self) -> &FitResult {
        &self.per_anchor[self.selected_index]
    }
}

/// Success counts across fitting strategies on one model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub trials: usize,
    pub direct_successes: usize,
    pub per_set: Vec<SetOutcome>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SetOutcome {
    pub kind: AnchorGroupKind,
    pub successes: usize,
}

impl ComparisonSummary {
    pub fn direct_rate(&self) -> f64 {
        self.direct_successes as f64 / self.trials as f64
    }

    pub fn set_rate(&self, kind: AnchorGroupKind) -> Option<f64> {
        self.per_set
            .iter()
            .find(|o| o.kind == kind)
            .map(|o| o.successes as f64 / self.trials as f64)
    }
}

/// Frozen correspondence: for each model point, the target it is currently
/// matched to. Identity for asymmetric models.
fn freeze_pairs(
    rotation: &UnitQuaternion,
    points: &[crate::so3::Vec3],
    targets: &[crate::so3::Vec3],
    symmetric: bool,
) -> Vec<usize> {
    if !symmetric {
        return (0..points.len()).collect();
    }
    points
        .iter()
        .map(|p| {
            let moved = rotation.rotate(*p);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, t) in targets.iter().enumerate() {
                let d = (moved - t).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn frozen_loss(
    rotation: &UnitQuaternion,
    points: &[crate::so3::Vec3],
    targets: &[crate::so3::Vec3],
    pairs: &[usize],
) -> f64 {
    let mut sum = 0.0;
    for (p, &j) in points.iter().zip(pairs) {
        sum += (rotation.rotate(*p) - targets[j]).norm();
    }
    sum / points.len() as f64
}

fn left_step(rotation: &UnitQuaternion, direction: TangentVec) -> UnitQuaternion {
    let moved = exp_map(direction).compose(rotation);
    // Hundreds of compositions drift off the unit sphere; pull back.
    let [w, x, y, z] = moved.wxyz();
    UnitQuaternion::new_normalize(w, x, y, z).expect("step from a unit quaternion is non-zero")
}

/// Shared descent loop. `keep` vetoes candidate iterates (used by the
/// anchored fitter to stay inside one anchor's nearest-neighbor cell);
/// vetoed candidates are treated like failed line-search steps.
fn descend(
    model: &ObjectModel,
    targets: &[crate::so3::Vec3],
    start: &UnitQuaternion,
    config: &FitConfig,
    keep: impl Fn(&UnitQuaternion) -> bool,
) -> Result<FitResult, FitError> {
    let points = model.points();
    let symmetric = model.symmetric();
    let diameter = model.diameter();
    let true_loss = |r: &UnitQuaternion| shape_match_against_targets(r, points, targets, symmetric);

    let mut rotation = *start;
    let mut loss = true_loss(&rotation);
    let mut trace = vec![loss / diameter];
    let mut eta = config.step_size;
    let mut iters = 0;
    let mut converged = false;

    let mut pairs = freeze_pairs(&rotation, points, targets, symmetric);
    let mut gradient = tangent_gradient(&rotation, points, targets, &pairs, config.fd_eps)?;

    while iters < config.max_iters {
        let gradient_norm = gradient.norm();
        if loss < LOSS_FLOOR || gradient_norm < GRAD_FLOOR {
            converged = true;
            break;
        }
        if eta < MIN_STEP {
            converged = true;
            break;
        }

        iters += 1;
        // Unit descent direction scaled to exactly eta radians: the loss
        // gradient's magnitude depends on the model's physical scale, which
        // has no business deciding how far to move on the rotation manifold.
        let candidate = left_step(&rotation, gradient * (-eta / gradient_norm));
        let candidate_loss = true_loss(&candidate);
        if candidate_loss < loss - config.converge_tol * loss.max(1e-30) && keep(&candidate) {
            rotation = candidate;
            loss = candidate_loss;
            trace.push(loss / diameter);
            eta = (eta * 2.0).min(config.step_size);
            pairs = freeze_pairs(&rotation, points, targets, symmetric);
            gradient = tangent_gradient(&rotation, points, targets, &pairs, config.fd_eps)?;
        } else {
            eta *= 0.5;
        }
    }

    Ok(FitResult {
        rotation,
        normalized_loss: loss / diameter,
        iters,
        converged,
        loss_trace: trace,
    })
}

/// Central-difference gradient of the frozen surrogate over the tangent
/// space at `rotation`.
fn tangent_gradient(
    rotation: &UnitQuaternion,
    points: &[crate::so3::Vec3],
    targets: &[crate::so3::Vec3],
    pairs: &[usize],
    eps: f64,
) -> Result<TangentVec, FitError> {
    let objective = |u: &[f64]| {
        let step = exp_map(TangentVec::new(u[0], u[1], u[2]));
        frozen_loss(&step.compose(rotation), points, targets, pairs)
    };
    let g = crate::losses::grad_fd(objective, &[0.0; 3], eps)?;
    Ok(TangentVec::new(g[0], g[1], g[2]))
}

/// Unconstrained descent toward the target rotation's point cloud.
///
/// Targets are the model points under `target_rotation`; the descent starts
/// at `start`. On symmetric objects a bad start routinely converges to a
/// spurious minimum — that failure mode is the motivation for
/// [`fit_anchored`].
pub fn fit_direct(
    model: &ObjectModel,
    target_rotation: &UnitQuaternion,
    start: &UnitQuaternion,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    let targets: Vec<crate::so3::Vec3> = model
        .points()
        .iter()
        .map(|p| target_rotation.rotate(*p))
        .collect();
    descend(model, &targets, start, config, |_| true)
}

/// One constrained descent per anchor, then selection by uncertainty.
///
/// Descent `i` starts at anchor `i` and may only move within that anchor's
/// nearest-neighbor cell, so every anchor contributes a genuinely local
/// solution. Each result's uncertainty is its final normalized loss (clamped
/// to the valid sigma range); the anchor with the lowest uncertainty wins.
pub fn fit_anchored(
    model: &ObjectModel,
    target_rotation: &UnitQuaternion,
    anchors: &AnchorSet,
    config: &FitConfig,
) -> Result<AnchoredFit, FitError> {
    let targets: Vec<crate::so3::Vec3> = model
        .points()
        .iter()
        .map(|p| target_rotation.rotate(*p))
        .collect();

    let mut per_anchor = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.quats().iter().enumerate() {
        let result = descend(model, &targets, anchor, config, |candidate| {
            anchors.nearest_anchor(candidate) == i
        })?;
        per_anchor.push(result);
    }

    let deviations: Vec<UnitQuaternion> = per_anchor
        .iter()
        .zip(anchors.quats())
        .map(|(r, anchor)| r.rotation.compose(&anchor.inverse()))
        .collect();
    let sigmas: Vec<f64> = per_anchor
        .iter()
        .map(|r| r.normalized_loss.clamp(SIGMA_MIN, 1.0))
        .collect();
    let prediction =
        AnchorPrediction::new(deviations, sigmas).expect("per-anchor vectors are index-aligned");
    let (selected_index, _) = crate::losses::select_best(&prediction, anchors);

    Ok(AnchoredFit {
        per_anchor,
        selected_index,
    })
}

/// Runs `trials` random fitting problems on one model and counts how often
/// each strategy recovers the rotation (normalized loss below
/// [`SUCCESS_TOL`]).
///
/// Trial `t` draws its target rotation and the direct fit's start from
/// dedicated sub-streams of `seed`; anchored fits ignore the start since
/// they restart from every anchor.
pub fn anchor_success_comparison(
    model: &ObjectModel,
    trials: usize,
    sets: &[AnchorSet],
    config: &FitConfig,
    seed: u64,
) -> Result<ComparisonSummary, FitError> {
    assert!(trials > 0, "need at least one trial");
    let mut direct_successes = 0;
    let mut set_successes = vec![0usize; sets.len()];

    for trial in 0..trials {
        let target = random_rotation(&mut substream(seed, "compare-target", trial as u64));
        let start = random_rotation(&mut substream(seed, "compare-start", trial as u64));

        let direct = fit_direct(model, &target, &start, config)?;
        if direct.normalized_loss < SUCCESS_TOL {
            direct_successes += 1;
        }
        for (k, set) in sets.iter().enumerate() {
            let anchored = fit_anchored(model, &target, set, config)?;
            if anchored.selected().normalized_loss < SUCCESS_TOL {
                set_successes[k] += 1;
            }
        }
    }

    Ok(ComparisonSummary {
        trials,
        direct_successes,
        per_set: sets
            .iter()
            .zip(set_successes)
            .map(|(set, successes)| SetOutcome {
                kind: set.kind(),
                successes,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::generate as generate_anchors;
    use crate::losses::shape_match_loss;
    use crate::models::{generate, ShapeKind, SyntheticShapeSpec};
    use crate::so3::Vec3;
    use approx::assert_abs_diff_eq;

    fn blob(n: usize) -> ObjectModel {
        generate(&SyntheticShapeSpec {
            kind: ShapeKind::Blob { seed: 5 },
            n_points: n,
        })
        .unwrap()
    }

    fn square_prism(n: usize) -> ObjectModel {
        generate(&SyntheticShapeSpec {
            kind: ShapeKind::Box {
                dx: 0.3,
                dy: 0.3,
                dz: 1.0,
            },
            n_points: n,
        })
        .unwrap()
    }

    #[test]
    fn near_start_descent_recovers_the_rotation() {
        let model = blob(80);
        let target = UnitQuaternion::from_axis_angle(Vec3::new(1.0, 2.0, 0.5), 0.9);
        // Start 0.1 rad off target.
        let start = exp_map(TangentVec::new(0.06, -0.05, 0.05)).compose(&target);
        let result = fit_direct(&model, &target, &start, &FitConfig::default()).unwrap();
        assert!(
            result.normalized_loss < 1e-4,
            "stalled at {}",
            result.normalized_loss
        );
        assert!(result.rotation.geodesic_angle(&target) < 1e-3);
    }

    #[test]
    fn reported_loss_matches_the_public_loss_function() {
        let model = square_prism(120);
        let target = UnitQuaternion::from_axis_angle(Vec3::new(0.3, 1.0, 0.2), 1.1);
        let start = random_rotation(&mut crate::rng::substream(3, "fit-test", 0));
        let result = fit_direct(&model, &target, &start, &FitConfig::default()).unwrap();
        let independent = shape_match_loss(&result.rotation, &target, &model) / model.diameter();
        assert_abs_diff_eq!(result.normalized_loss, independent, epsilon = 1e-12);
    }

    #[test]
    fn trace_is_strictly_decreasing_and_starts_at_the_initial_loss() {
        let model = blob(60);
        let target = UnitQuaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), 1.4);
        let start = UnitQuaternion::identity();
        let result = fit_direct(&model, &target, &start, &FitConfig::default()).unwrap();
        let initial = shape_match_loss(&start, &target, &model) / model.diameter();
        assert_abs_diff_eq!(result.loss_trace[0], initial, epsilon = 1e-12);
        for pair in result.loss_trace.windows(2) {
            assert!(pair[1] < pair[0]);
        }
        assert_abs_diff_eq!(
            *result.loss_trace.last().unwrap(),
            result.normalized_loss,
            epsilon = 1e-15
        );
    }

    #[test]
    fn starting_at_the_target_converges_immediately() {
        let model = blob(40);
        let target = UnitQuaternion::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.7);
        let result = fit_direct(&model, &target, &target, &FitConfig::default()).unwrap();
        assert!(result.converged);
        assert!(result.normalized_loss < 1e-12);
        assert_eq!(result.loss_trace.len(), 1);
    }

    #[test]
    fn square_prism_quarter_turn_is_a_trap_for_direct_descent() {
        // Rotating a square prism a quarter turn about a perpendicular axis
        // swaps its long axis into the plane; locally no small rotation
        // improves the match, so a descent started there must stay stuck at
        // a plainly bad loss.
        let model = square_prism(120);
        let target = UnitQuaternion::identity();
        let trap =
            UnitQuaternion::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), std::f64::consts::FRAC_PI_2);
        let result = fit_direct(&model, &target, &trap, &FitConfig::default()).unwrap();
        assert!(
            result.normalized_loss > 0.05,
            "descent escaped the trap: {}",
            result.normalized_loss
        );
        assert!(
            result.rotation.geodesic_angle(&trap) < 0.2,
            "descent wandered {} rad from the trap",
            result.rotation.geodesic_angle(&trap)
        );
    }

    #[test]
    fn anchored_fit_escapes_the_trap() {
        let model = square_prism(120);
        let target = UnitQuaternion::identity();
        let anchors = generate_anchors(crate::anchors::AnchorGroupKind::Icosa60);
        let fit = fit_anchored(&model, &target, &anchors, &FitConfig::default()).unwrap();
        assert!(
            fit.selected().normalized_loss < SUCCESS_TOL,
            "anchored fit stalled at {}",
            fit.selected().normalized_loss
        );
    }

    #[test]
    fn anchored_results_stay_inside_their_cells() {
        let model = blob(60);
        let target = random_rotation(&mut crate::rng::substream(9, "fit-cell", 0));
        let anchors = generate_anchors(crate::anchors::AnchorGroupKind::Tetra12);
        let fit = fit_anchored(&model, &target, &anchors, &FitConfig::default()).unwrap();
        assert_eq!(fit.per_anchor.len(), anchors.len());
        for (i, result) in fit.per_anchor.iter().enumerate() {
            assert_eq!(
                anchors.nearest_anchor(&result.rotation),
                i,
                "anchor {i} left its cell"
            );
        }
        // The selection is the argmin of the per-anchor losses (after the
        // sigma clamp, which is monotone).
        let best = fit
            .per_anchor
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.normalized_loss
                    .clamp(SIGMA_MIN, 1.0)
                    .partial_cmp(&b.normalized_loss.clamp(SIGMA_MIN, 1.0))
                    .unwrap()
            })
            .unwrap()
            .0;
        assert_eq!(fit.selected_index, best);
    }

    #[test]
    fn anchored_fit_is_deterministic() {
        let model = square_prism(96);
        let target = random_rotation(&mut crate::rng::substream(31, "fit-det", 0));
        let anchors = generate_anchors(crate::anchors::AnchorGroupKind::Tetra12);
        let a = fit_anchored(&model, &target, &anchors, &FitConfig::default()).unwrap();
        let b = fit_anchored(&model, &target, &anchors, &FitConfig::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn comparison_counts_are_consistent() {
        let model = blob(50);
        let sets = vec![generate_anchors(crate::anchors::AnchorGroupKind::Tetra12)];
        let config = FitConfig {
            max_iters: 120,
            ..Default::default()
        };
        let summary = anchor_success_comparison(&model, 6, &sets, &config, 71).unwrap();
        assert_eq!(summary.trials, 6);
        assert!(summary.direct_successes <= 6);
        assert_eq!(summary.per_set.len(), 1);
        assert!(summary.per_set[0].successes <= 6);
        assert_eq!(
            summary.per_set[0].kind,
            crate::anchors::AnchorGroupKind::Tetra12
        );
        // On an asymmetric blob every anchored trial should succeed: some
        // anchor always lands near the target basin.
        assert_eq!(summary.per_set[0].successes, 6);
        let rate = summary
            .set_rate(crate::anchors::AnchorGroupKind::Tetra12)
            .unwrap();
        assert_abs_diff_eq!(rate, 1.0, epsilon = 1e-15);
        assert!(summary
            .set_rate(crate::anchors::AnchorGroupKind::Octa24)
            .is_none());
    }
}
