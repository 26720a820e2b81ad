//! Pose accuracy metrics.
//!
//! The core quantity is the average distance between a model's points under
//! the estimated pose and under the ground-truth pose. For symmetric objects
//! the paired distance is replaced by the distance to the nearest
//! transformed point, which forgives pose differences that land inside the
//! object's symmetry group. Accuracy at a threshold, threshold-sweep curves,
//! and the area under that curve summarize a batch of estimates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::losses::{ObjectModel, Pose};
use crate::so3::{UnitQuaternion, Vec3};

/// Errors from metric evaluation and record pairing.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    EmptyErrors,
    /// Thresholds must be finite, positive, and strictly increasing.
    BadThresholds {
        message: String,
    },
    BadMaxThreshold {
        value: f64,
    },
    RecordCountMismatch {
        estimates: usize,
        truths: usize,
    },
    /// Paired records must describe the same object, line by line.
    ObjectIdMismatch {
        line: usize,
        estimate: String,
        truth: String,
    },
    UnknownObject {
        id: String,
    },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyErrors => write!(f, "no errors to evaluate"),
            MetricsError::BadThresholds { message } => write!(f, "bad thresholds: {message}"),
            MetricsError::BadMaxThreshold { value } => {
                write!(f, "max threshold must be finite and positive, got {value}")
            }
            MetricsError::RecordCountMismatch { estimates, truths } => {
                write!(f, "{estimates} estimate records vs {truths} truth records")
            }
            MetricsError::ObjectIdMismatch {
                line,
                estimate,
                truth,
            } => {
                write!(
                    f,
                    "record {line}: estimate is for {estimate:?} but truth is for {truth:?}"
                )
            }
            MetricsError::UnknownObject { id } => {
                write!(f, "record references unknown object {id:?}")
            }
        }
    }
}

impl std::error::Error for MetricsError {}

/// Mean paired distance between the model under two poses.
pub fn add_error(model: &ObjectModel, estimate: &Pose, truth: &Pose) -> f64 {
    let points = model.points();
    let mut sum = 0.0;
    for p in points {
        sum += (estimate.transform(*p) - truth.transform(*p)).norm();
    }
    sum / points.len() as f64
}

/// Mean nearest-point distance: each ground-truth point is matched to the
/// closest estimated point.
pub fn adds_error(model: &ObjectModel, estimate: &Pose, truth: &Pose) -> f64 {
    let est: Vec<Vec3> = model
        .points()
        .iter()
        .map(|p| estimate.transform(*p))
        .collect();
    let mut sum = 0.0;
    for p in model.points() {
        let t = truth.transform(*p);
        let mut best = f64::INFINITY;
        for e in &est {
            best = best.min((t - e).norm_squared());
        }
        sum += best.sqrt();
    }
    sum / model.len() as f64
}

/// Dispatches on the model's symmetry flag: nearest-point distance for
/// symmetric objects, paired distance otherwise.
pub fn add_auto(model: &ObjectModel, estimate: &Pose, truth: &Pose) -> f64 {
    if model.symmetric() {
        adds_error(model, estimate, truth)
    } else {
        add_error(model, estimate, truth)
    }
}

/// Per-estimate error breakdown.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PoseError {
    pub add: f64,
    pub adds: f64,
    /// Geodesic rotation error, radians.
    pub rot_angle: f64,
    /// Translation error, meters.
    pub trans_err: f64,
}

/// All four error measures for one estimate.
pub fn decoupled_errors(model: &ObjectModel, estimate: &Pose, truth: &Pose) -> PoseError {
    PoseError {
        add: add_error(model, estimate, truth),
        adds: adds_error(model, estimate, truth),
        rot_angle: estimate.rotation.geodesic_angle(&truth.rotation),
        trans_err: (estimate.translation - truth.translation).norm(),
    }
}

/// Fraction of errors strictly below `threshold`.
pub fn accuracy_at_threshold(errors: &[f64], threshold: f64) -> Result<f64, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    Ok(hits as f64 / errors.len() as f64)
}

/// Accuracy at each threshold; thresholds must be finite, positive, and
/// strictly increasing.
pub fn accuracy_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    validate_thresholds(thresholds)?;
    thresholds
        .iter()
        .map(|&t| accuracy_at_threshold(errors, t).map(|a| (t, a)))
        .collect()
}

fn validate_thresholds(thresholds: &[f64]) -> Result<(), MetricsError> {
    if thresholds.is_empty() {
        return Err(MetricsError::BadThresholds {
            message: "empty threshold list".into(),
        });
    }
    for (i, &t) in thresholds.iter().enumerate() {
        if !t.is_finite() || t <= 0.0 {
            return Err(MetricsError::BadThresholds {
                message: format!("threshold {i} is {t}"),
            });
        }
        if i > 0 && t <= thresholds[i - 1] {
            return Err(MetricsError::BadThresholds {
                message: format!("threshold {i} ({t}) not above threshold {} ", i - 1),
            });
        }
    }
    Ok(())
}

/// Exact area under the accuracy-vs-threshold step curve over
/// `[0, max_threshold]`, normalized to `[0, 1]`.
///
/// Accuracy as a function of the threshold is a right-continuous step
/// function that jumps by `1/n` at each error value; the integral is summed
/// segment by segment between sorted error values.
pub fn auc(errors: &[f64], max_threshold: f64) -> Result<f64, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    if !max_threshold.is_finite() || max_threshold <= 0.0 {
        return Err(MetricsError::BadMaxThreshold {
            value: max_threshold,
        });
    }
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite error value"));

    let n = sorted.len() as f64;
    let mut area = 0.0;
    let mut below = 0usize; // errors strictly below the sweep position
    let mut prev = 0.0;
    for &e in &sorted {
        if e >= max_threshold {
            break;
        }
        // From prev to e the accuracy is constant at below/n.
        area += (e - prev) * (below as f64 / n);
        below += 1;
        prev = e;
    }
    // Count ties at the final step position before closing the interval.
    area += (max_threshold - prev) * (below as f64 / n);
    Ok(area / max_threshold)
}

/// One pose in a results file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub object_id: String,
    /// Unit quaternion, `[w, x, y, z]`.
    pub rotation_wxyz: [f64; 4],
    /// Meters.
    pub translation_m: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(object_id: &str, pose: &Pose) -> Self {
        PoseRecord {
            object_id: object_id.to_string(),
            rotation_wxyz: pose.rotation.wxyz(),
            translation_m: [pose.translation.x, pose.translation.y, pose.translation.z],
        }
    }

    pub fn pose(&self) -> Result<Pose, crate::so3::So3Error> {
        let [w, x, y, z] = self.rotation_wxyz;
        Ok(Pose {
            rotation: UnitQuaternion::new_normalize(w, x, y, z)?,
            translation: Vec3::new(
                self.translation_m[0],
                self.translation_m[1],
                self.translation_m[2],
            ),
        })
    }
}

/// Zips estimate and truth records, insisting that line `i` of both files
/// talks about the same object.
pub fn pair_records<'a>(
    estimates: &'a [PoseRecord],
    truths: &'a [PoseRecord],
) -> Result<Vec<(&'a PoseRecord, &'a PoseRecord)>, MetricsError> {
    if estimates.len() != truths.len() {
        return Err(MetricsError::RecordCountMismatch {
            estimates: estimates.len(),
            truths: truths.len(),
        });
    }
    let mut pairs = Vec::with_capacity(estimates.len());
    for (line, (e, t)) in estimates.iter().zip(truths).enumerate() {
        if e.object_id != t.object_id {
            return Err(MetricsError::ObjectIdMismatch {
                line,
                estimate: e.object_id.clone(),
                truth: t.object_id.clone(),
            });
        }
        pairs.push((e, t));
    }
    Ok(pairs)
}

/// Accuracy summary for one object.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectReport {
    pub accuracy: f64,
    pub auc: f64,
    pub n: usize,
}

/// Batch evaluation output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_object: BTreeMap<String, ObjectReport>,
    /// Pooled accuracy curve over all records, `(threshold_m, accuracy)`.
    pub curve: Vec<(f64, f64)>,
}

/// Evaluates paired records against their models.
///
/// Each object's accuracy threshold is `add_frac` of its diameter; AUC is
/// integrated to `auc_max` meters. The pooled curve sweeps `curve_points`
/// thresholds up to `auc_max`.
pub fn evaluate(
    models: &BTreeMap<String, ObjectModel>,
    pairs: &[(&PoseRecord, &PoseRecord)],
    add_frac: f64,
    auc_max: f64,
    curve_points: usize,
) -> Result<EvalReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    let mut by_object: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut pooled = Vec::with_capacity(pairs.len());
    for (estimate, truth) in pairs {
        let model = models
            .get(&estimate.object_id)
            .ok_or_else(|| MetricsError::UnknownObject {
                id: estimate.object_id.clone(),
            })?;
        let est = estimate.pose().map_err(|e| MetricsError::BadThresholds {
            message: format!("bad estimate rotation: {e}"),
        })?;
        let tru = truth.pose().map_err(|e| MetricsError::BadThresholds {
            message: format!("bad truth rotation: {e}"),
        })?;
        let err = add_auto(model, &est, &tru);
        by_object
            .entry(estimate.object_id.clone())
            .or_default()
            .push(err);
        pooled.push(err);
    }

    let mut per_object = BTreeMap::new();
    for (id, errors) in &by_object {
        let diameter = models[id].diameter();
        per_object.insert(
            id.clone(),
            ObjectReport {
                accuracy: accuracy_at_threshold(errors, add_frac * diameter)?,
                auc: auc(errors, auc_max)?,
                n: errors.len(),
            },
        );
    }

    let thresholds: Vec<f64> = (1..=curve_points)
        .map(|i| auc_max * i as f64 / curve_points as f64)
        .collect();
    let curve = accuracy_curve(&pooled, &thresholds)?;

    Ok(EvalReport { per_object, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate, ShapeKind, SyntheticShapeSpec};
    use crate::rng::substream;
    use crate::so3::random_rotation;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn box_model(dx: f64, dy: f64, dz: f64, n: usize) -> ObjectModel {
        generate(&SyntheticShapeSpec {
            kind: ShapeKind::Box { dx, dy, dz },
            n_points: n,
        })
        .unwrap()
    }

    fn blob_model(seed: u64, n: usize) -> ObjectModel {
        generate(&SyntheticShapeSpec {
            kind: ShapeKind::Blob { seed },
            n_points: n,
        })
        .unwrap()
    }

    fn identity_pose() -> Pose {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    #[test]
    fn pure_translation_add_equals_offset() {
        let model = blob_model(3, 100);
        let offset = Vec3::new(0.003, -0.004, 0.012);
        let estimate = Pose {
            rotation: UnitQuaternion::identity(),
            translation: offset,
        };
        // Every point moves by exactly the offset, so the mean paired
        // distance is the offset length; the nearest-point variant can only
        // be smaller.
        let add = add_error(&model, &estimate, &identity_pose());
        assert_abs_diff_eq!(add, offset.norm(), epsilon = 1e-12);
        assert!(adds_error(&model, &estimate, &identity_pose()) <= add + 1e-12);
    }

    #[test]
    fn adds_never_exceeds_add() {
        let model = blob_model(7, 60);
        let mut rng = substream(40, "metrics-rand", 0);
        for _ in 0..50 {
            let estimate = Pose {
                rotation: random_rotation(&mut rng),
                translation: Vec3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
            };
            let truth = Pose {
                rotation: random_rotation(&mut rng),
                translation: Vec3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
            };
            let e = decoupled_errors(&model, &estimate, &truth);
            assert!(e.adds <= e.add + 1e-12);
            assert!(e.rot_angle >= 0.0 && e.rot_angle <= std::f64::consts::PI + 1e-12);
        }
    }

    #[test]
    fn errors_are_invariant_to_a_shared_rigid_motion() {
        // Applying one extra rigid motion to both poses moves all points by
        // the same isometry and cannot change distances.
        let model = blob_model(11, 80);
        let mut rng = substream(41, "metrics-motion", 0);
        let estimate = Pose {
            rotation: random_rotation(&mut rng),
            translation: Vec3::new(0.01, 0.02, -0.01),
        };
        let truth = Pose {
            rotation: random_rotation(&mut rng),
            translation: Vec3::new(-0.005, 0.0, 0.015),
        };
        let g_rot = random_rotation(&mut rng);
        let g_trans = Vec3::new(0.3, -0.2, 0.5);
        let moved = |p: &Pose| Pose {
            rotation: g_rot.compose(&p.rotation),
            translation: g_rot.rotate(p.translation) + g_trans,
        };
        let base = decoupled_errors(&model, &estimate, &truth);
        let shifted = decoupled_errors(&model, &moved(&estimate), &moved(&truth));
        assert_abs_diff_eq!(base.add, shifted.add, epsilon = 1e-10);
        assert_abs_diff_eq!(base.adds, shifted.adds, epsilon = 1e-10);
        assert_abs_diff_eq!(base.rot_angle, shifted.rot_angle, epsilon = 1e-9);
        assert_abs_diff_eq!(base.trans_err, shifted.trans_err, epsilon = 1e-10);
    }

    #[test]
    fn symmetric_pose_is_forgiven_by_nearest_point_error() {
        // A square prism rotated half a turn about z occupies the same point
        // set; the nearest-point error vanishes while the paired error does
        // not.
        let model = box_model(0.3, 0.3, 1.0, 240);
        let half_turn = Pose {
            rotation: UnitQuaternion::from_axis_angle(
                Vec3::new(0.0, 0.0, 1.0),
                std::f64::consts::PI,
            ),
            translation: Vec3::zeros(),
        };
        let adds = adds_error(&model, &half_turn, &identity_pose());
        let add = add_error(&model, &half_turn, &identity_pose());
        assert!(adds < 1e-9, "adds = {adds}");
        assert!(add > 0.1 * model.diameter());
        // The model is flagged symmetric, so the dispatcher picks the
        // forgiving variant.
        assert!(add_auto(&model, &half_turn, &identity_pose()) < 1e-9);
    }

    #[test]
    fn accuracy_counts_strictly_below() {
        let errors = [0.01, 0.05, 0.05, 0.2];
        assert_abs_diff_eq!(
            accuracy_at_threshold(&errors, 0.05).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            accuracy_at_threshold(&errors, 0.051).unwrap(),
            0.75,
            epsilon = 1e-15
        );
        assert!(matches!(
            accuracy_at_threshold(&[], 0.1),
            Err(MetricsError::EmptyErrors)
        ));
    }

    #[test]
    fn auc_hand_case() {
        // Errors {0.02, 0.05, 0.2}, integrated to 0.1:
        //   accuracy is 0 on [0, 0.02), 1/3 on [0.02, 0.05), 2/3 on
        //   [0.05, 0.1]; area = 0.03/3 + 0.05*2/3 = 0.130/3; divide by 0.1.
        let a = auc(&[0.02, 0.05, 0.2], 0.1).unwrap();
        assert_abs_diff_eq!(a, 13.0 / 30.0, epsilon = 1e-12);
    }

    #[test]
    fn auc_matches_closed_form_and_quadrature() {
        let mut rng = substream(42, "auc-rand", 0);
        for _ in 0..20 {
            let n = rng.random_range(1..40);
            let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
            let max_t = rng.random_range(0.05..0.25);
            let fast = auc(&errors, max_t).unwrap();

            // Independent route 1: AUC = mean of max(0, T - e) / T, because
            // each error contributes an indicator integrated from e to T.
            let closed: f64 = errors.iter().map(|&e| (max_t - e).max(0.0)).sum::<f64>()
                / (errors.len() as f64 * max_t);
            assert_abs_diff_eq!(fast, closed, epsilon = 1e-12);

            // Independent route 2: midpoint quadrature of the accuracy
            // function itself.
            let steps = 200_000;
            let mut area = 0.0;
            for k in 0..steps {
                let t = max_t * (k as f64 + 0.5) / steps as f64;
                area += accuracy_at_threshold(&errors, t).unwrap();
            }
            let quad = area / steps as f64;
            assert_abs_diff_eq!(fast, quad, epsilon = 2e-4);
        }
    }

    #[test]
    fn auc_edge_cases() {
        // All errors past the horizon: zero area.
        assert_abs_diff_eq!(auc(&[0.5, 0.9], 0.1).unwrap(), 0.0, epsilon = 1e-15);
        // All errors at zero: full area.
        assert_abs_diff_eq!(auc(&[0.0, 0.0], 0.1).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(auc(&[], 0.1), Err(MetricsError::EmptyErrors)));
        assert!(matches!(
            auc(&[0.1], 0.0),
            Err(MetricsError::BadMaxThreshold { .. })
        ));
        assert!(matches!(
            auc(&[0.1], f64::NAN),
            Err(MetricsError::BadMaxThreshold { .. })
        ));
    }

    #[test]
    fn curve_thresholds_must_increase() {
        let errors = [0.01, 0.02];
        assert!(accuracy_curve(&errors, &[0.01, 0.02, 0.03]).is_ok());
        assert!(matches!(
            accuracy_curve(&errors, &[0.02, 0.02]),
            Err(MetricsError::BadThresholds { .. })
        ));
        assert!(matches!(
            accuracy_curve(&errors, &[-0.1, 0.2]),
            Err(MetricsError::BadThresholds { .. })
        ));
        assert!(matches!(
            accuracy_curve(&errors, &[]),
            Err(MetricsError::BadThresholds { .. })
        ));
        // The curve is a cumulative distribution: monotone non-decreasing.
        let curve = accuracy_curve(&[0.03, 0.07, 0.01], &[0.02, 0.05, 0.1]).unwrap();
        for pair in curve.windows(2) {
            assert!(pair[1].1 >= pair[0].1);
        }
    }

    #[test]
    fn record_pairing_validates_ids() {
        let a = PoseRecord {
            object_id: "cube".into(),
            rotation_wxyz: [1.0, 0.0, 0.0, 0.0],
            translation_m: [0.0; 3],
        };
        let mut b = a.clone();
        b.object_id = "prism".into();
        assert!(pair_records(std::slice::from_ref(&a), std::slice::from_ref(&a)).is_ok());
        assert!(matches!(
            pair_records(std::slice::from_ref(&a), std::slice::from_ref(&b)),
            Err(MetricsError::ObjectIdMismatch { line: 0, .. })
        ));
        assert!(matches!(
            pair_records(&[a.clone(), b], &[a]),
            Err(MetricsError::RecordCountMismatch {
                estimates: 2,
                truths: 1
            })
        ));
    }

    #[test]
    fn pose_record_round_trip() {
        let mut rng = substream(17, "record-rand", 0);
        let pose = Pose {
            rotation: random_rotation(&mut rng),
            translation: Vec3::new(0.1, 0.2, 0.3),
        };
        let record = PoseRecord::from_pose("thing", &pose);
        let text = serde_json::to_string(&record).unwrap();
        let back: PoseRecord = serde_json::from_str(&text).unwrap();
        let restored = back.pose().unwrap();
        assert_eq!(restored.rotation.wxyz(), pose.rotation.wxyz());
        assert!((restored.translation - pose.translation).norm() < 1e-15);
        // Non-unit rotations in a file are normalized on load; a zero
        // quaternion is rejected.
        let bad = PoseRecord {
            object_id: "thing".into(),
            rotation_wxyz: [0.0; 4],
            translation_m: [0.0; 3],
        };
        assert!(bad.pose().is_err());
    }

    #[test]
    fn evaluate_splits_by_object_and_pools_the_curve() {
        let blob = blob_model(5, 50);
        let mut models = BTreeMap::new();
        let id = blob.id().to_string();
        models.insert(id.clone(), blob);

        let truth = PoseRecord::from_pose(&id, &identity_pose());
        // One perfect estimate, one off by 5 mm.
        let good = truth.clone();
        let bad = PoseRecord {
            object_id: id.clone(),
            rotation_wxyz: [1.0, 0.0, 0.0, 0.0],
            translation_m: [0.005, 0.0, 0.0],
        };
        let estimates = vec![good, bad];
        let truths = vec![truth.clone(), truth];
        let pairs = pair_records(&estimates, &truths).unwrap();
        let report = evaluate(&models, &pairs, 0.02, 0.01, 10).unwrap();
        let object = &report.per_object[&id];
        assert_eq!(object.n, 2);
        // Threshold 0.02 * diameter is under 5 mm for a small blob, so only
        // the perfect estimate passes.
        assert!(models[&id].diameter() * 0.02 < 0.005);
        assert_abs_diff_eq!(object.accuracy, 0.5, epsilon = 1e-15);
        // Pooled curve: 10 points, last threshold exactly 0.01.
        assert_eq!(report.curve.len(), 10);
        assert_abs_diff_eq!(report.curve[9].0, 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(report.curve[9].1, 1.0, epsilon = 1e-15);

        // Unknown id errors out.
        let stray = PoseRecord {
            object_id: "ghost".into(),
            rotation_wxyz: [1.0, 0.0, 0.0, 0.0],
            translation_m: [0.0; 3],
        };
        let pairs = vec![(&stray, &stray)];
        assert!(matches!(
            evaluate(&models, &pairs, 0.1, 0.01, 5),
            Err(MetricsError::UnknownObject { .. })
        ));
    }
}
