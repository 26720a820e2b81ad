//! End-to-end synthetic benchmark.
//!
//! Each instance poses a model at a random rotation and translation, builds
//! a corrupted center-pointing direction field over scene points, recovers
//! the translation by voting and the rotation by (anchored or direct)
//! descent, and scores the result against the ground truth. The run is
//! fully reproducible: every random choice comes from a sub-stream keyed by
//! the instance index, so reports replay byte-for-byte and instances keep
//! their values when more are appended.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate as generate_anchors, AnchorGroupKind, AnchorSet};
use crate::fit::{fit_anchored, fit_direct, FitConfig, FitError};
use crate::losses::{ObjectModel, Pose};
use crate::metrics::{accuracy_at_threshold, auc, decoupled_errors, MetricsError};
use crate::models::{load_ply, ModelError, SyntheticShapeSpec};
use crate::rng::substream;
use crate::so3::{exp_map, random_rotation, Vec3};
use crate::voting::{make_field, ransac_vote, RansacConfig, VectorField};

/// Current report schema version.
pub const REPORT_VERSION: u32 = 1;

/// Errors from benchmark configuration and execution.
#[derive(Debug)]
pub enum BenchError {
    BadConfig {
        message: String,
    },
    Model(ModelError),
    Metrics(MetricsError),
    Fit(FitError),
    Io {
        path: PathBuf,
        message: String,
    },
    /// Every instance failed; there is nothing to aggregate.
    NoSuccessfulInstances,
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::BadConfig { message } => write!(f, "bad benchmark config: {message}"),
            BenchError::Model(e) => write!(f, "model: {e}"),
            BenchError::Metrics(e) => write!(f, "metrics: {e}"),
            BenchError::Fit(e) => write!(f, "fit: {e}"),
            BenchError::Io { path, message } => {
                write!(f, "io on {}: {message}", path.display())
            }
            BenchError::NoSuccessfulInstances => {
                write!(f, "all benchmark instances failed")
            }
        }
    }
}

impl std::error::Error for BenchError {}

impl From<ModelError> for BenchError {
    fn from(e: ModelError) -> Self {
        BenchError::Model(e)
    }
}

impl From<MetricsError> for BenchError {
    fn from(e: MetricsError) -> Self {
        BenchError::Metrics(e)
    }
}

impl From<FitError> for BenchError {
    fn from(e: FitError) -> Self {
        BenchError::Fit(e)
    }
}

/// Where the benchmark model comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    /// An ASCII PLY file on disk.
    Path(PathBuf),
    /// A generated shape.
    Spec(SyntheticShapeSpec),
}

/// Benchmark controls. All fields have defaults, so config files may be
/// partial.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub model: ModelSource,
    /// Scene points per instance, drawn from the model with replacement.
    pub n_points: usize,
    /// Fraction of directions replaced by uniform random unit vectors.
    pub outlier_fraction: f64,
    /// Std-dev of the angular jitter on the surviving directions, degrees.
    pub dir_noise_deg: f64,
    /// Std-dev of the rotation-target noise, degrees.
    pub rot_noise_deg: f64,
    pub n_instances: usize,
    /// Anchor group for the rotation fit; `None` runs a single direct
    /// descent from a random start instead.
    pub anchors: Option<AnchorGroupKind>,
    /// Voting controls; the `seed` field is ignored and replaced by a
    /// per-instance sub-stream.
    pub ransac: RansacConfig,
    pub fit: FitConfig,
    /// Thresholds per accuracy curve.
    pub curve_points: usize,
    /// Headline accuracy threshold as a fraction of the model diameter.
    pub add_frac: f64,
    /// Integration horizon for distance-error curves, meters.
    pub auc_max: f64,
    /// Horizon for the rotation-error curve, radians.
    pub rot_curve_max: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelSource::Spec(SyntheticShapeSpec {
                kind: crate::models::ShapeKind::Cylinder {
                    radius: 0.05,
                    height: 0.2,
                },
                n_points: 120,
            }),
            n_points: 500,
            outlier_fraction: 0.3,
            dir_noise_deg: 2.0,
            rot_noise_deg: 2.0,
            n_instances: 8,
            anchors: Some(AnchorGroupKind::Octa24),
            ransac: RansacConfig::default(),
            fit: FitConfig::default(),
            curve_points: 100,
            add_frac: 0.1,
            auc_max: 0.1,
            rot_curve_max: 0.5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |message: String| Err(BenchError::BadConfig { message });
        if self.n_points < 2 {
            return bad(format!(
                "n_points must be at least 2, got {}",
                self.n_points
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad(format!(
                "outlier_fraction must lie in [0, 1], got {}",
                self.outlier_fraction
            ));
        }
        if self.dir_noise_deg < 0.0 || self.rot_noise_deg < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if self.n_instances == 0 {
            return bad("n_instances must be positive".into());
        }
        if self.curve_points == 0 {
            return bad("curve_points must be positive".into());
        }
        if self.add_frac <= 0.0 || self.auc_max <= 0.0 || self.rot_curve_max <= 0.0 {
            return bad("thresholds must be positive".into());
        }
        Ok(())
    }
}

/// One instance's outcome. Error fields are `None` when `failure` is set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub add: Option<f64>,
    pub adds: Option<f64>,
    pub rot_angle_rad: Option<f64>,
    pub trans_err_m: Option<f64>,
    pub vote_refined: Option<bool>,
    pub vote_inliers: Option<usize>,
    pub fit_converged: Option<bool>,
    pub failure: Option<String>,
}

/// Batch summary over the successful instances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_ok: usize,
    pub n_failed: usize,
    /// Fraction of instances whose symmetry-aware distance error is below
    /// `add_frac` of the diameter.
    pub accuracy_add: f64,
    pub auc_add: f64,
    pub mean_add: f64,
    pub mean_adds: f64,
    pub mean_rot_angle_rad: f64,
    pub mean_trans_err_m: f64,
    pub vote_refined_fraction: f64,
}

/// Full benchmark output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub model_id: String,
    pub model_diameter_m: f64,
    pub config: BenchConfig,
    pub instances: Vec<InstanceRecord>,
    pub aggregate: Aggregate,
    /// `(threshold_m, accuracy)`, symmetry-aware distance error.
    pub curve_add: Vec<(f64, f64)>,
    /// `(threshold_m, accuracy)`, translation error.
    pub curve_trans: Vec<(f64, f64)>,
    /// `(threshold_rad, accuracy)`, rotation error.
    pub curve_rot: Vec<(f64, f64)>,
}

fn resolve_model(source: &ModelSource) -> Result<ObjectModel, BenchError> {
    match source {
        ModelSource::Path(path) => Ok(load_ply(path, None)?),
        ModelSource::Spec(spec) => Ok(crate::models::generate(spec)?),
    }
}

/// Uniform random unit vector.
fn random_dir(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if v.norm() > 1e-6 {
            return v / v.norm();
        }
    }
}

/// Tilts `dir` by `angle` radians about a random perpendicular axis.
fn tilt(dir: Vec3, angle: f64, rng: &mut impl Rng) -> Vec3 {
    if angle == 0.0 {
        return dir;
    }
    let axis = loop {
        let v = random_dir(rng);
        let perp = v - dir * v.dot(&dir);
        if perp.norm() > 1e-6 {
            break perp / perp.norm();
        }
    };
    exp_map(axis * angle).rotate(dir)
}

/// Builds one instance's corrupted direction field.
fn corrupt_field(
    clean: &VectorField,
    outlier_fraction: f64,
    dir_noise_rad: f64,
    rng: &mut impl Rng,
) -> VectorField {
    let mut dirs = Vec::with_capacity(clean.len());
    for d in clean.dirs() {
        let angle: f64 = rng.sample::<f64, _>(StandardNormal) * dir_noise_rad;
        dirs.push(tilt(*d, angle, rng));
    }
    for d in dirs.iter_mut() {
        if rng.random::<f64>() < outlier_fraction {
            *d = random_dir(rng);
        }
    }
    VectorField::new(clean.points().to_vec(), dirs).expect("tilted directions stay unit")
}

fn run_instance(
    index: usize,
    model: &ObjectModel,
    anchors: Option<&AnchorSet>,
    config: &BenchConfig,
) -> InstanceRecord {
    let failed = |message: String| InstanceRecord {
        index,
        add: None,
        adds: None,
        rot_angle_rad: None,
        trans_err_m: None,
        vote_refined: None,
        vote_inliers: None,
        fit_converged: None,
        failure: Some(message),
    };

    // Ground-truth pose.
    let gt_rotation = random_rotation(&mut substream(config.seed, "pose-rot", index as u64));
    let mut trans_rng = substream(config.seed, "pose-trans", index as u64);
    let gt_translation = Vec3::new(
        trans_rng.random_range(-0.5..0.5),
        trans_rng.random_range(-0.5..0.5),
        trans_rng.random_range(-0.5..0.5),
    );
    let truth = Pose {
        rotation: gt_rotation,
        translation: gt_translation,
    };

    // Scene points: model points with replacement, posed.
    let mut point_rng = substream(config.seed, "points", index as u64);
    let scene: Vec<Vec3> = (0..config.n_points)
        .map(|_| {
            let p = &model.points()[point_rng.random_range(0..model.len())];
            truth.transform(*p)
        })
        .collect();

    // Direction field toward the true center, then corrupted.
    let clean = match make_field(&scene, gt_translation) {
        Ok(f) => f,
        Err(e) => return failed(format!("field construction: {e}")),
    };
    let mut noise_rng = substream(config.seed, "noise", index as u64);
    let field = corrupt_field(
        &clean,
        config.outlier_fraction,
        config.dir_noise_deg.to_radians(),
        &mut noise_rng,
    );

    // Translation by voting.
    let mut ransac = config.ransac;
    ransac.seed = substream(config.seed, "ransac", index as u64).random();
    let vote = match ransac_vote(&field, &ransac) {
        Ok(v) => v,
        Err(e) => return failed(format!("voting: {e}")),
    };

    // Rotation target with noise, then the fit.
    let mut rot_noise_rng = substream(config.seed, "rot-noise", index as u64);
    let noise_angle: f64 =
        rot_noise_rng.sample::<f64, _>(StandardNormal) * config.rot_noise_deg.to_radians();
    let noise_axis = random_dir(&mut rot_noise_rng);
    let fit_target = exp_map(noise_axis * noise_angle).compose(&gt_rotation);

    let fit_result = match anchors {
        Some(set) => match fit_anchored(model, &fit_target, set, &config.fit) {
            Ok(f) => f.selected().clone(),
            Err(e) => return failed(format!("fit: {e}")),
        },
        None => {
            let start = random_rotation(&mut substream(config.seed, "fit-init", index as u64));
            match fit_direct(model, &fit_target, &start, &config.fit) {
                Ok(f) => f,
                Err(e) => return failed(format!("fit: {e}")),
            }
        }
    };

    let estimate = Pose {
        rotation: fit_result.rotation,
        translation: vote.center_vec(),
    };
    let errors = decoupled_errors(model, &estimate, &truth);

    InstanceRecord {
        index,
        add: Some(errors.add),
        adds: Some(errors.adds),
        rot_angle_rad: Some(errors.rot_angle),
        trans_err_m: Some(errors.trans_err),
        vote_refined: Some(vote.refined),
        vote_inliers: Some(vote.inlier_indices.len()),
        fit_converged: Some(fit_result.converged),
        failure: None,
    }
}

/// Runs the full benchmark described by `config`.
pub fn run_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let model = resolve_model(&config.model)?;
    let anchors = config.anchors.map(generate_anchors);

    let instances: Vec<InstanceRecord> = (0..config.n_instances)
        .into_par_iter()
        .map(|i| run_instance(i, &model, anchors.as_ref(), config))
        .collect();

    let ok: Vec<&InstanceRecord> = instances.iter().filter(|r| r.failure.is_none()).collect();
    if ok.is_empty() {
        return Err(BenchError::NoSuccessfulInstances);
    }

    let pick = |f: fn(&InstanceRecord) -> Option<f64>| -> Vec<f64> {
        ok.iter()
            .map(|r| f(r).expect("ok instance has errors"))
            .collect()
    };
    let auto: Vec<f64> = if model.symmetric() {
        pick(|r| r.adds)
    } else {
        pick(|r| r.add)
    };
    let adds = pick(|r| r.adds);
    let add = pick(|r| r.add);
    let rot = pick(|r| r.rot_angle_rad);
    let trans = pick(|r| r.trans_err_m);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let aggregate = Aggregate {
        n_ok: ok.len(),
        n_failed: instances.len() - ok.len(),
        accuracy_add: accuracy_at_threshold(&auto, config.add_frac * model.diameter())?,
        auc_add: auc(&auto, config.auc_max)?,
        mean_add: mean(&add),
        mean_adds: mean(&adds),
        mean_rot_angle_rad: mean(&rot),
        mean_trans_err_m: mean(&trans),
        vote_refined_fraction: ok.iter().filter(|r| r.vote_refined == Some(true)).count() as f64
            / ok.len() as f64,
    };

    let sweep = |max: f64| -> Vec<f64> {
        (1..=config.curve_points)
            .map(|i| max * i as f64 / config.curve_points as f64)
            .collect()
    };
    let curve_add = crate::metrics::accuracy_curve(&auto, &sweep(config.auc_max))?;
    let curve_trans = crate::metrics::accuracy_curve(&trans, &sweep(config.auc_max))?;
    let curve_rot = crate::metrics::accuracy_curve(&rot, &sweep(config.rot_curve_max))?;

    Ok(BenchReport {
        version: REPORT_VERSION,
        model_id: model.id().to_string(),
        model_diameter_m: model.diameter(),
        config: config.clone(),
        instances,
        aggregate,
        curve_add,
        curve_trans,
        curve_rot,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), BenchError> {
    fs::write(path, text).map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn curve_csv(curve: &[(f64, f64)], header: &str) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for (t, a) in curve {
        out.push_str(&format!("{t},{a}\n"));
    }
    out
}

/// Writes `report.json`, `curve_add.csv`, `curve_trans.csv`, and
/// `curve_rot.csv` into `dir` (created if missing). Output depends only on
/// the report contents, so a replayed run reproduces the files byte for
/// byte.
pub fn emit_report(report: &BenchReport, dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(dir).map_err(|e| BenchError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_text(&dir.join("report.json"), &format!("{json}\n"))?;
    write_text(
        &dir.join("curve_add.csv"),
        &curve_csv(&report.curve_add, "threshold_m,accuracy"),
    )?;
    write_text(
        &dir.join("curve_trans.csv"),
        &curve_csv(&report.curve_trans, "threshold_m,accuracy"),
    )?;
    write_text(
        &dir.join("curve_rot.csv"),
        &curve_csv(&report.curve_rot, "threshold_rad,accuracy"),
    )?;
    Ok(())
}
