//! Translation recovery by direction-field voting.
//!
//! Every scene point carries a unit vector that is supposed to aim at the
//! object center. Pairs of such rays vote for a candidate center (the
//! midpoint of the shortest segment between the two lines); RANSAC keeps the
//! candidate that the most rays agree with and a least-squares pass refines
//! it using all inlier rays.
//!
//! Determinism: every hypothesis draws its point pair from a dedicated
//! sub-stream keyed by the hypothesis' global index, and batch results are
//! reduced in index order. Thread count therefore cannot change the result.

use std::fmt;

use nalgebra::Matrix3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::so3::Vec3;

/// Rays closer to parallel than this (in |cos|) cannot vote.
const PARALLEL_TOL: f64 = 1e-6;

/// Points closer to a hypothesis than this count as inliers outright.
const COINCIDENT_EPS: f64 = 1e-9;

/// Condition-number gate for the refinement solve.
const MAX_CONDITION: f64 = 1e12;

/// Errors from field construction and voting.
#[derive(Debug, Clone, PartialEq)]
pub enum VotingError {
    LengthMismatch {
        points: usize,
        dirs: usize,
    },
    NonUnitDirection {
        index: usize,
        norm: f64,
    },
    PointAtCenter {
        index: usize,
    },
    TooFewPoints {
        got: usize,
    },
    /// Every sampled pair was near-parallel; no hypothesis could be formed.
    DegenerateField,
    /// Refinement needs at least two rays.
    TooFewRays {
        got: usize,
    },
    /// The normal matrix was numerically singular.
    IllConditioned {
        condition: f64,
    },
}

impl fmt::Display for VotingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VotingError::LengthMismatch { points, dirs } => {
                write!(f, "{points} points but {dirs} directions")
            }
            VotingError::NonUnitDirection { index, norm } => {
                write!(f, "direction {index} has norm {norm}, expected 1")
            }
            VotingError::PointAtCenter { index } => {
                write!(f, "point {index} coincides with the center")
            }
            VotingError::TooFewPoints { got } => {
                write!(f, "voting needs at least 2 points, got {got}")
            }
            VotingError::DegenerateField => {
                write!(
                    f,
                    "all sampled ray pairs were parallel; field is degenerate"
                )
            }
            VotingError::TooFewRays { got } => {
                write!(f, "refinement needs at least 2 rays, got {got}")
            }
            VotingError::IllConditioned { condition } => {
                write!(
                    f,
                    "normal matrix condition {condition:.3e} exceeds {MAX_CONDITION:.0e}"
                )
            }
        }
    }
}

impl std::error::Error for VotingError {}

/// Scene points with their center-pointing unit directions.
#[derive(Clone, Debug)]
pub struct VectorField {
    points: Vec<Vec3>,
    dirs: Vec<Vec3>,
}

impl VectorField {
    /// Validates lengths and unit norms (within 1e-9).
    pub fn new(points: Vec<Vec3>, dirs: Vec<Vec3>) -> Result<Self, VotingError> {
        if points.len() != dirs.len() {
            return Err(VotingError::LengthMismatch {
                points: points.len(),
                dirs: dirs.len(),
            });
        }
        for (index, d) in dirs.iter().enumerate() {
            let norm = d.norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(VotingError::NonUnitDirection { index, norm });
            }
        }
        Ok(VectorField { points, dirs })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn dirs(&self) -> &[Vec3] {
        &self.dirs
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Builds the exact field for a known center: each direction is the unit
/// vector from the point to the center.
pub fn make_field(points: &[Vec3], center: Vec3) -> Result<VectorField, VotingError> {
    let mut dirs = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let v = center - p;
        let norm = v.norm();
        if norm < COINCIDENT_EPS {
            return Err(VotingError::PointAtCenter { index });
        }
        dirs.push(v / norm);
    }
    VectorField::new(points.to_vec(), dirs)
}

/// A candidate center produced by one ray pair.
#[derive(Clone, Copy, Debug)]
pub struct Hypothesis {
    pub point: Vec3,
    pub inlier_count: usize,
    /// Global index of the draw that produced this hypothesis; ties between
    /// equal inlier counts resolve toward the lowest index.
    pub source_index: usize,
}

/// RANSAC controls.
///
/// Deserializes leniently: omitted fields take their defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Inlier test: a ray is an inlier when the cosine between it and the
    /// direction toward the hypothesis is at least this.
    pub inlier_cos_threshold: f64,
    /// Hypotheses per round.
    pub batch_size: usize,
    /// Upper bound on rounds.
    pub max_rounds: usize,
    /// Stop once the probability of having seen an all-inlier pair reaches
    /// this.
    pub success_prob: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            inlier_cos_threshold: 0.99,
            batch_size: 128,
            max_rounds: 20,
            success_prob: 0.99,
            seed: 0,
        }
    }
}

/// Voting outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VoteResult {
    /// Estimated center, meters.
    pub center: [f64; 3],
    /// Inliers of the winning raw hypothesis, ascending point indices.
    pub inlier_indices: Vec<usize>,
    /// Total hypothesis slots drawn (parallel rejections included).
    pub hypotheses_evaluated: usize,
    /// Rounds actually run.
    pub rounds: usize,
    /// False when refinement was impossible (fewer than two inliers or a
    /// singular solve) and the raw hypothesis point was returned instead.
    pub refined: bool,
}

impl VoteResult {
    pub fn center_vec(&self) -> Vec3 {
        Vec3::new(self.center[0], self.center[1], self.center[2])
    }
}

/// Midpoint of the shortest segment between two rays, or `None` when the
/// rays are too close to parallel for a stable intersection.
pub fn pair_hypothesis(p1: Vec3, v1: Vec3, p2: Vec3, v2: Vec3) -> Option<Vec3> {
    let b = v1.dot(&v2);
    if b.abs() > 1.0 - PARALLEL_TOL {
        return None;
    }
    // Closest points of two lines: minimize |p1 + s v1 - p2 - t v2|.
    let w0 = p1 - p2;
    let d = v1.dot(&w0);
    let e = v2.dot(&w0);
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let c1 = p1 + s * v1;
    let c2 = p2 + t * v2;
    Some(0.5 * (c1 + c2))
}

/// Counts the rays that aim at `h` within the cosine threshold and returns
/// their point indices. A point coincident with `h` counts as an inlier.
pub fn count_inliers(h: Vec3, field: &VectorField, cos_threshold: f64) -> (usize, Vec<usize>) {
    let mut indices = Vec::new();
    for i in 0..field.len() {
        if inlier_test(h, field.points[i], field.dirs[i], cos_threshold) {
            indices.push(i);
        }
    }
    (indices.len(), indices)
}

#[inline]
fn inlier_test(h: Vec3, p: Vec3, v: Vec3, cos_threshold: f64) -> bool {
    let to_h = h - p;
    let dist = to_h.norm();
    if dist < COINCIDENT_EPS {
        return true;
    }
    to_h.dot(&v) / dist >= cos_threshold
}

fn count_only(h: Vec3, field: &VectorField, cos_threshold: f64) -> usize {
    let mut count = 0;
    for i in 0..field.len() {
        if inlier_test(h, field.points[i], field.dirs[i], cos_threshold) {
            count += 1;
        }
    }
    count
}

/// Batched RANSAC over ray-pair hypotheses.
///
/// Per round, `batch_size` hypotheses are drawn (each from its own seed
/// sub-stream), scored, and folded into the running best. Rounds stop early
/// once `1 - (1 - w^2)^H >= success_prob`, where `w` is the best inlier
/// ratio so far and `H` the number of slots drawn. The best hypothesis'
/// inliers are then refined by least squares; with fewer than two inliers
/// (or a singular system) the raw point is returned and flagged unrefined.
pub fn ransac_vote(field: &VectorField, config: &RansacConfig) -> Result<VoteResult, VotingError> {
    if field.len() < 2 {
        return Err(VotingError::TooFewPoints { got: field.len() });
    }
    assert!(config.batch_size > 0, "batch_size must be positive");
    assert!(config.max_rounds > 0, "max_rounds must be positive");

    let n = field.len();
    let mut best: Option<Hypothesis> = None;
    let mut evaluated = 0usize;
    let mut rounds = 0usize;

    for round in 0..config.max_rounds {
        rounds = round + 1;
        let batch: Vec<Option<(Vec3, usize)>> = (0..config.batch_size)
            .into_par_iter()
            .map(|slot| {
                let source_index = round * config.batch_size + slot;
                let mut rng = substream(config.seed, "vote-pair", source_index as u64);
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n);
                while j == i {
                    j = rng.random_range(0..n);
                }
                pair_hypothesis(
                    field.points[i],
                    field.dirs[i],
                    field.points[j],
                    field.dirs[j],
                )
                .map(|h| (h, count_only(h, field, config.inlier_cos_threshold)))
            })
            .collect();

        evaluated += config.batch_size;
        for (slot, candidate) in batch.into_iter().enumerate() {
            if let Some((point, inlier_count)) = candidate {
                let source_index = round * config.batch_size + slot;
                let better = match &best {
                    None => true,
                    Some(b) => inlier_count > b.inlier_count,
                };
                if better {
                    best = Some(Hypothesis {
                        point,
                        inlier_count,
                        source_index,
                    });
                }
            }
        }

        if let Some(b) = &best {
            let w = b.inlier_count as f64 / n as f64;
            let miss = (1.0 - w * w).powi(evaluated as i32);
            if 1.0 - miss >= config.success_prob {
                break;
            }
        }
    }

    let best = best.ok_or(VotingError::DegenerateField)?;
    let (_, inlier_indices) = count_inliers(best.point, field, config.inlier_cos_threshold);

    let (center, refined) = if inlier_indices.len() >= 2 {
        let pts: Vec<Vec3> = inlier_indices.iter().map(|&i| field.points[i]).collect();
        let dirs: Vec<Vec3> = inlier_indices.iter().map(|&i| field.dirs[i]).collect();
        match refine_least_squares(&pts, &dirs) {
            Ok(c) => (c, true),
            // Inlier rays can still be collectively near-parallel; fall back
            // to the raw hypothesis rather than failing the whole vote.
            Err(VotingError::IllConditioned { .. }) => (best.point, false),
            Err(e) => return Err(e),
        }
    } else {
        (best.point, false)
    };

    Ok(VoteResult {
        center: [center.x, center.y, center.z],
        inlier_indices,
        hypotheses_evaluated: evaluated,
        rounds,
        refined,
    })
}

/// Least-squares point closest to all rays: solves
/// `sum_i (I - v_i v_i^T) (x - p_i) = 0`.
///
/// Errors when fewer than two rays are given or the normal matrix has
/// condition number above 1e12 (parallel rays).
pub fn refine_least_squares(points: &[Vec3], dirs: &[Vec3]) -> Result<Vec3, VotingError> {
    if points.len() < 2 {
        return Err(VotingError::TooFewRays { got: points.len() });
    }
    assert_eq!(points.len(), dirs.len());

    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for (p, v) in points.iter().zip(dirs) {
        let proj = Matrix3::identity() - v * v.transpose();
        a += proj;
        b += proj * p;
    }

    let eigen = nalgebra::SymmetricEigen::new(a);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &lambda in eigen.eigenvalues.iter() {
        lo = lo.min(lambda);
        hi = hi.max(lambda);
    }
    let condition = if lo <= 0.0 { f64::INFINITY } else { hi / lo };
    if condition > MAX_CONDITION {
        return Err(VotingError::IllConditioned { condition });
    }

    // x = Q diag(1/lambda) Q^T b using the decomposition we already have.
    let qt_b = eigen.eigenvectors.transpose() * b;
    let scaled = Vec3::new(
        qt_b.x / eigen.eigenvalues[0],
        qt_b.y / eigen.eigenvalues[1],
        qt_b.z / eigen.eigenvalues[2],
    );
    Ok(eigen.eigenvectors * scaled)
}

/// JSON wire format for a vector field, `[x, y, z]` triples.
#[derive(Serialize, Deserialize)]
pub struct FieldFile {
    pub points: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
}

impl FieldFile {
    pub fn from_field(field: &VectorField) -> Self {
        FieldFile {
            points: field.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            dirs: field.dirs.iter().map(|d| [d.x, d.y, d.z]).collect(),
        }
    }

    pub fn into_field(self) -> Result<VectorField, VotingError> {
        VectorField::new(
            self.points
                .iter()
                .map(|p| Vec3::new(p[0], p[1], p[2]))
                .collect(),
            self.dirs
                .iter()
                .map(|d| Vec3::new(d[0], d[1], d[2]))
                .collect(),
        )
    }
}
