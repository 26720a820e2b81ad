//! Object model ingestion and synthetic shapes.
//!
//! Models load from ASCII PLY files (with an optional `<name>.meta.json`
//! sidecar carrying the symmetry flag) or come from the deterministic
//! synthetic generators. The generators sample cylinders and boxes on
//! symmetry-aligned rings and grids, so every declared symmetry rotation maps
//! the sample set onto itself *exactly* — rotating by a declared symmetry and
//! re-matching nearest neighbors gives zero distance, not merely a small one.
//! That property is what downstream loss tests and the fitting harness rely
//! on.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::ObjectModel;
use crate::rng::substream;
use crate::so3::{UnitQuaternion, Vec3};

/// Errors from model loading, saving and generation.
#[derive(Debug)]
pub enum ModelError {
    Io {
        path: PathBuf,
        message: String,
    },
    /// Header or data problem; `line` is 1-based within the file.
    Parse {
        line: usize,
        message: String,
    },
    TooFewPoints {
        got: usize,
    },
    BadSpec {
        message: String,
    },
    /// The parsed cloud violated the object-model invariants.
    Invalid {
        message: String,
    },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Io { path, message } => write!(f, "{}: {message}", path.display()),
            ModelError::Parse { line, message } => write!(f, "line {line}: {message}"),
            ModelError::TooFewPoints { got } => {
                write!(f, "need at least 2 points for a diameter, got {got}")
            }
            ModelError::BadSpec { message } => write!(f, "bad shape spec: {message}"),
            ModelError::Invalid { message } => write!(f, "invalid model: {message}"),
        }
    }
}

impl std::error::Error for ModelError {}

/// Largest pairwise distance in the cloud, exact O(M^2) scan.
pub fn compute_diameter(points: &[Vec3]) -> Result<f64, ModelError> {
    if points.len() < 2 {
        return Err(ModelError::TooFewPoints { got: points.len() });
    }
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.max((points[i] - points[j]).norm_squared());
        }
    }
    Ok(best.sqrt())
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    symmetric: bool,
}

/// Loads an ASCII PLY point cloud.
///
/// `symmetric` overrides the flag; when `None` the `<name>.meta.json`
/// sidecar is consulted and the flag defaults to `false` without one.
/// Binary PLY is rejected. Extra vertex properties and trailing elements
/// (faces) are tolerated; points are returned in file order.
pub fn load_ply(path: &Path, symmetric: Option<bool>) -> Result<ObjectModel, ModelError> {
    let text = fs::read_to_string(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let points = parse_ply(&text)?;

    let symmetric = match symmetric {
        Some(flag) => flag,
        None => {
            let sidecar = path.with_extension("meta.json");
            if sidecar.exists() {
                let meta_text = fs::read_to_string(&sidecar).map_err(|e| ModelError::Io {
                    path: sidecar.clone(),
                    message: e.to_string(),
                })?;
                let meta: MetaFile =
                    serde_json::from_str(&meta_text).map_err(|e| ModelError::Io {
                        path: sidecar,
                        message: format!("bad sidecar: {e}"),
                    })?;
                meta.symmetric
            } else {
                false
            }
        }
    };

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    ObjectModel::new(id, points, symmetric).map_err(|e| ModelError::Invalid {
        message: e.to_string(),
    })
}

fn parse_ply(text: &str) -> Result<Vec<Vec3>, ModelError> {
    let err = |line: usize, message: &str| ModelError::Parse {
        line,
        message: message.to_string(),
    };

    let mut lines = text.lines().enumerate();
    let (_, magic) = lines.next().ok_or_else(|| err(1, "empty file"))?;
    if magic.trim() != "ply" {
        return Err(err(1, "missing 'ply' magic"));
    }

    let mut vertex_count: Option<usize> = None;
    let mut columns: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut saw_format = false;
    let mut header_end = 0usize;

    for (idx, raw) in &mut lines {
        let line_no = idx + 1;
        let line = raw.trim();
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                let kind = words.next().unwrap_or("");
                if kind != "ascii" {
                    return Err(err(line_no, "only ASCII PLY is supported"));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = words.next().unwrap_or("");
                let count: usize = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(line_no, "element needs a count"))?;
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(err(line_no, "duplicate vertex element"));
                    }
                    if !columns.is_empty() {
                        return Err(err(line_no, "vertex element must come first"));
                    }
                    vertex_count = Some(count);
                    in_vertex_element = true;
                } else {
                    if vertex_count.is_none() {
                        return Err(err(line_no, "vertex element must come first"));
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if in_vertex_element {
                    let ty = words.next().unwrap_or("");
                    if ty == "list" {
                        return Err(err(line_no, "list property not allowed on vertices"));
                    }
                    let name = words
                        .next()
                        .ok_or_else(|| err(line_no, "property needs a name"))?;
                    columns.push(name.to_string());
                }
            }
            Some("end_header") => {
                header_end = line_no;
                break;
            }
            Some(other) => {
                return Err(err(line_no, &format!("unexpected header token '{other}'")));
            }
            None => {}
        }
    }
    if header_end == 0 {
        return Err(err(1, "header never ended"));
    }
    if !saw_format {
        return Err(err(header_end, "missing format line"));
    }
    let count = vertex_count.ok_or_else(|| err(header_end, "no vertex element"))?;

    let x_col = column(&columns, "x", header_end)?;
    let y_col = column(&columns, "y", header_end)?;
    let z_col = column(&columns, "z", header_end)?;

    let mut points = Vec::with_capacity(count);
    for (idx, raw) in lines.by_ref().take(count) {
        let line_no = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() < columns.len() {
            return Err(err(
                line_no,
                &format!(
                    "expected {} vertex fields, found {}",
                    columns.len(),
                    fields.len()
                ),
            ));
        }
        let parse = |col: usize| -> Result<f64, ModelError> {
            fields[col]
                .parse::<f64>()
                .map_err(|_| err(line_no, &format!("bad float '{}'", fields[col])))
        };
        points.push(Vec3::new(parse(x_col)?, parse(y_col)?, parse(z_col)?));
    }
    if points.len() < count {
        return Err(ModelError::Parse {
            line: header_end + points.len() + 1,
            message: format!(
                "expected {count} vertex rows, file ended after {}",
                points.len()
            ),
        });
    }
    Ok(points)
}

fn column(columns: &[String], name: &str, header_line: usize) -> Result<usize, ModelError> {
    columns
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| ModelError::Parse {
            line: header_line,
            message: format!("vertex element lacks property '{name}'"),
        })
}

/// Writes the model as ASCII PLY plus its `.meta.json` sidecar.
///
/// Coordinates print with shortest round-trip formatting, so a save/load
/// cycle reproduces the points bit for bit.
pub fn save_ply(model: &ObjectModel, path: &Path) -> Result<(), ModelError> {
    let io_err = |e: std::io::Error| ModelError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", model.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in model.points() {
        out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)?;

    let sidecar = path.with_extension("meta.json");
    let meta = serde_json::to_string_pretty(&MetaFile {
        symmetric: model.symmetric(),
    })
    .expect("meta serializes");
    fs::write(&sidecar, meta).map_err(|e| ModelError::Io {
        path: sidecar,
        message: e.to_string(),
    })?;
    Ok(())
}

/// Shape family plus dimensions (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum ShapeKind {
    /// Right circular cylinder about the z axis, centered at the origin.
    Cylinder { radius: f64, height: f64 },
    /// Axis-aligned box centered at the origin.
    Box { dx: f64, dy: f64, dz: f64 },
    /// Random asymmetric cloud; `seed` fixes the shape identity.
    Blob { seed: u64 },
}

/// Synthetic model request: a shape and a target point budget.
///
/// The realized count can differ slightly from `n_points` because samples
/// are organized in complete symmetry orbits (whole rings and mirrored
/// grids).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapeSpec {
    #[serde(flatten)]
    pub kind: ShapeKind,
    pub n_points: usize,
}

impl SyntheticShapeSpec {
    fn validate(&self) -> Result<(), ModelError> {
        let bad = |message: String| Err(ModelError::BadSpec { message });
        if self.n_points < 8 {
            return bad(format!("n_points {} too small (need >= 8)", self.n_points));
        }
        match self.kind {
            ShapeKind::Cylinder { radius, height } => {
                if !(radius > 0.0 && height > 0.0) {
                    return bad(format!(
                        "cylinder dims must be positive: r={radius} h={height}"
                    ));
                }
            }
            ShapeKind::Box { dx, dy, dz } => {
                if !(dx > 0.0 && dy > 0.0 && dz > 0.0) {
                    return bad(format!("box dims must be positive: {dx} {dy} {dz}"));
                }
            }
            ShapeKind::Blob { .. } => {}
        }
        Ok(())
    }
}

/// Builds the synthetic model described by `spec`. Deterministic: the same
/// spec always yields the identical cloud.
pub fn generate(spec: &SyntheticShapeSpec) -> Result<ObjectModel, ModelError> {
    spec.validate()?;
    let (id, points, symmetric) = match spec.kind {
        ShapeKind::Cylinder { radius, height } => (
            format!("cylinder-r{radius}-h{height}-n{}", spec.n_points),
            cylinder_points(radius, height, spec.n_points),
            true,
        ),
        ShapeKind::Box { dx, dy, dz } => (
            format!("box-{dx}x{dy}x{dz}-n{}", spec.n_points),
            box_points(dx, dy, dz, spec.n_points),
            true,
        ),
        ShapeKind::Blob { seed } => (
            format!("blob-s{seed}-n{}", spec.n_points),
            blob_points(seed, spec.n_points),
            false,
        ),
    };
    ObjectModel::new(id, points, symmetric).map_err(|e| ModelError::Invalid {
        message: e.to_string(),
    })
}

/// The exact sampling symmetries of the generated cloud: rotations that map
/// the point set onto itself with zero error.
///
/// A cylinder's continuous axis symmetry appears as the discrete subgroup
/// realized by its ring pitch (plus the 180 degree flip); boxes report their
/// rotation group; blobs only the identity.
pub fn declared_symmetries(spec: &SyntheticShapeSpec) -> Vec<UnitQuaternion> {
    let x = Vec3::new(1.0, 0.0, 0.0);
    let y = Vec3::new(0.0, 1.0, 0.0);
    let z = Vec3::new(0.0, 0.0, 1.0);
    let mut generators = Vec::new();
    match spec.kind {
        ShapeKind::Cylinder { .. } => {
            let m = ring_count(spec.n_points);
            generators.push(UnitQuaternion::from_axis_angle(
                z,
                2.0 * std::f64::consts::PI / m as f64,
            ));
            generators.push(UnitQuaternion::from_axis_angle(x, std::f64::consts::PI));
        }
        ShapeKind::Box { dx, dy, dz } => {
            generators.push(UnitQuaternion::from_axis_angle(x, std::f64::consts::PI));
            generators.push(UnitQuaternion::from_axis_angle(y, std::f64::consts::PI));
            if dx == dy {
                generators.push(UnitQuaternion::from_axis_angle(
                    z,
                    std::f64::consts::FRAC_PI_2,
                ));
            }
            if dy == dz {
                generators.push(UnitQuaternion::from_axis_angle(
                    x,
                    std::f64::consts::FRAC_PI_2,
                ));
            }
            if dx == dz {
                generators.push(UnitQuaternion::from_axis_angle(
                    y,
                    std::f64::consts::FRAC_PI_2,
                ));
            }
        }
        ShapeKind::Blob { .. } => {}
    }
    close_group(generators)
}

/// Chord distance between quaternions, sign-blind. Stays precise for
/// near-identical rotations where the geodesic angle bottoms out at the
/// acos resolution limit (~1e-8), which matters for deduplication.
fn quat_gap(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    let [aw, ax, ay, az] = a.wxyz();
    let [bw, bx, by, bz] = b.wxyz();
    let diff =
        ((aw - bw).powi(2) + (ax - bx).powi(2) + (ay - by).powi(2) + (az - bz).powi(2)).sqrt();
    let sum =
        ((aw + bw).powi(2) + (ax + bx).powi(2) + (ay + by).powi(2) + (az + bz).powi(2)).sqrt();
    diff.min(sum)
}

/// Closure of a generator list under composition (small groups only).
fn close_group(generators: Vec<UnitQuaternion>) -> Vec<UnitQuaternion> {
    let mut members = vec![UnitQuaternion::identity()];
    loop {
        let mut grew = false;
        let snapshot = members.clone();
        for m in &snapshot {
            for g in &generators {
                let c = g.compose(m);
                if !members.iter().any(|q| quat_gap(q, &c) < 1e-9) {
                    members.push(c);
                    grew = true;
                }
            }
        }
        if !grew {
            return members;
        }
        assert!(members.len() <= 256, "symmetry closure ran away");
    }
}

/// Points per ring for cylinder sampling: a power of two that scales with
/// the budget, between 8 and 128.
fn ring_count(n_points: usize) -> usize {
    let mut m = 8;
    while m * 2 <= (n_points / 10).max(8) && m * 2 <= 128 {
        m *= 2;
    }
    m
}

fn cylinder_points(radius: f64, height: f64, n_points: usize) -> Vec<Vec3> {
    let m = ring_count(n_points);
    let lateral_area = 2.0 * std::f64::consts::PI * radius * height;
    let cap_area = 2.0 * std::f64::consts::PI * radius * radius;
    let lateral_share = lateral_area / (lateral_area + cap_area);

    let lateral_rows = (((n_points as f64 * lateral_share) / m as f64).round() as usize).max(2);
    let cap_rings =
        ((n_points as f64 * (1.0 - lateral_share) / 2.0 / m as f64).round() as usize).max(1);

    let mut points = Vec::new();
    // Lateral surface: rows of rings, z levels symmetric about the center.
    for row in 0..lateral_rows {
        let zc = height * ((row as f64 + 0.5) / lateral_rows as f64 - 0.5);
        push_ring(&mut points, radius, zc, m);
    }
    // Caps: concentric rings with area-uniform radii, same angular grid.
    for ring in 0..cap_rings {
        let rc = radius * (((ring as f64 + 0.5) / cap_rings as f64).sqrt());
        push_ring(&mut points, rc, height / 2.0, m);
        push_ring(&mut points, rc, -height / 2.0, m);
    }
    points
}

fn push_ring(points: &mut Vec<Vec3>, radius: f64, zc: f64, m: usize) {
    for k in 0..m {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
        points.push(Vec3::new(radius * theta.cos(), radius * theta.sin(), zc));
    }
}

fn box_points(dx: f64, dy: f64, dz: f64, n_points: usize) -> Vec<Vec3> {
    // Per-face-pair budgets proportional to area.
    let area_z = dx * dy;
    let area_x = dy * dz;
    let area_y = dx * dz;
    let total = 2.0 * (area_z + area_x + area_y);
    let per_face = |area: f64| (n_points as f64 * area / total).max(1.0);

    // Grid dims for a du x dv face holding roughly `count` points.
    let dims = |du: f64, dv: f64, count: f64| -> (usize, usize) {
        let g1 = ((count * du / dv).sqrt().round() as usize).max(1);
        let g2 = ((count / g1 as f64).round() as usize).max(1);
        (g1, g2)
    };

    // Symmetry ties: a quarter turn about an axis with a square cross
    // section maps faces onto faces, so the grids it identifies must agree.
    // Each tie raises both sides to the max; a few passes reach a fixpoint
    // (the cube ends with all six faces on the same square grid).
    let (mut zx, mut zy) = dims(dx, dy, per_face(area_z));
    let (mut xa, mut xb) = dims(dy, dz, per_face(area_x));
    let (mut ya, mut yb) = dims(dx, dz, per_face(area_y));
    for _ in 0..3 {
        let tie = |a: &mut usize, b: &mut usize| {
            let g = (*a).max(*b);
            *a = g;
            *b = g;
        };
        if dx == dy {
            tie(&mut zx, &mut zy);
            tie(&mut ya, &mut xa);
            tie(&mut yb, &mut xb);
        }
        if dy == dz {
            tie(&mut xa, &mut xb);
            tie(&mut ya, &mut zx);
            tie(&mut yb, &mut zy);
        }
        if dx == dz {
            tie(&mut ya, &mut yb);
            tie(&mut zy, &mut xa);
            tie(&mut zx, &mut xb);
        }
    }

    let grid = |g: usize, d: f64, i: usize| d * ((i as f64 + 0.5) / g as f64 - 0.5);

    let mut points = Vec::new();
    for side in [-0.5, 0.5] {
        // z faces: vary x, y.
        for i in 0..zx {
            for j in 0..zy {
                points.push(Vec3::new(grid(zx, dx, i), grid(zy, dy, j), side * dz));
            }
        }
        // x faces: vary y, z.
        for i in 0..xa {
            for j in 0..xb {
                points.push(Vec3::new(side * dx, grid(xa, dy, i), grid(xb, dz, j)));
            }
        }
        // y faces: vary x, z.
        for i in 0..ya {
            for j in 0..yb {
                points.push(Vec3::new(grid(ya, dx, i), side * dy, grid(yb, dz, j)));
            }
        }
    }
    points
}

fn blob_points(seed: u64, n_points: usize) -> Vec<Vec3> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let mut rng = substream(seed, "blob-shape", 0);
    let mut points = Vec::with_capacity(n_points);
    while points.len() < n_points {
        let g = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if g.norm() < 1e-6 {
            continue;
        }
        let dir = g / g.norm();
        let radius = 0.05 + 0.05 * rng.random::<f64>();
        // Anisotropic stretch keeps the cloud asymmetric.
        let p = Vec3::new(dir.x * radius, dir.y * radius * 0.85, dir.z * radius * 0.7);
        points.push(p);
    }
    points
}
