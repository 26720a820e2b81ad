//! Discrete rotation anchors.
//!
//! An anchor set is a finite rotation group used to quantize SO(3): a
//! regressor (or, here, a descent fitter) only ever has to express a small
//! deviation from the nearest anchor instead of an arbitrary rotation, which
//! removes the long-range local optima that plague direct rotation fitting on
//! symmetric objects.
//!
//! Three groups are provided, the rotation groups of the tetrahedron (12
//! elements), the octahedron (24) and the icosahedron (60). Each is closed
//! under composition, so the Voronoi cells around the anchors are congruent
//! and the quantization error is uniform over SO(3).

use std::fmt;

use rand::Rng;

use crate::rng::substream;
use crate::so3::{random_rotation, UnitQuaternion};

/// Golden ratio, used by the icosahedral construction.
const PHI: f64 = 1.618_033_988_749_895;

/// Number of Monte-Carlo samples behind the `covering_radius` field of a
/// freshly generated [`AnchorSet`].
const DEFAULT_COVERING_SAMPLES: usize = 100_000;

/// Which finite rotation group to use as the anchor set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorGroupKind {
    Tetra12,
    Octa24,
    Icosa60,
}

impl AnchorGroupKind {
    /// Group order.
    pub fn len(self) -> usize {
        match self {
            AnchorGroupKind::Tetra12 => 12,
            AnchorGroupKind::Octa24 => 24,
            AnchorGroupKind::Icosa60 => 60,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Stable lower-case name, used by CLI flags and serialized reports.
    pub fn name(self) -> &'static str {
        match self {
            AnchorGroupKind::Tetra12 => "tetra12",
            AnchorGroupKind::Octa24 => "octa24",
            AnchorGroupKind::Icosa60 => "icosa60",
        }
    }

    pub fn all() -> [AnchorGroupKind; 3] {
        [
            AnchorGroupKind::Tetra12,
            AnchorGroupKind::Octa24,
            AnchorGroupKind::Icosa60,
        ]
    }
}

impl fmt::Display for AnchorGroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AnchorGroupKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tetra12" => Ok(AnchorGroupKind::Tetra12),
            "octa24" => Ok(AnchorGroupKind::Octa24),
            "icosa60" => Ok(AnchorGroupKind::Icosa60),
            other => Err(format!(
                "unknown anchor group '{other}' (expected tetra12, octa24 or icosa60)"
            )),
        }
    }
}

/// A generated anchor group.
///
/// Members are canonical unit quaternions with the identity at index 0 and
/// the remaining members sorted lexicographically by `(w, x, y, z)`, so the
/// index of an anchor is stable across runs and platforms.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    kind: AnchorGroupKind,
    quats: Vec<UnitQuaternion>,
    min_pairwise_angle: f64,
    covering_radius: f64,
}

impl AnchorSet {
    pub fn kind(&self) -> AnchorGroupKind {
        self.kind
    }

    pub fn quats(&self) -> &[UnitQuaternion] {
        &self.quats
    }

    pub fn len(&self) -> usize {
        self.quats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quats.is_empty()
    }

    /// Smallest geodesic angle between two distinct members, exact.
    pub fn min_pairwise_angle(&self) -> f64 {
        self.min_pairwise_angle
    }

    /// Monte-Carlo estimate of the covering radius computed at generation
    /// time (fixed internal seed, 1e5 samples). See [`covering_radius`] for a
    /// caller-controlled estimate.
    pub fn covering_radius(&self) -> f64 {
        self.covering_radius
    }

    /// Index of the member closest to `q` in geodesic angle; ties resolve to
    /// the lowest index.
    ///
    /// Geodesic angle is monotone in `|<q, anchor>|`, so the scan maximizes
    /// the absolute dot product.
    pub fn nearest_anchor(&self, q: &UnitQuaternion) -> usize {
        let mut best = 0usize;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, anchor) in self.quats.iter().enumerate() {
            let d = q.dot(anchor).abs();
            if d > best_dot {
                best_dot = d;
                best = i;
            }
        }
        best
    }
}

/// Builds the anchor group of the requested kind.
///
/// The construction is exact (square roots and the golden ratio, no
/// iteration); closure under composition and the expected group order are
/// verified before returning, so a corrupted table cannot escape.
pub fn generate(kind: AnchorGroupKind) -> AnchorSet {
    let mut quats = match kind {
        AnchorGroupKind::Tetra12 => tetrahedral(),
        AnchorGroupKind::Octa24 => octahedral(),
        AnchorGroupKind::Icosa60 => icosahedral(),
    };

    // Canonical order: identity first, the rest lexicographic on (w, x, y, z).
    quats.sort_by(|a, b| a.wxyz().partial_cmp(&b.wxyz()).unwrap());
    quats.dedup_by(|a, b| a.geodesic_angle(b) < 1e-9);
    let id_pos = quats
        .iter()
        .position(|q| q.geodesic_angle(&UnitQuaternion::identity()) < 1e-9)
        .expect("anchor group must contain the identity");
    let id = quats.remove(id_pos);
    quats.insert(0, id);

    assert_eq!(quats.len(), kind.len(), "anchor group has the wrong order");
    assert_closed(&quats);

    let min_pairwise_angle = min_pairwise_angle_of(&quats);
    let mut rng = substream(0, "anchor-covering", kind.len() as u64);
    let covering_radius = covering_estimate(&quats, DEFAULT_COVERING_SAMPLES, &mut rng);

    AnchorSet {
        kind,
        quats,
        min_pairwise_angle,
        covering_radius,
    }
}

/// Smallest geodesic angle over all distinct member pairs.
pub fn min_pairwise_angle(set: &AnchorSet) -> f64 {
    min_pairwise_angle_of(&set.quats)
}

/// Monte-Carlo covering radius: the largest distance from a uniformly random
/// rotation to its nearest anchor, maximized over `samples` draws.
///
/// At least 1e5 samples are required for the estimate to be meaningful.
pub fn covering_radius<R: Rng + ?Sized>(set: &AnchorSet, samples: usize, rng: &mut R) -> f64 {
    assert!(samples >= 100_000, "covering radius needs >= 1e5 samples");
    covering_estimate(&set.quats, samples, rng)
}

fn covering_estimate<R: Rng + ?Sized>(
    quats: &[UnitQuaternion],
    samples: usize,
    rng: &mut R,
) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let q = random_rotation(rng);
        // Max |dot| over members == min geodesic angle.
        let mut best = 0.0f64;
        for anchor in quats {
            best = best.max(q.dot(anchor).abs());
        }
        worst = worst.max(2.0 * best.min(1.0).acos());
    }
    worst
}

fn min_pairwise_angle_of(quats: &[UnitQuaternion]) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..quats.len() {
        for j in (i + 1)..quats.len() {
            min = min.min(quats[i].geodesic_angle(&quats[j]));
        }
    }
    min
}

/// Panics unless every pairwise composition lands back on a member.
fn assert_closed(quats: &[UnitQuaternion]) {
    for a in quats {
        for b in quats {
            let c = a.compose(b);
            let closed = quats.iter().any(|m| c.geodesic_angle(m) < 1e-9);
            assert!(closed, "anchor group is not closed under composition");
        }
    }
}

fn q(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion {
    UnitQuaternion::new_normalize(w, x, y, z).unwrap()
}

/// Rotation group of the tetrahedron: identity, three half turns about the
/// coordinate axes, eight +-120 deg turns about the cube diagonals.
fn tetrahedral() -> Vec<UnitQuaternion> {
    let mut out = vec![
        q(1.0, 0.0, 0.0, 0.0),
        q(0.0, 1.0, 0.0, 0.0),
        q(0.0, 0.0, 1.0, 0.0),
        q(0.0, 0.0, 0.0, 1.0),
    ];
    for sx in [-0.5, 0.5] {
        for sy in [-0.5, 0.5] {
            for sz in [-0.5, 0.5] {
                out.push(q(0.5, sx, sy, sz));
            }
        }
    }
    out
}

/// Rotation group of the octahedron: the tetrahedral group plus quarter
/// turns about the coordinate axes and half turns about the edge diagonals.
fn octahedral() -> Vec<UnitQuaternion> {
    let mut out = tetrahedral();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for sign in [-s, s] {
        out.push(q(s, sign, 0.0, 0.0));
        out.push(q(s, 0.0, sign, 0.0));
        out.push(q(s, 0.0, 0.0, sign));
        out.push(q(0.0, s, sign, 0.0));
        out.push(q(0.0, 0.0, s, sign));
        out.push(q(0.0, s, 0.0, sign));
    }
    out
}

/// Rotation group of the icosahedron via the binary icosahedral group: the
/// 120 icosian quaternions collapse to 60 rotations on the canonical
/// hemisphere.
fn icosahedral() -> Vec<UnitQuaternion> {
    let mut out = Vec::with_capacity(120);
    // 8 unit quaternions (+-1 in a single slot).
    for slot in 0..4 {
        for sign in [-1.0, 1.0] {
            let mut c = [0.0; 4];
            c[slot] = sign;
            out.push(q(c[0], c[1], c[2], c[3]));
        }
    }
    // 16 half-integer quaternions.
    for sw in [-0.5, 0.5] {
        for sx in [-0.5, 0.5] {
            for sy in [-0.5, 0.5] {
                for sz in [-0.5, 0.5] {
                    out.push(q(sw, sx, sy, sz));
                }
            }
        }
    }
    // 96 even permutations of (0, +-1/2, +-1/(2 phi), +-phi/2).
    let base = [0.0, 0.5, 0.5 / PHI, 0.5 * PHI];
    for perm in even_permutations() {
        for mask in 0..8u32 {
            let mut c = [0.0; 4];
            let mut bit = 0;
            for slot in 0..4 {
                let v = base[perm[slot]];
                if v == 0.0 {
                    c[slot] = 0.0;
                } else {
                    c[slot] = if mask & (1 << bit) != 0 { -v } else { v };
                    bit += 1;
                }
            }
            out.push(q(c[0], c[1], c[2], c[3]));
        }
    }
    out
}

/// The twelve even permutations of four slots.
fn even_permutations() -> Vec<[usize; 4]> {
    let mut perms = Vec::with_capacity(12);
    let mut items = [0usize, 1, 2, 3];
    permute(&mut items, 0, &mut perms);
    perms.retain(|p| parity(p) == 0);
    assert_eq!(perms.len(), 12);
    perms
}

fn permute(items: &mut [usize; 4], k: usize, out: &mut Vec<[usize; 4]>) {
    if k == 4 {
        out.push(*items);
        return;
    }
    for i in k..4 {
        items.swap(k, i);
        permute(items, k + 1, out);
        items.swap(k, i);
    }
}

fn parity(p: &[usize; 4]) -> usize {
    let mut inversions = 0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            if p[i] > p[j] {
                inversions += 1;
            }
        }
    }
    inversions % 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::Vec3;
    use std::f64::consts::PI;

    // Exact minimum pairwise angles: the smallest nontrivial rotation in each
    // group (120, 90 and 72 degrees).
    const TETRA_MIN: f64 = 2.0 * PI / 3.0;
    const OCTA_MIN: f64 = PI / 2.0;
    const ICOSA_MIN: f64 = 2.0 * PI / 5.0;

    #[test]
    fn group_orders_and_identity_slot() {
        for kind in AnchorGroupKind::all() {
            let set = generate(kind);
            assert_eq!(set.len(), kind.len());
            assert_eq!(set.quats()[0], UnitQuaternion::identity());
            // Canonical members, sorted after the identity.
            for w in set.quats().windows(2).skip(1) {
                assert!(w[0].wxyz() < w[1].wxyz());
            }
        }
    }

    #[test]
    fn min_pairwise_angles_are_exact() {
        let cases = [
            (AnchorGroupKind::Tetra12, TETRA_MIN),
            (AnchorGroupKind::Octa24, OCTA_MIN),
            (AnchorGroupKind::Icosa60, ICOSA_MIN),
        ];
        for (kind, expected) in cases {
            let set = generate(kind);
            assert!(
                (set.min_pairwise_angle() - expected).abs() < 1e-9,
                "{kind}: {} vs {expected}",
                set.min_pairwise_angle()
            );
            assert!((min_pairwise_angle(&set) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn groups_are_vertex_transitive() {
        // The sorted list of angles from a member to everyone else must be
        // the same for every member.
        for kind in AnchorGroupKind::all() {
            let set = generate(kind);
            let profile = |i: usize| -> Vec<f64> {
                let mut row: Vec<f64> = set
                    .quats()
                    .iter()
                    .map(|q| set.quats()[i].geodesic_angle(q))
                    .collect();
                row.sort_by(|a, b| a.partial_cmp(b).unwrap());
                row
            };
            let reference = profile(0);
            for i in 1..set.len() {
                let row = profile(i);
                for (a, b) in reference.iter().zip(&row) {
                    assert!((a - b).abs() < 1e-9, "{kind}: member {i} profile differs");
                }
            }
        }
    }

    #[test]
    fn members_are_their_own_nearest_anchor() {
        for kind in AnchorGroupKind::all() {
            let set = generate(kind);
            for (i, anchor) in set.quats().iter().enumerate() {
                assert_eq!(set.nearest_anchor(anchor), i);
            }
        }
    }

    #[test]
    fn small_perturbations_stay_in_the_cell() {
        // 5 degrees is far inside every cell (smallest half-spacing is 36).
        let mut rng = substream(11, "anchor-perturb", 0);
        for kind in AnchorGroupKind::all() {
            let set = generate(kind);
            for (i, anchor) in set.quats().iter().enumerate() {
                let axis = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if axis.norm() < 1e-3 {
                    continue;
                }
                let wobble = UnitQuaternion::from_axis_angle(axis, 5.0f64.to_radians());
                assert_eq!(set.nearest_anchor(&wobble.compose(anchor)), i);
            }
        }
    }

    #[test]
    fn nearest_anchor_matches_brute_force_scan() {
        let set = generate(AnchorGroupKind::Icosa60);
        let mut rng = substream(11, "anchor-nearest", 0);
        for _ in 0..10_000 {
            let s = random_rotation(&mut rng);
            let fast = set.nearest_anchor(&s);
            let (mut slow, mut best) = (0usize, f64::INFINITY);
            for (i, anchor) in set.quats().iter().enumerate() {
                let d = s.geodesic_angle(anchor);
                if d < best {
                    best = d;
                    slow = i;
                }
            }
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn left_multiplication_permutes_nearest_indices() {
        // Composing with a group member relabels the cells but never moves a
        // query across a cell boundary.
        let set = generate(AnchorGroupKind::Octa24);
        let g = set.quats()[7];
        let perm: Vec<usize> = set
            .quats()
            .iter()
            .map(|anchor| set.nearest_anchor(&g.compose(anchor)))
            .collect();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..set.len()).collect::<Vec<_>>());

        let mut rng = substream(11, "anchor-leftmul", 0);
        for _ in 0..500 {
            let s = random_rotation(&mut rng);
            let before = set.nearest_anchor(&s);
            let after = set.nearest_anchor(&g.compose(&s));
            assert_eq!(after, perm[before]);
        }
    }

    #[test]
    fn covering_radius_shrinks_with_group_order() {
        let tetra = generate(AnchorGroupKind::Tetra12);
        let octa = generate(AnchorGroupKind::Octa24);
        let icosa = generate(AnchorGroupKind::Icosa60);
        assert!(tetra.covering_radius() > octa.covering_radius());
        assert!(octa.covering_radius() > icosa.covering_radius());
        // Icosahedral covering radius is about 44.5 degrees.
        assert!((icosa.covering_radius().to_degrees() - 44.5).abs() < 2.0);

        for set in [&tetra, &octa, &icosa] {
            let r = set.covering_radius();
            assert!(r <= PI);
            // Packing bound: can't cover with less than half the spacing.
            assert!(r >= set.min_pairwise_angle() / 2.0 - 0.05);
        }
    }

    #[test]
    fn covering_radius_estimate_is_stable_across_sample_counts() {
        let set = generate(AnchorGroupKind::Tetra12);
        let mut rng = substream(3, "anchor-cov", 0);
        let a = covering_radius(&set, 100_000, &mut rng);
        let mut rng = substream(4, "anchor-cov", 1);
        let b = covering_radius(&set, 150_000, &mut rng);
        assert!((a - b).abs() < 0.03, "estimates drifted: {a} vs {b}");
    }
}
