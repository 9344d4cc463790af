//! Domains, potentials and the uniform samplers behind every Monte Carlo
//! estimate.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

/// Samples landing closer than this to the origin of a ball are redrawn, so
/// singular potentials like `c²/|x|²` stay finite on every batch. The excluded
/// volume is far below sampling resolution.
pub const ORIGIN_EXCLUSION: f64 = 1e-8;

/// Consecutive rejection-sampling failures tolerated before a region is
/// declared degenerate.
pub const REJECTION_CAP: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("inverse-square potential evaluated at the singular point |x| = 0")]
    SingularPoint,
    #[error("rejection sampling exceeded {REJECTION_CAP} consecutive rejections (degenerate region)")]
    RejectionCap,
    #[error("dimension mismatch: domain is {expected}-dimensional, point is {got}-dimensional")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A computational domain with homogeneous Dirichlet boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// The open hypercube `(lo, hi)^d`.
    Hypercube { lo: f64, hi: f64, dim: usize },
    /// The open ball `|x| < radius` in three dimensions.
    Ball { radius: f64 },
    /// The open spherical shell `r_inner < |x| < r_outer` in three dimensions.
    Shell { r_inner: f64, r_outer: f64 },
}

impl Domain {
    pub fn hypercube(lo: f64, hi: f64, dim: usize) -> Result<Self, ProblemError> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(ProblemError::InvalidDomain(format!(
                "hypercube needs lo < hi, got ({lo}, {hi})"
            )));
        }
        if dim == 0 {
            return Err(ProblemError::InvalidDomain("dimension must be positive".into()));
        }
        Ok(Domain::Hypercube { lo, hi, dim })
    }

    pub fn ball(radius: f64) -> Result<Self, ProblemError> {
        if !(radius > 0.0) {
            return Err(ProblemError::InvalidDomain(format!(
                "ball needs radius > 0, got {radius}"
            )));
        }
        Ok(Domain::Ball { radius })
    }

    pub fn shell(r_inner: f64, r_outer: f64) -> Result<Self, ProblemError> {
        if !(0.0 < r_inner && r_inner < r_outer) {
            return Err(ProblemError::InvalidDomain(format!(
                "shell needs 0 < r_inner < r_outer, got ({r_inner}, {r_outer})"
            )));
        }
        Ok(Domain::Shell { r_inner, r_outer })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Hypercube { dim, .. } => *dim,
            Domain::Ball { .. } | Domain::Shell { .. } => 3,
        }
    }

    /// Strict interior membership. Boundary points report non-membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        match self {
            Domain::Hypercube { lo, hi, .. } => x.iter().all(|&xi| *lo < xi && xi < *hi),
            Domain::Ball { radius } => norm_sq(x) < radius * radius,
            Domain::Shell { r_inner, r_outer } => {
                let r2 = norm_sq(x);
                r_inner * r_inner < r2 && r2 < r_outer * r_outer
            }
        }
    }

    /// Axis-aligned bounding box used by the rejection sampler.
    fn bounding_box(&self) -> (f64, f64) {
        match self {
            Domain::Hypercube { lo, hi, .. } => (*lo, *hi),
            Domain::Ball { radius } => (-radius, *radius),
            Domain::Shell { r_outer, .. } => (-r_outer, *r_outer),
        }
    }
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// 1-D factor of a separable potential, used by the spectral reference solver.
pub type AxisPotential = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Potential term of the Schrödinger operator.
#[derive(Clone)]
pub enum Potential {
    Zero,
    Constant(f64),
    /// `V(x) = (1/d) Σ_i cos(π x_i + π)`; values lie in `[-1, 1]`.
    SeparableCosine,
    /// `V(x) = c² / |x|²`; admissible on domains excluding the origin, or on
    /// the ball with origin-exclusion handling in the sampler.
    InverseSquare { c: f64 },
    /// `V(x) = Σ_i v_i(x_i)` for user-supplied 1-D factors.
    CustomSeparable(Vec<AxisPotential>),
}

impl std::fmt::Debug for Potential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Potential::Zero => write!(f, "Zero"),
            Potential::Constant(c) => write!(f, "Constant({c})"),
            Potential::SeparableCosine => write!(f, "SeparableCosine"),
            Potential::InverseSquare { c } => write!(f, "InverseSquare {{ c: {c} }}"),
            Potential::CustomSeparable(v) => write!(f, "CustomSeparable({} axes)", v.len()),
        }
    }
}

impl Potential {
    /// Evaluates `V(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<f64, ProblemError> {
        match self {
            Potential::Zero => Ok(0.0),
            Potential::Constant(c) => Ok(*c),
            Potential::SeparableCosine => {
                let d = x.len() as f64;
                Ok(x.iter()
                    .map(|&xi| (std::f64::consts::PI * xi + std::f64::consts::PI).cos())
                    .sum::<f64>()
                    / d)
            }
            Potential::InverseSquare { c } => {
                let r2 = norm_sq(x);
                if r2 == 0.0 {
                    return Err(ProblemError::SingularPoint);
                }
                Ok(c * c / r2)
            }
            Potential::CustomSeparable(axes) => {
                if axes.len() != x.len() {
                    return Err(ProblemError::DimensionMismatch {
                        expected: axes.len(),
                        got: x.len(),
                    });
                }
                Ok(axes.iter().zip(x).map(|(v, &xi)| v(xi)).sum())
            }
        }
    }

    /// The 1-D factor on axis `i` when the potential is separable over a
    /// `dim`-dimensional hypercube; `None` for non-separable kinds.
    pub fn axis_factor(&self, i: usize, dim: usize) -> Option<AxisPotential> {
        match self {
            Potential::Zero => Some(Arc::new(|_| 0.0)),
            // constant split evenly across axes so the axis sums reproduce it
            Potential::Constant(c) => {
                let share = *c / dim as f64;
                Some(Arc::new(move |_| share))
            }
            Potential::SeparableCosine => {
                let inv_d = 1.0 / dim as f64;
                Some(Arc::new(move |t: f64| {
                    inv_d * (std::f64::consts::PI * t + std::f64::consts::PI).cos()
                }))
            }
            Potential::InverseSquare { .. } => None,
            Potential::CustomSeparable(axes) => axes.get(i).cloned(),
        }
    }

    pub fn is_separable(&self) -> bool {
        !matches!(self, Potential::InverseSquare { .. })
    }

    /// Lower bound of `V` over the domain (used by a-priori checks).
    pub fn min_bound(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Constant(c) => *c,
            Potential::SeparableCosine => -1.0,
            Potential::InverseSquare { .. } => 0.0,
            Potential::CustomSeparable(_) => f64::NEG_INFINITY,
        }
    }
}

/// A batch of points with the sampling metadata needed to regenerate it.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    points: Vec<f64>,
    n: usize,
    dim: usize,
    pub seed: u64,
    pub region: Domain,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn raw(&self) -> &[f64] {
        &self.points
    }

    /// Wraps explicit points (quadrature grids, test fixtures) in a batch.
    pub fn from_points(points: Vec<f64>, dim: usize, region: Domain) -> Self {
        assert!(points.len().is_multiple_of(dim));
        let n = points.len() / dim;
        SampleBatch { points, n, dim, seed: 0, region }
    }
}

fn uniform_01(rng: &mut ChaCha8Rng) -> f64 {
    // 53 uniform bits; deterministic across platforms
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Box-Muller; u1 bounded away from 0 so the log stays finite
    let u1 = uniform_01(rng).max(1e-300);
    let u2 = uniform_01(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * std::f64::consts::PI * u2;
    (r * t.cos(), r * t.sin())
}

/// Draws `n` i.i.d. points uniform on the interior of `region`.
///
/// Ball and shell sampling rejects from the bounding box, so the points are
/// uniform with respect to Lebesgue measure on the region. Equal
/// `(seed, n, region)` always produces a bit-identical batch.
pub fn sample_interior(region: &Domain, n: usize, seed: u64) -> Result<SampleBatch, ProblemError> {
    assert!(n >= 1, "sample_interior needs n >= 1");
    let dim = region.dim();
    let (lo, hi) = region.bounding_box();
    let width = hi - lo;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n * dim);
    let mut candidate = vec![0.0; dim];
    for _ in 0..n {
        let mut rejections: u64 = 0;
        loop {
            for c in candidate.iter_mut() {
                *c = lo + width * uniform_01(&mut rng);
            }
            if region.contains(&candidate) && !too_close_to_origin(region, &candidate) {
                break;
            }
            rejections += 1;
            if rejections >= REJECTION_CAP {
                return Err(ProblemError::RejectionCap);
            }
        }
        points.extend_from_slice(&candidate);
    }
    Ok(SampleBatch { points, n, dim, seed, region: region.clone() })
}

fn too_close_to_origin(region: &Domain, x: &[f64]) -> bool {
    match region {
        Domain::Ball { .. } => norm_sq(x) < ORIGIN_EXCLUSION * ORIGIN_EXCLUSION,
        _ => false,
    }
}

/// Draws `n` points uniform on the boundary `∂Ω`.
///
/// Hypercube: one of the `2d` (equal-area) faces uniformly, then uniform on
/// the face. Ball/shell: isotropic direction scaled to the sphere radius, the
/// shell component chosen proportional to its area.
pub fn sample_boundary(region: &Domain, n: usize, seed: u64) -> SampleBatch {
    assert!(n >= 1, "sample_boundary needs n >= 1");
    let dim = region.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n * dim);
    match region {
        Domain::Hypercube { lo, hi, dim } => {
            let width = hi - lo;
            for _ in 0..n {
                let face = (rng.next_u64() % (2 * dim) as u64) as usize;
                let axis = face / 2;
                for a in 0..*dim {
                    if a == axis {
                        points.push(if face % 2 == 0 { *lo } else { *hi });
                    } else {
                        points.push(lo + width * uniform_01(&mut rng));
                    }
                }
            }
        }
        Domain::Ball { radius } => {
            for _ in 0..n {
                let dir = isotropic_direction(&mut rng);
                let p = sphere_point(dir, *radius, region, false);
                points.extend_from_slice(&p);
            }
        }
        Domain::Shell { r_inner, r_outer } => {
            let outer_area = r_outer * r_outer;
            let p_outer = outer_area / (outer_area + r_inner * r_inner);
            for _ in 0..n {
                let outer = uniform_01(&mut rng) < p_outer;
                let r = if outer { *r_outer } else { *r_inner };
                let dir = isotropic_direction(&mut rng);
                let p = sphere_point(dir, r, region, !outer);
                points.extend_from_slice(&p);
            }
        }
    }
    SampleBatch { points, n, dim, seed, region: region.clone() }
}

/// Scales a unit direction to the sphere of radius `r`, nudging by machine
/// epsilons until the point reports non-membership (`|x| = r` cannot be hit
/// exactly in floating point; `inward` selects which side of the sphere is
/// exterior to the region).
fn sphere_point(dir: [f64; 3], r: f64, region: &Domain, inward: bool) -> [f64; 3] {
    let mut p = [dir[0] * r, dir[1] * r, dir[2] * r];
    let step = if inward { 1.0 - 2.0 * f64::EPSILON } else { 1.0 + 2.0 * f64::EPSILON };
    while region.contains(&p) {
        for c in p.iter_mut() {
            *c *= step;
        }
    }
    p
}

fn isotropic_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let (g0, g1) = gaussian_pair(rng);
        let (g2, _) = gaussian_pair(rng);
        let norm = (g0 * g0 + g1 * g1 + g2 * g2).sqrt();
        if norm > 1e-12 {
            return [g0 / norm, g1 / norm, g2 / norm];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn potential_examples() {
        assert_eq!(Potential::Zero.eval(&[0.3, 0.7]).unwrap(), 0.0);
        let v = Potential::SeparableCosine.eval(&[0.0; 5]).unwrap();
        assert_relative_eq!(v, -1.0, epsilon = 1e-15);
        let v = Potential::InverseSquare { c: 1.0 / 3.0 }.eval(&[1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(v, 1.0 / 9.0, epsilon = 1e-15);
        assert!(matches!(
            Potential::InverseSquare { c: 1.0 }.eval(&[0.0, 0.0, 0.0]),
            Err(ProblemError::SingularPoint)
        ));
    }

    #[test]
    fn separable_cosine_within_unit_range() {
        let dom = Domain::hypercube(-1.0, 1.0, 4).unwrap();
        let batch = sample_interior(&dom, 1000, 7).unwrap();
        for p in batch.iter() {
            let v = Potential::SeparableCosine.eval(p).unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn domain_validation() {
        assert!(Domain::hypercube(1.0, 0.0, 2).is_err());
        assert!(Domain::ball(0.0).is_err());
        assert!(Domain::shell(0.5, 0.5).is_err());
        assert!(Domain::shell(0.0, 1.0).is_err());
    }

    #[test]
    fn interior_mean_matches_law_of_large_numbers() {
        let dom = Domain::hypercube(0.0, 1.0, 2).unwrap();
        let batch = sample_interior(&dom, 100_000, 42).unwrap();
        for axis in 0..2 {
            let mean: f64 =
                batch.iter().map(|p| p[axis]).sum::<f64>() / batch.len() as f64;
            assert!((mean - 0.5).abs() < 0.01, "axis {axis} mean {mean}");
        }
    }

    #[test]
    fn ball_radius_cubed_is_uniform() {
        // for uniform sampling on the unit ball, |x|^3 ~ U(0,1)
        let dom = Domain::ball(1.0).unwrap();
        let batch = sample_interior(&dom, 100_000, 3).unwrap();
        let mean: f64 = batch
            .iter()
            .map(|p| norm_sq(p).sqrt().powi(3))
            .sum::<f64>()
            / batch.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean |x|^3 = {mean}");
    }

    #[test]
    fn seed_determinism_bit_exact() {
        let dom = Domain::shell(0.5, 1.0).unwrap();
        let a = sample_interior(&dom, 1, 99).unwrap();
        let b = sample_interior(&dom, 1, 99).unwrap();
        assert_eq!(a.raw(), b.raw());
        let big_a = sample_interior(&dom, 500, 7).unwrap();
        let big_b = sample_interior(&dom, 500, 7).unwrap();
        assert!(big_a.raw().iter().zip(big_b.raw()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn interior_points_pass_membership() {
        for dom in [
            Domain::hypercube(-1.0, 1.0, 3).unwrap(),
            Domain::ball(1.0).unwrap(),
            Domain::shell(0.5, 1.0).unwrap(),
        ] {
            let batch = sample_interior(&dom, 2000, 11).unwrap();
            assert!(batch.iter().all(|p| dom.contains(p)));
        }
    }

    #[test]
    fn boundary_points_fail_membership() {
        for dom in [
            Domain::hypercube(0.0, 1.0, 2).unwrap(),
            Domain::ball(1.0).unwrap(),
            Domain::shell(0.5, 1.0).unwrap(),
        ] {
            let batch = sample_boundary(&dom, 2000, 13);
            assert!(batch.iter().all(|p| !dom.contains(p)));
        }
    }

    #[test]
    fn square_boundary_sits_on_faces() {
        let dom = Domain::hypercube(0.0, 1.0, 2).unwrap();
        let batch = sample_boundary(&dom, 1000, 5);
        for p in batch.iter() {
            let on_face = p.iter().filter(|&&c| c == 0.0 || c == 1.0).count();
            assert_eq!(on_face, 1, "exactly one coordinate on a face: {p:?}");
        }
    }

    #[test]
    fn sphere_boundary_radius_exact() {
        let dom = Domain::ball(1.0).unwrap();
        let batch = sample_boundary(&dom, 1000, 6);
        for p in batch.iter() {
            assert!((norm_sq(p).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shell_outer_fraction_matches_area_ratio() {
        let dom = Domain::shell(0.5, 1.0).unwrap();
        let batch = sample_boundary(&dom, 100_000, 8);
        let outer = batch
            .iter()
            .filter(|p| (norm_sq(p).sqrt() - 1.0).abs() < 1e-9)
            .count() as f64;
        let frac = outer / batch.len() as f64;
        assert!((frac - 0.8).abs() < 0.02, "outer fraction {frac}");
    }

    #[test]
    fn chi_square_uniformity_not_rejected() {
        // 4^d grid, n = 1e6, rejection level 1e-4
        // critical values: inverse survival of chi-square at 1e-4
        let critical = [21.107513466, 44.263224944, 113.504992851];
        for d in 1..=3usize {
            let dom = Domain::hypercube(0.0, 1.0, d).unwrap();
            let n = 1_000_000;
            let batch = sample_interior(&dom, n, 12345 + d as u64).unwrap();
            let cells = 4usize.pow(d as u32);
            let mut counts = vec![0u64; cells];
            for p in batch.iter() {
                let mut cell = 0usize;
                for &c in p {
                    let bin = ((c * 4.0) as usize).min(3);
                    cell = cell * 4 + bin;
                }
                counts[cell] += 1;
            }
            let expected = n as f64 / cells as f64;
            let chi2: f64 = counts
                .iter()
                .map(|&c| {
                    let dev = c as f64 - expected;
                    dev * dev / expected
                })
                .sum();
            assert!(
                chi2 < critical[d - 1],
                "d={d}: chi2 {chi2} exceeds critical {}",
                critical[d - 1]
            );
        }
    }

    #[test]
    fn rejection_cap_triggers_on_degenerate_shell() {
        // a sliver shell has tiny acceptance but below-cap; make it absurd
        let dom = Domain::Shell { r_inner: 1.0 - 1e-9, r_outer: 1.0 };
        match sample_interior(&dom, 1, 1) {
            Err(ProblemError::RejectionCap) => {}
            Ok(b) => assert!(dom.contains(b.point(0))),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
