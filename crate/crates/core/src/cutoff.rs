//! Cut-off functions enforcing exact homogeneous Dirichlet conditions.
//!
//! Every kind is positive on the interior, extends continuously to 0 on the
//! boundary, and carries a closed-form gradient. Trial functions multiply a
//! network output by one of these, so the boundary condition holds by
//! construction rather than through a penalty.

use std::f64::consts::PI;

use thiserror::Error;

use crate::problem::{sample_interior, Domain, ProblemError};

/// Distance from a hypercube face below which the reciprocal-of-sines form is
/// treated as a boundary point: the value is the limit 0 but the gradient
/// formula degenerates.
pub const SINE_BOUNDARY_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CutoffError {
    #[error("cutoff kind {kind:?} is not defined on domain {domain:?}")]
    DomainMismatch { kind: CutoffKind, domain: Domain },
    #[error("reciprocal-of-sines gradient degenerates within {SINE_BOUNDARY_GUARD} of a face")]
    SineBoundaryGradient,
    #[error("point is outside the cutoff's domain")]
    Exterior,
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// The closed catalog of cut-off kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutoffKind {
    /// `[Σ_i 1/sin(π x_i)]⁻¹` on `(0,1)^d`; satisfies `0 < φ < 1/d` and
    /// `|∇φ| < π`.
    SineReciprocal,
    /// `Π_i (1 - x_i²)` on `(-1,1)^d`.
    ProductQuadratic,
    /// `[Σ_i 1/(1 - x_i²)]⁻¹` on `(-1,1)^d`.
    ReciprocalQuadratic,
    /// `Π_i cos(π x_i / 2)` on `(-1,1)^d`.
    ProductCosine,
    /// `[Σ_i 1/cos(π x_i / 2)]⁻¹` on `(-1,1)^d`.
    ReciprocalCosine,
    /// `R² - |x|²` on the ball of radius `R`.
    BallQuadratic,
    /// `(R² - |x|²)(|x|² - r²)` on the shell `r < |x| < R`.
    ShellQuadratic,
    /// `φ ≡ 1`: no boundary enforcement. Only admissible as the
    /// boundary-penalty baseline, never for the exact-BC method.
    Identity,
}

impl CutoffKind {
    /// Name used in experiment configurations.
    pub fn config_name(&self) -> &'static str {
        match self {
            CutoffKind::SineReciprocal => "sine",
            CutoffKind::ProductQuadratic => "phi_a",
            CutoffKind::ReciprocalQuadratic => "phi_b",
            CutoffKind::ProductCosine => "phi_c",
            CutoffKind::ReciprocalCosine => "phi_d",
            CutoffKind::BallQuadratic => "ball",
            CutoffKind::ShellQuadratic => "shell",
            CutoffKind::Identity => "none",
        }
    }

    pub fn from_config_name(name: &str) -> Option<Self> {
        Some(match name {
            "sine" => CutoffKind::SineReciprocal,
            "phi_a" => CutoffKind::ProductQuadratic,
            "phi_b" => CutoffKind::ReciprocalQuadratic,
            "phi_c" => CutoffKind::ProductCosine,
            "phi_d" => CutoffKind::ReciprocalCosine,
            "ball" => CutoffKind::BallQuadratic,
            "shell" => CutoffKind::ShellQuadratic,
            "none" => CutoffKind::Identity,
            _ => return None,
        })
    }
}

/// Value and gradient of a cut-off at a point. `grad` is `None` at boundary
/// points of the product forms, where the value is the continuous extension 0.
#[derive(Debug, Clone)]
pub struct CutoffEval {
    pub value: f64,
    pub grad: Option<Vec<f64>>,
}

/// A cut-off kind bound to its domain. Construction validates the pairing:
/// the reciprocal-of-sines form lives on `(0,1)^d`, the `φ_a`–`φ_d` family on
/// `(-1,1)^d`, and the quadratic forms on their ball/shell.
#[derive(Debug, Clone)]
pub struct CutoffFn {
    kind: CutoffKind,
    domain: Domain,
}

/// How the 1-D factors combine.
enum Combine {
    Product,
    ReciprocalSum,
}

impl CutoffFn {
    pub fn new(kind: CutoffKind, domain: Domain) -> Result<Self, CutoffError> {
        let ok = match kind {
            CutoffKind::SineReciprocal => {
                matches!(domain, Domain::Hypercube { lo, hi, .. } if lo == 0.0 && hi == 1.0)
            }
            CutoffKind::ProductQuadratic
            | CutoffKind::ReciprocalQuadratic
            | CutoffKind::ProductCosine
            | CutoffKind::ReciprocalCosine => {
                matches!(domain, Domain::Hypercube { lo, hi, .. } if lo == -1.0 && hi == 1.0)
            }
            CutoffKind::BallQuadratic => matches!(domain, Domain::Ball { .. }),
            CutoffKind::ShellQuadratic => matches!(domain, Domain::Shell { .. }),
            CutoffKind::Identity => true,
        };
        if ok {
            Ok(CutoffFn { kind, domain })
        } else {
            Err(CutoffError::DomainMismatch { kind, domain })
        }
    }

    pub fn kind(&self) -> CutoffKind {
        self.kind
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Continuous extension of the cut-off: the interior value, or 0 on and
    /// outside the boundary.
    pub fn value(&self, x: &[f64]) -> f64 {
        if self.kind == CutoffKind::Identity {
            return 1.0;
        }
        if !self.domain.contains(x) {
            return 0.0;
        }
        let mut scratch = vec![0.0; x.len()];
        self.eval_interior_into(x, &mut scratch).unwrap_or(0.0)
    }

    /// Value and exact gradient.
    pub fn eval(&self, x: &[f64]) -> Result<CutoffEval, CutoffError> {
        let mut grad = vec![0.0; x.len()];
        match self.eval_interior_into(x, &mut grad) {
            Ok(value) => Ok(CutoffEval { value, grad: Some(grad) }),
            Err(CutoffError::Exterior) => Ok(CutoffEval { value: 0.0, grad: None }),
            Err(e) => Err(e),
        }
    }

    /// Hot-path evaluation: writes the gradient into `grad` and returns the
    /// value. Errors when `x` is not usable as an interior point.
    pub fn eval_interior_into(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, CutoffError> {
        debug_assert_eq!(x.len(), self.dim().max(x.len().min(self.dim())));
        match self.kind {
            CutoffKind::Identity => {
                grad.fill(0.0);
                Ok(1.0)
            }
            CutoffKind::SineReciprocal => {
                let (lo, hi) = (0.0, 1.0);
                for &xi in x {
                    if xi - lo < SINE_BOUNDARY_GUARD || hi - xi < SINE_BOUNDARY_GUARD {
                        return Err(if xi <= lo || xi >= hi {
                            CutoffError::Exterior
                        } else {
                            CutoffError::SineBoundaryGradient
                        });
                    }
                }
                Ok(factor_cutoff(
                    x,
                    grad,
                    Combine::ReciprocalSum,
                    |t| ((PI * t).sin(), PI * (PI * t).cos()),
                ))
            }
            CutoffKind::ProductQuadratic => self.hypercube_factors(x, grad, Combine::Product, |t| {
                (1.0 - t * t, -2.0 * t)
            }),
            CutoffKind::ReciprocalQuadratic => {
                self.hypercube_factors(x, grad, Combine::ReciprocalSum, |t| (1.0 - t * t, -2.0 * t))
            }
            CutoffKind::ProductCosine => self.hypercube_factors(x, grad, Combine::Product, |t| {
                let h = 0.5 * PI;
                ((h * t).cos(), -h * (h * t).sin())
            }),
            CutoffKind::ReciprocalCosine => {
                self.hypercube_factors(x, grad, Combine::ReciprocalSum, |t| {
                    let h = 0.5 * PI;
                    ((h * t).cos(), -h * (h * t).sin())
                })
            }
            CutoffKind::BallQuadratic => {
                let Domain::Ball { radius } = self.domain else { unreachable!() };
                let r2: f64 = x.iter().map(|v| v * v).sum();
                if r2 >= radius * radius {
                    return Err(CutoffError::Exterior);
                }
                for (g, &xi) in grad.iter_mut().zip(x) {
                    *g = -2.0 * xi;
                }
                Ok(radius * radius - r2)
            }
            CutoffKind::ShellQuadratic => {
                let Domain::Shell { r_inner, r_outer } = self.domain else { unreachable!() };
                let s: f64 = x.iter().map(|v| v * v).sum();
                let (ri2, ro2) = (r_inner * r_inner, r_outer * r_outer);
                if s <= ri2 || s >= ro2 {
                    return Err(CutoffError::Exterior);
                }
                let dfds = ro2 + ri2 - 2.0 * s;
                for (g, &xi) in grad.iter_mut().zip(x) {
                    *g = dfds * 2.0 * xi;
                }
                Ok((ro2 - s) * (s - ri2))
            }
        }
    }

    fn hypercube_factors(
        &self,
        x: &[f64],
        grad: &mut [f64],
        combine: Combine,
        factor: impl Fn(f64) -> (f64, f64),
    ) -> Result<f64, CutoffError> {
        let Domain::Hypercube { lo, hi, .. } = self.domain else { unreachable!() };
        if x.iter().any(|&xi| xi <= lo || xi >= hi) {
            return Err(CutoffError::Exterior);
        }
        Ok(factor_cutoff(x, grad, combine, factor))
    }
}

/// `φ = Π g_i` or `φ = [Σ 1/g_i]⁻¹` from 1-D factors `g` with derivatives.
///
/// The reciprocal form uses the quotient expression
/// `φ = (Π g_j)/S`, `∂_i φ = g_i' · P_i² / S²` with `P_i = Π_{j≠i} g_j` and
/// `S = Σ_l P_l`, which stays finite as factors approach zero.
fn factor_cutoff(
    x: &[f64],
    grad: &mut [f64],
    combine: Combine,
    factor: impl Fn(f64) -> (f64, f64),
) -> f64 {
    let d = x.len();
    let mut g = vec![0.0; d];
    let mut dg = vec![0.0; d];
    for i in 0..d {
        let (gi, dgi) = factor(x[i]);
        g[i] = gi;
        dg[i] = dgi;
    }
    // P_i = Π_{j≠i} g_j via prefix/suffix products (no division)
    let mut partial = vec![1.0; d];
    let mut acc = 1.0;
    for i in 0..d {
        partial[i] = acc;
        acc *= g[i];
    }
    let full = acc;
    let mut suffix = 1.0;
    for i in (0..d).rev() {
        partial[i] *= suffix;
        suffix *= g[i];
    }
    match combine {
        Combine::Product => {
            for i in 0..d {
                grad[i] = dg[i] * partial[i];
            }
            full
        }
        Combine::ReciprocalSum => {
            let s: f64 = partial.iter().sum();
            for i in 0..d {
                let q = partial[i] / s;
                grad[i] = dg[i] * q * q;
            }
            full / s
        }
    }
}

/// Observed extrema of the reciprocal-of-sines bounds over `n` uniform
/// samples, with any violating points listed.
#[derive(Debug)]
pub struct BoundsReport {
    pub samples: usize,
    pub min_value: f64,
    pub max_value: f64,
    pub max_grad_norm: f64,
    pub violations: Vec<(Vec<f64>, f64, f64)>,
}

impl BoundsReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `0 < φ < 1/d` and `|∇φ| < π` for the reciprocal-of-sines cut-off
/// over `n` uniform interior samples.
pub fn cutoff_bounds_check(
    cutoff: &CutoffFn,
    n: usize,
    seed: u64,
) -> Result<BoundsReport, CutoffError> {
    if cutoff.kind != CutoffKind::SineReciprocal {
        return Err(CutoffError::DomainMismatch {
            kind: cutoff.kind,
            domain: cutoff.domain.clone(),
        });
    }
    let d = cutoff.dim();
    let batch = sample_interior(&cutoff.domain, n, seed)?;
    let mut grad = vec![0.0; d];
    let mut report = BoundsReport {
        samples: n,
        min_value: f64::INFINITY,
        max_value: f64::NEG_INFINITY,
        max_grad_norm: 0.0,
        violations: Vec::new(),
    };
    let upper = 1.0 / d as f64;
    for p in batch.iter() {
        let v = cutoff.eval_interior_into(p, &mut grad)?;
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        report.min_value = report.min_value.min(v);
        report.max_value = report.max_value.max(v);
        report.max_grad_norm = report.max_grad_norm.max(gnorm);
        if !(v > 0.0 && v < upper + 1e-15) || !(gnorm < PI) {
            report.violations.push((p.to_vec(), v, gnorm));
        }
    }
    Ok(report)
}
