//! Empirical losses: Rayleigh quotient, orthogonal deflation penalty,
//! normalization penalty, boundary penalty — with exact sensitivities for the
//! parameter backward pass.
//!
//! All components of one optimization step are evaluated on a single shared
//! batch, so the quotient-rule sensitivities are exact derivatives of the
//! computed scalar.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::net::{NetError, TrialFn, Workspace};
use crate::problem::{sample_interior, Domain, Potential, ProblemError, SampleBatch};
use crate::quad::tensor_gauss_legendre;

/// Default lower bound `r` on the trial-function norm: `E_{n,2} < r²` is a
/// degenerate trial function.
pub const DEFAULT_NORM_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("degenerate trial function: E_n2 = {e2:.3e} below floor r² = {floor:.3e}")]
    DegenerateTrialFn { e2: f64, floor: f64 },
    #[error("cached deflation norm below floor for entry {0}")]
    DegenerateDeflator(usize),
    #[error("non-finite loss value")]
    NonFinite,
    #[error("boundary batch required in boundary-penalty mode")]
    MissingBoundaryBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Cutoff(#[from] crate::cutoff::CutoffError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// How Dirichlet conditions are imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcMode {
    /// Cut-off multiplication; the boundary term is identically zero.
    ExactBc,
    /// Soft enforcement: the trial function is the raw network and the loss
    /// carries `γ_bdry ‖u‖²_{∂Ω}/‖u‖²`.
    BoundaryPenalty,
}

/// Weights and mode of the composite loss for the k-th eigenpair.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Target eigenpair index (1-based).
    pub k: usize,
    /// Deflation weight β; required positive when `k > 1`.
    pub beta: f64,
    /// Normalization-penalty weight γ (0 disables).
    pub gamma_norm: f64,
    /// Boundary-penalty weight γ (0 disables; only in `BoundaryPenalty` mode).
    pub gamma_bdry: f64,
    pub mode: BcMode,
    /// Norm floor `r`; `E_{n,2}` below `r²` aborts the step.
    pub norm_floor: f64,
}

impl LossConfig {
    pub fn ground_state() -> Self {
        LossConfig {
            k: 1,
            beta: 0.0,
            gamma_norm: 0.0,
            gamma_bdry: 0.0,
            mode: BcMode::ExactBc,
            norm_floor: DEFAULT_NORM_FLOOR,
        }
    }
}

/// A frozen function deflated against: either a previously trained trial
/// function (normalized form, its batch norm in the denominator) or a
/// reference eigenfunction that is already normalized.
pub enum Deflator {
    Trained { trial: TrialFn, hash: u64 },
    Reference(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Deflator {
    fn value(&self, x: &[f64], ws: &mut Workspace) -> f64 {
        match self {
            Deflator::Trained { trial, .. } => trial.value(x, ws),
            Deflator::Reference(f) => f(x),
        }
    }

    fn normalized(&self) -> bool {
        matches!(self, Deflator::Reference(_))
    }
}

/// The frozen functions excluded by the orthogonal penalty at step k.
#[derive(Default)]
pub struct DeflationSet {
    items: Vec<Deflator>,
}

impl DeflationSet {
    pub fn empty() -> Self {
        DeflationSet { items: Vec::new() }
    }

    pub fn push_trained(&mut self, trial: TrialFn) {
        let hash = trial.param_hash();
        self.items.push(Deflator::Trained { trial, hash });
    }

    pub fn push_reference(&mut self, psi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>) {
        self.items.push(Deflator::Reference(psi));
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn trained(&self, j: usize) -> Option<&TrialFn> {
        match &self.items[j] {
            Deflator::Trained { trial, .. } => Some(trial),
            Deflator::Reference(_) => None,
        }
    }

    /// Confirms no frozen entry's parameters changed since it was added.
    pub fn hashes_intact(&self) -> bool {
        self.items.iter().all(|d| match d {
            Deflator::Trained { trial, hash } => trial.param_hash() == *hash,
            Deflator::Reference(_) => true,
        })
    }
}

/// Per-sample values of one batch: the trial function, its gradient, the
/// potential, and every deflator, all needed to assemble loss and
/// sensitivities.
pub struct BatchValues {
    pub u: Vec<f64>,
    /// `n × d` row-major.
    pub grad_u: Vec<f64>,
    pub v_pot: Vec<f64>,
    /// One vector per deflator.
    pub defl: Vec<Vec<f64>>,
}

const CHUNK: usize = 256;

/// Evaluates the trial function, potential and deflators over the batch.
/// Chunks run in parallel; each chunk is computed sequentially and chunks are
/// stitched in index order, so the result is bit-identical for any thread
/// count.
pub fn batch_values(
    u: &TrialFn,
    batch: &SampleBatch,
    v: &Potential,
    deflation: &DeflationSet,
) -> Result<BatchValues, LossError> {
    let n = batch.len();
    let d = batch.dim();
    let ranges: Vec<(usize, usize)> =
        (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();

    struct ChunkOut {
        u: Vec<f64>,
        grad: Vec<f64>,
        pot: Vec<f64>,
        defl: Vec<Vec<f64>>,
    }

    let chunks: Vec<Result<ChunkOut, LossError>> = ranges
        .par_iter()
        .map(|&(s, e)| {
            let m = e - s;
            let mut ws = u.workspace();
            let mut defl_ws: Vec<Workspace> = deflation
                .items
                .iter()
                .map(|dfl| match dfl {
                    Deflator::Trained { trial, .. } => trial.workspace(),
                    Deflator::Reference(_) => u.workspace(),
                })
                .collect();
            let mut out = ChunkOut {
                u: vec![0.0; m],
                grad: vec![0.0; m * d],
                pot: vec![0.0; m],
                defl: vec![vec![0.0; m]; deflation.len()],
            };
            for i in 0..m {
                let x = batch.point(s + i);
                out.u[i] = u.eval_into(x, &mut ws, &mut out.grad[i * d..(i + 1) * d])?;
                out.pot[i] = v.eval(x)?;
                for (j, dfl) in deflation.items.iter().enumerate() {
                    out.defl[j][i] = dfl.value(x, &mut defl_ws[j]);
                }
            }
            Ok(out)
        })
        .collect();

    let mut vals = BatchValues {
        u: Vec::with_capacity(n),
        grad_u: Vec::with_capacity(n * d),
        v_pot: Vec::with_capacity(n),
        defl: vec![Vec::with_capacity(n); deflation.len()],
    };
    for c in chunks {
        let c = c?;
        vals.u.extend(c.u);
        vals.grad_u.extend(c.grad);
        vals.v_pot.extend(c.pot);
        for (j, dj) in c.defl.into_iter().enumerate() {
            vals.defl[j].extend(dj);
        }
    }
    Ok(vals)
}

/// `E_{n,V} = n⁻¹ Σ (|∇u|² + V u²)` and `E_{n,2} = n⁻¹ Σ u²` on one batch.
pub fn empirical_components(
    u: &TrialFn,
    batch: &SampleBatch,
    v: &Potential,
) -> Result<(f64, f64), LossError> {
    let vals = batch_values(u, batch, v, &DeflationSet::empty())?;
    let (e_v, _kin, e_2) = components_from(&vals, batch.dim());
    let floor = DEFAULT_NORM_FLOOR * DEFAULT_NORM_FLOOR;
    if e_2 < floor {
        return Err(LossError::DegenerateTrialFn { e2: e_2, floor });
    }
    Ok((e_v, e_2))
}

fn components_from(vals: &BatchValues, d: usize) -> (f64, f64, f64) {
    let n = vals.u.len();
    let mut kin = 0.0;
    let mut pot = 0.0;
    let mut e2 = 0.0;
    for i in 0..n {
        let g2: f64 = vals.grad_u[i * d..(i + 1) * d].iter().map(|g| g * g).sum();
        kin += g2;
        pot += vals.v_pot[i] * vals.u[i] * vals.u[i];
        e2 += vals.u[i] * vals.u[i];
    }
    let nf = n as f64;
    ((kin + pot) / nf, kin / nf, e2 / nf)
}

/// Normalized deflation penalty
/// `β Σ_j I_j² / (E_{n,2}(u) · E_{n,2}(u_j))` with
/// `I_j = n⁻¹ Σ_i u(X_i) u_j(X_i)`; reference deflators are already
/// normalized so their denominator is 1. Returns the value and its exact
/// sensitivities with respect to the sample values `u(X_i)`.
pub fn deflation_penalty(
    u: &TrialFn,
    batch: &SampleBatch,
    deflation: &DeflationSet,
    beta: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    let vals = batch_values(u, batch, &Potential::Zero, deflation)?;
    let (_, _, e2) = components_from(&vals, batch.dim());
    let floor = DEFAULT_NORM_FLOOR * DEFAULT_NORM_FLOOR;
    if e2 < floor {
        return Err(LossError::DegenerateTrialFn { e2, floor });
    }
    let parts = deflation_parts(&vals, deflation, e2, floor)?;
    let n = batch.len();
    let value: f64 = beta * parts.iter().map(|p| p.normalized_sq).sum::<f64>();
    let mut sens = vec![0.0; n];
    for (j, p) in parts.iter().enumerate() {
        let coef = beta * 2.0 * p.overlap / (p.denom * e2 * n as f64);
        for i in 0..n {
            sens[i] += coef * vals.defl[j][i];
        }
    }
    // quotient rule through E_{n,2}(u)
    for i in 0..n {
        sens[i] -= value / e2 * 2.0 * vals.u[i] / n as f64;
    }
    Ok((value, sens))
}

struct DeflPart {
    overlap: f64,
    denom: f64,
    normalized_sq: f64,
}

fn deflation_parts(
    vals: &BatchValues,
    deflation: &DeflationSet,
    e2: f64,
    floor: f64,
) -> Result<Vec<DeflPart>, LossError> {
    let n = vals.u.len() as f64;
    deflation
        .items
        .iter()
        .enumerate()
        .map(|(j, dfl)| {
            let overlap: f64 =
                vals.u.iter().zip(&vals.defl[j]).map(|(a, b)| a * b).sum::<f64>() / n;
            let denom = if dfl.normalized() {
                1.0
            } else {
                let d = vals.defl[j].iter().map(|v| v * v).sum::<f64>() / n;
                if d < floor {
                    return Err(LossError::DegenerateDeflator(j));
                }
                d
            };
            Ok(DeflPart { overlap, denom, normalized_sq: overlap * overlap / (denom * e2) })
        })
        .collect()
}

/// `γ (E_{n,2}(u) - 1)²`.
pub fn normalization_penalty(u: &TrialFn, batch: &SampleBatch, gamma: f64) -> Result<f64, LossError> {
    assert!(gamma >= 0.0);
    let vals = batch_values(u, batch, &Potential::Zero, &DeflationSet::empty())?;
    let (_, _, e2) = components_from(&vals, batch.dim());
    Ok(gamma * (e2 - 1.0) * (e2 - 1.0))
}

/// Boundary penalty `γ (n_b⁻¹ Σ u(Y_i)²) / E_{n,2}(u)` for the soft-BC
/// baseline; `u_raw` is the network without a cut-off.
pub fn boundary_penalty(
    u_raw: &TrialFn,
    interior: &SampleBatch,
    boundary: &SampleBatch,
    gamma: f64,
) -> Result<f64, LossError> {
    let vals = batch_values(u_raw, interior, &Potential::Zero, &DeflationSet::empty())?;
    let (_, _, e2) = components_from(&vals, interior.dim());
    let floor = DEFAULT_NORM_FLOOR * DEFAULT_NORM_FLOOR;
    if e2 < floor {
        return Err(LossError::DegenerateTrialFn { e2, floor });
    }
    let mut ws = u_raw.workspace();
    let eb = boundary.iter().map(|y| {
        let v = u_raw.net.forward(y, &mut ws);
        v * v
    }).sum::<f64>()
        / boundary.len() as f64;
    Ok(gamma * eb / e2)
}

/// Loss value with its component breakdown.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    /// `E_{n,V}/E_{n,2}`.
    pub rayleigh: f64,
    /// `E_{n,P}/E_{n,2}` (normalized deflation term).
    pub deflation: f64,
    pub normalization: f64,
    pub boundary: f64,
    pub e_v: f64,
    pub e_2: f64,
    /// Mean `|∇u|²`; nonnegative by construction.
    pub e_kinetic: f64,
}

/// Exact partial derivatives of the loss scalar with respect to the
/// per-sample values and gradients, ready for the parameter backward pass.
#[derive(Debug, Clone)]
pub struct Sensitivities {
    /// `∂L/∂u(X_i)`.
    pub interior_val: Vec<f64>,
    /// `∂L/∂(∇u(X_i))`, `n × d` row-major.
    pub interior_grad: Vec<f64>,
    /// `∂L/∂u(Y_i)` over the boundary batch (boundary-penalty mode only).
    pub boundary_val: Vec<f64>,
}

/// Assembles the composite loss on one shared batch and the exact
/// sensitivities of its value.
pub fn total_loss_and_sensitivities(
    u: &TrialFn,
    batch: &SampleBatch,
    boundary: Option<&SampleBatch>,
    v: &Potential,
    config: &LossConfig,
    deflation: &DeflationSet,
) -> Result<(LossBreakdown, Sensitivities), LossError> {
    let n = batch.len();
    let d = batch.dim();
    let nf = n as f64;
    let vals = batch_values(u, batch, v, deflation)?;
    let (e_v, e_kin, e_2) = components_from(&vals, d);
    let floor = config.norm_floor * config.norm_floor;
    if e_2 < floor {
        return Err(LossError::DegenerateTrialFn { e2: e_2, floor });
    }

    let parts = deflation_parts(&vals, deflation, e_2, floor)?;
    // E_{n,P} = β Σ_j I_j²/denom_j (numerator of the deflation quotient)
    let e_p: f64 =
        config.beta * parts.iter().map(|p| p.overlap * p.overlap / p.denom).sum::<f64>();

    let rayleigh = e_v / e_2;
    let deflation_term = e_p / e_2;
    let normalization = config.gamma_norm * (e_2 - 1.0) * (e_2 - 1.0);

    let mut boundary_term = 0.0;
    let mut boundary_vals: Vec<f64> = Vec::new();
    let mut e_b = 0.0;
    if config.mode == BcMode::BoundaryPenalty && config.gamma_bdry > 0.0 {
        let bdry = boundary.ok_or(LossError::MissingBoundaryBatch)?;
        let mut ws = u.workspace();
        boundary_vals = bdry.iter().map(|y| u.net.forward(y, &mut ws)).collect();
        e_b = boundary_vals.iter().map(|v| v * v).sum::<f64>() / bdry.len() as f64;
        boundary_term = config.gamma_bdry * e_b / e_2;
    }

    let total = rayleigh + deflation_term + normalization + boundary_term;
    if !total.is_finite() {
        return Err(LossError::NonFinite);
    }

    // quotient-rule sensitivities
    let q = (e_v + e_p) / e_2;
    let mut sens_val = vec![0.0; n];
    let mut sens_grad = vec![0.0; n * d];
    for i in 0..n {
        let ui = vals.u[i];
        // Rayleigh numerator: potential part
        let mut a = 2.0 * vals.v_pot[i] * ui / (nf * e_2);
        // deflation numerator
        for (j, p) in parts.iter().enumerate() {
            a += config.beta * 2.0 * p.overlap * vals.defl[j][i] / (p.denom * nf * e_2);
        }
        // quotient rule through E_{n,2}
        a -= q / e_2 * 2.0 * ui / nf;
        // normalization penalty
        a += config.gamma_norm * 2.0 * (e_2 - 1.0) * 2.0 * ui / nf;
        // boundary penalty denominator
        if boundary_term != 0.0 {
            a -= config.gamma_bdry * e_b / (e_2 * e_2) * 2.0 * ui / nf;
        }
        sens_val[i] = a;
        for c in 0..d {
            sens_grad[i * d + c] = 2.0 * vals.grad_u[i * d + c] / (nf * e_2);
        }
    }
    let boundary_sens: Vec<f64> = if boundary_term != 0.0 {
        let nb = boundary_vals.len() as f64;
        boundary_vals.iter().map(|&y| config.gamma_bdry * 2.0 * y / (nb * e_2)).collect()
    } else {
        Vec::new()
    };

    Ok((
        LossBreakdown {
            total,
            rayleigh,
            deflation: deflation_term,
            normalization,
            boundary: boundary_term,
            e_v,
            e_2,
            e_kinetic: e_kin,
        },
        Sensitivities {
            interior_val: sens_val,
            interior_grad: sens_grad,
            boundary_val: boundary_sens,
        },
    ))
}

/// How population-level quantities (final eigenvalue estimates, diagnostics)
/// are integrated.
#[derive(Debug, Clone)]
pub enum EvalMethod {
    /// Tensor Gauss–Legendre over a hypercube (d ≤ 3 workloads).
    TensorQuadrature { nodes_per_axis: usize },
    /// Fixed-seed Monte Carlo over the domain.
    MonteCarlo { n: usize, seed: u64 },
}

impl EvalMethod {
    /// The evaluation rule used for final eigenvalue estimates: quadrature
    /// with 32 nodes per axis for hypercubes up to d = 3, a 10⁶-point
    /// fixed-seed Monte Carlo batch otherwise.
    pub fn default_for(domain: &Domain) -> Self {
        match domain {
            Domain::Hypercube { dim, .. } if *dim <= 3 => {
                EvalMethod::TensorQuadrature { nodes_per_axis: 32 }
            }
            _ => EvalMethod::MonteCarlo { n: 1_000_000, seed: 0x5eed_0e7a },
        }
    }
}

/// Population-style Rayleigh quotient of a trial function.
#[derive(Debug, Clone)]
pub struct RayleighEval {
    pub lambda: f64,
    pub e_v: f64,
    pub e_2: f64,
    pub points: usize,
}

/// Evaluates `⟨u, Hu⟩/⟨u, u⟩` by quadrature or Monte Carlo.
pub fn population_rayleigh(
    u: &TrialFn,
    domain: &Domain,
    v: &Potential,
    method: &EvalMethod,
) -> Result<RayleighEval, LossError> {
    match method {
        EvalMethod::TensorQuadrature { nodes_per_axis } => {
            let Domain::Hypercube { lo, hi, dim } = *domain else {
                return Err(LossError::ShapeMismatch(
                    "tensor quadrature needs a hypercube domain".into(),
                ));
            };
            let mut ws = u.workspace();
            let mut grad = vec![0.0; dim];
            let mut num = 0.0;
            let mut den = 0.0;
            let mut count = 0usize;
            let mut err: Option<LossError> = None;
            tensor_gauss_legendre(dim, *nodes_per_axis, lo, hi, |x, w| {
                if err.is_some() {
                    return;
                }
                match u.eval_into(x, &mut ws, &mut grad) {
                    Ok(val) => {
                        let g2: f64 = grad.iter().map(|g| g * g).sum();
                        match v.eval(x) {
                            Ok(pot) => {
                                num += w * (g2 + pot * val * val);
                                den += w * val * val;
                                count += 1;
                            }
                            Err(e) => err = Some(e.into()),
                        }
                    }
                    Err(e) => err = Some(e.into()),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            if den <= 0.0 {
                return Err(LossError::DegenerateTrialFn { e2: den, floor: 0.0 });
            }
            Ok(RayleighEval { lambda: num / den, e_v: num, e_2: den, points: count })
        }
        EvalMethod::MonteCarlo { n, seed } => {
            let batch = sample_interior(domain, *n, *seed)?;
            let vals = batch_values(u, &batch, v, &DeflationSet::empty())?;
            let (e_v, _, e_2) = components_from(&vals, batch.dim());
            if e_2 <= 0.0 {
                return Err(LossError::DegenerateTrialFn { e2: e_2, floor: 0.0 });
            }
            Ok(RayleighEval { lambda: e_v / e_2, e_v, e_2, points: *n })
        }
    }
}

/// `|⟨a, b⟩| / (‖a‖‖b‖)` over the domain.
pub fn normalized_overlap(
    a: &TrialFn,
    b: &TrialFn,
    domain: &Domain,
    method: &EvalMethod,
) -> Result<f64, LossError> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut ws_a = a.workspace();
    let mut ws_b = b.workspace();
    let mut accum = |x: &[f64], w: f64| {
        let va = a.value(x, &mut ws_a);
        let vb = b.value(x, &mut ws_b);
        dot += w * va * vb;
        na += w * va * va;
        nb += w * vb * vb;
    };
    match method {
        EvalMethod::TensorQuadrature { nodes_per_axis } => {
            let Domain::Hypercube { lo, hi, dim } = *domain else {
                return Err(LossError::ShapeMismatch(
                    "tensor quadrature needs a hypercube domain".into(),
                ));
            };
            tensor_gauss_legendre(dim, *nodes_per_axis, lo, hi, |x, w| accum(x, w));
        }
        EvalMethod::MonteCarlo { n, seed } => {
            let batch = sample_interior(domain, *n, *seed)?;
            for x in batch.iter() {
                accum(x, 1.0);
            }
        }
    }
    Ok(dot.abs() / (na.sqrt() * nb.sqrt()).max(1e-300))
}
