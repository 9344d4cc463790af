//! Post-hoc diagnostics: stability estimates tying the energy excess to
//! eigenvalue error and eigenfunction projection residuals, a-priori spectrum
//! bounds, and the deflation error-accumulation trace.
//!
//! Proven inequalities are asserted (flagged on violation); heuristic
//! quantities with unknown absolute constants are reported only.

use thiserror::Error;

use crate::loss::{normalized_overlap, EvalMethod, LossError};
use crate::net::TrialFn;
use crate::problem::{sample_interior, Domain, ProblemError};
use crate::quad::tensor_gauss_legendre;
use crate::spectral::{Spectrum, SpectralError};
use crate::train::{EigSolution, Problem};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("need a separable reference spectrum covering index {0}")]
    ReferenceTooShort(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Cutoff(#[from] crate::cutoff::CutoffError),
}

/// Relative slack applied to proven inequalities to absorb quadrature and
/// rounding error.
const INEQ_SLACK: f64 = 1e-9;

/// A function diagnosable against the reference: a trained trial function or
/// a linear combination of reference eigenfunctions.
pub enum Field<'a> {
    Trial(&'a TrialFn),
    /// `Σ c_j ψ_{k_j}` with 1-based indices into the spectrum.
    RefCombo { spectrum: &'a Spectrum, terms: Vec<(usize, f64)> },
}

impl Field<'_> {
    fn value(&self, x: &[f64], ws: &mut Option<crate::net::Workspace>) -> f64 {
        match self {
            Field::Trial(t) => {
                let w = ws.get_or_insert_with(|| t.workspace());
                t.value(x, w)
            }
            Field::RefCombo { spectrum, terms } => terms
                .iter()
                .map(|&(k, c)| c * spectrum.eigenfunction(k, x).unwrap_or(0.0))
                .sum(),
        }
    }

    fn gradient(&self, x: &[f64], ws: &mut Option<crate::net::Workspace>) -> Vec<f64> {
        match self {
            Field::Trial(t) => {
                let w = ws.get_or_insert_with(|| t.workspace());
                let mut g = vec![0.0; x.len()];
                match t.eval_into(x, w, &mut g) {
                    Ok(_) => g,
                    Err(_) => vec![0.0; x.len()],
                }
            }
            Field::RefCombo { spectrum, terms } => {
                let mut g = vec![0.0; x.len()];
                for &(k, c) in terms {
                    if let Ok(gk) = spectrum.eigenfunction_grad(k, x) {
                        for (gi, gki) in g.iter_mut().zip(gk) {
                            *gi += c * gki;
                        }
                    }
                }
                g
            }
        }
    }
}

fn domain_volume(domain: &Domain) -> f64 {
    match domain {
        Domain::Hypercube { lo, hi, dim } => (hi - lo).powi(*dim as i32),
        Domain::Ball { radius } => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
        Domain::Shell { r_inner, r_outer } => {
            4.0 / 3.0 * std::f64::consts::PI * (r_outer.powi(3) - r_inner.powi(3))
        }
    }
}

/// Integrates `f` over the domain: Gauss–Legendre weights for hypercubes,
/// volume-scaled Monte Carlo means otherwise, so both produce Lebesgue
/// integrals.
fn integrate(
    domain: &Domain,
    method: &EvalMethod,
    mut f: impl FnMut(&[f64], f64),
) -> Result<(), DiagError> {
    match method {
        EvalMethod::TensorQuadrature { nodes_per_axis } => {
            let Domain::Hypercube { lo, hi, dim } = *domain else {
                return Err(DiagError::Loss(LossError::ShapeMismatch(
                    "tensor quadrature needs a hypercube".into(),
                )));
            };
            tensor_gauss_legendre(dim, *nodes_per_axis, lo, hi, |x, w| f(x, w));
            Ok(())
        }
        EvalMethod::MonteCarlo { n, seed } => {
            let batch = sample_interior(domain, *n, *seed)?;
            let w = domain_volume(domain) / *n as f64;
            for x in batch.iter() {
                f(x, w);
            }
            Ok(())
        }
    }
}

/// Outcome of the stability estimates for one solution.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub k: usize,
    pub lambda_rayleigh: f64,
    pub lambda_k: f64,
    /// `L_k(û) - λ_k` with the population loss built from reference
    /// eigenfunctions.
    pub energy_excess: f64,
    pub eig_err: f64,
    pub eig_bound: f64,
    pub eig_ok: bool,
    /// `‖P⊥û‖²_{L²}/‖û‖²` against its bound.
    pub proj_l2_sq: f64,
    pub proj_l2_bound: f64,
    pub proj_l2_ok: bool,
    /// `‖∇(P⊥û)‖²_{L²}/‖û‖²` against its bound.
    pub proj_h1_sq: f64,
    pub proj_h1_bound: f64,
    pub proj_h1_ok: bool,
    /// True when `β ≤ λ_k - λ₁`: the hypothesis fails and the checks are
    /// skipped rather than asserted.
    pub skipped_beta: bool,
}

impl StabilityReport {
    pub fn all_ok(&self) -> bool {
        self.skipped_beta || (self.eig_ok && self.proj_l2_ok && self.proj_h1_ok)
    }
}

/// Checks the energy-excess stability estimates for `û` against the
/// reference spectrum: the eigenvalue error bound and both projection
/// residual bounds, with `P⊥` projecting off the full reference eigenspace
/// of `λ_k` (restricted to indices ≥ k).
pub fn stability_check(
    u: &Field,
    spectrum: &Spectrum,
    k: usize,
    beta: f64,
    problem: &Problem,
    method: &EvalMethod,
) -> Result<StabilityReport, DiagError> {
    if spectrum.len() < k + 1 {
        return Err(DiagError::ReferenceTooShort(k + 1));
    }
    let lambda_k = spectrum.value(k)?;
    let lambda_1 = spectrum.value(1)?;
    // first eigenvalue strictly above λ_k
    let group = spectrum.eigenspace_of(k)?.clone();
    let kprime_idx = group.start + group.count; // 0-based entry position
    if kprime_idx >= spectrum.len() {
        return Err(DiagError::ReferenceTooShort(kprime_idx + 1));
    }
    let lambda_kp = spectrum.value(kprime_idx + 1)?;

    let skipped_beta = k > 1 && beta <= lambda_k - lambda_1;

    // the solution space U_k: eigenspace members with index ≥ k
    let u_k_members: Vec<usize> =
        (group.start..group.start + group.count).filter(|&i| i + 1 >= k).map(|i| i + 1).collect();

    let mut ws = None;
    // pass 1: norms, Rayleigh pieces, overlaps with ψ_1..ψ_{k-1} and with U_k
    let mut e2 = 0.0;
    let mut e_v = 0.0;
    let mut overlaps_prev = vec![0.0; k - 1];
    let mut overlaps_uk = vec![0.0; u_k_members.len()];
    integrate(&problem.domain, method, |x, w| {
        let val = u.value(x, &mut ws);
        let grad = u.gradient(x, &mut ws);
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let pot = problem.potential.eval(x).unwrap_or(0.0);
        e2 += w * val * val;
        e_v += w * (g2 + pot * val * val);
        for (j, o) in overlaps_prev.iter_mut().enumerate() {
            *o += w * val * spectrum.eigenfunction(j + 1, x).unwrap_or(0.0);
        }
        for (j, o) in overlaps_uk.iter_mut().enumerate() {
            *o += w * val * spectrum.eigenfunction(u_k_members[j], x).unwrap_or(0.0);
        }
    })?;

    let lambda_rayleigh = e_v / e2;
    let overlap_sq: f64 = overlaps_prev.iter().map(|o| o * o).sum();
    // an empty or exactly-orthogonal overlap sum contributes nothing even
    // when β is passed as infinity
    let penalty = if overlap_sq == 0.0 { 0.0 } else { beta * overlap_sq };
    let l_k = (e_v + penalty) / e2;
    let energy_excess = l_k - lambda_k;

    // pass 2: gradient of the projection remainder P⊥û = û - Σ ⟨û,ψ⟩ψ
    let mut proj_grad_sq = 0.0;
    integrate(&problem.domain, method, |x, w| {
        let grad = u.gradient(x, &mut ws);
        let d = grad.len();
        let mut resid = grad;
        for (j, &c) in overlaps_uk.iter().enumerate() {
            if let Ok(gpsi) = spectrum.eigenfunction_grad(u_k_members[j], x) {
                for q in 0..d {
                    resid[q] -= c * gpsi[q];
                }
            }
        }
        proj_grad_sq += w * resid.iter().map(|g| g * g).sum::<f64>();
    })?;

    let proj_l2_sq = ((e2 - overlaps_uk.iter().map(|o| o * o).sum::<f64>()) / e2).max(0.0);
    let proj_h1_sq = proj_grad_sq / e2;

    let gap = (beta + lambda_1 - lambda_k).min(lambda_kp - lambda_k);
    let eig_err = (lambda_rayleigh - lambda_k).abs();
    let eig_factor = ((lambda_k - lambda_1) / (beta + lambda_1 - lambda_k)).max(1.0);
    let eig_bound = eig_factor * energy_excess;
    let v_min = problem.potential.min_bound();
    let proj_l2_bound = energy_excess / gap;
    let proj_h1_bound = energy_excess * ((lambda_k - v_min) / gap + 1.0);

    let pass = |lhs: f64, rhs: f64| lhs <= rhs * (1.0 + INEQ_SLACK) + 1e-12;
    Ok(StabilityReport {
        k,
        lambda_rayleigh,
        lambda_k,
        energy_excess,
        eig_err,
        eig_bound,
        eig_ok: skipped_beta || pass(eig_err, eig_bound),
        proj_l2_sq,
        proj_l2_bound,
        proj_l2_ok: skipped_beta || pass(proj_l2_sq, proj_l2_bound),
        proj_h1_sq,
        proj_h1_bound,
        proj_h1_ok: skipped_beta || pass(proj_h1_sq, proj_h1_bound),
        skipped_beta,
    })
}

/// A-priori spectrum checks on the hypercube: ordering, the Laplacian ground
/// bound `λ₁ ≥ d(π/L)² + V_min`, and the (constant-free) `L^∞` growth ratios
/// of the normalized eigenfunctions, reported but not asserted.
#[derive(Debug, Clone)]
pub struct AprioriReport {
    pub ordering_ok: bool,
    pub ground_lower_bound: f64,
    pub ground_ok: bool,
    /// `sup|ψ_k| / (k^{2/d} + e(V_max - V_min)/(πd))^{d/4}` per k.
    pub linf_ratios: Vec<f64>,
}

pub fn apriori_bounds_check(
    spectrum: &Spectrum,
    v_min: f64,
    v_max: f64,
    domain: &Domain,
    sample_points: usize,
    seed: u64,
) -> Result<AprioriReport, DiagError> {
    let Domain::Hypercube { lo, hi, dim } = *domain else {
        return Err(DiagError::Loss(LossError::ShapeMismatch(
            "a-priori bounds need a hypercube".into(),
        )));
    };
    let len = hi - lo;
    let ordering_ok = spectrum
        .entries
        .windows(2)
        .all(|w| w[0].value <= w[1].value * (1.0 + INEQ_SLACK));
    let ground_lower_bound =
        dim as f64 * (std::f64::consts::PI / len) * (std::f64::consts::PI / len) + v_min;
    let lambda_1 = spectrum.value(1)?;
    let ground_ok = lambda_1 >= ground_lower_bound * (1.0 - INEQ_SLACK) - 1e-12;

    let batch = sample_interior(domain, sample_points, seed)?;
    let d = dim as f64;
    let mut linf_ratios = Vec::with_capacity(spectrum.len());
    for k in 1..=spectrum.len() {
        let mut sup: f64 = 0.0;
        for x in batch.iter() {
            sup = sup.max(spectrum.eigenfunction(k, x)?.abs());
        }
        let denom = ((k as f64).powf(2.0 / d)
            + std::f64::consts::E * (v_max - v_min) / (std::f64::consts::PI * d))
            .powf(d / 4.0);
        linf_ratios.push(sup / denom);
    }
    Ok(AprioriReport { ordering_ok, ground_lower_bound, ground_ok, linf_ratios })
}

/// One row of the error-accumulation table.
#[derive(Debug, Clone)]
pub struct AccumulationRow {
    pub k: usize,
    pub lambda_hat: f64,
    pub lambda_ref: f64,
    pub energy_excess: f64,
}

/// Error-accumulation trace: per-k energy excess and the fitted growth
/// exponent of excess against k. The theory predicts at-most-quadratic
/// growth; the exponent is reported with a soft flag at 2.5.
#[derive(Debug, Clone)]
pub struct AccumulationReport {
    pub rows: Vec<AccumulationRow>,
    /// `None` when every excess is zero (an exact chain).
    pub exponent: Option<f64>,
    pub soft_ok: bool,
}

pub fn accumulation_trace(rows: Vec<AccumulationRow>) -> AccumulationReport {
    let positives: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.energy_excess > 0.0)
        .map(|r| (r.k as f64, r.energy_excess))
        .collect();
    let exponent = if positives.len() >= 2 {
        let xs: Vec<f64> = positives.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = positives.iter().map(|p| p.1).collect();
        Some(crate::barron::fit_loglog_slope(&xs, &ys))
    } else {
        None
    };
    let soft_ok = exponent.map_or(true, |e| e <= 2.5);
    AccumulationReport { rows, exponent, soft_ok }
}

/// Full diagnostics for one solved spectrum against a separable reference.
#[derive(Debug, Clone)]
pub struct DiagnosticsRecord {
    pub k: usize,
    pub lambda_hat: f64,
    pub lambda_ref: f64,
    pub rel_error: f64,
    pub energy_excess: f64,
    pub proj_l2_sq: f64,
    pub stability_ok: bool,
    pub skipped_beta: bool,
    /// Normalized overlaps with the previous solutions.
    pub overlaps_prev: Vec<f64>,
}

/// A solved eigenpair in the form the diagnostics need: index, estimate, the
/// deflation weight used, and the trained trial function.
pub struct SolvedEntry<'a> {
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub trial: &'a TrialFn,
}

/// Runs the stability checks and overlap matrix for every solved entry, plus
/// the accumulation trace.
pub fn diagnose_entries(
    entries: &[SolvedEntry<'_>],
    spectrum: &Spectrum,
    problem: &Problem,
) -> Result<(Vec<DiagnosticsRecord>, AccumulationReport), DiagError> {
    let method = EvalMethod::default_for(&problem.domain);
    let mut records = Vec::with_capacity(entries.len());
    let mut acc_rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let field = Field::Trial(entry.trial);
        let beta = if entry.k == 1 { f64::INFINITY } else { entry.beta };
        let report = stability_check(&field, spectrum, entry.k, beta, problem, &method)?;
        let lambda_ref = spectrum.value(entry.k)?;
        let mut overlaps_prev = Vec::with_capacity(entry.k.saturating_sub(1));
        for prev in &entries[..entry.k - 1] {
            overlaps_prev.push(normalized_overlap(
                entry.trial,
                prev.trial,
                &problem.domain,
                &method,
            )?);
        }
        acc_rows.push(AccumulationRow {
            k: entry.k,
            lambda_hat: entry.lambda,
            lambda_ref,
            energy_excess: report.energy_excess,
        });
        records.push(DiagnosticsRecord {
            k: entry.k,
            lambda_hat: entry.lambda,
            lambda_ref,
            rel_error: (entry.lambda - lambda_ref).abs() / lambda_ref.abs(),
            energy_excess: report.energy_excess,
            proj_l2_sq: report.proj_l2_sq,
            stability_ok: report.all_ok(),
            skipped_beta: report.skipped_beta,
            overlaps_prev,
        });
    }
    Ok((records, accumulation_trace(acc_rows)))
}

/// [`diagnose_entries`] over a freshly solved spectrum.
pub fn diagnose_solution(
    sol: &EigSolution,
    spectrum: &Spectrum,
    problem: &Problem,
) -> Result<(Vec<DiagnosticsRecord>, AccumulationReport), DiagError> {
    let entries: Vec<SolvedEntry> = sol
        .entries
        .iter()
        .map(|e| SolvedEntry { k: e.k, lambda: e.lambda, beta: e.beta, trial: &e.trial })
        .collect();
    diagnose_entries(&entries, spectrum, problem)
}
