//! Adam optimizer, the stepped training schedule, the per-k training loop and
//! the deflation driver producing successive eigenpairs.

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::cutoff::{CutoffFn, CutoffKind};
use crate::loss::{
    population_rayleigh, total_loss_and_sensitivities, BcMode, DeflationSet, EvalMethod,
    LossConfig, LossError, RayleighEval, Sensitivities,
};
use crate::mix_seed;
use crate::net::{Mlp, Net, TrialFn};
use crate::problem::{sample_boundary, sample_interior, Domain, Potential, SampleBatch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient at epoch {epoch}, parameter {index}: {value}")]
    NonFiniteGradient { epoch: usize, index: usize, value: f64 },
    #[error("loss evaluation failed at epoch {epoch}: {source}")]
    LossAt {
        epoch: usize,
        #[source]
        source: LossError,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Cutoff(#[from] crate::cutoff::CutoffError),
    #[error(transparent)]
    Problem(#[from] crate::problem::ProblemError),
}

/// The eigenvalue problem: a domain, a potential, homogeneous Dirichlet
/// boundary values.
#[derive(Debug, Clone)]
pub struct Problem {
    pub domain: Domain,
    pub potential: Potential,
}

/// Stepped training schedule: every `period` epochs the learning rate is
/// multiplied by `lr_factor` and the batch size by `points_factor`.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub epochs_total: usize,
    pub lr0: f64,
    pub points0: usize,
    pub period: usize,
    pub lr_factor: f64,
    pub points_factor: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Trace row interval (epochs).
    pub log_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs_total: 120_000,
            lr0: 5e-3,
            points0: 1000,
            period: 20_000,
            lr_factor: 0.25,
            points_factor: 2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_every: 500,
        }
    }
}

impl TrainSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_factor.powi((epoch / self.period) as i32)
    }

    pub fn points_at(&self, epoch: usize) -> usize {
        self.points0 * self.points_factor.pow((epoch / self.period) as u32)
    }
}

/// First and second moment accumulators of Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1, beta2, eps }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction. Non-finite gradients abort.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { epoch: 0, index, value });
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// One row of the training trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub epoch: usize,
    pub lr: f64,
    pub points: usize,
    pub total: f64,
    pub rayleigh: f64,
    pub deflation: f64,
    pub normalization: f64,
    pub boundary: f64,
    pub e_2: f64,
    pub grad_norm: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,points,total,rayleigh,deflation,normalization,boundary,e2,grad_norm";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.points,
            self.total,
            self.rayleigh,
            self.deflation,
            self.normalization,
            self.boundary,
            self.e_2,
            self.grad_norm
        )
    }
}

/// Agreement between the evaluation batch and one twice as large.
#[derive(Debug, Clone)]
pub struct EvalConsistency {
    pub lambda_n: f64,
    pub lambda_2n: f64,
    /// 3σ delta-method confidence radius of the smaller estimate.
    pub ci3: f64,
    pub ok: bool,
}

/// One trained eigenpair.
#[derive(Debug)]
pub struct KSolution {
    pub k: usize,
    pub lambda: f64,
    pub trial: TrialFn,
    pub trace: Vec<TraceRow>,
    pub eval: RayleighEval,
    pub consistency: Option<EvalConsistency>,
    pub beta: f64,
    pub final_grad_norm: f64,
    pub param_norm: f64,
}

/// Ordered eigenpairs from the deflation loop, with soft-diagnostic flags
/// (ordering violations, β warnings) surfaced rather than hidden.
#[derive(Debug)]
pub struct EigSolution {
    pub entries: Vec<KSolution>,
    pub flags: Vec<String>,
}

impl EigSolution {
    pub fn lambdas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lambda).collect()
    }
}

/// Rule for the deflation weight at step k.
#[derive(Debug, Clone, Copy)]
pub enum BetaRule {
    /// `β = factor · λ̂_{k-1}` (the default uses factor 4).
    MultipleOfPrevious(f64),
    Fixed(f64),
}

impl Default for BetaRule {
    fn default() -> Self {
        BetaRule::MultipleOfPrevious(4.0)
    }
}

impl BetaRule {
    pub fn beta_for(&self, prev_lambda: f64) -> f64 {
        match self {
            BetaRule::MultipleOfPrevious(f) => f * prev_lambda,
            BetaRule::Fixed(b) => *b,
        }
    }
}

/// Everything but the schedule needed to run the solver.
#[derive(Debug, Clone)]
pub struct SolverSetup {
    pub problem: Problem,
    pub cutoff: CutoffKind,
    pub width: usize,
    pub depth: usize,
    pub mode: BcMode,
    pub gamma_norm: f64,
    pub gamma_bdry: f64,
    pub beta_rule: BetaRule,
    pub norm_floor: f64,
    /// Soft stationarity tolerance on the scale-free quantity
    /// `‖∇θL‖·‖θ‖` at the end of training; exceeding it flags the run.
    pub stationarity_tol: f64,
    /// When set, the orthogonal penalty uses the exact reference
    /// eigenfunctions instead of the previously trained solutions, removing
    /// deflation error accumulation for comparison studies.
    pub reference_deflation: Option<std::sync::Arc<crate::spectral::Spectrum>>,
}

impl SolverSetup {
    pub fn new(problem: Problem, cutoff: CutoffKind) -> Self {
        SolverSetup {
            problem,
            cutoff,
            width: 40,
            depth: 3,
            mode: BcMode::ExactBc,
            gamma_norm: 0.0,
            gamma_bdry: 0.0,
            beta_rule: BetaRule::default(),
            norm_floor: crate::loss::DEFAULT_NORM_FLOOR,
            stationarity_tol: 50.0,
            reference_deflation: None,
        }
    }

    fn cutoff_fn(&self) -> Result<CutoffFn, TrainError> {
        Ok(CutoffFn::new(self.cutoff, self.problem.domain.clone())?)
    }

    /// Fresh trial function for step k with a seed derived from the run seed.
    pub fn init_trial(&self, k: usize, seed: u64) -> Result<TrialFn, TrainError> {
        let d = self.problem.domain.dim();
        let net_seed = mix_seed(seed, &[k as u64, 0xA11]);
        let net = Net::Mlp(Mlp::init(d, self.width, self.depth, net_seed));
        Ok(TrialFn::new(net, self.cutoff_fn()?)?)
    }
}

const CHUNK: usize = 256;

/// Parameter gradient of the loss over a batch: per-chunk accumulators are
/// computed in parallel (each sequentially) and summed in index order, so the
/// result does not depend on the thread count.
fn batch_gradient(
    u: &TrialFn,
    batch: &SampleBatch,
    sens: &Sensitivities,
    boundary: Option<&SampleBatch>,
) -> Result<Vec<f64>, TrainError> {
    let n = batch.len();
    let d = batch.dim();
    let ranges: Vec<(usize, usize)> =
        (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let partials: Vec<Result<Vec<f64>, TrainError>> = ranges
        .par_iter()
        .map(|&(s, e)| {
            let mut ws = u.workspace();
            let mut acc = vec![0.0; u.net.param_len()];
            for i in s..e {
                u.backward_add(
                    batch.point(i),
                    sens.interior_val[i],
                    &sens.interior_grad[i * d..(i + 1) * d],
                    &mut ws,
                    &mut acc,
                )?;
            }
            Ok(acc)
        })
        .collect();
    let mut grad = vec![0.0; u.net.param_len()];
    for p in partials {
        let p = p?;
        for (g, v) in grad.iter_mut().zip(&p) {
            *g += v;
        }
    }
    if let Some(bdry) = boundary {
        if !sens.boundary_val.is_empty() {
            let mut ws = u.workspace();
            let zero = vec![0.0; d];
            for (i, y) in bdry.iter().enumerate() {
                u.backward_add(y, sens.boundary_val[i], &zero, &mut ws, &mut grad)?;
            }
        }
    }
    Ok(grad)
}

/// Trains the k-th eigenpair against a frozen deflation set: every epoch
/// draws a fresh interior batch, assembles the loss, backpropagates and takes
/// one Adam step. The final eigenvalue estimate is the Rayleigh quotient on a
/// fixed evaluation rule (quadrature for small hypercubes, 10⁶-point
/// fixed-seed Monte Carlo otherwise).
pub fn train_kth(
    problem: &Problem,
    mut trial: TrialFn,
    deflation: &DeflationSet,
    schedule: &TrainSchedule,
    loss_cfg: &LossConfig,
) -> Result<KSolution, TrainError> {
    if loss_cfg.k > 1 {
        assert!(loss_cfg.beta > 0.0, "deflation weight must be positive for k > 1");
        assert_eq!(deflation.len(), loss_cfg.k - 1, "need k-1 frozen solutions");
    }
    let mut adam = AdamState::new(
        trial.net.param_len(),
        schedule.adam_beta1,
        schedule.adam_beta2,
        schedule.adam_eps,
    );
    let mut trace = Vec::new();
    let mut last_grad_norm = f64::NAN;
    for epoch in 0..schedule.epochs_total {
        let n = schedule.points_at(epoch);
        let lr = schedule.lr_at(epoch);
        let batch_seed = mix_seed(schedule.seed, &[loss_cfg.k as u64, epoch as u64, 1]);
        let batch = sample_interior(&problem.domain, n, batch_seed)
            .map_err(|e| TrainError::LossAt { epoch, source: e.into() })?;
        let boundary = if loss_cfg.mode == BcMode::BoundaryPenalty {
            let bseed = mix_seed(schedule.seed, &[loss_cfg.k as u64, epoch as u64, 2]);
            Some(sample_boundary(&problem.domain, n, bseed))
        } else {
            None
        };
        let (breakdown, sens) = total_loss_and_sensitivities(
            &trial,
            &batch,
            boundary.as_ref(),
            &problem.potential,
            loss_cfg,
            deflation,
        )
        .map_err(|e| TrainError::LossAt { epoch, source: e })?;
        let grad = batch_gradient(&trial, &batch, &sens, boundary.as_ref())?;
        last_grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if trace.is_empty()
            || epoch % schedule.log_every == 0
            || epoch + 1 == schedule.epochs_total
        {
            trace.push(TraceRow {
                epoch,
                lr,
                points: n,
                total: breakdown.total,
                rayleigh: breakdown.rayleigh,
                deflation: breakdown.deflation,
                normalization: breakdown.normalization,
                boundary: breakdown.boundary,
                e_2: breakdown.e_2,
                grad_norm: last_grad_norm,
            });
        }
        adam_step(trial.net.params_mut(), &grad, &mut adam, lr)
            .map_err(|e| match e {
                TrainError::NonFiniteGradient { index, value, .. } => {
                    TrainError::NonFiniteGradient { epoch, index, value }
                }
                other => other,
            })?;
    }

    let method = EvalMethod::default_for(&problem.domain);
    let eval = population_rayleigh(&trial, &problem.domain, &problem.potential, &method)?;
    let consistency = match &method {
        EvalMethod::MonteCarlo { n, seed } => Some(mc_consistency(
            &trial,
            problem,
            *n,
            mix_seed(*seed, &[loss_cfg.k as u64]),
        )?),
        EvalMethod::TensorQuadrature { .. } => None,
    };
    let param_norm = trial.net.params().iter().map(|p| p * p).sum::<f64>().sqrt();
    Ok(KSolution {
        k: loss_cfg.k,
        lambda: eval.lambda,
        trial,
        trace,
        eval,
        consistency,
        beta: loss_cfg.beta,
        final_grad_norm: last_grad_norm,
        param_norm,
    })
}

/// Delta-method agreement check between an n-point and a 2n-point Monte
/// Carlo Rayleigh estimate.
fn mc_consistency(
    trial: &TrialFn,
    problem: &Problem,
    n: usize,
    seed: u64,
) -> Result<EvalConsistency, TrainError> {
    let batch = sample_interior(&problem.domain, n, seed)?;
    let vals = crate::loss::batch_values(trial, &batch, &problem.potential, &DeflationSet::empty())?;
    let d = batch.dim();
    let nf = n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let g2: f64 = vals.grad_u[i * d..(i + 1) * d].iter().map(|g| g * g).sum();
        num += g2 + vals.v_pot[i] * vals.u[i] * vals.u[i];
        den += vals.u[i] * vals.u[i];
    }
    num /= nf;
    den /= nf;
    let lambda_n = num / den;
    // Var(λ̂) ≈ Var(a - λ b) / (n · E[b]²)
    let mut var_r = 0.0;
    for i in 0..n {
        let g2: f64 = vals.grad_u[i * d..(i + 1) * d].iter().map(|g| g * g).sum();
        let a = g2 + vals.v_pot[i] * vals.u[i] * vals.u[i];
        let b = vals.u[i] * vals.u[i];
        let r = a - lambda_n * b;
        var_r += r * r;
    }
    var_r /= nf - 1.0;
    let ci3 = 3.0 * (var_r / nf).sqrt() / den;

    let big = sample_interior(&problem.domain, 2 * n, mix_seed(seed, &[2]))?;
    let vals2 =
        crate::loss::batch_values(trial, &big, &problem.potential, &DeflationSet::empty())?;
    let mut num2 = 0.0;
    let mut den2 = 0.0;
    for i in 0..2 * n {
        let g2: f64 = vals2.grad_u[i * d..(i + 1) * d].iter().map(|g| g * g).sum();
        num2 += g2 + vals2.v_pot[i] * vals2.u[i] * vals2.u[i];
        den2 += vals2.u[i] * vals2.u[i];
    }
    let lambda_2n = num2 / den2;
    Ok(EvalConsistency { lambda_n, lambda_2n, ci3, ok: (lambda_n - lambda_2n).abs() < ci3 })
}

/// Runs the deflation loop `k = 1..=k_count`, freezing each solution, with
/// `β = rule(λ̂_{k-1})` from the second step on.
pub fn solve_spectrum(
    setup: &SolverSetup,
    k_count: usize,
    schedule: &TrainSchedule,
) -> Result<EigSolution, TrainError> {
    solve_spectrum_with(setup, k_count, schedule, |_| Ok(()))
}

/// [`solve_spectrum`] with a per-step callback, invoked right after each
/// eigenpair finishes training. Callers persist partial results there, so an
/// abort at step k leaves steps `1..k` on disk.
pub fn solve_spectrum_with(
    setup: &SolverSetup,
    k_count: usize,
    schedule: &TrainSchedule,
    mut on_solved: impl FnMut(&KSolution) -> Result<(), TrainError>,
) -> Result<EigSolution, TrainError> {
    assert!(k_count >= 1);
    let mut deflation = DeflationSet::empty();
    let mut entries: Vec<KSolution> = Vec::with_capacity(k_count);
    let mut flags = Vec::new();
    for k in 1..=k_count {
        let beta = if k == 1 {
            0.0
        } else {
            setup.beta_rule.beta_for(entries[k - 2].lambda)
        };
        let loss_cfg = LossConfig {
            k,
            beta,
            gamma_norm: setup.gamma_norm,
            gamma_bdry: setup.gamma_bdry,
            mode: setup.mode,
            norm_floor: setup.norm_floor,
        };
        let trial = setup.init_trial(k, schedule.seed)?;
        let sol = train_kth(&setup.problem, trial, &deflation, schedule, &loss_cfg)?;
        on_solved(&sol)?;
        if !deflation.hashes_intact() {
            flags.push(format!("frozen deflation set changed while solving k = {k}"));
        }
        let scaled_grad = sol.final_grad_norm * sol.param_norm;
        if scaled_grad > setup.stationarity_tol {
            flags.push(format!(
                "stationarity: scaled gradient ‖∇L‖·‖θ‖ = {scaled_grad:.3e} above tolerance \
                 {} at k = {k}",
                setup.stationarity_tol
            ));
        }
        if k >= 2 {
            let lambda1 = entries[0].lambda;
            if beta <= sol.lambda - lambda1 {
                let msg = format!(
                    "beta = {beta:.4} is not above the gap estimate λ̂_{k} - λ̂_1 = {:.4}",
                    sol.lambda - lambda1
                );
                warn!("{msg}");
                flags.push(msg);
            }
            let prev = entries[k - 2].lambda;
            if sol.lambda < prev * (1.0 - 1e-6) {
                flags.push(format!(
                    "eigenvalue ordering violated: λ̂_{k} = {:.6} < λ̂_{} = {prev:.6}",
                    sol.lambda,
                    k - 1
                ));
            }
        }
        match &setup.reference_deflation {
            Some(spectrum) => {
                let s = spectrum.clone();
                deflation
                    .push_reference(std::sync::Arc::new(move |x: &[f64]| {
                        s.eigenfunction(k, x).unwrap_or(0.0)
                    }));
            }
            None => deflation.push_trained(sol.trial.clone()),
        }
        entries.push(sol);
    }
    Ok(EigSolution { entries, flags })
}
