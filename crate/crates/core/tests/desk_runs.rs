//! Desk-scale training runs beyond the acceptance criteria: the
//! five-dimensional ground state with the cosine potential. The published
//! 1.7e-5-scale accuracy needs the full 120k-epoch schedule; at desk scale
//! the target is 5e-3.

use eigenritz::cutoff::CutoffKind;
use eigenritz::loss::{DeflationSet, LossConfig};
use eigenritz::problem::{Domain, Potential};
use eigenritz::spectral::separable_reference;
use eigenritz::train::{train_kth, Problem, SolverSetup, TrainSchedule};

#[test]
fn ground_state_d5_cosine_potential() {
    let domain = Domain::hypercube(-1.0, 1.0, 5).unwrap();
    let potential = Potential::SeparableCosine;
    let lambda_ref =
        separable_reference(&domain, &potential, 32, 1).unwrap().value(1).unwrap();
    let problem = Problem { domain, potential };
    let mut setup = SolverSetup::new(problem.clone(), CutoffKind::ProductCosine);
    setup.width = 16;
    setup.depth = 2;
    let schedule = TrainSchedule {
        epochs_total: 5_000,
        seed: 99,
        log_every: 1_000,
        ..TrainSchedule::default()
    };
    let trial = setup.init_trial(1, schedule.seed).unwrap();
    let sol = train_kth(
        &problem,
        trial,
        &DeflationSet::empty(),
        &schedule,
        &LossConfig::ground_state(),
    )
    .unwrap();
    let rel = (sol.lambda - lambda_ref).abs() / lambda_ref;
    assert!(rel <= 5e-3, "d=5 ground state rel. error {rel:.3e} (desk target 5e-3)");
    // evaluation-batch consistency: the 10⁶-point estimate agrees with one
    // twice as large within the 3σ Monte Carlo interval
    let c = sol.consistency.expect("MC evaluation provides a consistency check");
    assert!(c.ok, "λ(n) = {}, λ(2n) = {}, 3σ = {}", c.lambda_n, c.lambda_2n, c.ci3);
}
