//! Sine spectral Barron space toolkit: norms, the expansion of `u/φ` into
//! cosine-sine products, and the constructive two-layer approximations
//! (cosine Maurey sampling, ReLU interpolation, Softplus replacement) with
//! measured `H¹` error decay.
//!
//! Everything here lives on the unit hypercube `(0,1)^d` with the
//! reciprocal-of-sines cut-off.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::cutoff::{CutoffFn, CutoffKind};
use crate::net::{Activation, Net, Neuron, TrialFn, TwoLayerNet};
use crate::problem::{sample_interior, Domain};
use crate::quad::tensor_gauss_legendre;

#[derive(Debug, Error)]
pub enum BarronError {
    #[error("multi-index {0:?} must be strictly positive componentwise")]
    NonPositiveIndex(Vec<u32>),
    #[error("index dimension {got} does not match series dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty series")]
    EmptySeries,
    #[error("H¹ error supports hypercube (0,1)^d only, d ≤ 3 for quadrature")]
    UnsupportedDomain,
}

/// Finitely supported sine series `u = Σ û(k) Π_i sin(k_i π x_i)`,
/// `k ∈ ℕ₊^d`.
#[derive(Debug, Clone)]
pub struct SineSeries {
    dim: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl SineSeries {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1);
        SineSeries { dim, terms: BTreeMap::new() }
    }

    pub fn from_terms(dim: usize, terms: &[(Vec<u32>, f64)]) -> Result<Self, BarronError> {
        let mut s = SineSeries::new(dim);
        for (k, c) in terms {
            s.insert(k.clone(), *c)?;
        }
        Ok(s)
    }

    /// Adds `c` to the coefficient of `k`; zero-coefficient entries are not
    /// stored.
    pub fn insert(&mut self, k: Vec<u32>, c: f64) -> Result<(), BarronError> {
        if k.len() != self.dim {
            return Err(BarronError::DimensionMismatch { expected: self.dim, got: k.len() });
        }
        if k.contains(&0) {
            return Err(BarronError::NonPositiveIndex(k));
        }
        let entry = self.terms.entry(k).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            let key = self.terms.iter().find(|(_, &v)| v == 0.0).map(|(k, _)| k.clone());
            if let Some(key) = key {
                self.terms.remove(&key);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support_len(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u32>, f64)> {
        self.terms.iter().map(|(k, &c)| (k, c))
    }

    /// Spectral Barron norm `Σ (1 + π^s |k|₁^s)|û(k)|`.
    pub fn barron_norm(&self, s: f64) -> f64 {
        self.terms
            .iter()
            .map(|(k, c)| {
                let l1: f64 = k.iter().map(|&ki| ki as f64).sum();
                (1.0 + PI.powf(s) * l1.powf(s)) * c.abs()
            })
            .sum()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(k, c)| {
                c * k
                    .iter()
                    .zip(x)
                    .map(|(&ki, &xi)| (ki as f64 * PI * xi).sin())
                    .product::<f64>()
            })
            .sum()
    }

    /// Analytic gradient from the series.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut grad = vec![0.0; d];
        for (k, c) in &self.terms {
            let sines: Vec<f64> =
                k.iter().zip(x).map(|(&ki, &xi)| (ki as f64 * PI * xi).sin()).collect();
            for q in 0..d {
                let mut term = *c * k[q] as f64 * PI * (k[q] as f64 * PI * x[q]).cos();
                for (j, s) in sines.iter().enumerate() {
                    if j != q {
                        term *= s;
                    }
                }
                grad[q] += term;
            }
        }
        grad
    }
}

/// Expansion of `u/φ` over the index set Γ: coefficients `v̂(k, i)` with
/// `k ∈ ℕ₀^d` having at most one zero component, at position `i`.
#[derive(Debug, Clone)]
pub struct CosSinSeries {
    dim: usize,
    terms: BTreeMap<(Vec<u32>, usize), f64>,
}

impl CosSinSeries {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coefficient(&self, k: &[u32], i: usize) -> f64 {
        self.terms.get(&(k.to_vec(), i)).copied().unwrap_or(0.0)
    }

    pub fn support_len(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&(Vec<u32>, usize), f64)> {
        self.terms.iter().map(|(key, &c)| (key, c))
    }

    /// `Σ (1 + π^s |k|₁^s)|v̂(k,i)|`.
    pub fn weighted_sum(&self, s: f64) -> f64 {
        self.terms
            .iter()
            .map(|((k, _), c)| {
                let l1: f64 = k.iter().map(|&ki| ki as f64).sum();
                (1.0 + PI.powf(s) * l1.powf(s)) * c.abs()
            })
            .sum()
    }

    /// Synthesis `Σ v̂(k,i) cos(k_i π x_i) Π_{j≠i} sin(k_j π x_j)`.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|((k, i), c)| {
                let mut term = *c * (k[*i] as f64 * PI * x[*i]).cos();
                for (j, (&kj, &xj)) in k.iter().zip(x).enumerate() {
                    if j != *i {
                        term *= (kj as f64 * PI * xj).sin();
                    }
                }
                term
            })
            .sum()
    }
}

/// Expands `u/φ` for the reciprocal-of-sines cut-off:
/// `v̂(k,i) = (1 + 1{k_i ≥ 1}) Σ_{l≥0} û(k + (2l+1)e_i)`.
pub fn expand_over_cutoff(u: &SineSeries) -> CosSinSeries {
    let d = u.dim;
    let mut terms: BTreeMap<(Vec<u32>, usize), f64> = BTreeMap::new();
    for (kappa, c) in &u.terms {
        for i in 0..d {
            // û(κ) contributes to every (k, i) with k_i ∈ {κ_i-1, κ_i-3, …}
            let mut ki = kappa[i] as i64 - 1;
            while ki >= 0 {
                let mut k = kappa.clone();
                k[i] = ki as u32;
                let factor = if ki >= 1 { 2.0 } else { 1.0 };
                *terms.entry((k, i)).or_insert(0.0) += factor * c;
                ki -= 2;
            }
        }
    }
    terms.retain(|_, c| *c != 0.0);
    CosSinSeries { dim: d, terms }
}

/// Theory budget `B = (1 + 2d/(π s_norm)) ‖u‖_{𝔅^{s_norm}}`; the
/// approximation theorems use `s_norm = s` for a pipeline drawing features
/// from the class of order `s - 1`.
pub fn class_budget(u: &SineSeries, s_norm: f64) -> f64 {
    (1.0 + 2.0 * u.dim as f64 / (PI * s_norm)) * u.barron_norm(s_norm)
}

/// A cosine-feature network sampled by Maurey's method, with the metadata
/// needed to verify its class constraints.
#[derive(Debug, Clone)]
pub struct MaureyNet {
    pub net: TwoLayerNet,
    /// Total weighted coefficient mass `Z_v` of the sampled measure.
    pub z_v: f64,
    /// Class budget `B` the constraints are checked against.
    pub budget: f64,
    /// Number of Maurey draws (the net has `draws · 2^d` neurons).
    pub draws: usize,
    /// Class order `s` of the sampled feature family.
    pub s: f64,
}

impl MaureyNet {
    /// Checks the class-constraint form: every neuron's elemental coefficient
    /// `|γ|·m·2^d·(1 + π^s|k|₁^s)` stays within the budget and weights are
    /// integer frequency vectors.
    pub fn class_constraints_ok(&self) -> bool {
        let m = self.draws as f64;
        let two_d = (1u64 << self.net.weight(0).len()) as f64;
        (0..self.net.neuron_count()).all(|i| {
            let w = self.net.weight(i);
            let l1: f64 = w.iter().map(|v| v.abs()).sum();
            let elemental =
                self.net.gamma(i).abs() * m * two_d * (1.0 + PI.powf(self.s) * l1.powf(self.s));
            let integral = w.iter().all(|v| (v - v.round()).abs() < 1e-12);
            elemental <= self.budget * (1.0 + 1e-9) && integral && self.net.bias(i).abs() <= 1.0
        })
    }
}

/// Draws `m` atoms `(k, i)` from the measure `μ ∝ |v̂(k,i)|(1 + π^s|k|₁^s)`
/// and averages their `2^d`-term cosine feature groups. The result `v_m`
/// satisfies `‖u - φ v_m‖_{H¹} ≤ √(6/m) B_u` in expectation, with
/// `B_u = (1 + 2d/(π(s+1))) ‖u‖_{𝔅^{s+1}}`.
pub fn maurey_sample(
    u: &SineSeries,
    s: f64,
    m: usize,
    seed: u64,
) -> Result<MaureyNet, BarronError> {
    assert!(m >= 1);
    if u.terms.is_empty() {
        return Err(BarronError::EmptySeries);
    }
    let d = u.dim;
    let v = expand_over_cutoff(u);
    let atoms: Vec<(&(Vec<u32>, usize), f64)> = v.terms.iter().map(|(k, &c)| (k, c)).collect();
    let mut cum = Vec::with_capacity(atoms.len());
    let mut z_v = 0.0;
    for ((k, _), c) in &atoms {
        let l1: f64 = k.iter().map(|&ki| ki as f64).sum();
        z_v += (1.0 + PI.powf(s) * l1.powf(s)) * c.abs();
        cum.push(z_v);
    }
    let budget = class_budget(u, s + 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform =
        move |hi: f64| (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * hi;
    let parity_cos = d % 2 == 1;
    let activation = if parity_cos { Activation::CosPi } else { Activation::SinPi };
    let two_d = 1usize << d;
    let mut neurons = Vec::with_capacity(m * two_d);
    for _ in 0..m {
        let r = uniform(z_v);
        let idx = cum.partition_point(|&c| c <= r).min(atoms.len() - 1);
        let ((k, i), coeff) = atoms[idx];
        let l1: f64 = k.iter().map(|&ki| ki as f64).sum();
        let base = coeff.signum() * z_v
            / (m as f64 * two_d as f64 * (1.0 + PI.powf(s) * l1.powf(s)));
        for xi_bits in 0..two_d {
            let mut w = vec![0.0; d];
            let mut s_xi: i64 = 0;
            for j in 0..d {
                let xi = if (xi_bits >> j) & 1 == 0 { 1i64 } else { -1i64 };
                w[j] = (k[j] as i64 * xi) as f64;
                if j != *i {
                    s_xi += xi;
                }
            }
            // cos(A - πS/2) reduces to ±cos(A) for even S, ±sin(A) for odd S
            let sign = if s_xi.rem_euclid(2) == 0 {
                if (s_xi / 2).rem_euclid(2) == 0 { 1.0 } else { -1.0 }
            } else if ((s_xi - 1) / 2).rem_euclid(2) == 0 {
                1.0
            } else {
                -1.0
            };
            neurons.push(Neuron { gamma: sign * base, weight: w, bias: 0.0 });
        }
    }
    let net = TwoLayerNet::new(d, activation, 0.0, neurons);
    Ok(MaureyNet { net, z_v, budget, draws: m, s })
}

/// Parity of the univariate feature family: cosine when the dimension is
/// odd, sine when it is even.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Cos,
    Sin,
}

/// One univariate target `g(z) = amplitude · f(π(freq·z + phase))` on
/// `[-1, 1]`, with `f` fixed by parity, a bound `B ≥ ‖g⁽ʳ⁾‖_∞` for
/// `r = 0, 1, 2`, and the stationary point `ρ` with `g'(ρ) = 0`.
#[derive(Debug, Clone)]
pub struct UnivariatePiece {
    pub amplitude: f64,
    pub freq: u32,
    /// Phase `b ∈ {0, 1}`.
    pub phase: u8,
    pub parity: Parity,
    pub bound: f64,
    pub rho: f64,
}

impl UnivariatePiece {
    pub fn new(amplitude: f64, freq: u32, phase: u8, parity: Parity) -> Self {
        assert!(phase <= 1);
        let f = freq as f64;
        let bound = amplitude.abs() * (PI * f).max(1.0).max((PI * f) * (PI * f));
        let rho = match parity {
            Parity::Cos => 0.0,
            Parity::Sin => {
                assert!(freq >= 1, "sine parity needs a positive frequency");
                1.0 / (2.0 * f)
            }
        };
        UnivariatePiece { amplitude, freq, phase, parity, bound, rho }
    }

    pub fn eval(&self, z: f64) -> f64 {
        let arg = PI * (self.freq as f64 * z + self.phase as f64);
        match self.parity {
            Parity::Cos => self.amplitude * arg.cos(),
            Parity::Sin => self.amplitude * arg.sin(),
        }
    }

    pub fn deriv(&self, z: f64) -> f64 {
        let f = self.freq as f64;
        let arg = PI * (f * z + self.phase as f64);
        match self.parity {
            Parity::Cos => -self.amplitude * PI * f * arg.sin(),
            Parity::Sin => self.amplitude * PI * f * arg.cos(),
        }
    }
}

/// Activation of a univariate two-layer net.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act1d {
    Relu,
    Softplus { tau: f64 },
}

/// One hidden unit `a · act(eps·z - b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term1d {
    pub a: f64,
    pub eps: f64,
    pub b: f64,
}

/// Univariate two-layer network `c + Σ a_i act(eps_i z - b_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Net1d {
    pub c: f64,
    pub terms: Vec<Term1d>,
    pub act: Act1d,
}

impl Net1d {
    fn act_eval(&self, z: f64) -> (f64, f64) {
        match self.act {
            Act1d::Relu => {
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Act1d::Softplus { tau } => {
                let v = crate::net::softplus_scaled(z, tau);
                let s = if tau * z >= 0.0 {
                    1.0 / (1.0 + (-tau * z).exp())
                } else {
                    let e = (tau * z).exp();
                    e / (1.0 + e)
                };
                (v, s)
            }
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.c
            + self
                .terms
                .iter()
                .map(|t| t.a * self.act_eval(t.eps * z - t.b).0)
                .sum::<f64>()
    }

    pub fn deriv(&self, z: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.a * t.eps * self.act_eval(t.eps * z - t.b).1)
            .sum::<f64>()
    }

    /// `Σ |a_i|`.
    pub fn coefficient_budget(&self) -> f64 {
        self.terms.iter().map(|t| t.a.abs()).sum()
    }

    /// Multivariate lift: substitutes `z = ŵ·x` for a unit-`ℓ¹` direction.
    pub fn to_two_layer(&self, direction: &[f64]) -> TwoLayerNet {
        let d = direction.len();
        let act = match self.act {
            Act1d::Relu => Activation::Relu,
            Act1d::Softplus { tau } => Activation::Softplus { tau },
        };
        let neurons = self
            .terms
            .iter()
            .map(|t| Neuron {
                gamma: t.a,
                weight: direction.iter().map(|&w| t.eps * w).collect(),
                bias: t.b,
            })
            .collect();
        TwoLayerNet::new(d, act, self.c, neurons)
    }
}

/// Piecewise-linear ReLU interpolant of `g` on the nonuniform grid
/// `{z₀ = -1, …, z_m = ρ, …, z_{2m} = 1}`, written with `c = g(ρ)` and
/// second-difference coefficients so that `Σ|a_i| ≤ 4B` and
/// `‖g - g_m‖_{W^{1,∞}} ≤ 2B/m`.
pub fn relu_interpolate_fn(g: &dyn Fn(f64) -> f64, rho: f64, m: usize) -> Net1d {
    assert!(m >= 1);
    assert!((0.0..=0.5).contains(&rho));
    let h1 = (rho + 1.0) / m as f64;
    let h2 = (1.0 - rho) / m as f64;
    let z = |j: usize| -> f64 {
        if j <= m {
            -1.0 + j as f64 * h1
        } else {
            rho + (j - m) as f64 * h2
        }
    };
    let c = g(rho);
    let mut terms = Vec::with_capacity(2 * m);
    for j in 1..=2 * m {
        let a = if j == m {
            (g(z(m - 1)) - g(z(m))) / h1
        } else if j == m + 1 {
            (g(z(m + 1)) - g(z(m))) / h2
        } else if j < m {
            (g(z(j - 1)) - 2.0 * g(z(j)) + g(z(j + 1))) / h1
        } else {
            (g(z(j)) - 2.0 * g(z(j - 1)) + g(z(j - 2))) / h2
        };
        if j <= m {
            terms.push(Term1d { a, eps: -1.0, b: -z(j) });
        } else {
            terms.push(Term1d { a, eps: 1.0, b: z(j - 1) });
        }
    }
    Net1d { c, terms, act: Act1d::Relu }
}

/// Interpolates a univariate piece from the feature family.
pub fn relu_interpolate(piece: &UnivariatePiece, m: usize) -> Net1d {
    if piece.freq == 0 {
        // constant target: the interpolant is the constant itself
        return Net1d {
            c: piece.eval(piece.rho),
            terms: (0..2 * m)
                .map(|j| Term1d {
                    a: 0.0,
                    eps: if j < m { -1.0 } else { 1.0 },
                    b: 0.0,
                })
                .collect(),
            act: Act1d::Relu,
        };
    }
    relu_interpolate_fn(&|z| piece.eval(z), piece.rho, m)
}

/// Replaces the ReLU activation by the scaled Softplus with identical
/// coefficients.
pub fn softplus_replace(net: &Net1d, tau: f64) -> Net1d {
    assert!(tau > 0.0);
    Net1d { c: net.c, terms: net.terms.clone(), act: Act1d::Softplus { tau } }
}

/// A net built by the constructive pipeline, carrying its theory budget.
#[derive(Debug, Clone)]
pub struct PipelineNet {
    pub net: TwoLayerNet,
    /// `B = (1 + 2d/(πs)) ‖u‖_{𝔅^s}`.
    pub budget: f64,
}

/// Interpolation fineness of the per-atom univariate targets. Each sampled
/// neuron is drawn from an interpolant this fine, keeping the deterministic
/// interpolation bias well below the `m^{-1/2}` sampling term.
const PIPELINE_INTERP_LEVEL: usize = 1024;

/// The constructive proof of the ReLU approximation theorem, run literally:
/// `u` expands over the cut-off, atoms `(k, i)` are drawn from the Maurey
/// measure of class order `s-1`, one of the `2^d` cosine terms is picked
/// uniformly, the resulting univariate target is ReLU-interpolated, and a
/// single hidden unit is drawn from the interpolant's coefficient measure.
/// The averaged `m`-unit network lies in the constrained class with
/// `B = (1 + 2d/(πs)) ‖u‖_{𝔅^s}` and satisfies
/// `‖u - φ v_m‖_{H¹} ≤ 28B/√m` in expectation.
pub fn relu_pipeline(
    u: &SineSeries,
    s: f64,
    m: usize,
    seed: u64,
) -> Result<PipelineNet, BarronError> {
    assert!(s >= 3.0, "the ReLU pipeline needs s ≥ 3");
    assert!(m >= 1);
    if u.terms.is_empty() {
        return Err(BarronError::EmptySeries);
    }
    let d = u.dim;
    let s_class = s - 1.0;
    let v = expand_over_cutoff(u);
    let atoms: Vec<(&(Vec<u32>, usize), f64)> = v.terms.iter().map(|(k, &c)| (k, c)).collect();
    let mut cum = Vec::with_capacity(atoms.len());
    let mut z_v = 0.0;
    for ((k, _), c) in &atoms {
        let l1: f64 = k.iter().map(|&ki| ki as f64).sum();
        z_v += (1.0 + PI.powf(s_class) * l1.powf(s_class)) * c.abs();
        cum.push(z_v);
    }
    let budget = class_budget(u, s);
    let parity = if d % 2 == 1 { Parity::Cos } else { Parity::Sin };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u01 = move || (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    // interpolants depend only on (freq, sign of the folded amplitude)
    let mut interp_cache: BTreeMap<(u32, bool), (Net1d, Vec<f64>, f64)> = BTreeMap::new();

    let mut c_total = 0.0;
    let mut neurons = Vec::with_capacity(m);
    let two_d = 1usize << d;
    for _ in 0..m {
        let r = u01() * z_v;
        let idx = cum.partition_point(|&c| c <= r).min(atoms.len() - 1);
        let ((k, i), coeff) = atoms[idx];
        let xi_bits = (u01() * two_d as f64) as usize % two_d;
        let l1: f64 = k.iter().map(|&ki| ki as f64).sum();
        let freq = l1 as u32;

        // fold the ξ-phase reduction sign into the amplitude
        let mut s_xi: i64 = 0;
        let mut w_dir = vec![0.0; d];
        for j in 0..d {
            let xi = if (xi_bits >> j) & 1 == 0 { 1i64 } else { -1i64 };
            if j != *i {
                s_xi += xi;
            }
            w_dir[j] = if freq == 0 {
                if j == 0 { 1.0 } else { 0.0 }
            } else {
                (k[j] as i64 * xi) as f64 / freq as f64
            };
        }
        let phase_sign = if s_xi.rem_euclid(2) == 0 {
            if (s_xi / 2).rem_euclid(2) == 0 { 1.0 } else { -1.0 }
        } else if ((s_xi - 1) / 2).rem_euclid(2) == 0 {
            1.0
        } else {
            -1.0
        };
        let amplitude = phase_sign * coeff.signum() * z_v
            / (1.0 + PI.powf(s_class) * l1.powf(s_class));

        let key = (freq, amplitude > 0.0);
        let (net1d, acum, total) = interp_cache.entry(key).or_insert_with(|| {
            let piece = UnivariatePiece::new(
                amplitude.abs() * if key.1 { 1.0 } else { -1.0 },
                freq,
                0,
                if freq == 0 { Parity::Cos } else { parity },
            );
            let net1d = relu_interpolate(&piece, PIPELINE_INTERP_LEVEL);
            let mut acum = Vec::with_capacity(net1d.terms.len());
            let mut total = 0.0;
            for t in &net1d.terms {
                total += t.a.abs();
                acum.push(total);
            }
            (net1d, acum, total)
        });
        c_total += net1d.c / m as f64;
        if *total == 0.0 {
            neurons.push(Neuron {
                gamma: 0.0,
                weight: {
                    let mut w = vec![0.0; d];
                    w[0] = 1.0;
                    w
                },
                bias: 0.0,
            });
            continue;
        }
        let rj = u01() * *total;
        let j = acum.partition_point(|&c| c <= rj).min(net1d.terms.len() - 1);
        let term = &net1d.terms[j];
        neurons.push(Neuron {
            gamma: term.a.signum() * *total / m as f64,
            weight: w_dir.iter().map(|&w| term.eps * w).collect(),
            bias: term.b,
        });
    }
    let net = TwoLayerNet::new(d, Activation::Relu, c_total, neurons);
    Ok(PipelineNet { net, budget })
}

/// The Softplus pipeline: identical draws and coefficients as the ReLU
/// pipeline (same seed), with the activation replaced by `SP_τ`, `τ = 9√m`.
/// Satisfies `‖u - φ v_m‖_{H¹} ≤ 64B/√m`.
pub fn softplus_pipeline(
    u: &SineSeries,
    s: f64,
    m: usize,
    seed: u64,
) -> Result<PipelineNet, BarronError> {
    let mut p = relu_pipeline(u, s, m, seed)?;
    p.net.activation = Activation::Softplus { tau: 9.0 * (m as f64).sqrt() };
    Ok(p)
}

/// Wraps a constructed network into a trial function on `(0,1)^d` with the
/// reciprocal-of-sines cut-off.
pub fn with_sine_cutoff(net: TwoLayerNet, dim: usize) -> TrialFn {
    let dom = Domain::hypercube(0.0, 1.0, dim).expect("unit hypercube");
    let cutoff = CutoffFn::new(CutoffKind::SineReciprocal, dom).expect("sine cutoff");
    TrialFn::new(Net::TwoLayer(net), cutoff).expect("matching dimensions")
}

/// How the `H¹` error integral is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum H1Method {
    /// Tensor Gauss–Legendre, 64 nodes per axis (d ≤ 3).
    Quadrature,
    /// Seeded Monte Carlo (d ≥ 4).
    MonteCarlo { n: usize, seed: u64 },
}

/// `‖u - v‖_{H¹((0,1)^d)}` with `∇u` analytic from the series and `∇v` from
/// the network forward pass.
pub fn h1_error(u: &SineSeries, v: &TrialFn, method: H1Method) -> Result<f64, BarronError> {
    let d = u.dim;
    if v.dim() != d {
        return Err(BarronError::DimensionMismatch { expected: d, got: v.dim() });
    }
    let mut ws = v.workspace();
    let mut grad_v = vec![0.0; d];
    let mut total = 0.0;
    match method {
        H1Method::Quadrature => {
            if d > 3 {
                return Err(BarronError::UnsupportedDomain);
            }
            tensor_gauss_legendre(d, 64, 0.0, 1.0, |x, w| {
                let du = u.value(x) - v.eval_into(x, &mut ws, &mut grad_v).unwrap_or(0.0);
                let gu = u.gradient(x);
                let g2: f64 =
                    gu.iter().zip(&grad_v).map(|(a, b)| (a - b) * (a - b)).sum();
                total += w * (du * du + g2);
            });
        }
        H1Method::MonteCarlo { n, seed } => {
            let dom = Domain::hypercube(0.0, 1.0, d).expect("unit hypercube");
            let batch = sample_interior(&dom, n, seed).expect("sampling");
            for x in batch.iter() {
                let du = u.value(x) - v.eval_into(x, &mut ws, &mut grad_v).unwrap_or(0.0);
                let gu = u.gradient(x);
                let g2: f64 =
                    gu.iter().zip(&grad_v).map(|(a, b)| (a - b) * (a - b)).sum();
                total += (du * du + g2) / n as f64;
            }
        }
    }
    Ok(total.sqrt())
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn barron_norm_examples() {
        let u = SineSeries::from_terms(1, &[(vec![1], 1.0)]).unwrap();
        assert_relative_eq!(u.barron_norm(0.0), 2.0, epsilon = 1e-15);
        assert_relative_eq!(u.barron_norm(2.0), 1.0 + PI * PI, epsilon = 1e-12);
        let two = SineSeries::from_terms(2, &[(vec![1, 1], 1.0), (vec![3, 1], 0.5)]).unwrap();
        let expect = (1.0 + 4.0 * PI * PI) + 0.5 * (1.0 + 16.0 * PI * PI);
        assert_relative_eq!(two.barron_norm(2.0), expect, epsilon = 1e-12);
    }

    #[test]
    fn series_rejects_bad_indices() {
        let mut u = SineSeries::new(2);
        assert!(u.insert(vec![0, 1], 1.0).is_err());
        assert!(u.insert(vec![1], 1.0).is_err());
        assert!(u.insert(vec![1, 1], 1.0).is_ok());
        // cancellation removes the stored entry
        u.insert(vec![1, 1], -1.0).unwrap();
        assert_eq!(u.support_len(), 0);
    }

    #[test]
    fn expansion_of_sine_pi_is_identity() {
        // u = sin(πx) equals the cutoff in 1-D, so u/φ = 1
        let u = SineSeries::from_terms(1, &[(vec![1], 1.0)]).unwrap();
        let v = expand_over_cutoff(&u);
        assert_eq!(v.support_len(), 1);
        assert_relative_eq!(v.coefficient(&[0], 0), 1.0);
    }

    #[test]
    fn expansion_of_third_mode() {
        // sin(3πx)/sin(πx) = 1 + 2cos(2πx)
        let u = SineSeries::from_terms(1, &[(vec![3], 1.0)]).unwrap();
        let v = expand_over_cutoff(&u);
        assert_relative_eq!(v.coefficient(&[0], 0), 1.0);
        assert_relative_eq!(v.coefficient(&[2], 0), 2.0);
        assert_eq!(v.support_len(), 2);
    }

    #[test]
    fn expansion_reconstructs_pointwise() {
        let u = SineSeries::from_terms(
            2,
            &[(vec![1, 1], 1.0), (vec![3, 1], 0.5), (vec![2, 4], -0.7)],
        )
        .unwrap();
        let v = expand_over_cutoff(&u);
        let dom = Domain::hypercube(0.0, 1.0, 2).unwrap();
        let cutoff = CutoffFn::new(CutoffKind::SineReciprocal, dom.clone()).unwrap();
        let batch = sample_interior(&dom, 1000, 3).unwrap();
        for x in batch.iter() {
            let lhs = v.value(x) * cutoff.value(x);
            let rhs = u.value(x);
            let denom = rhs.abs().max(1e-3);
            assert!(
                ((lhs - rhs) / denom).abs() < 1e-10,
                "φ·v = {lhs} vs u = {rhs} at {x:?}"
            );
        }
    }

    #[test]
    fn coefficient_identity_bound() {
        use rand_chacha::ChaCha8Rng;
        use rand_core::{RngCore, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut u01 = move || (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        for trial in 0..20 {
            let d = 1 + trial % 3;
            let mut u = SineSeries::new(d);
            for _ in 0..5 {
                let k: Vec<u32> = (0..d).map(|_| 1 + (u01() * 5.0) as u32).collect();
                u.insert(k, 2.0 * u01() - 1.0).unwrap();
            }
            if u.support_len() == 0 {
                continue;
            }
            for s in [0.0, 1.0, 2.0] {
                let v = expand_over_cutoff(&u);
                let lhs = v.weighted_sum(s);
                let rhs = (1.0 + 2.0 * d as f64 / (PI * (s + 1.0))) * u.barron_norm(s + 1.0);
                assert!(lhs <= rhs * (1.0 + 1e-12), "s={s} d={d}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn maurey_single_atom_exact() {
        let u = SineSeries::from_terms(1, &[(vec![1], 1.0)]).unwrap();
        for m in [1usize, 4, 32] {
            let sampled = maurey_sample(&u, 1.0, m, 5).unwrap();
            let trial = with_sine_cutoff(sampled.net.clone(), 1);
            let err = h1_error(&u, &trial, H1Method::Quadrature).unwrap();
            assert!(err < 1e-10, "m={m}: err {err}");
            assert!(sampled.class_constraints_ok());
        }
    }

    #[test]
    fn maurey_rate_and_bound_two_term() {
        let u = SineSeries::from_terms(1, &[(vec![1], 1.0), (vec![3], 0.5)]).unwrap();
        let s = 1.0;
        let b_u = class_budget(&u, s + 1.0);
        let ms = [8usize, 16, 32, 64, 128, 256, 512];
        let mut means = Vec::new();
        for &m in &ms {
            let mut acc = 0.0;
            for seed in 0..20u64 {
                let sampled = maurey_sample(&u, s, m, 1000 + seed).unwrap();
                let trial = with_sine_cutoff(sampled.net.clone(), 1);
                let err = h1_error(&u, &trial, H1Method::Quadrature).unwrap();
                assert!(
                    err <= (6.0 / m as f64).sqrt() * b_u,
                    "m={m} seed={seed}: err {err} above Maurey bound"
                );
                acc += err;
            }
            means.push(acc / 20.0);
        }
        let slope =
            fit_loglog_slope(&ms.iter().map(|&m| m as f64).collect::<Vec<_>>(), &means);
        assert!(
            (-0.7..=-0.3).contains(&slope),
            "log-log slope {slope}, errors {means:?}"
        );
    }

    #[test]
    fn relu_interpolation_reproduces_affine() {
        let g = |z: f64| 0.7 * z - 0.3;
        let net = relu_interpolate_fn(&g, 0.25, 8);
        for i in 0..=100 {
            let z = -1.0 + i as f64 * 0.02;
            assert_relative_eq!(net.eval(z), g(z), epsilon = 1e-12);
        }
    }

    #[test]
    fn relu_interpolation_cosine_bound() {
        // g(z) = cos(πz), ρ = 0, B = π²; W^{1,∞} error ≤ 2B/m
        let piece = UnivariatePiece::new(1.0, 1, 0, Parity::Cos);
        assert_eq!(piece.rho, 0.0);
        let m = 64;
        let net = relu_interpolate(&piece, m);
        let b = PI * PI;
        let mut max_v: f64 = 0.0;
        let mut max_d: f64 = 0.0;
        for i in 0..10_000 {
            let z = -1.0 + (i as f64 + 0.5) * 2.0 / 10_000.0;
            max_v = max_v.max((net.eval(z) - piece.eval(z)).abs());
            max_d = max_d.max((net.deriv(z) - piece.deriv(z)).abs());
        }
        assert!(max_v.max(max_d) <= 2.0 * b / m as f64, "err {}", max_v.max(max_d));
        assert!(net.coefficient_budget() <= 4.0 * b);
        assert!(net.c.abs() <= b);
    }

    #[test]
    fn relu_interpolation_budget_random_pieces() {
        for (freq, parity, amp) in [
            (1u32, Parity::Cos, 0.8),
            (3, Parity::Sin, -0.5),
            (5, Parity::Cos, 0.02),
            (2, Parity::Sin, 1.3),
        ] {
            let piece = UnivariatePiece::new(amp, freq, 0, parity);
            for m in [1usize, 4, 16, 64] {
                let net = relu_interpolate(&piece, m);
                assert!(
                    net.coefficient_budget() <= 4.0 * piece.bound * (1.0 + 1e-12),
                    "freq {freq} m {m}: Σ|a| = {} vs 4B = {}",
                    net.coefficient_budget(),
                    4.0 * piece.bound
                );
                assert!(net.terms.iter().all(|t| t.b.abs() <= 1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn softplus_replacement_examples() {
        let piece = UnivariatePiece::new(1.0, 1, 0, Parity::Cos);
        let m = 64;
        let relu_net = relu_interpolate(&piece, m);
        // τ → ∞ recovers the ReLU net
        let sp_big = softplus_replace(&relu_net, 1e7);
        let mut max_dev: f64 = 0.0;
        for i in 0..2000 {
            let z = -1.0 + i as f64 / 1000.0;
            max_dev = max_dev.max((sp_big.eval(z) - relu_net.eval(z)).abs());
        }
        assert!(max_dev < 1e-5, "deviation {max_dev}");
        // τ = 9·8: ‖g - g_{τ,m}‖_{W^{1,∞}} within its bound plus the
        // interpolation term
        let tau = 72.0;
        let sp = softplus_replace(&relu_net, tau);
        let b = PI * PI;
        let mut max_err: f64 = 0.0;
        for i in 0..10_000 {
            let z = -1.0 + (i as f64 + 0.5) * 2.0 / 10_000.0;
            let ev = (sp.eval(z) - piece.eval(z)).abs();
            let ed = (sp.deriv(z) - piece.deriv(z)).abs();
            max_err = max_err.max(ev.max(ed));
        }
        assert!(
            max_err <= 4.0 * b / tau * (1.0 + 1.0 / tau),
            "W^{{1,∞}} err {max_err} vs bound {}",
            4.0 * b / tau * (1.0 + 1.0 / tau)
        );
        // coefficients unchanged byte-for-byte
        assert_eq!(relu_net.c.to_bits(), sp.c.to_bits());
        for (a, b) in relu_net.terms.iter().zip(&sp.terms) {
            assert_eq!(a.a.to_bits(), b.a.to_bits());
            assert_eq!(a.b.to_bits(), b.b.to_bits());
            assert_eq!(a.eps.to_bits(), b.eps.to_bits());
        }
    }

    #[test]
    fn h1_error_of_exact_synthesis_vanishes() {
        // v = u/φ realized exactly by sine neurons: u = sin(πx)sin(πy)
        let u = SineSeries::from_terms(2, &[(vec![1, 1], 1.0)]).unwrap();
        let net = TwoLayerNet::new(
            2,
            Activation::SinPi,
            0.0,
            vec![
                Neuron { gamma: 1.0, weight: vec![1.0, 0.0], bias: 0.0 },
                Neuron { gamma: 1.0, weight: vec![0.0, 1.0], bias: 0.0 },
            ],
        );
        let trial = with_sine_cutoff(net, 2);
        let err = h1_error(&u, &trial, H1Method::Quadrature).unwrap();
        assert!(err < 1e-12, "err {err}");
    }

    #[test]
    fn pipelines_smoke_within_theorem_bounds() {
        let u = SineSeries::from_terms(2, &[(vec![1, 1], 1.0), (vec![3, 1], 0.5)]).unwrap();
        let s = 3.0;
        let b = class_budget(&u, s);
        for m in [8usize, 32] {
            let relu = relu_pipeline(&u, s, m, 7).unwrap();
            assert_relative_eq!(relu.budget, b);
            let trial = with_sine_cutoff(relu.net.clone(), 2);
            let err = h1_error(&u, &trial, H1Method::Quadrature).unwrap();
            assert!(err <= 28.0 * b / (m as f64).sqrt(), "relu m={m}: {err}");
            // class constraints hold exactly
            assert!(relu
                .net
                .clone()
                .with_theory_constraints(b, false)
                .is_ok());

            let sp = softplus_pipeline(&u, s, m, 7).unwrap();
            let trial = with_sine_cutoff(sp.net.clone(), 2);
            let err = h1_error(&u, &trial, H1Method::Quadrature).unwrap();
            assert!(err <= 64.0 * b / (m as f64).sqrt(), "softplus m={m}: {err}");
            // identical coefficients as the ReLU pipeline
            let relu_params = relu.net.clone();
            for i in 0..relu_params.neuron_count() {
                assert_eq!(relu_params.gamma(i).to_bits(), sp.net.gamma(i).to_bits());
            }
        }
    }

    #[test]
    fn fit_slope_recovers_power_law() {
        let xs: Vec<f64> = (1..=8).map(|k| k as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-0.5)).collect();
        assert_relative_eq!(fit_loglog_slope(&xs, &ys), -0.5, epsilon = 1e-12);
    }
}
