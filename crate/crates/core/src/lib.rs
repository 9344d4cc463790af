//! Variational eigensolver for Schrödinger operators `-Δ + V` with homogeneous
//! Dirichlet boundary conditions.
//!
//! Trial functions are neural networks multiplied by cut-off functions that
//! vanish exactly on the boundary, trained by minimizing an empirical
//! Rayleigh-quotient loss over uniform Monte Carlo samples. Higher eigenpairs
//! are obtained by orthogonal deflation against previously trained solutions.
//! A tensor-product sine-spectral solver provides reference eigenpairs for
//! separable potentials, and the `barron` module contains the constructive
//! two-layer approximation toolkit (cosine Maurey sampling, ReLU interpolation
//! and Softplus replacement) with measured `H¹` error decay.

pub mod barron;
pub mod config;
pub mod cutoff;
pub mod diag;
pub mod driver;
pub mod loss;
pub mod net;
pub mod problem;
pub mod quad;
pub mod spectral;
pub mod train;

pub use cutoff::{CutoffFn, CutoffKind};
pub use net::{Activation, Mlp, Net, TrialFn, TwoLayerNet};
pub use problem::{Domain, Potential, SampleBatch};

/// Mixes a base seed with stream labels into a fresh 64-bit seed
/// (splitmix64 finalizer). Used to derive per-epoch and per-purpose RNG
/// streams from one experiment seed.
pub fn mix_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(t);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
