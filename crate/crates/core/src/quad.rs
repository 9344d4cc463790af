//! Gauss–Legendre quadrature and tensor-product grids.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
///
/// Nodes are computed by Newton iteration on the Legendre polynomial with the
/// Chebyshev-like initial guess; accurate to machine precision for the sizes
/// used here (n ≤ 512).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_deriv(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                let (p2, d2) = legendre_with_deriv(n, x);
                dp = d2;
                x -= p2 / d2;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, d) = legendre_with_deriv(n, 0.0);
        weights[n / 2] = 2.0 / (d * d);
    }
    (nodes, weights)
}

fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss–Legendre rule mapped to the interval `(a, b)`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    (
        x.iter().map(|&t| mid + half * t).collect(),
        w.iter().map(|&wi| wi * half).collect(),
    )
}

/// Composite Gauss–Legendre rule: `panels` equal panels of `n_per_panel`
/// points each on `(a, b)`.
pub fn composite_gauss_legendre(
    n_per_panel: usize,
    panels: usize,
    a: f64,
    b: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert!(panels >= 1);
    let h = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(n_per_panel * panels);
    let mut weights = Vec::with_capacity(n_per_panel * panels);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let (x, w) = gauss_legendre_on(n_per_panel, lo, lo + h);
        nodes.extend(x);
        weights.extend(w);
    }
    (nodes, weights)
}

/// Tensor-product Gauss–Legendre grid on the hypercube `(lo, hi)^d`.
///
/// Calls `f(point, weight)` for every node of the product rule with
/// `n_per_axis` nodes per axis.
pub fn tensor_gauss_legendre(
    dim: usize,
    n_per_axis: usize,
    lo: f64,
    hi: f64,
    mut f: impl FnMut(&[f64], f64),
) {
    let (x, w) = gauss_legendre_on(n_per_axis, lo, hi);
    let mut idx = vec![0usize; dim];
    let mut point = vec![0.0; dim];
    loop {
        let mut weight = 1.0;
        for (a, &i) in idx.iter().enumerate() {
            point[a] = x[i];
            weight *= w[i];
        }
        f(&point, weight);
        // odometer increment
        let mut a = 0;
        loop {
            if a == dim {
                return;
            }
            idx[a] += 1;
            if idx[a] < n_per_axis {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}
