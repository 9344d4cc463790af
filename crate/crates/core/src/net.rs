//! Trial-function networks: constrained two-layer nets and a dense tanh MLP,
//! evaluated jointly with their spatial gradient.
//!
//! The loss consumes `|∇ₓu|²`, so its parameter gradient needs the exact
//! mixed derivatives `∂²N/∂θ∂x`. Spatial gradients propagate forward through
//! the layers (one Jacobian column per input dimension); parameter gradients
//! run a reverse pass over that combined computation, so both the value path
//! and the spatial-gradient path are differentiated exactly.

use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::cutoff::{CutoffError, CutoffFn};
use crate::problem::SampleBatch;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("constraint violated: {0}")]
    ConstraintViolated(String),
    #[error("parse error in parameter file: {0}")]
    Parse(String),
    #[error(transparent)]
    Cutoff(#[from] CutoffError),
}

/// Overflow-safe scaled Softplus `τ⁻¹ ln(1 + e^{τz})`.
pub fn softplus_scaled(z: f64, tau: f64) -> f64 {
    z.max(0.0) + (-tau * z.abs()).exp().ln_1p() / tau
}

/// Logistic sigmoid, the derivative of the scaled Softplus.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Activation of a two-layer network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Softplus { tau: f64 },
    /// `cos(π z)` — cosine feature used by the constructive approximations.
    CosPi,
    /// `sin(π z)` — the even-dimension counterpart of `CosPi`.
    SinPi,
}

impl Activation {
    /// Value, first and second derivative at `z`.
    ///
    /// ReLU's derivative at 0 is taken to be 0 (a measure-zero event under
    /// continuous sampling) and its second derivative is 0 everywhere.
    #[inline]
    pub fn eval2(&self, z: f64) -> (f64, f64, f64) {
        match *self {
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Softplus { tau } => {
                let s = sigmoid(tau * z);
                (softplus_scaled(z, tau), s, tau * s * (1.0 - s))
            }
            Activation::CosPi => {
                let (s, c) = (std::f64::consts::PI * z).sin_cos();
                let pi = std::f64::consts::PI;
                ((c), -pi * s, -pi * pi * c)
            }
            Activation::SinPi => {
                let (s, c) = (std::f64::consts::PI * z).sin_cos();
                let pi = std::f64::consts::PI;
                ((s), pi * c, -pi * pi * s)
            }
        }
    }

    fn tag(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Softplus { tau } => format!("softplus:{tau}"),
            Activation::CosPi => "cospi".into(),
            Activation::SinPi => "sinpi".into(),
        }
    }

    fn from_tag(tag: &str) -> Result<Self, NetError> {
        if let Some(t) = tag.strip_prefix("softplus:") {
            let tau: f64 = t.parse().map_err(|_| NetError::Parse(format!("bad tau {t}")))?;
            return Ok(Activation::Softplus { tau });
        }
        match tag {
            "relu" => Ok(Activation::Relu),
            "cospi" => Ok(Activation::CosPi),
            "sinpi" => Ok(Activation::SinPi),
            other => Err(NetError::Parse(format!("unknown activation {other}"))),
        }
    }
}

/// Two-layer network `N(x) = c + Σ_i γ_i act(w_i·x - t_i)`.
///
/// Parameters are stored flat as `[c, γ…, w… (row-major), t…]`.
#[derive(Debug, Clone)]
pub struct TwoLayerNet {
    dim: usize,
    neurons: usize,
    pub activation: Activation,
    params: Vec<f64>,
    /// Coefficient budget `B` when the net was built theory-constrained.
    pub budget: Option<f64>,
}

impl TwoLayerNet {
    pub fn new(dim: usize, activation: Activation, c: f64, neurons: Vec<Neuron>) -> Self {
        let m = neurons.len();
        let mut params = Vec::with_capacity(1 + m * (2 + dim));
        params.push(c);
        params.extend(neurons.iter().map(|n| n.gamma));
        for n in &neurons {
            assert_eq!(n.weight.len(), dim);
            params.extend_from_slice(&n.weight);
        }
        params.extend(neurons.iter().map(|n| n.bias));
        TwoLayerNet { dim, neurons: m, activation, params, budget: None }
    }

    /// Constant-only network `N ≡ c`.
    pub fn constant(dim: usize, c: f64) -> Self {
        TwoLayerNet::new(dim, Activation::Relu, c, Vec::new())
    }

    /// Validates the theory constraints `|c| ≤ B`, `|w_i|₁ = 1` (or `≤ 1` when
    /// `relaxed_weights`), `|t_i| ≤ 1`, `Σ|γ_i| ≤ 4B` and records the budget.
    pub fn with_theory_constraints(
        mut self,
        budget: f64,
        relaxed_weights: bool,
    ) -> Result<Self, NetError> {
        let c = self.params[0];
        if c.abs() > budget * (1.0 + 1e-12) {
            return Err(NetError::ConstraintViolated(format!("|c| = {} > B = {budget}", c.abs())));
        }
        let gamma_sum: f64 = (0..self.neurons).map(|i| self.gamma(i).abs()).sum();
        if gamma_sum > 4.0 * budget * (1.0 + 1e-12) {
            return Err(NetError::ConstraintViolated(format!(
                "Σ|γ| = {gamma_sum} > 4B = {}",
                4.0 * budget
            )));
        }
        for i in 0..self.neurons {
            let w1: f64 = self.weight(i).iter().map(|w| w.abs()).sum();
            let ok = if relaxed_weights { w1 <= 1.0 + 1e-12 } else { (w1 - 1.0).abs() <= 1e-12 };
            if !ok {
                return Err(NetError::ConstraintViolated(format!("|w_{i}|₁ = {w1}")));
            }
            if self.bias(i).abs() > 1.0 + 1e-12 {
                return Err(NetError::ConstraintViolated(format!(
                    "|t_{i}| = {} > 1",
                    self.bias(i).abs()
                )));
            }
        }
        self.budget = Some(budget);
        Ok(self)
    }

    pub fn c(&self) -> f64 {
        self.params[0]
    }

    pub fn neuron_count(&self) -> usize {
        self.neurons
    }

    pub fn gamma(&self, i: usize) -> f64 {
        self.params[1 + i]
    }

    pub fn weight(&self, i: usize) -> &[f64] {
        let off = 1 + self.neurons + i * self.dim;
        &self.params[off..off + self.dim]
    }

    pub fn bias(&self, i: usize) -> f64 {
        self.params[1 + self.neurons + self.neurons * self.dim + i]
    }
}

/// One hidden unit of a two-layer network.
#[derive(Debug, Clone)]
pub struct Neuron {
    pub gamma: f64,
    pub weight: Vec<f64>,
    pub bias: f64,
}

/// Dense tanh MLP: `depth` hidden layers of equal `width`, linear output.
///
/// Flat parameter layout: `W₁ (width×dim), b₁, then (depth-1) blocks of
/// (W_h width×width, b_h), then W_out (width), b_out`.
#[derive(Debug, Clone)]
pub struct Mlp {
    dim: usize,
    width: usize,
    depth: usize,
    params: Vec<f64>,
    pub init_seed: Option<u64>,
}

impl Mlp {
    pub fn param_count(dim: usize, width: usize, depth: usize) -> usize {
        width * dim + width + (depth - 1) * (width * width + width) + width + 1
    }

    /// Symmetric uniform initialization scaled by fan-in,
    /// `W, b ~ U(-1/√fan_in, 1/√fan_in)`.
    pub fn init(dim: usize, width: usize, depth: usize, seed: u64) -> Self {
        assert!(depth >= 1 && width >= 1 && dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = move || {
            2.0 * ((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) - 1.0
        };
        let mut params = Vec::with_capacity(Self::param_count(dim, width, depth));
        let mut layer = |fan_in: usize, count: usize, params: &mut Vec<f64>| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..count {
                params.push(scale * u());
            }
        };
        layer(dim, width * dim + width, &mut params);
        for _ in 1..depth {
            layer(width, width * width + width, &mut params);
        }
        layer(width, width + 1, &mut params);
        Mlp { dim, width, depth, params, init_seed: Some(seed) }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    fn w1(&self) -> &[f64] {
        &self.params[..self.width * self.dim]
    }

    fn b1(&self) -> &[f64] {
        let o = self.width * self.dim;
        &self.params[o..o + self.width]
    }

    fn hidden_off(&self, h: usize) -> usize {
        // offset of the W block for hidden transition h (1-based, h in 1..depth)
        self.width * self.dim + self.width + (h - 1) * (self.width * self.width + self.width)
    }

    fn out_off(&self) -> usize {
        self.hidden_off(self.depth)
    }
}

/// A trial-function network.
#[derive(Debug, Clone)]
pub enum Net {
    TwoLayer(TwoLayerNet),
    Mlp(Mlp),
}

impl Net {
    pub fn dim(&self) -> usize {
        match self {
            Net::TwoLayer(n) => n.dim,
            Net::Mlp(n) => n.dim,
        }
    }

    pub fn param_len(&self) -> usize {
        match self {
            Net::TwoLayer(n) => n.params.len(),
            Net::Mlp(n) => n.params.len(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Net::TwoLayer(n) => &n.params,
            Net::Mlp(n) => &n.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Net::TwoLayer(n) => &mut n.params,
            Net::Mlp(n) => &mut n.params,
        }
    }

    /// Value `N(x)`.
    pub fn forward(&self, x: &[f64], ws: &mut Workspace) -> f64 {
        self.forward_impl(x, ws, false).0
    }

    /// Value and exact spatial gradient, written into `grad_out`.
    pub fn forward_with_grad(&self, x: &[f64], ws: &mut Workspace, grad_out: &mut [f64]) -> f64 {
        let (v, _) = self.forward_impl(x, ws, true);
        grad_out.copy_from_slice(&ws.net_grad);
        v
    }

    fn forward_impl(&self, x: &[f64], ws: &mut Workspace, with_grad: bool) -> (f64, ()) {
        match self {
            Net::TwoLayer(n) => {
                let mut val = n.c();
                ws.net_grad.fill(0.0);
                for i in 0..n.neurons {
                    let w = n.weight(i);
                    let z: f64 =
                        w.iter().zip(x).map(|(wq, xq)| wq * xq).sum::<f64>() - n.bias(i);
                    let (f, df, _) = n.activation.eval2(z);
                    let g = n.gamma(i);
                    val += g * f;
                    if with_grad {
                        let gd = g * df;
                        for (acc, wq) in ws.net_grad.iter_mut().zip(w) {
                            *acc += gd * wq;
                        }
                    }
                }
                (val, ())
            }
            Net::Mlp(n) => {
                let v = mlp_forward(n, x, ws, with_grad);
                (v, ())
            }
        }
    }

    /// Accumulates into `acc` the parameter gradient of
    /// `a·N(x) + Σ_q b[q]·(∇ₓN(x))_q` — the reverse pass over the combined
    /// value/spatial-gradient computation.
    pub fn backward_add(&self, x: &[f64], a: f64, b: &[f64], ws: &mut Workspace, acc: &mut [f64]) {
        debug_assert_eq!(acc.len(), self.param_len());
        if let (Net::Mlp(n), false) = (self, b.iter().any(|&v| v != 0.0)) {
            // value-only sensitivities (boundary-penalty points): the
            // Jacobian chain carries nothing, so run plain backprop
            return mlp_backward_value(n, x, a, ws, acc);
        }
        match self {
            Net::TwoLayer(n) => {
                acc[0] += a;
                for i in 0..n.neurons {
                    let w = n.weight(i);
                    let z: f64 =
                        w.iter().zip(x).map(|(wq, xq)| wq * xq).sum::<f64>() - n.bias(i);
                    let (f, df, ddf) = n.activation.eval2(z);
                    let bw: f64 = b.iter().zip(w).map(|(bq, wq)| bq * wq).sum();
                    let g = n.gamma(i);
                    acc[1 + i] += a * f + df * bw;
                    let w_off = 1 + n.neurons + i * n.dim;
                    let coef = g * (a * df + ddf * bw);
                    for q in 0..n.dim {
                        acc[w_off + q] += coef * x[q] + g * df * b[q];
                    }
                    acc[1 + n.neurons + n.neurons * n.dim + i] -= coef;
                }
            }
            Net::Mlp(n) => mlp_backward(n, x, a, b, ws, acc),
        }
    }

    /// Scales the represented function by `c` (output-layer parameters only).
    pub fn scale_output(&mut self, c: f64) {
        match self {
            Net::TwoLayer(n) => {
                let m = n.neurons;
                for p in &mut n.params[..1 + m] {
                    *p *= c;
                }
            }
            Net::Mlp(n) => {
                let off = n.out_off();
                for p in &mut n.params[off..] {
                    *p *= c;
                }
            }
        }
    }

    /// FNV-style hash of the exact parameter bits; used to verify frozen
    /// deflation entries are untouched.
    pub fn param_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.params() {
            p.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn header(&self) -> String {
        match self {
            Net::TwoLayer(n) => format!(
                "twolayer dim {} neurons {} act {}",
                n.dim,
                n.neurons,
                n.activation.tag()
            ),
            Net::Mlp(n) => format!(
                "mlp dim {} width {} depth {} seed {}",
                n.dim,
                n.width,
                n.depth,
                n.init_seed.map_or("none".into(), |s| s.to_string())
            ),
        }
    }

    /// Serializes as a shape header plus one parameter per line. The `f64`
    /// display form round-trips exactly.
    pub fn save_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "eigenritz-params v1");
        let _ = writeln!(out, "{}", self.header());
        let _ = writeln!(out, "{}", self.param_len());
        for p in self.params() {
            let _ = writeln!(out, "{p}");
        }
        out
    }

    pub fn load_text(text: &str) -> Result<Net, NetError> {
        let mut lines = text.lines();
        let magic = lines.next().ok_or_else(|| NetError::Parse("empty file".into()))?;
        if magic.trim() != "eigenritz-params v1" {
            return Err(NetError::Parse(format!("bad magic {magic:?}")));
        }
        let header = lines.next().ok_or_else(|| NetError::Parse("missing header".into()))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        let count: usize = lines
            .next()
            .ok_or_else(|| NetError::Parse("missing count".into()))?
            .trim()
            .parse()
            .map_err(|e| NetError::Parse(format!("bad count: {e}")))?;
        let params: Vec<f64> = lines
            .take(count)
            .map(|l| l.trim().parse::<f64>().map_err(|e| NetError::Parse(format!("{e}"))))
            .collect::<Result<_, _>>()?;
        if params.len() != count {
            return Err(NetError::Parse(format!(
                "expected {count} parameters, found {}",
                params.len()
            )));
        }
        match toks.first() {
            Some(&"twolayer") => {
                let get = |key: &str| -> Result<&str, NetError> {
                    toks.windows(2)
                        .find(|w| w[0] == key)
                        .map(|w| w[1])
                        .ok_or_else(|| NetError::Parse(format!("missing {key}")))
                };
                let dim: usize =
                    get("dim")?.parse().map_err(|e| NetError::Parse(format!("{e}")))?;
                let neurons: usize =
                    get("neurons")?.parse().map_err(|e| NetError::Parse(format!("{e}")))?;
                let activation = Activation::from_tag(get("act")?)?;
                if params.len() != 1 + neurons * (2 + dim) {
                    return Err(NetError::Parse("parameter count mismatch".into()));
                }
                Ok(Net::TwoLayer(TwoLayerNet { dim, neurons, activation, params, budget: None }))
            }
            Some(&"mlp") => {
                let get = |key: &str| -> Result<&str, NetError> {
                    toks.windows(2)
                        .find(|w| w[0] == key)
                        .map(|w| w[1])
                        .ok_or_else(|| NetError::Parse(format!("missing {key}")))
                };
                let dim: usize =
                    get("dim")?.parse().map_err(|e| NetError::Parse(format!("{e}")))?;
                let width: usize =
                    get("width")?.parse().map_err(|e| NetError::Parse(format!("{e}")))?;
                let depth: usize =
                    get("depth")?.parse().map_err(|e| NetError::Parse(format!("{e}")))?;
                let init_seed = match get("seed")? {
                    "none" => None,
                    s => Some(s.parse().map_err(|e| NetError::Parse(format!("{e}")))?),
                };
                if params.len() != Mlp::param_count(dim, width, depth) {
                    return Err(NetError::Parse("parameter count mismatch".into()));
                }
                Ok(Net::Mlp(Mlp { dim, width, depth, params, init_seed }))
            }
            other => Err(NetError::Parse(format!("unknown net kind {other:?}"))),
        }
    }
}

/// Per-thread scratch buffers for network evaluation. Reusing one workspace
/// across the samples of a batch keeps the hot loop allocation-free.
#[derive(Debug, Clone)]
pub struct Workspace {
    dim: usize,
    width: usize,
    depth: usize,
    /// activations r_h, per layer
    r: Vec<f64>,
    /// pre-activation Jacobians A_h = W_h J_{h-1}, per layer (width × dim)
    a: Vec<f64>,
    /// activation Jacobians J_h = σ'(z_h) ⊙ A_h, per layer (width × dim)
    j: Vec<f64>,
    rbar: Vec<f64>,
    rbar_next: Vec<f64>,
    jbar: Vec<f64>,
    jbar_next: Vec<f64>,
    abar: Vec<f64>,
    zbar: Vec<f64>,
    net_grad: Vec<f64>,
    pub(crate) phi_grad: Vec<f64>,
}

impl Workspace {
    pub fn for_net(net: &Net) -> Self {
        let (dim, width, depth) = match net {
            Net::TwoLayer(n) => (n.dim, 0, 0),
            Net::Mlp(n) => (n.dim, n.width, n.depth),
        };
        let wd = width * dim;
        Workspace {
            dim,
            width,
            depth,
            r: vec![0.0; width * depth],
            a: vec![0.0; wd * depth],
            j: vec![0.0; wd * depth],
            rbar: vec![0.0; width],
            rbar_next: vec![0.0; width],
            jbar: vec![0.0; wd],
            jbar_next: vec![0.0; wd],
            abar: vec![0.0; wd],
            zbar: vec![0.0; width],
            net_grad: vec![0.0; dim],
            phi_grad: vec![0.0; dim],
        }
    }
}

// The Jacobian buffers A_h, J_h (and their adjoints) are stored axis-major:
// entry (axis c, unit p) lives at `c*m + p`. Every hot inner loop then runs
// contiguously over the m units.
fn mlp_forward(n: &Mlp, x: &[f64], ws: &mut Workspace, with_grad: bool) -> f64 {
    debug_assert_eq!(x.len(), n.dim);
    debug_assert!(ws.width == n.width && ws.depth == n.depth && ws.dim == n.dim);
    let (m, d) = (n.width, n.dim);
    let wd = m * d;
    // layer 1
    {
        let w1 = n.w1();
        let b1 = n.b1();
        let r = &mut ws.r[..m];
        let a1 = &mut ws.a[..wd];
        let j1 = &mut ws.j[..wd];
        for p in 0..m {
            let row = &w1[p * d..(p + 1) * d];
            let z: f64 = row.iter().zip(x).map(|(w, xq)| w * xq).sum::<f64>() + b1[p];
            let t = z.tanh();
            r[p] = t;
            if with_grad {
                let s1 = 1.0 - t * t;
                for c in 0..d {
                    a1[c * m + p] = row[c];
                    j1[c * m + p] = s1 * row[c];
                }
            }
        }
    }
    // hidden transitions
    for h in 2..=n.depth {
        let off = n.hidden_off(h - 1);
        let w = &n.params[off..off + m * m];
        let b = &n.params[off + m * m..off + m * m + m];
        let (prev, cur) = ws.r.split_at_mut((h - 1) * m);
        let prev_r = &prev[(h - 2) * m..];
        let cur_r = &mut cur[..m];
        for p in 0..m {
            let row = &w[p * m..(p + 1) * m];
            let z: f64 = row.iter().zip(prev_r.iter()).map(|(w, r)| w * r).sum::<f64>() + b[p];
            cur_r[p] = z.tanh();
        }
        if with_grad {
            let (ja, jb) = ws.j.split_at_mut((h - 1) * wd);
            let prev_j = &ja[(h - 2) * wd..];
            let cur_j = &mut jb[..wd];
            let cur_a = &mut ws.a[(h - 1) * wd..h * wd];
            for c in 0..d {
                let prev_jc = &prev_j[c * m..(c + 1) * m];
                let ac = &mut cur_a[c * m..(c + 1) * m];
                for p in 0..m {
                    let row = &w[p * m..(p + 1) * m];
                    ac[p] = row.iter().zip(prev_jc).map(|(w, j)| w * j).sum();
                }
                let jc = &mut cur_j[c * m..(c + 1) * m];
                for p in 0..m {
                    let t = cur_r[p];
                    jc[p] = (1.0 - t * t) * ac[p];
                }
            }
        }
    }
    // output
    let off = n.out_off();
    let wout = &n.params[off..off + m];
    let bout = n.params[off + m];
    let last_r = &ws.r[(n.depth - 1) * m..];
    let val: f64 = wout.iter().zip(last_r).map(|(w, r)| w * r).sum::<f64>() + bout;
    if with_grad {
        let last_j = &ws.j[(n.depth - 1) * wd..];
        for c in 0..d {
            let jc = &last_j[c * m..(c + 1) * m];
            ws.net_grad[c] = wout.iter().zip(jc).map(|(w, j)| w * j).sum();
        }
    }
    val
}

/// Reverse pass for `S = a·N + b·∇ₓN`: recomputes the forward state, then
/// walks the layers backwards carrying sensitivities for both the activation
/// chain (`r̄`) and the Jacobian chain (`J̄`).
fn mlp_backward(n: &Mlp, x: &[f64], a: f64, b: &[f64], ws: &mut Workspace, acc: &mut [f64]) {
    let (m, d) = (n.width, n.dim);
    let wd = m * d;
    mlp_forward(n, x, ws, true);

    // output layer
    let off = n.out_off();
    let wout = &n.params[off..off + m];
    acc[off + m] += a; // b_out
    {
        let last_r = &ws.r[(n.depth - 1) * m..];
        let last_j = &ws.j[(n.depth - 1) * wd..];
        let wacc = &mut acc[off..off + m];
        for p in 0..m {
            wacc[p] += a * last_r[p];
            ws.rbar[p] = a * wout[p];
        }
        for c in 0..d {
            let jc = &last_j[c * m..(c + 1) * m];
            let jbar_c = &mut ws.jbar[c * m..(c + 1) * m];
            let bc = b[c];
            for p in 0..m {
                wacc[p] += jc[p] * bc;
                jbar_c[p] = wout[p] * bc;
            }
        }
    }

    for h in (1..=n.depth).rev() {
        // σ' and σ'' from the stored tanh values
        let r_h = &ws.r[(h - 1) * m..h * m];
        let a_h = &ws.a[(h - 1) * wd..h * wd];
        // Σ_c A[c][p]·J̄[c][p], then z̄ and Ā
        ws.zbar.fill(0.0);
        for c in 0..d {
            let ac = &a_h[c * m..(c + 1) * m];
            let jbar_c = &ws.jbar[c * m..(c + 1) * m];
            for p in 0..m {
                ws.zbar[p] += ac[p] * jbar_c[p];
            }
        }
        for p in 0..m {
            let t = r_h[p];
            let s1 = 1.0 - t * t;
            let s2 = -2.0 * t * s1;
            ws.zbar[p] = s1 * ws.rbar[p] + s2 * ws.zbar[p];
        }
        for c in 0..d {
            let jbar_c = &ws.jbar[c * m..(c + 1) * m];
            let abar_c = &mut ws.abar[c * m..(c + 1) * m];
            for p in 0..m {
                let t = r_h[p];
                abar_c[p] = (1.0 - t * t) * jbar_c[p];
            }
        }
        if h == 1 {
            // W₁ sees both the value path (z̄ xᵀ) and the Jacobian path
            // directly (A₁ = W₁).
            let b1_off = m * d;
            for p in 0..m {
                for c in 0..d {
                    acc[p * d + c] += ws.zbar[p] * x[c] + ws.abar[c * m + p];
                }
                acc[b1_off + p] += ws.zbar[p];
            }
        } else {
            let off = n.hidden_off(h - 1);
            let w = &n.params[off..off + m * m];
            let prev_r = &ws.r[(h - 2) * m..(h - 1) * m];
            let prev_j = &ws.j[(h - 2) * wd..(h - 1) * wd];
            ws.rbar_next.fill(0.0);
            ws.jbar_next.fill(0.0);
            for p in 0..m {
                let zb = ws.zbar[p];
                let wrow = &w[p * m..(p + 1) * m];
                let wacc = &mut acc[off + p * m..off + (p + 1) * m];
                for q in 0..m {
                    wacc[q] += zb * prev_r[q];
                    ws.rbar_next[q] += wrow[q] * zb;
                }
                for c in 0..d {
                    let ab = ws.abar[c * m + p];
                    let prev_jc = &prev_j[c * m..(c + 1) * m];
                    let jbar_next_c = &mut ws.jbar_next[c * m..(c + 1) * m];
                    for q in 0..m {
                        wacc[q] += ab * prev_jc[q];
                        jbar_next_c[q] += wrow[q] * ab;
                    }
                }
                acc[off + m * m + p] += zb;
            }
            std::mem::swap(&mut ws.rbar, &mut ws.rbar_next);
            std::mem::swap(&mut ws.jbar, &mut ws.jbar_next);
        }
    }
}

/// Plain value-path backprop of `a·N(x)`, used when the spatial-gradient
/// sensitivities vanish.
fn mlp_backward_value(n: &Mlp, x: &[f64], a: f64, ws: &mut Workspace, acc: &mut [f64]) {
    let m = n.width;
    mlp_forward(n, x, ws, false);
    let off = n.out_off();
    let wout = &n.params[off..off + m];
    acc[off + m] += a;
    {
        let last_r = &ws.r[(n.depth - 1) * m..];
        let wacc = &mut acc[off..off + m];
        for p in 0..m {
            wacc[p] += a * last_r[p];
            ws.rbar[p] = a * wout[p];
        }
    }
    for h in (1..=n.depth).rev() {
        let r_h = &ws.r[(h - 1) * m..h * m];
        for p in 0..m {
            let t = r_h[p];
            ws.zbar[p] = (1.0 - t * t) * ws.rbar[p];
        }
        if h == 1 {
            let d = n.dim;
            let b1_off = m * d;
            for p in 0..m {
                for c in 0..d {
                    acc[p * d + c] += ws.zbar[p] * x[c];
                }
                acc[b1_off + p] += ws.zbar[p];
            }
        } else {
            let off = n.hidden_off(h - 1);
            let w = &n.params[off..off + m * m];
            let prev_r = &ws.r[(h - 2) * m..(h - 1) * m];
            ws.rbar_next.fill(0.0);
            for p in 0..m {
                let zb = ws.zbar[p];
                let wrow = &w[p * m..(p + 1) * m];
                let wacc = &mut acc[off + p * m..off + (p + 1) * m];
                for q in 0..m {
                    wacc[q] += zb * prev_r[q];
                    ws.rbar_next[q] += wrow[q] * zb;
                }
                acc[off + m * m + p] += zb;
            }
            std::mem::swap(&mut ws.rbar, &mut ws.rbar_next);
        }
    }
}

/// A trial function `u(x) = φ(x)·N(x; θ)`: network times cut-off, vanishing
/// identically on the boundary.
#[derive(Debug, Clone)]
pub struct TrialFn {
    pub net: Net,
    pub cutoff: CutoffFn,
}

impl TrialFn {
    pub fn new(net: Net, cutoff: CutoffFn) -> Result<Self, NetError> {
        if net.dim() != cutoff.dim() {
            return Err(NetError::ShapeMismatch(format!(
                "net dimension {} vs cutoff dimension {}",
                net.dim(),
                cutoff.dim()
            )));
        }
        Ok(TrialFn { net, cutoff })
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::for_net(&self.net)
    }

    /// `u = φ·N` and `∇u = N∇φ + φ∇N` at an interior point; the gradient is
    /// written into `grad_u`.
    pub fn eval_into(
        &self,
        x: &[f64],
        ws: &mut Workspace,
        grad_u: &mut [f64],
    ) -> Result<f64, CutoffError> {
        let d = x.len();
        let mut phi_grad = std::mem::take(&mut ws.phi_grad);
        let phi = self.cutoff.eval_interior_into(x, &mut phi_grad)?;
        let nval = self.net.forward_with_grad(x, ws, grad_u);
        for q in 0..d {
            grad_u[q] = nval * phi_grad[q] + phi * grad_u[q];
        }
        ws.phi_grad = phi_grad;
        Ok(phi * nval)
    }

    /// Allocating convenience wrapper around [`TrialFn::eval_into`].
    pub fn eval(&self, x: &[f64], ws: &mut Workspace) -> Result<(f64, Vec<f64>), CutoffError> {
        let mut g = vec![0.0; x.len()];
        let v = self.eval_into(x, ws, &mut g)?;
        Ok((v, g))
    }

    /// Value only, with the continuous boundary extension (0 on `∂Ω`).
    pub fn value(&self, x: &[f64], ws: &mut Workspace) -> f64 {
        let phi = self.cutoff.value(x);
        if phi == 0.0 {
            return 0.0;
        }
        phi * self.net.forward(x, ws)
    }

    /// Accumulates the parameter gradient of `a·u(x) + b·∇u(x)`. The cut-off
    /// carries no parameters, so sensitivities transfer onto the network as
    /// `a_N = a·φ + b·∇φ` and `b_N = φ·b`.
    pub fn backward_add(
        &self,
        x: &[f64],
        a: f64,
        b: &[f64],
        ws: &mut Workspace,
        acc: &mut [f64],
    ) -> Result<(), CutoffError> {
        let d = x.len();
        let mut phi_grad = std::mem::take(&mut ws.phi_grad);
        let phi = self.cutoff.eval_interior_into(x, &mut phi_grad)?;
        let mut a_n = a * phi;
        let mut b_n = vec![0.0; d];
        for q in 0..d {
            a_n += b[q] * phi_grad[q];
            b_n[q] = phi * b[q];
        }
        ws.phi_grad = phi_grad;
        self.net.backward_add(x, a_n, &b_n, ws, acc);
        Ok(())
    }

    pub fn param_hash(&self) -> u64 {
        self.net.param_hash()
    }
}

/// Exact gradient of `Σ_i [a_i·u(X_i) + b_i·∇ₓu(X_i)]` with respect to all
/// network parameters, for loss-supplied sensitivity vectors.
pub fn backward_params(
    u: &TrialFn,
    batch: &SampleBatch,
    sens_val: &[f64],
    sens_grad: &[f64],
) -> Result<Vec<f64>, NetError> {
    let n = batch.len();
    let d = batch.dim();
    if sens_val.len() != n || sens_grad.len() != n * d {
        return Err(NetError::ShapeMismatch(format!(
            "batch of {n}×{d} vs sensitivities {} / {}",
            sens_val.len(),
            sens_grad.len()
        )));
    }
    let mut ws = u.workspace();
    let mut acc = vec![0.0; u.net.param_len()];
    for (i, x) in batch.iter().enumerate() {
        u.backward_add(x, sens_val[i], &sens_grad[i * d..(i + 1) * d], &mut ws, &mut acc)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutoff::CutoffKind;
    use crate::problem::Domain;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn rng_f64(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[test]
    fn softplus_examples() {
        assert_relative_eq!(softplus_scaled(0.0, 9.0), 2f64.ln() / 9.0, epsilon = 1e-15);
        assert_relative_eq!(softplus_scaled(2.0, 100.0), 2.0, epsilon = 1e-12);
        // |ReLU(z) - SP_τ(z)| ≤ e^{-τ|z|}/τ on a grid over [-2, 2]
        let tau = 9.0;
        for i in 0..=400 {
            let z = -2.0 + i as f64 * 0.01;
            let relu = z.max(0.0);
            let diff = (relu - softplus_scaled(z, tau)).abs();
            assert!(diff <= (-tau * z.abs()).exp() / tau + 1e-15, "z = {z}");
        }
    }

    #[test]
    fn constant_net_with_sine_cutoff_is_sine() {
        let dom = Domain::hypercube(0.0, 1.0, 1).unwrap();
        let cutoff = CutoffFn::new(CutoffKind::SineReciprocal, dom).unwrap();
        let net = Net::TwoLayer(TwoLayerNet::constant(1, 1.0));
        let u = TrialFn::new(net, cutoff).unwrap();
        let mut ws = u.workspace();
        for x in [0.12, 0.5, 0.83] {
            let (v, g) = u.eval(&[x], &mut ws).unwrap();
            assert_relative_eq!(v, (PI * x).sin(), epsilon = 1e-14);
            assert_relative_eq!(g[0], PI * (PI * x).cos(), epsilon = 1e-13);
        }
    }

    #[test]
    fn trial_vanishes_on_faces() {
        let dom = Domain::hypercube(-1.0, 1.0, 2).unwrap();
        let cutoff = CutoffFn::new(CutoffKind::ProductQuadratic, dom).unwrap();
        let net = Net::Mlp(Mlp::init(2, 8, 2, 3));
        let u = TrialFn::new(net, cutoff).unwrap();
        let mut ws = u.workspace();
        assert_eq!(u.value(&[1.0, 0.3], &mut ws), 0.0);
        assert_eq!(u.value(&[-0.2, -1.0], &mut ws), 0.0);
    }

    #[test]
    fn exact_boundary_invariant_over_samples() {
        let dom = Domain::hypercube(-1.0, 1.0, 3).unwrap();
        let cutoff = CutoffFn::new(CutoffKind::ProductCosine, dom.clone()).unwrap();
        let net = Net::Mlp(Mlp::init(3, 10, 2, 9));
        let u = TrialFn::new(net, cutoff).unwrap();
        let mut ws = u.workspace();
        let boundary = crate::problem::sample_boundary(&dom, 10_000, 4);
        let mut max_n: f64 = 0.0;
        for p in boundary.iter() {
            max_n = max_n.max(u.net.forward(p, &mut ws).abs());
        }
        for p in boundary.iter() {
            assert!(u.value(p, &mut ws).abs() <= 1e-12 * (1.0 + max_n));
        }
    }

    #[test]
    fn mlp_spatial_gradient_matches_finite_differences() {
        let net = Net::Mlp(Mlp::init(3, 12, 3, 7));
        let mut ws = Workspace::for_net(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng_f64(&mut rng) * 2.0 - 1.0).collect();
            let mut g = vec![0.0; 3];
            net.forward_with_grad(&x, &mut ws, &mut g);
            let h = 1e-5;
            let mut xp = x.clone();
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            for q in 0..3 {
                xp[q] = x[q] + h;
                let fp = net.forward(&xp, &mut ws);
                xp[q] = x[q] - h;
                let fm = net.forward(&xp, &mut ws);
                xp[q] = x[q];
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[q]).abs() / gn < 1e-6, "{} vs {}", g[q], fd);
            }
        }
    }

    #[test]
    fn trial_spatial_gradient_matches_finite_differences() {
        let dom = Domain::hypercube(-1.0, 1.0, 2).unwrap();
        let cutoff = CutoffFn::new(CutoffKind::ReciprocalCosine, dom).unwrap();
        let net = Net::Mlp(Mlp::init(2, 10, 3, 11));
        let u = TrialFn::new(net, cutoff).unwrap();
        let mut ws = u.workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| 1.6 * rng_f64(&mut rng) - 0.8).collect();
            let (_, g) = u.eval(&x, &mut ws).unwrap();
            let h = 1e-5;
            let mut xp = x.clone();
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            for q in 0..2 {
                xp[q] = x[q] + h;
                let fp = u.value(&xp, &mut ws);
                xp[q] = x[q] - h;
                let fm = u.value(&xp, &mut ws);
                xp[q] = x[q];
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[q]).abs() / gn < 1e-6);
            }
        }
    }

    #[test]
    fn zero_sensitivities_give_zero_gradient() {
        let dom = Domain::hypercube(0.0, 1.0, 2).unwrap();
        let cutoff = CutoffFn::new(CutoffKind::SineReciprocal, dom.clone()).unwrap();
        let u = TrialFn::new(Net::Mlp(Mlp::init(2, 6, 2, 1)), cutoff).unwrap();
        let batch = crate::problem::sample_interior(&dom, 16, 2).unwrap();
        let grad =
            backward_params(&u, &batch, &[0.0; 16], &[0.0; 32]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_params_matches_finite_differences_mlp() {
        // random small MLP (d=2, m=4, l=2), random sensitivities
        let dom = Domain::hypercube(0.0, 1.0, 2).unwrap();
        let cutoff = CutoffFn::new(CutoffKind::SineReciprocal, dom.clone()).unwrap();
        let u = TrialFn::new(Net::Mlp(Mlp::init(2, 4, 2, 13)), cutoff.clone()).unwrap();
        let batch = crate::problem::sample_interior(&dom, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let av: Vec<f64> = (0..8).map(|_| rng_f64(&mut rng) * 2.0 - 1.0).collect();
        let bv: Vec<f64> = (0..16).map(|_| rng_f64(&mut rng) * 2.0 - 1.0).collect();
        let grad = backward_params(&u, &batch, &av, &bv).unwrap();

        let objective = |trial: &TrialFn| -> f64 {
            let mut ws = trial.workspace();
            let mut s = 0.0;
            for (i, x) in batch.iter().enumerate() {
                let (v, g) = trial.eval(x, &mut ws).unwrap();
                s += av[i] * v + bv[i * 2] * g[0] + bv[i * 2 + 1] * g[1];
            }
            s
        };
        let h = 1e-6;
        let scale = grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-9);
        for j in 0..u.net.param_len() {
            let mut up = u.clone();
            up.net.params_mut()[j] += h;
            let mut dn = u.clone();
            dn.net.params_mut()[j] -= h;
            let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() / scale < 1e-5,
                "param {j}: analytic {} vs fd {fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn backward_params_matches_finite_differences_two_layer() {
        let dom = Domain::hypercube(-1.0, 1.0, 2).unwrap();
        let cutoff = CutoffFn::new(CutoffKind::ProductQuadratic, dom.clone()).unwrap();
        let neurons = vec![
            Neuron { gamma: 0.7, weight: vec![0.3, -0.6], bias: 0.2 },
            Neuron { gamma: -0.4, weight: vec![-0.5, 0.1], bias: -0.3 },
            Neuron { gamma: 0.9, weight: vec![0.2, 0.8], bias: 0.05 },
        ];
        for act in [Activation::Softplus { tau: 4.0 }, Activation::CosPi, Activation::SinPi] {
            let u = TrialFn::new(
                Net::TwoLayer(TwoLayerNet::new(2, act, 0.3, neurons.clone())),
                cutoff.clone(),
            )
            .unwrap();
            let batch = crate::problem::sample_interior(&dom, 6, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let av: Vec<f64> = (0..6).map(|_| rng_f64(&mut rng) * 2.0 - 1.0).collect();
            let bv: Vec<f64> = (0..12).map(|_| rng_f64(&mut rng) * 2.0 - 1.0).collect();
            let grad = backward_params(&u, &batch, &av, &bv).unwrap();
            let objective = |trial: &TrialFn| -> f64 {
                let mut ws = trial.workspace();
                let mut s = 0.0;
                for (i, x) in batch.iter().enumerate() {
                    let (v, g) = trial.eval(x, &mut ws).unwrap();
                    s += av[i] * v + bv[i * 2] * g[0] + bv[i * 2 + 1] * g[1];
                }
                s
            };
            let h = 1e-6;
            let scale = grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-9);
            for j in 0..u.net.param_len() {
                let mut up = u.clone();
                up.net.params_mut()[j] += h;
                let mut dn = u.clone();
                dn.net.params_mut()[j] -= h;
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() / scale < 1e-5,
                    "{act:?} param {j}: {} vs {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn cosine_neuron_matches_hand_derivative() {
        // single neuron u = γ cos(π(w·x - t))·φ at one point; derivative in γ
        // is φ cos(π z) for the value path plus the gradient-path terms
        let dom = Domain::hypercube(-1.0, 1.0, 2).unwrap();
        let cutoff = CutoffFn::new(CutoffKind::ProductQuadratic, dom).unwrap();
        let gamma = 0.8;
        let w = [0.6, -0.4];
        let t = 0.25;
        let net = TwoLayerNet::new(
            2,
            Activation::CosPi,
            0.0,
            vec![Neuron { gamma, weight: w.to_vec(), bias: t }],
        );
        let u = TrialFn::new(Net::TwoLayer(net), cutoff.clone()).unwrap();
        let x = [0.3, 0.5];
        let (a, b) = (1.3, [0.7, -0.2]);

        let z = w[0] * x[0] + w[1] * x[1] - t;
        let (f, df, ddf) = (
            (PI * z).cos(),
            -PI * (PI * z).sin(),
            -PI * PI * (PI * z).cos(),
        );
        let phi = (1.0 - x[0] * x[0]) * (1.0 - x[1] * x[1]);
        let dphi = [
            -2.0 * x[0] * (1.0 - x[1] * x[1]),
            -2.0 * x[1] * (1.0 - x[0] * x[0]),
        ];
        // sensitivities transferred onto N
        let a_n = a * phi + b[0] * dphi[0] + b[1] * dphi[1];
        let b_n = [phi * b[0], phi * b[1]];
        let bw = b_n[0] * w[0] + b_n[1] * w[1];
        let expect_c = a_n;
        let expect_gamma = a_n * f + df * bw;
        let expect_w = [
            gamma * ((a_n * df + ddf * bw) * x[0] + df * b_n[0]),
            gamma * ((a_n * df + ddf * bw) * x[1] + df * b_n[1]),
        ];
        let expect_t = -gamma * (a_n * df + ddf * bw);

        let mut ws = u.workspace();
        let mut acc = vec![0.0; u.net.param_len()];
        u.backward_add(&x, a, &b, &mut ws, &mut acc).unwrap();
        assert_relative_eq!(acc[0], expect_c, epsilon = 1e-13);
        assert_relative_eq!(acc[1], expect_gamma, epsilon = 1e-13);
        assert_relative_eq!(acc[2], expect_w[0], epsilon = 1e-13);
        assert_relative_eq!(acc[3], expect_w[1], epsilon = 1e-13);
        assert_relative_eq!(acc[4], expect_t, epsilon = 1e-13);
    }

    #[test]
    fn mixed_partials_agree_both_ways() {
        // d/dθ of ∇ₓN (reverse pass, b = e_q) vs ∇ₓ of dN/dθ (finite
        // differences in x of the value-path gradient)
        let net = Net::Mlp(Mlp::init(2, 4, 2, 21));
        let mut ws = Workspace::for_net(&net);
        let x = [0.37, -0.21];
        let n_params = net.param_len();

        for q in 0..2 {
            let mut b = [0.0, 0.0];
            b[q] = 1.0;
            let mut dgrad_dtheta = vec![0.0; n_params];
            net.backward_add(&x, 0.0, &b, &mut ws, &mut dgrad_dtheta);

            // finite-difference in x of the value-path parameter gradient
            let h = 1e-5;
            let mut xp = x;
            xp[q] += h;
            let mut gp = vec![0.0; n_params];
            net.backward_add(&xp, 1.0, &[0.0, 0.0], &mut ws, &mut gp);
            xp[q] = x[q] - h;
            let mut gm = vec![0.0; n_params];
            net.backward_add(&xp, 1.0, &[0.0, 0.0], &mut ws, &mut gm);
            let scale = dgrad_dtheta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            for j in 0..n_params {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                assert!(
                    (fd - dgrad_dtheta[j]).abs() / scale < 1e-6,
                    "param {j} axis {q}: {} vs {fd}",
                    dgrad_dtheta[j]
                );
            }
        }
    }

    #[test]
    fn theory_constraints_enforced() {
        let good = TwoLayerNet::new(
            2,
            Activation::Relu,
            0.5,
            vec![Neuron { gamma: 1.0, weight: vec![0.5, -0.5], bias: 0.3 }],
        );
        assert!(good.with_theory_constraints(1.0, false).is_ok());
        let bad_w = TwoLayerNet::new(
            2,
            Activation::Relu,
            0.5,
            vec![Neuron { gamma: 1.0, weight: vec![0.5, -0.6], bias: 0.3 }],
        );
        assert!(bad_w.with_theory_constraints(1.0, false).is_err());
        let bad_gamma = TwoLayerNet::new(
            2,
            Activation::Relu,
            0.5,
            vec![Neuron { gamma: 5.0, weight: vec![1.0, 0.0], bias: 0.0 }],
        );
        assert!(bad_gamma.with_theory_constraints(1.0, false).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let net = Net::Mlp(Mlp::init(3, 5, 2, 77));
        let text = net.save_text();
        let loaded = Net::load_text(&text).unwrap();
        assert_eq!(net.params(), loaded.params());
        assert_eq!(net.param_hash(), loaded.param_hash());

        let two = Net::TwoLayer(TwoLayerNet::new(
            2,
            Activation::Softplus { tau: 9.0 },
            0.1,
            vec![Neuron { gamma: -0.2, weight: vec![0.4, 0.6], bias: 0.9 }],
        ));
        let loaded = Net::load_text(&two.save_text()).unwrap();
        assert_eq!(two.params(), loaded.params());
        match loaded {
            Net::TwoLayer(n) => assert_eq!(n.activation, Activation::Softplus { tau: 9.0 }),
            _ => panic!("wrong kind"),
        }
    }
}
