//! Benchmark right-hand sides, ground-truth integration, and the fixed-step
//! RK4 flow map used by the simulation-error loss and forward prediction.
//!
//! Ground truth uses adaptive Dormand-Prince 4(5) at tolerance 1e-12,
//! sub-stepped onto the uniform output grid. Candidate-model rollouts use
//! classical RK4 at the data time step.

use crate::error::{Error, Result};
use crate::library::LibrarySpec;
use nalgebra::DMatrix;

/// States above this magnitude mark a candidate-model rollout as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Uniformly sampled multivariate time series. Sample `k` corresponds to
/// time `t0 + k * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    /// N×D state matrix.
    pub states: DMatrix<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum SystemKind {
    Lorenz { sigma: f64, rho: f64, beta: f64 },
    Rossler { a: f64, b: f64, c: f64 },
    Lorenz96 { forcing: f64 },
    VanDerPol { mu: f64 },
    Duffing { p1: f64, p2: f64, p3: f64 },
    Cubic { p1: f64, p2: f64, p3: f64, p4: f64 },
    Lotka { p1: f64, p2: f64 },
    LorenzModified,
    LorenzKnown,
}

/// A named benchmark system: dimension, parameters, and rhs evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub name: String,
    pub dim: usize,
    pub params: Vec<(String, f64)>,
    kind: SystemKind,
}

/// A known partial model `g` for discrepancy identification. The candidate
/// library then only has to capture `f - g`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownModel {
    pub system: SystemSpec,
}

impl KnownModel {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(KnownModel {
            system: SystemSpec::preset(name)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.system.dim
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.system.rhs(x, out);
    }

    pub fn jacobian(&self, x: &[f64], jac: &mut [f64]) {
        self.system.jacobian(x, jac);
    }
}

fn params(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
    pairs.iter().map(|&(n, v)| (n.to_string(), v)).collect()
}

impl SystemSpec {
    /// Look up a benchmark system by name.
    pub fn preset(name: &str) -> Result<Self> {
        let (dim, params, kind) = match name {
            "lorenz" => (
                3,
                params(&[("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)]),
                SystemKind::Lorenz {
                    sigma: 10.0,
                    rho: 28.0,
                    beta: 8.0 / 3.0,
                },
            ),
            "rossler" => (
                3,
                params(&[("a", 0.2), ("b", 0.2), ("c", 5.7)]),
                SystemKind::Rossler {
                    a: 0.2,
                    b: 0.2,
                    c: 5.7,
                },
            ),
            "lorenz96" => (
                6,
                params(&[("F", 8.0)]),
                SystemKind::Lorenz96 { forcing: 8.0 },
            ),
            "vanderpol" => (
                2,
                params(&[("mu", 0.5)]),
                SystemKind::VanDerPol { mu: 0.5 },
            ),
            "duffing" => (
                2,
                params(&[("p1", 0.2), ("p2", 0.1), ("p3", 1.0)]),
                SystemKind::Duffing {
                    p1: 0.2,
                    p2: 0.1,
                    p3: 1.0,
                },
            ),
            "cubic" => (
                2,
                params(&[("p1", -0.1), ("p2", 2.0), ("p3", -2.0), ("p4", -1.0)]),
                SystemKind::Cubic {
                    p1: -0.1,
                    p2: 2.0,
                    p3: -2.0,
                    p4: -1.0,
                },
            ),
            "lotka" => (
                2,
                params(&[("p1", 1.0), ("p2", 0.5)]),
                SystemKind::Lotka { p1: 1.0, p2: 0.5 },
            ),
            "lorenz_modified" => (3, params(&[]), SystemKind::LorenzModified),
            "lorenz_known" => (3, params(&[]), SystemKind::LorenzKnown),
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        Ok(SystemSpec {
            name: name.to_string(),
            dim,
            params,
            kind,
        })
    }

    /// All preset names, for CLI listings and the parameter-audit test.
    pub fn preset_names() -> &'static [&'static str] {
        &[
            "lorenz",
            "rossler",
            "lorenz96",
            "vanderpol",
            "duffing",
            "cubic",
            "lotka",
            "lorenz_modified",
            "lorenz_known",
        ]
    }

    /// Evaluate the right-hand side, no contract checks (hot path).
    pub fn rhs(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            SystemKind::Lorenz { sigma, rho, beta } => {
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - beta * x[2];
            }
            SystemKind::Rossler { a, b, c } => {
                out[0] = -x[1] - x[2];
                out[1] = x[0] + a * x[1];
                out[2] = b + x[2] * (x[0] - c);
            }
            SystemKind::Lorenz96 { forcing } => {
                let s = self.dim;
                for i in 0..s {
                    let ip1 = (i + 1) % s;
                    let im1 = (i + s - 1) % s;
                    let im2 = (i + s - 2) % s;
                    out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
                }
            }
            SystemKind::VanDerPol { mu } => {
                out[0] = x[1];
                out[1] = mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
            }
            SystemKind::Duffing { p1, p2, p3 } => {
                out[0] = x[1];
                out[1] = -p1 * x[1] - p2 * x[0] - p3 * x[0] * x[0] * x[0];
            }
            SystemKind::Cubic { p1, p2, p3, p4 } => {
                let x3 = x[0] * x[0] * x[0];
                let y3 = x[1] * x[1] * x[1];
                out[0] = p1 * x3 + p2 * y3;
                out[1] = p3 * x3 + p4 * y3;
            }
            SystemKind::Lotka { p1, p2 } => {
                out[0] = p1 * x[0] - p2 * x[0] * x[1];
                out[1] = p2 * x[0] * x[1] - 2.0 * p1 * x[0];
            }
            SystemKind::LorenzModified => {
                out[0] = -10.0 * x[0] + 10.0 * x[1] + x[0] * x[1];
                out[1] = 28.0 * x[0] - x[0] * x[2] - x[1] + 3.0 * x[2];
                out[2] = x[0] * x[1] - 8.0 / 3.0 * x[2];
            }
            SystemKind::LorenzKnown => {
                out[0] = -9.5 * x[0] + 10.5 * x[1];
                out[1] = 27.6 * x[0] - 1.1 * x[0] * x[2] - 0.9 * x[1];
                out[2] = 1.05 * x[0] * x[1] - 2.6 * x[2];
            }
        }
    }

    /// Jacobian `jac[d * dim + e] = d f_d / d x_e`, row-major.
    pub fn jacobian(&self, x: &[f64], jac: &mut [f64]) {
        let dim = self.dim;
        debug_assert_eq!(jac.len(), dim * dim);
        jac.fill(0.0);
        match &self.kind {
            SystemKind::Lorenz { sigma, rho, beta } => {
                jac[0] = -sigma;
                jac[1] = *sigma;
                jac[3] = rho - x[2];
                jac[4] = -1.0;
                jac[5] = -x[0];
                jac[6] = x[1];
                jac[7] = x[0];
                jac[8] = -beta;
            }
            SystemKind::Rossler { a, c, .. } => {
                jac[1] = -1.0;
                jac[2] = -1.0;
                jac[3] = 1.0;
                jac[4] = *a;
                jac[6] = x[2];
                jac[8] = x[0] - c;
            }
            SystemKind::Lorenz96 { .. } => {
                let s = dim;
                for i in 0..s {
                    let ip1 = (i + 1) % s;
                    let im1 = (i + s - 1) % s;
                    let im2 = (i + s - 2) % s;
                    jac[i * s + ip1] += x[im1];
                    jac[i * s + im2] += -x[im1];
                    jac[i * s + im1] += x[ip1] - x[im2];
                    jac[i * s + i] += -1.0;
                }
            }
            SystemKind::VanDerPol { mu } => {
                jac[1] = 1.0;
                jac[2] = -2.0 * mu * x[0] * x[1] - 1.0;
                jac[3] = mu * (1.0 - x[0] * x[0]);
            }
            SystemKind::Duffing { p1, p2, p3 } => {
                jac[1] = 1.0;
                jac[2] = -p2 - 3.0 * p3 * x[0] * x[0];
                jac[3] = -p1;
            }
            SystemKind::Cubic { p1, p2, p3, p4 } => {
                jac[0] = 3.0 * p1 * x[0] * x[0];
                jac[1] = 3.0 * p2 * x[1] * x[1];
                jac[2] = 3.0 * p3 * x[0] * x[0];
                jac[3] = 3.0 * p4 * x[1] * x[1];
            }
            SystemKind::Lotka { p1, p2 } => {
                jac[0] = p1 - p2 * x[1];
                jac[1] = -p2 * x[0];
                jac[2] = p2 * x[1] - 2.0 * p1;
                jac[3] = p2 * x[0];
            }
            SystemKind::LorenzModified => {
                jac[0] = -10.0 + x[1];
                jac[1] = 10.0 + x[0];
                jac[3] = 28.0 - x[2];
                jac[4] = -1.0;
                jac[5] = -x[0] + 3.0;
                jac[6] = x[1];
                jac[7] = x[0];
                jac[8] = -8.0 / 3.0;
            }
            SystemKind::LorenzKnown => {
                jac[0] = -9.5;
                jac[1] = 10.5;
                jac[3] = 27.6 - 1.1 * x[2];
                jac[4] = -0.9;
                jac[5] = -1.1 * x[0];
                jac[6] = 1.05 * x[1];
                jac[7] = 1.05 * x[0];
                jac[8] = -2.6;
            }
        }
    }

    /// The exact right-hand side as a list of `(component, exponents, coeff)`
    /// monomials. All presets are polynomial, so this is total.
    pub fn polynomial_terms(&self) -> Vec<(usize, Vec<u32>, f64)> {
        fn e(dim: usize, exps: &[(usize, u32)]) -> Vec<u32> {
            let mut t = vec![0u32; dim];
            for &(d, p) in exps {
                t[d] += p;
            }
            t
        }
        let d = self.dim;
        match &self.kind {
            SystemKind::Lorenz { sigma, rho, beta } => vec![
                (0, e(d, &[(1, 1)]), *sigma),
                (0, e(d, &[(0, 1)]), -sigma),
                (1, e(d, &[(0, 1)]), *rho),
                (1, e(d, &[(0, 1), (2, 1)]), -1.0),
                (1, e(d, &[(1, 1)]), -1.0),
                (2, e(d, &[(0, 1), (1, 1)]), 1.0),
                (2, e(d, &[(2, 1)]), -beta),
            ],
            SystemKind::Rossler { a, b, c } => vec![
                (0, e(d, &[(1, 1)]), -1.0),
                (0, e(d, &[(2, 1)]), -1.0),
                (1, e(d, &[(0, 1)]), 1.0),
                (1, e(d, &[(1, 1)]), *a),
                (2, e(d, &[]), *b),
                (2, e(d, &[(0, 1), (2, 1)]), 1.0),
                (2, e(d, &[(2, 1)]), -c),
            ],
            SystemKind::Lorenz96 { forcing } => {
                let s = d;
                let mut terms = Vec::new();
                for i in 0..s {
                    let ip1 = (i + 1) % s;
                    let im1 = (i + s - 1) % s;
                    let im2 = (i + s - 2) % s;
                    terms.push((i, e(d, &[(ip1, 1), (im1, 1)]), 1.0));
                    terms.push((i, e(d, &[(im2, 1), (im1, 1)]), -1.0));
                    terms.push((i, e(d, &[(i, 1)]), -1.0));
                    terms.push((i, e(d, &[]), *forcing));
                }
                terms
            }
            SystemKind::VanDerPol { mu } => vec![
                (0, e(d, &[(1, 1)]), 1.0),
                (1, e(d, &[(1, 1)]), *mu),
                (1, e(d, &[(0, 2), (1, 1)]), -mu),
                (1, e(d, &[(0, 1)]), -1.0),
            ],
            SystemKind::Duffing { p1, p2, p3 } => vec![
                (0, e(d, &[(1, 1)]), 1.0),
                (1, e(d, &[(1, 1)]), -p1),
                (1, e(d, &[(0, 1)]), -p2),
                (1, e(d, &[(0, 3)]), -p3),
            ],
            SystemKind::Cubic { p1, p2, p3, p4 } => vec![
                (0, e(d, &[(0, 3)]), *p1),
                (0, e(d, &[(1, 3)]), *p2),
                (1, e(d, &[(0, 3)]), *p3),
                (1, e(d, &[(1, 3)]), *p4),
            ],
            SystemKind::Lotka { p1, p2 } => vec![
                (0, e(d, &[(0, 1)]), *p1),
                (0, e(d, &[(0, 1), (1, 1)]), -p2),
                (1, e(d, &[(0, 1), (1, 1)]), *p2),
                (1, e(d, &[(0, 1)]), -2.0 * p1),
            ],
            SystemKind::LorenzModified => vec![
                (0, e(d, &[(0, 1)]), -10.0),
                (0, e(d, &[(1, 1)]), 10.0),
                (0, e(d, &[(0, 1), (1, 1)]), 1.0),
                (1, e(d, &[(0, 1)]), 28.0),
                (1, e(d, &[(0, 1), (2, 1)]), -1.0),
                (1, e(d, &[(1, 1)]), -1.0),
                (1, e(d, &[(2, 1)]), 3.0),
                (2, e(d, &[(0, 1), (1, 1)]), 1.0),
                (2, e(d, &[(2, 1)]), -8.0 / 3.0),
            ],
            SystemKind::LorenzKnown => vec![
                (0, e(d, &[(0, 1)]), -9.5),
                (0, e(d, &[(1, 1)]), 10.5),
                (1, e(d, &[(0, 1)]), 27.6),
                (1, e(d, &[(0, 1), (2, 1)]), -1.1),
                (1, e(d, &[(1, 1)]), -0.9),
                (2, e(d, &[(0, 1), (1, 1)]), 1.05),
                (2, e(d, &[(2, 1)]), -2.6),
            ],
        }
    }
}

/// Evaluate a system preset with contract checks.
pub fn eval_rhs(system: &SystemSpec, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != system.dim {
        return Err(Error::contract(format!(
            "{}: state length {} != dimension {}",
            system.name,
            x.len(),
            system.dim
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::contract(format!("{}: non-finite state", system.name)));
    }
    let mut out = vec![0.0; system.dim];
    system.rhs(x, &mut out);
    Ok(out)
}

/// Ground-truth coefficient matrix (J×D) of `system` in the ordering of
/// `lib`, minus the known part when a partial model is supplied. Returns
/// `None` when some true term is missing from the library.
pub fn true_coefficients(
    system: &SystemSpec,
    known: Option<&KnownModel>,
    lib: &LibrarySpec,
) -> Option<DMatrix<f64>> {
    let mut xi = DMatrix::zeros(lib.len(), system.dim);
    let mut add = |terms: Vec<(usize, Vec<u32>, f64)>, sign: f64| -> bool {
        for (comp, exps, coeff) in terms {
            match lib.terms.iter().position(|t| *t == exps) {
                Some(j) => xi[(j, comp)] += sign * coeff,
                None => return false,
            }
        }
        true
    };
    if !add(system.polynomial_terms(), 1.0) {
        return None;
    }
    if let Some(k) = known {
        if !add(k.system.polynomial_terms(), -1.0) {
            return None;
        }
    }
    Some(xi)
}

/// One classical fourth-order Runge-Kutta step of size `dt`.
pub fn rk4_step(mut f: impl FnMut(&[f64], &mut [f64]), x: &[f64], dt: f64) -> Vec<f64> {
    let d = x.len();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut s = vec![0.0; d];
    f(x, &mut k1);
    for i in 0..d {
        s[i] = x[i] + 0.5 * dt * k1[i];
    }
    f(&s, &mut k2);
    for i in 0..d {
        s[i] = x[i] + 0.5 * dt * k2[i];
    }
    f(&s, &mut k3);
    for i in 0..d {
        s[i] = x[i] + dt * k3[i];
    }
    f(&s, &mut k4);
    let mut out = vec![0.0; d];
    for i in 0..d {
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

// Dormand-Prince 4(5) tableau (autonomous systems, so no c nodes needed).
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand-Prince integration of `f` from `x0`, sampled on the
/// uniform grid `t0 + k*dt_out` for `k = 0..=n_steps`. The integrator
/// sub-steps so every grid point is hit exactly.
pub fn integrate_rk45(
    mut f: impl FnMut(&[f64], &mut [f64]),
    x0: &[f64],
    t0: f64,
    dt_out: f64,
    n_steps: usize,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<DMatrix<f64>> {
    let d = x0.len();
    let mut states = DMatrix::zeros(n_steps + 1, d);
    let mut x = x0.to_vec();
    for (i, &v) in x.iter().enumerate() {
        states[(0, i)] = v;
    }
    let mut k = vec![vec![0.0; d]; 7];
    let mut stage = vec![0.0; d];
    let mut h = dt_out.min(1e-3);
    let mut t = t0;
    // FSAL: k[0] valid when `fsal` is true.
    let mut fsal = false;
    for step in 1..=n_steps {
        let t_target = t0 + step as f64 * dt_out;
        while t < t_target - 1e-12 * dt_out {
            let h_try = h.min(t_target - t);
            if h_try < 1e-14 * dt_out.max(t.abs()) {
                return Err(Error::IntegrationFailure {
                    last_time: t,
                    reason: "step size underflow".to_string(),
                });
            }
            if !fsal {
                f(&x, &mut k[0]);
            }
            for s in 1..7 {
                for i in 0..d {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += DP_A[s - 1][j] * kj[i];
                    }
                    stage[i] = x[i] + h_try * acc;
                }
                f(&stage, &mut k[s]);
            }
            // 5th-order solution and embedded error estimate
            let mut err = 0.0_f64;
            let mut x_new = vec![0.0; d];
            for i in 0..d {
                let mut v5 = 0.0;
                let mut v4 = 0.0;
                for s in 0..7 {
                    v5 += DP_B5[s] * k[s][i];
                    v4 += DP_B4[s] * k[s][i];
                }
                x_new[i] = x[i] + h_try * v5;
                let sc = abs_tol + rel_tol * x[i].abs().max(x_new[i].abs());
                let e = h_try * (v5 - v4) / sc;
                err += e * e;
            }
            err = (err / d as f64).sqrt();
            if !err.is_finite() {
                return Err(Error::IntegrationFailure {
                    last_time: t,
                    reason: "non-finite state".to_string(),
                });
            }
            if err <= 1.0 {
                t += h_try;
                x.copy_from_slice(&x_new);
                let (head, tail) = k.split_at_mut(6);
                head[0].copy_from_slice(&tail[0]);
                fsal = true;
            } else {
                fsal = false;
            }
            let factor = if err > 0.0 {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            } else {
                5.0
            };
            h = (h_try * factor).max(1e-14);
        }
        for i in 0..d {
            states[(step, i)] = x[i];
        }
    }
    Ok(states)
}

/// High-accuracy ground truth for a named system: adaptive RK45 at
/// tolerance 1e-12, sampled on the `dt` grid.
pub fn simulate_truth(
    system: &SystemSpec,
    x0: &[f64],
    t_total: f64,
    dt: f64,
) -> Result<Trajectory> {
    if t_total <= 0.0 || dt <= 0.0 {
        return Err(Error::contract("t_total and dt must be positive"));
    }
    if x0.len() != system.dim {
        return Err(Error::contract(format!(
            "{}: x0 length {} != dimension {}",
            system.name,
            x0.len(),
            system.dim
        )));
    }
    let n_steps = (t_total / dt).round() as usize;
    let states = integrate_rk45(
        |x, out| system.rhs(x, out),
        x0,
        0.0,
        dt,
        n_steps,
        1e-12,
        1e-12,
    )?;
    Ok(Trajectory {
        t0: 0.0,
        dt,
        states,
    })
}

/// A candidate model `x' = g(x) + Theta(x) Xi`.
#[derive(Clone, Copy)]
pub struct CandidateModel<'a> {
    pub lib: &'a LibrarySpec,
    /// J×D coefficient matrix.
    pub xi: &'a DMatrix<f64>,
    pub known: Option<&'a KnownModel>,
}

impl<'a> CandidateModel<'a> {
    pub fn new(
        lib: &'a LibrarySpec,
        xi: &'a DMatrix<f64>,
        known: Option<&'a KnownModel>,
    ) -> Self {
        CandidateModel { lib, xi, known }
    }

    /// `out = g(x) + Theta(x) Xi`, using `theta_buf` (length J) as scratch.
    pub fn eval(&self, x: &[f64], out: &mut [f64], theta_buf: &mut [f64]) {
        let dim = self.lib.dim;
        self.lib.eval_row(x, theta_buf);
        if let Some(k) = self.known {
            k.eval(x, out);
        } else {
            out[..dim].fill(0.0);
        }
        for (j, &th) in theta_buf.iter().enumerate() {
            if th == 0.0 {
                continue;
            }
            for d in 0..dim {
                out[d] += th * self.xi[(j, d)];
            }
        }
    }
}

/// Rollout direction for the flow map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// A candidate-model rollout left the trusted region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diverged {
    /// Number of completed steps before divergence.
    pub steps_done: usize,
}

/// Compose `q` RK4 steps of the candidate model, forward or backward.
pub fn flow_map(
    model: &CandidateModel,
    x: &[f64],
    q: usize,
    dt: f64,
    direction: Direction,
) -> std::result::Result<Vec<f64>, Diverged> {
    assert!(q >= 1, "q must be >= 1");
    let h = match direction {
        Direction::Forward => dt,
        Direction::Backward => -dt,
    };
    let mut theta = vec![0.0; model.lib.len()];
    let mut state = x.to_vec();
    for step in 0..q {
        let next = rk4_step(
            |xx, out| model.eval(xx, out, &mut theta),
            &state,
            h,
        );
        if !next.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT) {
            return Err(Diverged { steps_done: step });
        }
        state = next;
    }
    Ok(state)
}
