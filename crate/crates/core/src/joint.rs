//! Joint denoising and model discovery: minimize a fit error (weak residual
//! or derivative residual) plus a multi-step simulation error over the
//! coefficients and a per-sample noise estimate.

use crate::dynamics::{rk4_step, CandidateModel, KnownModel, Trajectory, DIVERGENCE_LIMIT};
use crate::error::{Error, Result};
use crate::library::LibrarySpec;
use crate::sparse::{lstsq, stls, SparseCoefficients, DEFAULT_MAX_ROUNDS};
use crate::testfn::{test_function_for_signal, TestFnDiagnostics, TestFunction};
use crate::weak::{build_weak_system_from_theta, conv_adjoint, conv_full_support, WeakSystem};
use nalgebra::DMatrix;

/// Penalty added per diverged rollout term (the divergence limit squared);
/// its gradient is zero so the optimizer backs off through the other terms.
pub const DIVERGENCE_PENALTY: f64 = DIVERGENCE_LIMIT * DIVERGENCE_LIMIT;

/// Which fit error accompanies the simulation error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Weak residual + simulation error.
    Wmsindy,
    /// Simulation error only (weak-initialized ablation).
    WmsindyNoEr,
    /// Derivative residual + simulation error.
    Msindy,
    /// Simulation error only (derivative-initialized ablation).
    MsindyNoEd,
}

impl LossVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wmsindy" => Ok(LossVariant::Wmsindy),
            "wmsindy_no_er" => Ok(LossVariant::WmsindyNoEr),
            "msindy" => Ok(LossVariant::Msindy),
            "msindy_no_ed" => Ok(LossVariant::MsindyNoEd),
            other => Err(Error::contract(format!("unknown loss variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Wmsindy => "wmsindy",
            LossVariant::WmsindyNoEr => "wmsindy_no_er",
            LossVariant::Msindy => "msindy",
            LossVariant::MsindyNoEd => "msindy_no_ed",
        }
    }

    /// Weak-form variants build test functions and initialize from the weak
    /// system; the others initialize from finite-difference derivatives.
    pub fn is_weak(&self) -> bool {
        matches!(self, LossVariant::Wmsindy | LossVariant::WmsindyNoEr)
    }

    fn uses_er(&self) -> bool {
        matches!(self, LossVariant::Wmsindy)
    }

    fn uses_ed(&self) -> bool {
        matches!(self, LossVariant::Msindy)
    }
}

/// Hyperparameters of one identification run.
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    pub variant: LossVariant,
    /// Hard threshold applied cumulatively after every loop.
    pub lambda: f64,
    /// Rollout depth of the simulation error, in samples.
    pub q: usize,
    /// Outer loops.
    pub n_loop: usize,
    pub learning_rate: f64,
    pub iters_per_loop: usize,
    /// Geometric decay base of the multi-step weights.
    pub omega_base: f64,
    pub tau: f64,
    pub tau_hat: f64,
    /// Recorded for provenance; the optimizer itself is deterministic.
    pub seed: u64,
}

impl JointConfig {
    pub fn new(variant: LossVariant, lambda: f64, q: usize, n_loop: usize) -> Self {
        JointConfig {
            variant,
            lambda,
            q,
            n_loop,
            learning_rate: 0.001,
            iters_per_loop: 5000,
            omega_base: 0.9,
            tau: crate::testfn::DEFAULT_TAU,
            tau_hat: crate::testfn::DEFAULT_TAU_HAT,
            seed: 0,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.n_loop < 1 {
            return Err(Error::contract("n_loop must be >= 1"));
        }
        if self.q < 1 {
            return Err(Error::contract("q must be >= 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::contract("lambda must be >= 0"));
        }
        if n < 2 * self.q + 1 {
            return Err(Error::contract(format!(
                "record length {n} too short for q = {}",
                self.q
            )));
        }
        Ok(())
    }
}

/// Per-loop progress record.
#[derive(Debug, Clone)]
pub struct LoopTrace {
    pub loop_index: usize,
    /// Loss at the last optimizer iteration of the loop.
    pub loss_end: f64,
    /// Minimum loss seen during the loop.
    pub loss_min: f64,
    /// Fit error (weak or derivative residual) after the refit.
    pub e_fit: f64,
    /// Simulation error after the refit.
    pub e_sim: f64,
    pub active_count: usize,
    pub testfn_diagnostics: Vec<TestFnDiagnostics>,
}

/// Final output of a joint identification run.
#[derive(Debug, Clone)]
pub struct IdentificationResult {
    pub coeffs: SparseCoefficients,
    /// Learned noise estimate, N×D.
    pub noise: DMatrix<f64>,
    pub loop_trace: Vec<LoopTrace>,
    /// Set when thresholding emptied the support entirely.
    pub empty_support: bool,
    pub wall_time: f64,
}

// ---------------------------------------------------------------------------
// gradient kernels

/// Scratch space reused across loss evaluations.
struct Workspace {
    theta: Vec<f64>,
    jac: Vec<f64>,
    jt_weights: Vec<f64>,
    cot: Vec<f64>,
    chain: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(dim: usize, j: usize, q: usize) -> Self {
        Workspace {
            theta: vec![0.0; j],
            jac: vec![0.0; dim * dim],
            jt_weights: vec![0.0; j],
            cot: vec![0.0; dim],
            chain: vec![vec![0.0; dim]; q + 1],
        }
    }
}

/// out = J_f(x)^T w for f(x) = g(x) + Theta(x) Xi.
fn jacobian_tv(model: &CandidateModel, x: &[f64], w: &[f64], ws: &mut Workspace, out: &mut [f64]) {
    let dim = model.lib.dim;
    for l in 0..model.lib.len() {
        let mut acc = 0.0;
        for d in 0..dim {
            acc += model.xi[(l, d)] * w[d];
        }
        ws.jt_weights[l] = acc;
    }
    model.lib.weighted_jacobian_tv(x, &ws.jt_weights, out);
    if let Some(k) = model.known {
        k.jacobian(x, &mut ws.jac);
        for d in 0..dim {
            let wd = w[d];
            if wd != 0.0 {
                for e in 0..dim {
                    out[e] += ws.jac[d * dim + e] * wd;
                }
            }
        }
    }
}

/// Reverse-mode step through one RK4 step from `x` with step `h`, given the
/// cotangent `v` on the step's output. Returns the cotangent on `x` in
/// `x_bar`; accumulates the coefficient cotangent into `xi_bar` when present.
fn rk4_vjp(
    model: &CandidateModel,
    x: &[f64],
    h: f64,
    v: &[f64],
    ws: &mut Workspace,
    x_bar: &mut [f64],
    mut xi_bar: Option<&mut DMatrix<f64>>,
) {
    let dim = model.lib.dim;
    // recompute stage inputs a1..a4 (the slopes are only needed to form them)
    let mut a = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
    let mut k = vec![0.0; dim];
    a[0].copy_from_slice(x);
    model.eval(&a[0], &mut k, &mut ws.theta);
    for e in 0..dim {
        a[1][e] = x[e] + 0.5 * h * k[e];
    }
    model.eval(&a[1], &mut k, &mut ws.theta);
    for e in 0..dim {
        a[2][e] = x[e] + 0.5 * h * k[e];
    }
    model.eval(&a[2], &mut k, &mut ws.theta);
    for e in 0..dim {
        a[3][e] = x[e] + h * k[e];
    }

    x_bar.copy_from_slice(v);
    // stage cotangents, deepest first; each stage feeds the previous one
    // through its input a_s = x + c_s h k_{s-1}
    let coeff = [h / 6.0, 2.0 * h / 6.0, 2.0 * h / 6.0, h / 6.0];
    let feed = [0.0, 0.5 * h, 0.5 * h, h];
    let mut carry = vec![0.0; dim];
    let mut kbar = vec![0.0; dim];
    let mut abar = vec![0.0; dim];
    for s in (0..4).rev() {
        for e in 0..dim {
            kbar[e] = coeff[s] * v[e] + carry[e];
        }
        // Xi cotangent: d f_d / d Xi[l,d] = theta_l(a_s)
        if let Some(xb) = xi_bar.as_deref_mut() {
            model.lib.eval_row(&a[s], &mut ws.theta);
            for (l, &th) in ws.theta.iter().enumerate() {
                if th == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    xb[(l, d)] += th * kbar[d];
                }
            }
        }
        jacobian_tv(model, &a[s], &kbar, ws, &mut abar);
        for e in 0..dim {
            x_bar[e] += abar[e];
        }
        if s > 0 {
            for e in 0..dim {
                carry[e] = feed[s] * abar[e];
            }
        }
    }
}

/// Multi-step simulation error and (optionally) its exact gradients.
///
/// e_s = sum over start samples j in [q, N-1-q] and offsets i = -q..q (i != 0)
/// of omega^{|i|-1} * ||x~_{j+i} - F^i(x~_j)||^2, where F is the RK4 flow of
/// the candidate model. Rollout states beyond the divergence limit contribute
/// a fixed penalty with zero gradient.
pub fn simulation_error_grad(
    x_tilde: &DMatrix<f64>,
    model: &CandidateModel,
    q: usize,
    dt: f64,
    omega_base: f64,
    mut grad_x: Option<&mut DMatrix<f64>>,
    mut grad_xi: Option<&mut DMatrix<f64>>,
) -> f64 {
    let (n, dim) = x_tilde.shape();
    debug_assert!(n >= 2 * q + 1);
    let mut ws = Workspace::new(dim, model.lib.len(), q);
    let weights: Vec<f64> = (1..=q).map(|i| omega_base.powi(i as i32 - 1)).collect();
    let mut total = 0.0;
    let mut x0 = vec![0.0; dim];
    let mut residuals = vec![vec![0.0; dim]; q + 1];
    for j in q..(n - q) {
        for e in 0..dim {
            x0[e] = x_tilde[(j, e)];
        }
        for &sign in &[1i64, -1i64] {
            let h = if sign > 0 { dt } else { -dt };
            // forward chain; chain[i] = F^i(x0)
            ws.chain[0].copy_from_slice(&x0);
            let mut valid_depth = q;
            for i in 1..=q {
                let prev = ws.chain[i - 1].clone();
                let next = rk4_step(
                    |xx, out| model.eval(xx, out, &mut ws.theta),
                    &prev,
                    h,
                );
                if !next
                    .iter()
                    .all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT)
                {
                    valid_depth = i - 1;
                    break;
                }
                ws.chain[i].copy_from_slice(&next);
            }
            // loss terms
            for i in 1..=q {
                let tgt = (j as i64 + sign * i as i64) as usize;
                if i <= valid_depth {
                    let mut s = 0.0;
                    for e in 0..dim {
                        let r = x_tilde[(tgt, e)] - ws.chain[i][e];
                        residuals[i][e] = r;
                        s += r * r;
                    }
                    total += weights[i - 1] * s;
                } else {
                    total += DIVERGENCE_PENALTY;
                }
            }
            if grad_x.is_none() && grad_xi.is_none() {
                continue;
            }
            // reverse sweep from the deepest valid state back to x0
            ws.cot.fill(0.0);
            for i in (1..=valid_depth).rev() {
                let w = weights[i - 1];
                let tgt = (j as i64 + sign * i as i64) as usize;
                for e in 0..dim {
                    ws.cot[e] += -2.0 * w * residuals[i][e];
                }
                if let Some(gx) = grad_x.as_deref_mut() {
                    for e in 0..dim {
                        gx[(tgt, e)] += 2.0 * w * residuals[i][e];
                    }
                }
                let prev = ws.chain[i - 1].clone();
                let cot = ws.cot.clone();
                let mut x_bar = vec![0.0; dim];
                rk4_vjp(
                    model,
                    &prev,
                    h,
                    &cot,
                    &mut ws,
                    &mut x_bar,
                    grad_xi.as_deref_mut(),
                );
                ws.cot.copy_from_slice(&x_bar);
            }
            if let Some(gx) = grad_x.as_deref_mut() {
                for e in 0..dim {
                    gx[(j, e)] += ws.cot[e];
                }
            }
        }
    }
    total
}

/// Convenience value-only wrapper.
pub fn simulation_error(
    x_tilde: &DMatrix<f64>,
    model: &CandidateModel,
    q: usize,
    dt: f64,
    omega_base: f64,
) -> f64 {
    simulation_error_grad(x_tilde, model, q, dt, omega_base, None, None)
}

/// Second-order finite-difference derivative of each column (one-sided
/// second-order at the ends).
pub fn finite_difference(x: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let (n, dim) = x.shape();
    assert!(n >= 3, "finite_difference needs at least 3 samples");
    let mut out = DMatrix::zeros(n, dim);
    let c = 1.0 / (2.0 * dt);
    for e in 0..dim {
        out[(0, e)] = (-3.0 * x[(0, e)] + 4.0 * x[(1, e)] - x[(2, e)]) * c;
        for k in 1..n - 1 {
            out[(k, e)] = (x[(k + 1, e)] - x[(k - 1, e)]) * c;
        }
        out[(n - 1, e)] = (3.0 * x[(n - 1, e)] - 4.0 * x[(n - 2, e)] + x[(n - 3, e)]) * c;
    }
    out
}

/// Derivative-residual error and (optionally) its gradients:
/// e_d = sum_k ||Dx~_k - f(x~_k)||^2 with D the finite-difference operator.
pub fn derivative_error_grad(
    x_tilde: &DMatrix<f64>,
    model: &CandidateModel,
    dt: f64,
    mut grad_x: Option<&mut DMatrix<f64>>,
    mut grad_xi: Option<&mut DMatrix<f64>>,
) -> f64 {
    let (n, dim) = x_tilde.shape();
    let xdot = finite_difference(x_tilde, dt);
    let mut ws = Workspace::new(dim, model.lib.len(), 1);
    let mut x = vec![0.0; dim];
    let mut f = vec![0.0; dim];
    let mut r = vec![0.0; dim];
    let c = 1.0 / (2.0 * dt);
    let mut total = 0.0;
    for k in 0..n {
        for e in 0..dim {
            x[e] = x_tilde[(k, e)];
        }
        model.eval(&x, &mut f, &mut ws.theta);
        for e in 0..dim {
            r[e] = xdot[(k, e)] - f[e];
            total += r[e] * r[e];
        }
        if grad_x.is_none() && grad_xi.is_none() {
            continue;
        }
        if let Some(gxi) = grad_xi.as_deref_mut() {
            // theta still holds Theta(x~_k) from model.eval
            for (l, &th) in ws.theta.iter().enumerate() {
                if th == 0.0 {
                    continue;
                }
                for e in 0..dim {
                    gxi[(l, e)] += -2.0 * th * r[e];
                }
            }
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            // through f: -J^T (2r) at x~_k
            let twor: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
            let mut jt = vec![0.0; dim];
            jacobian_tv(model, &x, &twor, &mut ws, &mut jt);
            for e in 0..dim {
                gx[(k, e)] -= jt[e];
            }
            // through D: scatter the stencil transpose
            for e in 0..dim {
                let w = 2.0 * r[e] * c;
                if k == 0 {
                    gx[(0, e)] += -3.0 * w;
                    gx[(1, e)] += 4.0 * w;
                    gx[(2, e)] += -w;
                } else if k == n - 1 {
                    gx[(n - 1, e)] += 3.0 * w;
                    gx[(n - 2, e)] += -4.0 * w;
                    gx[(n - 3, e)] += w;
                } else {
                    gx[(k + 1, e)] += w;
                    gx[(k - 1, e)] -= w;
                }
            }
        }
    }
    total
}

/// Value-only derivative error.
pub fn derivative_error(x_tilde: &DMatrix<f64>, model: &CandidateModel, dt: f64) -> f64 {
    derivative_error_grad(x_tilde, model, dt, None, None)
}

/// Weak residual recomputed from the current states, with gradients flowing
/// through both the library convolutions and the right-hand side.
///
/// For each component d the residual over query rows is
/// conv(phi_d, Theta(X~) xi_d + g_d(X~)) + conv(phi'_d, X~_d);
/// e_r is its total squared norm.
pub fn residual_error_grad(
    x_tilde: &DMatrix<f64>,
    model: &CandidateModel,
    testfns: &[TestFunction],
    mut grad_x: Option<&mut DMatrix<f64>>,
    mut grad_xi: Option<&mut DMatrix<f64>>,
) -> f64 {
    let (n, dim) = x_tilde.shape();
    debug_assert_eq!(testfns.len(), dim);
    let dt = testfns[0].dt;
    let lib = model.lib;
    let jn = lib.len();
    let mut ws = Workspace::new(dim, jn, 1);

    // Theta(X~) once, then per-component field values u_d = Theta xi_d + g_d
    let mut theta = DMatrix::zeros(n, jn);
    let mut x = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let mut u = DMatrix::zeros(n, dim);
    for k in 0..n {
        for e in 0..dim {
            x[e] = x_tilde[(k, e)];
        }
        lib.eval_row(&x, &mut ws.theta);
        for (l, &th) in ws.theta.iter().enumerate() {
            theta[(k, l)] = th;
        }
        if let Some(km) = model.known {
            km.eval(&x, &mut g);
        } else {
            g.fill(0.0);
        }
        for d in 0..dim {
            let mut acc = g[d];
            for l in 0..jn {
                let xi = model.xi[(l, d)];
                if xi != 0.0 {
                    acc += ws.theta[l] * xi;
                }
            }
            u[(k, d)] = acc;
        }
    }

    let mut total = 0.0;
    // per-sample cotangent on u from all components, applied through J^T
    let mut s_phi = DMatrix::zeros(n, dim);
    for d in 0..dim {
        let tf = &testfns[d];
        let ucol: Vec<f64> = u.column(d).iter().cloned().collect();
        let xcol: Vec<f64> = x_tilde.column(d).iter().cloned().collect();
        let mut res = conv_full_support(&ucol, &tf.phi, dt);
        let dres = conv_full_support(&xcol, &tf.dphi, dt);
        for (r, dr) in res.iter_mut().zip(dres.iter()) {
            *r += dr;
        }
        total += res.iter().map(|v| v * v).sum::<f64>();
        if grad_x.is_none() && grad_xi.is_none() {
            continue;
        }
        let two_res: Vec<f64> = res.iter().map(|v| 2.0 * v).collect();
        let sphi = conv_adjoint(&two_res, &tf.phi, n, dt);
        if let Some(gx) = grad_x.as_deref_mut() {
            let sdphi = conv_adjoint(&two_res, &tf.dphi, n, dt);
            for k in 0..n {
                gx[(k, d)] += sdphi[k];
            }
        }
        if let Some(gxi) = grad_xi.as_deref_mut() {
            for k in 0..n {
                let s = sphi[k];
                if s == 0.0 {
                    continue;
                }
                for l in 0..jn {
                    gxi[(l, d)] += theta[(k, l)] * s;
                }
            }
        }
        for k in 0..n {
            s_phi[(k, d)] += sphi[k];
        }
    }
    if let Some(gx) = grad_x.as_deref_mut() {
        let mut w = vec![0.0; dim];
        let mut jt = vec![0.0; dim];
        for k in 0..n {
            let mut any = false;
            for d in 0..dim {
                w[d] = s_phi[(k, d)];
                any |= w[d] != 0.0;
            }
            if !any {
                continue;
            }
            for e in 0..dim {
                x[e] = x_tilde[(k, e)];
            }
            jacobian_tv(model, &x, &w, &mut ws, &mut jt);
            for e in 0..dim {
                gx[(k, e)] += jt[e];
            }
        }
    }
    total
}

/// Split of the total loss into its two terms.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub e_fit: f64,
    pub e_sim: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.e_fit + self.e_sim
    }
}

/// Total loss of the configured variant, with optional exact gradients with
/// respect to the noise estimate and the active coefficients. Masked
/// coefficient entries receive zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_grad(
    y: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    lib: &LibrarySpec,
    known: Option<&KnownModel>,
    testfns: Option<&[TestFunction]>,
    dt: f64,
    config: &JointConfig,
    mut grad_noise: Option<&mut DMatrix<f64>>,
    mut grad_xi: Option<&mut DMatrix<f64>>,
) -> Result<LossParts> {
    let x_tilde = y - noise;
    let model = CandidateModel {
        lib,
        xi,
        known,
    };
    let want_grad = grad_noise.is_some() || grad_xi.is_some();
    let (n, dim) = y.shape();
    let mut gx = if want_grad {
        Some(DMatrix::zeros(n, dim))
    } else {
        None
    };
    if let Some(g) = grad_xi.as_deref_mut() {
        g.fill(0.0);
    }
    let e_fit = if config.variant.uses_er() {
        let tfs = testfns.ok_or_else(|| Error::contract("weak variant needs test functions"))?;
        residual_error_grad(
            &x_tilde,
            &model,
            tfs,
            gx.as_mut(),
            grad_xi.as_deref_mut(),
        )
    } else if config.variant.uses_ed() {
        derivative_error_grad(&x_tilde, &model, dt, gx.as_mut(), grad_xi.as_deref_mut())
    } else {
        0.0
    };
    let e_sim = simulation_error_grad(
        &x_tilde,
        &model,
        config.q,
        dt,
        config.omega_base,
        gx.as_mut(),
        grad_xi.as_deref_mut(),
    );
    if let (Some(gn), Some(gx)) = (grad_noise.as_deref_mut(), gx.as_ref()) {
        // x~ = y - n~, so d/dn~ = -d/dx~
        for (o, &v) in gn.iter_mut().zip(gx.iter()) {
            *o = -v;
        }
    }
    if let Some(g) = grad_xi.as_deref_mut() {
        for (gv, &m) in g.iter_mut().zip(mask.iter()) {
            if !m {
                *gv = 0.0;
            }
        }
    }
    Ok(LossParts { e_fit, e_sim })
}

// ---------------------------------------------------------------------------
// Adam

/// Bias-corrected Adam over a flat parameter slice.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update in place. Callers advance `t` once per optimizer step via
    /// [`AdamState::tick`] before updating each tensor sharing the step.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert!(self.t >= 1, "tick() before update()");
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    pub fn tick(&mut self) {
        self.t += 1;
    }
}

// ---------------------------------------------------------------------------
// the outer loop

fn build_testfns(
    states: &DMatrix<f64>,
    dt: f64,
    config: &JointConfig,
) -> Result<(Vec<TestFunction>, Vec<TestFnDiagnostics>)> {
    let (n, dim) = states.shape();
    let mut tfs = Vec::with_capacity(dim);
    let mut diags = Vec::with_capacity(dim);
    for d in 0..dim {
        let col: Vec<f64> = states.column(d).iter().cloned().collect();
        let (mut tf, mut diag) = test_function_for_signal(&col, dt, config.tau, config.tau_hat, d)?;
        let max_m = n.saturating_sub(8) / 2;
        if tf.m > max_m && max_m >= 2 {
            tf = crate::testfn::build_test_function(
                max_m,
                crate::testfn::degree_for_support(max_m, config.tau),
                dt,
            );
            diag.m = tf.m;
            diag.p = tf.p;
            diag.sigma = tf.sigma;
            diag.fallback_used = true;
        }
        tfs.push(tf);
        diags.push(diag);
    }
    Ok((tfs, diags))
}

fn weak_refit(
    weak: &WeakSystem,
    mask: &DMatrix<bool>,
    xi: &mut DMatrix<f64>,
) {
    let j = xi.nrows();
    for (d, comp) in weak.components.iter().enumerate() {
        let idx: Vec<usize> = (0..j).filter(|&l| mask[(l, d)]).collect();
        for l in 0..j {
            xi[(l, d)] = 0.0;
        }
        if idx.is_empty() {
            continue;
        }
        let sub = comp.g.select_columns(&idx);
        let sol = lstsq(&sub, &comp.b);
        for (k, &l) in idx.iter().enumerate() {
            xi[(l, d)] = sol[k];
        }
    }
}

fn derivative_refit(
    theta: &DMatrix<f64>,
    xdot: &DMatrix<f64>,
    known_vals: Option<&DMatrix<f64>>,
    mask: &DMatrix<bool>,
    xi: &mut DMatrix<f64>,
) {
    let j = xi.nrows();
    let dim = xi.ncols();
    for d in 0..dim {
        let idx: Vec<usize> = (0..j).filter(|&l| mask[(l, d)]).collect();
        for l in 0..j {
            xi[(l, d)] = 0.0;
        }
        if idx.is_empty() {
            continue;
        }
        let mut b = xdot.column(d).clone_owned();
        if let Some(kv) = known_vals {
            b -= kv.column(d);
        }
        let sub = theta.select_columns(&idx);
        let sol = lstsq(&sub, &b);
        for (k, &l) in idx.iter().enumerate() {
            xi[(l, d)] = sol[k];
        }
    }
}

fn known_values(states: &DMatrix<f64>, known: &KnownModel) -> DMatrix<f64> {
    let (n, dim) = states.shape();
    let mut out = DMatrix::zeros(n, dim);
    let mut x = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    for k in 0..n {
        for e in 0..dim {
            x[e] = states[(k, e)];
        }
        known.eval(&x, &mut g);
        for e in 0..dim {
            out[(k, e)] = g[e];
        }
    }
    out
}

fn run_identification(
    y: &Trajectory,
    lib: &LibrarySpec,
    config: &JointConfig,
    known: Option<&KnownModel>,
) -> Result<IdentificationResult> {
    let start = std::time::Instant::now();
    let (n, dim) = y.states.shape();
    if lib.dim != dim {
        return Err(Error::contract("library dimension != data dimension"));
    }
    config.validate(n)?;
    let jn = lib.len();
    let dt = y.dt;

    // ----- initialization -----
    let mut xi = DMatrix::zeros(jn, dim);
    let mut testfns: Option<Vec<TestFunction>> = None;
    let mut diags: Vec<TestFnDiagnostics> = Vec::new();
    if config.variant.is_weak() {
        let (tfs, dg) = build_testfns(&y.states, dt, config)?;
        let theta = lib.evaluate(&y.states)?;
        let weak = build_weak_system_from_theta(&y.states, &theta, lib, &tfs, known)?;
        for (d, comp) in weak.components.iter().enumerate() {
            let (sol, _) = stls(&comp.g, &comp.b, config.lambda, DEFAULT_MAX_ROUNDS)?;
            for l in 0..jn {
                xi[(l, d)] = sol[l];
            }
        }
        testfns = Some(tfs);
        diags = dg;
    } else {
        let theta = lib.evaluate(&y.states)?;
        let xdot = finite_difference(&y.states, dt);
        let kv = known.map(|k| known_values(&y.states, k));
        for d in 0..dim {
            let mut b = xdot.column(d).clone_owned();
            if let Some(kv) = &kv {
                b -= kv.column(d);
            }
            let (sol, _) = stls(&theta, &b, config.lambda, DEFAULT_MAX_ROUNDS)?;
            for l in 0..jn {
                xi[(l, d)] = sol[l];
            }
        }
    }
    let mut mask = DMatrix::from_element(jn, dim, true);
    let mut noise = DMatrix::zeros(n, dim);
    let mut trace = Vec::with_capacity(config.n_loop);

    // flat views for Adam
    let mut grad_xi = DMatrix::zeros(jn, dim);
    let mut grad_noise = DMatrix::zeros(n, dim);

    for loop_index in 1..=config.n_loop {
        let mut adam_xi = AdamState::new(jn * dim);
        let mut adam_noise = AdamState::new(n * dim);
        let mut loss_min = f64::INFINITY;
        let mut loss_end = f64::NAN;
        for _ in 0..config.iters_per_loop {
            let parts = total_loss_grad(
                &y.states,
                &noise,
                &xi,
                &mask,
                lib,
                known,
                testfns.as_deref(),
                dt,
                config,
                Some(&mut grad_noise),
                Some(&mut grad_xi),
            )?;
            let loss = parts.total();
            loss_min = loss_min.min(loss);
            loss_end = loss;
            adam_xi.tick();
            adam_noise.tick();
            adam_xi.update(
                xi.as_mut_slice(),
                grad_xi.as_slice(),
                config.learning_rate,
            );
            adam_noise.update(
                noise.as_mut_slice(),
                grad_noise.as_slice(),
                config.learning_rate,
            );
            // keep pruned entries pinned at zero
            for (v, &m) in xi.iter_mut().zip(mask.iter()) {
                if !m {
                    *v = 0.0;
                }
            }
        }

        // cumulative threshold
        for (idx, v) in xi.iter_mut().enumerate() {
            if mask[idx] && v.abs() < config.lambda {
                mask[idx] = false;
            }
            if !mask[idx] {
                *v = 0.0;
            }
        }

        // refresh test functions and refit on the denoised states
        let x_tilde = &y.states - &noise;
        if config.variant.is_weak() {
            let (tfs, dg) = build_testfns(&x_tilde, dt, config)?;
            let theta = lib.evaluate(&x_tilde)?;
            let weak = build_weak_system_from_theta(&x_tilde, &theta, lib, &tfs, known)?;
            weak_refit(&weak, &mask, &mut xi);
            testfns = Some(tfs);
            diags = dg;
        } else {
            let theta = lib.evaluate(&x_tilde)?;
            let xdot = finite_difference(&x_tilde, dt);
            let kv = known.map(|k| known_values(&x_tilde, k));
            derivative_refit(&theta, &xdot, kv.as_ref(), &mask, &mut xi);
        }
        // threshold once more after the refit
        for (idx, v) in xi.iter_mut().enumerate() {
            if mask[idx] && v.abs() < config.lambda {
                mask[idx] = false;
            }
            if !mask[idx] {
                *v = 0.0;
            }
        }

        let parts = total_loss_grad(
            &y.states,
            &noise,
            &xi,
            &mask,
            lib,
            known,
            testfns.as_deref(),
            dt,
            config,
            None,
            None,
        )?;
        trace.push(LoopTrace {
            loop_index,
            loss_end,
            loss_min,
            e_fit: parts.e_fit,
            e_sim: parts.e_sim,
            active_count: mask.iter().filter(|&&m| m).count(),
            testfn_diagnostics: diags.clone(),
        });
    }

    let coeffs = SparseCoefficients {
        xi,
        active: mask,
    };
    let empty_support = coeffs.active_count() == 0;
    Ok(IdentificationResult {
        coeffs,
        noise,
        loop_trace: trace,
        empty_support,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Weak-form joint identification (weak residual + simulation error, or the
/// simulation-only ablation with weak initialization).
pub fn run_wmsindy(
    y: &Trajectory,
    lib: &LibrarySpec,
    config: &JointConfig,
    known: Option<&KnownModel>,
) -> Result<IdentificationResult> {
    if !config.variant.is_weak() {
        return Err(Error::contract(
            "run_wmsindy requires a weak loss variant",
        ));
    }
    run_identification(y, lib, config, known)
}

/// Derivative-based joint identification (derivative residual + simulation
/// error, or the simulation-only ablation with derivative initialization).
pub fn run_msindy(
    y: &Trajectory,
    lib: &LibrarySpec,
    config: &JointConfig,
    known: Option<&KnownModel>,
) -> Result<IdentificationResult> {
    if config.variant.is_weak() {
        return Err(Error::contract(
            "run_msindy requires a derivative loss variant",
        ));
    }
    run_identification(y, lib, config, known)
}

/// Iterative handling of noise with a non-zero mean: identify, subtract the
/// per-component mean of the learned noise from the data, and repeat. The
/// returned noise estimate includes the accumulated subtracted means, so it
/// refers to the original data; the per-component accumulated means are also
/// returned directly.
pub fn run_nonzero_mean(
    y: &Trajectory,
    lib: &LibrarySpec,
    config: &JointConfig,
    known: Option<&KnownModel>,
    outer_iterations: usize,
) -> Result<(IdentificationResult, Vec<f64>)> {
    if outer_iterations < 1 {
        return Err(Error::contract("outer_iterations must be >= 1"));
    }
    let dim = y.dim();
    let mut current = y.clone();
    let mut acc = vec![0.0; dim];
    let mut result = None;
    for it in 0..outer_iterations {
        let res = run_identification(&current, lib, config, known)?;
        if it + 1 < outer_iterations {
            let n = res.noise.nrows() as f64;
            for d in 0..dim {
                let mean = res.noise.column(d).iter().sum::<f64>() / n;
                acc[d] += mean;
                for k in 0..current.states.nrows() {
                    current.states[(k, d)] -= mean;
                }
            }
        }
        result = Some(res);
    }
    let mut res = result.unwrap();
    for d in 0..dim {
        if acc[d] != 0.0 {
            for k in 0..res.noise.nrows() {
                res.noise[(k, d)] += acc[d];
            }
        }
    }
    Ok((res, acc))
}
