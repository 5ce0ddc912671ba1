//! Data-driven compactly supported test functions.
//!
//! Per component the pipeline is: FFT magnitude spectrum -> corner
//! wavenumber `k*` of the cumulative spectrum (two-piece linear fit) ->
//! support half-width `m` from the closed-form decay balance -> degree
//! parameter `p` from the real-space decay tolerance -> sampled bump
//! `phi(u) = (1 - u^2)^p` and its derivative on `2m + 1` points.

use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};

/// Default real-space decay tolerance.
pub const DEFAULT_TAU: f64 = 1e-10;
/// Default Fourier-space decay rate (standard deviations into the tail).
pub const DEFAULT_TAU_HAT: f64 = -2.0;

/// A sampled test function on `2m + 1` points of spacing `dt`, normalized to
/// unit discrete L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub m: usize,
    pub p: u32,
    pub dt: f64,
    /// `phi` samples at `j = -m..=m`.
    pub phi: Vec<f64>,
    /// `phi'` samples at `j = -m..=m`.
    pub dphi: Vec<f64>,
    /// Gaussian-fit width `m*dt / sqrt(2p + 3)`.
    pub sigma: f64,
}

/// Corner wavenumber of a signal's cumulative spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavenumberEstimate {
    pub k_star: usize,
    /// Set when the spectrum was degenerate and a heuristic default was used.
    pub fallback: bool,
}

/// Per-component construction diagnostics, surfaced in result JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFnDiagnostics {
    pub component: usize,
    pub k_star: usize,
    pub m: usize,
    pub p: u32,
    pub sigma: f64,
    pub fallback_used: bool,
}

/// Residual sum of squares of the best least-squares line through points
/// `(i, y_i)` for `i` in `[lo, hi]`, from prefix sums. `xs[i] = i`.
struct PrefixSums {
    sx: Vec<f64>,
    sy: Vec<f64>,
    sxx: Vec<f64>,
    sxy: Vec<f64>,
    syy: Vec<f64>,
}

impl PrefixSums {
    fn new(ys: &[f64]) -> Self {
        let n = ys.len();
        let mut sx = vec![0.0; n + 1];
        let mut sy = vec![0.0; n + 1];
        let mut sxx = vec![0.0; n + 1];
        let mut sxy = vec![0.0; n + 1];
        let mut syy = vec![0.0; n + 1];
        for (i, &y) in ys.iter().enumerate() {
            let x = i as f64;
            sx[i + 1] = sx[i] + x;
            sy[i + 1] = sy[i] + y;
            sxx[i + 1] = sxx[i] + x * x;
            sxy[i + 1] = sxy[i] + x * y;
            syy[i + 1] = syy[i] + y * y;
        }
        PrefixSums { sx, sy, sxx, sxy, syy }
    }

    /// SSE over the inclusive index range `[lo, hi]`.
    fn sse(&self, lo: usize, hi: usize) -> f64 {
        let n = (hi + 1 - lo) as f64;
        let sx = self.sx[hi + 1] - self.sx[lo];
        let sy = self.sy[hi + 1] - self.sy[lo];
        let sxx = self.sxx[hi + 1] - self.sxx[lo];
        let sxy = self.sxy[hi + 1] - self.sxy[lo];
        let syy = self.syy[hi + 1] - self.syy[lo];
        let sxx_c = sxx - sx * sx / n;
        let sxy_c = sxy - sx * sy / n;
        let syy_c = syy - sy * sy / n;
        if sxx_c <= 0.0 {
            return syy_c.max(0.0);
        }
        (syy_c - sxy_c * sxy_c / sxx_c).max(0.0)
    }
}

/// Corner index of the cumulative series `c` via an exhaustive two-piece
/// linear fit; the two pieces share the breakpoint sample. Returns the
/// 0-based position of the breakpoint within `c`.
pub fn corner_index(c: &[f64]) -> usize {
    let n = c.len();
    debug_assert!(n >= 4);
    let sums = PrefixSums::new(c);
    let mut best = 1;
    let mut best_err = f64::INFINITY;
    for b in 1..n - 1 {
        let err = sums.sse(0, b) + sums.sse(b, n - 1);
        if err < best_err {
            best_err = err;
            best = b;
        }
    }
    best
}

/// Magnitude of the one-sided DFT band, indices `1..=N/2` (wavenumbers).
pub fn spectrum_band(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    fft.process(&mut buf);
    (1..=n / 2).map(|i| buf[i].norm()).collect()
}

/// Estimate the corner wavenumber `k*` of a signal: the breakpoint of a
/// two-piece linear fit to the cumulative sum of the one-sided spectrum
/// magnitude.
pub fn estimate_wavenumber(signal: &[f64]) -> Result<WavenumberEstimate> {
    let n = signal.len();
    if n < 8 {
        return Err(Error::contract("estimate_wavenumber needs N >= 8"));
    }
    if !signal.iter().all(|v| v.is_finite()) {
        return Err(Error::contract("estimate_wavenumber: non-finite signal"));
    }
    let band = spectrum_band(signal);
    let total: f64 = band.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        // constant signal: zero spectrum, corner undefined
        return Ok(WavenumberEstimate {
            k_star: (n / 16).max(1),
            fallback: true,
        });
    }
    let mut cum = Vec::with_capacity(band.len());
    let mut acc = 0.0;
    for &v in &band {
        acc += v;
        cum.push(acc);
    }
    let pos = corner_index(&cum);
    let k_star = (pos + 1).clamp(1, n / 2);
    Ok(WavenumberEstimate {
        k_star,
        fallback: false,
    })
}

/// Smallest integer `p >= 1` with `((2m - 1) / m^2)^p <= tau`.
pub fn degree_for_support(m: usize, tau: f64) -> u32 {
    let r = (2.0 * m as f64 - 1.0) / (m as f64 * m as f64);
    debug_assert!(r > 0.0 && r < 1.0);
    let p = (tau.ln() / r.ln()).ceil();
    (p.max(1.0)) as u32
}

/// Decay-balance function whose root in `m` fixes the support width.
fn support_balance(m: f64, n: usize, k_star: usize, tau: f64, tau_hat: f64) -> f64 {
    let nn = n as f64;
    let k = k_star as f64;
    let log_r = ((2.0 * m - 1.0) / (m * m)).ln();
    log_r * (4.0 * std::f64::consts::PI.powi(2) * k * k * m * m - 3.0 * nn * nn * tau_hat * tau_hat)
        - 2.0 * nn * nn * tau_hat * tau_hat * tau.ln()
}

/// Solve for the support half-width `m` (by bisection over real `m`, then
/// rounding) and the degree `p`. Returns `(m, p, fallback)`.
pub fn solve_support_and_degree(
    n: usize,
    k_star: usize,
    tau: f64,
    tau_hat: f64,
) -> Result<(usize, u32, bool)> {
    if k_star < 1 || k_star > n / 2 {
        return Err(Error::contract(format!(
            "k_star {k_star} outside [1, {}]",
            n / 2
        )));
    }
    if !(tau > 0.0 && tau < 1.0) || tau_hat >= 0.0 {
        return Err(Error::contract("tau must be in (0,1) and tau_hat < 0"));
    }
    let m_max = ((n - 1) / 2).max(2);
    let mut lo = 2.0;
    let mut hi = (n as f64 - 1.0) / 2.0;
    let f_lo = support_balance(lo, n, k_star, tau, tau_hat);
    let f_hi = support_balance(hi, n, k_star, tau, tau_hat);
    let (m, fallback) = if f_lo * f_hi > 0.0 {
        ((n / 20).max(2).min(m_max), true)
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let f_mid = support_balance(mid, n, k_star, tau, tau_hat);
            if f_lo * f_mid <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-9 {
                break;
            }
        }
        // ties round half up
        let m_real = 0.5 * (lo + hi);
        (((m_real + 0.5).floor() as usize).clamp(2, m_max), false)
    };
    let p = degree_for_support(m, tau);
    Ok((m, p, fallback))
}

/// Sample `phi` and `phi'` on `2m + 1` points and normalize both by the
/// discrete L2 norm of the `phi` samples.
pub fn build_test_function(m: usize, p: u32, dt: f64) -> TestFunction {
    assert!(m >= 2, "m must be >= 2");
    assert!(p >= 1, "p must be >= 1");
    let len = 2 * m + 1;
    let mut phi = vec![0.0; len];
    let mut dphi = vec![0.0; len];
    let md = m as f64;
    let pf = p as f64;
    for j in 0..len {
        let u = (j as f64 - md) / md;
        let w = 1.0 - u * u;
        if w <= 0.0 {
            // support endpoints: phi and phi' vanish (p >= 1)
            continue;
        }
        phi[j] = w.powi(p as i32);
        dphi[j] = -(2.0 * pf / (md * dt)) * u * w.powi(p as i32 - 1);
    }
    let norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in phi.iter_mut() {
        *v /= norm;
    }
    for v in dphi.iter_mut() {
        *v /= norm;
    }
    TestFunction {
        m,
        p,
        dt,
        phi,
        dphi,
        sigma: md * dt / (2.0 * pf + 3.0).sqrt(),
    }
}

/// Full per-component pipeline from a raw signal.
pub fn test_function_for_signal(
    signal: &[f64],
    dt: f64,
    tau: f64,
    tau_hat: f64,
    component: usize,
) -> Result<(TestFunction, TestFnDiagnostics)> {
    let wn = estimate_wavenumber(signal)?;
    let (m, p, fallback_m) = solve_support_and_degree(signal.len(), wn.k_star, tau, tau_hat)?;
    let tf = build_test_function(m, p, dt);
    let diag = TestFnDiagnostics {
        component,
        k_star: wn.k_star,
        m,
        p,
        sigma: tf.sigma,
        fallback_used: wn.fallback || fallback_m,
    };
    Ok((tf, diag))
}
