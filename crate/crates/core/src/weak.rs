//! Discrete weak-form linear system `B = G Xi`.
//!
//! Per component the data is convolved with the test-function derivative
//! (`b`) and the evaluated library with the test function itself (`G`),
//! rectangle-rule weights `dt`. Query centers are every sample index whose
//! support lies fully inside the record.

use crate::dynamics::KnownModel;
use crate::error::{Error, Result};
use crate::library::LibrarySpec;
use crate::testfn::TestFunction;
use nalgebra::{DMatrix, DVector};

/// One component of the weak system.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakComponent {
    /// Right-hand side, length H.
    pub b: DVector<f64>,
    /// H×J convolution of the library against `phi`.
    pub g: DMatrix<f64>,
    /// First query-center sample index (== m for full-support placement).
    pub center_start: usize,
    /// Support half-width of this component's test function.
    pub m: usize,
}

/// The assembled per-component weak systems.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakSystem {
    pub components: Vec<WeakComponent>,
}

impl WeakSystem {
    pub fn dim(&self) -> usize {
        self.components.len()
    }
}

/// Convolve a signal with taps at every full-support center:
/// `out[h] = dt * sum_j taps[j] * signal[h + j]` for `h = 0..N-2m`,
/// i.e. centers `c_h = m + h`.
pub fn conv_full_support(signal: &[f64], taps: &[f64], dt: f64) -> Vec<f64> {
    let n = signal.len();
    let len = taps.len();
    debug_assert!(n >= len);
    let h_count = n - len + 1;
    let mut out = vec![0.0; h_count];
    for (h, o) in out.iter_mut().enumerate() {
        let window = &signal[h..h + len];
        let mut acc = 0.0;
        for (t, s) in taps.iter().zip(window.iter()) {
            acc += t * s;
        }
        *o = acc * dt;
    }
    out
}

/// Adjoint of [`conv_full_support`]: scatter cotangents on the H query rows
/// back onto the N signal samples.
/// `out[n] = dt * sum_h taps[n - h] * cot[h]` over valid `h`.
pub fn conv_adjoint(cot: &[f64], taps: &[f64], n: usize, dt: f64) -> Vec<f64> {
    let len = taps.len();
    let h_count = cot.len();
    debug_assert_eq!(h_count, n - len + 1);
    let mut out = vec![0.0; n];
    for (nn, o) in out.iter_mut().enumerate() {
        let h_lo = nn.saturating_sub(len - 1);
        let h_hi = nn.min(h_count - 1);
        if h_lo > h_hi {
            continue;
        }
        let mut acc = 0.0;
        for h in h_lo..=h_hi {
            acc += taps[nn - h] * cot[h];
        }
        *o = acc * dt;
    }
    out
}

/// Assemble the weak system from an N×D state matrix. `theta` must be the
/// library evaluated on the same states (N×J); passing it in lets callers
/// reuse one evaluation across components.
pub fn build_weak_system_from_theta(
    states: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    spec: &LibrarySpec,
    testfns: &[TestFunction],
    known: Option<&KnownModel>,
) -> Result<WeakSystem> {
    let n = states.nrows();
    let dim = states.ncols();
    if testfns.len() != dim {
        return Err(Error::contract("one test function per component required"));
    }
    let dt = testfns[0].dt;
    let j_count = spec.len();

    // known-model values at every sample, reused by each component
    let known_vals: Option<DMatrix<f64>> = known.map(|k| {
        let mut g = DMatrix::zeros(n, dim);
        let mut x = vec![0.0; dim];
        let mut out = vec![0.0; dim];
        for i in 0..n {
            for d in 0..dim {
                x[d] = states[(i, d)];
            }
            k.eval(&x, &mut out);
            for d in 0..dim {
                g[(i, d)] = out[d];
            }
        }
        g
    });

    let mut components = Vec::with_capacity(dim);
    for d in 0..dim {
        let tf = &testfns[d];
        let support = 2 * tf.m + 1;
        if n <= 2 * tf.m {
            return Err(Error::contract(format!(
                "component {d}: support 2m+1 = {support} exceeds record length {n}"
            )));
        }
        let h_count = n - 2 * tf.m;
        let col: Vec<f64> = states.column(d).iter().cloned().collect();
        let mut b = conv_full_support(&col, &tf.dphi, dt);
        for v in b.iter_mut() {
            *v = -*v;
        }
        if let Some(gv) = &known_vals {
            let gcol: Vec<f64> = gv.column(d).iter().cloned().collect();
            let kb = conv_full_support(&gcol, &tf.phi, dt);
            for (v, k) in b.iter_mut().zip(kb.iter()) {
                *v -= k;
            }
        }
        let mut g = DMatrix::zeros(h_count, j_count);
        for jj in 0..j_count {
            let tcol: Vec<f64> = theta.column(jj).iter().cloned().collect();
            let gc = conv_full_support(&tcol, &tf.phi, dt);
            for (h, &v) in gc.iter().enumerate() {
                g[(h, jj)] = v;
            }
        }
        if b.iter().any(|v| !v.is_finite()) || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "component {d}: non-finite weak system entries"
            )));
        }
        components.push(WeakComponent {
            b: DVector::from_vec(b),
            g,
            center_start: tf.m,
            m: tf.m,
        });
    }
    Ok(WeakSystem { components })
}

/// Assemble the weak system, evaluating the library internally.
pub fn build_weak_system(
    states: &DMatrix<f64>,
    spec: &LibrarySpec,
    testfns: &[TestFunction],
    known: Option<&KnownModel>,
) -> Result<WeakSystem> {
    let theta = spec.evaluate(states)?;
    build_weak_system_from_theta(states, &theta, spec, testfns, known)
}

/// Weak residual `e_r = sum_d || G_d xi_d - b_d ||^2`.
pub fn weak_residual(ws: &WeakSystem, coeffs: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for (d, comp) in ws.components.iter().enumerate() {
        let r = &comp.g * coeffs.column(d) - &comp.b;
        total += r.norm_squared();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::build_library;
    use crate::testfn::build_test_function;
    use crate::dynamics::KnownModel;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn exponential_slope_recovery() {
        // x(t) = e^{a t}, library {x}: LS solution of the weak system -> a
        let a = -0.7;
        let dt = 0.001;
        let n = 4000;
        let states = DMatrix::from_fn(n, 1, |i, _| (a * i as f64 * dt).exp());
        let lib = build_library(1, 1, false);
        let tf = build_test_function(30, 8, dt);
        let ws = build_weak_system(&states, &lib, &[tf], None).unwrap();
        let comp = &ws.components[0];
        let sol = comp
            .g
            .clone()
            .svd(true, true)
            .solve(&comp.b, 1e-14)
            .unwrap();
        assert!(
            (sol[0] - a).abs() < 1e-4,
            "recovered {} expected {a}",
            sol[0]
        );
    }

    #[test]
    fn constant_states_give_zero_b() {
        let n = 200;
        let states = DMatrix::from_element(n, 2, 3.5);
        let lib = build_library(2, 2, false);
        let tfs = vec![build_test_function(10, 6, 0.01), build_test_function(12, 7, 0.01)];
        let ws = build_weak_system(&states, &lib, &tfs, None).unwrap();
        for comp in &ws.components {
            for v in comp.b.iter() {
                assert!(v.abs() < 1e-12, "b entry {v}");
            }
        }
    }

    #[test]
    fn known_model_full_truth_zero_residual() {
        // g equal to the full dynamics, Xi = 0 -> b ~ 0 up to quadrature error
        use crate::dynamics::{simulate_truth, SystemSpec};
        let sys = SystemSpec::preset("lorenz").unwrap();
        let traj = simulate_truth(&sys, &[5.0, 5.0, 25.0], 5.0, 0.01).unwrap();
        let lib = build_library(3, 2, false);
        let known = KnownModel { system: sys };
        let tfs: Vec<_> = (0..3).map(|_| build_test_function(20, 10, 0.01)).collect();
        let ws = build_weak_system(&traj.states, &lib, &tfs, Some(&known)).unwrap();
        for comp in &ws.components {
            let scale = comp.g.amax().max(1.0);
            for v in comp.b.iter() {
                assert!(v.abs() < 1e-4 * scale, "residual {v} vs scale {scale}");
            }
        }
    }

    #[test]
    fn weak_residual_matches_brute_force() {
        let mut seed = 7u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let states = DMatrix::from_fn(80, 2, |_, _| rnd());
        let lib = build_library(2, 2, false);
        let tfs = vec![build_test_function(5, 3, 0.1), build_test_function(6, 4, 0.1)];
        let ws = build_weak_system(&states, &lib, &tfs, None).unwrap();
        let xi = DMatrix::from_fn(lib.len(), 2, |_, _| rnd());
        let fast = weak_residual(&ws, &xi);
        let mut slow = 0.0;
        for (d, comp) in ws.components.iter().enumerate() {
            for h in 0..comp.b.len() {
                let mut dot = 0.0;
                for j in 0..lib.len() {
                    dot += comp.g[(h, j)] * xi[(j, d)];
                }
                slow += (dot - comp.b[h]).powi(2);
            }
        }
        assert_relative_eq!(fast, slow, max_relative = 1e-12);
    }

    #[test]
    fn residual_zero_for_exact_solution_and_b_norm_for_zero() {
        let states = DMatrix::from_fn(100, 1, |i, _| (0.05 * i as f64).sin() + 2.0);
        let lib = build_library(1, 2, false);
        let tf = build_test_function(8, 5, 0.05);
        let ws = build_weak_system(&states, &lib, &[tf], None).unwrap();
        let comp = &ws.components[0];
        let sol = comp.g.clone().svd(true, true).solve(&comp.b, 1e-14).unwrap();
        let mut xi = DMatrix::zeros(lib.len(), 1);
        xi.set_column(0, &sol);
        let res = weak_residual(&ws, &xi);
        let explicit = (&comp.g * &sol - &comp.b).norm_squared();
        assert_relative_eq!(res, explicit, max_relative = 1e-12);

        let zero = DMatrix::zeros(lib.len(), 1);
        assert_relative_eq!(
            weak_residual(&ws, &zero),
            comp.b.norm_squared(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn support_exceeding_record_is_contract_error() {
        let states = DMatrix::zeros(20, 1);
        let lib = build_library(1, 1, false);
        let tf = build_test_function(10, 3, 0.01);
        assert!(build_weak_system(&states, &lib, &[tf], None).is_err());
    }

    #[test]
    fn conv_adjoint_is_transpose() {
        // <conv(x), r> == <x, adjoint(r)> for random vectors
        let mut seed = 99u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let n = 50;
        let taps: Vec<f64> = (0..9).map(|_| rnd()).collect();
        let x: Vec<f64> = (0..n).map(|_| rnd()).collect();
        let fwd = conv_full_support(&x, &taps, 0.01);
        let r: Vec<f64> = (0..fwd.len()).map(|_| rnd()).collect();
        let adj = conv_adjoint(&r, &taps, n, 0.01);
        let lhs: f64 = fwd.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(adj.iter()).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }
}
