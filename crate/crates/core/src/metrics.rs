//! Recovery-quality metrics shared by the benchmark presets.

use crate::dynamics::{flow_map, CandidateModel, Direction, KnownModel};
use crate::error::{Error, Result};
use crate::library::LibrarySpec;
use nalgebra::DMatrix;

/// All per-run metrics in one place. `e_noise` is absent for methods that do
/// not estimate the noise (plain weak-form identification).
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub e_noise: Option<f64>,
    pub e_field: f64,
    pub e_forward: f64,
    pub e_param: f64,
    pub success: bool,
}

/// Mean squared norm of the noise-estimate error: (1/N) sum ||n_k - n~_k||^2.
pub fn noise_error(true_noise: &DMatrix<f64>, est_noise: &DMatrix<f64>) -> Result<f64> {
    if true_noise.shape() != est_noise.shape() {
        return Err(Error::contract("noise_error: shape mismatch"));
    }
    let n = true_noise.nrows();
    if n == 0 {
        return Err(Error::contract("noise_error: empty input"));
    }
    let diff = true_noise - est_noise;
    Ok(diff.norm_squared() / n as f64)
}

/// Vector-field error along the clean trajectory:
/// sum_k ||f(x_k) - f~(x_k)||^2 / sum_k ||f(x_k)||^2.
pub fn field_error<F, G>(states: &DMatrix<f64>, mut truth: F, mut model: G) -> Result<f64>
where
    F: FnMut(&[f64], &mut [f64]),
    G: FnMut(&[f64], &mut [f64]),
{
    let (n, dim) = states.shape();
    if n == 0 {
        return Err(Error::contract("field_error: empty trajectory"));
    }
    let mut x = vec![0.0; dim];
    let mut ft = vec![0.0; dim];
    let mut fm = vec![0.0; dim];
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..n {
        for e in 0..dim {
            x[e] = states[(k, e)];
        }
        truth(&x, &mut ft);
        model(&x, &mut fm);
        for e in 0..dim {
            let d = ft[e] - fm[e];
            num += d * d;
            den += ft[e] * ft[e];
        }
    }
    if den == 0.0 {
        return Err(Error::contract("field_error: zero true field"));
    }
    Ok(num / den)
}

/// Forward-simulation error: roll the model out from the clean initial
/// condition over a horizon and compare window-by-window against the truth,
/// each window normalized by the truth's local Frobenius norm.
///
/// A diverging rollout returns infinity rather than an error.
pub fn forward_error(
    truth: &DMatrix<f64>,
    model: &CandidateModel,
    dt: f64,
    horizon_steps: usize,
    window: usize,
) -> Result<f64> {
    let (n, dim) = truth.shape();
    let steps = horizon_steps.min(n.saturating_sub(1));
    if steps == 0 || window == 0 {
        return Err(Error::contract("forward_error: empty horizon or window"));
    }
    let mut x: Vec<f64> = (0..dim).map(|e| truth[(0, e)]).collect();
    let mut rollout = DMatrix::zeros(steps + 1, dim);
    for e in 0..dim {
        rollout[(0, e)] = x[e];
    }
    for k in 0..steps {
        match flow_map(model, &x, 1, dt, Direction::Forward) {
            Ok(next) => {
                x = next;
                for e in 0..dim {
                    rollout[(k + 1, e)] = x[e];
                }
            }
            Err(_) => return Ok(f64::INFINITY),
        }
    }
    let mut acc = 0.0;
    let mut n_windows = 0usize;
    let mut start = 0;
    while start <= steps {
        let len = window.min(steps + 1 - start);
        let t_blk = truth.rows(start, len);
        let r_blk = rollout.rows(start, len);
        let den = t_blk.norm();
        if den > 0.0 {
            acc += (t_blk - r_blk).norm() / den;
            n_windows += 1;
        }
        start += window;
    }
    if n_windows == 0 {
        return Err(Error::contract("forward_error: degenerate truth"));
    }
    Ok(acc / n_windows as f64)
}

/// Relative coefficient error ||Xi - Xi~||_F / ||Xi||_F.
pub fn parameter_error(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(Error::contract("parameter_error: shape mismatch"));
    }
    let den = truth.norm();
    if den == 0.0 {
        return Err(Error::contract("parameter_error: zero true coefficients"));
    }
    Ok((truth - estimate).norm() / den)
}

/// Exact two-sided support match: every true nonzero recovered and no
/// spurious terms.
pub fn support_match(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> bool {
    truth.shape() == estimate.shape()
        && truth
            .iter()
            .zip(estimate.iter())
            .all(|(&t, &e)| (t != 0.0) == (e != 0.0))
}

/// Inputs shared by all metric computations for one run.
pub struct MetricInputs<'a> {
    pub clean_states: &'a DMatrix<f64>,
    pub dt: f64,
    pub lib: &'a LibrarySpec,
    pub true_xi: &'a DMatrix<f64>,
    pub est_xi: &'a DMatrix<f64>,
    pub known: Option<&'a KnownModel>,
    pub true_noise: Option<&'a DMatrix<f64>>,
    pub est_noise: Option<&'a DMatrix<f64>>,
    pub horizon_steps: usize,
    pub window: usize,
}

pub fn compute_metrics(inp: &MetricInputs) -> Result<RunMetrics> {
    let e_noise = match (inp.true_noise, inp.est_noise) {
        (Some(t), Some(e)) => Some(noise_error(t, e)?),
        _ => None,
    };
    let truth_model = CandidateModel {
        lib: inp.lib,
        xi: inp.true_xi,
        known: inp.known,
    };
    let est_model = CandidateModel {
        lib: inp.lib,
        xi: inp.est_xi,
        known: inp.known,
    };
    let dim = inp.clean_states.ncols();
    let mut tbuf = vec![0.0; inp.lib.len()];
    let mut tbuf2 = vec![0.0; inp.lib.len()];
    let e_field = field_error(
        inp.clean_states,
        |x, out| truth_model.eval(x, out, &mut tbuf),
        |x, out| est_model.eval(x, out, &mut tbuf2),
    )?;
    let _ = dim;
    let e_forward = forward_error(
        inp.clean_states,
        &est_model,
        inp.dt,
        inp.horizon_steps,
        inp.window,
    )?;
    let e_param = parameter_error(inp.true_xi, inp.est_xi)?;
    let success = support_match(inp.true_xi, inp.est_xi);
    Ok(RunMetrics {
        e_noise,
        e_field,
        e_forward,
        e_param,
        success,
    })
}

/// Median / min / max of a sample, plus the success fraction helper used by
/// figure aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Aggregate {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::contract("aggregate: empty sample"));
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Ok(Aggregate {
        median,
        min: v[0],
        max: v[n - 1],
    })
}

pub fn success_rate(successes: &[bool]) -> Result<f64> {
    if successes.is_empty() {
        return Err(Error::contract("success_rate: empty sample"));
    }
    Ok(successes.iter().filter(|&&s| s).count() as f64 / successes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_truth, true_coefficients, SystemSpec};
    use crate::library::build_library;
    use approx::assert_relative_eq;

    #[test]
    fn noise_error_hand_value() {
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let e = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        // (1 + 4) / 2
        assert_relative_eq!(noise_error(&t, &e).unwrap(), 2.5, epsilon = 1e-15);
        assert_eq!(noise_error(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn field_error_hand_value() {
        let states = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        // truth f(x) = x, model f(x) = 2x: num = 1 + 4, den = 1 + 4
        let e = field_error(
            &states,
            |x, out| out[0] = x[0],
            |x, out| out[0] = 2.0 * x[0],
        )
        .unwrap();
        assert_relative_eq!(e, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn parameter_error_and_support() {
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let mut e = t.clone();
        assert_eq!(parameter_error(&t, &e).unwrap(), 0.0);
        assert!(support_match(&t, &e));
        e[(0, 1)] = 0.001;
        assert!(!support_match(&t, &e));
        e[(0, 1)] = 0.0;
        e[(0, 0)] = 0.0;
        assert!(!support_match(&t, &e));
        // hand value: ||diff|| / ||t|| with diff = [1,0;0,0]
        let ep = parameter_error(&t, &e).unwrap();
        assert_relative_eq!(ep, 1.0 / 5.0f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn forward_error_zero_for_exact_model() {
        let sys = SystemSpec::preset("lorenz").unwrap();
        let traj = simulate_truth(&sys, &[5.0, 5.0, 25.0], 2.0, 0.01).unwrap();
        let lib = build_library(3, 2, false);
        let xi = true_coefficients(&sys, None, &lib).unwrap();
        let model = CandidateModel {
            lib: &lib,
            xi: &xi,
            known: None,
        };
        let e = forward_error(&traj.states, &model, traj.dt, 100, 25).unwrap();
        // RK4 against the high-order reference over a short horizon
        assert!(e < 1e-6, "e_forward = {e}");
    }

    #[test]
    fn forward_error_brute_force_windows() {
        // constant truth, zero model from a nonzero start
        let truth = DMatrix::from_element(10, 1, 2.0);
        let lib = build_library(1, 1, false);
        let xi = DMatrix::zeros(1, 1);
        let model = CandidateModel {
            lib: &lib,
            xi: &xi,
            known: None,
        };
        let e = forward_error(&truth, &model, 0.1, 9, 5).unwrap();
        // rollout equals truth (both constant 2.0), so zero error
        assert_eq!(e, 0.0);

        // linear truth vs frozen model, window = full horizon: one window,
        // error = ||t - r||_F / ||t||_F computed by hand
        let truth2 = DMatrix::from_fn(4, 1, |i, _| 1.0 + i as f64);
        let e2 = forward_error(&truth2, &model, 0.1, 3, 4).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..4 {
            let t = 1.0 + i as f64;
            num += (t - 1.0) * (t - 1.0);
            den += t * t;
        }
        assert_relative_eq!(e2, (num / den).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn forward_error_divergence_is_infinite() {
        // x' = x^2 from x = 10 with big dt blows past the divergence cap
        let truth = DMatrix::from_element(2000, 1, 10.0);
        let lib = build_library(1, 2, false);
        let mut xi = DMatrix::zeros(2, 1);
        xi[(1, 0)] = 5.0;
        let model = CandidateModel {
            lib: &lib,
            xi: &xi,
            known: None,
        };
        let e = forward_error(&truth, &model, 0.5, 1999, 100).unwrap();
        assert!(e.is_infinite());
    }

    #[test]
    fn aggregate_and_success_rate() {
        let a = aggregate(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(a.median, 2.0);
        assert_eq!(a.min, 1.0);
        assert_eq!(a.max, 3.0);
        let b = aggregate(&[4.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(b.median, 2.5);
        assert_eq!(success_rate(&[true, false, true, true]).unwrap(), 0.75);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn compute_metrics_perfect_recovery() {
        let sys = SystemSpec::preset("vanderpol").unwrap();
        let traj = simulate_truth(&sys, &[-2.0, 1.0], 5.0, 0.01).unwrap();
        let lib = build_library(2, 3, false);
        let xi = true_coefficients(&sys, None, &lib).unwrap();
        let zero_noise = DMatrix::zeros(traj.len(), 2);
        let m = compute_metrics(&MetricInputs {
            clean_states: &traj.states,
            dt: traj.dt,
            lib: &lib,
            true_xi: &xi,
            est_xi: &xi,
            known: None,
            true_noise: Some(&zero_noise),
            est_noise: Some(&zero_noise),
            horizon_steps: 200,
            window: 50,
        })
        .unwrap();
        assert_eq!(m.e_noise, Some(0.0));
        assert_eq!(m.e_field, 0.0);
        assert_eq!(m.e_param, 0.0);
        assert!(m.success);
        assert!(m.e_forward < 1e-6);
    }
}
