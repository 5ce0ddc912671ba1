//! Candidate function library of multivariate monomials.
//!
//! Terms are ordered by total degree ascending, ties broken lexicographically
//! on the exponent tuple, so serialized coefficient matrices are portable
//! across runs.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// An ordered set of monomial candidate terms over a `dim`-dimensional state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LibrarySpec {
    pub dim: usize,
    pub max_degree: u32,
    pub include_constant: bool,
    /// Exponent tuple per term, length `dim` each.
    pub terms: Vec<Vec<u32>>,
}

/// Enumerate all exponent tuples with total degree exactly `deg`,
/// lexicographic order.
fn tuples_of_degree(dim: usize, deg: u32) -> Vec<Vec<u32>> {
    if dim == 1 {
        return vec![vec![deg]];
    }
    let mut out = Vec::new();
    // lexicographic on the tuple: highest leading exponent first would be
    // descending; ascending lexicographic means exponent 0 first.
    for e in 0..=deg {
        for mut rest in tuples_of_degree(dim - 1, deg - e) {
            let mut t = Vec::with_capacity(dim);
            t.push(e);
            t.append(&mut rest);
            out.push(t);
        }
    }
    out
}

/// Build the monomial library up to `max_degree`.
pub fn build_library(dim: usize, max_degree: u32, include_constant: bool) -> LibrarySpec {
    assert!(dim >= 1, "dim must be >= 1");
    assert!(max_degree >= 1, "max_degree must be >= 1");
    let start = if include_constant { 0 } else { 1 };
    let mut terms = Vec::new();
    for deg in start..=max_degree {
        terms.extend(tuples_of_degree(dim, deg));
    }
    LibrarySpec {
        dim,
        max_degree,
        include_constant,
        terms,
    }
}

impl LibrarySpec {
    /// Number of terms J.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Human-readable monomial names, e.g. `1`, `x1`, `x1*x3`, `x2^2`.
    pub fn term_names(&self) -> Vec<String> {
        self.terms
            .iter()
            .map(|t| {
                let mut parts = Vec::new();
                for (d, &e) in t.iter().enumerate() {
                    match e {
                        0 => {}
                        1 => parts.push(format!("x{}", d + 1)),
                        _ => parts.push(format!("x{}^{}", d + 1, e)),
                    }
                }
                if parts.is_empty() {
                    "1".to_string()
                } else {
                    parts.join("*")
                }
            })
            .collect()
    }

    /// Evaluate every term at a single state, writing into `out` (length J).
    pub fn eval_row(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.terms.len());
        for (j, term) in self.terms.iter().enumerate() {
            let mut v = 1.0;
            for (d, &e) in term.iter().enumerate() {
                // x^0 == 1 even at x == 0
                for _ in 0..e {
                    v *= x[d];
                }
            }
            out[j] = v;
        }
    }

    /// Evaluate the library on an N×D state matrix, returning N×J.
    pub fn evaluate(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if states.ncols() != self.dim {
            return Err(Error::contract(format!(
                "library expects {} state columns, got {}",
                self.dim,
                states.ncols()
            )));
        }
        let n = states.nrows();
        let j = self.terms.len();
        let mut theta = DMatrix::zeros(n, j);
        let mut x = vec![0.0; self.dim];
        let mut row = vec![0.0; j];
        for i in 0..n {
            for d in 0..self.dim {
                x[d] = states[(i, d)];
            }
            self.eval_row(&x, &mut row);
            for (jj, &v) in row.iter().enumerate() {
                theta[(i, jj)] = v;
            }
        }
        Ok(theta)
    }

    /// Partial derivative of term `j` with respect to state component `d`.
    pub fn term_partial(&self, j: usize, x: &[f64], d: usize) -> f64 {
        let term = &self.terms[j];
        let e = term[d];
        if e == 0 {
            return 0.0;
        }
        let mut v = e as f64;
        for _ in 0..(e - 1) {
            v *= x[d];
        }
        for (dd, &ee) in term.iter().enumerate() {
            if dd == d {
                continue;
            }
            for _ in 0..ee {
                v *= x[dd];
            }
        }
        v
    }

    /// Accumulate `out[e] = sum_j weights[j] * d theta_j / d x_e` at state `x`.
    ///
    /// This is the transpose-Jacobian product of the library row, the
    /// building block of every adjoint that flows through a library
    /// evaluation.
    pub fn weighted_jacobian_tv(&self, x: &[f64], weights: &[f64], out: &mut [f64]) {
        debug_assert_eq!(weights.len(), self.terms.len());
        debug_assert_eq!(out.len(), self.dim);
        out.fill(0.0);
        for (j, term) in self.terms.iter().enumerate() {
            let w = weights[j];
            if w == 0.0 {
                continue;
            }
            for (d, &e) in term.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let mut v = e as f64;
                for _ in 0..(e - 1) {
                    v *= x[d];
                }
                for (dd, &ee) in term.iter().enumerate() {
                    if dd == d {
                        continue;
                    }
                    for _ in 0..ee {
                        v *= x[dd];
                    }
                }
                out[d] += w * v;
            }
        }
    }
}
