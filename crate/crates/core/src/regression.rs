//! Per-step least-squares regression on polynomial bases of the state.
//!
//! The basis is every monomial of total degree `<= degree` in the
//! standardized state components, including the constant. Components with
//! zero cross-sectional spread (e.g. a deterministic start) are dropped.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::chunked_vector_sum;

/// Condition number above which the ridge fallback is applied.
pub const MAX_CONDITION: f64 = 1e12;
/// Ridge added to the normal matrix diagonal, relative to its trace.
pub const RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Maximum total degree of the monomials.
    pub degree: u32,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { degree: 2 }
    }
}

fn exponents(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; dim]];
    let mut frontier = vec![vec![0u32; dim]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &frontier {
            // only raise components at or after the last nonzero one, so each
            // monomial is generated once
            let last = e.iter().rposition(|v| *v > 0).unwrap_or(0);
            for j in last..dim {
                let mut f = e.clone();
                f[j] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Fitted normal equations for one time step.
#[derive(Clone, Debug)]
pub struct StepFit {
    center: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<usize>,
    exponents: Vec<Vec<u32>>,
    chol: Cholesky<f64, Dyn>,
    num_paths: usize,
    /// Condition number of the unregularized normal matrix.
    pub condition: f64,
    /// Whether the ridge fallback was used.
    pub ridge: bool,
}

impl StepFit {
    /// Builds the basis from the cross-section `state(0..num_paths)` and
    /// factors its normal matrix.
    pub fn fit<'a, F>(spec: BasisSpec, dim: usize, num_paths: usize, step: usize, state: F) -> Result<StepFit>
    where
        F: Fn(usize) -> &'a [f64] + Sync + Send,
    {
        if num_paths == 0 {
            return Err(Error::DomainError("regression needs at least one path".into()));
        }
        let mf = num_paths as f64;
        let sums = chunked_vector_sum(num_paths, 2 * dim, |s, e| {
            let mut acc = vec![0.0; 2 * dim];
            for p in s..e {
                let x = state(p);
                for i in 0..dim {
                    acc[i] += x[i];
                }
            }
            acc
        });
        let center: Vec<f64> = sums[..dim].iter().map(|s| s / mf).collect();
        let sq = chunked_vector_sum(num_paths, dim, |s, e| {
            let mut acc = vec![0.0; dim];
            for p in s..e {
                let x = state(p);
                for i in 0..dim {
                    acc[i] += (x[i] - center[i]).powi(2);
                }
            }
            acc
        });
        let scale: Vec<f64> = sq.iter().map(|s| (s / mf).sqrt()).collect();
        let active: Vec<usize> = (0..dim)
            .filter(|&i| scale[i] > 1e-12 * (1.0 + center[i].abs()))
            .collect();
        let exps = exponents(active.len(), spec.degree);
        let kb = exps.len();
        let mut fit = StepFit {
            center,
            scale,
            active,
            exponents: exps,
            chol: Cholesky::new(DMatrix::identity(1, 1)).expect("identity is positive definite"),
            num_paths,
            condition: 1.0,
            ridge: false,
        };
        let gram = chunked_vector_sum(num_paths, kb * kb, |s, e| {
            let mut acc = vec![0.0; kb * kb];
            let mut row = vec![0.0; kb];
            for p in s..e {
                fit.eval_basis(state(p), &mut row);
                for a in 0..kb {
                    for b in a..kb {
                        acc[a * kb + b] += row[a] * row[b];
                    }
                }
            }
            acc
        });
        let mut a = DMatrix::from_fn(kb, kb, |i, j| {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            gram[i * kb + j] / mf
        });
        let eig = a.clone().symmetric_eigen();
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        fit.condition = condition;
        if !(condition <= MAX_CONDITION) {
            let r = RIDGE * a.trace();
            for i in 0..kb {
                a[(i, i)] += r;
            }
            fit.ridge = true;
        }
        fit.chol = Cholesky::new(a).ok_or(Error::SingularRegression { step, condition })?;
        Ok(fit)
    }

    pub fn num_basis(&self) -> usize {
        self.exponents.len()
    }

    /// Basis row at state `x`.
    pub fn eval_basis(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (pos, &i) in self.active.iter().enumerate() {
                if e[pos] > 0 {
                    v *= ((x[i] - self.center[i]) / self.scale[i]).powi(e[pos] as i32);
                }
            }
            *o = v;
        }
    }

    /// Least-squares coefficients (row-major `num_basis x width`) for the
    /// vector targets `target(p, out)`.
    pub fn project<'a, S, T>(&self, width: usize, state: S, target: T) -> Vec<f64>
    where
        S: Fn(usize) -> &'a [f64] + Sync + Send,
        T: Fn(usize, &mut [f64]) + Sync + Send,
    {
        let kb = self.num_basis();
        let rhs = chunked_vector_sum(self.num_paths, kb * width, |s, e| {
            let mut acc = vec![0.0; kb * width];
            let mut row = vec![0.0; kb];
            let mut y = vec![0.0; width];
            for p in s..e {
                self.eval_basis(state(p), &mut row);
                target(p, &mut y);
                for a in 0..kb {
                    for c in 0..width {
                        acc[a * width + c] += row[a] * y[c];
                    }
                }
            }
            acc
        });
        let mf = self.num_paths as f64;
        let b = DMatrix::from_fn(kb, width, |a, c| rhs[a * width + c] / mf);
        let sol = self.chol.solve(&b);
        let mut out = vec![0.0; kb * width];
        for a in 0..kb {
            for c in 0..width {
                out[a * width + c] = sol[(a, c)];
            }
        }
        out
    }

    /// Fitted value at `x` for coefficients from [`StepFit::project`].
    pub fn predict(&self, coef: &[f64], width: usize, x: &[f64], row: &mut Vec<f64>, out: &mut [f64]) {
        row.resize(self.num_basis(), 0.0);
        self.eval_basis(x, row);
        out.fill(0.0);
        for (a, r) in row.iter().enumerate() {
            for c in 0..width {
                out[c] += r * coef[a * width + c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(exponents(1, 2).len(), 3);
        assert_eq!(exponents(2, 2).len(), 6);
        assert_eq!(exponents(3, 2).len(), 10);
        assert_eq!(exponents(2, 3).len(), 10);
        assert_eq!(exponents(0, 2).len(), 1);
    }

    #[test]
    fn recovers_quadratic_exactly() {
        let xs: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 50.0 - 2.0]).collect();
        let fit = StepFit::fit(BasisSpec::default(), 1, xs.len(), 0, |p| &xs[p]).unwrap();
        let coef = fit.project(1, |p| &xs[p], |p, o| o[0] = 1.0 - 3.0 * xs[p][0] + 0.5 * xs[p][0] * xs[p][0]);
        let mut row = Vec::new();
        let mut out = [0.0];
        fit.predict(&coef, 1, &[0.7], &mut row, &mut out);
        assert!((out[0] - (1.0 - 2.1 + 0.245)).abs() < 1e-10);
        assert!(!fit.ridge);
    }

    #[test]
    fn constant_cross_section_uses_intercept_only() {
        let xs = vec![vec![1.5, -2.0]; 10];
        let fit = StepFit::fit(BasisSpec::default(), 2, 10, 0, |p| &xs[p]).unwrap();
        assert_eq!(fit.num_basis(), 1);
        let coef = fit.project(1, |p| &xs[p], |p, o| o[0] = p as f64);
        assert!((coef[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn collinear_states_trigger_ridge() {
        // two identical components make the degree-2 basis rank deficient
        let xs: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, i as f64]).collect();
        let fit = StepFit::fit(BasisSpec::default(), 2, xs.len(), 3, |p| &xs[p]).unwrap();
        assert!(fit.ridge);
        assert!(fit.condition > MAX_CONDITION);
    }
}
