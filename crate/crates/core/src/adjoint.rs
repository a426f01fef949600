//! Backward least-squares Monte Carlo solution of the adjoint BSDE and the
//! semimartingale inner product.
//!
//! On each step `k` (from `N-1` down to 0) the regression onto the basis at
//! `x_k` gives
//!
//! ```text
//! psi_hat_k = E[psi_{k+1} | x_k]
//! Q_k       = E[(psi_{k+1} - psi_hat_k) dW_k^T | x_k] / dt
//! phi_{k,j} = E[(psi_{k+1} - psi_hat_k) dq_{k,j} | x_k] / (lambda_j dt)
//! psi_k     = E[psi_hat_k + dt (b_x^T psi_hat_k + V_Q + sum_j lambda_j C_x^T phi_{k,j} + l_x) | x_k]
//! ```
//!
//! with `dq = count - lambda dt`. The Hamiltonian and the duality pairing on
//! step `k` use `psi_hat_k`, which is the adjoint of the Euler scheme.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::control_space::RelaxedControl;
use crate::error::{Error, Result};
use crate::exec::{map_range, mean, pairwise_sum};
use crate::forward_sim::PathEnsemble;
use crate::io::{self, SectionTag};
use crate::problem::Problem;
use crate::regression::{BasisSpec, StepFit};
use crate::variational::{check_direction, delta_at, l_functional, VariationEnsemble};

/// Per-step regression diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub condition: f64,
    pub ridge: bool,
    pub basis_size: usize,
    /// Sample second moment `E|psi_k|^2`.
    pub psi_second_moment: f64,
}

/// Adjoint triple along a base ensemble.
#[derive(Clone, Debug)]
pub struct AdjointEnsemble {
    state_dim: usize,
    noise_dim: usize,
    num_marks: usize,
    steps: usize,
    num_paths: usize,
    psi: Vec<f64>,
    psi_next: Vec<f64>,
    q: Vec<f64>,
    phi: Vec<f64>,
    pub basis: BasisSpec,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl AdjointEnsemble {
    pub fn num_paths(&self) -> usize {
        self.num_paths
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn num_marks(&self) -> usize {
        self.num_marks
    }
    /// `psi_k` on path `p`, `k in 0..=N`.
    pub fn psi(&self, p: usize, k: usize) -> &[f64] {
        let n = self.state_dim;
        let o = (p * (self.steps + 1) + k) * n;
        &self.psi[o..o + n]
    }
    /// `E[psi_{k+1} | x_k]` on path `p`, `k in 0..N`.
    pub fn psi_next(&self, p: usize, k: usize) -> &[f64] {
        let n = self.state_dim;
        let o = (p * self.steps + k) * n;
        &self.psi_next[o..o + n]
    }
    /// `Q_k` (row-major `n x m`).
    pub fn q(&self, p: usize, k: usize) -> &[f64] {
        let w = self.state_dim * self.noise_dim;
        let o = (p * self.steps + k) * w;
        &self.q[o..o + w]
    }
    /// `phi_{k,j}` (length n).
    pub fn phi(&self, p: usize, k: usize, j: usize) -> &[f64] {
        let n = self.state_dim;
        let o = ((p * self.steps + k) * self.num_marks + j) * n;
        &self.phi[o..o + n]
    }

    /// Three `Adjoint` sections: psi `[M, N+1, n]`, Q `[M, N, n, m]`, phi `[M, N, J, n]`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let (m, nn, n) = (self.num_paths as u64, self.steps as u64, self.state_dim as u64);
        io::write_section(&mut w, SectionTag::Adjoint, &[m, nn + 1, n], &self.psi)?;
        io::write_section(&mut w, SectionTag::Adjoint, &[m, nn, n, self.noise_dim as u64], &self.q)?;
        io::write_section(&mut w, SectionTag::Adjoint, &[m, nn, self.num_marks as u64, n], &self.phi)
    }

    /// The adjoint as a semimartingale intensity with `v = psi_k`,
    /// `Sigma = Q_k`, jump part `phi` (pathwise values on each step).
    pub fn as_semimartingale(&self, dt: f64, intensities: &[f64]) -> Semimartingale {
        let n = self.state_dim;
        let mut v = Vec::with_capacity(self.num_paths * self.steps * n);
        for p in 0..self.num_paths {
            for k in 0..self.steps {
                v.extend_from_slice(self.psi(p, k));
            }
        }
        Semimartingale {
            state_dim: n,
            noise_dim: self.noise_dim,
            steps: self.steps,
            num_paths: self.num_paths,
            dt,
            v,
            sigma: self.q.clone(),
            phi: (self.num_marks > 0).then(|| self.phi.clone()),
            intensities: intensities.to_vec(),
        }
    }
}

/// `V_Q` with `(V_Q, y) = tr(Q^T sigma_x(y))`, from the relaxed diffusion Jacobian.
pub fn v_q(p: &Problem, q: &[f64], t: f64, x: &[f64], u: &RelaxedControl, w: &[f64]) -> Result<Vec<f64>> {
    let sx = p.averaged_diffusion_jacobian(t, x, u.grid(), w)?;
    Ok(v_q_from_jacobian(q, &sx, p.state_dim(), p.noise_dim()))
}

pub(crate) fn v_q_from_jacobian(q: &[f64], sx: &[f64], n: usize, m: usize) -> Vec<f64> {
    (0..n)
        .map(|l| {
            let block = &sx[l * n * m..(l + 1) * n * m];
            block.iter().zip(q).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Solves the adjoint BSDE along `base`, which must have been simulated under `u0`.
pub fn solve_bsde(p: &Problem, base: &PathEnsemble, u0: &RelaxedControl, basis: BasisSpec) -> Result<AdjointEnsemble> {
    base.control().check_same_shape(u0)?;
    if base.control().weights() != u0.weights() {
        return Err(Error::ShapeMismatch("base paths were not simulated under u0".into()));
    }
    let n = p.state_dim();
    let m = p.noise_dim();
    let jn = p.num_marks();
    let steps = base.steps();
    let mp = base.num_paths();
    let dt = base.dt();
    let grid = u0.grid();
    let noise = base.noise();
    let lambdas: Vec<f64> = noise.intensities().to_vec();

    let mut psi = vec![0.0; mp * (steps + 1) * n];
    let mut psi_next = vec![0.0; mp * steps * n];
    let mut q = vec![0.0; mp * steps * n * m];
    let mut phi = vec![0.0; mp * steps * jn * n];
    let mut diagnostics = Vec::with_capacity(steps);

    let terminal = map_range(mp, |path| {
        let mut g = vec![0.0; n];
        p.terminal_gradient(base.state(path, steps), &mut g);
        g
    });
    for (path, g) in terminal.into_iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient {
                coefficient: "terminal_gradient",
                t: base.time(steps),
                x: base.state(path, steps).to_vec(),
            });
        }
        let o = (path * (steps + 1) + steps) * n;
        psi[o..o + n].copy_from_slice(&g);
    }

    // martingale part is regressed on the centered increment psi_{k+1} - psi_hat,
    // which has the same conditional expectation against dW and dq but far
    // less variance
    let wm = n * m + jn * n;
    let w1 = n + wm;
    for k in (0..steps).rev() {
        let t = k as f64 * dt;
        let state = |path: usize| base.state(path, k);
        let fit = StepFit::fit(basis, n, mp, k, state)?;
        let psi_ref = &psi;
        let next = |path: usize| {
            let o = (path * (steps + 1) + k + 1) * n;
            &psi_ref[o..o + n]
        };
        let coef_hat = fit.project(n, state, |path, out| out.copy_from_slice(next(path)));
        let hat = map_range(mp, |path| {
            let mut row = Vec::new();
            let mut out = vec![0.0; n];
            fit.predict(&coef_hat, n, base.state(path, k), &mut row, &mut out);
            out
        });
        let coef_mart = fit.project(wm, state, |path, out| {
            let y = next(path);
            let h = &hat[path];
            let dw = noise.dw(path, k);
            for i in 0..n {
                let d = y[i] - h[i];
                for r in 0..m {
                    out[i * m + r] = d * dw[r] / dt;
                }
            }
            for j in 0..jn {
                let o = n * m + j * n;
                let denom = lambdas[j] * dt;
                let dq = noise.compensated(path, k, j);
                for i in 0..n {
                    out[o + i] = if denom > 0.0 { (y[i] - h[i]) * dq / denom } else { 0.0 };
                }
            }
        });

        // fitted psi_hat, Q, phi and the target of the psi_k regression
        let fitted = map_range(mp, |path| -> Result<(Vec<f64>, Vec<f64>)> {
            let x = base.state(path, k);
            let mut row = Vec::new();
            let mut f = vec![0.0; w1];
            f[..n].copy_from_slice(&hat[path]);
            fit.predict(&coef_mart, wm, x, &mut row, &mut f[n..]);
            let w0 = u0.weights_at(k, base.cell(path, k));
            let mut scratch = Vec::new();
            let mut bx = vec![0.0; n * n];
            let mut sx = vec![0.0; n * n * m];
            let mut lx = vec![0.0; n];
            let mut cx = vec![0.0; n * n];
            p.averaged_drift_jacobian_into(t, x, grid, w0, &mut bx, &mut scratch)?;
            p.averaged_diffusion_jacobian_into(t, x, grid, w0, &mut sx, &mut scratch)?;
            p.averaged_running_cost_gradient_into(t, x, grid, w0, &mut lx, &mut scratch)?;
            let ph = &f[..n];
            let vq = v_q_from_jacobian(&f[n..n + n * m], &sx, n, m);
            let mut target = vec![0.0; n];
            for l in 0..n {
                let mut g = vq[l] + lx[l];
                for i in 0..n {
                    g += bx[i * n + l] * ph[i];
                }
                target[l] = g;
            }
            for j in 0..jn {
                if lambdas[j] == 0.0 {
                    continue;
                }
                p.averaged_jump_jacobian_into(t, x, j, grid, w0, &mut cx, &mut scratch)?;
                let fj = &f[n + n * m + j * n..n + n * m + (j + 1) * n];
                for l in 0..n {
                    let mut g = 0.0;
                    for i in 0..n {
                        g += cx[i * n + l] * fj[i];
                    }
                    target[l] += lambdas[j] * g;
                }
            }
            for l in 0..n {
                target[l] = ph[l] + dt * target[l];
            }
            Ok((f, target))
        });
        let fitted = crate::forward_sim::collect_paths(fitted)?;
        let coef2 = fit.project(n, state, |path, out| out.copy_from_slice(&fitted[path].1));
        let new_psi = map_range(mp, |path| {
            let mut row = Vec::new();
            let mut out = vec![0.0; n];
            fit.predict(&coef2, n, base.state(path, k), &mut row, &mut out);
            out
        });

        let mut sq = Vec::with_capacity(mp);
        for path in 0..mp {
            let f = &fitted[path].0;
            let o = (path * steps + k) * n;
            psi_next[o..o + n].copy_from_slice(&f[..n]);
            let oq = (path * steps + k) * n * m;
            q[oq..oq + n * m].copy_from_slice(&f[n..n + n * m]);
            let of = (path * steps + k) * jn * n;
            phi[of..of + jn * n].copy_from_slice(&f[n + n * m..]);
            let op = (path * (steps + 1) + k) * n;
            psi[op..op + n].copy_from_slice(&new_psi[path]);
            if new_psi[path].iter().chain(f.iter()).any(|v| !v.is_finite()) {
                return Err(Error::SingularRegression {
                    step: k,
                    condition: fit.condition,
                });
            }
            sq.push(new_psi[path].iter().map(|v| v * v).sum::<f64>());
        }
        diagnostics.push(StepDiagnostics {
            step: k,
            condition: fit.condition,
            ridge: fit.ridge,
            basis_size: fit.num_basis(),
            psi_second_moment: mean(&sq),
        });
    }
    diagnostics.reverse();
    Ok(AdjointEnsemble {
        state_dim: n,
        noise_dim: m,
        num_marks: jn,
        steps,
        num_paths: mp,
        psi,
        psi_next,
        q,
        phi,
        basis,
        diagnostics,
    })
}

/// Semimartingale intensities `(v, Sigma, phi)` sampled per path and step.
#[derive(Clone, Debug, PartialEq)]
pub struct Semimartingale {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub steps: usize,
    pub num_paths: usize,
    pub dt: f64,
    /// `M x N x n`
    pub v: Vec<f64>,
    /// `M x N x (n x m)`
    pub sigma: Vec<f64>,
    /// `M x N x J x n`
    pub phi: Option<Vec<f64>>,
    /// Jump intensities `lambda_j` weighting the jump pairing.
    pub intensities: Vec<f64>,
}

impl Semimartingale {
    fn check(&self) -> Result<()> {
        let base = self.num_paths * self.steps;
        let ok_v = self.v.len() == base * self.state_dim;
        let ok_s = self.sigma.len() == base * self.state_dim * self.noise_dim;
        let ok_p = self
            .phi
            .as_ref()
            .is_none_or(|p| p.len() == base * self.intensities.len() * self.state_dim);
        if ok_v && ok_s && ok_p {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("semimartingale arrays do not match their dims".into()))
        }
    }
}

/// `E sum_k dt [ (v1, v2) + tr(Sigma1^T Sigma2) + sum_j lambda_j (phi1_j, phi2_j) ]`.
pub fn sm_inner(a: &Semimartingale, b: &Semimartingale) -> Result<f64> {
    a.check()?;
    b.check()?;
    if a.state_dim != b.state_dim
        || a.noise_dim != b.noise_dim
        || a.steps != b.steps
        || a.num_paths != b.num_paths
        || a.dt != b.dt
        || a.intensities != b.intensities
        || a.phi.is_some() != b.phi.is_some()
    {
        return Err(Error::ShapeMismatch("semimartingales live on different grids".into()));
    }
    let n = a.state_dim;
    let sw = n * a.noise_dim;
    let jn = a.intensities.len();
    let per_path = map_range(a.num_paths, |p| {
        let mut terms = Vec::with_capacity(a.steps);
        for k in 0..a.steps {
            let r = p * a.steps + k;
            let mut s: f64 = a.v[r * n..(r + 1) * n]
                .iter()
                .zip(&b.v[r * n..(r + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
            s += a.sigma[r * sw..(r + 1) * sw]
                .iter()
                .zip(&b.sigma[r * sw..(r + 1) * sw])
                .map(|(x, y)| x * y)
                .sum::<f64>();
            if let (Some(pa), Some(pb)) = (&a.phi, &b.phi) {
                for j in 0..jn {
                    let o = (r * jn + j) * n;
                    s += a.intensities[j] * pa[o..o + n].iter().zip(&pb[o..o + n]).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            terms.push(a.dt * s);
        }
        pairwise_sum(&terms)
    });
    Ok(mean(&per_path))
}

/// Both sides of the Riesz duality identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Duality {
    /// Variational functional `L(y)`.
    pub l_y: f64,
    /// `E sum_k dt [ (psi_hat, b(Delta)) + tr(Q^T sigma(Delta)) + sum_j lambda_j (phi_j, C_j(Delta)) ]`.
    pub pairing: f64,
    /// `|l_y - pairing|`.
    pub gap: f64,
}

/// Evaluates both sides of the duality identity for the direction `u - u0`.
pub fn duality(
    p: &Problem,
    base: &PathEnsemble,
    u0: &RelaxedControl,
    u: &RelaxedControl,
    adj: &AdjointEnsemble,
    var: &VariationEnsemble,
) -> Result<Duality> {
    check_direction(base, u, u0)?;
    if adj.num_paths != base.num_paths() || adj.steps != base.steps() {
        return Err(Error::ShapeMismatch("adjoint and base ensembles differ".into()));
    }
    if var.target().weights() != u.weights() || var.base_control().weights() != u0.weights() {
        return Err(Error::ShapeMismatch("variation was built for a different direction".into()));
    }
    let n = p.state_dim();
    let m = p.noise_dim();
    let jn = p.num_marks();
    let dt = base.dt();
    let grid = u0.grid();
    let lambdas = base.noise().intensities().to_vec();
    let per_path = map_range(base.num_paths(), |path| -> Result<f64> {
        let mut delta = vec![0.0; grid.len()];
        let mut bd = vec![0.0; n];
        let mut sd = vec![0.0; n * m];
        let mut cd = vec![0.0; n];
        let mut scratch = Vec::new();
        let mut terms = Vec::with_capacity(base.steps());
        for k in 0..base.steps() {
            let t = k as f64 * dt;
            let x = base.state(path, k);
            delta_at(u, u0, k, base.cell(path, k), &mut delta);
            if delta.iter().all(|d| *d == 0.0) {
                terms.push(0.0);
                continue;
            }
            p.averaged_drift_into(t, x, grid, &delta, &mut bd, &mut scratch)?;
            p.averaged_diffusion_into(t, x, grid, &delta, &mut sd, &mut scratch)?;
            let mut s: f64 = adj.psi_next(path, k).iter().zip(&bd).map(|(a, b)| a * b).sum();
            s += adj.q(path, k).iter().zip(&sd).map(|(a, b)| a * b).sum::<f64>();
            for j in 0..jn {
                if lambdas[j] == 0.0 {
                    continue;
                }
                p.averaged_jump_into(t, x, j, grid, &delta, &mut cd, &mut scratch)?;
                s += lambdas[j] * adj.phi(path, k, j).iter().zip(&cd).map(|(a, b)| a * b).sum::<f64>();
            }
            terms.push(dt * s);
        }
        Ok(pairwise_sum(&terms))
    });
    let pairing = mean(&crate::forward_sim::collect_paths(per_path)?);
    let l_y = l_functional(p, base, var)?;
    Ok(Duality {
        l_y,
        pairing,
        gap: (l_y - pairing).abs(),
    })
}

/// `|L(y) - pairing|` for the direction `u - u0`.
pub fn duality_gap(
    p: &Problem,
    base: &PathEnsemble,
    u0: &RelaxedControl,
    u: &RelaxedControl,
    adj: &AdjointEnsemble,
    var: &VariationEnsemble,
) -> Result<f64> {
    Ok(duality(p, base, u0, u, adj, var)?.gap)
}
