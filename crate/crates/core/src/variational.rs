//! Variational equation of the Euler scheme and the Gateaux differential of
//! the cost.
//!
//! The recursion is the exact derivative of the discrete forward map in the
//! direction `u - u0`, so it agrees with finite differences of the simulated
//! cost up to Monte Carlo noise that common random numbers largely cancel.
//! For feedback controls the direction is evaluated on the cells visited by
//! the base paths, i.e. both controls are read as processes along `x0`.

use crate::control_space::RelaxedControl;
use crate::error::{Error, Result};
use crate::exec::{map_range, mean, mean_and_stderr};
use crate::forward_sim::{collect_paths, PathEnsemble, BLOW_UP};
use crate::problem::Problem;

/// Variational states `y` along a base ensemble.
#[derive(Clone, Debug)]
pub struct VariationEnsemble {
    state_dim: usize,
    steps: usize,
    y: Vec<f64>,
    u: RelaxedControl,
    u0: RelaxedControl,
}

impl VariationEnsemble {
    pub fn num_paths(&self) -> usize {
        self.y.len() / ((self.steps + 1) * self.state_dim)
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    /// `y_k` on path `p`.
    pub fn y(&self, p: usize, k: usize) -> &[f64] {
        let n = self.state_dim;
        let o = (p * (self.steps + 1) + k) * n;
        &self.y[o..o + n]
    }
    pub fn values(&self) -> &[f64] {
        &self.y
    }
    /// The perturbed control `u` of the direction `u - u0`.
    pub fn target(&self) -> &RelaxedControl {
        &self.u
    }
    /// The base control `u0`.
    pub fn base_control(&self) -> &RelaxedControl {
        &self.u0
    }
}

/// Signed weight difference `w(u) - w(u0)` at `(k, cell)`.
pub(crate) fn delta_at(u: &RelaxedControl, u0: &RelaxedControl, k: usize, cell: usize, out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(u.weights_at(k, cell)).zip(u0.weights_at(k, cell)) {
        *o = a - b;
    }
}

pub(crate) fn check_direction(base: &PathEnsemble, u: &RelaxedControl, u0: &RelaxedControl) -> Result<()> {
    u.check_same_shape(u0)?;
    base.control().check_same_shape(u0)?;
    if base.control().weights() != u0.weights() {
        return Err(Error::ShapeMismatch("base paths were not simulated under u0".into()));
    }
    Ok(())
}

/// Integrates `y` for the direction `u - u0` on the noise of `base`.
pub fn simulate_variational(p: &Problem, base: &PathEnsemble, u: &RelaxedControl, u0: &RelaxedControl) -> Result<VariationEnsemble> {
    check_direction(base, u, u0)?;
    let n = p.state_dim();
    let m = p.noise_dim();
    let jn = p.num_marks();
    let steps = base.steps();
    let dt = base.dt();
    let grid = u0.grid();
    let noise = base.noise();

    let per_path = map_range(base.num_paths(), |path| -> Result<Vec<f64>> {
        let mut ys = vec![0.0; (steps + 1) * n];
        let mut delta = vec![0.0; grid.len()];
        let mut bx = vec![0.0; n * n];
        let mut bd = vec![0.0; n];
        let mut sx = vec![0.0; n * n * m];
        let mut sd = vec![0.0; n * m];
        let mut cx = vec![0.0; n * n];
        let mut cd = vec![0.0; n];
        let mut scratch = Vec::new();
        for k in 0..steps {
            let t = k as f64 * dt;
            let x = base.state(path, k);
            let cell = base.cell(path, k);
            let w0 = u0.weights_at(k, cell);
            delta_at(u, u0, k, cell, &mut delta);
            p.averaged_drift_jacobian_into(t, x, grid, w0, &mut bx, &mut scratch)?;
            p.averaged_drift_into(t, x, grid, &delta, &mut bd, &mut scratch)?;
            p.averaged_diffusion_jacobian_into(t, x, grid, w0, &mut sx, &mut scratch)?;
            p.averaged_diffusion_into(t, x, grid, &delta, &mut sd, &mut scratch)?;
            let (head, tail) = ys.split_at_mut((k + 1) * n);
            let y = &head[k * n..];
            let next = &mut tail[..n];
            let dw = noise.dw(path, k);
            for i in 0..n {
                let mut drift = bd[i];
                for l in 0..n {
                    drift += bx[i * n + l] * y[l];
                }
                let mut v = y[i] + drift * dt;
                for r in 0..m {
                    let mut s = sd[i * m + r];
                    for l in 0..n {
                        s += sx[l * n * m + i * m + r] * y[l];
                    }
                    v += s * dw[r];
                }
                next[i] = v;
            }
            for j in 0..jn {
                let dq = noise.compensated(path, k, j);
                if dq == 0.0 {
                    continue;
                }
                p.averaged_jump_jacobian_into(t, x, j, grid, w0, &mut cx, &mut scratch)?;
                p.averaged_jump_into(t, x, j, grid, &delta, &mut cd, &mut scratch)?;
                for i in 0..n {
                    let mut c = cd[i];
                    for l in 0..n {
                        c += cx[i * n + l] * y[l];
                    }
                    next[i] += c * dq;
                }
            }
            let mag = next.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(mag <= BLOW_UP) {
                return Err(Error::BlowUp {
                    step: k + 1,
                    path,
                    magnitude: mag,
                });
            }
        }
        Ok(ys)
    });
    let per_path = collect_paths(per_path)?;
    Ok(VariationEnsemble {
        state_dim: n,
        steps,
        y: per_path.concat(),
        u: u.clone(),
        u0: u0.clone(),
    })
}

/// Per-path `(L(y), direct)` where `L(y) = sum_k dt l_x . y_k + Phi_x . y_N`
/// and `direct = sum_k dt l(x_k, w(u) - w(u0))`.
pub fn gateaux_samples(p: &Problem, base: &PathEnsemble, var: &VariationEnsemble) -> Result<Vec<(f64, f64)>> {
    let (u, u0) = (&var.u, &var.u0);
    check_direction(base, u, u0)?;
    if var.num_paths() != base.num_paths() || var.steps != base.steps() {
        return Err(Error::ShapeMismatch("variation and base ensembles differ".into()));
    }
    let n = p.state_dim();
    let dt = base.dt();
    let steps = base.steps();
    let grid = u0.grid();
    let per_path = map_range(base.num_paths(), |path| -> Result<(f64, f64)> {
        let mut lx = vec![0.0; n];
        let mut delta = vec![0.0; grid.len()];
        let mut scratch = Vec::new();
        let (mut ly, mut direct) = (0.0, 0.0);
        for k in 0..steps {
            let t = k as f64 * dt;
            let x = base.state(path, k);
            let cell = base.cell(path, k);
            p.averaged_running_cost_gradient_into(t, x, grid, u0.weights_at(k, cell), &mut lx, &mut scratch)?;
            let y = var.y(path, k);
            ly += dt * lx.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            delta_at(u, u0, k, cell, &mut delta);
            direct += dt * p.averaged_running_cost(t, x, grid, &delta)?;
        }
        p.terminal_gradient(base.state(path, steps), &mut lx);
        ly += lx.iter().zip(var.y(path, steps)).map(|(a, b)| a * b).sum::<f64>();
        Ok((ly, direct))
    });
    collect_paths(per_path)
}

/// The variational functional `L(y)` (without the direct running-cost term).
pub fn l_functional(p: &Problem, base: &PathEnsemble, var: &VariationEnsemble) -> Result<f64> {
    let s = gateaux_samples(p, base, var)?;
    Ok(mean(&s.iter().map(|v| v.0).collect::<Vec<_>>()))
}

/// Gateaux differential `dJ(u0; u - u0) = L(y) + E sum_k dt l(x_k, w(u) - w(u0))`.
pub fn gateaux(p: &Problem, base: &PathEnsemble, var: &VariationEnsemble) -> Result<f64> {
    Ok(gateaux_with_error(p, base, var)?.0)
}

/// Gateaux differential and its Monte Carlo standard error.
pub fn gateaux_with_error(p: &Problem, base: &PathEnsemble, var: &VariationEnsemble) -> Result<(f64, f64)> {
    let s = gateaux_samples(p, base, var)?;
    Ok(mean_and_stderr(&s.iter().map(|v| v.0 + v.1).collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control_space::{BoxBounds, ControlGrid, FeedbackMode};
    use crate::forward_sim::{sample_noise, simulate};
    use crate::problem::InitialState;
    use std::sync::Arc;

    fn drift_is_control() -> Problem {
        Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0] }, BoxBounds::new(vec![-1.0], vec![1.0]).unwrap())
            .drift(Arc::new(|_, _, xi, o| o[0] = xi[0]))
            .drift_jacobian(Arc::new(|_, _, _, o| o[0] = 0.0))
            .build()
            .unwrap()
    }

    fn grid() -> ControlGrid {
        ControlGrid::uniform(&BoxBounds::new(vec![-1.0], vec![1.0]).unwrap(), 3).unwrap()
    }

    #[test]
    fn zero_direction_gives_zero_variation() {
        let p = drift_is_control();
        let u0 = RelaxedControl::uniform(grid(), 1.0, 8, FeedbackMode::OpenLoop).unwrap();
        let noise = sample_noise(&p, 10, 8, 1).unwrap();
        let base = simulate(&p, &u0, &noise).unwrap();
        let var = simulate_variational(&p, &base, &u0, &u0).unwrap();
        assert!(var.values().iter().all(|v| *v == 0.0));
        assert_eq!(gateaux(&p, &base, &var).unwrap(), 0.0);
    }

    #[test]
    fn terminal_variation_is_integrated_mean_difference() {
        let p = drift_is_control();
        let steps = 8;
        let u0 = RelaxedControl::uniform(grid(), 1.0, steps, FeedbackMode::OpenLoop).unwrap();
        let mut w = Vec::new();
        for k in 0..steps {
            if k < 4 {
                w.extend([0.0, 0.0, 1.0]);
            } else {
                w.extend([0.5, 0.5, 0.0]);
            }
        }
        let u = RelaxedControl::from_weights(grid(), 1.0, steps, FeedbackMode::OpenLoop, w).unwrap();
        let noise = sample_noise(&p, 3, steps, 2).unwrap();
        let base = simulate(&p, &u0, &noise).unwrap();
        let var = simulate_variational(&p, &base, &u, &u0).unwrap();
        // mean of u0 is 0; u has mean 1 on the first half and -0.5 after
        let expect = 0.125 * (4.0 * 1.0 + 4.0 * -0.5);
        for path in 0..3 {
            assert!((var.y(path, steps)[0] - expect).abs() < 1e-14);
            assert_eq!(var.y(path, 0)[0], 0.0);
        }
    }
}
