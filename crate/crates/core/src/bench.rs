//! Benchmark problems and their reference solutions.
//!
//! | name            | dynamics                                  | reference          |
//! |-----------------|-------------------------------------------|--------------------|
//! | `lq1d`          | `dx = u dt + 0.5 dW`, cost `x^2 + u^2`, `0.5 x_T^2` | Riccati ODE |
//! | `lq2d`          | double integrator, `d = 1`, `m = 2`       | Riccati ODE        |
//! | `nonconvex-mix` | `dx = u dt + 0.2 dW`, `U = {-1, 1}`, cost `x^2`, `x_T^2` | brute force |
//! | `jump-lq`       | `lq1d` plus two compensated jump marks    | duality checks     |

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::control_space::{BoxBounds, CellPartition, ControlGrid, FeedbackMode, RelaxedControl};
use crate::error::{Error, Result};
use crate::problem::{InitialState, JumpSpec, Observation, Problem};

/// Names accepted by [`make_benchmark`].
pub const BENCHMARKS: [&str; 4] = ["lq1d", "lq2d", "nonconvex-mix", "jump-lq"];

/// Linear-quadratic instance: `dx = (A x + B u) dt + Sigma0 dW`,
/// cost `E[ int x'Rx x + u'Ru u dt + x_T' G x_T ]`. Matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub rx: Vec<f64>,
    pub ru: Vec<f64>,
    pub g: Vec<f64>,
    pub horizon: f64,
    pub x0: Vec<f64>,
}

fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

impl LqSpec {
    pub fn validate(&self) -> Result<()> {
        let (n, m, d) = (self.n, self.m, self.d);
        let sizes = [
            (self.a.len(), n * n, "A"),
            (self.b.len(), n * d, "B"),
            (self.sigma0.len(), n * m, "Sigma0"),
            (self.rx.len(), n * n, "Rx"),
            (self.ru.len(), d * d, "Ru"),
            (self.g.len(), n * n, "G"),
            (self.x0.len(), n, "x0"),
        ];
        for (got, want, name) in sizes {
            if got != want {
                return Err(Error::InvalidProblem(format!("{name} has {got} entries, expected {want}")));
            }
        }
        let sym = |v: &[f64], k: usize| (0..k).all(|i| (0..k).all(|j| (v[i * k + j] - v[j * k + i]).abs() <= 1e-12));
        if !sym(&self.rx, n) || !sym(&self.g, n) || !sym(&self.ru, d) {
            return Err(Error::InvalidProblem("cost matrices must be symmetric".into()));
        }
        let psd = |v: &[f64], k: usize| mat(k, k, v).symmetric_eigen().eigenvalues.iter().all(|e| *e >= -1e-12);
        if !psd(&self.rx, n) || !psd(&self.g, n) {
            return Err(Error::InvalidProblem("Rx and G must be positive semidefinite".into()));
        }
        if mat(d, d, &self.ru).cholesky().is_none() {
            return Err(Error::InvalidProblem("Ru must be positive definite".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidProblem("horizon must be positive".into()));
        }
        Ok(())
    }

    /// The LQ problem with control set `control_box`.
    pub fn problem(&self, name: &str, control_box: BoxBounds, state_window: BoxBounds) -> Result<Problem> {
        self.validate()?;
        let (n, m, d) = (self.n, self.m, self.d);
        let (a, b, s0, rx, ru, g) = (
            self.a.clone(),
            self.b.clone(),
            self.sigma0.clone(),
            self.rx.clone(),
            self.ru.clone(),
            self.g.clone(),
        );
        let a2 = a.clone();
        let (rx2, g2) = (rx.clone(), g.clone());
        let quad = move |q: &[f64], v: &[f64]| -> f64 {
            let k = v.len();
            let mut s = 0.0;
            for i in 0..k {
                for j in 0..k {
                    s += v[i] * q[i * k + j] * v[j];
                }
            }
            s
        };
        Problem::builder(m, self.horizon, InitialState::Deterministic { value: self.x0.clone() }, control_box)
            .name(name)
            .drift(Arc::new(move |_, x, u, out| {
                for i in 0..n {
                    let mut v = 0.0;
                    for j in 0..n {
                        v += a[i * n + j] * x[j];
                    }
                    for j in 0..d {
                        v += b[i * d + j] * u[j];
                    }
                    out[i] = v;
                }
            }))
            .drift_jacobian(Arc::new(move |_, _, _, out| out.copy_from_slice(&a2)))
            .diffusion(Arc::new(move |_, _, _, out| out.copy_from_slice(&s0)))
            .diffusion_jacobian(Arc::new(move |_, _, _, out| out.fill(0.0)))
            .running_cost(Arc::new(move |_, x, u| quad(&rx, x) + quad(&ru, u)))
            .running_cost_gradient(Arc::new(move |_, x, _, out| {
                for i in 0..n {
                    out[i] = 2.0 * (0..n).map(|j| rx2[i * n + j] * x[j]).sum::<f64>();
                }
            }))
            .terminal_cost(Arc::new(move |x| quad(&g, x)))
            .terminal_gradient(Arc::new(move |x, out| {
                for i in 0..n {
                    out[i] = 2.0 * (0..n).map(|j| g2[i * n + j] * x[j]).sum::<f64>();
                }
            }))
            .state_window(state_window)
            .build()
    }
}

/// Riccati solution on a uniform grid of `[0, T]`.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub spec: LqSpec,
    pub times: Vec<f64>,
    /// `P(t_i)`, row-major `n x n`.
    pub p: Vec<Vec<f64>>,
    pub optimal_cost: f64,
}

impl RiccatiSolution {
    /// `P(t)` by linear interpolation between ODE nodes.
    pub fn p_at(&self, t: f64) -> Vec<f64> {
        let steps = self.times.len() - 1;
        let h = self.spec.horizon / steps as f64;
        let s = (t / h).clamp(0.0, steps as f64);
        let i = (s.floor() as usize).min(steps - 1);
        let f = s - i as f64;
        self.p[i].iter().zip(&self.p[i + 1]).map(|(a, b)| a + f * (b - a)).collect()
    }

    /// `u*(t, x) = -Ru^{-1} B' P(t) x`.
    pub fn feedback(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let s = &self.spec;
        let p = mat(s.n, s.n, &self.p_at(t));
        let k = mat(s.d, s.d, &s.ru).cholesky().expect("validated").inverse() * mat(s.n, s.d, &s.b).transpose() * p;
        let u = -(k * DMatrix::from_column_slice(s.n, 1, x));
        u.iter().copied().collect()
    }

    /// Value-function gradient `2 P(t) x`.
    pub fn value_gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let n = self.spec.n;
        let p = self.p_at(t);
        (0..n).map(|i| 2.0 * (0..n).map(|j| p[i * n + j] * x[j]).sum::<f64>()).collect()
    }
}

/// Integrates `-P' = A'P + PA - P B Ru^{-1} B' P + Rx`, `P(T) = G`, backwards
/// with classical RK4 on `n_ode` steps, together with `int tr(Sigma0' P Sigma0) dt`.
pub fn lq_riccati_oracle(spec: &LqSpec, n_ode: usize) -> Result<RiccatiSolution> {
    spec.validate()?;
    if n_ode == 0 {
        return Err(Error::DomainError("n_ode must be >= 1".into()));
    }
    let (n, m, d) = (spec.n, spec.m, spec.d);
    let a = mat(n, n, &spec.a);
    let b = mat(n, d, &spec.b);
    let s0 = mat(n, m, &spec.sigma0);
    let rx = mat(n, n, &spec.rx);
    let ru_inv = mat(d, d, &spec.ru).cholesky().expect("validated").inverse();
    let brb = &b * ru_inv * b.transpose();
    // in reversed time s = T - t: dP/ds = A'P + PA - P BRB P + Rx, dI/ds = tr(S0' P S0)
    let rhs = |p: &DMatrix<f64>| -> (DMatrix<f64>, f64) {
        let dp = a.transpose() * p + p * &a - p * &brb * p + &rx;
        let tr = (s0.transpose() * p * &s0).trace();
        (dp, tr)
    };
    let h = spec.horizon / n_ode as f64;
    let mut p = mat(n, n, &spec.g);
    let mut integral = 0.0;
    let mut rev = vec![p.as_slice().to_vec()];
    for step in 0..n_ode {
        let (k1, i1) = rhs(&p);
        let (k2, i2) = rhs(&(&p + &k1 * (h / 2.0)));
        let (k3, i3) = rhs(&(&p + &k2 * (h / 2.0)));
        let (k4, i4) = rhs(&(&p + &k3 * h));
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        integral += (i1 + 2.0 * i2 + 2.0 * i3 + i4) * h / 6.0;
        let asym = (&p - p.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(Error::NonPsd {
                t: spec.horizon - (step + 1) as f64 * h,
                asymmetry: asym,
            });
        }
        p = (&p + p.transpose()) * 0.5;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonPsd {
                t: spec.horizon - (step + 1) as f64 * h,
                asymmetry: f64::INFINITY,
            });
        }
        rev.push(p.transpose().as_slice().to_vec());
    }
    rev.reverse();
    let x0 = DMatrix::from_column_slice(n, 1, &spec.x0);
    let p0 = mat(n, n, &rev[0]);
    let optimal_cost = (x0.transpose() * p0 * x0)[(0, 0)] + integral;
    Ok(RiccatiSolution {
        spec: spec.clone(),
        times: (0..=n_ode).map(|i| i as f64 * h).collect(),
        p: rev,
        optimal_cost,
    })
}

/// `lq1d` constants.
pub fn lq1d_spec() -> LqSpec {
    LqSpec {
        n: 1,
        m: 1,
        d: 1,
        a: vec![0.0],
        b: vec![1.0],
        sigma0: vec![0.5],
        rx: vec![1.0],
        ru: vec![1.0],
        g: vec![0.5],
        horizon: 1.0,
        x0: vec![1.0],
    }
}

/// `lq2d` constants: damped double integrator with noise on both components.
pub fn lq2d_spec() -> LqSpec {
    LqSpec {
        n: 2,
        m: 2,
        d: 1,
        a: vec![0.0, 1.0, 0.0, -0.2],
        b: vec![0.0, 1.0],
        sigma0: vec![0.3, 0.0, 0.0, 0.3],
        rx: vec![1.0, 0.0, 0.0, 0.5],
        ru: vec![1.0],
        g: vec![1.0, 0.0, 0.0, 1.0],
        horizon: 1.0,
        x0: vec![1.0, 0.0],
    }
}

/// Jump marks and intensities of `jump-lq`.
pub const JUMP_MARKS: [f64; 2] = [0.4, -0.3];
pub const JUMP_INTENSITIES: [f64; 2] = [1.0, 1.5];
/// Control sensitivity of the jump size: `C = v (1 + JUMP_GAIN u)`.
pub const JUMP_GAIN: f64 = 0.25;

/// A benchmark problem with its default discretization.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub problem: Problem,
    /// Default number of control atoms per control dimension.
    pub atoms: usize,
    pub lq: Option<LqSpec>,
}

impl Benchmark {
    pub fn grid(&self, atoms: Option<usize>) -> Result<ControlGrid> {
        self.problem.control_grid(atoms.unwrap_or(self.atoms))
    }
}

fn sign_observation() -> Observation {
    Observation {
        dim: 1,
        map: Arc::new(|x, o| o[0] = if x[0] < 0.0 { -1.0 } else { 1.0 }),
        window: BoxBounds {
            lower: vec![-1.0],
            upper: vec![1.0],
        },
    }
}

/// Builds a named benchmark with its default discretization.
pub fn benchmark(name: &str) -> Result<Benchmark> {
    match name {
        "lq1d" => {
            let spec = lq1d_spec();
            let problem = spec
                .problem(name, BoxBounds::new(vec![-1.75], vec![0.45])?, BoxBounds::new(vec![-0.4], vec![1.8])?)?
                .with_observation(sign_observation());
            Ok(Benchmark {
                problem,
                atoms: 9,
                lq: Some(spec),
            })
        }
        "lq2d" => {
            let spec = lq2d_spec();
            let problem = spec.problem(
                name,
                BoxBounds::new(vec![-3.0], vec![1.0])?,
                BoxBounds::new(vec![-0.5, -1.5], vec![1.5, 0.5])?,
            )?;
            Ok(Benchmark {
                problem,
                atoms: 9,
                lq: Some(spec),
            })
        }
        "nonconvex-mix" => {
            let problem = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0] }, BoxBounds::new(vec![-1.0], vec![1.0])?)
                .name(name)
                .drift(Arc::new(|_, _, u, o| o[0] = u[0]))
                .drift_jacobian(Arc::new(|_, _, _, o| o[0] = 0.0))
                .diffusion(Arc::new(|_, _, _, o| o[0] = 0.2))
                .diffusion_jacobian(Arc::new(|_, _, _, o| o[0] = 0.0))
                .running_cost(Arc::new(|_, x, _| x[0] * x[0]))
                .running_cost_gradient(Arc::new(|_, x, _, o| o[0] = 2.0 * x[0]))
                .terminal_cost(Arc::new(|x| x[0] * x[0]))
                .terminal_gradient(Arc::new(|x, o| o[0] = 2.0 * x[0]))
                .state_window(BoxBounds::new(vec![-0.5], vec![0.5])?)
                .build()?;
            Ok(Benchmark {
                problem,
                atoms: 2,
                lq: None,
            })
        }
        "jump-lq" => {
            let spec = lq1d_spec();
            let jump = JumpSpec::new(
                JUMP_MARKS.iter().map(|v| vec![*v]).collect(),
                JUMP_INTENSITIES.to_vec(),
                Arc::new(|_, _, v, u, o| o[0] = v[0] * (1.0 + JUMP_GAIN * u[0])),
            )?
            .with_jacobian(Arc::new(|_, _, _, _, o| o[0] = 0.0));
            let base = spec.problem(name, BoxBounds::new(vec![-1.75], vec![0.45])?, BoxBounds::new(vec![-0.6], vec![2.0])?)?;
            let problem = base.with_jump(jump)?;
            Ok(Benchmark {
                problem,
                atoms: 9,
                lq: Some(spec),
            })
        }
        other => Err(Error::UnknownBenchmark(other.to_string())),
    }
}

/// The problem of a named benchmark.
pub fn make_benchmark(name: &str) -> Result<Problem> {
    Ok(benchmark(name)?.problem)
}

/// Printable constants of a benchmark.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Description {
    pub name: String,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub x0: InitialState,
    pub control_box: BoxBounds,
    pub default_atoms: usize,
    pub state_window: BoxBounds,
    pub jump_marks: Vec<Vec<f64>>,
    pub jump_intensities: Vec<f64>,
    pub observation_window: Option<BoxBounds>,
    pub lq: Option<LqSpec>,
    pub riccati_optimal_cost: Option<f64>,
}

pub fn describe(name: &str) -> Result<Description> {
    let b = benchmark(name)?;
    let p = &b.problem;
    let (marks, lambdas) = match p.jump() {
        Some(j) => ((0..j.num_marks()).map(|i| j.mark(i).to_vec()).collect(), j.intensities().to_vec()),
        None => (vec![], vec![]),
    };
    let riccati = match (&b.lq, p.jump()) {
        (Some(s), None) => Some(lq_riccati_oracle(s, 2000)?.optimal_cost),
        _ => None,
    };
    Ok(Description {
        name: name.to_string(),
        state_dim: p.state_dim(),
        noise_dim: p.noise_dim(),
        control_dim: p.control_dim(),
        horizon: p.horizon(),
        x0: p.initial_state().clone(),
        control_box: p.control_box().clone(),
        default_atoms: b.atoms,
        state_window: p.state_window().clone(),
        jump_marks: marks,
        jump_intensities: lambdas,
        observation_window: p.observation().map(|o| o.window.clone()),
        lq: b.lq,
        riccati_optimal_cost: riccati,
    })
}

/// Projects the Riccati feedback onto a one-dimensional grid: on each
/// `(step, cell)` the two atoms bracketing `u*(t_k, center)` are mixed so the
/// mean control equals `u*` (clamped to the grid range).
pub fn riccati_projected_control(sol: &RiccatiSolution, grid: &ControlGrid, partition: CellPartition, steps: usize) -> Result<RelaxedControl> {
    if grid.dim() != 1 || sol.spec.d != 1 {
        return Err(Error::DomainError("projection is implemented for scalar controls".into()));
    }
    let mut atoms: Vec<(f64, usize)> = (0..grid.len()).map(|i| (grid.point(i)[0], i)).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mode = FeedbackMode::StateFeedback { partition };
    let part = mode.partition().expect("state feedback").clone();
    let nc = part.num_cells();
    let k = grid.len();
    let dt = sol.spec.horizon / steps as f64;
    let mut w = vec![0.0; steps * nc * k];
    for s in 0..steps {
        for c in 0..nc {
            let target = sol.feedback(s as f64 * dt, &part.center(c))[0];
            let row = &mut w[(s * nc + c) * k..(s * nc + c + 1) * k];
            if target <= atoms[0].0 {
                row[atoms[0].1] = 1.0;
            } else if target >= atoms[k - 1].0 {
                row[atoms[k - 1].1] = 1.0;
            } else {
                let hi = atoms.iter().position(|a| a.0 >= target).expect("bracketed");
                let (x1, i1) = atoms[hi - 1];
                let (x2, i2) = atoms[hi];
                let f = (target - x1) / (x2 - x1);
                row[i1] = 1.0 - f;
                row[i2] += f;
            }
        }
    }
    RelaxedControl::from_weights(grid.clone(), sol.spec.horizon, steps, mode, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_riccati_matches_closed_form() {
        // A = 0, B = 1, Ru = 1, Rx = 0, G = g: P(t) = g / (1 + g (T - t))
        let g = 0.7;
        let spec = LqSpec {
            rx: vec![0.0],
            g: vec![g],
            ..lq1d_spec()
        };
        let sol = lq_riccati_oracle(&spec, 400).unwrap();
        for (t, p) in sol.times.iter().zip(&sol.p) {
            let exact = g / (1.0 + g * (1.0 - t));
            assert!((p[0] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_costs_give_zero_solution() {
        let spec = LqSpec {
            rx: vec![0.0],
            g: vec![0.0],
            ..lq1d_spec()
        };
        let sol = lq_riccati_oracle(&spec, 100).unwrap();
        assert_eq!(sol.optimal_cost, 0.0);
        assert_eq!(sol.feedback(0.3, &[2.0]), vec![0.0]);
    }

    #[test]
    fn doubling_ode_steps_barely_moves_the_cost() {
        for spec in [lq1d_spec(), lq2d_spec()] {
            let a = lq_riccati_oracle(&spec, 640).unwrap().optimal_cost;
            let b = lq_riccati_oracle(&spec, 1280).unwrap().optimal_cost;
            assert!(((a - b) / b).abs() <= 1e-8);
        }
    }

    #[test]
    fn benchmark_shapes() {
        let p = make_benchmark("lq1d").unwrap();
        assert_eq!((p.state_dim(), p.noise_dim(), p.control_dim()), (1, 1, 1));
        let b = benchmark("nonconvex-mix").unwrap();
        assert_eq!(b.grid(None).unwrap().len(), 2);
        let j = make_benchmark("jump-lq").unwrap();
        assert_eq!(j.num_marks(), 2);
        assert!(j.jump().unwrap().total_intensity() > 0.0);
        assert!(matches!(make_benchmark("nope"), Err(Error::UnknownBenchmark(_))));
    }

    #[test]
    fn riccati_feedback_range_fits_lq1d_box() {
        let sol = lq_riccati_oracle(&lq1d_spec(), 640).unwrap();
        let b = benchmark("lq1d").unwrap();
        let win = b.problem.state_window();
        for t in [0.0, 0.5, 1.0] {
            for x in [win.lower[0], win.upper[0]] {
                let u = sol.feedback(t, &[x])[0];
                assert!(u >= -1.75 && u <= 0.45, "u*({t},{x}) = {u}");
            }
        }
    }

    #[test]
    fn bad_lq_spec_is_rejected() {
        let spec = LqSpec {
            ru: vec![0.0],
            ..lq1d_spec()
        };
        assert!(lq_riccati_oracle(&spec, 10).is_err());
    }
}
