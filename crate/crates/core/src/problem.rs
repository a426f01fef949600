//! Control problem definition.
//!
//! Coefficients are black-box closures evaluated at single control atoms;
//! the relaxed (measure-averaged) coefficients are weighted sums over the
//! atoms of a [`ControlGrid`]. Missing state gradients fall back to central
//! finite differences.
//!
//! Array layouts (all row-major):
//! - drift `b`: `n`; drift Jacobian `b_x`: `n x n`, entry `(i, j) = d b_i / d x_j`
//! - diffusion `sigma`: `n x m`; its Jacobian: `n` blocks of `n x m`, block `l` is `d sigma / d x_l`
//! - jump coefficient `C(t, x, v, xi)`: `n`; its Jacobian: `n x n`
//! - running and terminal cost gradients: `n`

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control_space::{BoxBounds, CellPartition, ControlGrid};
use crate::error::{Error, Result};
use crate::rng::aux_stream;

/// `(t, x, xi, out)`
pub type VecField = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, xi) -> value`
pub type ScalarField = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// `x -> value`
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// `(x, out)`
pub type PointMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, v, xi, out)`
pub type JumpField = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Relative step of the finite-difference fallback: `h = FD_STEP (1 + |x_j|)`.
pub const FD_STEP: f64 = 1e-5;

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn fd_step(x: f64) -> f64 {
    FD_STEP * (1.0 + x.abs())
}

/// Central-difference Jacobian of `f: R^n -> R^len`, written column-block
/// style: `out[l * len + r] = d f_r / d x_l`.
fn fd_jacobian_blocks<F: Fn(&[f64], &mut [f64])>(f: F, x: &[f64], len: usize, out: &mut [f64]) {
    let n = x.len();
    let mut xp = x.to_vec();
    let mut plus = vec![0.0; len];
    let mut minus = vec![0.0; len];
    for l in 0..n {
        let h = fd_step(x[l]);
        xp[l] = x[l] + h;
        f(&xp, &mut plus);
        xp[l] = x[l] - h;
        f(&xp, &mut minus);
        xp[l] = x[l];
        for r in 0..len {
            out[l * len + r] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
}

/// Initial state x0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    Deterministic { value: Vec<f64> },
    /// Independent Gaussian components.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl InitialState {
    pub fn dim(&self) -> usize {
        match self {
            InitialState::Deterministic { value } => value.len(),
            InitialState::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            InitialState::Deterministic { value } => value,
            InitialState::Gaussian { mean, .. } => mean,
        }
    }
}

/// Finite atomic Levy measure `sum_j lambda_j delta_{v_j}` with the jump
/// coefficient `C(t, x, v, xi)`.
#[derive(Clone)]
pub struct JumpSpec {
    marks: Vec<Vec<f64>>,
    intensities: Vec<f64>,
    coefficient: JumpField,
    jacobian: Option<JumpField>,
}

impl JumpSpec {
    pub fn new(marks: Vec<Vec<f64>>, intensities: Vec<f64>, coefficient: JumpField) -> Result<Self> {
        if marks.len() != intensities.len() || marks.is_empty() {
            return Err(Error::InvalidProblem(
                "jump spec needs one intensity per mark and at least one mark".into(),
            ));
        }
        if intensities.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidProblem("jump intensities must be finite and >= 0".into()));
        }
        if marks.iter().any(|v| v.iter().all(|c| *c == 0.0)) {
            return Err(Error::InvalidProblem("jump marks must be nonzero".into()));
        }
        Ok(Self {
            marks,
            intensities,
            coefficient,
            jacobian: None,
        })
    }

    pub fn with_jacobian(mut self, jacobian: JumpField) -> Self {
        self.jacobian = Some(jacobian);
        self
    }

    pub fn num_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn mark(&self, j: usize) -> &[f64] {
        &self.marks[j]
    }

    pub fn intensity(&self, j: usize) -> f64 {
        self.intensities[j]
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensities.iter().sum()
    }
}

/// Observation map generating the partial-information filtration, with the
/// box used to bin observations into cells.
#[derive(Clone)]
pub struct Observation {
    pub dim: usize,
    pub map: PointMap,
    pub window: BoxBounds,
}

/// Coefficient bundle of a controlled (jump-)diffusion with running and
/// terminal costs.
#[derive(Clone)]
pub struct Problem {
    pub name: String,
    state_dim: usize,
    noise_dim: usize,
    horizon: f64,
    x0: InitialState,
    control_box: BoxBounds,
    state_window: BoxBounds,
    drift: VecField,
    drift_jacobian: Option<VecField>,
    diffusion: VecField,
    diffusion_jacobian: Option<VecField>,
    running_cost: ScalarField,
    running_cost_gradient: Option<VecField>,
    terminal_cost: TerminalFn,
    terminal_gradient: Option<PointMap>,
    jump: Option<JumpSpec>,
    observation: Option<Observation>,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("n", &self.state_dim)
            .field("m", &self.noise_dim)
            .field("d", &self.control_dim())
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("jump_marks", &self.jump.as_ref().map(|j| j.num_marks()))
            .field("observed", &self.observation.is_some())
            .finish()
    }
}

/// Builder for [`Problem`]. Drift, diffusion and costs default to zero.
pub struct ProblemBuilder {
    inner: Problem,
}

impl ProblemBuilder {
    pub fn drift(mut self, f: VecField) -> Self {
        self.inner.drift = f;
        self
    }
    pub fn drift_jacobian(mut self, f: VecField) -> Self {
        self.inner.drift_jacobian = Some(f);
        self
    }
    pub fn diffusion(mut self, f: VecField) -> Self {
        self.inner.diffusion = f;
        self
    }
    pub fn diffusion_jacobian(mut self, f: VecField) -> Self {
        self.inner.diffusion_jacobian = Some(f);
        self
    }
    pub fn running_cost(mut self, f: ScalarField) -> Self {
        self.inner.running_cost = f;
        self
    }
    pub fn running_cost_gradient(mut self, f: VecField) -> Self {
        self.inner.running_cost_gradient = Some(f);
        self
    }
    pub fn terminal_cost(mut self, f: TerminalFn) -> Self {
        self.inner.terminal_cost = f;
        self
    }
    pub fn terminal_gradient(mut self, f: PointMap) -> Self {
        self.inner.terminal_gradient = Some(f);
        self
    }
    pub fn jump(mut self, j: JumpSpec) -> Self {
        self.inner.jump = Some(j);
        self
    }
    pub fn observation(mut self, o: Observation) -> Self {
        self.inner.observation = Some(o);
        self
    }
    pub fn state_window(mut self, w: BoxBounds) -> Self {
        self.inner.state_window = w;
        self
    }
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.inner.name = name.into();
        self
    }

    pub fn build(self) -> Result<Problem> {
        let p = self.inner;
        if !(p.horizon > 0.0) || !p.horizon.is_finite() {
            return Err(Error::InvalidProblem(format!("horizon must be positive, got {}", p.horizon)));
        }
        if p.state_dim == 0 || p.noise_dim == 0 {
            return Err(Error::InvalidProblem("dimensions must be positive".into()));
        }
        if p.x0.dim() != p.state_dim {
            return Err(Error::InvalidProblem("x0 dimension differs from state dimension".into()));
        }
        if let InitialState::Gaussian { std, .. } = &p.x0 {
            if std.len() != p.state_dim || std.iter().any(|s| !(*s >= 0.0)) {
                return Err(Error::InvalidProblem("x0 std must be n nonnegative values".into()));
            }
        }
        if p.state_window.dim() != p.state_dim {
            return Err(Error::InvalidProblem("state window dimension differs from n".into()));
        }
        if let Some(j) = &p.jump {
            if j.marks.iter().any(|v| v.len() != p.state_dim) {
                return Err(Error::InvalidProblem("jump marks must lie in R^n".into()));
            }
        }
        if let Some(o) = &p.observation {
            if o.window.dim() != o.dim || o.dim == 0 {
                return Err(Error::InvalidProblem("observation window dimension mismatch".into()));
            }
        }
        Ok(p)
    }
}

impl Problem {
    /// Starts a problem with zero coefficients on `[0, horizon]`.
    pub fn builder(noise_dim: usize, horizon: f64, x0: InitialState, control_box: BoxBounds) -> ProblemBuilder {
        let n = x0.dim();
        let zero_vec: VecField = Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0));
        let window = BoxBounds {
            lower: x0.mean().iter().map(|v| v - 1.0).collect(),
            upper: x0.mean().iter().map(|v| v + 1.0).collect(),
        };
        ProblemBuilder {
            inner: Problem {
                name: "custom".into(),
                state_dim: n,
                noise_dim,
                horizon,
                x0,
                control_box,
                state_window: window,
                drift: zero_vec.clone(),
                drift_jacobian: None,
                diffusion: zero_vec,
                diffusion_jacobian: None,
                running_cost: Arc::new(|_, _, _| 0.0),
                running_cost_gradient: None,
                terminal_cost: Arc::new(|_| 0.0),
                terminal_gradient: None,
                jump: None,
                observation: None,
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn control_dim(&self) -> usize {
        self.control_box.dim()
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn initial_state(&self) -> &InitialState {
        &self.x0
    }
    pub fn control_box(&self) -> &BoxBounds {
        &self.control_box
    }
    pub fn state_window(&self) -> &BoxBounds {
        &self.state_window
    }
    pub fn jump(&self) -> Option<&JumpSpec> {
        self.jump.as_ref()
    }
    pub fn num_marks(&self) -> usize {
        self.jump.as_ref().map_or(0, |j| j.num_marks())
    }
    pub fn observation(&self) -> Option<&Observation> {
        self.observation.as_ref()
    }

    /// Adds (or replaces) the jump component.
    pub fn with_jump(mut self, j: JumpSpec) -> Result<Self> {
        if j.marks.iter().any(|v| v.len() != self.state_dim) {
            return Err(Error::InvalidProblem("jump marks must lie in R^n".into()));
        }
        self.jump = Some(j);
        Ok(self)
    }

    /// Replaces the observation map (used to pose partial-information variants).
    pub fn with_observation(mut self, o: Observation) -> Self {
        self.observation = Some(o);
        self
    }

    pub fn has_drift_jacobian(&self) -> bool {
        self.drift_jacobian.is_some()
    }

    /// Uniform lattice with `per_dim` atoms per axis of U.
    pub fn control_grid(&self, per_dim: usize) -> Result<ControlGrid> {
        ControlGrid::uniform(&self.control_box, per_dim)
    }

    /// Cell partition of the state window.
    pub fn state_partition(&self, cells_per_dim: usize) -> Result<CellPartition> {
        CellPartition::new(
            self.state_window.lower.clone(),
            self.state_window.upper.clone(),
            cells_per_dim,
        )
    }

    /// Cell partition of the observation window.
    pub fn observation_partition(&self, cells_per_dim: usize) -> Result<CellPartition> {
        let o = self
            .observation
            .as_ref()
            .ok_or_else(|| Error::InvalidProblem("problem has no observation map".into()))?;
        CellPartition::new(o.window.lower.clone(), o.window.upper.clone(), cells_per_dim)
    }

    pub fn observe(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let o = self
            .observation
            .as_ref()
            .ok_or_else(|| Error::InvalidProblem("problem has no observation map".into()))?;
        (o.map)(x, out);
        Ok(())
    }

    // ---- pointwise evaluations at a single atom ----

    pub fn drift(&self, t: f64, x: &[f64], xi: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, xi, out)
    }

    pub fn drift_jacobian(&self, t: f64, x: &[f64], xi: &[f64], out: &mut [f64]) {
        match &self.drift_jacobian {
            Some(f) => f(t, x, xi, out),
            None => {
                let n = self.state_dim;
                let mut blocks = vec![0.0; n * n];
                fd_jacobian_blocks(|y, o| (self.drift)(t, y, xi, o), x, n, &mut blocks);
                // blocks[l * n + i] = d b_i / d x_l  ->  out[i * n + l]
                for i in 0..n {
                    for l in 0..n {
                        out[i * n + l] = blocks[l * n + i];
                    }
                }
            }
        }
    }

    pub fn diffusion(&self, t: f64, x: &[f64], xi: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, xi, out)
    }

    pub fn diffusion_jacobian(&self, t: f64, x: &[f64], xi: &[f64], out: &mut [f64]) {
        match &self.diffusion_jacobian {
            Some(f) => f(t, x, xi, out),
            None => {
                let len = self.state_dim * self.noise_dim;
                fd_jacobian_blocks(|y, o| (self.diffusion)(t, y, xi, o), x, len, out);
            }
        }
    }

    pub fn running_cost(&self, t: f64, x: &[f64], xi: &[f64]) -> f64 {
        (self.running_cost)(t, x, xi)
    }

    pub fn running_cost_gradient(&self, t: f64, x: &[f64], xi: &[f64], out: &mut [f64]) {
        match &self.running_cost_gradient {
            Some(f) => f(t, x, xi, out),
            None => fd_jacobian_blocks(|y, o| o[0] = (self.running_cost)(t, y, xi), x, 1, out),
        }
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        (self.terminal_cost)(x)
    }

    pub fn terminal_gradient(&self, x: &[f64], out: &mut [f64]) {
        match &self.terminal_gradient {
            Some(f) => f(x, out),
            None => fd_jacobian_blocks(|y, o| o[0] = (self.terminal_cost)(y), x, 1, out),
        }
    }

    /// `C(t, x, v_j, xi)` for mark `j`. Zero when the problem has no jumps.
    pub fn jump_coefficient(&self, t: f64, x: &[f64], mark: usize, xi: &[f64], out: &mut [f64]) {
        match &self.jump {
            Some(j) => (j.coefficient)(t, x, &j.marks[mark], xi, out),
            None => out.fill(0.0),
        }
    }

    pub fn jump_jacobian(&self, t: f64, x: &[f64], mark: usize, xi: &[f64], out: &mut [f64]) {
        let Some(j) = &self.jump else {
            out.fill(0.0);
            return;
        };
        match &j.jacobian {
            Some(f) => f(t, x, &j.marks[mark], xi, out),
            None => {
                let n = self.state_dim;
                let mut blocks = vec![0.0; n * n];
                let v = &j.marks[mark];
                fd_jacobian_blocks(|y, o| (j.coefficient)(t, y, v, xi, o), x, n, &mut blocks);
                for i in 0..n {
                    for l in 0..n {
                        out[i * n + l] = blocks[l * n + i];
                    }
                }
            }
        }
    }

    // ---- relaxed averages ----

    fn average_into<F>(&self, name: &'static str, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>, eval: F) -> Result<()>
    where
        F: Fn(&[f64], &mut [f64]),
    {
        out.fill(0.0);
        scratch.resize(out.len(), 0.0);
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            eval(grid.point(i), scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += wi * s;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient {
                coefficient: name,
                t,
                x: x.to_vec(),
            });
        }
        Ok(())
    }

    /// `sum_i w_i b(t, x, xi_i)`; `w` may be a signed weight difference.
    pub fn averaged_drift_into(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
        self.average_into("drift", t, x, grid, w, out, scratch, |xi, o| self.drift(t, x, xi, o))
    }

    pub fn averaged_drift_jacobian_into(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
        self.average_into("drift_jacobian", t, x, grid, w, out, scratch, |xi, o| self.drift_jacobian(t, x, xi, o))
    }

    pub fn averaged_diffusion_into(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
        self.average_into("diffusion", t, x, grid, w, out, scratch, |xi, o| self.diffusion(t, x, xi, o))
    }

    pub fn averaged_diffusion_jacobian_into(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
        self.average_into("diffusion_jacobian", t, x, grid, w, out, scratch, |xi, o| self.diffusion_jacobian(t, x, xi, o))
    }

    pub fn averaged_running_cost(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                s += wi * self.running_cost(t, x, grid.point(i));
            }
        }
        if !s.is_finite() {
            return Err(Error::NonFiniteCoefficient {
                coefficient: "running_cost",
                t,
                x: x.to_vec(),
            });
        }
        Ok(s)
    }

    pub fn averaged_running_cost_gradient_into(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
        self.average_into("running_cost_gradient", t, x, grid, w, out, scratch, |xi, o| self.running_cost_gradient(t, x, xi, o))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn averaged_jump_into(&self, t: f64, x: &[f64], mark: usize, grid: &ControlGrid, w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
        self.average_into("jump_coefficient", t, x, grid, w, out, scratch, |xi, o| self.jump_coefficient(t, x, mark, xi, o))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn averaged_jump_jacobian_into(&self, t: f64, x: &[f64], mark: usize, grid: &ControlGrid, w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
        self.average_into("jump_jacobian", t, x, grid, w, out, scratch, |xi, o| self.jump_jacobian(t, x, mark, xi, o))
    }

    /// Relaxed drift `sum_i w_i b(t, x, xi_i)`.
    pub fn averaged_drift(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.state_dim];
        self.averaged_drift_into(t, x, grid, w, &mut out, &mut Vec::new())?;
        Ok(out)
    }

    /// Relaxed diffusion, `n x m` row-major.
    pub fn averaged_diffusion(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.state_dim * self.noise_dim];
        self.averaged_diffusion_into(t, x, grid, w, &mut out, &mut Vec::new())?;
        Ok(out)
    }

    /// Relaxed jump coefficient for mark `j`.
    pub fn averaged_jump(&self, t: f64, x: &[f64], mark: usize, grid: &ControlGrid, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.state_dim];
        self.averaged_jump_into(t, x, mark, grid, w, &mut out, &mut Vec::new())?;
        Ok(out)
    }

    pub fn averaged_drift_jacobian(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.state_dim * self.state_dim];
        self.averaged_drift_jacobian_into(t, x, grid, w, &mut out, &mut Vec::new())?;
        Ok(out)
    }

    pub fn averaged_diffusion_jacobian(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.state_dim * self.state_dim * self.noise_dim];
        self.averaged_diffusion_jacobian_into(t, x, grid, w, &mut out, &mut Vec::new())?;
        Ok(out)
    }

    pub fn averaged_running_cost_gradient(&self, t: f64, x: &[f64], grid: &ControlGrid, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.state_dim];
        self.averaged_running_cost_gradient_into(t, x, grid, w, &mut out, &mut Vec::new())?;
        Ok(out)
    }
}

/// Empirical constants found by [`validate_assumptions`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub samples: usize,
    /// max |b(x) - b(y)| / |x - y|
    pub drift_lipschitz: f64,
    /// max |b(x)| / (1 + |x|)
    pub drift_growth: f64,
    /// Frobenius analogues for sigma.
    pub diffusion_lipschitz: f64,
    pub diffusion_growth: f64,
    /// (sum_j lambda_j |C(x, v_j)|^2)^(1/2) / (1 + |x|)
    pub jump_growth: f64,
    /// (sum_j lambda_j |C(x, v_j) - C(y, v_j)|^2)^(1/2) / |x - y|
    pub jump_lipschitz: f64,
    /// max operator-Frobenius norms of the state gradients.
    pub drift_jacobian_bound: f64,
    pub diffusion_jacobian_bound: f64,
    pub jump_jacobian_bound: f64,
    /// max |l| / (1 + |x|^2) and max |Phi| / (1 + |x|^2)
    pub running_cost_growth: f64,
    pub terminal_cost_growth: f64,
    /// Worst relative mismatch `|g - fd| / max(1, |fd|)` per user-supplied gradient.
    pub gradient_mismatch: Vec<(String, f64)>,
    /// Coefficients whose repeated evaluation differed.
    pub impure: Vec<String>,
}

impl AssumptionReport {
    /// Tolerance for user gradients against central differences.
    pub const GRADIENT_TOL: f64 = 1e-5;

    pub fn gradients_consistent(&self) -> bool {
        self.gradient_mismatch.iter().all(|(_, e)| *e <= Self::GRADIENT_TOL)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn ensure_finite(name: &'static str, t: f64, x: &[f64], v: &[f64]) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteCoefficient {
            coefficient: name,
            t,
            x: x.to_vec(),
        })
    }
}

/// Monte Carlo spot-check of the standing assumptions.
///
/// Draws `samples` random `(t, x, y, xi)` with `x, y` uniform in a box twice
/// the size of the state window and `xi` uniform in U, and records the largest
/// observed Lipschitz/growth ratios. Non-finite evaluations are a hard error.
pub fn validate_assumptions(p: &Problem, samples: usize, seed: u64) -> Result<AssumptionReport> {
    if samples == 0 {
        return Err(Error::DomainError("samples must be >= 1".into()));
    }
    let n = p.state_dim;
    let m = p.noise_dim;
    let jn = p.num_marks();
    let mut rng = aux_stream(seed, 0xA55);
    let win = &p.state_window;
    let ub = &p.control_box;
    let draw_x = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|j| {
                let c = 0.5 * (win.lower[j] + win.upper[j]);
                let h = win.upper[j] - win.lower[j];
                c + h * (rng.random::<f64>() - 0.5) * 2.0
            })
            .collect()
    };
    let mut rep = AssumptionReport {
        samples,
        ..Default::default()
    };
    let mut b1 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut s1 = vec![0.0; n * m];
    let mut s2 = vec![0.0; n * m];
    let mut bj = vec![0.0; n * n];
    let mut sj = vec![0.0; n * n * m];
    let mut cj = vec![0.0; n * n];
    let mut c1 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mismatch = |name: &str, err: f64, rep: &mut AssumptionReport| {
        if let Some(e) = rep.gradient_mismatch.iter_mut().find(|(k, _)| k == name) {
            e.1 = e.1.max(err);
        } else {
            rep.gradient_mismatch.push((name.to_string(), err));
        }
    };
    for _ in 0..samples {
        let t = rng.random::<f64>() * p.horizon;
        let x = draw_x(&mut rng);
        let y = draw_x(&mut rng);
        let xi: Vec<f64> = (0..ub.dim())
            .map(|j| ub.lower[j] + (ub.upper[j] - ub.lower[j]) * rng.random::<f64>())
            .collect();
        let dxy = dist(&x, &y);

        p.drift(t, &x, &xi, &mut b1);
        ensure_finite("drift", t, &x, &b1)?;
        p.drift(t, &y, &xi, &mut b2);
        ensure_finite("drift", t, &y, &b2)?;
        if dxy > 0.0 {
            rep.drift_lipschitz = rep.drift_lipschitz.max(dist(&b1, &b2) / dxy);
        }
        rep.drift_growth = rep.drift_growth.max(norm(&b1) / (1.0 + norm(&x)));
        p.drift(t, &x, &xi, &mut b2);
        if b1 != b2 && !rep.impure.iter().any(|s| s == "drift") {
            rep.impure.push("drift".into());
        }

        p.diffusion(t, &x, &xi, &mut s1);
        ensure_finite("diffusion", t, &x, &s1)?;
        p.diffusion(t, &y, &xi, &mut s2);
        ensure_finite("diffusion", t, &y, &s2)?;
        if dxy > 0.0 {
            rep.diffusion_lipschitz = rep.diffusion_lipschitz.max(dist(&s1, &s2) / dxy);
        }
        rep.diffusion_growth = rep.diffusion_growth.max(norm(&s1) / (1.0 + norm(&x)));

        p.drift_jacobian(t, &x, &xi, &mut bj);
        ensure_finite("drift_jacobian", t, &x, &bj)?;
        rep.drift_jacobian_bound = rep.drift_jacobian_bound.max(norm(&bj));
        p.diffusion_jacobian(t, &x, &xi, &mut sj);
        ensure_finite("diffusion_jacobian", t, &x, &sj)?;
        rep.diffusion_jacobian_bound = rep.diffusion_jacobian_bound.max(norm(&sj));

        let l = p.running_cost(t, &x, &xi);
        ensure_finite("running_cost", t, &x, &[l])?;
        rep.running_cost_growth = rep.running_cost_growth.max(l.abs() / (1.0 + norm(&x).powi(2)));
        let phi = p.terminal_cost(&x);
        ensure_finite("terminal_cost", t, &x, &[phi])?;
        rep.terminal_cost_growth = rep.terminal_cost_growth.max(phi.abs() / (1.0 + norm(&x).powi(2)));

        if let Some(js) = &p.jump {
            let (mut gsum, mut lsum) = (0.0, 0.0);
            for j in 0..jn {
                p.jump_coefficient(t, &x, j, &xi, &mut c1);
                ensure_finite("jump_coefficient", t, &x, &c1)?;
                p.jump_coefficient(t, &y, j, &xi, &mut c2);
                ensure_finite("jump_coefficient", t, &y, &c2)?;
                gsum += js.intensities[j] * norm(&c1).powi(2);
                lsum += js.intensities[j] * dist(&c1, &c2).powi(2);
                p.jump_jacobian(t, &x, j, &xi, &mut cj);
                ensure_finite("jump_jacobian", t, &x, &cj)?;
                rep.jump_jacobian_bound = rep.jump_jacobian_bound.max(norm(&cj));
            }
            rep.jump_growth = rep.jump_growth.max(gsum.sqrt() / (1.0 + norm(&x)));
            if dxy > 0.0 {
                rep.jump_lipschitz = rep.jump_lipschitz.max(lsum.sqrt() / dxy);
            }
        }

        // user gradients against central differences
        if let Some(f) = &p.drift_jacobian {
            f(t, &x, &xi, &mut bj);
            let mut fd = vec![0.0; n * n];
            fd_jacobian_blocks(|z, o| p.drift(t, z, &xi, o), &x, n, &mut fd);
            let err = (0..n)
                .flat_map(|i| (0..n).map(move |l| (i, l)))
                .map(|(i, l)| (bj[i * n + l] - fd[l * n + i]).abs() / fd[l * n + i].abs().max(1.0))
                .fold(0.0, f64::max);
            mismatch("drift_jacobian", err, &mut rep);
        }
        if let Some(f) = &p.diffusion_jacobian {
            f(t, &x, &xi, &mut sj);
            let mut fd = vec![0.0; n * n * m];
            fd_jacobian_blocks(|z, o| p.diffusion(t, z, &xi, o), &x, n * m, &mut fd);
            let err = sj
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
                .fold(0.0, f64::max);
            mismatch("diffusion_jacobian", err, &mut rep);
        }
        if let Some(f) = &p.running_cost_gradient {
            f(t, &x, &xi, &mut g);
            let mut fd = vec![0.0; n];
            fd_jacobian_blocks(|z, o| o[0] = p.running_cost(t, z, &xi), &x, 1, &mut fd);
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max);
            mismatch("running_cost_gradient", err, &mut rep);
        }
        if let Some(f) = &p.terminal_gradient {
            f(&x, &mut g);
            let mut fd = vec![0.0; n];
            fd_jacobian_blocks(|z, o| o[0] = p.terminal_cost(z), &x, 1, &mut fd);
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max);
            mismatch("terminal_gradient", err, &mut rep);
        }
        if let Some(js) = &p.jump {
            if let Some(f) = &js.jacobian {
                for j in 0..jn {
                    f(t, &x, &js.marks[j], &xi, &mut cj);
                    let mut fd = vec![0.0; n * n];
                    fd_jacobian_blocks(|z, o| p.jump_coefficient(t, z, j, &xi, o), &x, n, &mut fd);
                    let err = (0..n)
                        .flat_map(|i| (0..n).map(move |l| (i, l)))
                        .map(|(i, l)| (cj[i * n + l] - fd[l * n + i]).abs() / fd[l * n + i].abs().max(1.0))
                        .fold(0.0, f64::max);
                    mismatch("jump_jacobian", err, &mut rep);
                }
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_box() -> BoxBounds {
        BoxBounds::new(vec![-1.0], vec![1.0]).unwrap()
    }

    fn grid01() -> ControlGrid {
        ControlGrid::new(vec![vec![0.0], vec![1.0]], BoxBounds::new(vec![0.0], vec![1.0]).unwrap()).unwrap()
    }

    #[test]
    fn dirac_weight_reproduces_pointwise_drift() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.3] }, scalar_box())
            .drift(Arc::new(|_, x, xi, o| o[0] = x[0] * x[0] + 3.0 * xi[0]))
            .build()
            .unwrap();
        let g = ControlGrid::uniform(&scalar_box(), 3).unwrap();
        let b = p.averaged_drift(0.0, &[0.3], &g, &[0.0, 1.0, 0.0]).unwrap();
        let mut direct = [0.0];
        p.drift(0.0, &[0.3], g.point(1), &mut direct);
        assert_eq!(b[0], direct[0]);
    }

    #[test]
    fn symmetric_weights_cancel_linear_drift() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0] }, scalar_box())
            .drift(Arc::new(|_, _, xi, o| o[0] = xi[0]))
            .build()
            .unwrap();
        let g = ControlGrid::new(vec![vec![-1.0], vec![1.0]], scalar_box()).unwrap();
        assert_eq!(p.averaged_drift(0.0, &[0.0], &g, &[0.5, 0.5]).unwrap(), vec![0.0]);
    }

    #[test]
    fn averaged_drift_is_linear_in_weights() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0] }, BoxBounds::new(vec![0.0], vec![1.0]).unwrap())
            .drift(Arc::new(|_, x, xi, o| o[0] = x[0] + xi[0]))
            .build()
            .unwrap();
        let b = p.averaged_drift(0.0, &[2.0], &grid01(), &[0.3, 0.7]).unwrap();
        assert!((b[0] - 2.7).abs() < 1e-15);
    }

    #[test]
    fn non_finite_coefficient_is_reported() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0] }, scalar_box())
            .drift(Arc::new(|_, _, _, o| o[0] = f64::NAN))
            .build()
            .unwrap();
        let g = ControlGrid::uniform(&scalar_box(), 2).unwrap();
        assert!(matches!(
            p.averaged_drift(0.0, &[0.0], &g, &[1.0, 0.0]),
            Err(Error::NonFiniteCoefficient { coefficient: "drift", .. })
        ));
    }

    #[test]
    fn fallback_gradients_match_analytic() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0; 2] }, scalar_box())
            .drift(Arc::new(|_, x, xi, o| {
                o[0] = x[0] * x[1] + xi[0];
                o[1] = x[0].sin();
            }))
            .running_cost(Arc::new(|_, x, _| x[0] * x[0] + 3.0 * x[1]))
            .terminal_cost(Arc::new(|x| x[1].powi(3)))
            .state_window(BoxBounds::new(vec![-1.0; 2], vec![1.0; 2]).unwrap())
            .build()
            .unwrap();
        let x = [0.4, -0.7];
        let mut j = [0.0; 4];
        p.drift_jacobian(0.0, &x, &[0.0], &mut j);
        let expect = [x[1], x[0], x[0].cos(), 0.0];
        for (a, b) in j.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let mut g = [0.0; 2];
        p.running_cost_gradient(0.0, &x, &[0.0], &mut g);
        assert!((g[0] - 0.8).abs() < 1e-9 && (g[1] - 3.0).abs() < 1e-9);
        p.terminal_gradient(&x, &mut g);
        assert!(g[0].abs() < 1e-9 && (g[1] - 3.0 * 0.49).abs() < 1e-9);
    }

    #[test]
    fn jump_spec_rejects_zero_mark() {
        let c: JumpField = Arc::new(|_, _, v, _, o| o.copy_from_slice(v));
        assert!(JumpSpec::new(vec![vec![0.0]], vec![1.0], c.clone()).is_err());
        assert!(JumpSpec::new(vec![vec![0.5]], vec![-1.0], c.clone()).is_err());
        assert!(JumpSpec::new(vec![vec![0.5]], vec![1.0], c).is_ok());
    }

    #[test]
    fn builder_rejects_bad_horizon() {
        let r = Problem::builder(1, 0.0, InitialState::Deterministic { value: vec![0.0] }, scalar_box()).build();
        assert!(matches!(r, Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn constant_diffusion_has_zero_lipschitz_estimate() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0] }, scalar_box())
            .diffusion(Arc::new(|_, _, _, o| o[0] = 0.7))
            .build()
            .unwrap();
        let rep = validate_assumptions(&p, 200, 3).unwrap();
        assert_eq!(rep.diffusion_lipschitz, 0.0);
        assert_eq!(rep.diffusion_jacobian_bound, 0.0);
        assert!(rep.impure.is_empty());
    }

    #[test]
    fn nan_drift_fails_validation() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0] }, scalar_box())
            .drift(Arc::new(|_, x, _, o| o[0] = if x[0] > 0.5 { f64::NAN } else { 0.0 }))
            .build()
            .unwrap();
        assert!(matches!(
            validate_assumptions(&p, 500, 1),
            Err(Error::NonFiniteCoefficient { coefficient: "drift", .. })
        ));
    }

    #[test]
    fn wrong_user_gradient_is_flagged() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0] }, scalar_box())
            .drift(Arc::new(|_, x, _, o| o[0] = 2.0 * x[0]))
            .drift_jacobian(Arc::new(|_, _, _, o| o[0] = 2.5))
            .build()
            .unwrap();
        let rep = validate_assumptions(&p, 10, 1).unwrap();
        assert!(!rep.gradients_consistent());
    }
}
