//! Relaxed controls on a finite control grid.
//!
//! A relaxed control assigns to every time step (and, with feedback, every
//! state or observation cell) a probability vector over the atoms of a
//! [`ControlGrid`]. Regular controls embed as one-hot weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_sim::PathEnsemble;

/// Absolute tolerance for the simplex invariant.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Snap tolerance used by [`dirac_embed`].
pub const SNAP_TOL: f64 = 1e-9;

/// Axis-aligned bounding box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::ShapeMismatch(format!(
                "box bounds of lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::DomainError("box requires finite lower <= upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }
}

/// Finite set of control atoms inside the control box U.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    points: Vec<Vec<f64>>,
    bounds: BoxBounds,
}

impl ControlGrid {
    pub fn new(points: Vec<Vec<f64>>, bounds: BoxBounds) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DomainError("control grid needs at least one point".into()));
        }
        let d = bounds.dim();
        for (i, p) in points.iter().enumerate() {
            if p.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "grid point {i} has dimension {} (expected {d})",
                    p.len()
                )));
            }
            if !bounds.contains(p, SIMPLEX_TOL) {
                return Err(Error::DomainError(format!("grid point {i} = {p:?} lies outside U")));
            }
        }
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(Error::DomainError(format!("grid points {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { points, bounds })
    }

    /// Tensor lattice with `per_dim` evenly spaced values per axis (endpoints
    /// included; a single value sits at the midpoint).
    pub fn uniform(bounds: &BoxBounds, per_dim: usize) -> Result<Self> {
        if per_dim == 0 {
            return Err(Error::DomainError("per_dim must be >= 1".into()));
        }
        let d = bounds.dim();
        let axis = |j: usize| -> Vec<f64> {
            let (l, u) = (bounds.lower[j], bounds.upper[j]);
            if per_dim == 1 {
                vec![0.5 * (l + u)]
            } else {
                (0..per_dim)
                    .map(|i| l + (u - l) * i as f64 / (per_dim - 1) as f64)
                    .collect()
            }
        };
        let axes: Vec<Vec<f64>> = (0..d).map(axis).collect();
        let total = per_dim.pow(d as u32);
        let mut points = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = vec![0.0; d];
            for j in (0..d).rev() {
                p[j] = axes[j][rem % per_dim];
                rem /= per_dim;
            }
            points.push(p);
        }
        Self::new(points, bounds.clone())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    /// Index of the nearest atom and its Euclidean distance (lowest index on ties).
    pub fn nearest(&self, value: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.points.iter().enumerate() {
            let d2: f64 = p.iter().zip(value).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        (best.0, best.1.sqrt())
    }
}

/// Uniform hyper-rectangular binning. Values outside the box fall into the
/// nearest edge cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPartition {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells_per_dim: usize,
}

impl CellPartition {
    pub const DEFAULT_CELLS: usize = 8;

    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells_per_dim: usize) -> Result<Self> {
        BoxBounds::new(lower.clone(), upper.clone())?;
        if cells_per_dim == 0 {
            return Err(Error::DomainError("cells_per_dim must be >= 1".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l >= u) {
            return Err(Error::DomainError("partition box must have positive width".into()));
        }
        Ok(Self {
            lower,
            upper,
            cells_per_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells_per_dim.pow(self.dim() as u32)
    }

    fn axis_index(&self, j: usize, v: f64) -> usize {
        let c = self.cells_per_dim;
        let rel = (v - self.lower[j]) / (self.upper[j] - self.lower[j]);
        if !(rel > 0.0) {
            return 0;
        }
        ((rel * c as f64).floor() as usize).min(c - 1)
    }

    pub fn cell_of(&self, v: &[f64]) -> usize {
        let mut idx = 0;
        for j in 0..self.dim() {
            idx = idx * self.cells_per_dim + self.axis_index(j, v[j]);
        }
        idx
    }

    pub fn multi_index(&self, cell: usize) -> Vec<usize> {
        let c = self.cells_per_dim;
        let mut rem = cell;
        let mut out = vec![0; self.dim()];
        for j in (0..self.dim()).rev() {
            out[j] = rem % c;
            rem /= c;
        }
        out
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        let c = self.cells_per_dim as f64;
        self.multi_index(cell)
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let w = (self.upper[j] - self.lower[j]) / c;
                self.lower[j] + (i as f64 + 0.5) * w
            })
            .collect()
    }

    /// Manhattan distance between cells on the index lattice.
    pub fn cell_distance(&self, a: usize, b: usize) -> usize {
        self.multi_index(a)
            .iter()
            .zip(self.multi_index(b))
            .map(|(x, y)| x.abs_diff(y))
            .sum()
    }
}

/// Information pattern of a control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackMode {
    OpenLoop,
    StateFeedback { partition: CellPartition },
    ObservationFeedback { partition: CellPartition },
}

impl FeedbackMode {
    pub fn num_cells(&self) -> usize {
        match self {
            FeedbackMode::OpenLoop => 1,
            FeedbackMode::StateFeedback { partition }
            | FeedbackMode::ObservationFeedback { partition } => partition.num_cells(),
        }
    }

    pub fn partition(&self) -> Option<&CellPartition> {
        match self {
            FeedbackMode::OpenLoop => None,
            FeedbackMode::StateFeedback { partition }
            | FeedbackMode::ObservationFeedback { partition } => Some(partition),
        }
    }

    pub fn is_open_loop(&self) -> bool {
        matches!(self, FeedbackMode::OpenLoop)
    }
}

/// Probability-measure-valued control on a fixed grid.
///
/// Weights are stored row-major as `[step][cell][atom]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ControlDoc", try_from = "ControlDoc")]
pub struct RelaxedControl {
    grid: ControlGrid,
    horizon: f64,
    time_steps: usize,
    mode: FeedbackMode,
    weights: Vec<f64>,
}

impl RelaxedControl {
    /// Uniform weights over all atoms everywhere.
    pub fn uniform(grid: ControlGrid, horizon: f64, time_steps: usize, mode: FeedbackMode) -> Result<Self> {
        let k = grid.len();
        let rows = time_steps * mode.num_cells();
        Self::from_weights(grid, horizon, time_steps, mode, vec![1.0 / k as f64; rows * k])
    }

    /// Same one-hot atom everywhere.
    pub fn constant(grid: ControlGrid, horizon: f64, time_steps: usize, mode: FeedbackMode, atom: usize) -> Result<Self> {
        let k = grid.len();
        if atom >= k {
            return Err(Error::DomainError(format!("atom {atom} out of range (K={k})")));
        }
        let rows = time_steps * mode.num_cells();
        let mut w = vec![0.0; rows * k];
        for r in 0..rows {
            w[r * k + atom] = 1.0;
        }
        Self::from_weights(grid, horizon, time_steps, mode, w)
    }

    /// Builds a control and checks the simplex invariant on every row.
    pub fn from_weights(
        grid: ControlGrid,
        horizon: f64,
        time_steps: usize,
        mode: FeedbackMode,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let u = Self::from_weights_unchecked(grid, horizon, time_steps, mode, weights)?;
        let report = validate(&u);
        if let Some(v) = report.violations.first() {
            return Err(Error::DomainError(format!("invalid relaxed control: {v:?}")));
        }
        Ok(u)
    }

    /// Builds a control checking shapes only; use [`validate`] to audit it.
    pub fn from_weights_unchecked(
        grid: ControlGrid,
        horizon: f64,
        time_steps: usize,
        mode: FeedbackMode,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::DomainError(format!("horizon must be positive, got {horizon}")));
        }
        if time_steps == 0 {
            return Err(Error::DomainError("time_steps must be >= 1".into()));
        }
        let expected = time_steps * mode.num_cells() * grid.len();
        if weights.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} weights, got {}",
                weights.len()
            )));
        }
        Ok(Self {
            grid,
            horizon,
            time_steps,
            mode,
            weights,
        })
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.time_steps as f64
    }

    pub fn mode(&self) -> &FeedbackMode {
        &self.mode
    }

    pub fn num_cells(&self) -> usize {
        self.mode.num_cells()
    }

    pub fn num_atoms(&self) -> usize {
        self.grid.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_at(&self, step: usize, cell: usize) -> &[f64] {
        let k = self.grid.len();
        let row = step * self.num_cells() + cell;
        &self.weights[row * k..(row + 1) * k]
    }

    /// True when `other` lives on the same grid, time grid and cells.
    pub fn same_shape(&self, other: &RelaxedControl) -> bool {
        self.grid == other.grid
            && self.time_steps == other.time_steps
            && self.mode == other.mode
            && self.horizon == other.horizon
    }

    pub(crate) fn check_same_shape(&self, other: &RelaxedControl) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(
                "controls differ in grid, time steps, horizon or feedback mode".into(),
            ))
        }
    }

    /// Repeats every step `factor` times (same horizon, `factor`x finer steps).
    pub fn refine(&self, factor: usize) -> Result<RelaxedControl> {
        if factor == 0 {
            return Err(Error::DomainError("refinement factor must be >= 1".into()));
        }
        let row_len = self.num_cells() * self.grid.len();
        let mut w = Vec::with_capacity(self.weights.len() * factor);
        for k in 0..self.time_steps {
            let row = &self.weights[k * row_len..(k + 1) * row_len];
            for _ in 0..factor {
                w.extend_from_slice(row);
            }
        }
        Self::from_weights_unchecked(
            self.grid.clone(),
            self.horizon,
            self.time_steps * factor,
            self.mode.clone(),
            w,
        )
    }

    /// Signed weight difference `self - base` (the direction of a perturbation).
    pub fn difference(&self, base: &RelaxedControl) -> Result<Vec<f64>> {
        self.check_same_shape(base)?;
        Ok(self
            .weights
            .iter()
            .zip(&base.weights)
            .map(|(a, b)| a - b)
            .collect())
    }

    /// `base + eps (toward - base)` for signed `eps`, provided the result stays
    /// a probability vector everywhere. Used for two-sided finite differences.
    pub fn affine_step(base: &RelaxedControl, toward: &RelaxedControl, eps: f64) -> Result<RelaxedControl> {
        base.check_same_shape(toward)?;
        let w: Vec<f64> = base
            .weights
            .iter()
            .zip(&toward.weights)
            .map(|(a, b)| a + eps * (b - a))
            .collect();
        Self::from_weights(
            base.grid.clone(),
            base.horizon,
            base.time_steps,
            base.mode.clone(),
            w,
        )
    }

    /// Mean control value `sum_i w_i xi_i` at `(step, cell)`.
    pub fn mean_value(&self, step: usize, cell: usize) -> Vec<f64> {
        let w = self.weights_at(step, cell);
        let mut out = vec![0.0; self.grid.dim()];
        for (i, wi) in w.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.grid.point(i)) {
                *o += wi * p;
            }
        }
        out
    }
}

/// Convex combination `(1 - eps) a + eps b`.
pub fn mix(a: &RelaxedControl, b: &RelaxedControl, eps: f64) -> Result<RelaxedControl> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::DomainError(format!("mixing weight {eps} outside [0, 1]")));
    }
    a.check_same_shape(b)?;
    if eps == 0.0 {
        return Ok(a.clone());
    }
    if eps == 1.0 {
        return Ok(b.clone());
    }
    let w = a
        .weights
        .iter()
        .zip(&b.weights)
        .map(|(x, y)| (1.0 - eps) * x + eps * y)
        .collect();
    RelaxedControl::from_weights_unchecked(a.grid.clone(), a.horizon, a.time_steps, a.mode.clone(), w)
}

/// Duality pairing `E sum_k dt sum_i phi(t_k, xi_i) w_{k,i}` (left-endpoint rule).
///
/// Feedback controls are resolved on the cells recorded in `paths`, which must
/// have been simulated under a control with the same feedback mode.
pub fn pair<F>(phi: F, u: &RelaxedControl, paths: Option<&PathEnsemble>) -> Result<f64>
where
    F: Fn(f64, &[f64]) -> f64 + Sync,
{
    let dt = u.dt();
    let k = u.num_atoms();
    let n = u.time_steps;
    // phi on the (time, atom) lattice
    let table: Vec<f64> = (0..n)
        .flat_map(|s| {
            let t = s as f64 * dt;
            (0..k).map(move |i| (t, i))
        })
        .map(|(t, i)| phi(t, u.grid.point(i)))
        .collect();
    if let Some(bad) = table.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCoefficient {
            coefficient: "test function",
            t: (bad / k) as f64 * dt,
            x: u.grid.point(bad % k).to_vec(),
        });
    }
    let row_value = |step: usize, cell: usize| -> f64 {
        let w = u.weights_at(step, cell);
        let mut s = 0.0;
        for i in 0..k {
            s += table[step * k + i] * w[i];
        }
        s
    };
    if u.mode.is_open_loop() {
        let per_step: Vec<f64> = (0..n).map(|s| dt * row_value(s, 0)).collect();
        return Ok(crate::exec::pairwise_sum(&per_step));
    }
    let paths = paths.ok_or(Error::MissingPaths)?;
    if paths.control().mode() != u.mode() || paths.steps() != n {
        return Err(Error::ShapeMismatch(
            "path ensemble cells do not match the control's feedback mode".into(),
        ));
    }
    let per_path = crate::exec::map_range(paths.num_paths(), |p| {
        let mut s = 0.0;
        for step in 0..n {
            s += dt * row_value(step, paths.cell(p, step));
        }
        s
    });
    Ok(crate::exec::mean(&per_path))
}

/// A single simplex violation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// Weight at `index` is below zero by more than the tolerance.
    Negative { index: usize, value: f64 },
    /// Row sums to `sum`; `magnitude = |sum - 1|`.
    Normalization { sum: f64, magnitude: f64 },
    /// NaN or infinite weight at `index`.
    NonFinite { index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub cell: usize,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every `(step, cell)` row that is not a probability vector.
pub fn validate(u: &RelaxedControl) -> ValidationReport {
    let mut violations = Vec::new();
    for step in 0..u.time_steps {
        for cell in 0..u.num_cells() {
            let w = u.weights_at(step, cell);
            let mut finite = true;
            for (index, &value) in w.iter().enumerate() {
                if !value.is_finite() {
                    finite = false;
                    violations.push(Violation {
                        step,
                        cell,
                        kind: ViolationKind::NonFinite { index },
                    });
                } else if value < -SIMPLEX_TOL {
                    violations.push(Violation {
                        step,
                        cell,
                        kind: ViolationKind::Negative { index, value },
                    });
                }
            }
            if finite {
                let sum: f64 = w.iter().sum();
                let magnitude = (sum - 1.0).abs();
                if magnitude > SIMPLEX_TOL {
                    violations.push(Violation {
                        step,
                        cell,
                        kind: ViolationKind::Normalization { sum, magnitude },
                    });
                }
            }
        }
    }
    ValidationReport { violations }
}

/// Ordinary U-valued control, one value per `(step, cell)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularControl {
    bounds: BoxBounds,
    horizon: f64,
    time_steps: usize,
    mode: FeedbackMode,
    /// `[step][cell][component]`
    values: Vec<f64>,
}

impl RegularControl {
    pub fn new(
        bounds: BoxBounds,
        horizon: f64,
        time_steps: usize,
        mode: FeedbackMode,
        values: Vec<f64>,
    ) -> Result<Self> {
        if !(horizon > 0.0) || time_steps == 0 {
            return Err(Error::DomainError("regular control needs horizon > 0 and steps >= 1".into()));
        }
        let d = bounds.dim();
        let expected = time_steps * mode.num_cells() * d;
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        for (row, v) in values.chunks(d).enumerate() {
            if !bounds.contains(v, SIMPLEX_TOL) {
                return Err(Error::DomainError(format!(
                    "value {v:?} at row {row} lies outside U"
                )));
            }
        }
        Ok(Self {
            bounds,
            horizon,
            time_steps,
            mode,
            values,
        })
    }

    /// Builds a control from `f(step, cell)`.
    pub fn from_fn<F>(bounds: BoxBounds, horizon: f64, time_steps: usize, mode: FeedbackMode, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Vec<f64>,
    {
        let cells = mode.num_cells();
        let mut values = Vec::with_capacity(time_steps * cells * bounds.dim());
        for k in 0..time_steps {
            for c in 0..cells {
                values.extend(f(k, c));
            }
        }
        Self::new(bounds, horizon, time_steps, mode, values)
    }

    pub fn value_at(&self, step: usize, cell: usize) -> &[f64] {
        let d = self.bounds.dim();
        let row = step * self.mode.num_cells() + cell;
        &self.values[row * d..(row + 1) * d]
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn mode(&self) -> &FeedbackMode {
        &self.mode
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }
}

/// Dirac embedding of a regular control: one-hot weight on the atom equal to
/// the control value.
pub fn dirac_embed(u: &RegularControl, grid: &ControlGrid) -> Result<RelaxedControl> {
    if grid.dim() != u.bounds.dim() {
        return Err(Error::ShapeMismatch("control and grid dimensions differ".into()));
    }
    let cells = u.mode.num_cells();
    let k = grid.len();
    let mut w = vec![0.0; u.time_steps * cells * k];
    for step in 0..u.time_steps {
        for cell in 0..cells {
            let v = u.value_at(step, cell);
            let (i, dist) = grid.nearest(v);
            if dist > SNAP_TOL {
                return Err(Error::ValueOffGrid {
                    step,
                    value: v.to_vec(),
                    tol: SNAP_TOL,
                });
            }
            w[(step * cells + cell) * k + i] = 1.0;
        }
    }
    RelaxedControl::from_weights_unchecked(grid.clone(), u.horizon, u.time_steps, u.mode.clone(), w)
}

/// JSON form of a relaxed control: `{grid, mode, horizon, time_steps, weights}`
/// with `weights` as one row of `K` entries per `(step, cell)`, row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ControlDoc {
    grid: ControlGrid,
    mode: FeedbackMode,
    horizon: f64,
    time_steps: usize,
    weights: Vec<Vec<f64>>,
}

impl From<RelaxedControl> for ControlDoc {
    fn from(u: RelaxedControl) -> Self {
        let k = u.grid.len();
        let weights = u.weights.chunks(k).map(|r| r.to_vec()).collect();
        ControlDoc {
            grid: u.grid,
            mode: u.mode,
            horizon: u.horizon,
            time_steps: u.time_steps,
            weights,
        }
    }
}

impl TryFrom<ControlDoc> for RelaxedControl {
    type Error = Error;

    fn try_from(doc: ControlDoc) -> Result<Self> {
        let grid = ControlGrid::new(doc.grid.points, doc.grid.bounds)?;
        let k = grid.len();
        if doc.weights.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch(format!("every weight row must have {k} entries")));
        }
        let flat = doc.weights.into_iter().flatten().collect();
        RelaxedControl::from_weights_unchecked(grid, doc.horizon, doc.time_steps, doc.mode, flat)
    }
}
