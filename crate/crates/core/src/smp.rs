//! Hamiltonian, pointwise minimization over measures, the minimum-principle
//! gap, conditional-gradient optimization and chattering.

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_bsde, AdjointEnsemble};
use crate::control_space::{mix, ControlGrid, FeedbackMode, RegularControl, RelaxedControl};
use crate::error::{Error, Result};
use crate::exec::{map_range, mean_and_stderr, pairwise_sum};
use crate::forward_sim::{collect_paths, path_costs, sample_noise, simulate, NoiseEnsemble, PathEnsemble};
use crate::problem::Problem;
use crate::regression::BasisSpec;

/// Information available to the minimizing measure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoMode {
    /// Pathwise Hamiltonian values are kept per path.
    #[default]
    Full,
    /// Values are replaced by their averages over observation cells.
    Partial,
}

/// Relaxed Hamiltonian `b.psi + tr(Q^T sigma) + sum_j lambda_j C_j.phi_j + l`
/// averaged over the weights `w` on `grid`. `phi` is `J x n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(p: &Problem, t: f64, x: &[f64], psi: &[f64], q: &[f64], phi: &[f64], grid: &ControlGrid, w: &[f64]) -> Result<f64> {
    let n = p.state_dim();
    let mut scratch = Vec::new();
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * p.noise_dim()];
    p.averaged_drift_into(t, x, grid, w, &mut b, &mut scratch)?;
    p.averaged_diffusion_into(t, x, grid, w, &mut s, &mut scratch)?;
    let mut h: f64 = b.iter().zip(psi).map(|(a, c)| a * c).sum();
    h += s.iter().zip(q).map(|(a, c)| a * c).sum::<f64>();
    if let Some(js) = p.jump() {
        let mut c = vec![0.0; n];
        for j in 0..js.num_marks() {
            let l = js.intensity(j);
            if l == 0.0 {
                continue;
            }
            p.averaged_jump_into(t, x, j, grid, w, &mut c, &mut scratch)?;
            h += l * c.iter().zip(&phi[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(h + p.averaged_running_cost(t, x, grid, w)?)
}

/// Hamiltonian at every grid atom along a base ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianField {
    num_paths: usize,
    steps: usize,
    atoms: usize,
    horizon: f64,
    grid: ControlGrid,
    mode: FeedbackMode,
    info: InfoMode,
    cells: Vec<u32>,
    /// `M x N x K`
    values: Vec<f64>,
    /// `N x C x K` cell averages, empty cells filled from the nearest nonempty one.
    cell_means: Vec<f64>,
    /// `N x C` path counts.
    cell_counts: Vec<u32>,
}

impl HamiltonianField {
    /// Builds a field from raw pathwise values `[path][step][atom]` and the
    /// cell visited by each path on each step (`[path][step]`).
    #[allow(clippy::too_many_arguments)]
    pub fn from_values(
        grid: ControlGrid,
        horizon: f64,
        steps: usize,
        mode: FeedbackMode,
        info: InfoMode,
        cells: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<HamiltonianField> {
        let k = grid.len();
        if steps == 0 || cells.len() % steps != 0 || cells.is_empty() {
            return Err(Error::ShapeMismatch("cell array must hold M x N entries".into()));
        }
        let m = cells.len() / steps;
        if values.len() != m * steps * k {
            return Err(Error::ShapeMismatch(format!(
                "expected {} field values, got {}",
                m * steps * k,
                values.len()
            )));
        }
        let nc = mode.num_cells();
        if cells.iter().any(|c| *c as usize >= nc) {
            return Err(Error::ShapeMismatch("cell index out of range".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient {
                coefficient: "hamiltonian",
                t: f64::NAN,
                x: vec![],
            });
        }
        let mut f = HamiltonianField {
            num_paths: m,
            steps,
            atoms: k,
            horizon,
            grid,
            mode,
            info,
            cells,
            values,
            cell_means: vec![],
            cell_counts: vec![],
        };
        f.aggregate();
        if info == InfoMode::Partial {
            for p in 0..m {
                for s in 0..steps {
                    let c = f.cells[p * steps + s] as usize;
                    let o = (p * steps + s) * k;
                    let src = (s * nc + c) * k;
                    let row: Vec<f64> = f.cell_means[src..src + k].to_vec();
                    f.values[o..o + k].copy_from_slice(&row);
                }
            }
        }
        Ok(f)
    }

    fn aggregate(&mut self) {
        let (m, n, k) = (self.num_paths, self.steps, self.atoms);
        let nc = self.mode.num_cells();
        // per step: members of each cell in path order, summed pairwise
        let per_step = map_range(n, |s| {
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); nc];
            for p in 0..m {
                members[self.cells[p * n + s] as usize].push(p);
            }
            let mut means = vec![0.0; nc * k];
            let mut counts = vec![0u32; nc];
            let mut col = Vec::new();
            for c in 0..nc {
                counts[c] = members[c].len() as u32;
                if members[c].is_empty() {
                    continue;
                }
                for i in 0..k {
                    col.clear();
                    col.extend(members[c].iter().map(|&p| self.values[(p * n + s) * k + i]));
                    means[c * k + i] = pairwise_sum(&col) / col.len() as f64;
                }
            }
            // empty cells borrow from the nearest nonempty cell (lowest index on ties)
            if counts.iter().any(|c| *c == 0) {
                let filled = means.clone();
                for c in 0..nc {
                    if counts[c] > 0 {
                        continue;
                    }
                    let mut best: Option<(usize, usize)> = None;
                    for o in 0..nc {
                        if counts[o] == 0 {
                            continue;
                        }
                        let d = self.mode.partition().map_or(0, |pt| pt.cell_distance(c, o));
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, o));
                        }
                    }
                    if let Some((_, o)) = best {
                        means[c * k..(c + 1) * k].copy_from_slice(&filled[o * k..(o + 1) * k]);
                    }
                }
            }
            (means, counts)
        });
        self.cell_means = Vec::with_capacity(n * nc * k);
        self.cell_counts = Vec::with_capacity(n * nc);
        for (mns, cnt) in per_step {
            self.cell_means.extend(mns);
            self.cell_counts.extend(cnt);
        }
    }

    pub fn num_paths(&self) -> usize {
        self.num_paths
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn num_atoms(&self) -> usize {
        self.atoms
    }
    pub fn info(&self) -> InfoMode {
        self.info
    }
    pub fn mode(&self) -> &FeedbackMode {
        &self.mode
    }
    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
    /// `g[path][step][atom]`.
    pub fn values(&self, p: usize, k: usize) -> &[f64] {
        let o = (p * self.steps + k) * self.atoms;
        &self.values[o..o + self.atoms]
    }
    /// Cell average of the field at `(step, cell)`.
    pub fn cell_mean(&self, k: usize, cell: usize) -> &[f64] {
        let o = (k * self.mode.num_cells() + cell) * self.atoms;
        &self.cell_means[o..o + self.atoms]
    }
    pub fn cell_count(&self, k: usize, cell: usize) -> usize {
        self.cell_counts[k * self.mode.num_cells() + cell] as usize
    }
    pub fn cell(&self, p: usize, k: usize) -> usize {
        self.cells[p * self.steps + k] as usize
    }
    /// Mean over paths of the field at step `k`.
    pub fn step_mean(&self, k: usize) -> Vec<f64> {
        (0..self.atoms)
            .map(|i| {
                let col: Vec<f64> = (0..self.num_paths).map(|p| self.values(p, k)[i]).collect();
                pairwise_sum(&col) / self.num_paths as f64
            })
            .collect()
    }
}

/// Evaluates the Hamiltonian at every atom along `base`, using the adjoint
/// of the Euler scheme (`E[psi_{k+1} | x_k]`, `Q_k`, `phi_k`).
///
/// Full information keeps pathwise values; partial information replaces
/// them by averages over the control's observation cells.
pub fn hamiltonian_field(p: &Problem, base: &PathEnsemble, adj: &AdjointEnsemble, info: InfoMode) -> Result<HamiltonianField> {
    if adj.num_paths() != base.num_paths() || adj.steps() != base.steps() {
        return Err(Error::ShapeMismatch("adjoint and base ensembles differ".into()));
    }
    let u = base.control();
    if info == InfoMode::Partial && matches!(u.mode(), FeedbackMode::StateFeedback { .. }) {
        return Err(Error::DomainError(
            "partial information needs an open-loop or observation-feedback control".into(),
        ));
    }
    let n = p.state_dim();
    let m = p.noise_dim();
    let jn = p.num_marks();
    let grid = u.grid();
    let k_atoms = grid.len();
    let steps = base.steps();
    let dt = base.dt();
    let lambdas = base.noise().intensities().to_vec();
    let rows = map_range(base.num_paths(), |path| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(steps * k_atoms);
        let mut b = vec![0.0; n];
        let mut s = vec![0.0; n * m];
        let mut c = vec![0.0; n];
        for k in 0..steps {
            let t = k as f64 * dt;
            let x = base.state(path, k);
            let psi = adj.psi_next(path, k);
            let q = adj.q(path, k);
            for i in 0..k_atoms {
                let xi = grid.point(i);
                p.drift(t, x, xi, &mut b);
                p.diffusion(t, x, xi, &mut s);
                let mut h: f64 = b.iter().zip(psi).map(|(a, c)| a * c).sum();
                h += s.iter().zip(q).map(|(a, c)| a * c).sum::<f64>();
                for j in 0..jn {
                    if lambdas[j] == 0.0 {
                        continue;
                    }
                    p.jump_coefficient(t, x, j, xi, &mut c);
                    h += lambdas[j] * c.iter().zip(adj.phi(path, k, j)).map(|(a, b)| a * b).sum::<f64>();
                }
                h += p.running_cost(t, x, xi);
                if !h.is_finite() {
                    return Err(Error::NonFiniteCoefficient {
                        coefficient: "hamiltonian",
                        t,
                        x: x.to_vec(),
                    });
                }
                out.push(h);
            }
        }
        Ok(out)
    });
    let values = collect_paths(rows)?.concat();
    let cells: Vec<u32> = (0..base.num_paths())
        .flat_map(|path| (0..steps).map(move |k| (path, k)))
        .map(|(path, k)| base.cell(path, k) as u32)
        .collect();
    HamiltonianField::from_values(grid.clone(), u.horizon(), steps, u.mode().clone(), info, cells, values)
}

fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v < row[best] {
            best = i;
        }
    }
    best
}

/// One-hot control at the minimizing atom of the cell-averaged field, lowest
/// index on ties.
pub fn pointwise_argmin(field: &HamiltonianField) -> Result<RelaxedControl> {
    let nc = field.mode.num_cells();
    let k = field.atoms;
    let mut w = vec![0.0; field.steps * nc * k];
    for s in 0..field.steps {
        for c in 0..nc {
            let i = argmin(field.cell_mean(s, c));
            w[(s * nc + c) * k + i] = 1.0;
        }
    }
    RelaxedControl::from_weights_unchecked(field.grid.clone(), field.horizon, field.steps, field.mode.clone(), w)
}

/// Minimum-principle gap of a control against a field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmpGap {
    /// `sum_k dt E[ sum_i w_i g_i - min_i g_i ]` over cell-averaged `g`.
    pub gap: f64,
    /// Monte Carlo standard error of the pathwise gap integrand.
    pub std_error: f64,
    pub per_step: Vec<f64>,
}

/// Gap `sum_k dt mean_paths [<g_k, w(u0)> - min_i g_k(xi_i)]` with `g` the
/// cell-averaged field. Nonnegative by construction and exactly zero at
/// [`pointwise_argmin`].
pub fn smp_gap(field: &HamiltonianField, u0: &RelaxedControl) -> Result<SmpGap> {
    if u0.grid() != &field.grid || u0.time_steps() != field.steps || u0.mode() != &field.mode {
        return Err(Error::ShapeMismatch("control does not live on the field's cells".into()));
    }
    let (n, k) = (field.steps, field.atoms);
    let dt = field.dt();
    let nc = field.mode.num_cells();
    let mut per_step = Vec::with_capacity(n);
    // cellwise gap and the argmin used for the pathwise integrand
    let mut cell_gap = vec![0.0; n * nc];
    let mut cell_arg = vec![0usize; n * nc];
    for s in 0..n {
        let mut acc = 0.0;
        for c in 0..nc {
            let g = field.cell_mean(s, c);
            let i = argmin(g);
            let w = u0.weights_at(s, c);
            let mut v = 0.0;
            for a in 0..k {
                if w[a] != 0.0 {
                    v += w[a] * (g[a] - g[i]);
                }
            }
            cell_gap[s * nc + c] = v;
            cell_arg[s * nc + c] = i;
            acc += field.cell_count(s, c) as f64 * v;
        }
        per_step.push(dt * acc / field.num_paths as f64);
    }
    let pathwise = map_range(field.num_paths, |p| {
        let terms: Vec<f64> = (0..n)
            .map(|s| {
                let c = field.cell(p, s);
                let g = field.values(p, s);
                let i = cell_arg[s * nc + c];
                let w = u0.weights_at(s, c);
                dt * (0..k).map(|a| w[a] * (g[a] - g[i])).sum::<f64>()
            })
            .collect();
        pairwise_sum(&terms)
    });
    let (_, std_error) = mean_and_stderr(&pathwise);
    let gap = pairwise_sum(&per_step);
    Ok(SmpGap {
        gap: gap.max(0.0),
        std_error,
        per_step,
    })
}

/// Parameters of [`optimize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeParams {
    pub num_paths: usize,
    pub max_iters: usize,
    /// Absolute gap tolerance.
    pub tol: f64,
    /// Gap tolerance relative to `|J|`; the effective tolerance is the larger one.
    pub rel_tol: f64,
    pub seed: u64,
    pub info: InfoMode,
    pub basis: BasisSpec,
    /// Line search tries `eps = 2^-i` for `i in 0..=max_halvings`.
    pub max_halvings: u32,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        Self {
            num_paths: 20_000,
            max_iters: 50,
            tol: 1e-6,
            rel_tol: 1e-3,
            seed: 0,
            info: InfoMode::Full,
            basis: BasisSpec::default(),
            max_halvings: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    Stalled,
}

/// One optimizer iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub iteration: usize,
    pub cost: f64,
    pub std_error: f64,
    pub gap: f64,
    pub gap_std_error: f64,
    /// Step size accepted when leaving this iterate (absent for the last one).
    pub step: Option<f64>,
    pub control: RelaxedControl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub iterates: Vec<Iterate>,
    pub status: Status,
    pub final_control: RelaxedControl,
}

impl OptimizationResult {
    pub fn final_cost(&self) -> f64 {
        self.iterates.last().map_or(f64::NAN, |i| i.cost)
    }
    pub fn final_gap(&self) -> f64 {
        self.iterates.last().map_or(f64::NAN, |i| i.gap)
    }
}

/// Certifies `u` on `noise`: simulation, adjoint, field and gap.
pub fn certify(p: &Problem, u: &RelaxedControl, noise: &NoiseEnsemble, info: InfoMode, basis: BasisSpec) -> Result<(f64, f64, SmpGap, HamiltonianField)> {
    let paths = simulate(p, u, noise)?;
    let (cost, se) = mean_and_stderr(&path_costs(p, &paths)?);
    let adj = solve_bsde(p, &paths, u, basis)?;
    let field = hamiltonian_field(p, &paths, &adj, info)?;
    let gap = smp_gap(&field, u)?;
    Ok((cost, se, gap, field))
}

/// Frank–Wolfe over relaxed controls on a fixed common-noise ensemble.
///
/// Each iteration solves the adjoint, moves towards the pointwise Hamiltonian
/// minimizer and accepts the largest `eps = 2^-i` whose sample cost is
/// strictly below the current one.
pub fn optimize(p: &Problem, u_init: &RelaxedControl, params: &OptimizeParams) -> Result<OptimizationResult> {
    if params.num_paths == 0 {
        return Err(Error::DomainError("num_paths must be >= 1".into()));
    }
    let report = crate::control_space::validate(u_init);
    if !report.is_valid() {
        return Err(Error::DomainError(format!("initial control is invalid: {:?}", report.violations[0])));
    }
    let noise = sample_noise(p, params.num_paths, u_init.time_steps(), params.seed)?;
    let mut u = u_init.clone();
    let mut iterates = Vec::new();
    let mut status = Status::MaxIters;
    let mut iteration = 0;
    loop {
        let (cost, se, gap, field) = certify(p, &u, &noise, params.info, params.basis)?;
        iterates.push(Iterate {
            iteration,
            cost,
            std_error: se,
            gap: gap.gap,
            gap_std_error: gap.std_error,
            step: None,
            control: u.clone(),
        });
        if gap.gap <= params.tol.max(params.rel_tol * cost.abs()) {
            status = Status::Converged;
            break;
        }
        if iteration >= params.max_iters {
            break;
        }
        let candidate = pointwise_argmin(&field)?;
        drop(field);
        let mut accepted = None;
        for i in 0..=params.max_halvings {
            let eps = 0.5f64.powi(i as i32);
            let trial = mix(&u, &candidate, eps)?;
            let trial_paths = simulate(p, &trial, &noise)?;
            let (c, _) = mean_and_stderr(&path_costs(p, &trial_paths)?);
            if c < cost {
                accepted = Some((eps, trial));
                break;
            }
        }
        match accepted {
            Some((eps, trial)) => {
                iterates.last_mut().expect("pushed above").step = Some(eps);
                u = trial;
                iteration += 1;
            }
            None => {
                status = Status::Stalled;
                break;
            }
        }
    }
    Ok(OptimizationResult {
        iterates,
        status,
        final_control: u,
    })
}

fn apportion(w: &[f64], r: usize) -> Vec<usize> {
    let rf = r as f64;
    let mut counts: Vec<usize> = w.iter().map(|v| (v.max(0.0) * rf).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rest: Vec<(usize, f64)> = w
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.max(0.0) * rf - counts[i] as f64))
        .collect();
    rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (i, _) in rest.iter().take(r.saturating_sub(assigned)) {
        counts[*i] += 1;
    }
    counts
}

/// Orders the atoms over `r` sub-slots so each atom's running share tracks
/// its target count (largest deficit first, lowest index on ties).
fn sequence(counts: &[usize], r: usize) -> Vec<usize> {
    let mut used = vec![0usize; counts.len()];
    let mut out = Vec::with_capacity(r);
    for s in 0..r {
        let mut best: Option<(usize, f64)> = None;
        for (i, &c) in counts.iter().enumerate() {
            if used[i] >= c {
                continue;
            }
            let deficit = (s + 1) as f64 * c as f64 / r as f64 - used[i] as f64;
            if best.is_none_or(|(_, d)| deficit > d) {
                best = Some((i, deficit));
            }
        }
        let i = best.map(|b| b.0).expect("counts sum to r");
        used[i] += 1;
        out.push(i);
    }
    out
}

/// Chattering realization: each step is split into `r` sub-slots filled
/// with grid atoms in proportion to the relaxed weights (largest-remainder
/// counts, interleaved). The result has `N * r` steps.
pub fn realize_regular(u: &RelaxedControl, r: usize) -> Result<RegularControl> {
    if r == 0 {
        return Err(Error::DomainError("refinement must be >= 1".into()));
    }
    let nc = u.num_cells();
    let d = u.grid().dim();
    let fine = u.time_steps() * r;
    let mut values = vec![0.0; fine * nc * d];
    for k in 0..u.time_steps() {
        for c in 0..nc {
            let order = sequence(&apportion(u.weights_at(k, c), r), r);
            for (s, &i) in order.iter().enumerate() {
                let row = (k * r + s) * nc + c;
                values[row * d..(row + 1) * d].copy_from_slice(u.grid().point(i));
            }
        }
    }
    RegularControl::new(u.grid().bounds().clone(), u.horizon(), fine, u.mode().clone(), values)
}
