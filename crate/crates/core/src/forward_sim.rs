//! Euler–Maruyama simulation of the controlled (jump-)diffusion and Monte
//! Carlo evaluation of the cost.
//!
//! All randomness is drawn up front into a [`NoiseEnsemble`] so that several
//! controls can be simulated on common random numbers.

use std::io::Write;
use std::sync::Arc;

use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::control_space::{FeedbackMode, RelaxedControl};
use crate::error::{Error, Result};
use crate::exec::{map_range, mean_and_stderr};
use crate::io::{self, SectionTag};
use crate::problem::{InitialState, Problem};
use crate::rng::path_stream;

/// States with norm above this are treated as a blow-up.
pub const BLOW_UP: f64 = 1e9;

#[derive(Debug)]
struct NoiseData {
    num_paths: usize,
    steps: usize,
    horizon: f64,
    noise_dim: usize,
    state_dim: usize,
    intensities: Vec<f64>,
    seed: u64,
    x0: Vec<f64>,
    dw: Vec<f64>,
    counts: Vec<u32>,
}

/// Pre-drawn Brownian increments, Poisson event counts and initial states.
///
/// Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct NoiseEnsemble {
    inner: Arc<NoiseData>,
}

impl PartialEq for NoiseEnsemble {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (&*self.inner, &*other.inner);
        a.num_paths == b.num_paths
            && a.steps == b.steps
            && a.horizon == b.horizon
            && a.noise_dim == b.noise_dim
            && a.intensities == b.intensities
            && a.seed == b.seed
            && a.x0 == b.x0
            && a.dw == b.dw
            && a.counts == b.counts
    }
}

impl NoiseEnsemble {
    pub fn num_paths(&self) -> usize {
        self.inner.num_paths
    }
    pub fn steps(&self) -> usize {
        self.inner.steps
    }
    pub fn horizon(&self) -> f64 {
        self.inner.horizon
    }
    pub fn dt(&self) -> f64 {
        self.inner.horizon / self.inner.steps as f64
    }
    pub fn noise_dim(&self) -> usize {
        self.inner.noise_dim
    }
    pub fn num_marks(&self) -> usize {
        self.inner.intensities.len()
    }
    pub fn intensities(&self) -> &[f64] {
        &self.inner.intensities
    }
    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Brownian increment `dW_k` of path `p` (length m).
    pub fn dw(&self, p: usize, k: usize) -> &[f64] {
        let m = self.inner.noise_dim;
        let o = (p * self.inner.steps + k) * m;
        &self.inner.dw[o..o + m]
    }

    /// Event counts of every mark on step `k` of path `p` (length J).
    pub fn counts(&self, p: usize, k: usize) -> &[u32] {
        let j = self.num_marks();
        let o = (p * self.inner.steps + k) * j;
        &self.inner.counts[o..o + j]
    }

    /// Compensated increment `count - lambda_j dt` for mark `j`.
    pub fn compensated(&self, p: usize, k: usize, j: usize) -> f64 {
        self.counts(p, k)[j] as f64 - self.inner.intensities[j] * self.dt()
    }

    /// Jump events of path `p` as `(step, mark)` pairs, repeated by multiplicity.
    pub fn events(&self, p: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 0..self.steps() {
            for (j, &c) in self.counts(p, k).iter().enumerate() {
                out.extend(std::iter::repeat_n((k, j), c as usize));
            }
        }
        out
    }

    pub fn initial_state(&self, p: usize) -> &[f64] {
        let n = self.inner.state_dim;
        &self.inner.x0[p * n..(p + 1) * n]
    }

    /// Sums blocks of `factor` consecutive steps, giving the same Brownian
    /// and Poisson paths observed on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseEnsemble> {
        let d = &*self.inner;
        if factor == 0 || d.steps % factor != 0 {
            return Err(Error::DomainError(format!(
                "coarsening factor {factor} must divide the step count {}",
                d.steps
            )));
        }
        let steps = d.steps / factor;
        let (m, j) = (d.noise_dim, d.intensities.len());
        let mut dw = vec![0.0; d.num_paths * steps * m];
        let mut counts = vec![0u32; d.num_paths * steps * j];
        for p in 0..d.num_paths {
            for k in 0..steps {
                for f in 0..factor {
                    let src = p * d.steps + k * factor + f;
                    let dst = p * steps + k;
                    for i in 0..m {
                        dw[dst * m + i] += d.dw[src * m + i];
                    }
                    for i in 0..j {
                        counts[dst * j + i] += d.counts[src * j + i];
                    }
                }
            }
        }
        Ok(NoiseEnsemble {
            inner: Arc::new(NoiseData {
                steps,
                dw,
                counts,
                x0: d.x0.clone(),
                intensities: d.intensities.clone(),
                ..*d
            }),
        })
    }
}

/// Draws the noise for `num_paths` paths of `steps` Euler steps.
///
/// Path `p` uses its own counter-based stream, consumed in the order
/// x0, then per step the m Gaussians followed by the J Poisson counts.
pub fn sample_noise(p: &Problem, num_paths: usize, steps: usize, seed: u64) -> Result<NoiseEnsemble> {
    if num_paths == 0 || steps == 0 {
        return Err(Error::DomainError("path and step counts must be >= 1".into()));
    }
    let n = p.state_dim();
    let m = p.noise_dim();
    let intensities: Vec<f64> = p.jump().map(|j| j.intensities().to_vec()).unwrap_or_default();
    let jn = intensities.len();
    let dt = p.horizon() / steps as f64;
    let sd = dt.sqrt();
    let poissons: Vec<Option<Poisson<f64>>> = intensities
        .iter()
        .map(|l| if *l * dt > 0.0 { Poisson::new(l * dt).ok() } else { None })
        .collect();
    let x0 = p.initial_state().clone();

    let per_path = map_range(num_paths, |path| {
        let mut rng = path_stream(seed, path as u64);
        let start: Vec<f64> = match &x0 {
            InitialState::Deterministic { value } => value.clone(),
            InitialState::Gaussian { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(mu, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + s * z
                })
                .collect(),
        };
        let mut dw = Vec::with_capacity(steps * m);
        let mut counts = Vec::with_capacity(steps * jn);
        for _ in 0..steps {
            for _ in 0..m {
                let z: f64 = StandardNormal.sample(&mut rng);
                dw.push(sd * z);
            }
            for pd in &poissons {
                counts.push(match pd {
                    Some(d) => d.sample(&mut rng) as u32,
                    None => 0,
                });
            }
        }
        (start, dw, counts)
    });

    let mut xs = Vec::with_capacity(num_paths * n);
    let mut dw = Vec::with_capacity(num_paths * steps * m);
    let mut counts = Vec::with_capacity(num_paths * steps * jn);
    for (a, b, c) in per_path {
        xs.extend(a);
        dw.extend(b);
        counts.extend(c);
    }
    Ok(NoiseEnsemble {
        inner: Arc::new(NoiseData {
            num_paths,
            steps,
            horizon: p.horizon(),
            noise_dim: m,
            state_dim: n,
            intensities,
            seed,
            x0: xs,
            dw,
            counts,
        }),
    })
}

/// Simulated state paths together with the noise and control that produced them.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    state_dim: usize,
    states: Vec<f64>,
    cells: Vec<u32>,
    control: RelaxedControl,
    noise: NoiseEnsemble,
}

impl PathEnsemble {
    pub fn num_paths(&self) -> usize {
        self.noise.num_paths()
    }
    pub fn steps(&self) -> usize {
        self.noise.steps()
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn dt(&self) -> f64 {
        self.noise.dt()
    }
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }
    pub fn control(&self) -> &RelaxedControl {
        &self.control
    }
    pub fn noise(&self) -> &NoiseEnsemble {
        &self.noise
    }

    /// `x_k` on path `p`.
    pub fn state(&self, p: usize, k: usize) -> &[f64] {
        let n = self.state_dim;
        let o = (p * (self.steps() + 1) + k) * n;
        &self.states[o..o + n]
    }

    /// Flat `M x (N+1) x n` state array.
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Feedback cell used on step `k` of path `p` (0 for open loop).
    pub fn cell(&self, p: usize, k: usize) -> usize {
        self.cells[p * self.steps() + k] as usize
    }

    /// CSV with one row per (path, step): `path,step,t,x0..x{n-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "path,step,t")?;
        for i in 0..self.state_dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for p in 0..self.num_paths() {
            for k in 0..=self.steps() {
                write!(w, "{p},{k},{}", self.time(k))?;
                for v in self.state(p, k) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Binary container, dims `[M, N+1, n]`.
    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let dims = [self.num_paths() as u64, self.steps() as u64 + 1, self.state_dim as u64];
        io::write_section(w, SectionTag::Paths, &dims, &self.states)
    }
}

/// Resolves the feedback cell for state `x` under `mode`.
pub fn resolve_cell(p: &Problem, mode: &FeedbackMode, x: &[f64], obs: &mut Vec<f64>) -> Result<usize> {
    match mode {
        FeedbackMode::OpenLoop => Ok(0),
        FeedbackMode::StateFeedback { partition } => Ok(partition.cell_of(x)),
        FeedbackMode::ObservationFeedback { partition } => {
            let o = p
                .observation()
                .ok_or_else(|| Error::InvalidProblem("observation feedback needs an observation map".into()))?;
            obs.resize(o.dim, 0.0);
            p.observe(x, obs)?;
            Ok(partition.cell_of(obs))
        }
    }
}

pub(crate) fn check_compatible(p: &Problem, u: &RelaxedControl, noise: &NoiseEnsemble) -> Result<()> {
    if u.time_steps() != noise.steps() {
        return Err(Error::ShapeMismatch(format!(
            "control has {} steps, noise has {}",
            u.time_steps(),
            noise.steps()
        )));
    }
    if (u.horizon() - p.horizon()).abs() > 1e-12 * p.horizon() || (noise.horizon() - p.horizon()).abs() > 1e-12 * p.horizon() {
        return Err(Error::ShapeMismatch("horizon differs between problem, control and noise".into()));
    }
    if noise.noise_dim() != p.noise_dim() || noise.num_marks() != p.num_marks() || noise.inner.state_dim != p.state_dim() {
        return Err(Error::ShapeMismatch("noise dimensions do not match the problem".into()));
    }
    if u.grid().dim() != p.control_dim() {
        return Err(Error::ShapeMismatch("control grid dimension differs from the problem".into()));
    }
    if let Some(part) = u.mode().partition() {
        let want = match u.mode() {
            FeedbackMode::ObservationFeedback { .. } => p.observation().map(|o| o.dim),
            _ => Some(p.state_dim()),
        };
        if want != Some(part.dim()) {
            return Err(Error::ShapeMismatch("feedback partition dimension mismatch".into()));
        }
    }
    Ok(())
}

/// Reduces per-path results, reporting the earliest blow-up (lowest step,
/// then lowest path) so the error does not depend on the schedule.
pub(crate) fn collect_paths<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut first: Option<Error> = None;
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                let replace = match (&first, &e) {
                    (None, _) => true,
                    (Some(Error::BlowUp { step: s0, .. }), Error::BlowUp { step: s1, .. }) => s1 < s0,
                    _ => false,
                };
                if replace {
                    first = Some(e);
                }
            }
        }
    }
    match first {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Euler–Maruyama with relaxed-averaged coefficients and compensated jumps.
pub fn simulate(p: &Problem, u: &RelaxedControl, noise: &NoiseEnsemble) -> Result<PathEnsemble> {
    check_compatible(p, u, noise)?;
    let n = p.state_dim();
    let m = p.noise_dim();
    let jn = p.num_marks();
    let steps = noise.steps();
    let dt = noise.dt();
    let grid = u.grid();

    let per_path = map_range(noise.num_paths(), |path| -> Result<(Vec<f64>, Vec<u32>)> {
        let mut states = Vec::with_capacity((steps + 1) * n);
        let mut cells = Vec::with_capacity(steps);
        let mut x = noise.initial_state(path).to_vec();
        states.extend_from_slice(&x);
        let mut b = vec![0.0; n];
        let mut s = vec![0.0; n * m];
        let mut c = vec![0.0; n];
        let mut scratch = Vec::new();
        let mut obs = Vec::new();
        for k in 0..steps {
            let t = k as f64 * dt;
            let cell = resolve_cell(p, u.mode(), &x, &mut obs)?;
            cells.push(cell as u32);
            let w = u.weights_at(k, cell);
            p.averaged_drift_into(t, &x, grid, w, &mut b, &mut scratch)?;
            p.averaged_diffusion_into(t, &x, grid, w, &mut s, &mut scratch)?;
            let dw = noise.dw(path, k);
            let mut next = x.clone();
            for i in 0..n {
                let mut v = b[i] * dt;
                for l in 0..m {
                    v += s[i * m + l] * dw[l];
                }
                next[i] += v;
            }
            for j in 0..jn {
                let dq = noise.compensated(path, k, j);
                if dq == 0.0 {
                    continue;
                }
                p.averaged_jump_into(t, &x, j, grid, w, &mut c, &mut scratch)?;
                for i in 0..n {
                    next[i] += c[i] * dq;
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
            x = next;
            states.extend_from_slice(&x);
        }
        Ok((states, cells))
    });
    let per_path = collect_paths(per_path)?;
    let mut states = Vec::with_capacity(noise.num_paths() * (steps + 1) * n);
    let mut cells = Vec::with_capacity(noise.num_paths() * steps);
    for (s, c) in per_path {
        states.extend(s);
        cells.extend(c);
    }
    Ok(PathEnsemble {
        state_dim: n,
        states,
        cells,
        control: u.clone(),
        noise: noise.clone(),
    })
}

/// Pathwise cost `sum_k dt l(t_k, x_k, w_k) + Phi(x_N)`.
pub fn path_costs(p: &Problem, paths: &PathEnsemble) -> Result<Vec<f64>> {
    let u = paths.control();
    let dt = paths.dt();
    let steps = paths.steps();
    let costs = map_range(paths.num_paths(), |path| -> Result<f64> {
        let mut acc = 0.0;
        for k in 0..steps {
            let x = paths.state(path, k);
            let w = u.weights_at(k, paths.cell(path, k));
            acc += dt * p.averaged_running_cost(k as f64 * dt, x, u.grid(), w)?;
        }
        let xn = paths.state(path, steps);
        let phi = p.terminal_cost(xn);
        if !phi.is_finite() {
            return Err(Error::NonFiniteCoefficient {
                coefficient: "terminal_cost",
                t: paths.time(steps),
                x: xn.to_vec(),
            });
        }
        Ok(acc + phi)
    });
    collect_paths(costs)
}

/// Monte Carlo cost estimate and its standard error.
pub fn cost(p: &Problem, paths: &PathEnsemble) -> Result<(f64, f64)> {
    Ok(mean_and_stderr(&path_costs(p, paths)?))
}

/// Simulates `u` on `noise` and returns `(estimate, std_error, per-path costs)`.
pub fn evaluate(p: &Problem, u: &RelaxedControl, noise: &NoiseEnsemble) -> Result<(f64, f64, Vec<f64>)> {
    let paths = simulate(p, u, noise)?;
    let c = path_costs(p, &paths)?;
    let (m, s) = mean_and_stderr(&c);
    Ok((m, s, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control_space::{BoxBounds, ControlGrid};
    use crate::problem::JumpSpec;

    fn unit_box() -> BoxBounds {
        BoxBounds::new(vec![-1.0], vec![1.0]).unwrap()
    }

    fn brownian(x0: f64) -> Problem {
        Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![x0] }, unit_box())
            .diffusion(Arc::new(|_, _, _, o| o[0] = 1.0))
            .terminal_cost(Arc::new(|x| x[0] * x[0]))
            .build()
            .unwrap()
    }

    fn open_uniform(steps: usize) -> RelaxedControl {
        let g = ControlGrid::uniform(&unit_box(), 2).unwrap();
        RelaxedControl::uniform(g, 1.0, steps, FeedbackMode::OpenLoop).unwrap()
    }

    #[test]
    fn zero_dynamics_keep_the_initial_state() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.7] }, unit_box())
            .build()
            .unwrap();
        let noise = sample_noise(&p, 5, 10, 1).unwrap();
        let paths = simulate(&p, &open_uniform(10), &noise).unwrap();
        assert!(paths.states().iter().all(|v| *v == 0.7));
    }

    #[test]
    fn terminal_state_is_sum_of_increments() {
        let p = brownian(0.0);
        let noise = sample_noise(&p, 50, 16, 3).unwrap();
        let paths = simulate(&p, &open_uniform(16), &noise).unwrap();
        for path in 0..50 {
            let s: f64 = (0..16).map(|k| noise.dw(path, k)[0]).sum();
            assert!((paths.state(path, 16)[0] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_terminal_variance() {
        let p = brownian(0.0);
        let m = 20_000;
        let noise = sample_noise(&p, m, 8, 11).unwrap();
        let paths = simulate(&p, &open_uniform(8), &noise).unwrap();
        let xs: Vec<f64> = (0..m).map(|i| paths.state(i, 8)[0]).collect();
        let mu = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!((var - 1.0).abs() < 3.0 * (2.0 / m as f64).sqrt());
        let (est, se) = cost(&p, &paths).unwrap();
        assert!((est - 1.0).abs() < 4.0 * se);
    }

    #[test]
    fn constant_costs() {
        let p = Problem::builder(1, 2.0, InitialState::Deterministic { value: vec![0.0] }, unit_box())
            .running_cost(Arc::new(|_, _, _| 1.0))
            .build()
            .unwrap();
        let g = ControlGrid::uniform(&unit_box(), 2).unwrap();
        let u = RelaxedControl::uniform(g, 2.0, 4, FeedbackMode::OpenLoop).unwrap();
        let noise = sample_noise(&p, 3, 4, 0).unwrap();
        let (c, se) = cost(&p, &simulate(&p, &u, &noise).unwrap()).unwrap();
        assert!((c - 2.0).abs() < 1e-15);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn zero_intensity_gives_no_events() {
        let jump = JumpSpec::new(vec![vec![1.0]], vec![0.0], Arc::new(|_, _, v, _, o: &mut [f64]| o[0] = v[0])).unwrap();
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![0.0] }, unit_box())
            .jump(jump)
            .build()
            .unwrap();
        let noise = sample_noise(&p, 100, 10, 5).unwrap();
        assert!((0..100).all(|i| noise.events(i).is_empty()));
    }

    #[test]
    fn blow_up_is_reported_at_first_step() {
        let p = Problem::builder(1, 1.0, InitialState::Deterministic { value: vec![1.0] }, unit_box())
            .drift(Arc::new(|_, x, _, o| o[0] = 1e6 * x[0]))
            .build()
            .unwrap();
        let noise = sample_noise(&p, 4, 10, 0).unwrap();
        match simulate(&p, &open_uniform(10), &noise) {
            Err(Error::BlowUp { step, path, .. }) => {
                assert_eq!(path, 0);
                assert!(step <= 3);
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn coarsened_noise_reproduces_terminal_state() {
        let p = brownian(0.2);
        let fine = sample_noise(&p, 20, 16, 9).unwrap();
        let coarse = fine.coarsen(4).unwrap();
        let a = simulate(&p, &open_uniform(16), &fine).unwrap();
        let b = simulate(&p, &open_uniform(4), &coarse).unwrap();
        for i in 0..20 {
            assert!((a.state(i, 16)[0] - b.state(i, 4)[0]).abs() < 1e-12);
        }
        assert!(fine.coarsen(3).is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_path_step() {
        let p = brownian(0.0);
        let noise = sample_noise(&p, 2, 3, 0).unwrap();
        let paths = simulate(&p, &open_uniform(3), &noise).unwrap();
        let mut buf = Vec::new();
        paths.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = s.lines().collect();
        assert_eq!(lines[0], "path,step,t,x0");
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(!s.contains('\r'));
    }
}
