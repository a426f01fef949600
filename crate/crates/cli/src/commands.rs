//! Subcommand implementations.

use std::io::Write;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use rsmp::adjoint::duality;
use rsmp::bench::{benchmark, describe, Benchmark};
use rsmp::control_space::{dirac_embed, ControlGrid, FeedbackMode, RelaxedControl};
use rsmp::exec::mean_and_stderr;
use rsmp::forward_sim::{evaluate, path_costs};
use rsmp::smp::{certify, hamiltonian_field, optimize, pointwise_argmin, realize_regular};
use rsmp::{sample_noise, simulate, simulate_variational, solve_bsde};

use crate::artifacts::Artifacts;
use crate::config::{Feedback, Format, RunArgs, RunConfig};
use crate::error::CliError;
use crate::table::Table;

#[derive(Parser, Debug)]
#[command(name = "rsmp", version, about = "Relaxed stochastic minimum principle solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate paths and estimate the cost.
    Simulate(RunArgs),
    /// Solve the adjoint equation and check the duality identity.
    Adjoint(RunArgs),
    /// Run the conditional-gradient optimizer.
    Optimize(RunArgs),
    /// Minimum-principle gap of a control.
    Certify(RunArgs),
    /// Realize a relaxed control by regular chattering controls.
    Chatter(RunArgs),
    /// Print the constants of a benchmark.
    Describe(RunArgs),
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::Adjoint(a)
            | Command::Optimize(a)
            | Command::Certify(a)
            | Command::Chatter(a)
            | Command::Describe(a) => a,
        }
    }
}

/// Resolves the config, runs the command and returns the written files.
pub fn run(cli: &Cli) -> Result<Vec<std::path::PathBuf>, CliError> {
    let cfg = RunConfig::resolve(cli.command.args())?;
    let describe_only = matches!(cli.command, Command::Describe(_));
    cfg.validate(!describe_only)?;
    if let Some(t) = cfg.threads {
        // fails only if a pool already exists, which then keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    if describe_only {
        let d = describe(&cfg.bench).map_err(config_error)?;
        say(&serde_json::to_string_pretty(&d)?);
        return Ok(Vec::new());
    }
    let ctx = Context::new(&cfg)?;
    let mut out = Artifacts::new(&cfg)?;
    match cli.command {
        Command::Simulate(_) => run_simulate(&cfg, &ctx, &mut out)?,
        Command::Adjoint(_) => run_adjoint(&cfg, &ctx, &mut out)?,
        Command::Optimize(_) => run_optimize(&cfg, &ctx, &mut out)?,
        Command::Certify(_) => run_certify(&cfg, &ctx, &mut out)?,
        Command::Chatter(_) => run_chatter(&cfg, &ctx, &mut out)?,
        Command::Describe(_) => unreachable!("handled above"),
    }
    Ok(out.written().to_vec())
}

/// Prints a line to stdout, ignoring a closed pipe.
fn say(line: &str) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn config_error(e: rsmp::Error) -> CliError {
    CliError::Config(e.to_string())
}

struct Context {
    bench: Benchmark,
    grid: ControlGrid,
    mode: FeedbackMode,
}

impl Context {
    fn new(cfg: &RunConfig) -> Result<Context, CliError> {
        let bench = benchmark(&cfg.bench).map_err(config_error)?;
        let grid = bench.grid(cfg.k).map_err(config_error)?;
        let p = &bench.problem;
        let mode = match cfg.feedback {
            Feedback::Open => FeedbackMode::OpenLoop,
            Feedback::State => FeedbackMode::StateFeedback {
                partition: p.state_partition(cfg.cells).map_err(config_error)?,
            },
            Feedback::Observation => FeedbackMode::ObservationFeedback {
                partition: p.observation_partition(cfg.cells).map_err(config_error)?,
            },
        };
        Ok(Context { bench, grid, mode })
    }

    fn problem(&self) -> &rsmp::Problem {
        &self.bench.problem
    }

    fn horizon(&self) -> f64 {
        self.problem().horizon()
    }

    /// The control from `--control`, or uniform weights.
    fn control(&self, cfg: &RunConfig) -> Result<RelaxedControl, CliError> {
        let Some(path) = &cfg.control else {
            return Ok(RelaxedControl::uniform(self.grid.clone(), self.horizon(), cfg.n, self.mode.clone())?);
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // accept the `final_control.json` artifact as well as a bare control
        if let Some(inner) = value.get_mut("control") {
            value = inner.take();
        }
        let u: RelaxedControl = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if u.grid() != &self.grid || u.mode() != &self.mode || u.time_steps() != cfg.n || u.horizon() != self.horizon() {
            return Err(CliError::Config(format!(
                "{} does not match the configured grid, feedback mode and --N",
                path.display()
            )));
        }
        Ok(u)
    }
}

fn f(v: f64) -> Option<f64> {
    Some(v)
}

fn write_table(cfg: &RunConfig, out: &mut Artifacts, stem: &str, table: &Table) -> Result<(), CliError> {
    if cfg.wants(Format::Csv) {
        out.csv(&format!("{stem}.csv"), |w| table.write_csv(w))?;
    }
    if cfg.wants(Format::Json) {
        out.json(&format!("{stem}.json"), &json!({ "rows": table.to_json() }))?;
    }
    Ok(())
}

fn run_simulate(cfg: &RunConfig, ctx: &Context, out: &mut Artifacts) -> Result<(), CliError> {
    let p = ctx.problem();
    let u = ctx.control(cfg)?;
    let noise = sample_noise(p, cfg.m, cfg.n, cfg.seed())?;
    let paths = simulate(p, &u, &noise)?;
    let (cost, se) = mean_and_stderr(&path_costs(p, &paths)?);
    if cfg.wants(Format::Csv) {
        out.csv("paths.csv", |w| Ok(paths.write_csv(w)?))?;
    }
    if cfg.wants(Format::Json) {
        let times: Vec<f64> = (0..=paths.steps()).map(|k| paths.time(k)).collect();
        out.json(
            "paths.json",
            &json!({
                "dims": [paths.num_paths(), paths.steps() + 1, paths.state_dim()],
                "t": times,
                "states": paths.states(),
            }),
        )?;
    }
    if cfg.wants(Format::Bin) {
        out.bin("paths.bin", |w| Ok(paths.write_binary(w)?))?;
    }
    out.json("simulate.json", &json!({ "cost": cost, "std_error": se }))?;
    say(&format!("cost {cost} (std error {se})"));
    Ok(())
}

fn run_adjoint(cfg: &RunConfig, ctx: &Context, out: &mut Artifacts) -> Result<(), CliError> {
    let p = ctx.problem();
    let u0 = ctx.control(cfg)?;
    let noise = sample_noise(p, cfg.m, cfg.n, cfg.seed())?;
    let paths = simulate(p, &u0, &noise)?;
    let (cost, se) = mean_and_stderr(&path_costs(p, &paths)?);
    let adj = solve_bsde(p, &paths, &u0, cfg.basis())?;
    // duality is checked along the conditional-gradient direction
    let field = hamiltonian_field(p, &paths, &adj, cfg.info.into())?;
    let target = pointwise_argmin(&field)?;
    drop(field);
    let var = simulate_variational(p, &paths, &target, &u0)?;
    let d = duality(p, &paths, &u0, &target, &adj, &var)?;
    let relative = if d.l_y != 0.0 { d.gap / d.l_y.abs() } else { d.gap };

    let (n, m, jn) = (p.state_dim(), p.noise_dim(), p.num_marks());
    if cfg.wants(Format::Csv) {
        out.csv("adjoint.csv", |w: &mut dyn Write| {
            let mut head = vec!["path".to_string(), "step".into(), "t".into()];
            head.extend((0..n).map(|i| format!("psi{i}")));
            head.extend((0..n).map(|i| format!("psi_hat{i}")));
            head.extend((0..n).flat_map(|i| (0..m).map(move |r| format!("q{i}_{r}"))));
            head.extend((0..jn).flat_map(|j| (0..n).map(move |i| format!("phi{j}_{i}"))));
            writeln!(w, "{}", head.join(","))?;
            for path in 0..paths.num_paths() {
                for k in 0..paths.steps() {
                    let mut row = vec![path.to_string(), k.to_string(), paths.time(k).to_string()];
                    row.extend(adj.psi(path, k).iter().map(|v| v.to_string()));
                    row.extend(adj.psi_next(path, k).iter().map(|v| v.to_string()));
                    row.extend(adj.q(path, k).iter().map(|v| v.to_string()));
                    for j in 0..jn {
                        row.extend(adj.phi(path, k, j).iter().map(|v| v.to_string()));
                    }
                    writeln!(w, "{}", row.join(","))?;
                }
            }
            Ok(())
        })?;
    }
    if cfg.wants(Format::Bin) {
        out.bin("adjoint.bin", |w| Ok(adj.write_binary(w)?))?;
    }
    out.json(
        "adjoint.json",
        &json!({
            "cost": cost,
            "std_error": se,
            "duality": { "l_y": d.l_y, "pairing": d.pairing, "gap": d.gap, "relative_gap": relative },
            "diagnostics": adj.diagnostics,
        }),
    )?;
    say(&format!("duality gap {} (relative {relative:e})", d.gap));
    Ok(())
}

#[derive(Serialize)]
struct IterateRow {
    iteration: usize,
    cost: f64,
    std_error: f64,
    gap: f64,
    gap_std_error: f64,
    step: Option<f64>,
}

fn run_optimize(cfg: &RunConfig, ctx: &Context, out: &mut Artifacts) -> Result<(), CliError> {
    let p = ctx.problem();
    let u0 = ctx.control(cfg)?;
    let res = optimize(p, &u0, &cfg.optimize_params())?;
    let rows: Vec<IterateRow> = res
        .iterates
        .iter()
        .map(|it| IterateRow {
            iteration: it.iteration,
            cost: it.cost,
            std_error: it.std_error,
            gap: it.gap,
            gap_std_error: it.gap_std_error,
            step: it.step,
        })
        .collect();
    if cfg.wants(Format::Csv) {
        let mut t = Table::new(&["iteration", "cost", "std_error", "gap", "gap_std_error", "step"]);
        for r in &rows {
            t.push(vec![f(r.iteration as f64), f(r.cost), f(r.std_error), f(r.gap), f(r.gap_std_error), r.step]);
        }
        out.csv("iterates.csv", |w| t.write_csv(w))?;
    }
    out.json(
        "iterates.json",
        &json!({
            "status": res.status,
            "final_cost": res.final_cost(),
            "final_gap": res.final_gap(),
            "iterates": rows,
        }),
    )?;
    out.json("final_control.json", &json!({ "control": res.final_control }))?;
    say(&format!("{:?}: cost {} gap {} after {} iterations", res.status, res.final_cost(), res.final_gap(), rows.len() - 1));
    Ok(())
}

fn run_certify(cfg: &RunConfig, ctx: &Context, out: &mut Artifacts) -> Result<(), CliError> {
    let p = ctx.problem();
    let u = ctx.control(cfg)?;
    let noise = sample_noise(p, cfg.m, cfg.n, cfg.seed())?;
    let (cost, se, gap, field) = certify(p, &u, &noise, cfg.info.into(), cfg.basis())?;
    let tolerance = cfg.tol.max(cfg.rel_tol * cost.abs());
    let mut t = Table::new(&["step", "t", "gap"]);
    for (k, g) in gap.per_step.iter().enumerate() {
        t.push(vec![f(k as f64), f(k as f64 * field.dt()), f(*g)]);
    }
    write_table(cfg, out, "gap_per_step", &t)?;
    out.json(
        "certificate.json",
        &json!({
            "cost": cost,
            "std_error": se,
            "gap": gap.gap,
            "gap_std_error": gap.std_error,
            "tolerance": tolerance,
            "within_tolerance": gap.gap <= tolerance,
        }),
    )?;
    say(&format!("gap {} (std error {}), tolerance {tolerance}", gap.gap, gap.std_error));
    Ok(())
}

fn run_chatter(cfg: &RunConfig, ctx: &Context, out: &mut Artifacts) -> Result<(), CliError> {
    let p = ctx.problem();
    let u = ctx.control(cfg)?;
    let top = *cfg.refinements.iter().max().expect("validated");
    let noise = sample_noise(p, cfg.m, cfg.n * top, cfg.seed())?;
    let (ju, seu, per_u) = evaluate(p, &u.refine(top)?, &noise)?;
    let mut t = Table::new(&["R", "cost", "std_error", "difference", "difference_std_error"]);
    for &r in &cfg.refinements {
        let regular = realize_regular(&u, r)?;
        let embedded = dirac_embed(&regular, &ctx.grid)?.refine(top / r)?;
        let (j, se, per) = evaluate(p, &embedded, &noise)?;
        let diffs: Vec<f64> = per.iter().zip(&per_u).map(|(a, b)| a - b).collect();
        let (d, dse) = mean_and_stderr(&diffs);
        t.push(vec![f(r as f64), f(j), f(se), f(d), f(dse)]);
        say(&format!("R={r}: cost {j} difference {d}"));
    }
    write_table(cfg, out, "chatter", &t)?;
    out.json(
        "chatter_summary.json",
        &json!({ "relaxed_cost": ju, "relaxed_std_error": seu, "finest_steps": cfg.n * top, "rows": t.to_json() }),
    )?;
    Ok(())
}
