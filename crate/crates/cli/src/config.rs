//! Run configuration: defaults, optional JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Info {
    Full,
    Partial,
}

impl From<Info> for rsmp::InfoMode {
    fn from(i: Info) -> Self {
        match i {
            Info::Full => rsmp::InfoMode::Full,
            Info::Partial => rsmp::InfoMode::Partial,
        }
    }
}

/// Information pattern of the controls built by the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Open,
    State,
    Observation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Bin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub bench: String,
    /// Number of Monte Carlo paths.
    pub m: usize,
    /// Number of time steps.
    pub n: usize,
    /// Control atoms per dimension; the benchmark default when absent.
    pub k: Option<usize>,
    /// Mandatory for every command that draws noise.
    pub seed: Option<u64>,
    /// Worker threads. Never affects results, so artifacts omit it.
    pub threads: Option<usize>,
    pub info: Info,
    pub feedback: Feedback,
    /// Cells per dimension of the feedback partition.
    pub cells: usize,
    pub tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub basis_degree: u32,
    pub out: PathBuf,
    pub formats: Vec<Format>,
    /// Relaxed control (JSON) to start from or to certify.
    pub control: Option<PathBuf>,
    /// Chattering refinements.
    pub refinements: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = rsmp::OptimizeParams::default();
        Self {
            bench: "lq1d".into(),
            m: 20_000,
            n: 64,
            k: None,
            seed: None,
            threads: None,
            info: Info::Full,
            feedback: Feedback::Open,
            cells: 8,
            tol: opt.tol,
            rel_tol: opt.rel_tol,
            max_iters: opt.max_iters,
            basis_degree: opt.basis.degree,
            out: PathBuf::from("out"),
            formats: vec![Format::Csv, Format::Json],
            control: None,
            refinements: vec![2, 4, 8, 16],
        }
    }
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// JSON config file; flags take precedence over its fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Benchmark problem name.
    #[arg(long)]
    pub bench: Option<String>,
    /// Monte Carlo paths.
    #[arg(long = "M", value_name = "PATHS")]
    pub m: Option<usize>,
    /// Time steps.
    #[arg(long = "N", value_name = "STEPS")]
    pub n: Option<usize>,
    /// Control atoms per dimension.
    #[arg(long = "K", value_name = "ATOMS")]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "RSMP_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub info: Option<Info>,
    #[arg(long, value_enum)]
    pub feedback: Option<Feedback>,
    /// Cells per dimension for state or observation feedback.
    #[arg(long)]
    pub cells: Option<usize>,
    /// Absolute gap tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Gap tolerance relative to |J|.
    #[arg(long = "rel-tol")]
    pub rel_tol: Option<f64>,
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    /// Total degree of the regression basis.
    #[arg(long = "basis-degree")]
    pub basis_degree: Option<u32>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Table formats, comma separated.
    #[arg(long = "format", value_enum, value_delimiter = ',')]
    pub formats: Option<Vec<Format>>,
    /// Relaxed control JSON, e.g. `final_control.json` from `optimize`.
    #[arg(long, value_name = "FILE")]
    pub control: Option<PathBuf>,
    /// Chattering refinements, comma separated.
    #[arg(long = "R", value_delimiter = ',')]
    pub refinements: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the config file, then the flags.
    pub fn resolve(args: &RunArgs) -> Result<RunConfig, CliError> {
        let mut c = match &args.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = &args.$f {
                    c.$f = v.clone().into();
                }
            )*};
        }
        take!(bench, m, n, info, feedback, cells, tol, rel_tol, max_iters, basis_degree, out, formats, refinements);
        if args.k.is_some() {
            c.k = args.k;
        }
        if args.seed.is_some() {
            c.seed = args.seed;
        }
        if args.threads.is_some() {
            c.threads = args.threads;
        }
        if args.control.is_some() {
            c.control = args.control.clone();
        }
        Ok(c)
    }

    /// Checks counts and tolerances. `needs_seed` is false only for `describe`.
    pub fn validate(&self, needs_seed: bool) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        if self.m < 2 {
            return bad("--M must be at least 2");
        }
        if self.n == 0 {
            return bad("--N must be positive");
        }
        if self.k == Some(0) {
            return bad("--K must be positive");
        }
        if self.cells == 0 {
            return bad("--cells must be positive");
        }
        if self.threads == Some(0) {
            return bad("--threads must be positive");
        }
        if !(self.tol >= 0.0) || !(self.rel_tol >= 0.0) {
            return bad("tolerances must be nonnegative");
        }
        if self.formats.is_empty() {
            return bad("at least one --format is required");
        }
        if self.refinements.is_empty() || self.refinements.contains(&0) {
            return bad("--R needs positive refinements");
        }
        let top = *self.refinements.iter().max().expect("nonempty");
        if self.refinements.iter().any(|r| top % r != 0) {
            return bad("every --R value must divide the largest one");
        }
        if needs_seed && self.seed.is_none() {
            return bad("--seed is required");
        }
        Ok(())
    }

    /// The config as embedded in artifacts. The thread count and output
    /// directory are dropped so artifacts depend on neither.
    pub fn for_artifact(&self) -> RunConfig {
        RunConfig {
            threads: None,
            out: PathBuf::new(),
            ..self.clone()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    pub fn optimize_params(&self) -> rsmp::OptimizeParams {
        rsmp::OptimizeParams {
            num_paths: self.m,
            max_iters: self.max_iters,
            tol: self.tol,
            rel_tol: self.rel_tol,
            seed: self.seed(),
            info: self.info.into(),
            basis: self.basis(),
            ..Default::default()
        }
    }

    pub fn basis(&self) -> rsmp::BasisSpec {
        rsmp::BasisSpec { degree: self.basis_degree }
    }
}
