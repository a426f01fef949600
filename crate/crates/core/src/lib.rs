//! Relaxed-control stochastic minimum principle solver.
//!
//! The crate simulates controlled jump-diffusions driven by relaxed
//! (measure-valued) controls, solves the adjoint BSDE by least-squares Monte
//! Carlo, and optimizes controls by conditional gradient steps towards the
//! pointwise Hamiltonian minimizer.
//!
//! Path-level work runs on rayon when the `parallel` feature is enabled
//! (default) and sequentially otherwise; results are identical either way.

pub mod adjoint;
pub mod bench;
pub mod control_space;
pub mod error;
pub mod exec;
pub mod forward_sim;
pub mod io;
pub mod problem;
pub mod regression;
pub mod rng;
pub mod smp;
pub mod variational;

pub use adjoint::{duality_gap, sm_inner, solve_bsde, v_q, AdjointEnsemble, Semimartingale};
pub use bench::{lq_riccati_oracle, make_benchmark, LqSpec, RiccatiSolution};
pub use control_space::{
    dirac_embed, mix, pair, validate, BoxBounds, CellPartition, ControlGrid, FeedbackMode, RegularControl,
    RelaxedControl,
};
pub use error::{Error, Result};
pub use forward_sim::{cost, sample_noise, simulate, NoiseEnsemble, PathEnsemble};
pub use problem::{validate_assumptions, InitialState, JumpSpec, Observation, Problem};
pub use regression::BasisSpec;
pub use smp::{
    hamiltonian, hamiltonian_field, optimize, pointwise_argmin, realize_regular, smp_gap, HamiltonianField, InfoMode,
    OptimizeParams, OptimizationResult, Status,
};
pub use variational::{gateaux, simulate_variational, VariationEnsemble};
