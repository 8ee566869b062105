//! Variance-reduced stochastic extragradient method for pseudo-monotone
//! stochastic variational inequalities.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod baselines;
pub mod constants;
pub mod error;
pub mod harness;
pub mod merit;
pub mod model;
pub mod problems;
pub mod projection;
pub mod rng;
pub mod sampling;
pub mod solver;
pub mod stats;
pub mod suites;
pub mod vecops;

pub use constants::{ConstantsInputs, ConstantsReport};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentResult, ProbeConfig, ProbeSpec, ProblemSpec};
pub use model::{
    validate, Coordination, Diagnostics, MeanOperator, ProblemInstance, SolutionSet, SolverConfig, Stepsize,
    StochasticOracle, ValidationReport, VarianceProfile,
};
pub use projection::FeasibleSet;
pub use rng::{derive_stream, RngStreamKey, Stage};
pub use sampling::{AgentSchedule, SampleSchedule};
