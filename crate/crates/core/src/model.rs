//! Problem and solver configuration shared by every other module.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merit::natural_residual_sq;
use crate::projection::FeasibleSet;
use crate::rng::StreamRng;
use crate::sampling::{tail_summability, SampleSchedule};

/// Deterministic mean operator `T`.
pub trait MeanOperator: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Vec<f64>;
}

/// Stochastic oracle `F(xi, x)`.
pub trait StochasticOracle: Send + Sync {
    fn dim(&self) -> usize;

    /// Draws one sample `xi` from `rng` and adds `F(xi, x)` to `acc`.
    /// One call is one oracle call.
    fn accumulate(&self, rng: &mut StreamRng, x: &[f64], acc: &mut [f64]) -> Result<()>;

    /// Adds `sum_{j<n} F(xi_j, x)` to `acc`. Implementations may hoist work
    /// that does not depend on the sample, but must consume the stream
    /// exactly as `n` calls to [`accumulate`](Self::accumulate) would.
    fn accumulate_batch(&self, rng: &mut StreamRng, x: &[f64], n: u64, acc: &mut [f64]) -> Result<()> {
        for _ in 0..n {
            self.accumulate(rng, x, acc)?;
        }
        Ok(())
    }
}

/// Closure-backed mean operator.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> MeanOperator for FnOperator<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

/// Oracle that returns `T(x)` exactly, without consuming randomness.
pub struct ExactOracle(pub Arc<dyn MeanOperator>);

impl StochasticOracle for ExactOracle {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn accumulate(&self, _rng: &mut StreamRng, x: &[f64], acc: &mut [f64]) -> Result<()> {
        for (a, v) in acc.iter_mut().zip(self.0.eval(x)) {
            *a += v;
        }
        Ok(())
    }
}

/// What is known about the solution set.
#[derive(Clone, Debug)]
pub enum SolutionSet {
    Unknown,
    Points(Vec<Vec<f64>>),
    /// The solution set is itself a closed convex set, e.g. `X* = X`.
    Set(FeasibleSet),
}

impl SolutionSet {
    pub fn points(&self) -> &[Vec<f64>] {
        match self {
            SolutionSet::Points(p) => p,
            _ => &[],
        }
    }
}

/// Variance structure of the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarianceProfile {
    /// `||F(xi,x) - T(x)||_2 <= sigma` on `X`.
    Uniform {
        sigma: f64,
    },
    /// `||F(xi,x) - T(x)||_2 <= sigma (1 + ||x - x*||)`.
    PointBased {
        sigma: f64,
    },
    None,
}

impl VarianceProfile {
    pub fn sigma(&self) -> Option<f64> {
        match self {
            VarianceProfile::Uniform { sigma } | VarianceProfile::PointBased { sigma } => Some(*sigma),
            VarianceProfile::None => None,
        }
    }
}

/// A stochastic variational inequality together with everything the
/// solver and the diagnostics need to know about it.
#[derive(Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub dim: usize,
    pub blocks: Vec<usize>,
    pub oracle: Arc<dyn StochasticOracle>,
    pub mean: Option<Arc<dyn MeanOperator>>,
    pub lipschitz: f64,
    pub set: FeasibleSet,
    pub solutions: SolutionSet,
    pub variance: VarianceProfile,
    pub start: Vec<f64>,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("blocks", &self.blocks)
            .field("lipschitz", &self.lipschitz)
            .field("set", &self.set)
            .field("variance", &self.variance)
            .finish_non_exhaustive()
    }
}

impl ProblemInstance {
    /// Checks the structural invariants: block partition, feasibility and
    /// fixed-point property of the known solutions.
    pub fn check(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameters("dimension must be positive".into()));
        }
        if self.blocks.is_empty() || self.blocks.contains(&0) || self.blocks.iter().sum::<usize>() != self.dim {
            return Err(Error::BlockMismatch {
                blocks: self.blocks.clone(),
                dim: self.dim,
            });
        }
        if self.oracle.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: self.oracle.dim(),
            });
        }
        if let Some(t) = &self.mean {
            if t.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: t.dim(),
                });
            }
        }
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            return Err(Error::InvalidParameters(format!(
                "Lipschitz constant must be positive, got {}",
                self.lipschitz
            )));
        }
        self.set.validate()?;
        if self.blocks.len() > 1 {
            let sizes: Vec<usize> = self.set.blocks(self.dim).iter().map(|(s, _)| *s).collect();
            if sizes != self.blocks {
                return Err(Error::BlockMismatch {
                    blocks: self.blocks.clone(),
                    dim: self.dim,
                });
            }
        }
        if let Some(d) = self.set.fixed_dim() {
            if d != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: d,
                });
            }
        }
        if self.start.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: self.start.len(),
            });
        }
        let alpha = 0.1 / self.lipschitz;
        for xs in self.solutions.points() {
            if xs.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: xs.len(),
                });
            }
            let d = self.set.distance(xs)?;
            if d > 1e-10 {
                return Err(Error::InvalidParameters(format!(
                    "known solution lies outside the feasible set (distance {d:e})"
                )));
            }
            if let Some(t) = &self.mean {
                let r = natural_residual_sq(t.as_ref(), &self.set, xs, alpha)?.sqrt();
                if r > 1e-10 {
                    return Err(Error::InvalidParameters(format!(
                        "known solution fails the fixed-point test (residual {r:e})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Offsets of the blocks in the full vector.
    pub fn block_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut off = 0;
        self.blocks
            .iter()
            .map(|&b| {
                let r = off..off + b;
                off += b;
                r
            })
            .collect()
    }

    /// Same problem split into the given blocks. The feasible set must
    /// either be a Cartesian product with matching blocks, or be one of the
    /// separable sets (whole space, orthant, box), which are split here.
    pub fn with_blocks(mut self, blocks: Vec<usize>) -> Result<Self> {
        let n = self.dim;
        if blocks.iter().sum::<usize>() != n || blocks.contains(&0) {
            return Err(Error::BlockMismatch { blocks, dim: n });
        }
        let set = match &self.set {
            FeasibleSet::Cartesian { blocks: parts } => {
                let sizes: Vec<usize> = parts.iter().map(|b| b.size).collect();
                if sizes != blocks {
                    return Err(Error::BlockMismatch { blocks, dim: n });
                }
                self.set.clone()
            }
            FeasibleSet::WholeSpace | FeasibleSet::NonnegativeOrthant => {
                FeasibleSet::cartesian(blocks.iter().map(|&b| (b, self.set.clone())).collect())?
            }
            FeasibleSet::Box { lower, upper } => {
                let mut off = 0;
                let mut parts = Vec::new();
                for &b in &blocks {
                    parts.push((
                        b,
                        FeasibleSet::boxed(lower[off..off + b].to_vec(), upper[off..off + b].to_vec())?,
                    ));
                    off += b;
                }
                FeasibleSet::cartesian(parts)?
            }
            _ if blocks.len() == 1 => self.set.clone(),
            _ => {
                return Err(Error::InvalidSet(
                    "feasible set is not a Cartesian product over these blocks".into(),
                ))
            }
        };
        self.set = set;
        self.blocks = blocks;
        self.check()?;
        Ok(self)
    }
}

/// Stepsize rule. Sequences repeat their last value past the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stepsize {
    Constant { alpha: f64 },
    Sequence { values: Vec<f64> },
}

impl Stepsize {
    pub fn constant(alpha: f64) -> Self {
        Stepsize::Constant { alpha }
    }

    pub fn at(&self, k: u64) -> f64 {
        match self {
            Stepsize::Constant { alpha } => *alpha,
            Stepsize::Sequence { values } => {
                let i = (k as usize).min(values.len().saturating_sub(1));
                values.get(i).copied().unwrap_or(f64::NAN)
            }
        }
    }

    /// `(inf, sup)` over the sequence.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Stepsize::Constant { alpha } => (*alpha, *alpha),
            Stepsize::Sequence { values } => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordination {
    /// One shared draw set per stage; every block uses its component.
    Centralized,
    /// Each block draws its own samples.
    Distributed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Diagnostics {
    /// Record the realized errors `eps1`, `eps2` and the `A`, `M` sums.
    pub record_errors: bool,
    /// Record residual and distance to the known solutions.
    pub record_merits: bool,
    /// Keep `z^k` for the last this-many iterations only (all if `None`).
    pub z_window: Option<usize>,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            record_errors: false,
            record_merits: true,
            z_window: None,
        }
    }
}

impl Diagnostics {
    pub fn full() -> Self {
        Self {
            record_errors: true,
            record_merits: true,
            z_window: None,
        }
    }
}

fn default_floor() -> f64 {
    1e-24
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub stepsize: Stepsize,
    pub schedule: SampleSchedule,
    pub max_iterations: u64,
    pub coordination: Coordination,
    pub master_seed: u64,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub initial_point: Option<Vec<f64>>,
    /// Runs stop once `r_alpha(x^k)^2` falls to this floor.
    #[serde(default = "default_floor")]
    pub residual_floor: f64,
}

impl SolverConfig {
    pub fn new(alpha: f64, schedule: SampleSchedule, max_iterations: u64, master_seed: u64) -> Self {
        Self {
            stepsize: Stepsize::constant(alpha),
            schedule,
            max_iterations,
            coordination: Coordination::Centralized,
            master_seed,
            diagnostics: Diagnostics::default(),
            initial_point: None,
            residual_floor: default_floor(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Horizon of the numerical summability check.
const SUMMABILITY_HORIZON: u64 = 100_000;

/// Checks every assumption that can be checked before running. Stepsize,
/// schedule and block structure failures are hard errors; the rest is
/// reported.
pub fn validate(problem: &ProblemInstance, config: &SolverConfig) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    problem.check()?;
    checks.push(AssumptionCheck {
        name: "blocks".into(),
        passed: true,
        detail: format!("{:?} partition n = {}", problem.blocks, problem.dim),
    });

    let (lo, hi) = config.stepsize.bounds();
    let limit = 1.0 / (6f64.sqrt() * problem.lipschitz);
    if !(lo > 0.0) || !(hi < limit) || !hi.is_finite() {
        return Err(Error::InvalidStepsize(format!(
            "need 0 < alpha < 1/(sqrt(6) L) = {limit:.6}, got range [{lo}, {hi}]"
        )));
    }
    checks.push(AssumptionCheck {
        name: "stepsize".into(),
        passed: true,
        detail: format!("alpha in [{lo}, {hi}] < {limit:.6}"),
    });

    config.schedule.validate()?;
    let m = problem.num_blocks();
    match config.coordination {
        Coordination::Centralized => {
            if !config.schedule.is_uniform() || (config.schedule.num_agents() != 1 && config.schedule.num_agents() != m)
            {
                return Err(Error::CoordinationMismatch(
                    "centralized sampling needs identical per-block sample counts".into(),
                ));
            }
        }
        Coordination::Distributed => {
            if config.schedule.num_agents() != m && !(m == 1 && config.schedule.num_agents() == 1) {
                return Err(Error::CoordinationMismatch(format!(
                    "distributed sampling needs one schedule per block ({m}), got {}",
                    config.schedule.num_agents()
                )));
            }
        }
    }
    let summ = tail_summability(&config.schedule, m, SUMMABILITY_HORIZON)?;
    if !summ.summable {
        return Err(Error::InvalidSchedule(format!(
            "sum of 1/N_k does not settle numerically (gap {:e})",
            summ.cauchy_gap
        )));
    }
    checks.push(AssumptionCheck {
        name: "sampling_rate".into(),
        passed: true,
        detail: format!(
            "sum_(k<{}) 1/Nk = {:.6} + tail <= {:.3e}; sum 1/N_min = {:.6}",
            summ.horizon, summ.partial_sum, summ.remainder_bound, summ.min_rule_sum
        ),
    });

    checks.push(AssumptionCheck {
        name: "consistency".into(),
        passed: !matches!(problem.solutions, SolutionSet::Unknown),
        detail: match &problem.solutions {
            SolutionSet::Unknown => "no known solution".into(),
            SolutionSet::Points(p) => format!("{} known solution(s)", p.len()),
            SolutionSet::Set(_) => "solution set described as a convex set".into(),
        },
    });
    checks.push(AssumptionCheck {
        name: "mean_operator".into(),
        passed: problem.mean.is_some(),
        detail: if problem.mean.is_some() {
            "closed form available".into()
        } else {
            "oracle only; merits will be estimated".into()
        },
    });
    checks.push(AssumptionCheck {
        name: "variance_control".into(),
        passed: problem.variance != VarianceProfile::None,
        detail: format!("{:?}", problem.variance),
    });
    if let Some(x0) = &config.initial_point {
        if x0.len() != problem.dim {
            return Err(Error::DimensionMismatch {
                expected: problem.dim,
                got: x0.len(),
            });
        }
    }
    Ok(ValidationReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems;

    fn linear(l: f64) -> ProblemInstance {
        problems::identity_problem(1, l, FeasibleSet::WholeSpace)
    }

    #[test]
    fn stepsize_threshold() {
        let p = linear(1.0);
        let s = SampleSchedule::single(1.0, 3.0, 0.0, 1.0).unwrap();
        assert!(validate(&p, &SolverConfig::new(0.40, s.clone(), 10, 0)).is_ok());
        assert!(matches!(
            validate(&p, &SolverConfig::new(0.41, s.clone(), 10, 0)),
            Err(Error::InvalidStepsize(_))
        ));
        assert!(matches!(
            validate(&p, &SolverConfig::new(0.0, s, 10, 0)),
            Err(Error::InvalidStepsize(_))
        ));
    }

    #[test]
    fn bad_schedule_rejected() {
        let p = linear(1.0);
        let mut cfg = SolverConfig::new(0.2, SampleSchedule::single(1.0, 3.0, 0.0, 1.0).unwrap(), 10, 0);
        cfg.schedule.agents[0].b = 0.0;
        assert!(matches!(validate(&p, &cfg), Err(Error::InvalidSchedule(_))));
    }

    #[test]
    fn block_mismatch_rejected() {
        let mut p = linear(1.0);
        p.blocks = vec![2];
        let cfg = SolverConfig::new(0.2, SampleSchedule::single(1.0, 3.0, 0.0, 1.0).unwrap(), 10, 0);
        assert!(matches!(validate(&p, &cfg), Err(Error::BlockMismatch { .. })));
    }

    #[test]
    fn validate_is_idempotent() {
        let p = linear(1.0);
        let cfg = SolverConfig::new(0.2, SampleSchedule::single(1.0, 3.0, 0.0, 1.0).unwrap(), 10, 0);
        let a = serde_json::to_string(&validate(&p, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&validate(&p, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centralized_needs_uniform_counts() {
        let p = problems::identity_problem(2, 1.0, FeasibleSet::WholeSpace)
            .with_blocks(vec![1, 1])
            .unwrap();
        let sched = SampleSchedule::new(vec![
            crate::sampling::AgentSchedule::new(1.0, 3.0, 0.0, 1.0).unwrap(),
            crate::sampling::AgentSchedule::new(2.0, 3.0, 0.0, 1.0).unwrap(),
        ])
        .unwrap();
        let mut cfg = SolverConfig::new(0.2, sched, 10, 0);
        assert!(matches!(validate(&p, &cfg), Err(Error::CoordinationMismatch(_))));
        cfg.coordination = Coordination::Distributed;
        assert!(validate(&p, &cfg).is_ok());
    }
}
