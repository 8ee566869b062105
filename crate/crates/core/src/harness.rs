//! Experiment harness: JSON configuration, replicated runs, Monte Carlo
//! statistics, rate fits, probes and persistence.
//!
//! # Configuration schema (version 1)
//!
//! An experiment is a single JSON document. Unknown keys are rejected.
//!
//! ```json
//! {
//!   "version": 1,
//!   "problem": { "kind": "strongly_monotone", "n": 5, "seed": 1 },
//!   "blocks": [2, 3],
//!   "solver": {
//!     "stepsize": { "kind": "constant", "alpha": 0.1 },
//!     "schedule": { "agents": [ { "theta": 1, "mu": 3, "a": 0, "b": 1 } ] },
//!     "max_iterations": 300,
//!     "coordination": "centralized",
//!     "master_seed": 7
//!   },
//!   "replications": 100,
//!   "merits": { "residual_alpha": null, "dgap": { "a": 1, "b": 2 }, "distance": true },
//!   "fit_window": { "k_lo": 20, "k_hi": 300 },
//!   "epsilon": 1e-3,
//!   "threads": 4,
//!   "constants": { "phi": 0.5, "c": 2, "c2": 1 },
//!   "outputs": { "dir": "out", "stem": "experiment", "traces": false }
//! }
//! ```
//!
//! Problem kinds and their parameters:
//!
//! | kind | parameters |
//! |---|---|
//! | `linear_svi` | `n`, `seed`, `noise_scale` |
//! | `constant_noise` | `n` (default 1), `sigma` |
//! | `scaled_monotone` | `n`, `seed`, `sigma` |
//! | `strongly_monotone` | `n`, `seed`, `strong`, `mult_noise`, `add_noise`, `radius`, `start` (all defaulted) |
//! | `negated_identity` | `n`, `sigma` |
//!
//! `blocks` (optional) splits the problem into a Cartesian product; it
//! requires a box, orthant or unconstrained feasible set.
//!
//! # Output files
//!
//! `<stem>.csv` has one row per iteration with columns
//! `k, mean_r2, stderr_r2, mean_dist2, stderr_dist2, mean_dgap, stderr_dgap, cum_calls`
//! (empty cells where a merit is not tracked). `<stem>.json` holds the
//! [`ExperimentResult`] including the sha256 hash of the configuration.
//!
//! Probes write `<stem>.csv` (kind-specific columns, see [`ProbeSpec`]) and a
//! `<stem>.json` verdict.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{fejer_audit_with_tolerance, martingale_probe};
use crate::baselines::{variance_scaling_probe, write_variance_csv};
use crate::constants::{
    compare_rate, rate_and_complexity_bounds, BoundComparison, ConstantsInputs, ConstantsReport, VarianceKind,
};
use crate::error::{Error, Result};
use crate::merit::{d_gap, distance_sq_to_solutions, mean_or_estimate, residual_sq_from};
use crate::model::{validate, Coordination, MeanOperator, ProblemInstance, SolutionSet, SolverConfig, VarianceProfile};
use crate::problems::{self, check_pseudo_monotone, StronglyMonotoneSpec};
use crate::sampling::{error_decay_probe, SampleSchedule};
use crate::solver::{run, RunTrace};
use crate::stats::{linear_fit, MeanAccumulator};

pub const SCHEMA_VERSION: u32 = 1;

fn one_usize() -> usize {
    1
}

/// Named test problem with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    LinearSvi {
        n: usize,
        #[serde(default)]
        seed: u64,
        noise_scale: f64,
    },
    ConstantNoise {
        #[serde(default = "one_usize")]
        n: usize,
        sigma: f64,
    },
    ScaledMonotone {
        n: usize,
        #[serde(default)]
        seed: u64,
        sigma: f64,
    },
    StronglyMonotone(#[serde(default)] StronglyMonotoneSpec),
    NegatedIdentity {
        n: usize,
        sigma: f64,
    },
}

impl ProblemSpec {
    pub fn build(&self) -> Result<ProblemInstance> {
        match self {
            ProblemSpec::LinearSvi { n, seed, noise_scale } => {
                problems::gen_linear_svi(*n, *seed, *noise_scale)?.to_instance()
            }
            ProblemSpec::ConstantNoise { n, sigma } => Ok(problems::constant_noise_n(*n, *sigma)),
            ProblemSpec::ScaledMonotone { n, seed, sigma } => problems::scaled_monotone(*n, *seed, *sigma),
            ProblemSpec::StronglyMonotone(spec) => problems::strongly_monotone(spec),
            ProblemSpec::NegatedIdentity { n, sigma } => problems::negated_identity(*n, *sigma),
        }
    }

    /// Builds the problem and applies an optional block split.
    pub fn build_with_blocks(&self, blocks: Option<&[usize]>) -> Result<ProblemInstance> {
        let p = self.build()?;
        match blocks {
            Some(b) => p.with_blocks(b.to_vec()),
            None => Ok(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DGapParams {
    pub a: f64,
    pub b: f64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeritSpec {
    /// Residual parameter; defaults to the stepsize of each iteration.
    #[serde(default)]
    pub residual_alpha: Option<f64>,
    #[serde(default)]
    pub dgap: Option<DGapParams>,
    #[serde(default = "yes")]
    pub distance: bool,
}

impl Default for MeritSpec {
    fn default() -> Self {
        Self {
            residual_alpha: None,
            dgap: Some(DGapParams { a: 1.0, b: 2.0 }),
            distance: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitWindow {
    pub k_lo: u64,
    pub k_hi: u64,
}

fn default_stem() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_stem")]
    pub stem: String,
    /// Also write one trace CSV per replication.
    #[serde(default)]
    pub traces: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            stem: default_stem(),
            traces: false,
        }
    }
}

fn half() -> f64 {
    0.5
}
fn two() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}

/// Constants used for the cross-check block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    #[serde(default = "half")]
    pub phi: f64,
    #[serde(default = "two")]
    pub c: f64,
    #[serde(default = "one")]
    pub c2: f64,
}

impl Default for ConstantsSpec {
    fn default() -> Self {
        Self {
            phi: 0.5,
            c: 2.0,
            c2: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
    pub solver: SolverConfig,
    pub replications: u64,
    #[serde(default)]
    pub merits: MeritSpec,
    /// Defaults to `[1, max_iterations]`.
    #[serde(default)]
    pub fit_window: Option<FitWindow>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub constants: ConstantsSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemSpec, solver: SolverConfig, replications: u64) -> Self {
        Self {
            version: SCHEMA_VERSION,
            problem,
            blocks: None,
            solver,
            replications,
            merits: MeritSpec::default(),
            fit_window: None,
            epsilon: None,
            threads: None,
            constants: ConstantsSpec::default(),
            outputs: OutputSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.check()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn fit_window(&self) -> FitWindow {
        self.fit_window.unwrap_or(FitWindow {
            k_lo: 1,
            k_hi: self.solver.max_iterations,
        })
    }

    /// Structural checks that do not need the problem.
    pub fn check(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        let w = self.fit_window();
        if !(w.k_lo < w.k_hi && w.k_hi <= self.solver.max_iterations) {
            return Err(Error::Config(format!(
                "fit window needs k_lo < k_hi <= max_iterations = {}, got [{}, {}]",
                self.solver.max_iterations, w.k_lo, w.k_hi
            )));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(Error::Config(format!("epsilon must be positive, got {e}")));
            }
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(Error::Config("threads must be at least 1".into()));
            }
        }
        if let Some(a) = self.merits.residual_alpha {
            if !(a > 0.0) {
                return Err(Error::Config(format!("residual_alpha must be positive, got {a}")));
            }
        }
        if let Some(g) = self.merits.dgap {
            if !(g.a > 0.0 && g.b > g.a) {
                return Err(Error::Config(format!("dgap needs b > a > 0, got a={}, b={}", g.a, g.b)));
            }
        }
        Ok(())
    }

    /// sha256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Aggregated statistics at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub k: u64,
    pub mean_r2: f64,
    pub stderr_r2: f64,
    pub mean_dist2: Option<f64>,
    pub stderr_dist2: Option<f64>,
    pub mean_dgap: Option<f64>,
    pub stderr_dgap: Option<f64>,
    /// Oracle calls spent to reach `x^k`.
    pub cum_calls: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub k_lo: u64,
    pub k_hi: u64,
    pub points: usize,
    pub slope: f64,
    pub intercept: f64,
}

/// Theoretical bound evaluated with the run's own moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantsCheck {
    pub report: ConstantsReport,
    pub comparison: BoundComparison,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub config_hash: String,
    pub problem: String,
    pub dim: usize,
    pub blocks: Vec<usize>,
    pub coordination: Coordination,
    pub replications: u64,
    pub max_iterations: u64,
    /// Merits computed through a batch-mean estimate of `T`.
    pub estimated_merits: bool,
    /// Replications that stopped at the residual floor; their last row is
    /// carried forward.
    pub stopped_early: u64,
    /// Every replication's call counts equal the schedule sum.
    pub accounting_ok: bool,
    pub epsilon: Option<f64>,
    /// First `k` with `mean_r2 <= epsilon`.
    pub k_eps: Option<u64>,
    /// `epsilon` was given but not reached.
    pub non_convergence: bool,
    pub fit: Option<RateFit>,
    pub constants: Option<ConstantsCheck>,
    pub constants_note: Option<String>,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentResult {
    pub fn mean_r2(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_r2).collect()
    }

    pub fn mean_dist2(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.mean_dist2).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "k",
            "mean_r2",
            "stderr_r2",
            "mean_dist2",
            "stderr_dist2",
            "mean_dgap",
            "stderr_dgap",
            "cum_calls",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                format!("{:e}", r.mean_r2),
                format!("{:e}", r.stderr_r2),
                opt(r.mean_dist2),
                opt(r.stderr_dist2),
                opt(r.mean_dgap),
                opt(r.stderr_dgap),
                r.cum_calls.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        let f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

/// `Nk`-driven call counts: `cum[k] = sum_{j<k} sum_i 2 N_{j,i}` under
/// distributed sampling, `sum_{j<k} 2 N_j` under centralized sampling.
pub fn schedule_calls(schedule: &SampleSchedule, coordination: Coordination, m: usize, k_max: u64) -> Result<Vec<u64>> {
    let mut out = Vec::with_capacity(k_max as usize + 1);
    let mut acc = 0u64;
    out.push(0);
    for k in 0..k_max {
        acc += match coordination {
            Coordination::Centralized => 2 * schedule.agent(0)?.size(k),
            Coordination::Distributed => 2 * schedule.sizes(m, k)?.iter().sum::<u64>(),
        };
        out.push(acc);
    }
    Ok(out)
}

struct RepOutput {
    r2: Vec<f64>,
    dist2: Option<Vec<f64>>,
    dgap: Option<Vec<f64>>,
    calls: Vec<u64>,
    stopped_early: bool,
    trace: Option<RunTrace>,
}

fn replicate(
    problem: &ProblemInstance,
    config: &ExperimentConfig,
    t: &dyn MeanOperator,
    rep: u64,
) -> Result<RepOutput> {
    let mut solver = config.solver.clone();
    solver.diagnostics.record_merits = false;
    let trace = run(problem, &solver, rep)?;
    let rows = config.solver.max_iterations as usize + 1;
    let track_dist = config.merits.distance && !matches!(problem.solutions, SolutionSet::Unknown);
    let mut r2 = Vec::with_capacity(rows);
    let mut dist2 = track_dist.then(|| Vec::with_capacity(rows));
    let mut dgap = config.merits.dgap.map(|_| Vec::with_capacity(rows));
    let mut calls = Vec::with_capacity(rows);
    for rec in &trace.records {
        let tx = t.eval(&rec.x);
        let alpha = config
            .merits
            .residual_alpha
            .unwrap_or_else(|| config.solver.stepsize.at(rec.k));
        r2.push(residual_sq_from(&problem.set, &rec.x, &tx, alpha)?);
        if let Some(d) = dist2.as_mut() {
            d.push(distance_sq_to_solutions(problem, &rec.x)?);
        }
        if let (Some(g), Some(p)) = (dgap.as_mut(), config.merits.dgap) {
            g.push(d_gap(t, &problem.set, &rec.x, p.a, p.b)?);
        }
        calls.push(rec.cum_calls);
    }
    // a run stopped at the residual floor stays at its last iterate
    while r2.len() < rows {
        let last = r2.len() - 1;
        r2.push(r2[last]);
        if let Some(d) = dist2.as_mut() {
            d.push(d[last]);
        }
        if let Some(g) = dgap.as_mut() {
            g.push(g[last]);
        }
    }
    Ok(RepOutput {
        r2,
        dist2,
        dgap,
        calls,
        stopped_early: trace.stopped_early,
        trace: config.outputs.traces.then_some(trace),
    })
}

fn mean_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut acc = MeanAccumulator::default();
    values.for_each(|v| acc.push(v));
    (acc.mean(), acc.stderr())
}

/// Runs every replication (in parallel when `threads > 1`) and aggregates
/// in replication order, so the result does not depend on scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with_traces(config).map(|(r, _)| r)
}

/// As [`run_experiment`], also returning the traces when `outputs.traces` is set.
pub fn run_experiment_with_traces(config: &ExperimentConfig) -> Result<(ExperimentResult, Vec<RunTrace>)> {
    config.check()?;
    let problem = config.problem.build_with_blocks(config.blocks.as_deref())?;
    validate(&problem, &config.solver)?;
    let (t, estimated) = mean_or_estimate(&problem, config.solver.master_seed);

    let work = |rep: u64| replicate(&problem, config, t.as_ref(), rep);
    let outputs: Vec<RepOutput> = match config.threads {
        Some(1) => (0..config.replications).map(work).collect::<Result<_>>()?,
        threads => {
            let mut b = rayon::ThreadPoolBuilder::new();
            if let Some(n) = threads {
                b = b.num_threads(n);
            }
            let pool = b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| {
                (0..config.replications)
                    .into_par_iter()
                    .map(work)
                    .collect::<Result<_>>()
            })?
        }
    };

    let kmax = config.solver.max_iterations;
    let m = problem.num_blocks();
    let expected = schedule_calls(&config.solver.schedule, config.solver.coordination, m, kmax)?;
    let accounting_ok = outputs
        .iter()
        .all(|o| o.calls.iter().zip(&expected).all(|(a, b)| a == b));

    let mut rows = Vec::with_capacity(kmax as usize + 1);
    for (k, &cum_calls) in expected.iter().enumerate().take(kmax as usize + 1) {
        let (mean_r2, stderr_r2) = mean_se(outputs.iter().map(|o| o.r2[k]));
        let (mean_dist2, stderr_dist2) = match outputs[0].dist2 {
            Some(_) => {
                let (a, b) = mean_se(outputs.iter().map(|o| o.dist2.as_ref().unwrap()[k]));
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let (mean_dgap, stderr_dgap) = match outputs[0].dgap {
            Some(_) => {
                let (a, b) = mean_se(outputs.iter().map(|o| o.dgap.as_ref().unwrap()[k]));
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        rows.push(ExperimentRow {
            k: k as u64,
            mean_r2,
            stderr_r2,
            mean_dist2,
            stderr_dist2,
            mean_dgap,
            stderr_dgap,
            cum_calls,
        });
    }

    let k_eps = config
        .epsilon
        .and_then(|e| rows.iter().find(|r| r.mean_r2 <= e).map(|r| r.k));
    let window = config.fit_window();
    let fit = fit_rate(&rows, window);

    let mut result = ExperimentResult {
        schema_version: SCHEMA_VERSION,
        config_hash: config.hash(),
        problem: problem.name.clone(),
        dim: problem.dim,
        blocks: problem.blocks.clone(),
        coordination: config.solver.coordination,
        replications: config.replications,
        max_iterations: kmax,
        estimated_merits: estimated,
        stopped_early: outputs.iter().filter(|o| o.stopped_early).count() as u64,
        accounting_ok,
        epsilon: config.epsilon,
        k_eps,
        non_convergence: config.epsilon.is_some() && k_eps.is_none(),
        fit,
        constants: None,
        constants_note: None,
        rows,
    };
    match constants_check(&problem, config, &result) {
        Ok(c) => result.constants = Some(c),
        Err(e) => result.constants_note = Some(e.to_string()),
    }
    let traces = outputs.into_iter().filter_map(|o| o.trace).collect();
    Ok((result, traces))
}

/// Least-squares slope of `ln mean_r2` against `ln k` over the window.
pub fn fit_rate(rows: &[ExperimentRow], window: FitWindow) -> Option<RateFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.k >= window.k_lo.max(1) && r.k <= window.k_hi && r.mean_r2 > 0.0)
        .map(|r| ((r.k as f64).ln(), r.mean_r2.ln()))
        .unzip();
    let (slope, intercept) = linear_fit(&xs, &ys)?;
    Some(RateFit {
        k_lo: window.k_lo,
        k_hi: window.k_hi,
        points: xs.len(),
        slope,
        intercept,
    })
}

/// Constants inputs describing `problem` under `config`, with the moment
/// table taken from the aggregated run.
pub fn constants_inputs_for(
    problem: &ProblemInstance,
    config: &ExperimentConfig,
    result: &ExperimentResult,
) -> Result<ConstantsInputs> {
    let (variance, sigma) = match problem.variance {
        VarianceProfile::PointBased { sigma } => (VarianceKind::PointBased, sigma),
        VarianceProfile::Uniform { sigma } => (VarianceKind::UniformOnSet, sigma),
        VarianceProfile::None => {
            return Err(Error::InvalidInputs(
                "variance profile of the problem is unknown".into(),
            ))
        }
    };
    let moments = result
        .mean_dist2()
        .ok_or_else(|| Error::InvalidInputs("distance to solutions was not tracked".into()))?;
    let (_, alpha_hat) = config.solver.stepsize.bounds();
    let mut inputs = ConstantsInputs::new(problem.lipschitz, alpha_hat, sigma);
    inputs.variance = variance;
    inputs.c = config.constants.c;
    inputs.c2 = config.constants.c2;
    inputs.phi = config.constants.phi;
    inputs.distance = moments[0].sqrt();
    inputs.moments = Some(moments);
    match config.solver.coordination {
        // shared samples: the error behaves as for a single block
        Coordination::Centralized => {
            inputs.m = 1;
            inputs.schedule = SampleSchedule::new(vec![*config.solver.schedule.agent(0)?])?;
        }
        Coordination::Distributed => {
            inputs.m = problem.num_blocks();
            inputs.schedule = config.solver.schedule.clone();
        }
    }
    let mu_max = inputs.agents()?.iter().map(|a| a.mu).fold(0.0, f64::max);
    inputs.epsilon = config.epsilon.filter(|e| e * mu_max <= 1.0);
    Ok(inputs)
}

fn constants_check(
    problem: &ProblemInstance,
    config: &ExperimentConfig,
    result: &ExperimentResult,
) -> Result<ConstantsCheck> {
    let inputs = constants_inputs_for(problem, config, result)?;
    let report = rate_and_complexity_bounds(&inputs)?;
    let comparison = compare_rate(report.rate_constant(), &result.mean_r2(), config.fit_window().k_lo);
    Ok(ConstantsCheck { report, comparison })
}

/// Single run (replication 0) of the configured problem.
pub fn solve(config: &ExperimentConfig) -> Result<RunTrace> {
    config.check()?;
    let problem = config.problem.build_with_blocks(config.blocks.as_deref())?;
    validate(&problem, &config.solver)?;
    run(&problem, &config.solver, 0)
}

/// Runs the experiment and writes its outputs when a directory is configured.
pub fn run_and_save(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let (result, traces) = run_experiment_with_traces(config)?;
    if let Some(dir) = &config.outputs.dir {
        result.save(dir, &config.outputs.stem)?;
        for t in &traces {
            t.save(dir, &format!("{}_rep{}", config.outputs.stem, t.replication))?;
        }
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Probes

fn default_grid() -> Vec<u64> {
    vec![1, 4, 16, 64, 256]
}
fn default_decay_reps() -> u64 {
    20_000
}
fn default_mart_reps() -> u64 {
    10_000
}
fn default_horizons() -> Vec<usize> {
    vec![60, 120]
}
fn default_var_reps() -> u64 {
    5000
}
fn default_audit_reps() -> u64 {
    50
}
fn default_audit_tol() -> f64 {
    1e-9
}
fn default_pm_samples() -> usize {
    10_000
}
fn default_tolerance() -> f64 {
    0.2
}
fn default_probe_schedule() -> SampleSchedule {
    SampleSchedule::single(1.0, 3.0, 0.0, 1.0).expect("valid default schedule")
}

/// Probe kinds and their parameters. CSV columns per kind:
///
/// - `error_decay`: `N, mean_sq_error, stderr, product`
/// - `martingale`: `replications, mean, stderr`
/// - `variance_scaling`: `K, var_zK_emp, var_zK_exact, var_zbar_emp, var_zbar_exact, var_zK_stderr, var_zbar_stderr`
/// - `fejer_audit`: `replication, steps, violations, max_relative_violation, replay_mismatches`
/// - `pm_check`: `pairs, tested, violations, worst`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeSpec {
    ErrorDecay {
        problem: ProblemSpec,
        /// Evaluation point; defaults to the problem's start.
        #[serde(default)]
        x: Option<Vec<f64>>,
        #[serde(default = "default_grid")]
        grid: Vec<u64>,
        #[serde(default = "default_decay_reps")]
        replications: u64,
        #[serde(default)]
        seed: u64,
        /// Expected value of `N E||eps_N||^2`; defaults to `sigma^2` of a
        /// uniform-variance problem.
        #[serde(default)]
        reference: Option<f64>,
        /// Relative tolerance on the products.
        #[serde(default = "default_tolerance")]
        tolerance: f64,
    },
    Martingale {
        problem: ProblemSpec,
        alpha: f64,
        #[serde(default = "default_probe_schedule")]
        schedule: SampleSchedule,
        #[serde(default)]
        x: Option<Vec<f64>>,
        #[serde(default = "default_mart_reps")]
        replications: u64,
        #[serde(default)]
        seed: u64,
    },
    VarianceScaling {
        #[serde(default = "default_horizons")]
        horizons: Vec<usize>,
        sigma: f64,
        #[serde(default = "one")]
        lipschitz: f64,
        #[serde(default = "default_var_reps")]
        replications: u64,
        #[serde(default)]
        seed: u64,
    },
    FejerAudit {
        problem: ProblemSpec,
        #[serde(default)]
        blocks: Option<Vec<usize>>,
        solver: SolverConfig,
        #[serde(default = "default_audit_reps")]
        replications: u64,
        #[serde(default = "default_audit_tol")]
        tolerance: f64,
    },
    PmCheck {
        problem: ProblemSpec,
        #[serde(default = "default_pm_samples")]
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl ProbeSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ProbeSpec::ErrorDecay { .. } => "error_decay",
            ProbeSpec::Martingale { .. } => "martingale",
            ProbeSpec::VarianceScaling { .. } => "variance_scaling",
            ProbeSpec::FejerAudit { .. } => "fejer_audit",
            ProbeSpec::PmCheck { .. } => "pm_check",
        }
    }

    pub fn set_seed(&mut self, value: u64) {
        match self {
            ProbeSpec::ErrorDecay { seed, .. }
            | ProbeSpec::Martingale { seed, .. }
            | ProbeSpec::VarianceScaling { seed, .. }
            | ProbeSpec::PmCheck { seed, .. } => *seed = value,
            ProbeSpec::FejerAudit { solver, .. } => solver.master_seed = value,
        }
    }

    /// Sets the replication count; for `pm_check` this is the sample count.
    pub fn set_replications(&mut self, value: u64) {
        match self {
            ProbeSpec::ErrorDecay { replications, .. }
            | ProbeSpec::Martingale { replications, .. }
            | ProbeSpec::VarianceScaling { replications, .. }
            | ProbeSpec::FejerAudit { replications, .. } => *replications = value,
            ProbeSpec::PmCheck { samples, .. } => *samples = value as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub version: u32,
    pub probe: ProbeSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
}

impl ProbeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if c.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Verdict of a probe; `csv` holds the table written next to the JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kind: String,
    pub config_hash: String,
    pub passed: bool,
    pub detail: serde_json::Value,
    #[serde(skip)]
    pub csv: String,
}

impl ProbeResult {
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), &self.csv)?;
        let f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

fn csv_of<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct MartingaleRow {
    replications: u64,
    mean: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct AuditRow {
    replication: u64,
    steps: usize,
    violations: usize,
    max_relative_violation: f64,
    replay_mismatches: usize,
}

#[derive(Serialize)]
struct PmRow {
    pairs: usize,
    tested: usize,
    violations: usize,
    worst: f64,
}

/// A fixed solution used as `x*` by the audits.
fn reference_solution(problem: &ProblemInstance, near: &[f64]) -> Result<Vec<f64>> {
    match &problem.solutions {
        SolutionSet::Points(p) if !p.is_empty() => Ok(p[0].clone()),
        SolutionSet::Set(s) => s.project(near),
        _ => Err(Error::NoKnownSolutions),
    }
}

pub fn probe(spec: &ProbeSpec) -> Result<ProbeResult> {
    let hash = config_hash(spec);
    let kind = spec.kind().to_string();
    match spec {
        ProbeSpec::ErrorDecay {
            problem,
            x,
            grid,
            replications,
            seed,
            reference,
            tolerance,
        } => {
            let p = problem.build()?;
            let x = x.clone().unwrap_or_else(|| p.start.clone());
            let reference = match (reference, p.variance) {
                (Some(r), _) => *r,
                (None, VarianceProfile::Uniform { sigma }) => sigma * sigma,
                _ => {
                    return Err(Error::Config(
                        "error_decay needs a reference value for non-uniform variance".into(),
                    ))
                }
            };
            let rows = error_decay_probe(&p, &x, grid, *replications, *seed)?;
            let within = |v: f64| {
                if reference == 0.0 {
                    v == 0.0
                } else {
                    (v / reference - 1.0).abs() <= *tolerance
                }
            };
            let passed = rows.iter().all(|r| within(r.product));
            Ok(ProbeResult {
                kind,
                config_hash: hash,
                passed,
                detail: serde_json::json!({ "reference": reference, "tolerance": tolerance, "rows": rows }),
                csv: csv_of(&rows)?,
            })
        }
        ProbeSpec::Martingale {
            problem,
            alpha,
            schedule,
            x,
            replications,
            seed,
        } => {
            let p = problem.build()?;
            let x = x.clone().unwrap_or_else(|| p.start.clone());
            let cfg = SolverConfig::new(*alpha, schedule.clone(), 1, *seed);
            validate(&p, &cfg)?;
            let r = martingale_probe(&p, &cfg, &x, *replications)?;
            Ok(ProbeResult {
                kind,
                config_hash: hash,
                passed: r.passed,
                csv: csv_of(&[MartingaleRow {
                    replications: r.replications,
                    mean: r.mean,
                    stderr: r.stderr,
                }])?,
                detail: serde_json::to_value(&r)?,
            })
        }
        ProbeSpec::VarianceScaling {
            horizons,
            sigma,
            lipschitz,
            replications,
            seed,
        } => {
            let rows = variance_scaling_probe(horizons, *sigma, *lipschitz, *replications, *seed)?;
            let passed = rows.iter().all(|r| r.within_tolerance());
            let ratios: Vec<f64> = rows.windows(2).map(|w| w[0].var_zbar_emp / w[1].var_zbar_emp).collect();
            let mut buf = Vec::new();
            write_variance_csv(&rows, &mut buf)?;
            Ok(ProbeResult {
                kind,
                config_hash: hash,
                passed,
                detail: serde_json::json!({ "rows": rows, "zbar_variance_ratios": ratios }),
                csv: String::from_utf8(buf).expect("csv output is utf-8"),
            })
        }
        ProbeSpec::FejerAudit {
            problem,
            blocks,
            solver,
            replications,
            tolerance,
        } => {
            let p = problem.build_with_blocks(blocks.as_deref())?;
            let mut cfg = solver.clone();
            cfg.diagnostics.record_errors = true;
            validate(&p, &cfg)?;
            let start = cfg.initial_point.clone().unwrap_or_else(|| p.start.clone());
            let x_star = reference_solution(&p, &start)?;
            let rows: Vec<AuditRow> = (0..*replications)
                .map(|rep| {
                    let t = run(&p, &cfg, rep)?;
                    let a = fejer_audit_with_tolerance(&t, &x_star, &p, &cfg, *tolerance)?;
                    Ok(AuditRow {
                        replication: rep,
                        steps: a.steps,
                        violations: a.violations,
                        max_relative_violation: a.max_relative_violation,
                        replay_mismatches: a.replay_mismatches,
                    })
                })
                .collect::<Result<_>>()?;
            let violations: usize = rows.iter().map(|r| r.violations).sum();
            let mismatches: usize = rows.iter().map(|r| r.replay_mismatches).sum();
            let worst = rows
                .iter()
                .map(|r| r.max_relative_violation)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(ProbeResult {
                kind,
                config_hash: hash,
                passed: violations == 0 && mismatches == 0,
                detail: serde_json::json!({
                    "replications": replications,
                    "steps": rows.iter().map(|r| r.steps).sum::<usize>(),
                    "violations": violations,
                    "replay_mismatches": mismatches,
                    "max_relative_violation": worst,
                    "tolerance": tolerance,
                }),
                csv: csv_of(&rows)?,
            })
        }
        ProbeSpec::PmCheck { problem, samples, seed } => {
            let p = problem.build()?;
            let t = p.mean.clone().ok_or(Error::NoMeanOperator)?;
            let r = check_pseudo_monotone(t.as_ref(), &p.set, *samples, *seed)?;
            Ok(ProbeResult {
                kind,
                config_hash: hash,
                passed: r.passed,
                csv: csv_of(&[PmRow {
                    pairs: r.pairs,
                    tested: r.tested,
                    violations: r.violations,
                    worst: r.worst,
                }])?,
                detail: serde_json::to_value(&r)?,
            })
        }
    }
}

/// Runs a probe and writes its outputs when a directory is configured.
pub fn probe_and_save(config: &ProbeConfig) -> Result<ProbeResult> {
    let r = probe(&config.probe)?;
    if let Some(dir) = &config.outputs.dir {
        r.save(dir, &config.outputs.stem)?;
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Constants

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantsOutput {
    pub report: ConstantsReport,
    /// Present when a run summary was supplied.
    pub comparison: Option<BoundComparison>,
}

/// Parses constants inputs, reporting the offending line and field.
pub fn parse_constants_inputs(text: &str) -> Result<ConstantsInputs> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Evaluates the constants report. With a run summary (an
/// [`ExperimentResult`]), its mean distances fill in the moment table when
/// none was given, and its mean residuals are checked against the rate bound.
pub fn constants_cmd(inputs: &ConstantsInputs, summary: Option<&ExperimentResult>) -> Result<ConstantsOutput> {
    let mut inputs = inputs.clone();
    if let Some(s) = summary {
        if inputs.j.is_none() && inputs.moments.is_none() {
            inputs.moments = s.mean_dist2();
        }
    }
    let report = rate_and_complexity_bounds(&inputs)?;
    let comparison = summary.map(|s| {
        let k_min = s.fit.map_or(1, |f| f.k_lo);
        compare_rate(report.rate_constant(), &s.mean_r2(), k_min)
    });
    Ok(ConstantsOutput { report, comparison })
}

/// Loads the inputs (and optional summary) from files.
pub fn constants_from_files(inputs: &Path, summary: Option<&Path>) -> Result<ConstantsOutput> {
    let text = std::fs::read_to_string(inputs)?;
    let parsed = parse_constants_inputs(&text).map_err(|e| Error::Config(format!("{}: {e}", inputs.display())))?;
    let summary = match summary {
        Some(p) => {
            let t = std::fs::read_to_string(p)?;
            Some(
                serde_json::from_str::<ExperimentResult>(&t)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    constants_cmd(&parsed, summary.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::AgentSchedule;

    fn strongly(iters: u64, reps: u64) -> ExperimentConfig {
        let p = ProblemSpec::StronglyMonotone(StronglyMonotoneSpec::default());
        let l = p.build().unwrap().lipschitz;
        let s = SolverConfig::new(0.25 / l, SampleSchedule::single(1.0, 3.0, 0.0, 1.0).unwrap(), iters, 11);
        ExperimentConfig::new(p, s, reps)
    }

    #[test]
    fn schema_round_trip_and_unknown_keys() {
        let c = strongly(20, 2);
        let text = serde_json::to_string(&c).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(matches!(
            ExperimentConfig::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));
        v.as_object_mut().unwrap().remove("bogus");
        v["version"] = serde_json::json!(2);
        assert!(matches!(
            ExperimentConfig::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fit_window_checked() {
        let mut c = strongly(20, 2);
        c.fit_window = Some(FitWindow { k_lo: 10, k_hi: 30 });
        assert!(c.check().is_err());
        c.fit_window = Some(FitWindow { k_lo: 10, k_hi: 10 });
        assert!(c.check().is_err());
    }

    #[test]
    fn calls_column_matches_schedule_sum() {
        let c = strongly(10, 1);
        let r = run_experiment(&c).unwrap();
        let s = AgentSchedule::new(1.0, 3.0, 0.0, 1.0).unwrap();
        let want: u64 = (0..10u64)
            .map(|j| 2 * ((j as f64 + 3.0) * (j as f64 + 3.0).ln().powi(2)).ceil() as u64)
            .sum();
        assert_eq!(r.rows[10].cum_calls, want);
        assert_eq!(want, (0..10).map(|j| 2 * s.size(j)).sum::<u64>());
        assert!(r.accounting_ok);
    }

    #[test]
    fn zero_variance_single_replication_is_the_trace() {
        let spec = StronglyMonotoneSpec {
            mult_noise: 0.0,
            add_noise: 0.0,
            ..Default::default()
        };
        let mut c = strongly(60, 1);
        c.problem = ProblemSpec::StronglyMonotone(spec);
        let r = run_experiment(&c).unwrap();
        let t = solve(&c).unwrap();
        for (row, rec) in r.rows.iter().zip(&t.records) {
            assert_eq!(Some(row.mean_r2), rec.r2);
            assert_eq!(row.stderr_r2, 0.0);
        }
        assert!(r.fit.unwrap().slope < -1.0);
    }

    #[test]
    fn k_eps_is_monotone_in_eps() {
        let c = strongly(40, 3);
        let r = run_experiment(&c).unwrap();
        let first = |e: f64| r.rows.iter().find(|x| x.mean_r2 <= e).map(|x| x.k);
        let mut prev = 0;
        for e in [1.0, 1e-1, 1e-2, 1e-3] {
            if let Some(k) = first(e) {
                assert!(k >= prev);
                prev = k;
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let mut c = strongly(15, 6);
        c.threads = Some(1);
        let a = run_experiment(&c).unwrap();
        c.threads = Some(3);
        let b = run_experiment(&c).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn probes_dispatch() {
        let v = probe(&ProbeSpec::VarianceScaling {
            horizons: vec![10, 20],
            sigma: 0.0,
            lipschitz: 1.0,
            replications: 20,
            seed: 0,
        })
        .unwrap();
        assert!(v.passed);
        assert!(v.csv.starts_with("K,var_zK_emp"));
        let pm = probe(&ProbeSpec::PmCheck {
            problem: ProblemSpec::NegatedIdentity { n: 3, sigma: 0.0 },
            samples: 300,
            seed: 1,
        })
        .unwrap();
        assert!(!pm.passed);
        assert!(pm.detail["witness"].is_array());
    }

    #[test]
    fn constants_from_minimal_inputs() {
        let i =
            parse_constants_inputs(r#"{"lipschitz": 1.0, "alpha_hat": 0.2, "sigma": 0.0, "distance": 2.0}"#).unwrap();
        let out = constants_cmd(&i, None).unwrap();
        let rho = 1.0 - 6.0 * 0.04;
        assert!((out.report.q_inf - 2.0 / rho * 4.0).abs() < 1e-12);
        assert_eq!(out.report.d, 0.0);
        let e = parse_constants_inputs(r#"{"lipschitz": 1.0, "alpha_hat": 0.2, "sigma": 0.0, "phi": 0.7}"#).unwrap();
        let msg = constants_cmd(&e, None).unwrap_err().to_string();
        assert!(msg.contains("(0, 0.618"), "{msg}");
        let bad = parse_constants_inputs("{\n  \"lipschitz\": 1.0,\n  \"alpah_hat\": 0.2\n}").unwrap_err();
        assert!(bad.to_string().contains("line 3"), "{bad}");
    }
}
