//! The variance-reduced stochastic extragradient iteration.
//!
//! One step at `x^k` with stepsize `alpha` and batch sizes `N_{k,i}`:
//!
//! ```text
//! z^k_i     = P_i[x^k_i - alpha * mean_j F_i(xi_j,  x^k)]
//! x^{k+1}_i = P_i[x^k_i - alpha * mean_j F_i(eta_j, z^k)]
//! ```
//!
//! Under centralized sampling all blocks share one draw set per stage (the
//! stream of block 0), which makes a blocked run identical to the
//! monolithic one. Under distributed sampling block `i` reads its own
//! stream and batch size.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merit::{distance_sq_to_solutions, residual_sq_from};
use crate::model::{Coordination, ProblemInstance, SolutionSet, SolverConfig};
use crate::rng::{RngStreamKey, Stage};
use crate::sampling::oracle_sum;
use crate::vecops::{dot, norm, step as xstep, sub};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtragradientState {
    pub k: u64,
    pub x: Vec<f64>,
    pub calls: u64,
    pub replication: u64,
}

impl ExtragradientState {
    /// `x^0` is the configured initial point (projected onto `X`) or the
    /// problem's default start.
    pub fn initial(problem: &ProblemInstance, config: &SolverConfig, replication: u64) -> Result<Self> {
        let x0 = config.initial_point.as_ref().unwrap_or(&problem.start);
        if x0.len() != problem.dim {
            return Err(Error::DimensionMismatch {
                expected: problem.dim,
                got: x0.len(),
            });
        }
        Ok(Self {
            k: 0,
            x: problem.set.project(x0)?,
            calls: 0,
            replication,
        })
    }

    pub fn at(x: Vec<f64>, k: u64, replication: u64) -> Self {
        Self {
            k,
            x,
            calls: 0,
            replication,
        }
    }
}

/// Everything produced by one step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub next: ExtragradientState,
    pub z: Vec<f64>,
    pub alpha: f64,
    /// `N_{k,i}` per block.
    pub sizes: Vec<u64>,
    /// `eps1 = mean at x^k - T(x^k)`, when requested and `T` is known.
    pub eps1: Option<Vec<f64>>,
    /// `eps2 = mean at z^k - T(z^k)`.
    pub eps2: Option<Vec<f64>>,
}

fn stage_key(config: &SolverConfig, rep: u64, k: u64, stage: Stage, block: usize) -> RngStreamKey {
    RngStreamKey::new(config.master_seed, rep, k, stage).with_block(block as u32)
}

/// Empirical operator at `x` for every block: one shared draw set
/// (centralized) or one per block (distributed). Returns the assembled
/// vector and the calls consumed.
fn sampled_operator(
    problem: &ProblemInstance,
    config: &SolverConfig,
    state: &ExtragradientState,
    x: &[f64],
    stage: Stage,
    sizes: &[u64],
) -> Result<(Vec<f64>, u64)> {
    let n = problem.dim;
    let rep = state.replication;
    match config.coordination {
        Coordination::Centralized => {
            let big_n = sizes[0];
            let mut acc = vec![0.0; n];
            oracle_sum(problem, x, big_n, &stage_key(config, rep, state.k, stage, 0), &mut acc)?;
            let inv = 1.0 / big_n as f64;
            acc.iter_mut().for_each(|v| *v *= inv);
            Ok((acc, big_n))
        }
        Coordination::Distributed => {
            let mut out = vec![0.0; n];
            let mut buf = vec![0.0; n];
            let mut calls = 0;
            for (i, range) in problem.block_ranges().into_iter().enumerate() {
                let ni = sizes[i];
                buf.iter_mut().for_each(|v| *v = 0.0);
                oracle_sum(problem, x, ni, &stage_key(config, rep, state.k, stage, i), &mut buf)?;
                let inv = 1.0 / ni as f64;
                for j in range {
                    out[j] = buf[j] * inv;
                }
                calls += ni;
            }
            Ok((out, calls))
        }
    }
}

fn check_shape(problem: &ProblemInstance, config: &SolverConfig, sizes: &[u64]) -> Result<()> {
    if config.coordination == Coordination::Centralized && sizes.iter().any(|s| *s != sizes[0]) {
        return Err(Error::CoordinationMismatch(format!(
            "centralized sampling with unequal batch sizes {sizes:?}"
        )));
    }
    if config.coordination == Coordination::Distributed
        && config.schedule.num_agents() != 1
        && config.schedule.num_agents() != problem.num_blocks()
    {
        return Err(Error::CoordinationMismatch(format!(
            "{} schedules for {} blocks",
            config.schedule.num_agents(),
            problem.num_blocks()
        )));
    }
    Ok(())
}

fn advance(
    state: &ExtragradientState,
    problem: &ProblemInstance,
    config: &SolverConfig,
    with_errors: bool,
) -> Result<StepResult> {
    let m = problem.num_blocks();
    let sizes = config.schedule.sizes(m, state.k)?;
    check_shape(problem, config, &sizes)?;
    let alpha = config.stepsize.at(state.k);
    let x = &state.x;

    let (g1, c1) = sampled_operator(problem, config, state, x, Stage::Xi, &sizes)?;
    let z = problem.set.project(&xstep(x, alpha, &g1))?;
    let (g2, c2) = sampled_operator(problem, config, state, &z, Stage::Eta, &sizes)?;
    let x_next = problem.set.project(&xstep(x, alpha, &g2))?;

    let (eps1, eps2) = match (&problem.mean, with_errors) {
        (Some(t), true) => (Some(sub(&g1, &t.eval(x))), Some(sub(&g2, &t.eval(&z)))),
        _ => (None, None),
    };
    Ok(StepResult {
        next: ExtragradientState {
            k: state.k + 1,
            x: x_next,
            calls: state.calls + c1 + c2,
            replication: state.replication,
        },
        z,
        alpha,
        sizes,
        eps1,
        eps2,
    })
}

/// One step of the monolithic method (`m = 1`, or any `m` under
/// centralized sampling).
pub fn step(state: &ExtragradientState, problem: &ProblemInstance, config: &SolverConfig) -> Result<StepResult> {
    if problem.num_blocks() > 1 && config.coordination != Coordination::Centralized {
        return Err(Error::CoordinationMismatch(
            "the monolithic step needs one block or centralized sampling".into(),
        ));
    }
    advance(state, problem, config, config.diagnostics.record_errors)
}

/// One step of the blockwise method under the configured coordination.
pub fn step_cartesian(
    state: &ExtragradientState,
    problem: &ProblemInstance,
    config: &SolverConfig,
) -> Result<StepResult> {
    advance(state, problem, config, config.diagnostics.record_errors)
}

/// Same as [`step_cartesian`] but always computes the realized errors.
pub fn step_with_errors(
    state: &ExtragradientState,
    problem: &ProblemInstance,
    config: &SolverConfig,
) -> Result<StepResult> {
    advance(state, problem, config, true)
}

/// One row of a trace. Row `k` holds `x^k` and the quantities of the step
/// taken from it; the last row holds only the final iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: u64,
    pub x: Vec<f64>,
    pub z: Option<Vec<f64>>,
    pub sizes: Vec<u64>,
    pub eps1_norm: Option<f64>,
    pub eps2_norm: Option<f64>,
    /// `r_alpha(x^k)^2` with `alpha = alpha_k`.
    pub r2: Option<f64>,
    pub dist2: Option<f64>,
    /// `A_k`
    pub a: f64,
    /// `M_k(x*)` for each tracked solution.
    pub m: Vec<f64>,
    /// Oracle calls spent to reach `x^k`.
    pub cum_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub problem: String,
    pub master_seed: u64,
    pub replication: u64,
    pub record_errors: bool,
    /// Solutions for which `M_k` is tracked.
    pub tracked: Vec<Vec<f64>>,
    pub stopped_early: bool,
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSummary {
    pub problem: String,
    pub master_seed: u64,
    pub replication: u64,
    pub iterations: u64,
    pub stopped_early: bool,
    pub final_r2: Option<f64>,
    pub final_dist2: Option<f64>,
    pub cum_calls: u64,
    pub final_x: Vec<f64>,
}

fn rho(lipschitz: f64, alpha: f64) -> f64 {
    1.0 - 6.0 * lipschitz * lipschitz * alpha * alpha
}

/// Runs `max_iterations` steps from `x^0` (fewer if the residual reaches the
/// configured floor). Deterministic in `(master_seed, replication)`.
pub fn run(problem: &ProblemInstance, config: &SolverConfig, replication: u64) -> Result<RunTrace> {
    let diag = &config.diagnostics;
    let tracked: Vec<Vec<f64>> = if diag.record_errors {
        problem.solutions.points().to_vec()
    } else {
        Vec::new()
    };
    let has_dist = !matches!(problem.solutions, SolutionSet::Unknown);
    let mut state = ExtragradientState::initial(problem, config, replication)?;
    let mut records: Vec<IterationRecord> = Vec::with_capacity(config.max_iterations as usize + 1);
    let mut a = 0.0;
    let mut ms = vec![0.0; tracked.len()];
    let stopped_early;

    let merits = |x: &[f64], k: u64| -> Result<(Option<f64>, Option<f64>)> {
        let r2 = match &problem.mean {
            Some(t) => Some(residual_sq_from(&problem.set, x, &t.eval(x), config.stepsize.at(k))?),
            None => None,
        };
        let d2 = if diag.record_merits && has_dist {
            Some(distance_sq_to_solutions(problem, x)?)
        } else {
            None
        };
        Ok((r2, d2))
    };

    loop {
        let (r2, d2) = merits(&state.x, state.k)?;
        let mut rec = IterationRecord {
            k: state.k,
            x: state.x.clone(),
            z: None,
            sizes: Vec::new(),
            eps1_norm: None,
            eps2_norm: None,
            r2: if diag.record_merits { r2 } else { None },
            dist2: d2,
            a,
            m: ms.clone(),
            cum_calls: state.calls,
        };
        let floor_hit = r2.is_some_and(|r| r <= config.residual_floor);
        if state.k >= config.max_iterations || floor_hit {
            stopped_early = floor_hit && state.k < config.max_iterations;
            records.push(rec);
            break;
        }
        let res = advance(&state, problem, config, diag.record_errors)?;
        if let (Some(e1), Some(e2)) = (&res.eps1, &res.eps2) {
            let al = res.alpha;
            let rk = rho(problem.lipschitz, al);
            a += (8.0 + rk) * al * al * dot(e1, e1) + 8.0 * al * al * dot(e2, e2);
            for (mv, xs) in ms.iter_mut().zip(&tracked) {
                *mv += 2.0 * al * dot(&sub(xs, &res.z), e2);
            }
            rec.eps1_norm = Some(norm(e1));
            rec.eps2_norm = Some(norm(e2));
        }
        rec.z = Some(res.z);
        rec.sizes = res.sizes;
        records.push(rec);
        state = res.next;
    }

    if let Some(w) = diag.z_window {
        let keep_from = records.len().saturating_sub(w + 1);
        for r in &mut records[..keep_from] {
            r.z = None;
        }
    }
    Ok(RunTrace {
        problem: problem.name.clone(),
        master_seed: config.master_seed,
        replication,
        record_errors: diag.record_errors,
        tracked,
        stopped_early,
        records,
    })
}

/// Recomputes the step taken from row `k` of `trace` (bit-identical to the
/// original run), including the realized errors.
pub fn replay_step(trace: &RunTrace, k: usize, problem: &ProblemInstance, config: &SolverConfig) -> Result<StepResult> {
    let rec = trace
        .records
        .get(k)
        .ok_or_else(|| Error::InvalidParameters(format!("trace has no row {k}")))?;
    let state = ExtragradientState {
        k: rec.k,
        x: rec.x.clone(),
        calls: rec.cum_calls,
        replication: trace.replication,
    };
    step_with_errors(&state, problem, config)
}

impl RunTrace {
    pub fn final_record(&self) -> &IterationRecord {
        self.records.last().expect("a trace always has its initial row")
    }

    pub fn summary(&self) -> TraceSummary {
        let last = self.final_record();
        TraceSummary {
            problem: self.problem.clone(),
            master_seed: self.master_seed,
            replication: self.replication,
            iterations: last.k,
            stopped_early: self.stopped_early,
            final_r2: last.r2,
            final_dist2: last.dist2,
            cum_calls: last.cum_calls,
            final_x: last.x.clone(),
        }
    }

    /// CSV with columns `k, r2, dist2, eps1_norm, eps2_norm, A, M_0..M_s, cum_calls`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "k".to_string(),
            "r2".into(),
            "dist2".into(),
            "eps1_norm".into(),
            "eps2_norm".into(),
            "A".into(),
        ];
        header.extend((0..self.tracked.len()).map(|i| format!("M_{i}")));
        header.push("cum_calls".into());
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![
                r.k.to_string(),
                opt(r.r2),
                opt(r.dist2),
                opt(r.eps1_norm),
                opt(r.eps2_norm),
                format!("{:e}", r.a),
            ];
            row.extend(r.m.iter().map(|v| format!("{v:e}")));
            row.push(r.cum_calls.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        let f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        serde_json::to_writer_pretty(f, &self.summary())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Diagnostics;
    use crate::problems;
    use crate::projection::FeasibleSet;
    use crate::sampling::{AgentSchedule, SampleSchedule};
    use approx::assert_abs_diff_eq;

    fn sched() -> SampleSchedule {
        SampleSchedule::single(1.0, 3.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn two_step_arithmetic() {
        let p = problems::identity_problem(1, 1.0, FeasibleSet::WholeSpace);
        let cfg = SolverConfig::new(0.2, sched(), 1, 0);
        let s = ExtragradientState::at(vec![1.0], 0, 0);
        let r = step(&s, &p, &cfg).unwrap();
        assert_abs_diff_eq!(r.z[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(r.next.x[0], 0.84, epsilon = 1e-15);
        assert_eq!(r.next.calls, 2 * 4);
    }

    #[test]
    fn fixed_point_stays() {
        let p = problems::identity_problem(2, 1.0, FeasibleSet::NonnegativeOrthant);
        let cfg = SolverConfig::new(0.2, sched(), 1, 0);
        let r = step(&ExtragradientState::at(vec![0.0, 0.0], 0, 0), &p, &cfg).unwrap();
        assert_eq!(r.next.x, vec![0.0, 0.0]);
    }

    #[test]
    fn distributed_call_accounting() {
        let p = problems::identity_problem(2, 1.0, FeasibleSet::WholeSpace)
            .with_blocks(vec![1, 1])
            .unwrap();
        // N_{0,1} = ceil(theta * 3 ln 3^2) with thetas chosen to give 4 and 8
        let s = SampleSchedule::new(vec![
            AgentSchedule::new(1.0, 3.0, 0.0, 1.0).unwrap(),
            AgentSchedule::new(2.0, 3.0, 0.0, 1.0).unwrap(),
        ])
        .unwrap();
        assert_eq!(s.sizes(2, 0).unwrap(), vec![4, 8]);
        let mut cfg = SolverConfig::new(0.2, s, 1, 0);
        cfg.coordination = Coordination::Distributed;
        let r = step_cartesian(&ExtragradientState::at(vec![1.0, 1.0], 0, 0), &p, &cfg).unwrap();
        assert_eq!(r.next.calls, 24);
        cfg.coordination = Coordination::Centralized;
        assert!(matches!(
            step_cartesian(&ExtragradientState::at(vec![1.0, 1.0], 0, 0), &p, &cfg),
            Err(Error::CoordinationMismatch(_))
        ));
    }

    #[test]
    fn run_is_deterministic_and_feasible() {
        let p = problems::scaled_monotone(3, 1, 0.5).unwrap();
        let mut cfg = SolverConfig::new(0.1 / p.lipschitz, sched(), 30, 9);
        cfg.diagnostics = Diagnostics::full();
        let a = run(&p, &cfg, 2).unwrap();
        let b = run(&p, &cfg, 2).unwrap();
        assert_eq!(a, b);
        for r in &a.records {
            assert!(p.set.distance(&r.x).unwrap() <= 1e-10);
            if let Some(z) = &r.z {
                assert!(p.set.distance(z).unwrap() <= 1e-10);
            }
        }
        for w in a.records.windows(2) {
            assert!(w[1].a >= w[0].a);
        }
        assert_eq!(a.records[0].a, 0.0);
        assert!(a.records[0].m.iter().all(|v| *v == 0.0));
        let c = run(&p, &cfg, 3).unwrap();
        assert_ne!(a.final_record().x, c.final_record().x);
    }

    #[test]
    fn replay_reproduces_steps() {
        let p = problems::strongly_monotone(&Default::default()).unwrap();
        let mut cfg = SolverConfig::new(0.25 / p.lipschitz, sched(), 20, 4);
        cfg.diagnostics = Diagnostics::full();
        cfg.diagnostics.z_window = Some(3);
        let t = run(&p, &cfg, 0).unwrap();
        assert!(t.records[0].z.is_none() && t.records[18].z.is_some());
        for k in 0..20 {
            let r = replay_step(&t, k, &p, &cfg).unwrap();
            assert_eq!(r.next.x, t.records[k + 1].x);
            assert_eq!(r.next.calls, t.records[k + 1].cum_calls);
        }
    }

    #[test]
    fn csv_has_expected_columns() {
        let p = problems::strongly_monotone(&Default::default()).unwrap();
        let mut cfg = SolverConfig::new(0.25 / p.lipschitz, sched(), 3, 4);
        cfg.diagnostics = Diagnostics::full();
        let t = run(&p, &cfg, 0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,r2,dist2,eps1_norm,eps2_norm,A,M_0,cum_calls\n"));
        assert_eq!(text.lines().count(), 5);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::problems::scaled_monotone;
    use crate::sampling::SampleSchedule;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn iterates_stay_feasible(seed in 0u64..1000, alpha in 0.01..0.3f64) {
            let p = scaled_monotone(3, seed, 0.5).unwrap();
            let c = SolverConfig::new(alpha, SampleSchedule::single(1.0, 3.0, 0.0, 1.0).unwrap(), 15, seed);
            let t = run(&p, &c, 0).unwrap();
            for r in &t.records {
                prop_assert!(r.x.iter().all(|v| *v >= 0.0));
                prop_assert!(r.z.as_ref().is_none_or(|z| z.iter().all(|v| *v >= 0.0)));
            }
        }
    }
}
