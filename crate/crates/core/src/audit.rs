//! Pathwise and statistical checks on solver output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merit::residual_sq_from;
use crate::model::{ProblemInstance, SolutionSet, SolverConfig};
use crate::solver::{replay_step, step_with_errors, ExtragradientState, RunTrace};
use crate::stats::MeanAccumulator;
use crate::vecops::{dist_sq, dot, sub};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FejerReport {
    pub steps: usize,
    /// Steps where `lhs - rhs > tolerance * scale`.
    pub violations: usize,
    /// Largest `(lhs - rhs) / scale`.
    pub max_relative_violation: f64,
    pub max_violation: f64,
    pub tolerance: f64,
    /// Steps whose replay did not reproduce the recorded `x^{k+1}`.
    pub replay_mismatches: usize,
    pub passed: bool,
}

/// Per-step check of
/// `||x^{k+1}-x*||^2 <= ||x^k-x*||^2 - (rho_k/2) r_{alpha_k}(x^k)^2 + dM + dA`
/// along a recorded trace. `z^k` and the realized errors are recovered by
/// replaying each step, which is exact because the streams are keyed.
pub fn fejer_audit(
    trace: &RunTrace,
    x_star: &[f64],
    problem: &ProblemInstance,
    config: &SolverConfig,
) -> Result<FejerReport> {
    fejer_audit_with_tolerance(trace, x_star, problem, config, 1e-9)
}

pub fn fejer_audit_with_tolerance(
    trace: &RunTrace,
    x_star: &[f64],
    problem: &ProblemInstance,
    config: &SolverConfig,
    tolerance: f64,
) -> Result<FejerReport> {
    if !trace.record_errors {
        return Err(Error::MissingDiagnostics("run without recorded errors".into()));
    }
    let t = problem
        .mean
        .as_ref()
        .ok_or_else(|| Error::MissingDiagnostics("no closed-form mean operator".into()))?;
    if x_star.len() != problem.dim {
        return Err(Error::DimensionMismatch {
            expected: problem.dim,
            got: x_star.len(),
        });
    }
    let tracked = trace.tracked.iter().position(|p| dist_sq(p, x_star) == 0.0);
    let mut rep = FejerReport {
        steps: trace.records.len().saturating_sub(1),
        violations: 0,
        max_relative_violation: f64::NEG_INFINITY,
        max_violation: f64::NEG_INFINITY,
        tolerance,
        replay_mismatches: 0,
        passed: true,
    };
    for k in 0..rep.steps {
        let cur = &trace.records[k];
        let nxt = &trace.records[k + 1];
        let st = replay_step(trace, k, problem, config)?;
        if st.next.x != nxt.x {
            rep.replay_mismatches += 1;
        }
        let (e1, e2) = match (&st.eps1, &st.eps2) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::MissingDiagnostics("realized errors unavailable".into())),
        };
        let al = st.alpha;
        let rho = 1.0 - 6.0 * problem.lipschitz.powi(2) * al * al;
        let da = nxt.a - cur.a;
        let dm = match tracked {
            Some(i) => nxt.m[i] - cur.m[i],
            None => 2.0 * al * dot(&sub(x_star, &st.z), e2),
        };
        debug_assert!({
            let fresh = (8.0 + rho) * al * al * dot(e1, e1) + 8.0 * al * al * dot(e2, e2);
            (fresh - da).abs() <= 1e-9 * (1.0 + fresh)
        });
        let r2 = residual_sq_from(&problem.set, &cur.x, &t.eval(&cur.x), al)?;
        let d0 = dist_sq(&cur.x, x_star);
        let lhs = dist_sq(&nxt.x, x_star);
        let rhs = d0 - 0.5 * rho * r2 + dm + da;
        let scale = 1.0f64.max(d0 + 0.5 * rho * r2 + dm.abs() + da);
        let v = lhs - rhs;
        rep.max_violation = rep.max_violation.max(v);
        rep.max_relative_violation = rep.max_relative_violation.max(v / scale);
        if v > tolerance * scale {
            rep.violations += 1;
        }
    }
    rep.passed = rep.violations == 0 && rep.replay_mismatches == 0;
    Ok(rep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub replications: u64,
    pub mean: f64,
    pub stderr: f64,
    pub passed: bool,
}

/// Runs `replications` independent single steps from `x` and collects
/// `dM = 2 <x* - z, alpha eps2>`. The contract is `|mean| <= 4 stderr`.
pub fn martingale_probe(
    problem: &ProblemInstance,
    config: &SolverConfig,
    x: &[f64],
    replications: u64,
) -> Result<MartingaleReport> {
    if problem.mean.is_none() {
        return Err(Error::NoMeanOperator);
    }
    let x_star = match &problem.solutions {
        SolutionSet::Points(p) if !p.is_empty() => p[0].clone(),
        SolutionSet::Set(s) => s.project(x)?,
        _ => return Err(Error::NoKnownSolutions),
    };
    let mut acc = MeanAccumulator::default();
    for r in 0..replications {
        let st = step_with_errors(&ExtragradientState::at(x.to_vec(), 0, r), problem, config)?;
        let e2 = st.eps2.expect("errors are computed when T is known");
        acc.push(2.0 * st.alpha * dot(&sub(&x_star, &st.z), &e2));
    }
    let (mean, se) = (acc.mean(), acc.stderr());
    Ok(MartingaleReport {
        replications,
        mean,
        stderr: se,
        passed: mean.abs() <= 4.0 * se || (mean == 0.0 && se == 0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Diagnostics;
    use crate::problems;
    use crate::sampling::SampleSchedule;
    use crate::solver::run;

    fn cfg(alpha: f64, iters: u64) -> SolverConfig {
        let mut c = SolverConfig::new(alpha, SampleSchedule::single(1.0, 3.0, 0.0, 1.0).unwrap(), iters, 3);
        c.diagnostics = Diagnostics::full();
        c
    }

    #[test]
    fn deterministic_run_is_fejer() {
        let spec = problems::StronglyMonotoneSpec {
            mult_noise: 0.0,
            add_noise: 0.0,
            ..Default::default()
        };
        let p = problems::strongly_monotone(&spec).unwrap();
        let c = cfg(0.25 / p.lipschitz, 50);
        let t = run(&p, &c, 0).unwrap();
        let rep = fejer_audit(&t, &p.solutions.points()[0], &p, &c).unwrap();
        assert!(rep.passed && rep.max_violation <= 1e-10, "{rep:?}");
    }

    #[test]
    fn missing_diagnostics() {
        let p = problems::scaled_monotone(2, 0, 0.1).unwrap();
        let mut c = cfg(0.1, 5);
        c.diagnostics.record_errors = false;
        let t = run(&p, &c, 0).unwrap();
        assert!(matches!(
            fejer_audit(&t, &[0.0, 0.0], &p, &c),
            Err(Error::MissingDiagnostics(_))
        ));
    }

    #[test]
    fn untracked_solution_uses_replayed_martingale() {
        let p = problems::constant_noise(1.0);
        let c = cfg(0.2, 30);
        let t = run(&p, &c, 0).unwrap();
        assert!(t.tracked.is_empty());
        let rep = fejer_audit(&t, &[3.0], &p, &c).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn zero_variance_martingale_is_zero() {
        let p = problems::identity_problem(2, 1.0, crate::FeasibleSet::WholeSpace);
        let r = martingale_probe(&p, &cfg(0.2, 1), &[1.0, 2.0], 50).unwrap();
        assert_eq!(r.mean, 0.0);
        assert!(r.passed);
    }
}
