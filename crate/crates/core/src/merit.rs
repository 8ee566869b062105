//! Merit functions: natural residual, regularized gap, D-gap and distance
//! to the known solutions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MeanOperator, ProblemInstance, SolutionSet, StochasticOracle};
use crate::projection::FeasibleSet;
use crate::rng::{derive_stream, RngStreamKey, Stage};
use crate::vecops::{dist_sq, dot, norm_sq, step, sub};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeritConfig {
    /// Residual parameter.
    pub alpha: f64,
    /// Gap parameters, `b > a > 0`.
    pub a: f64,
    pub b: f64,
}

impl MeritConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidParameters(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.a > 0.0 && self.b > self.a) {
            return Err(Error::InvalidParameters(format!(
                "need b > a > 0, got a={}, b={}",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

/// `||x - P[x - alpha T(x)]||^2`
pub fn natural_residual_sq(t: &dyn MeanOperator, set: &FeasibleSet, x: &[f64], alpha: f64) -> Result<f64> {
    let tx = t.eval(x);
    residual_sq_from(set, x, &tx, alpha)
}

/// Natural residual with `T(x)` already evaluated.
pub fn residual_sq_from(set: &FeasibleSet, x: &[f64], tx: &[f64], alpha: f64) -> Result<f64> {
    let p = set.project(&step(x, alpha, tx))?;
    Ok(dist_sq(x, &p))
}

/// `g_a(x) = <T(x), x - y> - (a/2)||x - y||^2` at the maximizer `y = P[x - T(x)/a]`.
pub fn regularized_gap(t: &dyn MeanOperator, set: &FeasibleSet, x: &[f64], a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::InvalidParameters(format!(
            "gap parameter must be positive, got {a}"
        )));
    }
    let tx = t.eval(x);
    gap_from(set, x, &tx, a)
}

fn gap_from(set: &FeasibleSet, x: &[f64], tx: &[f64], a: f64) -> Result<f64> {
    let y = set.project(&step(x, 1.0 / a, tx))?;
    let d = sub(x, &y);
    Ok(dot(tx, &d) - 0.5 * a * norm_sq(&d))
}

/// `g_a(x) - g_b(x)` for `b > a > 0`.
pub fn d_gap(t: &dyn MeanOperator, set: &FeasibleSet, x: &[f64], a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > a) {
        return Err(Error::InvalidParameters(format!("need b > a > 0, got a={a}, b={b}")));
    }
    let tx = t.eval(x);
    Ok(gap_from(set, x, &tx, a)? - gap_from(set, x, &tx, b)?)
}

/// `min ||x - x*||^2` over the known solutions.
pub fn distance_sq_to_solutions(problem: &ProblemInstance, x: &[f64]) -> Result<f64> {
    match &problem.solutions {
        SolutionSet::Unknown => Err(Error::NoKnownSolutions),
        SolutionSet::Points(ps) if ps.is_empty() => Err(Error::NoKnownSolutions),
        SolutionSet::Points(ps) => Ok(ps.iter().map(|p| dist_sq(x, p)).fold(f64::INFINITY, f64::min)),
        SolutionSet::Set(s) => Ok(s.distance(x)?.powi(2)),
    }
}

/// Batch size of [`EstimatedMean`].
pub const ESTIMATE_SAMPLES: u64 = 100_000;

/// Stand-in for `T` on oracle-only problems: the average of
/// `ESTIMATE_SAMPLES` oracle draws. Every evaluation reuses the same
/// reserved stream, so results are deterministic. Merits computed through
/// it are estimates.
pub struct EstimatedMean {
    oracle: Arc<dyn StochasticOracle>,
    samples: u64,
    seed: u64,
}

impl EstimatedMean {
    pub fn new(oracle: Arc<dyn StochasticOracle>, seed: u64) -> Self {
        Self::with_samples(oracle, seed, ESTIMATE_SAMPLES)
    }

    pub fn with_samples(oracle: Arc<dyn StochasticOracle>, seed: u64, samples: u64) -> Self {
        Self {
            oracle,
            samples: samples.max(1),
            seed,
        }
    }

    fn key(&self) -> RngStreamKey {
        // solver streams all use sample 0
        RngStreamKey::new(self.seed, u64::MAX, u64::MAX, Stage::Xi).with_sample(u64::MAX)
    }
}

impl MeanOperator for EstimatedMean {
    fn dim(&self) -> usize {
        self.oracle.dim()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut rng = derive_stream(&self.key());
        let mut acc = vec![0.0; x.len()];
        if self
            .oracle
            .accumulate_batch(&mut rng, x, self.samples, &mut acc)
            .is_err()
        {
            return vec![f64::NAN; x.len()];
        }
        acc.iter_mut().for_each(|v| *v /= self.samples as f64);
        acc
    }
}

/// The closed-form mean operator if present, otherwise an [`EstimatedMean`].
/// The flag is true for the estimate.
pub fn mean_or_estimate(problem: &ProblemInstance, seed: u64) -> (Arc<dyn MeanOperator>, bool) {
    match &problem.mean {
        Some(t) => (t.clone(), false),
        None => (Arc::new(EstimatedMean::new(problem.oracle.clone(), seed)), true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FnOperator;
    use crate::problems;
    use approx::assert_abs_diff_eq;

    fn ident(n: usize) -> FnOperator<impl Fn(&[f64]) -> Vec<f64> + Send + Sync> {
        FnOperator::new(n, |x: &[f64]| x.to_vec())
    }

    #[test]
    fn residual_unconstrained() {
        let r = natural_residual_sq(&ident(2), &FeasibleSet::WholeSpace, &[1.0, 0.0], 0.2).unwrap();
        assert_abs_diff_eq!(r, 0.04, epsilon = 1e-15);
    }

    #[test]
    fn residual_orthant() {
        let r = natural_residual_sq(&ident(2), &FeasibleSet::NonnegativeOrthant, &[-1.0, 1.0], 0.2).unwrap();
        assert_abs_diff_eq!(r, 1.04, epsilon = 1e-14);
    }

    #[test]
    fn residual_at_solution() {
        let r = natural_residual_sq(&ident(2), &FeasibleSet::NonnegativeOrthant, &[0.0, 0.0], 0.2).unwrap();
        assert!(r <= 1e-20);
    }

    #[test]
    fn gap_examples() {
        let t = ident(2);
        let x = [1.0, 0.0];
        assert_abs_diff_eq!(
            regularized_gap(&t, &FeasibleSet::WholeSpace, &x, 2.0).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        let g2 = regularized_gap(&t, &FeasibleSet::WholeSpace, &x, 2.0).unwrap();
        let g4 = regularized_gap(&t, &FeasibleSet::WholeSpace, &x, 4.0).unwrap();
        assert!(g4 <= g2);
        assert_abs_diff_eq!(
            d_gap(&t, &FeasibleSet::WholeSpace, &x, 1.0, 2.0).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            regularized_gap(&t, &FeasibleSet::WholeSpace, &[0.0, 0.0], 2.0).unwrap(),
            0.0
        );
        assert!(matches!(
            d_gap(&t, &FeasibleSet::WholeSpace, &x, 2.0, 2.0),
            Err(Error::InvalidParameters(_))
        ));
    }

    #[test]
    fn distances() {
        let mut p = problems::identity_problem(2, 1.0, FeasibleSet::WholeSpace);
        p.solutions = SolutionSet::Points(vec![vec![1.0, 1.0]]);
        assert_abs_diff_eq!(distance_sq_to_solutions(&p, &[0.0, 0.0]).unwrap(), 2.0);
        assert_abs_diff_eq!(distance_sq_to_solutions(&p, &[1.0, 1.0]).unwrap(), 0.0);
        p.solutions = SolutionSet::Unknown;
        assert!(matches!(
            distance_sq_to_solutions(&p, &[0.0, 0.0]),
            Err(Error::NoKnownSolutions)
        ));
        let e1 = problems::constant_noise(1.0);
        assert_eq!(distance_sq_to_solutions(&e1, &[123.0]).unwrap(), 0.0);
    }

    #[test]
    fn estimated_mean_is_close_and_repeatable() {
        let p = problems::constant_noise_n(3, 1.0);
        let est = EstimatedMean::new(p.oracle.clone(), 4);
        let a = est.eval(&[1.0, 2.0, 3.0]);
        assert_eq!(a, est.eval(&[1.0, 2.0, 3.0]));
        // each coordinate has stderr 1/sqrt(1e5)
        assert!(
            a.iter().all(|v| v.abs() < 5.0 / (ESTIMATE_SAMPLES as f64).sqrt()),
            "{a:?}"
        );
        let (_, flagged) = mean_or_estimate(&p, 0);
        assert!(!flagged);
    }
}
