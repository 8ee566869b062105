//! Sample-rate schedules and empirical averages of the stochastic oracle.
//!
//! Agent `i` uses `N_{k,i} = ceil(theta_i (k + mu_i)^(1 + a_i) ln(k + mu_i)^(1 + b_i))`
//! samples per stage at iteration `k`. Across agents the schedule is summarized by the
//! harmonic aggregate `1/Nk = sum_i 1/N_{k,i}`, which is kept as a real number.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProblemInstance;
use crate::rng::{derive_stream, RngStreamKey, Stage};
use crate::stats::MeanAccumulator;
use crate::vecops::dist_sq;

/// Parameters `(theta, mu, a, b)` of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSchedule {
    pub theta: f64,
    pub mu: f64,
    pub a: f64,
    pub b: f64,
}

impl AgentSchedule {
    pub fn new(theta: f64, mu: f64, a: f64, b: f64) -> Result<Self> {
        let s = Self { theta, mu, a, b };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { theta, mu, a, b } = *self;
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::InvalidSchedule(format!("theta must be positive, got {theta}")));
        }
        if !(mu > 2.0 && mu.is_finite()) {
            return Err(Error::InvalidSchedule(format!("mu must exceed 2, got {mu}")));
        }
        if !(a >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidSchedule(format!("need a >= 0, got a={a}, b={b}")));
        }
        // sum 1/N_k is finite iff (a > 0, b >= -1) or (a = 0, b > 0)
        let summable = (a > 0.0 && b >= -1.0) || (a == 0.0 && b > 0.0);
        if !summable {
            return Err(Error::InvalidSchedule(format!(
                "a={a}, b={b}: need a > 0 with b >= -1, or a = 0 with b > 0"
            )));
        }
        Ok(())
    }

    /// Unrounded rate `theta (k+mu)^(1+a) ln(k+mu)^(1+b)`.
    pub fn rate(&self, k: f64) -> f64 {
        let t = k + self.mu;
        self.theta * t.powf(1.0 + self.a) * t.ln().powf(1.0 + self.b)
    }

    pub fn size(&self, k: u64) -> u64 {
        (self.rate(k as f64).ceil() as u64).max(1)
    }

    /// Upper bound on `sum_{j >= k} 1 / N_j` by the integral test from `k - 1`.
    pub fn tail_bound(&self, k: u64) -> f64 {
        let t = k as f64 - 1.0 + self.mu;
        let l = t.ln();
        if self.a == 0.0 {
            1.0 / (self.theta * self.b * l.powf(self.b))
        } else {
            // ln^{-(1+b)} is nonincreasing for b >= -1, bound it at the lower limit
            1.0 / (self.theta * self.a * t.powf(self.a) * l.powf(1.0 + self.b))
        }
    }
}

impl AgentSchedule {
    /// Estimate of `sum_{j >= k} 1 / N_j`: the integral of `1/rate` from
    /// `k` plus half the first term. Accurate, but not a bound.
    pub fn tail_estimate(&self, k: u64) -> f64 {
        let t0 = k as f64 + self.mu;
        let u0 = t0.ln();
        let half = 0.5 / self.rate(k as f64);
        // substituting u = ln t turns the integrand into exp(-a u) u^{-1-b} / theta
        if self.a == 0.0 {
            return 1.0 / (self.theta * self.b * u0.powf(self.b)) + half;
        }
        let f = |u: f64| (-self.a * (u - u0)).exp() * u.powf(-1.0 - self.b);
        let len = 40.0 / self.a;
        let steps = 4000;
        let h = len / steps as f64;
        let mut s = f(u0) + f(u0 + len);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(u0 + i as f64 * h);
        }
        (-self.a * u0).exp() * s * h / 3.0 / self.theta + half
    }
}

/// Per-agent schedules; a single agent is broadcast to every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSchedule {
    pub agents: Vec<AgentSchedule>,
}

impl SampleSchedule {
    pub fn new(agents: Vec<AgentSchedule>) -> Result<Self> {
        let s = Self { agents };
        s.validate()?;
        Ok(s)
    }

    pub fn single(theta: f64, mu: f64, a: f64, b: f64) -> Result<Self> {
        Self::new(vec![AgentSchedule::new(theta, mu, a, b)?])
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::InvalidSchedule("no agents".into()));
        }
        self.agents.iter().try_for_each(AgentSchedule::validate)
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// True when every agent draws the same number of samples.
    pub fn is_uniform(&self) -> bool {
        self.agents.iter().all(|a| *a == self.agents[0])
    }

    pub fn agent(&self, i: usize) -> Result<&AgentSchedule> {
        match self.agents.len() {
            1 => Ok(&self.agents[0]),
            _ => self
                .agents
                .get(i)
                .ok_or_else(|| Error::InvalidSchedule(format!("no schedule for agent {i}"))),
        }
    }

    /// `N_{k,i}` for each of `m` agents.
    pub fn sizes(&self, m: usize, k: u64) -> Result<Vec<u64>> {
        (0..m).map(|i| Ok(self.agent(i)?.size(k))).collect()
    }

    /// Estimate of `sum_{j >= k} 1/Nj` (see [`AgentSchedule::tail_estimate`]).
    pub fn tail_estimate(&self, m: usize, k: u64) -> Result<f64> {
        (0..m).map(|i| Ok(self.agent(i)?.tail_estimate(k))).sum()
    }

    /// Upper bound on `sum_{j >= k} 1/Nj` (harmonic aggregate over `m` agents).
    pub fn tail_bound(&self, m: usize, k: u64) -> Result<f64> {
        (0..m).map(|i| Ok(self.agent(i)?.tail_bound(k))).sum()
    }
}

/// `N_{k,i}`.
pub fn sample_size(schedule: &SampleSchedule, agent: usize, k: u64) -> Result<u64> {
    schedule.validate()?;
    Ok(schedule.agent(agent)?.size(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    /// `Nk = (sum_i 1/N_{k,i})^-1`
    pub value: f64,
    pub min: u64,
}

pub fn harmonic_aggregate(sizes: &[u64]) -> Result<Harmonic> {
    if sizes.is_empty() {
        return Err(Error::EmptyList);
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidSchedule("sample sizes must be positive".into()));
    }
    let inv: f64 = sizes.iter().map(|&n| 1.0 / n as f64).sum();
    Ok(Harmonic {
        value: 1.0 / inv,
        min: *sizes.iter().min().unwrap(),
    })
}

/// Decreasing exponents `b_1 >= ... >= b_m = base` for a network of `m`
/// agents, satisfying `b_1 >= b_i + 2 ln(i+1) - ln S` for `2 <= i <= m`.
///
/// The condition cannot hold at `i = 1` unless `S >= 4`, so it is enforced
/// from `i = 2` on; `b_1` is tight at `i = m`.
pub fn network_exponents(m: usize, base: f64, s: f64) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameters("network needs at least one agent".into()));
    }
    if !(base > 0.0) || !(s >= 1.0) {
        return Err(Error::InvalidParameters(format!(
            "need base > 0 and S >= 1, got base={base}, S={s}"
        )));
    }
    if m == 1 {
        return Ok(vec![base]);
    }
    let top = base + 2.0 * ((m + 1) as f64).ln();
    let mut b: Vec<f64> = (1..=m).map(|i| top - 2.0 * ((i + 1) as f64).ln()).collect();
    b[0] = (top - s.ln()).max(b[1]);
    b[m - 1] = base;
    debug_assert!(verify_network_exponents(&b, s));
    Ok(b)
}

/// Checks `b_1 >= b_i + 2 ln(i+1) - ln S` for `i >= 2`, and monotonicity.
pub fn verify_network_exponents(b: &[f64], s: f64) -> bool {
    let tol = 1e-12;
    b.windows(2).all(|w| w[0] >= w[1] - tol)
        && b.iter().enumerate().skip(1).all(|(idx, &bi)| {
            let i = (idx + 1) as f64;
            b[0] >= bi + 2.0 * (i + 1.0).ln() - s.ln() - tol
        })
}

/// Numerical realization of the summability requirement on `1/Nk`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummabilityReport {
    pub horizon: u64,
    pub partial_sum: f64,
    /// Integral-test bound on the remainder beyond the horizon.
    pub remainder_bound: f64,
    /// Change of `partial + estimated remainder` between horizon/10 and horizon.
    pub cauchy_gap: f64,
    pub min_rule_sum: f64,
    pub summable: bool,
}

/// Partial sums of `1/Nk` (and of `1/N_{k,min}`, informational) up to `horizon`.
pub fn tail_summability(schedule: &SampleSchedule, m: usize, horizon: u64) -> Result<SummabilityReport> {
    schedule.validate()?;
    let tenth = (horizon / 10).max(1);
    let mut partial = 0.0;
    let mut min_sum = 0.0;
    let mut at_tenth = 0.0;
    for k in 0..horizon {
        if k == tenth {
            at_tenth = partial;
        }
        let sizes = schedule.sizes(m, k)?;
        let h = harmonic_aggregate(&sizes)?;
        partial += 1.0 / h.value;
        min_sum += 1.0 / h.min as f64;
    }
    let rem = schedule.tail_bound(m, horizon)?;
    let est = schedule.tail_estimate(m, horizon)?;
    let est_tenth = schedule.tail_estimate(m, tenth)?;
    let gap = ((partial + est) - (at_tenth + est_tenth)).abs();
    Ok(SummabilityReport {
        horizon,
        partial_sum: partial,
        remainder_bound: rem,
        cauchy_gap: gap,
        min_rule_sum: min_sum,
        summable: rem.is_finite() && gap <= 1e-6,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchMeanResult {
    pub mean: Vec<f64>,
    pub calls: u64,
    /// `mean - T(x)` when the mean operator is known.
    pub error: Option<Vec<f64>>,
}

/// Adds `sum_{j<n} F(xi_j, x)` into `acc`, reading `n` draws from the stream of `key`.
pub(crate) fn oracle_sum(
    problem: &ProblemInstance,
    x: &[f64],
    n: u64,
    key: &RngStreamKey,
    acc: &mut [f64],
) -> Result<()> {
    let mut rng = derive_stream(key);
    problem.oracle.accumulate_batch(&mut rng, x, n, acc)
}

/// Empirical average `(1/N) sum_j F(xi_j, x)` over `n` fresh draws.
pub fn batch_mean(problem: &ProblemInstance, x: &[f64], n: u64, key: &RngStreamKey) -> Result<BatchMeanResult> {
    if n == 0 {
        return Err(Error::InvalidParameters("batch size must be at least 1".into()));
    }
    if x.len() != problem.dim {
        return Err(Error::DimensionMismatch {
            expected: problem.dim,
            got: x.len(),
        });
    }
    let mut acc = vec![0.0; problem.dim];
    oracle_sum(problem, x, n, key, &mut acc)?;
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    let error = problem.mean.as_ref().map(|t| {
        let tx = t.eval(x);
        acc.iter().zip(&tx).map(|(a, b)| a - b).collect()
    });
    Ok(BatchMeanResult {
        mean: acc,
        calls: n,
        error,
    })
}

/// One row of the error-decay table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorDecayRow {
    #[serde(rename = "N")]
    pub n: u64,
    pub mean_sq_error: f64,
    pub stderr: f64,
    /// `N * mean_sq_error`
    pub product: f64,
}

/// Monte Carlo estimate of `E||eps_N||^2` at `x` for each `N` in `grid`.
pub fn error_decay_probe(
    problem: &ProblemInstance,
    x: &[f64],
    grid: &[u64],
    replications: u64,
    seed: u64,
) -> Result<Vec<ErrorDecayRow>> {
    let t = problem.mean.as_ref().ok_or(Error::NoMeanOperator)?;
    let tx = t.eval(x);
    let mut rows = Vec::with_capacity(grid.len());
    for (gi, &n) in grid.iter().enumerate() {
        let mut acc = MeanAccumulator::default();
        for r in 0..replications {
            let key = RngStreamKey::new(seed, r, gi as u64, Stage::Xi);
            let bm = batch_mean(problem, x, n, &key)?;
            acc.push(dist_sq(&bm.mean, &tx));
        }
        let mean = acc.mean();
        rows.push(ErrorDecayRow {
            n,
            mean_sq_error: mean,
            stderr: acc.stderr(),
            product: n as f64 * mean,
        });
    }
    Ok(rows)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::problems::constant_noise_n;
    use proptest::prelude::*;

    #[test]
    fn error_decay_products_near_total_variance() {
        let p = constant_noise_n(2, 0.5);
        let rows = error_decay_probe(&p, &[0.3, -1.0], &[1, 8, 64], 4000, 2).unwrap();
        for r in rows {
            // total variance n sigma^2 = 0.5
            assert!((r.product - 0.5).abs() <= 4.0 * r.stderr * r.n as f64, "{r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn sample_sizes_grow_and_dominate_rate(
            theta in 0.1..5.0f64, mu in 2.0..10.0f64, a in 0.0..1.0f64, b in 0.01..2.0f64, k in 0u64..10_000,
        ) {
            let s = AgentSchedule::new(theta, mu, a, b).unwrap();
            prop_assert!(s.size(k + 1) >= s.size(k));
            prop_assert!(s.size(k) as f64 >= s.rate(k as f64));
            prop_assert!((s.size(k) as f64) < s.rate(k as f64) + 1.0 || s.size(k) == 1);
        }
    }
}
