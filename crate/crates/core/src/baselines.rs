//! Comparison methods: one-sample projected stochastic approximation and
//! the ergodic mirror-prox scheme on the zero operator with additive noise.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merit::distance_sq_to_solutions;
use crate::model::ProblemInstance;
use crate::rng::{derive_stream, RngStreamKey, Stage};
use crate::stats::variance_with_stderr;
use crate::vecops::step;

/// `x' = P[x - alpha F(xi, x)]` with one draw from `key`. Returns the new
/// point and the number of oracle calls (always 1).
pub fn sa_step(x: &[f64], problem: &ProblemInstance, alpha: f64, key: &RngStreamKey) -> Result<(Vec<f64>, u64)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidStepsize(format!("alpha must be positive, got {alpha}")));
    }
    let mut g = vec![0.0; problem.dim];
    let mut rng = derive_stream(key);
    problem.oracle.accumulate(&mut rng, x, &mut g)?;
    Ok((problem.set.project(&step(x, alpha, &g))?, 1))
}

/// Projected SA with `alpha_k = alpha0 / (k + 1)`; returns `dist^2(x^k, X*)`
/// for `k = 0..=iterations`.
pub fn sa_run(
    problem: &ProblemInstance,
    alpha0: f64,
    iterations: u64,
    seed: u64,
    replication: u64,
) -> Result<Vec<f64>> {
    let mut x = problem.set.project(&problem.start)?;
    let mut out = Vec::with_capacity(iterations as usize + 1);
    out.push(distance_sq_to_solutions(problem, &x)?);
    for k in 0..iterations {
        let key = RngStreamKey::new(seed, replication, k, Stage::Xi);
        x = sa_step(&x, problem, alpha0 / (k + 1) as f64, &key)?.0;
        out.push(distance_sq_to_solutions(problem, &x)?);
    }
    Ok(out)
}

/// Stepsizes and weights of the mirror-prox scheme with horizon `K`.
/// Vectors are indexed from `k = 1` at position 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MirrorProxSchedule {
    pub horizon: usize,
    pub lipschitz: f64,
    pub sigma: f64,
    /// `3 L K + sigma K sqrt(K - 1)`
    pub denom: f64,
    /// `gamma_k = 2 / (k + 1)`
    pub gamma: Vec<f64>,
    /// `Gamma_1 = 1`, `Gamma_k = (1 - gamma_k) Gamma_{k-1}`
    pub big_gamma: Vec<f64>,
    /// `alpha_k = k / denom`
    pub alpha: Vec<f64>,
    /// `c0 = (Gamma_K sum_k alpha_k)^-1`
    pub c0: f64,
    /// `p_k = c0 Gamma_K alpha_k`
    pub p: Vec<f64>,
    /// `theta_k = c0 Gamma_K alpha_k sum_{i >= k} alpha_i`
    pub theta: Vec<f64>,
}

impl MirrorProxSchedule {
    pub fn new(horizon: usize, lipschitz: f64, sigma: f64) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::InvalidHorizon(format!("need K >= 2, got {horizon}")));
        }
        if !(lipschitz > 0.0) || !(sigma >= 0.0) {
            return Err(Error::InvalidParameters(format!(
                "need L > 0, sigma >= 0, got {lipschitz}, {sigma}"
            )));
        }
        let kk = horizon as f64;
        let denom = 3.0 * lipschitz * kk + sigma * kk * (kk - 1.0).sqrt();
        let gamma: Vec<f64> = (1..=horizon).map(|k| 2.0 / (1.0 + k as f64)).collect();
        let mut big_gamma = Vec::with_capacity(horizon);
        big_gamma.push(1.0);
        for k in 1..horizon {
            big_gamma.push((1.0 - gamma[k]) * big_gamma[k - 1]);
        }
        let alpha: Vec<f64> = (1..=horizon).map(|k| k as f64 / denom).collect();
        let gk = big_gamma[horizon - 1];
        let c0 = 1.0 / (gk * alpha.iter().sum::<f64>());
        let p: Vec<f64> = alpha.iter().map(|a| c0 * gk * a).collect();
        let mut theta = vec![0.0; horizon];
        let mut tail = 0.0;
        for k in (0..horizon).rev() {
            tail += alpha[k];
            theta[k] = c0 * gk * alpha[k] * tail;
        }
        Ok(Self {
            horizon,
            lipschitz,
            sigma,
            denom,
            gamma,
            big_gamma,
            alpha,
            c0,
            p,
            theta,
        })
    }

    /// `theta_k` from its closed form `c0 k (K-k+1)(K+k) / [K(K+1) denom^2]`.
    pub fn theta_closed_form(&self, k: usize) -> f64 {
        let (kf, kk) = (k as f64, self.horizon as f64);
        self.c0 * kf * (kk - kf + 1.0) * (kk + kf) / (kk * (kk + 1.0) * self.denom * self.denom)
    }

    /// `s_K^2 = sum alpha_k^2`
    pub fn s_sq(&self) -> f64 {
        self.alpha.iter().map(|a| a * a).sum()
    }

    /// `sbar_K^2 = sum theta_k^2`
    pub fn sbar_sq(&self) -> f64 {
        self.theta.iter().map(|t| t * t).sum()
    }

    /// `sum (theta_k / c0)^2`, the same sum with the normalizing constant
    /// removed.
    pub fn sbar_sq_unnormalized(&self) -> f64 {
        self.sbar_sq() / (self.c0 * self.c0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MirrorProxOutput {
    pub z_k: f64,
    pub z_bar: f64,
    /// `sum_k p_k z^k` evaluated from the iterates themselves.
    pub z_bar_direct: f64,
}

/// Terminal iterate `z^K = x1 - sum alpha_i xi_i` and ergodic average
/// `zbar^K = x1 - sum theta_k xi_k` for `F(xi, x) = xi`, `xi ~ N(0, sigma^2)`.
/// Draw `xi_k` comes from key `(seed, replication, k, xi)`.
pub fn mirror_prox_example1(
    horizon: usize,
    sigma: f64,
    lipschitz: f64,
    x1: f64,
    replication: u64,
    seed: u64,
) -> Result<MirrorProxOutput> {
    let s = MirrorProxSchedule::new(horizon, lipschitz, sigma)?;
    Ok(mirror_prox_with(&s, x1, replication, seed))
}

fn mirror_prox_with(s: &MirrorProxSchedule, x1: f64, replication: u64, seed: u64) -> MirrorProxOutput {
    let mut z = x1;
    let mut zbar = x1;
    let mut direct = 0.0;
    for k in 0..s.horizon {
        let xi: f64 = s.sigma
            * derive_stream(&RngStreamKey::new(seed, replication, k as u64 + 1, Stage::Xi))
                .sample::<f64, _>(StandardNormal);
        z -= s.alpha[k] * xi;
        zbar -= s.theta[k] * xi;
        direct += s.p[k] * z;
    }
    MirrorProxOutput {
        z_k: z,
        z_bar: zbar,
        z_bar_direct: direct,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceRow {
    #[serde(rename = "K")]
    pub horizon: usize,
    #[serde(rename = "var_zK_emp")]
    pub var_zk_emp: f64,
    #[serde(rename = "var_zK_exact")]
    pub var_zk_exact: f64,
    pub var_zbar_emp: f64,
    pub var_zbar_exact: f64,
    #[serde(rename = "var_zK_stderr")]
    pub var_zk_stderr: f64,
    pub var_zbar_stderr: f64,
}

impl VarianceRow {
    /// Empirical variances within `4 stderr` of the exact ones.
    pub fn within_tolerance(&self) -> bool {
        (self.var_zk_emp - self.var_zk_exact).abs() <= 4.0 * self.var_zk_stderr
            && (self.var_zbar_emp - self.var_zbar_exact).abs() <= 4.0 * self.var_zbar_stderr
    }
}

/// Empirical and exact `Var[z^K]`, `Var[zbar^K]` over `replications` runs
/// for each horizon.
pub fn variance_scaling_probe(
    horizons: &[usize],
    sigma: f64,
    lipschitz: f64,
    replications: u64,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    let mut rows = Vec::with_capacity(horizons.len());
    for &kk in horizons {
        let s = MirrorProxSchedule::new(kk, lipschitz, sigma)?;
        let (mut zs, mut zb) = (Vec::new(), Vec::new());
        for r in 0..replications {
            let o = mirror_prox_with(&s, 0.0, r, seed);
            zs.push(o.z_k);
            zb.push(o.z_bar);
        }
        let (vz, sez) = variance_with_stderr(&zs);
        let (vb, seb) = variance_with_stderr(&zb);
        rows.push(VarianceRow {
            horizon: kk,
            var_zk_emp: vz,
            var_zk_exact: sigma * sigma * s.s_sq(),
            var_zbar_emp: vb,
            var_zbar_exact: sigma * sigma * s.sbar_sq(),
            var_zk_stderr: sez,
            var_zbar_stderr: seb,
        });
    }
    Ok(rows)
}

pub fn write_variance_csv<W: Write>(rows: &[VarianceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
