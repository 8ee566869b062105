//! Closed-form evaluation of the theoretical constants behind the rate and
//! oracle-complexity bounds.
//!
//! Notation: `lambda = 2 c alpha_hat^2 C_2^2`, `D = lambda sigma^2`,
//! `rho = 1 - 6 L^2 alpha^2`, and `1/Nk = sum_i 1/N_{k,i}` for the harmonic
//! aggregate of the per-agent sample sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{AgentSchedule, SampleSchedule};

/// Upper end of the admissible interval for `phi`.
pub const PHI_MAX: f64 = 0.618_033_988_749_894_9;

/// Number of iterations summed explicitly before the analytic tail takes over.
const SUM_HORIZON: u64 = 1_000_000;

/// Horizon of the c-consistency scan.
const C_HORIZON: u64 = 1000;

/// How the oracle variance is controlled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// `sigma(x*)` at one solution, variance growing with `||x - x*||`.
    #[default]
    PointBased,
    /// Same growth law with `sigma` bounding `sigma(x*)` over all solutions.
    UniformOnSolutions,
    /// Variance bounded by `sigma^2` on the whole feasible set.
    UniformOnSet,
}

/// `sup ||T|| <= M` on the feasible set; switches the `z` bound to `(0, 2M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundedOperator {
    pub sup_norm: f64,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn half() -> f64 {
    0.5
}
fn one_usize() -> usize {
    1
}
fn default_schedule() -> SampleSchedule {
    SampleSchedule {
        agents: vec![AgentSchedule {
            theta: 1.0,
            mu: 3.0,
            a: 0.0,
            b: 1.0,
        }],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsInputs {
    pub lipschitz: f64,
    /// Supremum of the stepsizes; rates assume a constant stepsize equal to it.
    pub alpha_hat: f64,
    /// `sigma(x*)`, or the uniform bound for the uniform variants.
    pub sigma: f64,
    #[serde(default)]
    pub variance: VarianceKind,
    /// Moment order, `2` or at least `4`.
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default = "one")]
    pub c2: f64,
    /// Martingale moment constant for order `p`; required when `p >= 4`.
    #[serde(default)]
    pub cp: Option<f64>,
    /// Constant for order `q = p/2`; defaults to `c2` when `q = 2`.
    #[serde(default)]
    pub cq: Option<f64>,
    #[serde(default = "two")]
    pub c: f64,
    /// `1` for a single block, `2` otherwise.
    #[serde(default)]
    pub big_a: Option<u8>,
    /// `1` for a single block or shared samples, `2` for independent agents.
    #[serde(default)]
    pub big_b: Option<u8>,
    #[serde(default = "default_schedule")]
    pub schedule: SampleSchedule,
    #[serde(default = "one_usize")]
    pub m: usize,
    #[serde(default = "half")]
    pub phi: f64,
    /// `||x0 - x*||`, or `dist(x0, X*)` for the uniform variants.
    #[serde(default = "one")]
    pub distance: f64,
    /// Empirical `E||x^k - x*||^2` for `k = 0, 1, ...`, used for `J`.
    #[serde(default)]
    pub moments: Option<Vec<f64>>,
    /// User-supplied `J`; takes precedence over `moments`.
    #[serde(default)]
    pub j: Option<f64>,
    #[serde(default = "one")]
    pub s: f64,
    #[serde(default)]
    pub bounded: Option<BoundedOperator>,
    /// `gamma` for the moment bound; defaults to the tail `sum_{k >= k0} 1/Nk`.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Tolerance for the complexity bounds.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl ConstantsInputs {
    pub fn new(lipschitz: f64, alpha_hat: f64, sigma: f64) -> Self {
        Self {
            lipschitz,
            alpha_hat,
            sigma,
            variance: VarianceKind::default(),
            p: 2.0,
            c2: 1.0,
            cp: None,
            cq: None,
            c: 2.0,
            big_a: None,
            big_b: None,
            schedule: default_schedule(),
            m: 1,
            phi: 0.5,
            distance: 1.0,
            moments: None,
            j: None,
            s: 1.0,
            bounded: None,
            gamma: None,
            epsilon: None,
        }
    }

    pub fn big_a(&self) -> u8 {
        self.big_a.unwrap_or(if self.m == 1 { 1 } else { 2 })
    }

    pub fn big_b(&self) -> u8 {
        self.big_b.unwrap_or(if self.m == 1 { 1 } else { 2 })
    }

    /// `C_p` for the configured order.
    pub fn cp(&self) -> Result<f64> {
        if self.p == 2.0 {
            return Ok(self.c2);
        }
        self.cp
            .ok_or_else(|| Error::InvalidInputs(format!("cp is required for p = {}", self.p)))
    }

    /// `C_q` with `q = p/2`.
    pub fn cq(&self) -> Result<f64> {
        match self.cq {
            Some(v) => Ok(v),
            None if self.p == 4.0 => Ok(self.c2),
            None if self.p == 2.0 => Ok(1.0),
            None => Err(Error::InvalidInputs(format!("cq is required for p = {}", self.p))),
        }
    }

    /// Per-agent schedules, broadcast to `m` agents.
    pub fn agents(&self) -> Result<Vec<AgentSchedule>> {
        (0..self.m).map(|i| self.schedule.agent(i).copied()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(Error::InvalidInputs(s));
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            return bad(format!("L must be positive, got {}", self.lipschitz));
        }
        rho(self.alpha_hat, self.lipschitz)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be nonnegative, got {}", self.sigma));
        }
        if !(self.p == 2.0 || self.p >= 4.0) {
            return bad(format!("p must be 2 or at least 4, got {}", self.p));
        }
        for (name, v) in [("c2", Some(self.c2)), ("cp", self.cp), ("cq", self.cq)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        self.cp()?;
        self.cq()?;
        if !(self.c > 1.0 && self.c.is_finite()) {
            return bad(format!("c must exceed 1, got {}", self.c));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        let (a, b) = (self.big_a(), self.big_b());
        if a != if self.m == 1 { 1 } else { 2 } {
            return bad(format!("A = {a} is inconsistent with m = {}", self.m));
        }
        if !(b == 1 || (b == 2 && self.m > 1)) {
            return bad(format!("B = {b} is inconsistent with m = {}", self.m));
        }
        if !(self.phi > 0.0 && self.phi < PHI_MAX) {
            return bad(format!(
                "phi = {} outside the admissible interval (0, {PHI_MAX})",
                self.phi
            ));
        }
        if !(self.distance >= 0.0 && self.distance.is_finite()) {
            return bad(format!("distance must be nonnegative, got {}", self.distance));
        }
        if !(self.s >= 1.0) {
            return bad(format!("S must be at least 1, got {}", self.s));
        }
        if let Some(j) = self.j {
            if !(j >= 0.0 && j.is_finite()) {
                return bad(format!("J must be nonnegative, got {j}"));
            }
        }
        if let Some(ms) = &self.moments {
            if ms.is_empty() || ms.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad("moments must be a nonempty list of nonnegative numbers".into());
            }
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("gamma must be nonnegative, got {g}"));
            }
        }
        if let Some(bo) = self.bounded {
            if !(bo.sup_norm >= 0.0 && bo.sup_norm.is_finite()) {
                return bad(format!("sup_norm must be nonnegative, got {}", bo.sup_norm));
            }
        }
        self.schedule.validate()?;
        if self.schedule.num_agents() != 1 && self.schedule.num_agents() != self.m {
            return Err(Error::InvalidSchedule(format!(
                "{} agent schedules for m = {}",
                self.schedule.num_agents(),
                self.m
            )));
        }
        if let Some(eps) = self.epsilon {
            let mu_max = self.agents()?.iter().map(|a| a.mu).fold(0.0, f64::max);
            if !(eps > 0.0 && mu_max * eps <= 1.0) {
                return bad(format!(
                    "epsilon must lie in (0, 1/mu] = (0, {}], got {eps}",
                    1.0 / mu_max
                ));
            }
        }
        Ok(())
    }

    fn lambda(&self) -> f64 {
        2.0 * self.c * self.alpha_hat.powi(2) * self.c2.powi(2)
    }

    /// `D(x*) = 2 c alpha_hat^2 C_2^2 sigma^2`.
    fn d(&self) -> f64 {
        self.lambda() * self.sigma.powi(2)
    }

    /// Harmonic aggregate `Nk` (real valued) at iteration `k`.
    fn harmonic(&self, agents: &[AgentSchedule], k: u64) -> f64 {
        1.0 / agents.iter().map(|a| 1.0 / a.size(k) as f64).sum::<f64>()
    }

    fn n_min(agents: &[AgentSchedule], k: u64) -> u64 {
        agents.iter().map(|a| a.size(k)).min().unwrap_or(1)
    }
}

/// `rho = 1 - 6 L^2 alpha^2`.
pub fn rho(alpha: f64, lipschitz: f64) -> Result<f64> {
    if !(lipschitz > 0.0) {
        return Err(Error::InvalidStepsize(format!("L must be positive, got {lipschitz}")));
    }
    let limit = 1.0 / (6f64.sqrt() * lipschitz);
    if !(alpha > 0.0 && alpha < limit) {
        return Err(Error::InvalidStepsize(format!("alpha = {alpha} outside (0, {limit})")));
    }
    Ok(1.0 - 6.0 * lipschitz.powi(2) * alpha * alpha)
}

/// Coefficients of the conditional increment bounds, as
/// `quadratic ||x-x*||^2 + linear ||x-x*|| + constant`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementBound {
    pub quadratic: f64,
    pub linear: f64,
    pub constant: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceModuli {
    pub k: u64,
    /// Harmonic aggregate `Nk`.
    pub n_k: f64,
    pub n_min: u64,
    pub rho: f64,
    /// `G_{k,p}` and `H_{k,p}` for the configured `p`.
    pub g: f64,
    pub h: f64,
    /// `G_{k,2}` and `H_{k,2}`.
    pub g2: f64,
    pub h2: f64,
    /// `C_k(x*) = A G^2 [32 (1 + L alpha + H)^2 + 18]` with `p = 2`.
    pub c_k: f64,
    /// `(16 + rho) alpha^2 C_2^2 sigma^2`.
    pub c_k_uniform: f64,
    pub d_p: f64,
    pub g_tilde: f64,
    pub b_p: f64,
    /// Bounds on `A_{k+1} - A_k` and `M_{k+1} - M_k` in the `q`-norm.
    pub a_increment: IncrementBound,
    pub m_increment: IncrementBound,
}

/// Every modulus at iteration `k` with `alpha_k = alpha_hat`.
pub fn variance_moduli(inputs: &ConstantsInputs, k: u64) -> Result<VarianceModuli> {
    inputs.validate()?;
    let agents = inputs.agents()?;
    let (l, al, sg) = (inputs.lipschitz, inputs.alpha_hat, inputs.sigma);
    let big_a = inputs.big_a() as f64;
    let big_b = inputs.big_b() as f64;
    let cp = inputs.cp()?;
    let n_k = inputs.harmonic(&agents, k);
    let n_min = ConstantsInputs::n_min(&agents, k);
    let rho_k = rho(al, l)?;
    let g = al * cp * sg;
    let h = g * (big_a / n_k).sqrt();
    let g2 = al * inputs.c2 * sg;
    let h2 = g2 * (big_a / n_k).sqrt();
    let c_k = big_a * g2 * g2 * (32.0 * (1.0 + l * al + h2).powi(2) + 18.0);
    let c_k_uniform = (16.0 + rho_k) * al * al * inputs.c2.powi(2) * sg * sg;
    let d_p = 2.0 * inputs.c * al * al * cp * cp * sg * sg;
    let (g_tilde, b_p) = if inputs.p == 2.0 {
        (0.0, 0.0)
    } else {
        let gt = cp * al * sg;
        let bp = (3.0 * big_b).sqrt()
            * inputs.cq()?
            * gt
            * ((1.0 + l * al).powi(2) + (3.0 + 2.0 * l * al) * big_a.sqrt() * gt + 2.0 * big_a * gt * gt);
        (gt, bp)
    };
    let (a_increment, m_increment) = if inputs.variance == VarianceKind::UniformOnSet {
        let (cl, cm) = match inputs.bounded {
            Some(b) => (0.0, 2.0 * b.sup_norm),
            None => (l, 0.0),
        };
        let e = cp * sg / (n_min as f64).sqrt();
        (
            IncrementBound {
                quadratic: 0.0,
                linear: 0.0,
                constant: (16.0 + rho_k) * al * al * cp * cp * sg * sg / n_min as f64,
            },
            IncrementBound {
                quadratic: 0.0,
                linear: (1.0 + cl * al) * al * e,
                constant: (cm + e) * al * al * e,
            },
        )
    } else {
        let r = (big_b / big_a).sqrt() * h;
        let s = 1.0 + l * al + h;
        (
            IncrementBound {
                quadratic: (32.0 * s * s + 2.0 * (8.0 + rho_k)) * h * h,
                linear: 0.0,
                constant: (32.0 * h * h + 16.0 + 2.0 * (8.0 + rho_k)) * h * h,
            },
            IncrementBound {
                quadratic: r * s * s,
                linear: r * (1.0 + l * al + (3.0 + 2.0 * l * al) * h + 2.0 * h * h),
                constant: r * (h + h * h),
            },
        )
    };
    Ok(VarianceModuli {
        k,
        n_k,
        n_min,
        rho: rho_k,
        g,
        h,
        g2,
        h2,
        c_k,
        c_k_uniform,
        d_p,
        g_tilde,
        b_p,
        a_increment,
        m_increment,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CConsistency {
    pub c: f64,
    pub horizon: u64,
    /// Smallest `c` with `C_k/Nk <= c H^2 (1 + H^2)` for every `k <= horizon`.
    pub min_admissible_c: f64,
    /// Smallest `c` that works for the last iterations of the scan.
    pub tail_admissible_c: f64,
    /// First `k` from which the supplied `c` works up to the horizon.
    pub threshold: Option<u64>,
    pub holds: bool,
}

/// Scans `k <= 1000` for the smallest constant `c` in
/// `C_k(x*)/Nk <= c H_{k,2}^2 (1 + H_{k,2}^2)`.
pub fn c_consistency(inputs: &ConstantsInputs) -> Result<CConsistency> {
    inputs.validate()?;
    let needed: Vec<f64> = (0..=C_HORIZON)
        .map(|k| {
            let v = variance_moduli(inputs, k)?;
            let h2 = v.h2 * v.h2;
            Ok(if h2 == 0.0 {
                0.0
            } else {
                v.c_k / v.n_k / (h2 * (1.0 + h2))
            })
        })
        .collect::<Result<_>>()?;
    let min_admissible_c = needed.iter().copied().fold(0.0, f64::max);
    let tail_admissible_c = needed[needed.len() - 10..].iter().copied().fold(0.0, f64::max);
    let mut threshold = None;
    for k in (0..needed.len()).rev() {
        if needed[k] <= inputs.c {
            threshold = Some(k as u64);
        } else {
            break;
        }
    }
    Ok(CConsistency {
        c: inputs.c,
        horizon: C_HORIZON,
        min_admissible_c,
        tail_admissible_c,
        threshold,
        holds: threshold == Some(0),
    })
}

/// Harmonic tail sums `sum_{j >= k} 1/Nj`, explicit up to a horizon and
/// closed by the integral bound.
struct Tails {
    partial: Vec<f64>,
    partial_sq: Vec<f64>,
    agents: Vec<AgentSchedule>,
    min_rule: Vec<f64>,
}

impl Tails {
    fn new(agents: Vec<AgentSchedule>, horizon: u64) -> Self {
        let h = horizon as usize;
        let mut partial = vec![0.0; h + 1];
        let mut partial_sq = vec![0.0; h + 1];
        let mut min_rule = vec![0.0; h + 1];
        let inv = |k: u64| agents.iter().map(|a| 1.0 / a.size(k) as f64).sum::<f64>();
        let tail = Self::analytic(&agents, horizon);
        let n_h = inv(horizon);
        partial[h] = tail;
        partial_sq[h] = tail * n_h;
        min_rule[h] = agents.iter().map(|a| a.tail_bound(horizon)).fold(0.0, f64::max);
        for k in (0..h).rev() {
            let v = inv(k as u64);
            partial[k] = partial[k + 1] + v;
            partial_sq[k] = partial_sq[k + 1] + v * v;
            let nmin = agents.iter().map(|a| a.size(k as u64)).min().unwrap_or(1);
            min_rule[k] = min_rule[k + 1] + 1.0 / nmin as f64;
        }
        Self {
            partial,
            partial_sq,
            agents,
            min_rule,
        }
    }

    fn analytic(agents: &[AgentSchedule], k: u64) -> f64 {
        agents.iter().map(|a| a.tail_bound(k)).sum()
    }

    /// Upper bound on `sum_{j >= k} 1/Nj`.
    fn tail(&self, k: u64) -> f64 {
        match self.partial.get(k as usize) {
            Some(v) => *v,
            None => Self::analytic(&self.agents, k),
        }
    }

    fn a0(&self) -> f64 {
        self.partial[0]
    }

    /// Upper bound on `sum_j 1/Nj^2`, using `sum_{j >= H} 1/Nj^2 <= (1/N_H) sum_{j >= H} 1/Nj`.
    fn b0(&self) -> f64 {
        self.partial_sq[0]
    }

    /// Upper bound on `sum_j 1/N_{j,min}`.
    fn min_rule_sum(&self) -> f64 {
        self.min_rule[0]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct K0Report {
    /// `phi / D`; `None` when `D = 0` and any index works.
    pub threshold: Option<f64>,
    /// Closed form from the exponential bound (single logarithmic schedule shape only).
    pub closed_form: Option<f64>,
    /// Smallest index whose tail upper bound meets the threshold.
    pub numeric: u64,
    /// Tail upper bound at the numeric index.
    pub tail: f64,
}

/// `k0`: smallest index with `sum_{k >= k0} 1/Nk <= phi / D`.
pub fn k0_and_tail(inputs: &ConstantsInputs) -> Result<K0Report> {
    inputs.validate()?;
    let tails = Tails::new(inputs.agents()?, SUM_HORIZON);
    k0_with(inputs, &tails)
}

fn k0_with(inputs: &ConstantsInputs, tails: &Tails) -> Result<K0Report> {
    let d = inputs.d();
    let agents = &tails.agents;
    let closed_form = closed_form_k0(inputs, agents);
    if d == 0.0 {
        return Ok(K0Report {
            threshold: None,
            closed_form,
            numeric: 0,
            tail: tails.tail(0),
        });
    }
    let thr = inputs.phi / d;
    let numeric = if tails.tail(SUM_HORIZON) > thr {
        // the analytic tail is nonincreasing; bracket and bisect
        let mut lo = SUM_HORIZON;
        let mut hi = SUM_HORIZON.saturating_mul(2);
        while Tails::analytic(agents, hi) > thr {
            if hi == u64::MAX {
                return Err(Error::InvalidSchedule("k0 exceeds the representable range".into()));
            }
            lo = hi;
            hi = hi.saturating_mul(2);
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if Tails::analytic(agents, mid) > thr {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    } else {
        let p = &tails.partial;
        // partial sums are nonincreasing in k
        p.partition_point(|v| *v > thr) as u64
    };
    Ok(K0Report {
        threshold: Some(thr),
        closed_form,
        numeric,
        tail: tails.tail(numeric),
    })
}

/// `exp[(D/(phi b theta))^{1/b}] - mu + 1`, rounded up to a natural number.
/// Uniform agents are folded into one schedule with `theta / m`.
fn closed_form_k0(inputs: &ConstantsInputs, agents: &[AgentSchedule]) -> Option<f64> {
    let a0 = agents[0];
    if a0.a != 0.0 || agents.iter().any(|a| *a != a0) {
        return None;
    }
    let theta = a0.theta / agents.len() as f64;
    let d = inputs.d();
    let v = ((d / (inputs.phi * a0.b * theta)).powf(1.0 / a0.b)).exp() - a0.mu + 1.0;
    Some(v.ceil().max(0.0))
}

/// Which data `J` was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JSource {
    Supplied,
    Moments,
    /// Noiseless case: `J` only multiplies zero.
    NotNeeded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JValue {
    pub value: f64,
    pub source: JSource,
    /// False when the moment table is shorter than `k0 + 1`; the maximum
    /// then runs over the whole table.
    pub covers_k0: bool,
}

/// `J = (1 + max_{i <= k0} E||x^i - x*||^2) / (1 - phi - phi^2)`.
pub fn j_from_moments(moments: &[f64], k0: u64, phi: f64) -> Result<f64> {
    if !(phi > 0.0 && phi < PHI_MAX) {
        return Err(Error::InvalidInputs(format!(
            "phi = {phi} outside the admissible interval (0, {PHI_MAX})"
        )));
    }
    if moments.is_empty() {
        return Err(Error::MissingJ);
    }
    let end = (k0 as usize + 1).min(moments.len());
    let mx = moments[..end].iter().copied().fold(0.0, f64::max);
    Ok((1.0 + mx) / (1.0 - phi - phi * phi))
}

fn resolve_j(inputs: &ConstantsInputs, k0: u64) -> Result<JValue> {
    if let Some(j) = inputs.j {
        return Ok(JValue {
            value: j,
            source: JSource::Supplied,
            covers_k0: true,
        });
    }
    if let Some(ms) = &inputs.moments {
        return Ok(JValue {
            value: j_from_moments(ms, k0, inputs.phi)?,
            source: JSource::Moments,
            covers_k0: ms.len() as u64 > k0,
        });
    }
    if inputs.sigma == 0.0 {
        return Ok(JValue {
            value: 0.0,
            source: JSource::NotNeeded,
            covers_k0: true,
        });
    }
    Err(Error::MissingJ)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LpBound {
    pub p: f64,
    pub gamma: f64,
    pub beta: f64,
    pub beta_ok: bool,
    /// `c_2 = 1/(1-beta)`, `c_p = 4/(1-beta)^2` for `p >= 4`; `None` when `beta >= 1`.
    pub c_p: Option<f64>,
    /// Supremum of the `gamma` values with `beta < 1`.
    pub gamma_threshold: f64,
}

/// `beta = B_p sqrt(gamma) + D_p gamma + D_p^2 gamma^2` and the moment constant.
pub fn lp_bound_constants(inputs: &ConstantsInputs, gamma: f64) -> Result<LpBound> {
    inputs.validate()?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidInputs(format!("gamma must be nonnegative, got {gamma}")));
    }
    let v = variance_moduli(inputs, 0)?;
    let beta_at = |g: f64| v.b_p * g.sqrt() + v.d_p * g + v.d_p * v.d_p * g * g;
    let beta = beta_at(gamma);
    let beta_ok = beta < 1.0;
    let c_p = beta_ok.then(|| {
        if inputs.p == 2.0 {
            1.0 / (1.0 - beta)
        } else {
            4.0 / (1.0 - beta).powi(2)
        }
    });
    let gamma_threshold = if v.b_p == 0.0 && v.d_p == 0.0 {
        f64::INFINITY
    } else {
        let mut hi = 1.0;
        while beta_at(hi) < 1.0 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if beta_at(mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    Ok(LpBound {
        p: inputs.p,
        gamma,
        beta,
        beta_ok,
        c_p,
        gamma_threshold,
    })
}

/// `2 rho^{-1} d^2 + 2 rho^{-1} A (1 + J)`.
pub fn q_bar(rho: f64, d: f64, a: f64, j: f64) -> f64 {
    2.0 / rho * d * d + 2.0 / rho * a * (1.0 + j)
}

/// `12 rho^{-2} d^4 + 12 rho^{-2} A^2 (1 + J)^2 + 1`.
pub fn i_const(rho: f64, d: f64, a: f64, j: f64) -> f64 {
    12.0 / (rho * rho) * d.powi(4) + 12.0 / (rho * rho) * (a * (1.0 + j)).powi(2) + 1.0
}

/// `4 3^{nu-1} {(2/rho)^nu d^{2 nu} + (2/rho)^nu A^nu (1+J)^nu + 1}`.
pub fn i_hat(rho: f64, d: f64, a: f64, j: f64, nu: f64) -> f64 {
    let t = 2.0 / rho;
    4.0 * 3f64.powf(nu - 1.0) * (t.powf(nu) * d.powf(2.0 * nu) + t.powf(nu) * (a * (1.0 + j)).powf(nu) + 1.0)
}

/// `(2/rho) {d^2 + (1 + J)(D a0 + D^2 b0)}`.
pub fn q_k(rho: f64, d: f64, j: f64, big_d: f64, a0: f64, b0: f64) -> f64 {
    2.0 / rho * (d * d + (1.0 + j) * (big_d * a0 + big_d * big_d * b0))
}

/// `A_{mu,b}` and `B_{mu,b}` of the logarithmic schedule.
pub fn script_ab(lambda: f64, mu: f64, b: f64) -> (f64, f64) {
    let l = (mu - 1.0).ln();
    let a = lambda / (b * l.powf(b));
    let bb = lambda * lambda / ((mu - 1.0) * (1.0 + 2.0 * b) * l.powf(1.0 + 2.0 * b));
    (a, bb)
}

/// Network `A_m` and `B_m`. Agents with `a = 0` use the logarithmic
/// integral `lambda / (theta b ln(mu-1)^b)` in place of `lambda / (theta a (mu-1)^a)`.
pub fn script_ab_network(lambda: f64, agents: &[AgentSchedule]) -> (f64, f64) {
    let a_m = agents
        .iter()
        .map(|s| {
            if s.a > 0.0 {
                lambda / (s.theta * s.a * (s.mu - 1.0).powf(s.a))
            } else {
                lambda / (s.theta * s.b * (s.mu - 1.0).ln().powf(s.b))
            }
        })
        .sum::<f64>();
    let mu_min = agents.iter().map(|s| s.mu).fold(f64::INFINITY, f64::min);
    let b_min = agents.iter().map(|s| s.b).fold(f64::INFINITY, f64::min);
    let a = agents[0].a;
    let lm = (mu_min - 1.0).ln();
    let vartheta = (1.0 + 2.0 * b_min) * (mu_min - 1.0).powf(1.0 + 2.0 * a) * lm;
    let inner = agents.iter().map(|s| lambda / (s.theta * lm.powf(s.b))).sum::<f64>();
    (a_m, inner * inner / vartheta)
}

/// Rate and complexity for a single logarithmic schedule (`a = 0`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarRate {
    pub script_a: f64,
    pub script_b: f64,
    /// `sigma^2 A_{mu,b} + sigma^4 B_{mu,b}`.
    pub a_value: f64,
    pub q_bar: f64,
    pub i: f64,
    pub p: f64,
    /// `max{1, theta^-2}`, the factor in front of `Q_bar / K`.
    pub rate_factor: f64,
    pub complexity: Option<f64>,
}

/// Uniform-variance variants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformRate {
    pub d_sigma: f64,
    /// `Q_inf(sigma)`, same structure as `Q_inf` with `D_sigma`.
    pub q_inf: f64,
    /// `2 rho^{-1} {d^2 + 17 C_2^2 alpha^2 sigma^2 sum 1/N_{k,min}}`.
    pub q_tilde_inf: f64,
    pub q_tilde: Option<f64>,
    pub i_tilde: Option<f64>,
    pub p_tilde: f64,
    pub complexity_tilde: Option<f64>,
    /// Bound on `sup_k E dist(x^k, X*)^2` from the summed recursion.
    pub sup_dist_sq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkRate {
    pub m: usize,
    pub script_a_m: f64,
    pub script_b_m: f64,
    pub a_value: f64,
    pub q_hat: f64,
    pub i_hat: f64,
    pub p_hat: f64,
    /// `k0` from the power-law bound; needs `a > 0`.
    pub k0: Option<f64>,
    pub complexity: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub inputs: ConstantsInputs,
    pub rho: f64,
    pub lambda: f64,
    pub d: f64,
    pub moduli: VarianceModuli,
    /// `sup_{k <= 1000} C_k(x*)`.
    pub c_sup: f64,
    pub c_consistency: CConsistency,
    pub k0: K0Report,
    pub j: JValue,
    pub lp: LpBound,
    pub a0: f64,
    pub b0: f64,
    pub q_inf: f64,
    /// `sup_{k >= k0} E||x^k - x*||^2 <= (1 + E||x^k0 - x*||^2) / (1 - phi - phi^2)`,
    /// evaluated with the moment table when available.
    pub sup_moment_bound: Option<f64>,
    pub scalar: Option<ScalarRate>,
    pub uniform: Option<UniformRate>,
    pub network: Option<NetworkRate>,
    pub epsilon: Option<f64>,
}

impl ConstantsReport {
    /// Right-hand side of `E r^2(x^k) <= bound / k` for the headline rate.
    pub fn rate_constant(&self) -> f64 {
        match (&self.scalar, &self.network) {
            (Some(s), _) => s.rate_factor * s.q_bar,
            (None, Some(n)) => n.q_hat,
            _ => self.q_inf,
        }
    }

    /// Human-readable summary, one quantity per line.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| rows.push((k.to_string(), v));
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6e}"));
        push("rho", format!("{:.6}", self.rho));
        push("lambda", format!("{:.6e}", self.lambda));
        push("D", format!("{:.6e}", self.d));
        push("G_0,p", format!("{:.6e}", self.moduli.g));
        push("H_0,p", format!("{:.6e}", self.moduli.h));
        push("C_0", format!("{:.6e}", self.moduli.c_k));
        push("C_0 (uniform)", format!("{:.6e}", self.moduli.c_k_uniform));
        push("sup C_k", format!("{:.6e}", self.c_sup));
        push("D_p", format!("{:.6e}", self.moduli.d_p));
        push("B_p", format!("{:.6e}", self.moduli.b_p));
        push(
            "c admissible (all k / tail)",
            format!(
                "{:.4} / {:.4}",
                self.c_consistency.min_admissible_c, self.c_consistency.tail_admissible_c
            ),
        );
        push(
            "c threshold",
            self.c_consistency.threshold.map_or("none".into(), |k| k.to_string()),
        );
        push("k0 numeric", self.k0.numeric.to_string());
        push("k0 closed form", opt(self.k0.closed_form));
        push("tail at k0", format!("{:.6e}", self.k0.tail));
        push("J", format!("{:.6e} ({:?})", self.j.value, self.j.source));
        push("beta", format!("{:.6e} (gamma {:.3e})", self.lp.beta, self.lp.gamma));
        push("c_p", opt(self.lp.c_p));
        push("a0", format!("{:.6e}", self.a0));
        push("b0", format!("{:.6e}", self.b0));
        push("Q_inf", format!("{:.6e}", self.q_inf));
        if let Some(s) = &self.scalar {
            push("A_mu,b", format!("{:.6e}", s.script_a));
            push("B_mu,b", format!("{:.6e}", s.script_b));
            push("Q_bar", format!("{:.6e}", s.q_bar));
            push("I", format!("{:.6e}", s.i));
            push("P", format!("{:.6e}", s.p));
            push("complexity", opt(s.complexity));
        }
        if let Some(u) = &self.uniform {
            push("D_sigma", format!("{:.6e}", u.d_sigma));
            push("Q_tilde_inf", format!("{:.6e}", u.q_tilde_inf));
            push("Q_tilde", opt(u.q_tilde));
            push("I_tilde", opt(u.i_tilde));
            push("P_tilde", format!("{:.6e}", u.p_tilde));
            push("complexity (uniform)", opt(u.complexity_tilde));
        }
        if let Some(n) = &self.network {
            push("A_m", format!("{:.6e}", n.script_a_m));
            push("B_m", format!("{:.6e}", n.script_b_m));
            push("Q_hat", format!("{:.6e}", n.q_hat));
            push("I_hat", format!("{:.6e}", n.i_hat));
            push("P_hat", format!("{:.6e}", n.p_hat));
            push("k0 (network)", opt(n.k0));
            push("complexity (network)", opt(n.complexity));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}

/// Full report for `inputs`.
pub fn rate_and_complexity_bounds(inputs: &ConstantsInputs) -> Result<ConstantsReport> {
    inputs.validate()?;
    let agents = inputs.agents()?;
    let tails = Tails::new(agents.clone(), SUM_HORIZON);
    let rho0 = rho(inputs.alpha_hat, inputs.lipschitz)?;
    let lambda = inputs.lambda();
    let d = inputs.d();
    let moduli = variance_moduli(inputs, 0)?;
    let c_sup = (0..=C_HORIZON)
        .map(|k| Ok(variance_moduli(inputs, k)?.c_k))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let c_consistency = c_consistency(inputs)?;
    let k0 = k0_with(inputs, &tails)?;
    let j = resolve_j(inputs, k0.numeric)?;
    let gamma = inputs.gamma.unwrap_or(k0.tail);
    let lp = lp_bound_constants(inputs, gamma)?;
    let (a0, b0) = (tails.a0(), tails.b0());
    let dist = inputs.distance;
    let q_inf = q_k(rho0, dist, j.value, d, a0, b0);
    let sup_moment_bound = inputs.moments.as_ref().and_then(|ms| {
        ms.get(k0.numeric as usize)
            .map(|v| (1.0 + v) / (1.0 - inputs.phi - inputs.phi * inputs.phi))
    });
    let eps = inputs.epsilon;
    let sg2 = inputs.sigma.powi(2);

    let single_log = agents.iter().all(|s| *s == agents[0]) && agents[0].a == 0.0;
    let scalar = (inputs.m == 1 && single_log).then(|| {
        let s = agents[0];
        let (sa, sb) = script_ab(lambda, s.mu, s.b);
        let a_value = sg2 * sa + sg2 * sg2 * sb;
        let qb = q_bar(rho0, dist, a_value, j.value);
        let i = i_const(rho0, dist, a_value, j.value);
        let p = q_inf + 1.0;
        let th = s.theta;
        let complexity = eps
            .map(|e| 1f64.max(th.powi(-4)) * 1f64.max(th) * i * ((p / e).ln().powf(1.0 + s.b) + 1.0 / s.mu) / (e * e));
        ScalarRate {
            script_a: sa,
            script_b: sb,
            a_value,
            q_bar: qb,
            i,
            p,
            rate_factor: 1f64.max(th.powi(-2)),
            complexity,
        }
    });

    let uniform = (inputs.variance != VarianceKind::PointBased).then(|| {
        let kappa = 17.0 * inputs.c2.powi(2) * inputs.alpha_hat.powi(2) * sg2;
        let q_tilde_inf = 2.0 / rho0 * (dist * dist + kappa * tails.min_rule_sum());
        let p_tilde = q_tilde_inf + 1.0;
        let (q_tilde, i_tilde, complexity_tilde) = if inputs.m == 1 && single_log {
            let s = agents[0];
            let l = (s.mu - 1.0).ln();
            let t = kappa / (s.b * l.powf(s.b));
            let qt = 2.0 / rho0 * dist * dist + 2.0 / rho0 * t;
            let it = 12.0 / (rho0 * rho0) * dist.powi(4) + 12.0 / (rho0 * rho0) * t * t + 1.0;
            let th = s.theta;
            let cx = eps.map(|e| {
                1f64.max(th.powi(-2)) * 1f64.max(th) * it * ((p_tilde / e).ln().powf(1.0 + s.b) + 1.0 / s.mu) / (e * e)
            });
            (Some(qt), Some(it), cx)
        } else {
            (None, None, None)
        };
        UniformRate {
            d_sigma: d,
            q_inf,
            q_tilde_inf,
            q_tilde,
            i_tilde,
            p_tilde,
            complexity_tilde,
            sup_dist_sq: dist * dist + kappa * tails.min_rule_sum(),
        }
    });

    let common_a = agents.iter().all(|s| s.a == agents[0].a);
    let network = common_a.then(|| {
        let (am, bm) = script_ab_network(lambda, &agents);
        let a_value = sg2 * am + sg2 * sg2 * bm;
        let a = agents[0].a;
        let q_hat = q_bar(rho0, dist, a_value, j.value);
        let ih = i_hat(rho0, dist, a_value, j.value, 2.0 + a);
        let p_hat = q_inf + 1.0;
        let mu_min = agents.iter().map(|s| s.mu).fold(f64::INFINITY, f64::min);
        let th_min = agents.iter().map(|s| s.theta).fold(f64::INFINITY, f64::min);
        let th_max = agents.iter().map(|s| s.theta).fold(0.0, f64::max);
        let b_min = agents.iter().map(|s| s.b).fold(f64::INFINITY, f64::min);
        let k0 = (a > 0.0).then(|| {
            let v = (d / (inputs.phi * th_min * b_min)).powf(1.0 / a) - mu_min + 1.0;
            // smallest natural number above e - mu_min + 1 satisfying the bound
            let floor = (std::f64::consts::E - mu_min + 1.0).floor() + 1.0;
            v.ceil().max(floor).max(0.0)
        });
        let b1 = agents[0].b;
        let complexity =
            eps.map(|e| inputs.s * 1f64.max(th_max) * (p_hat / e).ln().powf(1.0 + b1) * ih / e.powf(2.0 + a));
        NetworkRate {
            m: inputs.m,
            script_a_m: am,
            script_b_m: bm,
            a_value,
            q_hat,
            i_hat: ih,
            p_hat,
            k0,
            complexity,
        }
    });

    Ok(ConstantsReport {
        inputs: inputs.clone(),
        rho: rho0,
        lambda,
        d,
        moduli,
        c_sup,
        c_consistency,
        k0,
        j,
        lp,
        a0,
        b0,
        q_inf,
        sup_moment_bound,
        scalar,
        uniform,
        network,
        epsilon: eps,
    })
}

/// Empirical mean residuals against `bound / k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundComparison {
    pub bound_constant: f64,
    pub k_min: u64,
    pub checked: usize,
    pub violations: usize,
    /// Largest `k * mean_r2 / bound_constant`.
    pub worst_ratio: f64,
    pub holds: bool,
    pub verdict: String,
}

/// Checks `mean_r2[k] <= bound_constant / k` for every `k >= k_min`.
pub fn compare_rate(bound_constant: f64, mean_r2: &[f64], k_min: u64) -> BoundComparison {
    let mut checked = 0;
    let mut violations = 0;
    let mut worst = 0f64;
    for (k, r) in mean_r2.iter().enumerate().skip(k_min.max(1) as usize) {
        checked += 1;
        let ratio = k as f64 * r / bound_constant;
        worst = worst.max(ratio);
        if ratio > 1.0 {
            violations += 1;
        }
    }
    let holds = violations == 0 && checked > 0;
    BoundComparison {
        bound_constant,
        k_min,
        checked,
        violations,
        worst_ratio: worst,
        holds,
        verdict: if holds {
            "bound direction holds".into()
        } else {
            format!("bound violated at {violations} of {checked} iterations")
        },
    }
}
