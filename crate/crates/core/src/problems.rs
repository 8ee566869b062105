//! Built-in stochastic test problems.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ExactOracle, FnOperator, MeanOperator, ProblemInstance, SolutionSet, StochasticOracle, VarianceProfile,
};
use crate::projection::FeasibleSet;
use crate::rng::{derive_stream, RngStreamKey, Stage, StreamRng};
use crate::stats::MeanAccumulator;
use crate::vecops::{dist_sq, dot, sub};

#[inline]
fn gauss(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn matvec(a: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (a * DVector::from_column_slice(x)).as_slice().to_vec()
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone().svd(false, false).singular_values.max()
}

fn seeded_gaussian(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let s = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.min()
}

/// `T(x) = c x` with an exact oracle.
pub fn identity_problem(n: usize, scale: f64, set: FeasibleSet) -> ProblemInstance {
    let t: Arc<dyn MeanOperator> = Arc::new(FnOperator::new(n, move |x: &[f64]| {
        x.iter().map(|v| scale * v).collect()
    }));
    let zero = vec![0.0; n];
    let solutions = if set.distance(&zero).map(|d| d == 0.0).unwrap_or(false) {
        SolutionSet::Points(vec![zero.clone()])
    } else {
        SolutionSet::Unknown
    };
    let start = set.project(&vec![1.0; n]).unwrap_or(zero);
    ProblemInstance {
        name: "identity".into(),
        dim: n,
        blocks: vec![n],
        oracle: Arc::new(ExactOracle(t.clone())),
        mean: Some(t),
        lipschitz: scale.abs().max(f64::MIN_POSITIVE),
        set,
        solutions,
        variance: VarianceProfile::Uniform { sigma: 0.0 },
        start,
    }
}

// ---------------------------------------------------------------------------
// Linear SVI with random matrix

/// `F(xi, x) = A(xi) x` with `A(xi) = A_bar + E`, `E_ij ~ N(0, v_ij)` independent.
#[derive(Clone, Debug)]
pub struct LinearSviProblem {
    pub abar: DMatrix<f64>,
    /// Entry variances `v_ij`.
    pub entry_var: DMatrix<f64>,
    pub set: FeasibleSet,
}

struct LinearSviOracle {
    n: usize,
    abar: Vec<f64>,
    sd: Vec<f64>,
    noisy: bool,
}

impl StochasticOracle for LinearSviOracle {
    fn dim(&self) -> usize {
        self.n
    }

    fn accumulate(&self, rng: &mut StreamRng, x: &[f64], acc: &mut [f64]) -> Result<()> {
        let n = self.n;
        for (i, out) in acc.iter_mut().enumerate().take(n) {
            let row = &self.abar[i * n..(i + 1) * n];
            let sd = &self.sd[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                let e = if self.noisy { sd[j] * gauss(rng) } else { 0.0 };
                s += (row[j] + e) * x[j];
            }
            *out += s;
        }
        Ok(())
    }
}

impl LinearSviProblem {
    pub fn new(abar: DMatrix<f64>, entry_var: DMatrix<f64>, set: FeasibleSet) -> Result<Self> {
        let n = abar.nrows();
        if n == 0 || abar.ncols() != n || entry_var.shape() != (n, n) {
            return Err(Error::InvalidParameters(
                "A_bar and entry variances must be n x n".into(),
            ));
        }
        if entry_var.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameters(
                "entry variances must be finite and nonnegative".into(),
            ));
        }
        if abar.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidParameters("A_bar must be nonnull".into()));
        }
        if min_sym_eigenvalue(&abar) < -1e-10 {
            return Err(Error::InvalidParameters("A_bar must be positive semidefinite".into()));
        }
        Ok(Self { abar, entry_var, set })
    }

    pub fn dim(&self) -> usize {
        self.abar.nrows()
    }

    /// `B = sum_i Cov[A_i(xi)]`; with independent entries this is
    /// `diag(sum_i v_ij)`.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut b = DMatrix::zeros(n, n);
        for j in 0..n {
            b[(j, j)] = self.entry_var.column(j).sum();
        }
        b
    }

    /// `x^T B x`, the total variance of `F(xi, x)`.
    pub fn variance_at(&self, x: &[f64]) -> f64 {
        let b = self.b_matrix();
        dot(x, &matvec(&b, x))
    }

    /// Smallest nonzero eigenvalue of `B` (0 if `B = 0`).
    pub fn lambda_plus(&self) -> f64 {
        let (vals, _) = self.b_eigen();
        let m = vals
            .iter()
            .copied()
            .filter(|v| *v > 1e-12)
            .fold(f64::INFINITY, f64::min);
        if m.is_finite() {
            m
        } else {
            0.0
        }
    }

    fn b_eigen(&self) -> (Vec<f64>, DMatrix<f64>) {
        let e = SymmetricEigen::new(self.b_matrix());
        (e.eigenvalues.as_slice().to_vec(), e.eigenvectors)
    }

    /// Orthogonal projection of `x` onto the complement of `ker B`.
    pub fn x_b(&self, x: &[f64]) -> Vec<f64> {
        let (vals, vecs) = self.b_eigen();
        let xv = DVector::from_column_slice(x);
        let mut out = DVector::zeros(x.len());
        for (i, &v) in vals.iter().enumerate() {
            if v > 1e-12 {
                let u = vecs.column(i);
                out += u * u.dot(&xv);
            }
        }
        out.as_slice().to_vec()
    }

    pub fn lipschitz(&self) -> f64 {
        spectral_norm(&self.abar)
    }

    /// Problem instance with known solution `0` (which solves the problem
    /// on any cone, in particular the orthant and the whole space).
    pub fn to_instance(&self) -> Result<ProblemInstance> {
        let n = self.dim();
        let abar = self.abar.clone();
        let t: Arc<dyn MeanOperator> = Arc::new(FnOperator::new(n, move |x: &[f64]| matvec(&abar, x)));
        let sd: Vec<f64> = self.entry_var.transpose().iter().map(|v| v.sqrt()).collect();
        let oracle = LinearSviOracle {
            n,
            abar: self.abar.transpose().iter().copied().collect(),
            noisy: sd.iter().any(|v| *v > 0.0),
            sd,
        };
        let l = self.lipschitz();
        // random Lipschitz modulus ||A(xi)|| <= ||A_bar|| + ||E||_F
        let sigma = (l + self.entry_var.sum().sqrt()) + l;
        let p = ProblemInstance {
            name: "linear_svi".into(),
            dim: n,
            blocks: vec![n],
            oracle: Arc::new(oracle),
            mean: Some(t),
            lipschitz: l,
            set: self.set.clone(),
            solutions: SolutionSet::Points(vec![vec![0.0; n]]),
            variance: if self.entry_var.iter().all(|v| *v == 0.0) {
                VarianceProfile::Uniform { sigma: 0.0 }
            } else {
                VarianceProfile::PointBased { sigma }
            },
            start: self.set.project(&vec![1.0; n])?,
        };
        p.check()?;
        Ok(p)
    }
}

/// `A_bar = M^T M` from a seeded Gaussian `M`, independent entry noise of
/// standard deviation `noise_scale`, on the nonnegative orthant.
pub fn gen_linear_svi(n: usize, seed: u64, noise_scale: f64) -> Result<LinearSviProblem> {
    if n == 0 {
        return Err(Error::InvalidParameters("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = seeded_gaussian(n, n, &mut rng);
    let abar = m.transpose() * &m / n as f64;
    let v = DMatrix::from_element(n, n, noise_scale * noise_scale);
    LinearSviProblem::new(abar, v, FeasibleSet::NonnegativeOrthant)
}

/// `x^T B x` for a linear SVI.
pub fn variance_at(problem: &LinearSviProblem, x: &[f64]) -> f64 {
    problem.variance_at(x)
}

// ---------------------------------------------------------------------------
// Zero operator with additive noise

struct AdditiveNoise {
    n: usize,
    sigma: f64,
}

impl StochasticOracle for AdditiveNoise {
    fn dim(&self) -> usize {
        self.n
    }

    fn accumulate(&self, rng: &mut StreamRng, _x: &[f64], acc: &mut [f64]) -> Result<()> {
        for a in acc.iter_mut() {
            *a += self.sigma * gauss(rng);
        }
        Ok(())
    }
}

/// `F(xi, x) = xi`, `xi ~ N(0, sigma^2)` in one dimension: `T = 0`, every
/// point is a solution.
pub fn constant_noise(sigma: f64) -> ProblemInstance {
    constant_noise_n(1, sigma)
}

pub fn constant_noise_n(n: usize, sigma: f64) -> ProblemInstance {
    let t: Arc<dyn MeanOperator> = Arc::new(FnOperator::new(n, move |_: &[f64]| vec![0.0; n]));
    ProblemInstance {
        name: "constant_noise".into(),
        dim: n,
        blocks: vec![n],
        oracle: Arc::new(AdditiveNoise { n, sigma }),
        mean: Some(t),
        lipschitz: 1.0,
        set: FeasibleSet::WholeSpace,
        solutions: SolutionSet::Set(FeasibleSet::WholeSpace),
        variance: VarianceProfile::Uniform {
            sigma: sigma * (n as f64).sqrt(),
        },
        start: vec![0.0; n],
    }
}

// ---------------------------------------------------------------------------
// Scaled monotone (pseudo-monotone, not monotone)

struct ScaledOracle {
    abar: DMatrix<f64>,
    sigma: f64,
}

fn scale_field(x: &[f64]) -> f64 {
    1.0 / (1.0 + dot(x, x))
}

impl StochasticOracle for ScaledOracle {
    fn dim(&self) -> usize {
        self.abar.nrows()
    }

    fn accumulate(&self, rng: &mut StreamRng, x: &[f64], acc: &mut [f64]) -> Result<()> {
        self.accumulate_batch(rng, x, 1, acc)
    }

    fn accumulate_batch(&self, rng: &mut StreamRng, x: &[f64], n: u64, acc: &mut [f64]) -> Result<()> {
        let tx = matvec(&self.abar, x);
        let h = scale_field(x) * n as f64;
        for (a, t) in acc.iter_mut().zip(&tx) {
            *a += h * t;
        }
        if self.sigma > 0.0 {
            for _ in 0..n {
                for a in acc.iter_mut() {
                    *a += self.sigma * gauss(rng);
                }
            }
        }
        Ok(())
    }
}

/// `T(x) = A_bar x / (1 + ||x||^2)` with `A_bar = M^T M / n` psd, additive
/// Gaussian noise, on the nonnegative orthant. Solution `0`.
pub fn scaled_monotone(n: usize, seed: u64, sigma: f64) -> Result<ProblemInstance> {
    if n == 0 {
        return Err(Error::InvalidParameters("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = seeded_gaussian(n, n, &mut rng);
    let abar = m.transpose() * &m / n as f64;
    // sup_s (1 + 3s)/(1 + s)^2 = 9/8 bounds the Jacobian of h(x) x
    let l = 1.125 * spectral_norm(&abar);
    let a2 = abar.clone();
    let t: Arc<dyn MeanOperator> = Arc::new(FnOperator::new(n, move |x: &[f64]| {
        let h = scale_field(x);
        matvec(&a2, x).into_iter().map(|v| h * v).collect()
    }));
    let p = ProblemInstance {
        name: "scaled_monotone".into(),
        dim: n,
        blocks: vec![n],
        oracle: Arc::new(ScaledOracle { abar, sigma }),
        mean: Some(t),
        lipschitz: l,
        set: FeasibleSet::NonnegativeOrthant,
        solutions: SolutionSet::Points(vec![vec![0.0; n]]),
        variance: VarianceProfile::Uniform {
            sigma: sigma * (n as f64).sqrt(),
        },
        start: vec![2.0; n],
    };
    p.check()?;
    Ok(p)
}

// ---------------------------------------------------------------------------
// Strongly monotone affine operator

/// Parameters of the strongly monotone instance `T(x) = A_bar (x - x_bar)`
/// with `A_bar = strong I + skew + psd`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StronglyMonotoneSpec {
    pub n: usize,
    pub seed: u64,
    /// Modulus of strong monotonicity.
    pub strong: f64,
    /// Standard deviation of the multiplicative factor in `(1 + s zeta) T(x)`.
    pub mult_noise: f64,
    /// Standard deviation of the additive Gaussian noise per component.
    pub add_noise: f64,
    /// Half-width of the feasible box.
    pub radius: f64,
    /// Starting point; the origin when absent.
    pub start: Option<Vec<f64>>,
}

impl Default for StronglyMonotoneSpec {
    fn default() -> Self {
        Self {
            n: 5,
            seed: 1,
            strong: 1.0,
            mult_noise: 0.5,
            add_noise: 5.0,
            radius: 10.0,
            start: None,
        }
    }
}

struct AffineNoiseOracle {
    abar: DMatrix<f64>,
    center: Vec<f64>,
    mult: f64,
    add: f64,
}

impl StochasticOracle for AffineNoiseOracle {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn accumulate(&self, rng: &mut StreamRng, x: &[f64], acc: &mut [f64]) -> Result<()> {
        self.accumulate_batch(rng, x, 1, acc)
    }

    fn accumulate_batch(&self, rng: &mut StreamRng, x: &[f64], n: u64, acc: &mut [f64]) -> Result<()> {
        let tx = matvec(&self.abar, &sub(x, &self.center));
        let mut factor = 0.0;
        for _ in 0..n {
            factor += 1.0 + self.mult * gauss(rng);
            for a in acc.iter_mut() {
                *a += self.add * gauss(rng);
            }
        }
        for (a, t) in acc.iter_mut().zip(&tx) {
            *a += factor * t;
        }
        Ok(())
    }
}

pub fn strongly_monotone(spec: &StronglyMonotoneSpec) -> Result<ProblemInstance> {
    let n = spec.n;
    if n == 0 || !(spec.strong > 0.0) || !(spec.radius > 0.0) || spec.mult_noise < 0.0 || spec.add_noise < 0.0 {
        return Err(Error::InvalidParameters(format!(
            "invalid strongly monotone parameters {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = seeded_gaussian(n, n, &mut rng);
    let h = seeded_gaussian(n, n, &mut rng);
    let skew = (&g - g.transpose()) * 0.25;
    let psd = h.transpose() * &h * (0.2 / n as f64);
    let abar = DMatrix::identity(n, n) * spec.strong + skew + psd;
    let center: Vec<f64> = (0..n).map(|_| rng.random_range(-0.4..0.4) * spec.radius).collect();
    let l = spectral_norm(&abar);
    let (a2, c2) = (abar.clone(), center.clone());
    let t: Arc<dyn MeanOperator> = Arc::new(FnOperator::new(n, move |x: &[f64]| matvec(&a2, &sub(x, &c2))));
    let set = FeasibleSet::boxed(vec![-spec.radius; n], vec![spec.radius; n])?;
    let sigma = (spec.mult_noise * l).max(spec.add_noise * (n as f64).sqrt());
    let start = match &spec.start {
        Some(s) if s.len() != n => {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: s.len(),
            })
        }
        Some(s) => set.project(s)?,
        None => vec![0.0; n],
    };
    let p = ProblemInstance {
        name: "strongly_monotone".into(),
        dim: n,
        blocks: vec![n],
        oracle: Arc::new(AffineNoiseOracle {
            abar,
            center: center.clone(),
            mult: spec.mult_noise,
            add: spec.add_noise,
        }),
        mean: Some(t),
        lipschitz: l,
        set,
        solutions: SolutionSet::Points(vec![center]),
        variance: if spec.mult_noise == 0.0 {
            VarianceProfile::Uniform {
                sigma: spec.add_noise * (n as f64).sqrt(),
            }
        } else {
            VarianceProfile::PointBased { sigma }
        },
        start,
    };
    p.check()?;
    Ok(p)
}

/// `T(x) = -x` on a box around the origin, with additive noise. Not
/// pseudo-monotone; used as a negative control.
pub fn negated_identity(n: usize, sigma: f64) -> Result<ProblemInstance> {
    let t: Arc<dyn MeanOperator> = Arc::new(FnOperator::new(n, |x: &[f64]| x.iter().map(|v| -v).collect()));
    struct Neg {
        n: usize,
        sigma: f64,
    }
    impl StochasticOracle for Neg {
        fn dim(&self) -> usize {
            self.n
        }
        fn accumulate(&self, rng: &mut StreamRng, x: &[f64], acc: &mut [f64]) -> Result<()> {
            for (a, v) in acc.iter_mut().zip(x) {
                *a += -v + self.sigma * gauss(rng);
            }
            Ok(())
        }
    }
    let p = ProblemInstance {
        name: "negated_identity".into(),
        dim: n,
        blocks: vec![n],
        oracle: Arc::new(Neg { n, sigma }),
        mean: Some(t),
        lipschitz: 1.0,
        set: FeasibleSet::boxed(vec![-10.0; n], vec![10.0; n])?,
        solutions: SolutionSet::Points(vec![vec![0.0; n]]),
        variance: VarianceProfile::Uniform {
            sigma: sigma * (n as f64).sqrt(),
        },
        start: vec![0.5; n],
    };
    p.check()?;
    Ok(p)
}

// ---------------------------------------------------------------------------
// Randomized checks

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoMonotoneReport {
    pub pairs: usize,
    /// Pairs with `<T(x), z - x> >= 0`.
    pub tested: usize,
    pub violations: usize,
    pub worst: f64,
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub passed: bool,
}

/// Draws `samples` random pairs in the set and looks for
/// `<T(x), z - x> >= 0` with `<T(z), z - x> < -1e-10`.
pub fn check_pseudo_monotone(
    t: &dyn MeanOperator,
    set: &FeasibleSet,
    samples: usize,
    seed: u64,
) -> Result<PseudoMonotoneReport> {
    let n = t.dim();
    let mut rng = derive_stream(&RngStreamKey::new(seed, 0, 0, Stage::Xi));
    let mut rep = PseudoMonotoneReport {
        pairs: samples,
        tested: 0,
        violations: 0,
        worst: 0.0,
        witness: None,
        passed: true,
    };
    for s in 0..samples {
        let scale = [0.5, 2.0, 8.0][s % 3];
        let x = set.sample_point(n, scale, &mut rng)?;
        let z = set.sample_point(n, scale, &mut rng)?;
        let d = sub(&z, &x);
        if dot(&t.eval(&x), &d) >= 0.0 {
            rep.tested += 1;
            let v = dot(&t.eval(&z), &d);
            if v < -1e-10 {
                rep.violations += 1;
                if v < rep.worst {
                    rep.worst = v;
                    rep.witness = Some((x, z));
                }
            }
        }
    }
    rep.passed = rep.violations == 0;
    Ok(rep)
}

/// `max ||T(x) - T(z)|| / ||x - z||` over random pairs in the set.
pub fn lipschitz_estimate(t: &dyn MeanOperator, set: &FeasibleSet, samples: usize, seed: u64) -> Result<f64> {
    let n = t.dim();
    let mut rng = derive_stream(&RngStreamKey::new(seed, 0, 0, Stage::Eta));
    let mut best = 0.0f64;
    for s in 0..samples {
        let scale = [0.5, 2.0, 8.0][s % 3];
        let x = set.sample_point(n, scale, &mut rng)?;
        let z = set.sample_point(n, scale, &mut rng)?;
        let d = dist_sq(&x, &z).sqrt();
        if d > 1e-12 {
            best = best.max(dist_sq(&t.eval(&x), &t.eval(&z)).sqrt() / d);
        }
    }
    Ok(best)
}

/// Largest componentwise `|mean - T(x)| / stderr` over `n` oracle draws.
pub fn oracle_mean_check(problem: &ProblemInstance, x: &[f64], n: u64, seed: u64) -> Result<f64> {
    let t = problem.mean.as_ref().ok_or(Error::NoMeanOperator)?;
    let tx = t.eval(x);
    let mut rng = derive_stream(&RngStreamKey::new(seed, 0, 0, Stage::Xi));
    let mut accs = vec![MeanAccumulator::default(); problem.dim];
    let mut buf = vec![0.0; problem.dim];
    for _ in 0..n {
        buf.iter_mut().for_each(|v| *v = 0.0);
        problem.oracle.accumulate(&mut rng, x, &mut buf)?;
        for (a, v) in accs.iter_mut().zip(&buf) {
            a.push(*v);
        }
    }
    let mut worst = 0.0f64;
    for (a, t) in accs.iter().zip(&tx) {
        let dev = (a.mean() - t).abs();
        let se = a.stderr();
        let z = if se > 0.0 {
            dev / se
        } else if dev <= 1e-12 * (1.0 + t.abs()) {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    Ok(worst)
}

/// Empirical total variance `E||F(xi,x) - E F||^2` over `n` draws, with its stderr.
pub fn empirical_variance(problem: &ProblemInstance, x: &[f64], n: u64, seed: u64) -> Result<(f64, f64)> {
    let t = problem.mean.as_ref().ok_or(Error::NoMeanOperator)?;
    let tx = t.eval(x);
    let mut rng = derive_stream(&RngStreamKey::new(seed, 0, 0, Stage::Xi));
    let mut acc = MeanAccumulator::default();
    let mut buf = vec![0.0; problem.dim];
    for _ in 0..n {
        buf.iter_mut().for_each(|v| *v = 0.0);
        problem.oracle.accumulate(&mut rng, x, &mut buf)?;
        acc.push(dist_sq(&buf, &tx));
    }
    Ok((acc.mean(), acc.stderr()))
}

/// Norm helper re-exported for callers building problems by hand.
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    spectral_norm(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn noiseless_linear_has_zero_b() {
        let p = gen_linear_svi(4, 3, 0.0).unwrap();
        assert_eq!(p.b_matrix(), DMatrix::zeros(4, 4));
        let inst = p.to_instance().unwrap();
        assert_eq!(inst.variance, VarianceProfile::Uniform { sigma: 0.0 });
    }

    #[test]
    fn scalar_variance_law() {
        let v = 0.7;
        let p = LinearSviProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, v),
            FeasibleSet::WholeSpace,
        )
        .unwrap();
        assert_abs_diff_eq!(p.variance_at(&[3.0]), v * 9.0, epsilon = 1e-14);
    }

    #[test]
    fn variance_lower_bound() {
        let p = LinearSviProblem::new(
            DMatrix::identity(3, 3),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 2.0]),
            FeasibleSet::WholeSpace,
        )
        .unwrap();
        // B = diag(1.5, 0, 2)
        assert_abs_diff_eq!(p.lambda_plus(), 1.5, epsilon = 1e-12);
        assert_eq!(p.variance_at(&[0.0, 5.0, 0.0]), 0.0);
        let x = [1.0, -2.0, 0.5];
        let xb = p.x_b(&x);
        assert_abs_diff_eq!(xb[1], 0.0, epsilon = 1e-12);
        assert!(p.variance_at(&x) >= p.lambda_plus() * crate::vecops::norm_sq(&xb) - 1e-10);
    }

    #[test]
    fn identity_b() {
        let p = LinearSviProblem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            FeasibleSet::WholeSpace,
        )
        .unwrap();
        assert_abs_diff_eq!(p.variance_at(&[1.0, 1.0]), 2.0);
    }

    #[test]
    fn pseudo_monotone_checks() {
        let p = scaled_monotone(4, 2, 0.0).unwrap();
        let r = check_pseudo_monotone(p.mean.as_deref().unwrap(), &p.set, 2000, 1).unwrap();
        assert!(r.passed && r.tested > 0, "{r:?}");
        let lin = gen_linear_svi(4, 2, 0.1).unwrap().to_instance().unwrap();
        assert!(
            check_pseudo_monotone(lin.mean.as_deref().unwrap(), &FeasibleSet::WholeSpace, 2000, 1)
                .unwrap()
                .passed
        );
        let neg = FnOperator::new(1, |x: &[f64]| vec![-x[0]]);
        let r = check_pseudo_monotone(&neg, &FeasibleSet::WholeSpace, 200, 1).unwrap();
        assert!(!r.passed && r.witness.is_some());
    }

    #[test]
    fn scaled_operator_is_not_monotone() {
        let p = scaled_monotone(2, 0, 0.0).unwrap();
        let t = p.mean.as_deref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut found = false;
        for _ in 0..5000 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..4.0)).collect();
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..4.0)).collect();
            if dot(&sub(&t.eval(&x), &t.eval(&z)), &sub(&x, &z)) < -1e-8 {
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn lipschitz_estimates() {
        let two = FnOperator::new(3, |x: &[f64]| x.iter().map(|v| 2.0 * v).collect());
        let e = lipschitz_estimate(&two, &FeasibleSet::WholeSpace, 100, 0).unwrap();
        assert!((2.0 - 1e-10..=2.0 + 1e-12).contains(&e), "{e}");
        let c = FnOperator::new(3, |_: &[f64]| vec![1.0, 2.0, 3.0]);
        assert_eq!(lipschitz_estimate(&c, &FeasibleSet::WholeSpace, 100, 0).unwrap(), 0.0);
        let lin = gen_linear_svi(5, 9, 0.0).unwrap();
        let inst = lin.to_instance().unwrap();
        let est = lipschitz_estimate(inst.mean.as_deref().unwrap(), &FeasibleSet::WholeSpace, 5000, 0).unwrap();
        assert!(est <= lin.lipschitz() + 1e-10 && est >= 0.3 * lin.lipschitz());
        let s = scaled_monotone(3, 4, 0.0).unwrap();
        let est = lipschitz_estimate(s.mean.as_deref().unwrap(), &FeasibleSet::WholeSpace, 5000, 0).unwrap();
        assert!(est <= s.lipschitz + 1e-10);
    }

    #[test]
    fn strongly_monotone_is_strongly_monotone() {
        let spec = StronglyMonotoneSpec::default();
        let p = strongly_monotone(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let g = seeded_gaussian(5, 5, &mut rng);
        let h = seeded_gaussian(5, 5, &mut rng);
        let m = DMatrix::identity(5, 5) + (&g - g.transpose()) * 0.25 + h.transpose() * &h * 0.04;
        assert!(min_sym_eigenvalue(&m) >= spec.strong - 1e-12);
        let xs = p.solutions.points()[0].clone();
        assert!(xs.iter().all(|v| v.abs() < spec.radius));
    }

    #[test]
    fn batched_oracle_matches_single_draws() {
        let p = strongly_monotone(&StronglyMonotoneSpec::default()).unwrap();
        let x = vec![1.0, 2.0, -1.0, 0.5, 3.0];
        let key = RngStreamKey::new(1, 0, 0, Stage::Xi);
        let mut a = vec![0.0; 5];
        p.oracle
            .accumulate_batch(&mut derive_stream(&key), &x, 50, &mut a)
            .unwrap();
        let mut b = vec![0.0; 5];
        let mut rng = derive_stream(&key);
        for _ in 0..50 {
            p.oracle.accumulate(&mut rng, &x, &mut b).unwrap();
        }
        for (u, v) in a.iter().zip(&b) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-9);
        }
    }
}

#[cfg(test)]
mod statistical_tests {
    use super::*;
    use crate::suites::reference_problems;

    #[test]
    fn linear_svi_variance_matches_quadratic_form() {
        let lp = gen_linear_svi(4, 9, 0.4).unwrap();
        let p = lp.to_instance().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5u64 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (v, se) = empirical_variance(&p, &x, 10_000, trial).unwrap();
            let want = lp.variance_at(&x);
            assert!((v - want).abs() <= 4.0 * se, "x={x:?}: {v} vs {want} (se {se})");
        }
    }

    #[test]
    fn batched_oracles_consume_streams_like_single_calls() {
        for p in reference_problems() {
            let key = RngStreamKey::new(3, 1, 4, Stage::Eta);
            let x = p.start.clone();
            for n in [1u64, 2, 7, 33] {
                let mut single = derive_stream(&key);
                let mut a = vec![0.0; p.dim];
                for _ in 0..n {
                    p.oracle.accumulate(&mut single, &x, &mut a).unwrap();
                }
                let mut batch = derive_stream(&key);
                let mut b = vec![0.0; p.dim];
                p.oracle.accumulate_batch(&mut batch, &x, n, &mut b).unwrap();
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()), "{}: {a:?} vs {b:?}", p.name);
                }
                assert_eq!(single.random::<u64>(), batch.random::<u64>(), "{} n={n}", p.name);
            }
        }
    }
}
