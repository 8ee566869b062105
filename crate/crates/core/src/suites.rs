//! Randomized property suites for projections and merit functions, run
//! against a fixed catalogue of sets and test problems. Custom projection
//! handles can be checked with [`check_projection_properties`] directly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::merit::{d_gap, natural_residual_sq, regularized_gap};
use crate::model::{FnOperator, ProblemInstance};
use crate::problems::{self, StronglyMonotoneSpec};
use crate::projection::{check_projection_properties, AffineSet, CustomProjection, FeasibleSet, PropertyReport};

/// Dimension of the reference sets.
pub const SET_DIM: usize = 6;

/// One instance of every supported set type in dimension [`SET_DIM`].
pub fn reference_sets() -> Vec<(&'static str, FeasibleSet)> {
    let affine = AffineSet::new(
        DMatrix::from_row_slice(
            2,
            SET_DIM,
            &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, -2.0],
        ),
        DVector::from_vec(vec![1.0, -0.5]),
    )
    .expect("full-rank constraints");
    let ball = FeasibleSet::Ball {
        center: vec![0.5; SET_DIM],
        radius: 1.5,
    };
    let custom_ball = {
        let b = ball.clone();
        FeasibleSet::Custom(CustomProjection {
            name: "wrapped_ball".into(),
            dim: Some(SET_DIM),
            project: Arc::new(move |x: &[f64]| b.project(x).expect("ball projection")),
        })
    };
    vec![
        ("whole_space", FeasibleSet::WholeSpace),
        (
            "box",
            FeasibleSet::Box {
                lower: vec![-1.0; SET_DIM],
                upper: vec![0.5, 1.0, 2.0, 0.0, 1.0, 3.0],
            },
        ),
        ("orthant", FeasibleSet::NonnegativeOrthant),
        ("ball", ball),
        ("simplex", FeasibleSet::Simplex { scale: 2.0 }),
        (
            "halfspace",
            FeasibleSet::Halfspace {
                normal: vec![1.0, -1.0, 2.0, 0.0, 0.5, 1.0],
                offset: 0.7,
            },
        ),
        ("affine", FeasibleSet::Affine(affine)),
        (
            "cartesian",
            FeasibleSet::cartesian(vec![
                (
                    2,
                    FeasibleSet::Box {
                        lower: vec![0.0; 2],
                        upper: vec![1.0; 2],
                    },
                ),
                (
                    2,
                    FeasibleSet::Ball {
                        center: vec![0.0; 2],
                        radius: 1.0,
                    },
                ),
                (2, FeasibleSet::Simplex { scale: 1.0 }),
            ])
            .expect("valid blocks"),
        ),
        ("custom", custom_ball),
    ]
}

/// Projection properties on every reference set.
pub fn projection_suite(trials: usize, seed: u64) -> Vec<(&'static str, PropertyReport)> {
    reference_sets()
        .into_iter()
        .flat_map(|(name, set)| {
            check_projection_properties(&set, SET_DIM, trials, seed)
                .expect("reference sets project")
                .into_iter()
                .map(move |r| (name, r))
        })
        .collect()
}

/// The built-in problems with closed-form mean operators.
pub fn reference_problems() -> Vec<ProblemInstance> {
    vec![
        problems::strongly_monotone(&StronglyMonotoneSpec::default()).expect("default instance"),
        problems::scaled_monotone(4, 3, 0.5).expect("valid parameters"),
        problems::gen_linear_svi(4, 5, 0.3)
            .and_then(|p| p.to_instance())
            .expect("valid parameters"),
        problems::constant_noise_n(3, 1.0),
        problems::negated_identity(3, 0.0).expect("valid parameters"),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeritPropertyReport {
    pub property: String,
    pub trials: usize,
    pub failures: usize,
    /// Largest deviation seen, in the property's own units.
    pub worst: f64,
}

impl MeritPropertyReport {
    fn new(property: &str) -> Self {
        Self {
            property: property.into(),
            trials: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Randomized merit invariants with `trials` draws each: zero-set agreement
/// of the D-gap and the residual on the reference problems (known solutions
/// included), nonnegativity of the D-gap, the closed-form residual of a
/// translated identity, and `g_4 <= g_2` for the regularized gap.
pub fn merit_suite(trials: usize, seed: u64) -> Vec<MeritPropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = reference_problems();
    let per = trials.div_ceil(probs.len());

    let mut sign = MeritPropertyReport::new("sign_consistency");
    let mut nonneg = MeritPropertyReport::new("dgap_nonnegative");
    for p in &probs {
        let t = p.mean.as_ref().expect("reference problems have T");
        let mut points: Vec<Vec<f64>> = p.solutions.points().to_vec();
        while points.len() < per {
            let scale = [0.01, 1.0, 5.0][points.len() % 3];
            let x: Vec<f64> = p
                .start
                .iter()
                .zip(gauss_vec(&mut rng, p.dim, scale))
                .map(|(a, g)| a + g)
                .collect();
            points.push(p.set.project(&x).expect("reference sets project"));
        }
        for x in &points {
            let alpha = 0.1 + rng.random::<f64>();
            let r2 = natural_residual_sq(t.as_ref(), &p.set, x, alpha).expect("residual");
            let g = d_gap(t.as_ref(), &p.set, x, 1.0, 2.0).expect("d-gap");
            sign.trials += 1;
            nonneg.trials += 1;
            if (g > 1e-12) != (r2 > 1e-12) {
                sign.failures += 1;
                sign.worst = sign.worst.max((g - r2).abs());
            }
            if g < -1e-10 {
                nonneg.failures += 1;
            }
            nonneg.worst = nonneg.worst.min(g);
        }
    }

    let mut transl = MeritPropertyReport::new("translated_identity");
    let mut order = MeritPropertyReport::new("gap_decreasing_in_a");
    for _ in 0..trials {
        let n = rng.random_range(1..=8);
        let center = gauss_vec(&mut rng, n, 2.0);
        let x = gauss_vec(&mut rng, n, 2.0);
        let alpha = rng.random_range(0.01..2.0);
        let c = center.clone();
        let t = FnOperator::new(n, move |y: &[f64]| y.iter().zip(&c).map(|(a, b)| a - b).collect());
        let r2 = natural_residual_sq(&t, &FeasibleSet::WholeSpace, &x, alpha).expect("residual");
        let want: f64 = alpha * alpha * x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let err = (r2 - want).abs() / want.max(f64::MIN_POSITIVE);
        transl.trials += 1;
        if err > 1e-12 {
            transl.failures += 1;
        }
        transl.worst = transl.worst.max(err);

        let set = FeasibleSet::Box {
            lower: vec![-1.0; n],
            upper: vec![1.0; n],
        };
        let x = set.project(&x).expect("box projection");
        let g2 = regularized_gap(&t, &set, &x, 2.0).expect("gap");
        let g4 = regularized_gap(&t, &set, &x, 4.0).expect("gap");
        order.trials += 1;
        if g4 > g2 + 1e-12 {
            order.failures += 1;
        }
        order.worst = order.worst.max(g4 - g2);
    }
    vec![sign, nonneg, transl, order]
}
