//! Exact Euclidean projections onto closed convex sets.
//!
//! [`FeasibleSet`] covers the common sets in closed form and Cartesian
//! products of them. Anything else can be plugged in through
//! [`CustomProjection`]; [`check_projection_properties`] runs the same
//! randomized property suite the built-in sets are held to.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_stream, RngStreamKey, Stage};
use crate::vecops::{dist_sq, dot, norm};

/// A closed convex set with an exact projection.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeasibleSet {
    WholeSpace,
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    NonnegativeOrthant,
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    /// `{ y >= 0 : sum(y) = scale }`
    Simplex {
        scale: f64,
    },
    /// `{ y : <normal, y> <= offset }`
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
    },
    Affine(AffineSet),
    Cartesian {
        blocks: Vec<CartesianBlock>,
    },
    #[serde(skip)]
    Custom(CustomProjection),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartesianBlock {
    pub size: usize,
    pub set: FeasibleSet,
}

/// User-supplied projection map.
pub type ProjectFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// User-supplied projection handle.
#[derive(Clone)]
pub struct CustomProjection {
    pub name: String,
    pub dim: Option<usize>,
    pub project: ProjectFn,
}

impl fmt::Debug for CustomProjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomProjection")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

/// `{ y : A y = b }` with `A A^T` factored once at construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "AffineSpec", into = "AffineSpec")]
pub struct AffineSet {
    matrix: DMatrix<f64>,
    rhs: DVector<f64>,
    gram: Cholesky<f64, Dyn>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineSpec {
    /// Constraint rows.
    matrix: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl TryFrom<AffineSpec> for AffineSet {
    type Error = Error;

    fn try_from(spec: AffineSpec) -> Result<Self> {
        let rows = spec.matrix.len();
        if rows == 0 {
            return Err(Error::InvalidSet("affine set needs at least one row".into()));
        }
        let cols = spec.matrix[0].len();
        if spec.matrix.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidSet("ragged affine matrix".into()));
        }
        let flat: Vec<f64> = spec.matrix.into_iter().flatten().collect();
        AffineSet::new(DMatrix::from_row_slice(rows, cols, &flat), DVector::from_vec(spec.rhs))
    }
}

impl From<AffineSet> for AffineSpec {
    fn from(set: AffineSet) -> Self {
        let matrix = set.matrix.row_iter().map(|r| r.iter().copied().collect()).collect();
        AffineSpec {
            matrix,
            rhs: set.rhs.iter().copied().collect(),
        }
    }
}

impl AffineSet {
    pub fn new(matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self> {
        if matrix.nrows() != rhs.len() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: rhs.len(),
            });
        }
        let svd = matrix.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = 1e-12 * smax.max(1.0) * matrix.nrows().max(matrix.ncols()) as f64;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        if rank < matrix.nrows() {
            let sol = svd.solve(&rhs, tol).map_err(|e| Error::InvalidSet(e.to_string()))?;
            let resid = (&matrix * sol - &rhs).norm();
            return Err(if resid > 1e-9 * (1.0 + rhs.norm()) {
                Error::InfeasibleAffine
            } else {
                Error::RankDeficientAffine
            });
        }
        let gram = Cholesky::new(&matrix * matrix.transpose()).ok_or(Error::RankDeficientAffine)?;
        Ok(Self { matrix, rhs, gram })
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        let resid = &self.matrix * &xv - &self.rhs;
        let lambda = self.gram.solve(&resid);
        let y = xv - self.matrix.transpose() * lambda;
        y.iter().copied().collect()
    }
}

impl FeasibleSet {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let s = FeasibleSet::Box { lower, upper };
        s.validate()?;
        Ok(s)
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let s = FeasibleSet::Ball { center, radius };
        s.validate()?;
        Ok(s)
    }

    pub fn simplex(scale: f64) -> Result<Self> {
        let s = FeasibleSet::Simplex { scale };
        s.validate()?;
        Ok(s)
    }

    pub fn halfspace(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let s = FeasibleSet::Halfspace { normal, offset };
        s.validate()?;
        Ok(s)
    }

    pub fn cartesian(parts: Vec<(usize, FeasibleSet)>) -> Result<Self> {
        let s = FeasibleSet::Cartesian {
            blocks: parts
                .into_iter()
                .map(|(size, set)| CartesianBlock { size, set })
                .collect(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Checks the descriptor invariants.
    pub fn validate(&self) -> Result<()> {
        match self {
            FeasibleSet::WholeSpace | FeasibleSet::NonnegativeOrthant | FeasibleSet::Affine(_) => Ok(()),
            FeasibleSet::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err(Error::DimensionMismatch {
                        expected: lower.len(),
                        got: upper.len(),
                    });
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return Err(Error::InvalidSet("box requires lower <= upper".into()));
                }
                Ok(())
            }
            FeasibleSet::Ball { radius, .. } => {
                if !(*radius > 0.0) || !radius.is_finite() {
                    return Err(Error::InvalidSet("ball radius must be positive".into()));
                }
                Ok(())
            }
            FeasibleSet::Simplex { scale } => {
                if !(*scale > 0.0) || !scale.is_finite() {
                    return Err(Error::InvalidSet("simplex scale must be positive".into()));
                }
                Ok(())
            }
            FeasibleSet::Halfspace { normal, offset } => {
                if norm(normal) == 0.0 || !offset.is_finite() {
                    return Err(Error::InvalidSet("halfspace needs a nonzero normal".into()));
                }
                Ok(())
            }
            FeasibleSet::Cartesian { blocks } => {
                if blocks.is_empty() {
                    return Err(Error::InvalidSet("cartesian product with no blocks".into()));
                }
                for b in blocks {
                    if b.size == 0 {
                        return Err(Error::InvalidSet("empty cartesian block".into()));
                    }
                    if let Some(d) = b.set.fixed_dim() {
                        if d != b.size {
                            return Err(Error::BlockMismatch {
                                blocks: vec![b.size],
                                dim: d,
                            });
                        }
                    }
                    b.set.validate()?;
                }
                Ok(())
            }
            FeasibleSet::Custom(_) => Ok(()),
        }
    }

    /// Dimension implied by the descriptor, if any.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            FeasibleSet::WholeSpace | FeasibleSet::NonnegativeOrthant | FeasibleSet::Simplex { .. } => None,
            FeasibleSet::Box { lower, .. } => Some(lower.len()),
            FeasibleSet::Ball { center, .. } => Some(center.len()),
            FeasibleSet::Halfspace { normal, .. } => Some(normal.len()),
            FeasibleSet::Affine(a) => Some(a.dim()),
            FeasibleSet::Cartesian { blocks } => Some(blocks.iter().map(|b| b.size).sum()),
            FeasibleSet::Custom(c) => c.dim,
        }
    }

    /// Splits a Cartesian descriptor into `(size, set)` blocks; any other
    /// set of dimension `n` is a single block.
    pub fn blocks(&self, n: usize) -> Vec<(usize, &FeasibleSet)> {
        match self {
            FeasibleSet::Cartesian { blocks } => blocks.iter().map(|b| (b.size, &b.set)).collect(),
            other => vec![(n, other)],
        }
    }

    /// Euclidean projection of `x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if let Some(d) = self.fixed_dim() {
            if d != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: x.len(),
                });
            }
        }
        Ok(match self {
            FeasibleSet::WholeSpace => x.to_vec(),
            FeasibleSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(&v, (&l, &u))| v.clamp(l, u))
                .collect(),
            FeasibleSet::NonnegativeOrthant => x.iter().map(|&v| v.max(0.0)).collect(),
            FeasibleSet::Ball { center, radius } => {
                let d = dist_sq(x, center).sqrt();
                if d <= *radius {
                    x.to_vec()
                } else {
                    let s = radius / d;
                    x.iter().zip(center).map(|(v, c)| c + s * (v - c)).collect()
                }
            }
            FeasibleSet::Simplex { scale } => project_simplex(x, *scale),
            FeasibleSet::Halfspace { normal, offset } => {
                let excess = dot(normal, x) - offset;
                if excess <= 0.0 {
                    x.to_vec()
                } else {
                    let s = excess / dot(normal, normal);
                    x.iter().zip(normal).map(|(v, a)| v - s * a).collect()
                }
            }
            FeasibleSet::Affine(a) => a.project(x),
            FeasibleSet::Cartesian { blocks } => {
                let mut out = Vec::with_capacity(x.len());
                let mut off = 0;
                for b in blocks {
                    out.extend(b.set.project(&x[off..off + b.size])?);
                    off += b.size;
                }
                out
            }
            FeasibleSet::Custom(c) => {
                let y = (c.project)(x);
                if y.len() != x.len() {
                    return Err(Error::DimensionMismatch {
                        expected: x.len(),
                        got: y.len(),
                    });
                }
                y
            }
        })
    }

    /// `||x - project(x)||`.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        let p = self.project(x)?;
        Ok(dist_sq(x, &p).sqrt())
    }

    /// Draws a random point of the set by projecting a scaled Gaussian.
    pub fn sample_point<R: Rng + ?Sized>(&self, n: usize, scale: f64, rng: &mut R) -> Result<Vec<f64>> {
        let raw: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        self.project(&raw)
    }
}

/// Sort-and-threshold projection onto `{ y >= 0 : sum(y) = scale }`.
fn project_simplex(x: &[f64], scale: f64) -> Vec<f64> {
    let mut u = x.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - scale) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    x.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Blockwise projection onto `X^1 x ... x X^m`.
pub fn project_cartesian(sets: &[(usize, FeasibleSet)], x: &[f64]) -> Result<Vec<f64>> {
    let total: usize = sets.iter().map(|(s, _)| s).sum();
    if total != x.len() {
        return Err(Error::BlockMismatch {
            blocks: sets.iter().map(|(s, _)| *s).collect(),
            dim: x.len(),
        });
    }
    let mut out = Vec::with_capacity(x.len());
    let mut off = 0;
    for (size, set) in sets {
        out.extend(set.project(&x[off..off + size])?);
        off += size;
    }
    Ok(out)
}

/// `dist(x, set)`.
pub fn set_distance(set: &FeasibleSet, x: &[f64]) -> Result<f64> {
    set.distance(x)
}

/// Outcome of one randomized projection property.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyReport {
    pub property: String,
    pub trials: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Randomized check of the projection lemma on `set` in dimension `n`:
/// nonexpansiveness, the variational characterization, the firm
/// inequality, and idempotence.
pub fn check_projection_properties(
    set: &FeasibleSet,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<PropertyReport>> {
    let mut rng = derive_stream(&RngStreamKey::new(seed, 0, 0, Stage::Xi));
    let gauss = |rng: &mut crate::rng::StreamRng, s: f64| -> Vec<f64> {
        (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let mut nonexp = 0.0f64;
    let mut charac = 0.0f64;
    let mut firm = 0.0f64;
    let mut idem = 0.0f64;
    let char_inner = 100;
    for t in 0..trials {
        let x = gauss(&mut rng, 3.0);
        let y = gauss(&mut rng, 3.0);
        let px = set.project(&x)?;
        let py = set.project(&y)?;
        nonexp = nonexp.max(dist_sq(&px, &py).sqrt() - dist_sq(&x, &y).sqrt());
        let ppx = set.project(&px)?;
        idem = idem.max(dist_sq(&ppx, &px).sqrt());
        // the characterization uses many feasible points per x; spread them
        // over the trials so the suite stays linear in `trials`
        let inner = if t < trials / char_inner.max(1) { char_inner } else { 1 };
        let r: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
        for _ in 0..inner {
            let w = set.project(&gauss(&mut rng, 3.0))?;
            let d: Vec<f64> = w.iter().zip(&px).map(|(a, b)| a - b).collect();
            charac = charac.max(dot(&r, &d));
            firm = firm.max(dist_sq(&px, &w) + dist_sq(&px, &x) - dist_sq(&x, &w));
        }
    }
    let mk = |name: &str, v: f64, tol: f64| PropertyReport {
        property: name.to_string(),
        trials,
        max_violation: v.max(0.0),
        tolerance: tol,
        passed: v <= tol,
    };
    Ok(vec![
        mk("nonexpansive", nonexp, 1e-12),
        mk("characterization", charac, 1e-10),
        mk("firm_inequality", firm, 1e-10),
        mk("idempotent", idem, 1e-14),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn box_clamps() {
        let s = FeasibleSet::boxed(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(s.project(&[-0.5, 2.0]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn ball_scales_radially() {
        let s = FeasibleSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        let p = s.project(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(s.distance(&[3.0, 4.0]).unwrap(), 4.0, epsilon = 1e-14);
    }

    /// Brute-force oracle: for tiny n, the simplex projection is the best
    /// among projections onto each face `{y_S > 0, y_rest = 0}` restricted
    /// to the affine hull, keeping only feasible candidates.
    fn simplex_oracle(x: &[f64], scale: f64) -> Vec<f64> {
        let n = x.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let shift = (idx.iter().map(|&i| x[i]).sum::<f64>() - scale) / idx.len() as f64;
            let mut y = vec![0.0; n];
            for &i in &idx {
                y[i] = x[i] - shift;
            }
            if y.iter().all(|&v| v >= -1e-15) {
                let d = dist_sq(&y, x);
                if best.as_ref().is_none_or(|(b, _)| d < *b) {
                    best = Some((d, y));
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn simplex_matches_face_enumeration() {
        let s = FeasibleSet::simplex(1.0).unwrap();
        let p = s.project(&[0.8, 0.8]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);
        let mut rng = derive_stream(&RngStreamKey::new(5, 0, 0, Stage::Xi));
        for _ in 0..500 {
            let x: Vec<f64> = (0..4).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let scale = 0.5 + rng.random::<f64>() * 2.0;
            let a = project_simplex(&x, scale);
            let b = simplex_oracle(&x, scale);
            for (u, v) in a.iter().zip(&b) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn orthant_distance_uses_negative_part() {
        let s = FeasibleSet::NonnegativeOrthant;
        assert_abs_diff_eq!(s.distance(&[-3.0, 4.0]).unwrap(), 3.0);
        assert_eq!(s.distance(&[1.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn cartesian_blockwise() {
        let sets = vec![
            (1, FeasibleSet::boxed(vec![0.0], vec![1.0]).unwrap()),
            (1, FeasibleSet::NonnegativeOrthant),
        ];
        assert_eq!(project_cartesian(&sets, &[2.0, -1.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            project_cartesian(&sets, &[1.0, 2.0, 3.0]),
            Err(Error::BlockMismatch { .. })
        ));
        let single = vec![(2, FeasibleSet::ball(vec![0.0, 0.0], 1.0).unwrap())];
        assert_eq!(
            project_cartesian(&single, &[3.0, 4.0]).unwrap(),
            single[0].1.project(&[3.0, 4.0]).unwrap()
        );
    }

    #[test]
    fn halfspace_and_affine() {
        let h = FeasibleSet::halfspace(vec![1.0, 1.0], 1.0).unwrap();
        let p = h.project(&[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        let a = AffineSet::new(
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        let p = FeasibleSet::Affine(a).project(&[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn affine_rank_errors() {
        let dup = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(
            AffineSet::new(dup.clone(), DVector::from_vec(vec![1.0, 2.0])),
            Err(Error::RankDeficientAffine)
        ));
        assert!(matches!(
            AffineSet::new(dup, DVector::from_vec(vec![1.0, 3.0])),
            Err(Error::InfeasibleAffine)
        ));
    }

    #[test]
    fn dimension_checked() {
        let s = FeasibleSet::ball(vec![0.0; 3], 1.0).unwrap();
        assert!(matches!(s.project(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn invalid_descriptors_rejected() {
        assert!(FeasibleSet::boxed(vec![1.0], vec![0.0]).is_err());
        assert!(FeasibleSet::ball(vec![0.0], 0.0).is_err());
        assert!(FeasibleSet::simplex(-1.0).is_err());
    }

    #[test]
    fn json_round_trip_keeps_affine_factorization() {
        let json = r#"{"type":"cartesian","blocks":[
            {"size":2,"set":{"type":"affine","matrix":[[1.0,1.0]],"rhs":[1.0]}},
            {"size":1,"set":{"type":"nonnegative_orthant"}}]}"#;
        let s: FeasibleSet = serde_json::from_str(json).unwrap();
        s.validate().unwrap();
        let p = s.project(&[1.0, 1.0, -2.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_eq!(p[2], 0.0);
        let back: FeasibleSet = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back.project(&[1.0, 1.0, -2.0]).unwrap(), p);
    }
}

#[cfg(test)]
mod proptests {
    use crate::suites::{reference_sets, SET_DIM};
    use crate::vecops::{dist_sq, dot, sub};
    use proptest::prelude::*;

    fn point() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0..50.0f64, SET_DIM)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn lemma_inequalities_hold(x in point(), y in point(), w in point()) {
            for (name, set) in reference_sets() {
                let px = set.project(&x).unwrap();
                let py = set.project(&y).unwrap();
                let fw = set.project(&w).unwrap();
                let scale = 1.0 + dot(&x, &x) + dot(&w, &w);
                prop_assert!(dist_sq(&px, &py).sqrt() <= dist_sq(&x, &y).sqrt() + 1e-12 * scale.sqrt(), "{name}");
                prop_assert!(dot(&sub(&x, &px), &sub(&fw, &px)) <= 1e-10 * scale, "{name}");
                prop_assert!(dist_sq(&px, &fw) + dist_sq(&px, &x) <= dist_sq(&x, &fw) + 1e-10 * scale, "{name}");
                let ppx = set.project(&px).unwrap();
                prop_assert!(dist_sq(&ppx, &px).sqrt() <= 1e-12 * scale.sqrt(), "{name}");
            }
        }

        #[test]
        fn projection_is_feasible(x in point()) {
            for (name, set) in reference_sets() {
                let px = set.project(&x).unwrap();
                prop_assert!(set.distance(&px).unwrap() <= 1e-10 * (1.0 + dot(&x, &x)).sqrt(), "{name}");
            }
        }
    }
}
