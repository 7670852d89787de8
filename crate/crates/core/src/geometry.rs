//! Generalized Mahalanobis geometry over signal features.
//!
//! Users live at `p_u = D_I^-t R^T e_u` and items at `q_i = D_I^t e_i`. A
//! symmetric hollow `H` becomes a valid metric `W = H + omega diag(x)` once
//! `omega` is large enough for Gershgorin's bound to certify `W >= 0`. The
//! functions here compute distances and residuals from the expanded quadratic
//! form without ever materializing `W`.

use crate::error::{Error, Result};
use crate::sparse::{degree_power, DenseMatrix, InteractionMatrix, SparseRows, SparseSquareMatrix};

/// Quadratic forms in `[-NUMERICAL_FLOOR, 0)` are clamped to zero.
pub const NUMERICAL_FLOOR: f64 = 1e-9;
/// Absolute tolerance for the symmetry checks on inputs.
const SYMMETRY_TOL: f64 = 1e-12;

/// Lazily evaluated signal features for one interaction matrix.
#[derive(Debug, Clone)]
pub struct SignalFeatureSpace<'a> {
    r: &'a InteractionMatrix,
    t: f64,
    down: Vec<f64>,
    up: Vec<f64>,
}

impl<'a> SignalFeatureSpace<'a> {
    pub fn new(r: &'a InteractionMatrix, t: f64) -> Self {
        SignalFeatureSpace {
            r,
            t,
            down: degree_power(r.item_degrees(), -t),
            up: degree_power(r.item_degrees(), t),
        }
    }

    pub fn interactions(&self) -> &InteractionMatrix {
        self.r
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn n_items(&self) -> usize {
        self.r.n_items()
    }

    /// Non-zeros of `p_u` as `(item, d_item^-t)`.
    pub fn user_feature(&self, u: usize) -> Vec<(usize, f64)> {
        self.r
            .row(u)
            .iter()
            .map(|&i| (i as usize, self.down[i as usize]))
            .collect()
    }

    /// The single non-zero of `q_i`.
    pub fn item_feature(&self, i: usize) -> (usize, f64) {
        (i, self.up[i])
    }

    /// `x = d^-2t`, with zero-degree items set to 1. Their `H` rows are empty
    /// in every model this crate produces, so the choice does not move `omega`.
    pub fn diagonal_base(&self) -> Vec<f64> {
        self.r
            .item_degrees()
            .iter()
            .map(|&d| if d == 0 { 1.0 } else { (d as f64).powf(-2.0 * self.t) })
            .collect()
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.r.n_users() {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: u,
                len: self.r.n_users(),
            });
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.r.n_items() {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: i,
                len: self.r.n_items(),
            });
        }
        Ok(())
    }
}

/// `W = H + omega diag(x)`.
#[derive(Debug, Clone)]
pub struct MetricWeight {
    h: SparseSquareMatrix,
    omega: f64,
    x: Vec<f64>,
}

impl MetricWeight {
    /// Complete `H` with the smallest Gershgorin-certified `omega`.
    pub fn complete(h: SparseSquareMatrix, x: Vec<f64>) -> Result<Self> {
        let omega = psd_completion_omega(&h, &x)?;
        Ok(MetricWeight { h, omega, x })
    }

    /// Use the feature space's `x = d^-2t`.
    pub fn for_space(space: &SignalFeatureSpace<'_>, h: SparseSquareMatrix) -> Result<Self> {
        Self::complete(h, space.diagonal_base())
    }

    /// Explicit `omega`; PSD is not guaranteed.
    pub fn with_omega(h: SparseSquareMatrix, omega: f64, x: Vec<f64>) -> Result<Self> {
        validate_hollow_symmetric(&h)?;
        validate_positive(&x)?;
        if x.len() != h.dim() {
            return Err(Error::DimensionMismatch {
                context: "MetricWeight diagonal base",
                expected: h.dim(),
                found: x.len(),
            });
        }
        Ok(MetricWeight { h, omega, x })
    }

    pub fn hollow(&self) -> &SparseSquareMatrix {
        &self.h
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn diagonal_base(&self) -> &[f64] {
        &self.x
    }

    /// `W_ii`.
    pub fn diagonal(&self, i: usize) -> f64 {
        self.omega * self.x[i]
    }

    /// Dense `W`; intended for small oracles only.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut w = self.h.to_dense();
        for (i, x) in self.x.iter().enumerate() {
            w[(i, i)] += self.omega * x;
        }
        w
    }

    /// `a^T W b` for sparse vectors given as `(index, value)` lists.
    fn bilinear(&self, a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
        let mut dense_b = std::collections::HashMap::with_capacity(b.len());
        for &(j, v) in b {
            *dense_b.entry(j).or_insert(0.0) += v;
        }
        let mut acc = 0.0;
        for &(i, av) in a {
            self.h.for_each_in_row(i, |j, h| {
                if let Some(bv) = dense_b.get(&j) {
                    acc += av * h * bv;
                }
            });
            if let Some(bv) = dense_b.get(&i) {
                acc += av * self.diagonal(i) * bv;
            }
        }
        acc
    }

    /// Distance between two dense vectors of item-space coordinates.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != self.x.len() || b.len() != self.x.len() {
            return Err(Error::DimensionMismatch {
                context: "MetricWeight::distance",
                expected: self.x.len(),
                found: a.len().min(b.len()),
            });
        }
        let diff: Vec<(usize, f64)> = a
            .iter()
            .zip(b)
            .enumerate()
            .filter_map(|(i, (x, y))| (x != y).then_some((i, x - y)))
            .collect();
        Ok(clamp_floor(self.bilinear(&diff, &diff))?.sqrt())
    }
}

fn clamp_floor(q: f64) -> Result<f64> {
    if q >= 0.0 {
        Ok(q)
    } else if q >= -NUMERICAL_FLOOR {
        Ok(0.0)
    } else {
        Err(Error::InvalidArgument(format!(
            "quadratic form {q:e} is negative: the metric weight is not PSD"
        )))
    }
}

fn validate_hollow_symmetric(h: &SparseSquareMatrix) -> Result<()> {
    for i in 0..h.dim() {
        let v = h.get(i, i);
        if v != 0.0 {
            return Err(Error::NotHollow { index: i, value: v });
        }
    }
    let asym = h.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    Ok(())
}

fn validate_positive(x: &[f64]) -> Result<()> {
    match x.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        Some(index) => Err(Error::NonPositive { index, value: x[index] }),
        None => Ok(()),
    }
}

/// `omega = max_i h_i / x_i` where `h_i` is the absolute off-diagonal row sum.
pub fn psd_completion_omega(h: &SparseSquareMatrix, x: &[f64]) -> Result<f64> {
    if x.len() != h.dim() {
        return Err(Error::DimensionMismatch {
            context: "psd_completion_omega",
            expected: h.dim(),
            found: x.len(),
        });
    }
    validate_hollow_symmetric(h)?;
    validate_positive(x)?;
    let omega = (0..h.dim())
        .map(|i| {
            let (_, vals) = h.row(i);
            vals.iter().map(|v| v.abs()).sum::<f64>() / x[i]
        })
        .fold(0.0, f64::max);
    Ok(omega)
}

/// A Gershgorin interval `[center - radius, center + radius]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GershgorinInterval {
    pub center: f64,
    pub radius: f64,
}

impl GershgorinInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.radius
    }

    pub fn upper(&self) -> f64 {
        self.center + self.radius
    }

    pub fn contains(&self, value: f64, tol: f64) -> bool {
        value >= self.lower() - tol && value <= self.upper() + tol
    }
}

/// Gershgorin intervals of a symmetric dense matrix.
pub fn gershgorin_intervals(a: &DenseMatrix) -> Result<Vec<GershgorinInterval>> {
    if a.n_rows() != a.n_cols() {
        return Err(Error::DimensionMismatch {
            context: "gershgorin_intervals",
            expected: a.n_rows(),
            found: a.n_cols(),
        });
    }
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    Ok((0..a.n_rows())
        .map(|i| {
            let radius = a
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v.abs())
                .sum();
            GershgorinInterval {
                center: a[(i, i)],
                radius,
            }
        })
        .collect())
}

/// Gershgorin intervals of `W = H + omega diag(x)` straight from sparse rows.
pub fn metric_gershgorin_intervals(w: &MetricWeight) -> Vec<GershgorinInterval> {
    (0..w.h.dim())
        .map(|i| {
            let (_, vals) = w.h.row(i);
            GershgorinInterval {
                center: w.diagonal(i),
                radius: vals.iter().map(|v| v.abs()).sum(),
            }
        })
        .collect()
}

fn check_dims(space: &SignalFeatureSpace<'_>, w: &MetricWeight) -> Result<()> {
    if w.x.len() != space.n_items() {
        return Err(Error::DimensionMismatch {
            context: "metric weight vs feature space",
            expected: space.n_items(),
            found: w.x.len(),
        });
    }
    Ok(())
}

/// `d^2(p_u, q_i) = p_u^T W p_u + q_i^T W q_i - 2 p_u^T W q_i`, clamped at the
/// numerical floor.
pub fn mahalanobis_distance_sq(space: &SignalFeatureSpace<'_>, w: &MetricWeight, u: usize, i: usize) -> Result<f64> {
    space.check_user(u)?;
    space.check_item(i)?;
    check_dims(space, w)?;
    let p = space.user_feature(u);
    let q = [space.item_feature(i)];
    let raw = w.bilinear(&p, &p) + w.bilinear(&q, &q) - 2.0 * w.bilinear(&p, &q);
    clamp_floor(raw)
}

pub fn mahalanobis_distance(space: &SignalFeatureSpace<'_>, w: &MetricWeight, u: usize, i: usize) -> Result<f64> {
    Ok(mahalanobis_distance_sq(space, w, u, i)?.sqrt())
}

/// `p_u^T H q_i`.
fn preference_score(space: &SignalFeatureSpace<'_>, h: &SparseSquareMatrix, u: usize, i: usize) -> f64 {
    let mut acc = 0.0;
    for &a in space.r.row(u) {
        let a = a as usize;
        acc += space.down[a] * h.get(a, i);
    }
    acc * space.up[i]
}

/// Preference residual `y_ui - y_uj = p_u^T H (q_i - q_j)`.
pub fn preference_residual(
    space: &SignalFeatureSpace<'_>,
    h: &SparseSquareMatrix,
    u: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    space.check_user(u)?;
    space.check_item(i)?;
    space.check_item(j)?;
    validate_hollow_symmetric(h)?;
    if i == j {
        return Ok(0.0);
    }
    Ok(preference_score(space, h, u, i) - preference_score(space, h, u, j))
}

/// `d^2(p_u, q_i) - d^2(p_u, q_j)` from the expanded form
/// `W_ii (d_i^2t - 2 R_ui) - W_jj (d_j^2t - 2 R_uj) - 2 p_u^T H (q_i - q_j)`.
pub fn distance_residual(
    space: &SignalFeatureSpace<'_>,
    w: &MetricWeight,
    u: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    space.check_user(u)?;
    space.check_item(i)?;
    space.check_item(j)?;
    check_dims(space, w)?;
    if i == j {
        return Ok(0.0);
    }
    let r = space.r;
    let indicator = |item: usize| if r.contains(u, item) { 1.0 } else { 0.0 };
    let self_term = |item: usize| {
        let up = space.up[item];
        w.diagonal(item) * (up * up - 2.0 * indicator(item))
    };
    let y = preference_score(space, &w.h, u, i) - preference_score(space, &w.h, u, j);
    Ok(self_term(i) - self_term(j) - 2.0 * y)
}

/// How a triple `(u, i, j)` relates to the user's interactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResidualCase {
    /// Neither item interacted: `d^2/2` residual equals `-y~` exactly.
    BothUninteracted,
    /// Exactly one item interacted: a margin `omega x_k` separates the two.
    OneInteracted,
    /// Both interacted: the gap depends on both degrees.
    BothInteracted,
}

impl ResidualCase {
    pub fn classify(r: &InteractionMatrix, u: usize, i: usize, j: usize) -> Self {
        match (r.contains(u, i), r.contains(u, j)) {
            (false, false) => ResidualCase::BothUninteracted,
            (true, true) => ResidualCase::BothInteracted,
            _ => ResidualCase::OneInteracted,
        }
    }
}

/// Value that `d^2/2` residual should take by the case analysis:
/// `-y~ - omega (x_i R_ui - x_j R_uj)`. Only valid for items with positive
/// degree, where `q_k^T W q_k = omega`.
pub fn predicted_half_distance_residual(
    space: &SignalFeatureSpace<'_>,
    w: &MetricWeight,
    u: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    let y = preference_residual(space, &w.h, u, i, j)?;
    let r = space.r;
    let margin = |k: usize| if r.contains(u, k) { w.diagonal(k) } else { 0.0 };
    Ok(-y - (margin(i) - margin(j)))
}

/// Uninteracted items of `u` ordered by increasing distance (ties by index).
pub fn rank_uninteracted_by_distance(space: &SignalFeatureSpace<'_>, w: &MetricWeight, u: usize) -> Result<Vec<usize>> {
    let mut keyed = Vec::new();
    for i in 0..space.n_items() {
        if !space.r.contains(u, i) {
            keyed.push((mahalanobis_distance_sq(space, w, u, i)?, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Uninteracted items of `u` ordered by decreasing preference score.
pub fn rank_uninteracted_by_preference(
    space: &SignalFeatureSpace<'_>,
    h: &SparseSquareMatrix,
    u: usize,
) -> Result<Vec<usize>> {
    space.check_user(u)?;
    let mut keyed: Vec<(f64, usize)> = (0..space.n_items())
        .filter(|&i| !space.r.contains(u, i))
        .map(|i| (preference_score(space, h, u, i), i))
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn min_eigenvalue(m: &DenseMatrix) -> f64 {
        SymmetricEigen::new(m.to_nalgebra())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    fn random_hollow(rng: &mut ChaCha8Rng, n: usize) -> SparseSquareMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < 0.6 {
                    let v = rng.random_range(-1.0..1.0);
                    t.push((i, j, v));
                    t.push((j, i, v));
                }
            }
        }
        SparseSquareMatrix::from_triplets(n, t).unwrap()
    }

    #[test]
    fn omega_two_by_two() {
        let h = SparseSquareMatrix::from_triplets(2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let w = MetricWeight::complete(h, vec![1.0, 1.0]).unwrap();
        assert_eq!(w.omega(), 1.0);
        let dense = w.to_dense();
        assert_eq!(dense.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        let eig = SymmetricEigen::new(dense.to_nalgebra()).eigenvalues;
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        assert!(e[0].abs() < 1e-12 && (e[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn omega_zero_for_zero_h() {
        assert_eq!(
            psd_completion_omega(&SparseSquareMatrix::zeros(3), &[1.0, 2.0, 3.0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn omega_rejects_bad_inputs() {
        let asym = SparseSquareMatrix::from_triplets(2, vec![(0, 1, 1.0)]).unwrap();
        assert!(matches!(
            psd_completion_omega(&asym, &[1.0, 1.0]),
            Err(Error::NotSymmetric { .. })
        ));
        let diag = SparseSquareMatrix::from_triplets(2, vec![(1, 1, 1.0)]).unwrap();
        assert!(matches!(
            psd_completion_omega(&diag, &[1.0, 1.0]),
            Err(Error::NotHollow { index: 1, .. })
        ));
        assert!(matches!(
            psd_completion_omega(&SparseSquareMatrix::zeros(2), &[1.0, 0.0]),
            Err(Error::NonPositive { index: 1, .. })
        ));
    }

    #[test]
    fn omega_certifies_psd_on_random_hollow() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let w = MetricWeight::complete(random_hollow(&mut rng, 8), vec![1.0; 8]).unwrap();
            assert!(min_eigenvalue(&w.to_dense()) >= -1e-9);
        }
    }

    #[test]
    fn gershgorin_examples() {
        let d = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let iv = gershgorin_intervals(&d).unwrap();
        assert_eq!(
            iv[0],
            GershgorinInterval {
                center: 2.0,
                radius: 0.0
            }
        );
        assert_eq!(
            iv[1],
            GershgorinInterval {
                center: 3.0,
                radius: 0.0
            }
        );
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let iv = gershgorin_intervals(&a).unwrap();
        assert!(iv.iter().all(|g| g.center == 0.0 && g.radius == 1.0));
        let ns = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert!(gershgorin_intervals(&ns).is_err());
    }

    #[test]
    fn gershgorin_covers_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = DenseMatrix::from_fn(6, 6, |_, _| rng.random_range(-2.0..2.0));
            let s = DenseMatrix::from_fn(6, 6, |i, j| a[(i, j)] + a[(j, i)]);
            let iv = gershgorin_intervals(&s).unwrap();
            for ev in SymmetricEigen::new(s.to_nalgebra()).eigenvalues.iter() {
                assert!(iv.iter().any(|g| g.contains(*ev, 1e-9)));
            }
        }
    }

    #[test]
    fn euclidean_reduction() {
        // H = 0, omega = 1, x = 1, t = 0: plain Euclidean distance.
        let r = InteractionMatrix::from_pairs(1, 3, [(0, 1)]).unwrap();
        let space = SignalFeatureSpace::new(&r, 0.0);
        let w = MetricWeight::with_omega(SparseSquareMatrix::zeros(3), 1.0, vec![1.0; 3]).unwrap();
        // p_u = e_1
        assert_eq!(mahalanobis_distance_sq(&space, &w, 0, 1).unwrap(), 0.0);
        assert_eq!(mahalanobis_distance_sq(&space, &w, 0, 0).unwrap(), 2.0);
    }

    #[test]
    fn zero_h_direct_expansion() {
        let r = InteractionMatrix::from_pairs(2, 4, [(0, 0), (0, 1), (1, 1), (1, 2), (1, 3)]).unwrap();
        let t = 0.3;
        let space = SignalFeatureSpace::new(&r, t);
        let x = space.diagonal_base();
        let w = MetricWeight::with_omega(SparseSquareMatrix::zeros(4), 0.7, x.clone()).unwrap();
        let deg = r.item_degrees();
        // user 0, item 3 (no overlap)
        let pu_norm: f64 = [0usize, 1].iter().map(|&a| x[a] * (deg[a] as f64).powf(-2.0 * t)).sum();
        let expected = 0.7 * (pu_norm + x[3] * (deg[3] as f64).powf(2.0 * t));
        let got = mahalanobis_distance_sq(&space, &w, 0, 3).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn residual_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = InteractionMatrix::from_pairs(2, 5, [(0, 0), (0, 2), (1, 3)]).unwrap();
        let h = random_hollow(&mut rng, 5);
        let space = SignalFeatureSpace::new(&r, 0.1);
        let w = MetricWeight::for_space(&space, h.clone()).unwrap();
        assert_eq!(distance_residual(&space, &w, 0, 2, 2).unwrap(), 0.0);
        assert_eq!(preference_residual(&space, &h, 0, 2, 2).unwrap(), 0.0);
        assert_eq!(
            preference_residual(&space, &SparseSquareMatrix::zeros(5), 0, 1, 3).unwrap(),
            0.0
        );
        assert!(matches!(
            distance_residual(&space, &w, 0, 9, 1),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(mahalanobis_distance_sq(&space, &w, 5, 0).is_err());
    }

    #[test]
    fn case_one_and_two_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = InteractionMatrix::from_pairs(2, 6, [(0, 0), (0, 1), (1, 1), (1, 2), (1, 3), (0, 4), (1, 5), (0, 5)])
            .unwrap();
        let h = random_hollow(&mut rng, 6);
        let space = SignalFeatureSpace::new(&r, -0.2);
        let w = MetricWeight::for_space(&space, h.clone()).unwrap();
        // case 1: u=0, i=2, j=3 both uninteracted
        let dr = distance_residual(&space, &w, 0, 2, 3).unwrap();
        let y = preference_residual(&space, &h, 0, 2, 3).unwrap();
        assert!((dr + 2.0 * y).abs() < 1e-12);
        // case 2: i=0 interacted, j=3 not
        let dr = distance_residual(&space, &w, 0, 0, 3).unwrap();
        let y = preference_residual(&space, &h, 0, 0, 3).unwrap();
        let margin = w.omega() * (r.item_degrees()[0] as f64).powf(0.4);
        assert!((dr + 2.0 * y + 2.0 * margin).abs() < 1e-12);
        assert!(dr < -2.0 * y);
    }

    #[test]
    fn expanded_form_matches_distance_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut pairs = Vec::new();
        for u in 0..4 {
            for i in 0..7 {
                if rng.random::<f64>() < 0.4 || i == u {
                    pairs.push((u, i));
                }
            }
        }
        let r = InteractionMatrix::from_pairs(4, 7, pairs).unwrap();
        let h = random_hollow(&mut rng, 7);
        let space = SignalFeatureSpace::new(&r, 0.15);
        let w = MetricWeight::for_space(&space, h).unwrap();
        for u in 0..4 {
            for i in 0..7 {
                for j in 0..7 {
                    let a = mahalanobis_distance_sq(&space, &w, u, i).unwrap()
                        - mahalanobis_distance_sq(&space, &w, u, j).unwrap();
                    let b = distance_residual(&space, &w, u, i, j).unwrap();
                    assert!((a - b).abs() < 1e-10, "u={u} i={i} j={j}: {a} vs {b}");
                }
            }
        }
    }
}
