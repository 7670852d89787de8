//! Signal-based baselines: the closed-form linear autoencoder (EASE), the
//! truncated-SVD graph filter (GFCF) and the filter weight matrix `G` used by
//! the hybrid CoRML score.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::par;
use crate::sparse::{
    degree_power, spmm, CsrMatrix, DenseMatrix, InteractionMatrix, RowColScale, SparseRows, SparseSquareMatrix,
};

/// Oversampling added to the requested rank in the randomized range finder.
pub const SVD_OVERSAMPLING: usize = 10;
/// Default number of power (subspace) iterations.
pub const SVD_POWER_ITERS: usize = 4;
/// Above this item count `G` is built blockwise under an nnz budget.
pub const DENSE_G_MAX_ITEMS: usize = 20_000;

/// Relative cutoff below which a singular value counts as zero.
const RANK_TOL: f64 = 1e-10;

/// Closed-form linear autoencoder with a zero-diagonal constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct EaseModel {
    pub weights: DenseMatrix,
    pub l2: f64,
}

/// Fit EASE: `P = (R^T R + l2 I)^-1`, `C = I - P diag(1 / diag(P))`.
pub fn fit_ease(r: &InteractionMatrix, l2: f64) -> Result<EaseModel> {
    if !(l2 > 0.0 && l2.is_finite()) {
        return Err(Error::InvalidArgument(format!("EASE l2 must be positive, got {l2}")));
    }
    let n = r.n_items();
    let p = gram_plus_ridge(r, l2)?
        .cholesky()
        .ok_or_else(|| Error::Factorization("R^T R + l2 I is not positive definite".into()))?
        .inverse();
    let weights = DenseMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { -p[(i, j)] / p[(j, j)] });
    Ok(EaseModel { weights, l2 })
}

fn gram_plus_ridge(r: &InteractionMatrix, l2: f64) -> Result<DMatrix<f64>> {
    let mut g = crate::sparse::gram(r, &vec![1.0; r.n_users()])?.to_nalgebra();
    for i in 0..g.nrows() {
        g[(i, i)] += l2;
    }
    Ok(g)
}

impl EaseModel {
    /// `R C` for every user.
    pub fn scores(&self, r: &InteractionMatrix) -> DenseMatrix {
        spmm(r, &self.weights).expect("EASE weights match the item count")
    }
}

/// Top-k right singular factor of `D_U^-1/2 R D_I^-1/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFilterFactor {
    /// Items x k, orthonormal columns.
    pub v: DenseMatrix,
    /// Nonincreasing.
    pub singular_values: Vec<f64>,
    pub item_degrees: Vec<usize>,
    /// Set when fewer than the requested `k` triplets were achievable.
    pub rank_limited: bool,
}

impl GraphFilterFactor {
    pub fn rank(&self) -> usize {
        self.v.n_cols()
    }

    pub fn n_items(&self) -> usize {
        self.v.n_rows()
    }
}

/// `D_U^-1/2 R D_I^-1/2` as CSR.
pub fn normalized_interactions(r: &InteractionMatrix) -> CsrMatrix {
    let du = degree_power(r.user_degrees(), -0.5);
    let di = degree_power(r.item_degrees(), -0.5);
    let triplets = r.pairs().map(|(u, i)| (u, i, du[u] * di[i])).collect();
    CsrMatrix::from_triplets(r.n_users(), r.n_items(), triplets).expect("valid interaction pairs")
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    m.to_nalgebra()
}

fn from_na(m: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_nalgebra(m)
}

/// Randomized truncated SVD (range finder with power iterations).
///
/// Deterministic for a given `seed`. If `k` exceeds the numerical rank, the
/// achievable number of triplets is returned with `rank_limited` set.
pub fn truncated_svd(r: &InteractionMatrix, k: usize, seed: u64, power_iters: usize) -> Result<GraphFilterFactor> {
    if k == 0 {
        return Err(Error::InvalidArgument("SVD rank must be at least 1".into()));
    }
    let (m, n) = (r.n_users(), r.n_items());
    let min_dim = m.min(n);
    if min_dim == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rank_limited = k > min_dim;
    let k = k.min(min_dim);
    let sketch = (k + SVD_OVERSAMPLING).min(min_dim);

    let x = normalized_interactions(r);
    let xt = x.transpose();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DenseMatrix::from_fn(n, sketch, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(to_na(&spmm(&x, &omega)?));
    for _ in 0..power_iters {
        let z = orthonormalize(to_na(&spmm(&xt, &from_na(&q))?));
        q = orthonormalize(to_na(&spmm(&x, &from_na(&z))?));
    }
    // X ~ Q Q^T X, and (Q^T X)^T = X^T Q shares X's right singular vectors.
    let bt = to_na(&spmm(&xt, &from_na(&q))?);
    let svd = bt.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Factorization("SVD did not produce singular vectors".into()))?;
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let top = sv.iter().copied().fold(0.0, f64::max);
    let mut keep: Vec<usize> = order
        .into_iter()
        .filter(|&c| top > 0.0 && sv[c] > RANK_TOL * top)
        .collect();
    if keep.len() < k {
        rank_limited = true;
    }
    keep.truncate(k);
    if rank_limited {
        log::warn!(
            "truncated_svd: requested rank not achievable, returning {} triplets",
            keep.len()
        );
    }

    let mut v = DenseMatrix::zeros(n, keep.len());
    for (col, &src) in keep.iter().enumerate() {
        // Fix the sign so the largest-magnitude entry is positive.
        let mut pivot = 0;
        for i in 0..n {
            if u[(i, src)].abs() > u[(pivot, src)].abs() {
                pivot = i;
            }
        }
        let sign = if u[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            v[(i, col)] = sign * u[(i, src)];
        }
    }
    Ok(GraphFilterFactor {
        v,
        singular_values: keep.iter().map(|&c| sv[c]).collect(),
        item_degrees: r.item_degrees().to_vec(),
        rank_limited,
    })
}

fn g_row(v: &DenseMatrix, i: usize) -> Vec<(usize, f64)> {
    let vi = v.row(i);
    (0..v.n_rows())
        .filter(|&j| j != i)
        .filter_map(|j| {
            let s: f64 = vi.iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
            (s > 0.0).then_some((j, s))
        })
        .collect()
}

/// `G = relu(V V^T - diag(V V^T))`: symmetric, nonnegative, hollow.
pub fn build_g(factor: &GraphFilterFactor) -> SparseSquareMatrix {
    let n = factor.n_items();
    let rows = par::map_indices(n, |i| g_row(&factor.v, i));
    let triplets = rows
        .into_iter()
        .enumerate()
        .flat_map(|(i, row)| row.into_iter().map(move |(j, s)| (i, j, s)))
        .collect();
    SparseSquareMatrix::from_triplets(n, triplets).expect("G entries are in range")
}

#[derive(PartialEq)]
struct Candidate {
    value: f64,
    row: usize,
    col: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // "Greater" means more worth keeping; the heap holds the weakest at the top.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .value
            .total_cmp(&self.value)
            .then_with(|| (self.row, self.col).cmp(&(other.row, other.col)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Build `G` block by block, retaining only the largest mirrored pairs that
/// fit in `nnz_budget`. Never holds more than one row block of dense products.
pub fn build_g_budgeted(factor: &GraphFilterFactor, nnz_budget: usize) -> SparseSquareMatrix {
    const BLOCK: usize = 256;
    let n = factor.n_items();
    let max_pairs = nnz_budget / 2;
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(max_pairs + 1);
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let block = par::map_indices(end - start, |o| g_row(&factor.v, start + o));
        for (o, row) in block.into_iter().enumerate() {
            let i = start + o;
            for (j, s) in row.into_iter().filter(|&(j, _)| j > i) {
                heap.push(Candidate {
                    value: s,
                    row: i,
                    col: j,
                });
                if heap.len() > max_pairs {
                    heap.pop();
                }
            }
        }
    }
    let triplets = heap
        .into_iter()
        .flat_map(|c| [(c.row, c.col, c.value), (c.col, c.row, c.value)])
        .collect();
    SparseSquareMatrix::from_triplets(n, triplets).expect("G entries are in range")
}

/// Pick the dense or budgeted construction by item count.
pub fn build_g_for_items(factor: &GraphFilterFactor, nnz_budget: usize) -> (SparseSquareMatrix, bool) {
    if factor.n_items() <= DENSE_G_MAX_ITEMS {
        (build_g(factor), false)
    } else {
        (build_g_budgeted(factor, nnz_budget), true)
    }
}

/// Graph-filter scores `R D_I^-1/2 V V^T D_I^1/2`, never forming `V V^T`.
pub fn score_gfcf(r: &InteractionMatrix, factor: &GraphFilterFactor) -> Result<DenseMatrix> {
    if factor.n_items() != r.n_items() {
        return Err(Error::DimensionMismatch {
            context: "score_gfcf item count",
            expected: r.n_items(),
            found: factor.n_items(),
        });
    }
    let inv_sqrt = degree_power(&factor.item_degrees, -0.5);
    let sqrt = degree_power(&factor.item_degrees, 0.5);
    let k = factor.rank();
    let scaled_v = factor.v.scale_rows_cols(&inv_sqrt, &vec![1.0; k])?;
    let projected = spmm(r, &scaled_v)?;
    let n = r.n_items();
    let mut out = DenseMatrix::zeros(r.n_users(), n);
    par::for_each_row_mut(out.as_mut_slice(), n, |u, row| {
        let z = projected.row(u);
        for (j, o) in row.iter_mut().enumerate() {
            let dot: f64 = factor.v.row(j).iter().zip(z).map(|(a, b)| a * b).sum();
            *o = dot * sqrt[j];
        }
    });
    Ok(out)
}

/// Signal-model scores `y_ui = p_u^T C q_i`, i.e. `R D_I^-t C D_I^t`.
pub fn signal_scores<C: SparseRows>(r: &InteractionMatrix, c: &C, t: f64) -> Result<DenseMatrix> {
    if c.n_rows() != r.n_items() || c.n_cols() != r.n_items() {
        return Err(Error::DimensionMismatch {
            context: "signal_scores weight matrix",
            expected: r.n_items(),
            found: c.n_rows(),
        });
    }
    let down = degree_power(r.item_degrees(), -t);
    let up = degree_power(r.item_degrees(), t);
    let n = r.n_items();
    let mut out = DenseMatrix::zeros(r.n_users(), n);
    par::for_each_row_mut(out.as_mut_slice(), n, |u, row| {
        for &a in r.row(u) {
            let a = a as usize;
            let s = down[a];
            c.for_each_in_row(a, |j, v| row[j] += s * v);
        }
        for (o, w) in row.iter_mut().zip(&up) {
            *o *= w;
        }
    });
    Ok(out)
}
