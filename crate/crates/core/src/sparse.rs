//! Sparse and dense matrix primitives shared by every model.
//!
//! Storage is compressed-row throughout. Kernels parallelize over output rows
//! only, so each output row is reduced in a fixed order.

use std::cmp::Ordering;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::par;

/// Anything that can be walked row by row as `(column, value)` pairs.
pub trait SparseRows: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn for_each_in_row<F: FnMut(usize, f64)>(&self, row: usize, f: F);
}

/// Raise every degree to `exponent`.
///
/// Zero degrees map to `0.0` for any non-zero exponent, so items or users
/// without signal score zero instead of dividing by zero. Exponent zero maps
/// everything (zero included) to one.
pub fn degree_power(degrees: &[usize], exponent: f64) -> Vec<f64> {
    degrees
        .iter()
        .map(|&d| {
            if exponent == 0.0 {
                1.0
            } else if d == 0 {
                0.0
            } else {
                (d as f64).powf(exponent)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// DenseMatrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix of finite `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        DenseMatrix {
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(n_rows: usize, n_cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for i in 0..n_rows {
            for j in 0..n_cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { n_rows, n_cols, data }
    }

    /// Build from row-major values; rejects non-finite entries.
    pub fn from_row_major(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::DimensionMismatch {
                context: "DenseMatrix::from_row_major",
                expected: n_rows * n_cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value at row {} col {}",
                pos / n_cols.max(1),
                pos % n_cols.max(1)
            )));
        }
        Ok(DenseMatrix { n_rows, n_cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(Error::DimensionMismatch {
                    context: "DenseMatrix::from_rows",
                    expected: n_cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_row_major(rows.len(), n_cols, data)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.n_cols, self.n_rows, |i, j| self[(j, i)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|a_ij - a_ji|`; only meaningful for square matrices.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.n_rows {
            for j in (i + 1)..self.n_cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_rows, self.n_cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.n_rows && j < self.n_cols);
        &self.data[i * self.n_cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.n_rows && j < self.n_cols);
        &mut self.data[i * self.n_cols + j]
    }
}

impl SparseRows for DenseMatrix {
    fn n_rows(&self) -> usize {
        self.n_rows
    }
    fn n_cols(&self) -> usize {
        self.n_cols
    }
    fn for_each_in_row<F: FnMut(usize, f64)>(&self, row: usize, mut f: F) {
        for (j, &v) in self.row(row).iter().enumerate() {
            if v != 0.0 {
                f(j, v);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// CsrMatrix / SparseSquareMatrix
// ---------------------------------------------------------------------------

/// General compressed-row matrix with strictly increasing columns per row and
/// no stored zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        CsrMatrix {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from `(row, col, value)` triplets in any order. Zeros are dropped;
    /// duplicate coordinates are rejected.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        triplets.retain(|t| t.2 != 0.0);
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &triplets {
            if r >= n_rows {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: r,
                    len: n_rows,
                });
            }
            if c >= n_cols {
                return Err(Error::IndexOutOfRange {
                    what: "column",
                    index: c,
                    len: n_cols,
                });
            }
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite value at ({r}, {c})")));
            }
            if prev == Some((r, c)) {
                return Err(Error::InvalidArgument(format!("duplicate entry at ({r}, {c})")));
            }
            prev = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c as u32);
            values.push(v);
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut indptr = Vec::with_capacity(m.n_rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..m.n_rows() {
            m.for_each_in_row(i, |j, v| {
                indices.push(j as u32);
                values.push(v);
            });
            indptr.push(indices.len());
        }
        CsrMatrix {
            n_rows: m.n_rows(),
            n_cols: m.n_cols(),
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// Triplets in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&c, &v)| (i, c as usize, v))
        })
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }

    pub fn transpose(&self) -> CsrMatrix {
        let t = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        CsrMatrix::from_triplets(self.n_cols, self.n_rows, t).expect("transpose of valid CSR")
    }

    fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> CsrMatrix {
        let t = self.triplets().map(|(i, j, v)| (i, j, f(i, j, v))).collect();
        CsrMatrix::from_triplets(self.n_rows, self.n_cols, t).expect("mapping valid CSR")
    }
}

impl SparseRows for CsrMatrix {
    fn n_rows(&self) -> usize {
        self.n_rows
    }
    fn n_cols(&self) -> usize {
        self.n_cols
    }
    fn for_each_in_row<F: FnMut(usize, f64)>(&self, row: usize, mut f: F) {
        let (cols, vals) = self.row(row);
        for (&c, &v) in cols.iter().zip(vals) {
            f(c as usize, v);
        }
    }
}

/// Square compressed-row matrix (item x item weights).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSquareMatrix(CsrMatrix);

impl SparseSquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SparseSquareMatrix(CsrMatrix::empty(n, n))
    }

    pub fn from_csr(m: CsrMatrix) -> Result<Self> {
        if m.n_rows != m.n_cols {
            return Err(Error::DimensionMismatch {
                context: "SparseSquareMatrix::from_csr",
                expected: m.n_rows,
                found: m.n_cols,
            });
        }
        Ok(SparseSquareMatrix(m))
    }

    pub fn from_triplets(n: usize, triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        Ok(SparseSquareMatrix(CsrMatrix::from_triplets(n, n, triplets)?))
    }

    pub fn from_dense(m: &DenseMatrix) -> Result<Self> {
        Self::from_csr(CsrMatrix::from_dense(m))
    }

    pub fn dim(&self) -> usize {
        self.0.n_rows
    }

    pub fn as_csr(&self) -> &CsrMatrix {
        &self.0
    }

    pub fn nnz(&self) -> usize {
        self.0.nnz()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        self.0.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.0.triplets()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        self.0.to_dense()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for (i, j, v) in self.triplets() {
            worst = worst.max((v - self.get(j, i)).abs());
        }
        worst
    }

    /// Largest `|a_ii|`.
    pub fn max_abs_diagonal(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i).abs()).fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.0.values.iter().copied().fold(0.0, f64::min)
    }
}

impl SparseRows for SparseSquareMatrix {
    fn n_rows(&self) -> usize {
        self.0.n_rows
    }
    fn n_cols(&self) -> usize {
        self.0.n_cols
    }
    fn for_each_in_row<F: FnMut(usize, f64)>(&self, row: usize, f: F) {
        self.0.for_each_in_row(row, f)
    }
}

// ---------------------------------------------------------------------------
// InteractionMatrix
// ---------------------------------------------------------------------------

/// Binary user x item implicit-feedback matrix with cached degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    n_users: usize,
    n_items: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    user_degrees: Vec<usize>,
    item_degrees: Vec<usize>,
}

impl InteractionMatrix {
    /// Build from `(user, item)` pairs; duplicates collapse to a single 1.
    pub fn from_pairs(n_users: usize, n_items: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
        for &(u, i) in &pairs {
            if u >= n_users {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: u,
                    len: n_users,
                });
            }
            if i >= n_items {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: i,
                    len: n_items,
                });
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut indptr = vec![0usize; n_users + 1];
        let mut item_degrees = vec![0usize; n_items];
        let mut indices = Vec::with_capacity(pairs.len());
        for &(u, i) in &pairs {
            indptr[u + 1] += 1;
            item_degrees[i] += 1;
            indices.push(i as u32);
        }
        for u in 0..n_users {
            indptr[u + 1] += indptr[u];
        }
        let user_degrees = (0..n_users).map(|u| indptr[u + 1] - indptr[u]).collect();
        Ok(InteractionMatrix {
            n_users,
            n_items,
            indptr,
            indices,
            user_degrees,
            item_degrees,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Items of user `u`, strictly increasing.
    pub fn row(&self, u: usize) -> &[u32] {
        &self.indices[self.indptr[u]..self.indptr[u + 1]]
    }

    pub fn contains(&self, u: usize, i: usize) -> bool {
        self.row(u).binary_search(&(i as u32)).is_ok()
    }

    pub fn user_degrees(&self) -> &[usize] {
        &self.user_degrees
    }

    pub fn item_degrees(&self) -> &[usize] {
        &self.item_degrees
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_users).flat_map(move |u| self.row(u).iter().map(move |&i| (u, i as usize)))
    }

    /// Item-major view: for every item, the users that interacted with it.
    pub fn item_users(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = self.item_degrees.iter().map(|&d| Vec::with_capacity(d)).collect();
        for (u, i) in self.pairs() {
            out[i].push(u as u32);
        }
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n_users, self.n_items);
        for (u, i) in self.pairs() {
            m[(u, i)] = 1.0;
        }
        m
    }
}

impl SparseRows for InteractionMatrix {
    fn n_rows(&self) -> usize {
        self.n_users
    }
    fn n_cols(&self) -> usize {
        self.n_items
    }
    fn for_each_in_row<F: FnMut(usize, f64)>(&self, row: usize, mut f: F) {
        for &i in self.row(row) {
            f(i as usize, 1.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `diag(left) * M * diag(right)`.
pub trait RowColScale: Sized {
    fn scale_rows_cols(&self, left: &[f64], right: &[f64]) -> Result<Self>;
}

fn check_scale_dims(n_rows: usize, n_cols: usize, left: &[f64], right: &[f64]) -> Result<()> {
    if left.len() != n_rows {
        return Err(Error::DimensionMismatch {
            context: "scale_rows_cols (left)",
            expected: n_rows,
            found: left.len(),
        });
    }
    if right.len() != n_cols {
        return Err(Error::DimensionMismatch {
            context: "scale_rows_cols (right)",
            expected: n_cols,
            found: right.len(),
        });
    }
    Ok(())
}

impl RowColScale for DenseMatrix {
    fn scale_rows_cols(&self, left: &[f64], right: &[f64]) -> Result<Self> {
        check_scale_dims(self.n_rows, self.n_cols, left, right)?;
        let mut out = self.clone();
        par::for_each_row_mut(&mut out.data, self.n_cols, |i, row| {
            for (v, r) in row.iter_mut().zip(right) {
                *v = left[i] * *v * r;
            }
        });
        Ok(out)
    }
}

impl RowColScale for CsrMatrix {
    fn scale_rows_cols(&self, left: &[f64], right: &[f64]) -> Result<Self> {
        check_scale_dims(self.n_rows, self.n_cols, left, right)?;
        Ok(self.map_values(|i, j, v| left[i] * v * right[j]))
    }
}

impl RowColScale for SparseSquareMatrix {
    fn scale_rows_cols(&self, left: &[f64], right: &[f64]) -> Result<Self> {
        Ok(SparseSquareMatrix(self.0.scale_rows_cols(left, right)?))
    }
}

pub fn scale_rows_cols<M: RowColScale>(m: &M, left: &[f64], right: &[f64]) -> Result<M> {
    m.scale_rows_cols(left, right)
}

/// Sparse times dense.
pub fn spmm<A: SparseRows>(a: &A, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.n_cols() != b.n_rows() {
        return Err(Error::DimensionMismatch {
            context: "spmm inner dimension",
            expected: a.n_cols(),
            found: b.n_rows(),
        });
    }
    let k = b.n_cols();
    let mut out = DenseMatrix::zeros(a.n_rows(), k);
    par::for_each_row_mut(&mut out.data, k, |i, row| {
        a.for_each_in_row(i, |j, v| {
            for (o, x) in row.iter_mut().zip(b.row(j)) {
                *o += v * x;
            }
        });
    });
    Ok(out)
}

/// `R^T diag(row_scale) R` as a dense item x item matrix, exactly symmetric.
pub fn gram(r: &InteractionMatrix, row_scale: &[f64]) -> Result<DenseMatrix> {
    if row_scale.len() != r.n_users() {
        return Err(Error::DimensionMismatch {
            context: "gram row_scale",
            expected: r.n_users(),
            found: row_scale.len(),
        });
    }
    let n = r.n_items();
    let item_users = r.item_users();
    let mut out = DenseMatrix::zeros(n, n);
    // Upper triangle per item row, users visited in ascending order.
    par::for_each_row_mut(&mut out.data, n, |a, row| {
        for &u in &item_users[a] {
            let s = row_scale[u as usize];
            for &b in r.row(u as usize) {
                let b = b as usize;
                if b >= a {
                    row[b] += s;
                }
            }
        }
    });
    for a in 0..n {
        for b in (a + 1)..n {
            out.data[b * n + a] = out.data[a * n + b];
        }
    }
    Ok(out)
}

fn magnitude_order(a: &(usize, usize, f64), b: &(usize, usize, f64)) -> Ordering {
    b.2.abs()
        .total_cmp(&a.2.abs())
        .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
}

/// Keep the `nnz_budget` largest-magnitude entries of a square matrix.
///
/// Ties in magnitude go to the lexicographically smaller `(row, col)`.
pub fn sparsify<M: SparseRows>(m: &M, nnz_budget: usize) -> Result<SparseSquareMatrix> {
    if m.n_rows() != m.n_cols() {
        return Err(Error::DimensionMismatch {
            context: "sparsify (square input)",
            expected: m.n_rows(),
            found: m.n_cols(),
        });
    }
    let mut entries = Vec::new();
    for i in 0..m.n_rows() {
        m.for_each_in_row(i, |j, v| {
            if v != 0.0 {
                entries.push((i, j, v));
            }
        });
    }
    if entries.len() > nnz_budget {
        entries.sort_unstable_by(magnitude_order);
        entries.truncate(nnz_budget);
    }
    SparseSquareMatrix::from_triplets(m.n_rows(), entries)
}

/// Symmetric variant of [`sparsify`]: mirrored entries are kept or dropped
/// together (a pair costs two stored values), so a symmetric input stays
/// symmetric. Selection stops at the first entry that no longer fits.
pub fn sparsify_symmetric<M: SparseRows>(m: &M, nnz_budget: usize) -> Result<SparseSquareMatrix> {
    if m.n_rows() != m.n_cols() {
        return Err(Error::DimensionMismatch {
            context: "sparsify_symmetric (square input)",
            expected: m.n_rows(),
            found: m.n_cols(),
        });
    }
    let mut upper = Vec::new();
    for i in 0..m.n_rows() {
        m.for_each_in_row(i, |j, v| {
            if j >= i && v != 0.0 {
                upper.push((i, j, v));
            }
        });
    }
    upper.sort_unstable_by(magnitude_order);
    let mut kept = Vec::new();
    let mut used = 0usize;
    for (i, j, v) in upper {
        let cost = if i == j { 1 } else { 2 };
        if used + cost > nnz_budget {
            break;
        }
        used += cost;
        kept.push((i, j, v));
        if i != j {
            kept.push((j, i, v));
        }
    }
    SparseSquareMatrix::from_triplets(m.n_rows(), kept)
}
