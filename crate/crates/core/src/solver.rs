//! CoRML training: ranking weights, the residual loss, the hybrid score and
//! the ADMM solver for the hollow, symmetric, nonnegative item weights `H`.
//!
//! The solver works on the degree-rescaled problem
//!
//! ```text
//! minimize  tr(D^-t Y^T (Phi Y - R) D^-t) + theta/2 ||D^1/2 H||_F^2
//! s.t.      diag(H) = 0,  Z >= 0,  Z = Z^T,  H = Z
//! Y = R (lambda D^-t H D^t + (1 - lambda) D^-1/2 G D^1/2)
//! ```
//!
//! which is quadratic in `H`: `1/2 tr(H^T K H) - tr(H^T B) + c` with
//! `K = 2 lambda^2 D^-t R^T Phi R D^-t + theta D` and
//! `B = lambda D^-t R^T R D^-t - 2 lambda (1 - lambda) D^-t R^T Phi R D^-1/2 G D^(1/2 - t)`.
//!
//! ADMM runs in the row-weighted inner product `<X, Y>_a = sum_i a_i <x_i, y_i>`
//! with `a` proportional to item degree. In that geometry the `Z` projection is
//! the elementwise solution of the diagonal Lyapunov equation
//! `A Z + Z A = A M + M^T A` followed by a clamp at zero, and the `H` step is a
//! ridge solve against the fixed matrix `K + rho_eff diag(a)`, factored once.
//! Items without training interactions never influence the loss; they are
//! excluded from the solve and get empty rows in `H`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::signal::{build_g_for_items, truncated_svd, GraphFilterFactor, SVD_POWER_ITERS};
use crate::sparse::{
    degree_power, gram, sparsify_symmetric, DenseMatrix, InteractionMatrix, SparseRows, SparseSquareMatrix,
};

/// Row weights used by the Lyapunov symmetrization and the ADMM penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetrizationWeights {
    /// `a_i` proportional to the item degree.
    Degree,
    /// `a_i = 1`: plain `(M + M^T) / 2`.
    Uniform,
}

impl std::str::FromStr for SymmetrizationWeights {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "degree" => Ok(SymmetrizationWeights::Degree),
            "uniform" => Ok(SymmetrizationWeights::Uniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown symmetrization weights '{other}' (expected degree|uniform)"
            ))),
        }
    }
}

impl std::fmt::Display for SymmetrizationWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SymmetrizationWeights::Degree => "degree",
            SymmetrizationWeights::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CormlHyperparams {
    /// Normalization strength of the item signal.
    pub t: f64,
    /// User-degree exponent in the per-user scaling.
    pub t_u: f64,
    /// Global scaling of the approximated ranking weights.
    pub epsilon: f64,
    /// L2 strength on `D^1/2 H`.
    pub theta: f64,
    /// Weight of the learned branch in the hybrid score.
    pub lambda: f64,
    /// Rank of the graph filter.
    pub rank: usize,
    /// ADMM penalty, relative to the mean diagonal of the quadratic term.
    pub rho: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub power_iters: usize,
    pub weights: SymmetrizationWeights,
    /// Stored-value cap for the final `H`; `None` keeps every nonzero.
    pub nnz_budget: Option<usize>,
}

impl Default for CormlHyperparams {
    fn default() -> Self {
        CormlHyperparams {
            t: 0.05,
            t_u: 0.5,
            epsilon: 0.1,
            theta: 0.1,
            lambda: 0.7,
            rank: 64,
            rho: 2.0,
            max_iters: 50,
            tol: 1e-4,
            seed: 0,
            power_iters: SVD_POWER_ITERS,
            weights: SymmetrizationWeights::Degree,
            nnz_budget: None,
        }
    }
}

impl CormlHyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epsilon", self.epsilon),
            ("theta", self.theta),
            ("rho", self.rho),
            ("tol", self.tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !self.t.is_finite() || !self.t_u.is_finite() {
            return Err(Error::InvalidArgument("t and t_u must be finite".into()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scaling factors and ranking weights
// ---------------------------------------------------------------------------

/// Per-user scaling `phi_u = epsilon (d_u / max d)^-t_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiVector(Vec<f64>);

impl PhiVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Users with degree zero get `phi = epsilon`; they contribute nothing to the
/// loss since their score rows are empty.
pub fn compute_phi(user_degrees: &[usize], epsilon: f64, t_u: f64) -> Result<PhiVector> {
    let max = user_degrees.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::AllDegreesZero);
    }
    let max = max as f64;
    Ok(PhiVector(
        user_degrees
            .iter()
            .map(|&d| {
                if d == 0 || t_u == 0.0 {
                    epsilon
                } else {
                    epsilon * (d as f64 / max).powf(-t_u)
                }
            })
            .collect(),
    ))
}

fn split_items(n: usize, interacted: &[usize]) -> Result<Vec<usize>> {
    let mut mask = vec![false; n];
    for &i in interacted {
        if i >= n {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: i,
                len: n,
            });
        }
        mask[i] = true;
    }
    let negatives: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    if interacted.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateRankingSet);
    }
    Ok(negatives)
}

/// Exact rank-count weights for one user.
///
/// `alpha` follows the order of `interacted`; `beta` covers the remaining items
/// in increasing index order. Ties count as correctly ranked.
pub fn exact_ranking_weights(scores: &[f64], interacted: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let negatives = split_items(scores.len(), interacted)?;
    let mut neg_sorted: Vec<f64> = negatives.iter().map(|&j| scores[j]).collect();
    neg_sorted.sort_by(f64::total_cmp);
    let mut pos_sorted: Vec<f64> = interacted.iter().map(|&i| scores[i]).collect();
    pos_sorted.sort_by(f64::total_cmp);
    let n_neg = negatives.len() as f64;
    let n_pos = interacted.len() as f64;
    let alpha = interacted
        .iter()
        .map(|&i| {
            let above = neg_sorted.len() - neg_sorted.partition_point(|&y| y <= scores[i]);
            -(above as f64) / n_neg
        })
        .collect();
    let beta = negatives
        .iter()
        .map(|&j| pos_sorted.partition_point(|&y| y < scores[j]) as f64 / n_pos)
        .collect();
    Ok((alpha, beta))
}

/// Affine substitutes `alpha~ = phi y - 1`, `beta~ = phi y`, laid out like
/// [`exact_ranking_weights`].
pub fn approx_ranking_weights(scores: &[f64], interacted: &[usize], phi_u: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(phi_u.is_finite() && phi_u > 0.0) {
        return Err(Error::NonPositive { index: 0, value: phi_u });
    }
    let negatives = split_items(scores.len(), interacted)?;
    Ok((
        interacted.iter().map(|&i| phi_u * scores[i] - 1.0).collect(),
        negatives.iter().map(|&j| phi_u * scores[j]).collect(),
    ))
}

/// `sum_u sum_i y_ui (phi_u y_ui - R_ui)`.
pub fn corml_loss(y: &DenseMatrix, r: &InteractionMatrix, phi: &PhiVector) -> Result<f64> {
    if y.shape() != (r.n_users(), r.n_items()) {
        return Err(Error::DimensionMismatch {
            context: "corml_loss score shape",
            expected: r.n_users() * r.n_items(),
            found: y.n_rows() * y.n_cols(),
        });
    }
    if phi.0.len() != r.n_users() {
        return Err(Error::DimensionMismatch {
            context: "corml_loss phi length",
            expected: r.n_users(),
            found: phi.0.len(),
        });
    }
    let per_user = par::map_indices(r.n_users(), |u| {
        let row = y.row(u);
        let quad: f64 = row.iter().map(|v| v * v).sum::<f64>() * phi.0[u];
        let linear: f64 = r.row(u).iter().map(|&i| row[i as usize]).sum();
        quad - linear
    });
    Ok(per_user.iter().sum())
}

// ---------------------------------------------------------------------------
// Hybrid score
// ---------------------------------------------------------------------------

/// Precomputed degree scalings for the hybrid score.
#[derive(Debug, Clone)]
pub struct HybridScorer {
    lambda: f64,
    h_down: Vec<f64>,
    h_up: Vec<f64>,
    g_down: Vec<f64>,
    g_up: Vec<f64>,
}

impl HybridScorer {
    pub fn new(lambda: f64, t: f64, item_degrees: &[usize]) -> Self {
        HybridScorer {
            lambda,
            h_down: degree_power(item_degrees, -t),
            h_up: degree_power(item_degrees, t),
            g_down: degree_power(item_degrees, -0.5),
            g_up: degree_power(item_degrees, 0.5),
        }
    }

    pub fn n_items(&self) -> usize {
        self.h_up.len()
    }

    /// Scores of one user (given by their training items) into `out`.
    pub fn score_into<H: SparseRows, G: SparseRows>(&self, items: &[u32], h: &H, g: &G, out: &mut [f64]) {
        let n = self.n_items();
        let mut acc_h = vec![0.0; n];
        let mut acc_g = vec![0.0; n];
        for &a in items {
            let a = a as usize;
            if self.lambda != 0.0 {
                let s = self.h_down[a];
                h.for_each_in_row(a, |j, v| acc_h[j] += s * v);
            }
            if self.lambda != 1.0 {
                let s = self.g_down[a];
                g.for_each_in_row(a, |j, v| acc_g[j] += s * v);
            }
        }
        for j in 0..n {
            out[j] = self.lambda * acc_h[j] * self.h_up[j] + (1.0 - self.lambda) * acc_g[j] * self.g_up[j];
        }
    }
}

/// `R (lambda D^-t H D^t + (1 - lambda) D^-1/2 G D^1/2)` for the requested users
/// (rows returned in the order given; all users when `None`).
pub fn hybrid_scores<H: SparseRows, G: SparseRows>(
    r: &InteractionMatrix,
    h: &H,
    g: &G,
    lambda: f64,
    t: f64,
    item_degrees: &[usize],
    users: Option<&[usize]>,
) -> Result<DenseMatrix> {
    let n = r.n_items();
    for (name, m) in [("H", (h.n_rows(), h.n_cols())), ("G", (g.n_rows(), g.n_cols()))] {
        if m != (n, n) {
            return Err(Error::DimensionMismatch {
                context: if name == "H" {
                    "hybrid_scores H"
                } else {
                    "hybrid_scores G"
                },
                expected: n,
                found: m.0,
            });
        }
    }
    if item_degrees.len() != n {
        return Err(Error::DimensionMismatch {
            context: "hybrid_scores item degrees",
            expected: n,
            found: item_degrees.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let all: Vec<usize>;
    let users = match users {
        Some(u) => u,
        None => {
            all = (0..r.n_users()).collect();
            &all
        }
    };
    if let Some(&bad) = users.iter().find(|&&u| u >= r.n_users()) {
        return Err(Error::IndexOutOfRange {
            what: "user",
            index: bad,
            len: r.n_users(),
        });
    }
    let scorer = HybridScorer::new(lambda, t, item_degrees);
    let mut out = DenseMatrix::zeros(users.len(), n);
    par::for_each_row_mut(out.as_mut_slice(), n, |k, row| {
        scorer.score_into(r.row(users[k]), h, g, row)
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Quadratic problem and ADMM steps
// ---------------------------------------------------------------------------

/// The degree-rescaled problem restricted to items with training interactions.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    /// Full item index of every active row/column.
    pub active: Vec<usize>,
    /// `K` (active x active).
    pub hessian: DMatrix<f64>,
    /// `B` (active x active).
    pub linear: DMatrix<f64>,
    /// ADMM row weights `a_i` (mean one).
    pub row_weights: Vec<f64>,
    /// Scalar multiplying `rho` so the penalty tracks the scale of `K`.
    pub penalty_scale: f64,
}

impl QuadraticProblem {
    pub fn build(
        r: &InteractionMatrix,
        g: &SparseSquareMatrix,
        phi: &PhiVector,
        hp: &CormlHyperparams,
    ) -> Result<Self> {
        let degrees = r.item_degrees();
        let active: Vec<usize> = (0..r.n_items()).filter(|&i| degrees[i] > 0).collect();
        let m = active.len();
        if m == 0 {
            return Err(Error::EmptyInput);
        }
        let d: Vec<f64> = active.iter().map(|&i| degrees[i] as f64).collect();
        let s: Vec<f64> = d.iter().map(|x| x.powf(-hp.t)).collect();
        let lambda = hp.lambda;

        let restrict = |full: &DenseMatrix| DMatrix::from_fn(m, m, |a, b| full[(active[a], active[b])]);
        let gram_phi = restrict(&gram(r, phi.as_slice())?);
        let gram_one = restrict(&gram(r, &vec![1.0; r.n_users()])?);

        let mut hessian = DMatrix::from_fn(m, m, |a, b| 2.0 * lambda * lambda * s[a] * gram_phi[(a, b)] * s[b]);
        for a in 0..m {
            hessian[(a, a)] += hp.theta * d[a];
        }

        let mut linear = DMatrix::from_fn(m, m, |a, b| lambda * s[a] * gram_one[(a, b)] * s[b]);
        if lambda != 0.0 && lambda != 1.0 {
            // S Gphi D^-1/2 G D^(1/2 - t)
            let g_act = DMatrix::from_fn(m, m, |a, b| g.get(active[a], active[b]));
            let left = DMatrix::from_fn(m, m, |a, b| s[a] * gram_phi[(a, b)] * d[b].powf(-0.5));
            let prod = left * g_act;
            let coef = 2.0 * lambda * (1.0 - lambda);
            for b in 0..m {
                let right = d[b].powf(0.5 - hp.t);
                for a in 0..m {
                    linear[(a, b)] -= coef * prod[(a, b)] * right;
                }
            }
        }

        let row_weights = match hp.weights {
            SymmetrizationWeights::Uniform => vec![1.0; m],
            SymmetrizationWeights::Degree => {
                let mean = d.iter().sum::<f64>() / m as f64;
                d.iter().map(|x| x / mean).collect()
            }
        };
        let penalty_scale = (0..m).map(|a| hessian[(a, a)]).sum::<f64>() / m as f64;
        Ok(QuadraticProblem {
            active,
            hessian,
            linear,
            row_weights,
            penalty_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.active.len()
    }

    /// `1/2 tr(H^T K H) - tr(H^T B)` (the objective up to its constant).
    pub fn quadratic_part(&self, h: &DMatrix<f64>) -> f64 {
        let kh = &self.hessian * h;
        0.5 * h.dot(&kh) - h.dot(&self.linear)
    }

    /// Gradient `K H - B`.
    pub fn gradient(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        &self.hessian * h - &self.linear
    }

    /// Scatter an active-space matrix into a full item x item sparse matrix.
    pub fn to_full(&self, h: &DMatrix<f64>, n_items: usize) -> SparseSquareMatrix {
        let mut triplets = Vec::new();
        for a in 0..self.dim() {
            for b in 0..self.dim() {
                let v = h[(a, b)];
                if v != 0.0 {
                    triplets.push((self.active[a], self.active[b], v));
                }
            }
        }
        SparseSquareMatrix::from_triplets(n_items, triplets).expect("active indices in range")
    }

    /// Gather a full matrix into active space.
    pub fn to_active<M: SparseRows>(&self, h: &M) -> DMatrix<f64> {
        let mut pos = vec![usize::MAX; h.n_rows()];
        for (a, &i) in self.active.iter().enumerate() {
            pos[i] = a;
        }
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (a, &i) in self.active.iter().enumerate() {
            h.for_each_in_row(i, |j, v| {
                if pos[j] != usize::MAX {
                    out[(a, pos[j])] = v;
                }
            });
        }
        out
    }
}

/// Cached inverse of `K + rho_eff diag(a)`.
#[derive(Debug, Clone)]
pub struct HStepFactorization {
    inverse: DMatrix<f64>,
    pub rho_eff: f64,
    /// `(max L_ii / min L_ii)^2` of the Cholesky factor; a cheap condition proxy.
    pub condition_estimate: f64,
}

impl HStepFactorization {
    pub fn new(problem: &QuadraticProblem, rho: f64) -> Result<Self> {
        let rho_eff = rho * problem.penalty_scale;
        let mut system = problem.hessian.clone();
        for (a, w) in problem.row_weights.iter().enumerate() {
            system[(a, a)] += rho_eff * w;
        }
        let diag_max = system.diagonal().max();
        let diag_min = system.diagonal().min();
        let chol = system.cholesky().ok_or_else(|| {
            Error::Factorization(format!(
                "H-step system is not positive definite (diagonal range [{diag_min:e}, {diag_max:e}], rho_eff {rho_eff:e})"
            ))
        })?;
        let l = chol.l();
        let (lmax, lmin) = l
            .diagonal()
            .iter()
            .fold((0.0f64, f64::INFINITY), |(hi, lo), v| (hi.max(*v), lo.min(*v)));
        let condition_estimate = (lmax / lmin).powi(2);
        if !condition_estimate.is_finite() {
            return Err(Error::Factorization(format!(
                "H-step system is singular (diagonal range [{diag_min:e}, {diag_max:e}])"
            )));
        }
        Ok(HStepFactorization {
            inverse: chol.inverse(),
            rho_eff,
            condition_estimate,
        })
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }
}

/// Primal, consensus and scaled dual iterates (active space).
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub h: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub u_dual: DMatrix<f64>,
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl AdmmState {
    pub fn zeros(n: usize) -> Self {
        AdmmState {
            h: DMatrix::zeros(n, n),
            z: DMatrix::zeros(n, n),
            u_dual: DMatrix::zeros(n, n),
            iteration: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
        }
    }
}

/// Minimize `1/2 tr(H^T K H) - tr(H^T B) + rho_eff/2 ||H - Z + U||_a^2` subject
/// to `diag(H) = 0`: one solve against the cached inverse, then a rank-one
/// correction per column through the diagonal multipliers.
pub fn admm_h_step(
    state: &AdmmState,
    factorization: &HStepFactorization,
    linear: &DMatrix<f64>,
    row_weights: &[f64],
) -> DMatrix<f64> {
    let n = linear.nrows();
    let rho = factorization.rho_eff;
    let mut rhs = linear.clone();
    for b in 0..n {
        for a in 0..n {
            rhs[(a, b)] += rho * row_weights[a] * (state.z[(a, b)] - state.u_dual[(a, b)]);
        }
    }
    hollow_solve(&factorization.inverse, &rhs)
}

/// `X = P rhs`, then `H[:, j] = X[:, j] - (X_jj / P_jj) P[:, j]` so `H_jj = 0`.
fn hollow_solve(p: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut h = p * rhs;
    for j in 0..h.ncols() {
        let mu = h[(j, j)] / p[(j, j)];
        if mu != 0.0 {
            for i in 0..h.nrows() {
                h[(i, j)] -= mu * p[(i, j)];
            }
        }
        h[(j, j)] = 0.0;
    }
    h
}

/// Elementwise solution of `A Z + Z A = A M + M^T A` for diagonal `A = diag(a)`.
pub fn lyapunov_symmetrize(m: &DMatrix<f64>, a: &[f64]) -> DMatrix<f64> {
    let n = m.nrows();
    let mut z = DMatrix::zeros(n, n);
    for i in 0..n {
        z[(i, i)] = m[(i, i)];
        for j in (i + 1)..n {
            let (x, y) = (m[(i, j)], m[(j, i)]);
            let v = if x == y {
                x
            } else {
                (a[i] * x + a[j] * y) / (a[i] + a[j])
            };
            z[(i, j)] = v;
            z[(j, i)] = v;
        }
    }
    z
}

/// `Z = max(0, lyapunov_symmetrize(H + U))`: symmetric and nonnegative exactly.
/// Hollowness comes from the H-step; a hollow `H + U` stays hollow here.
pub fn admm_z_step(state: &AdmmState, row_weights: &[f64]) -> DMatrix<f64> {
    let m = &state.h + &state.u_dual;
    lyapunov_symmetrize(&m, row_weights).map(|v| v.max(0.0))
}

/// `U += H - Z` and the residuals `||H - Z||_F`, `rho ||Z - Z_prev||_F`.
pub fn admm_dual_step(state: &mut AdmmState, z_prev: &DMatrix<f64>, rho: f64) {
    let diff = &state.h - &state.z;
    state.primal_residual = diff.norm();
    state.dual_residual = rho * (&state.z - z_prev).norm();
    state.u_dual += diff;
}

// ---------------------------------------------------------------------------
// Objective evaluation by the score route
// ---------------------------------------------------------------------------

/// Per-iterate loss and objective computed from scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterateValues {
    /// Untransformed residual loss `tr(Y^T (Phi Y - R))`.
    pub loss: f64,
    /// Degree-rescaled objective including the `theta` term.
    pub objective: f64,
}

/// Evaluate the loss and the rescaled objective of a full-size `H` by forming
/// each user's scores, independently of the quadratic-form route.
pub fn evaluate_iterate<H: SparseRows>(
    r: &InteractionMatrix,
    h: &H,
    g: &SparseSquareMatrix,
    phi: &PhiVector,
    hp: &CormlHyperparams,
) -> IterateValues {
    let degrees = r.item_degrees();
    let n = r.n_items();
    let scorer = HybridScorer::new(hp.lambda, hp.t, degrees);
    let down = degree_power(degrees, -hp.t);
    let per_user = par::map_indices(r.n_users(), |u| {
        let mut y = vec![0.0; n];
        let items = r.row(u);
        scorer.score_into(items, h, g, &mut y);
        let p = phi.as_slice()[u];
        let mut loss = 0.0;
        let mut obj = 0.0;
        for (j, &v) in y.iter().enumerate() {
            let yt = v * down[j];
            loss += v * p * v;
            obj += yt * p * yt;
        }
        for &i in items {
            let i = i as usize;
            loss -= y[i];
            obj -= y[i] * down[i] * down[i];
        }
        (loss, obj)
    });
    let (mut loss, mut objective) = (0.0, 0.0);
    for (l, o) in per_user {
        loss += l;
        objective += o;
    }
    let mut reg = 0.0;
    for (i, &d) in degrees.iter().enumerate().take(n) {
        let mut row = 0.0;
        h.for_each_in_row(i, |_, v| row += v * v);
        reg += d as f64 * row;
    }
    IterateValues {
        loss,
        objective: objective + 0.5 * hp.theta * reg,
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub loss: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub converged: bool,
    pub iterations: usize,
    /// Loss and objective at `H = 0`.
    pub initial: IterateValues,
    pub history: Vec<IterationLog>,
    pub rank_limited: bool,
    pub g_budgeted: bool,
    pub condition_estimate: f64,
    /// Nonzeros of `H` before the budget was applied.
    pub nnz_before_budget: usize,
}

/// A fitted model: learned `H`, graph filter and the training degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct CormlModel {
    pub h: SparseSquareMatrix,
    pub filter: GraphFilterFactor,
    pub g: SparseSquareMatrix,
    /// Budget used when `g` had to be built blockwise.
    pub g_budget: usize,
    pub item_degrees: Vec<usize>,
    pub user_degrees: Vec<usize>,
    pub hyperparams: CormlHyperparams,
}

impl CormlModel {
    pub fn n_items(&self) -> usize {
        self.item_degrees.len()
    }

    pub fn scorer(&self) -> HybridScorer {
        HybridScorer::new(self.hyperparams.lambda, self.hyperparams.t, &self.item_degrees)
    }

    pub fn scores(&self, r: &InteractionMatrix, users: Option<&[usize]>) -> Result<DenseMatrix> {
        hybrid_scores(
            r,
            &self.h,
            &self.g,
            self.hyperparams.lambda,
            self.hyperparams.t,
            &self.item_degrees,
            users,
        )
    }
}

/// Default stored-value budget: sparse storage (about two numbers per nonzero)
/// no larger than 64-dimensional embeddings for every user and item.
pub fn default_nnz_budget(n_users: usize, n_items: usize) -> usize {
    64 * (n_users + n_items) / 2
}

/// The full training procedure.
pub fn fit_corml(r: &InteractionMatrix, hp: &CormlHyperparams) -> Result<(CormlModel, FitReport)> {
    hp.validate()?;
    if r.nnz() == 0 {
        return Err(Error::EmptyInput);
    }
    let n = r.n_items();
    let budget = hp.nnz_budget.unwrap_or_else(|| default_nnz_budget(r.n_users(), n));

    let filter = truncated_svd(r, hp.rank, hp.seed, hp.power_iters)?;
    let (g, g_budgeted) = build_g_for_items(&filter, budget);
    let phi = compute_phi(r.user_degrees(), hp.epsilon, hp.t_u)?;
    let problem = QuadraticProblem::build(r, &g, &phi, hp)?;
    let factorization = HStepFactorization::new(&problem, hp.rho)?;
    log::info!(
        "corml: {} active items, rho_eff {:.3e}, condition estimate {:.3e}",
        problem.dim(),
        factorization.rho_eff,
        factorization.condition_estimate
    );

    let initial = evaluate_iterate(r, &SparseSquareMatrix::zeros(n), &g, &phi, hp);
    let mut state = AdmmState::zeros(problem.dim());
    let mut history = Vec::with_capacity(hp.max_iters);
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    let mut converged = false;
    while state.iteration < hp.max_iters {
        state.h = admm_h_step(&state, &factorization, &problem.linear, &problem.row_weights);
        let z_prev = std::mem::replace(&mut state.z, DMatrix::zeros(0, 0));
        state.z = admm_z_step(&state, &problem.row_weights);
        admm_dual_step(&mut state, &z_prev, factorization.rho_eff);
        state.iteration += 1;

        let full = problem.to_full(&state.z, n);
        let values = evaluate_iterate(r, &full, &g, &phi, hp);
        history.push(IterationLog {
            iteration: state.iteration,
            primal_residual: state.primal_residual,
            dual_residual: state.dual_residual,
            loss: values.loss,
            objective: values.objective,
        });
        log::debug!(
            "corml iter {}: primal {:.3e} dual {:.3e} loss {:.6e} objective {:.6e}",
            state.iteration,
            state.primal_residual,
            state.dual_residual,
            values.loss,
            values.objective
        );
        if state.primal_residual <= hp.tol && state.dual_residual <= hp.tol {
            converged = true;
            break;
        }
        if best.as_ref().is_none_or(|(o, _)| values.objective < *o) {
            best = Some((values.objective, state.z.clone()));
        }
    }

    let final_z = if converged {
        state.z
    } else {
        log::warn!(
            "corml: no convergence after {} iterations (primal {:.3e}, dual {:.3e}); keeping the best feasible iterate",
            state.iteration,
            state.primal_residual,
            state.dual_residual
        );
        best.map(|(_, z)| z).unwrap_or(state.z)
    };
    let full = problem.to_full(&final_z, n);
    let nnz_before_budget = full.nnz();
    let h = sparsify_symmetric(&full, budget)?;

    let report = FitReport {
        converged,
        iterations: state.iteration,
        initial,
        history,
        rank_limited: filter.rank_limited,
        g_budgeted,
        condition_estimate: factorization.condition_estimate,
        nnz_before_budget,
    };
    let model = CormlModel {
        h,
        g,
        g_budget: budget,
        filter,
        item_degrees: r.item_degrees().to_vec(),
        user_degrees: r.user_degrees().to_vec(),
        hyperparams: hp.clone(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> InteractionMatrix {
        InteractionMatrix::from_pairs(3, 3, [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)]).unwrap()
    }

    fn random_r(seed: u64, users: usize, items: usize, p: f64) -> InteractionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for u in 0..users {
            pairs.push((u, rng.random_range(0..items)));
            for i in 0..items {
                if rng.random::<f64>() < p {
                    pairs.push((u, i));
                }
            }
        }
        InteractionMatrix::from_pairs(users, items, pairs).unwrap()
    }

    fn brute_force_weights(scores: &[f64], interacted: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let neg: Vec<usize> = (0..scores.len()).filter(|i| !interacted.contains(i)).collect();
        let alpha = interacted
            .iter()
            .map(|&i| -(neg.iter().filter(|&&j| scores[j] > scores[i]).count() as f64) / neg.len() as f64)
            .collect();
        let beta = neg
            .iter()
            .map(|&j| interacted.iter().filter(|&&i| scores[j] > scores[i]).count() as f64 / interacted.len() as f64)
            .collect();
        (alpha, beta)
    }

    #[test]
    fn phi_examples() {
        let phi = compute_phi(&[4, 8, 16], 0.3, 0.0).unwrap();
        assert_eq!(phi.as_slice(), &[0.3, 0.3, 0.3]);
        let phi = compute_phi(&[4, 16], 0.1, 0.5).unwrap();
        assert!((phi.as_slice()[0] - 0.2).abs() < 1e-15);
        assert_eq!(phi.as_slice()[1], 0.1);
        assert!(matches!(compute_phi(&[0, 0], 0.1, 0.5), Err(Error::AllDegreesZero)));
    }

    #[test]
    fn exact_weight_examples() {
        // interacted item 0 above everything
        let (a, b) = exact_ranking_weights(&[0.9, 0.1, 0.2], &[0]).unwrap();
        assert_eq!(a, vec![0.0]);
        assert_eq!(b, vec![0.0, 0.0]);
        let (a, b) = exact_ranking_weights(&[0.1, 0.8, 0.9], &[0]).unwrap();
        assert_eq!(a, vec![-1.0]);
        assert_eq!(b, vec![1.0, 1.0]);
        // i+ = 0.5, i- = 0.7, j- = 0.3
        let (a, b) = exact_ranking_weights(&[0.5, 0.7, 0.3], &[0]).unwrap();
        assert_eq!(a, vec![-0.5]);
        assert_eq!(b, vec![1.0, 0.0]);
        assert!(exact_ranking_weights(&[0.1, 0.2], &[]).is_err());
        assert!(exact_ranking_weights(&[0.1, 0.2], &[0, 1]).is_err());
    }

    #[test]
    fn exact_weights_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(2..15);
            // coarse grid so ties occur
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let mut interacted: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.4).collect();
            if interacted.is_empty() {
                interacted.push(0);
            }
            if interacted.len() == n {
                interacted.pop();
            }
            let got = exact_ranking_weights(&scores, &interacted).unwrap();
            assert_eq!(got, brute_force_weights(&scores, &interacted));
        }
    }

    #[test]
    fn approx_weight_examples() {
        let (a, b) = approx_ranking_weights(&[0.0; 4], &[1, 2], 0.5).unwrap();
        assert_eq!(a, vec![-1.0, -1.0]);
        assert_eq!(b, vec![0.0, 0.0]);
        let (a, _) = approx_ranking_weights(&[2.0, 0.0], &[0], 0.5).unwrap();
        assert_eq!(a, vec![0.0]);
        assert!(approx_ranking_weights(&[1.0, 0.0], &[0], 0.0).is_err());
    }

    #[test]
    fn loss_examples() {
        let r = InteractionMatrix::from_pairs(1, 1, [(0, 0)]).unwrap();
        let phi = PhiVector(vec![1.0]);
        assert_eq!(corml_loss(&DenseMatrix::zeros(1, 1), &r, &phi).unwrap(), 0.0);
        let y = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(corml_loss(&y, &r, &phi).unwrap(), 0.0);

        let r = random_r(2, 4, 5, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = DenseMatrix::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
        let phi = PhiVector((0..4).map(|_| rng.random_range(0.1..1.0)).collect());
        let rd = r.to_dense();
        let mut brute = 0.0;
        for u in 0..4 {
            for i in 0..5 {
                brute += y[(u, i)] * (phi.0[u] * y[(u, i)] - rd[(u, i)]);
            }
        }
        assert!((corml_loss(&y, &r, &phi).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn hybrid_branch_isolation() {
        let r = random_r(3, 5, 6, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Vec::new();
        for i in 0..6 {
            for j in (i + 1)..6 {
                let v: f64 = rng.random();
                t.push((i, j, v));
                t.push((j, i, v));
            }
        }
        let h = SparseSquareMatrix::from_triplets(6, t).unwrap();
        let g = crate::signal::build_g(&truncated_svd(&r, 3, 0, 4).unwrap());
        let deg = r.item_degrees();
        let pure = hybrid_scores(&r, &h, &g, 1.0, 0.2, deg, None).unwrap();
        let direct = crate::signal::signal_scores(&r, &h, 0.2).unwrap();
        assert!(pure.max_abs_diff(&direct) < 1e-14);
        let a = hybrid_scores(&r, &h, &g, 0.0, 0.2, deg, None).unwrap();
        let b = hybrid_scores(&r, &SparseSquareMatrix::zeros(6), &g, 0.0, 0.2, deg, None).unwrap();
        assert_eq!(a, b);
        let subset = hybrid_scores(&r, &h, &g, 0.4, 0.1, deg, Some(&[3, 1])).unwrap();
        let full = hybrid_scores(&r, &h, &g, 0.4, 0.1, deg, None).unwrap();
        assert_eq!(subset.row(0), full.row(3));
        assert_eq!(subset.row(1), full.row(1));
        assert!(hybrid_scores(&r, &h, &g, 1.5, 0.1, deg, None).is_err());
    }

    #[test]
    fn h_step_trivial_cases() {
        let r = toy();
        let hp = CormlHyperparams::default();
        let g = SparseSquareMatrix::zeros(3);
        let phi = compute_phi(r.user_degrees(), hp.epsilon, hp.t_u).unwrap();
        let problem = QuadraticProblem::build(&r, &g, &phi, &hp).unwrap();
        let fact = HStepFactorization::new(&problem, hp.rho).unwrap();
        let state = AdmmState::zeros(3);
        let h = admm_h_step(&state, &fact, &DMatrix::zeros(3, 3), &problem.row_weights);
        assert_eq!(h, DMatrix::zeros(3, 3));

        // If the unconstrained minimizer is hollow, the correction vanishes.
        let target = DMatrix::from_row_slice(3, 3, &[0.0, 0.2, 0.1, 0.3, 0.0, 0.4, 0.5, 0.6, 0.0]);
        let mut system = problem.hessian.clone();
        for a in 0..3 {
            system[(a, a)] += fact.rho_eff * problem.row_weights[a];
        }
        let linear = &system * &target;
        let h = admm_h_step(&state, &fact, &linear, &problem.row_weights);
        assert!((h - target).abs().max() < 1e-12);
    }

    #[test]
    fn z_step_cases() {
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 0.2, 0.4, 0.2, 0.0, 0.1, 0.4, 0.1, 0.0]);
        let mut state = AdmmState::zeros(3);
        state.h = m.clone();
        assert_eq!(admm_z_step(&state, &[1.0, 2.0, 3.0]), m);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        state = AdmmState::zeros(4);
        state.h = m.clone();
        let z = admm_z_step(&state, &[1.0; 4]);
        let want = (&m + m.transpose()).map(|v| (v / 2.0).max(0.0));
        assert!((z - want).abs().max() < 1e-15);

        let a = [1.0, 3.0, 0.5, 2.0];
        let zp = lyapunov_symmetrize(&m, &a);
        let ad = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&a));
        let lhs = &ad * &zp + &zp * &ad;
        let rhs = &ad * &m + m.transpose() * &ad;
        assert!((lhs - rhs).abs().max() < 1e-10);
    }

    #[test]
    fn dual_step_cases() {
        let mut state = AdmmState::zeros(2);
        state.h = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        state.z = state.h.clone();
        let prev = state.z.clone();
        admm_dual_step(&mut state, &prev, 1.0);
        assert_eq!(state.u_dual, DMatrix::zeros(2, 2));
        assert_eq!(state.primal_residual, 0.0);

        let mut state = AdmmState::zeros(2);
        state.h = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 0.0]);
        admm_dual_step(&mut state, &DMatrix::zeros(2, 2), 1.0);
        assert_eq!(state.u_dual, state.h);
    }

    #[test]
    fn quadratic_route_matches_score_route() {
        let r = random_r(7, 9, 7, 0.35);
        let hp = CormlHyperparams {
            t: 0.15,
            lambda: 0.6,
            rank: 3,
            ..Default::default()
        };
        let filter = truncated_svd(&r, hp.rank, 0, 4).unwrap();
        let g = crate::signal::build_g(&filter);
        let phi = compute_phi(r.user_degrees(), hp.epsilon, hp.t_u).unwrap();
        let problem = QuadraticProblem::build(&r, &g, &phi, &hp).unwrap();
        let zero = evaluate_iterate(&r, &SparseSquareMatrix::zeros(7), &g, &phi, &hp).objective;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let m = problem.dim();
            let h = DMatrix::from_fn(m, m, |a, b| if a == b { 0.0 } else { rng.random_range(0.0..0.5) });
            let full = problem.to_full(&h, 7);
            let by_scores = evaluate_iterate(&r, &full, &g, &phi, &hp).objective;
            let by_quadratic = problem.quadratic_part(&h) + zero;
            assert!(
                (by_scores - by_quadratic).abs() < 1e-10 * by_scores.abs().max(1.0),
                "{by_scores} vs {by_quadratic}"
            );
        }
    }

    #[test]
    fn lambda_zero_gives_zero_h() {
        let r = random_r(11, 10, 6, 0.4);
        let hp = CormlHyperparams {
            lambda: 0.0,
            rank: 3,
            ..Default::default()
        };
        let (model, report) = fit_corml(&r, &hp).unwrap();
        assert_eq!(model.h.nnz(), 0);
        assert!(report.converged);
    }

    #[test]
    fn toy_learns_positive_co_like_weights() {
        let r = toy();
        let hp = CormlHyperparams {
            t: 0.0,
            rank: 3,
            tol: 1e-6,
            ..Default::default()
        };
        let (model, report) = fit_corml(&r, &hp).unwrap();
        assert!(report.converged, "{:?}", report.history.last());
        assert!(report.iterations <= 50);
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            assert!(model.h.get(i, j) > 0.0);
            assert_eq!(model.h.get(i, j), model.h.get(j, i));
        }
        let last = report.history.last().unwrap();
        assert!(last.objective <= report.initial.objective);
    }

    /// FISTA on the same quadratic with the exact Euclidean projection onto
    /// hollow, symmetric, nonnegative matrices.
    fn projected_gradient_oracle(problem: &QuadraticProblem, iters: usize) -> DMatrix<f64> {
        let m = problem.dim();
        let lmax = problem.hessian.clone().symmetric_eigenvalues().max();
        let step = 1.0 / lmax;
        let project = |x: &DMatrix<f64>| {
            let mut p = (x + x.transpose()).map(|v| (v / 2.0).max(0.0));
            p.fill_diagonal(0.0);
            p
        };
        let mut x = DMatrix::zeros(m, m);
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..iters {
            let next = project(&(&y - problem.gradient(&y) * step));
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = &next + (&next - &x) * ((t - 1.0) / t_next);
            x = next;
            t = t_next;
        }
        x
    }

    #[test]
    fn admm_matches_projected_gradient() {
        let r = random_r(21, 30, 12, 0.25);
        for weights in [SymmetrizationWeights::Degree, SymmetrizationWeights::Uniform] {
            let hp = CormlHyperparams {
                rank: 4,
                tol: 1e-9,
                max_iters: 2000,
                weights,
                nnz_budget: Some(usize::MAX / 4),
                ..Default::default()
            };
            let (model, report) = fit_corml(&r, &hp).unwrap();
            assert!(report.converged, "{weights}: {:?}", report.history.last());
            let filter = truncated_svd(&r, hp.rank, hp.seed, hp.power_iters).unwrap();
            let g = crate::signal::build_g(&filter);
            let phi = compute_phi(r.user_degrees(), hp.epsilon, hp.t_u).unwrap();
            let problem = QuadraticProblem::build(&r, &g, &phi, &hp).unwrap();
            let oracle = projected_gradient_oracle(&problem, 20_000);
            let admm = problem.to_active(&model.h);
            let diff = (&admm - &oracle).abs().max();
            assert!(diff < 1e-6, "{weights}: max diff {diff}");
            assert!(problem.quadratic_part(&admm) <= problem.quadratic_part(&oracle) + 1e-9);
        }
    }

    #[test]
    fn hyperparam_validation() {
        let bad = [
            CormlHyperparams {
                lambda: 1.2,
                ..Default::default()
            },
            CormlHyperparams {
                epsilon: 0.0,
                ..Default::default()
            },
            CormlHyperparams {
                theta: -1.0,
                ..Default::default()
            },
            CormlHyperparams {
                rank: 0,
                ..Default::default()
            },
            CormlHyperparams {
                t: f64::NAN,
                ..Default::default()
            },
        ];
        for hp in bad {
            assert!(hp.validate().is_err());
        }
        assert!(CormlHyperparams::default().validate().is_ok());
    }
}
