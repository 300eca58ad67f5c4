//! Dense and sparse vector/matrix primitives.
//!
//! Everything here computes in `f64`. Kernels that the performance model
//! reasons about (`matvec`, `sparse_dot`) have counted variants that charge
//! an [`OpCounter`] one operation per multiply and one per accumulate.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Running tally of counted arithmetic operations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounter(u64);

impl OpCounter {
    pub fn new() -> Self {
        Self(0)
    }

    #[inline]
    pub fn charge(&mut self, ops: u64) {
        self.0 += ops;
    }

    pub fn get(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite vector entry at {pos}")));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.0)
    }

    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        ensure_len("dot", self.len(), other.len())?;
        Ok(dot(&self.0, &other.0))
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_len("matrix data", rows * cols, data.len())?;
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            ensure_len("matrix row", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self -= scale * u * pᵀ` where `p` is sparse.
    pub fn sub_sparse_outer(&mut self, scale: f64, u: &[f64], p: &SparseVector) -> Result<()> {
        ensure_len("outer product rows", self.rows, u.len())?;
        ensure_len("outer product cols", self.cols, p.len())?;
        for (i, &ui) in u.iter().enumerate() {
            let coef = scale * ui;
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (&j, &pj) in p.indices().iter().zip(p.values()) {
                row[j] -= coef * pj;
            }
        }
        Ok(())
    }

    /// `Aᵀ y` for a vector of length `rows`.
    fn transpose_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        out
    }

    /// Gram matrix of the smaller side: `A Aᵀ` when rows ≤ cols, else `Aᵀ A`.
    fn small_gram(&self) -> (Vec<f64>, usize) {
        if self.rows <= self.cols {
            let n = self.rows;
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let s = dot(self.row(i), self.row(j));
                    g[i * n + j] = s;
                    g[j * n + i] = s;
                }
            }
            (g, n)
        } else {
            let n = self.cols;
            let mut g = vec![0.0; n * n];
            for r in 0..self.rows {
                let row = self.row(r);
                for i in 0..n {
                    let ri = row[i];
                    if ri == 0.0 {
                        continue;
                    }
                    for j in i..n {
                        g[i * n + j] += ri * row[j];
                    }
                }
            }
            for i in 0..n {
                for j in 0..i {
                    g[i * n + j] = g[j * n + i];
                }
            }
            (g, n)
        }
    }
}

/// Sparse vector with strictly increasing indices and nonzero values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    len: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(len: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        ensure_len("sparse values", indices.len(), values.len())?;
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sparse indices must be strictly increasing"));
        }
        if indices.last().is_some_and(|&i| i >= len) {
            return Err(Error::invalid("sparse index out of range"));
        }
        if values.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::invalid("sparse values must be finite and nonzero"));
        }
        Ok(Self {
            len,
            indices,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum()
    }

    pub fn to_dense(&self) -> DenseVector {
        let mut out = vec![0.0; self.len];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        DenseVector(out)
    }

    /// Dot product charging `2·nnz` operations.
    #[inline]
    pub fn dot_counted(&self, d: &[f64], ops: &mut OpCounter) -> Result<f64> {
        ensure_len("sparse dot", self.len, d.len())?;
        let mut acc = 0.0;
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            acc += v * d[i];
        }
        ops.charge(2 * self.nnz() as u64);
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripletStatus {
    Converged,
    /// Input was identically zero; `sigma` is 0 and the vectors are unit axes.
    ZeroMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: DenseVector,
    pub v: DenseVector,
    pub status: TripletStatus,
    pub iterations: usize,
    /// Set when the observed convergence rate puts σ₂/σ₁ above 0.999, i.e.
    /// the dominant singular value is (nearly) repeated and `u`, `v` are one
    /// member of a dominant subspace.
    pub near_degenerate: bool,
}

pub const DEFAULT_TRIPLET_TOL: f64 = 1e-10;
pub const DEFAULT_TRIPLET_MAX_ITERS: usize = 10_000;
const START_VECTOR_SEED: u64 = 0x5eed_1a57_0001;

/// Dominant singular triplet by power iteration on the Gram matrix of the
/// smaller side.
///
/// Stops once the relative change of the σ estimate drops below `tol`. The
/// returned triplet always satisfies `uᵀM = σvᵀ` to rounding, because `v`
/// and `σ` are recomputed from the final `u`.
pub fn leading_triplet(m: &DenseMatrix, tol: f64, max_iters: usize) -> Result<SingularTriplet> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::invalid("tol must be positive"));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::invalid("empty matrix"));
    }
    if m.is_zero() {
        return Ok(SingularTriplet {
            sigma: 0.0,
            u: unit_axis(m.rows, 0),
            v: unit_axis(m.cols, 0),
            status: TripletStatus::ZeroMatrix,
            iterations: 0,
            near_degenerate: false,
        });
    }

    let (gram, n) = m.small_gram();
    let mut q = seeded_unit_vector(n);
    let mut z = vec![0.0; n];
    let mut sigma_prev = f64::NAN;
    let mut delta_prev = f64::NAN;
    let mut rate = 0.0;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=max_iters {
        iterations = it;
        sym_matvec(&gram, n, &q, &mut z);
        let mut zn = norm2(&z);
        if zn == 0.0 {
            // start vector orthogonal to the range; restart on the heaviest axis
            let k = (0..n)
                .max_by(|&a, &b| gram[a * n + a].total_cmp(&gram[b * n + b]))
                .unwrap_or(0);
            q.iter_mut().for_each(|x| *x = 0.0);
            q[k] = 1.0;
            sym_matvec(&gram, n, &q, &mut z);
            zn = norm2(&z);
        }
        for (qi, zi) in q.iter_mut().zip(&z) {
            *qi = zi / zn;
        }
        let sigma = zn.sqrt();
        if sigma_prev.is_finite() {
            let delta = (sigma - sigma_prev).abs();
            if delta_prev.is_finite() && delta_prev > 0.0 && delta > 1e-14 * sigma {
                rate = delta / delta_prev;
            }
            if delta <= tol * sigma {
                converged = true;
                break;
            }
            delta_prev = delta;
        }
        sigma_prev = sigma;
    }

    let lambda = sigma_prev.max(0.0).powi(2);
    // rate ≈ (σ₂/σ₁)⁴ for power iteration on the Gram matrix; an exact tie
    // leaves no trace in the rate, so also probe the deflated operator
    let near_degenerate = rate >= 0.999f64.powi(4)
        || second_eigen_lower_bound(&gram, n, &q, lambda) >= 0.999f64.powi(2) * lambda;

    let u = if m.rows <= m.cols {
        q
    } else {
        let mut mv: Vec<f64> = (0..m.rows).map(|i| dot(m.row(i), &q)).collect();
        let s = norm2(&mv);
        mv.iter_mut().for_each(|x| *x /= s);
        mv
    };
    let mut triplet = finish_from_left(m, u, iterations);
    triplet.near_degenerate = near_degenerate;

    if converged {
        Ok(triplet)
    } else {
        Err(Error::NoConvergence {
            iterations,
            last: Box::new(triplet),
        })
    }
}

/// Largest Rayleigh quotient seen while power-iterating the Gram matrix
/// restricted to the complement of `q1`. Never exceeds λ₂.
fn second_eigen_lower_bound(gram: &[f64], n: usize, q1: &[f64], lambda1: f64) -> f64 {
    if n < 2 || lambda1 <= 0.0 {
        return 0.0;
    }
    let mut q = seeded_unit_vector(n);
    let mut z = vec![0.0; n];
    let mut best: f64 = 0.0;
    for _ in 0..32 {
        let c = dot(&q, q1);
        q.iter_mut().zip(q1).for_each(|(x, y)| *x -= c * y);
        let qn = norm2(&q);
        if qn < 1e-12 {
            break;
        }
        q.iter_mut().for_each(|x| *x /= qn);
        sym_matvec(gram, n, &q, &mut z);
        best = best.max(dot(&q, &z));
        q.copy_from_slice(&z);
    }
    best
}

fn finish_from_left(m: &DenseMatrix, mut u: Vec<f64>, iterations: usize) -> SingularTriplet {
    let mut v = m.transpose_mul(&u);
    let sigma = norm2(&v);
    if sigma > 0.0 {
        v.iter_mut().for_each(|x| *x /= sigma);
    }
    let scale = u.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if let Some(first) = u.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    SingularTriplet {
        sigma,
        u: DenseVector(u),
        v: DenseVector(v),
        status: TripletStatus::Converged,
        iterations,
        near_degenerate: false,
    }
}

fn seeded_unit_vector(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(START_VECTOR_SEED);
    let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = norm2(&q);
    q.iter_mut().for_each(|x| *x /= s);
    q
}

fn unit_axis(n: usize, k: usize) -> DenseVector {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    DenseVector(v)
}

fn sym_matvec(g: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&g[i * n..(i + 1) * n], x);
    }
}

/// Keeps the `nz` largest-magnitude entries of `v`. Ties keep the lower
/// index; exact zeros are never stored.
pub fn prune_vector(v: &[f64], nz: usize) -> Result<SparseVector> {
    if nz == 0 {
        return Err(Error::invalid("nz must be at least 1"));
    }
    if nz > v.len() {
        return Err(Error::invalid(format!(
            "nz = {nz} exceeds vector length {}",
            v.len()
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    order.truncate(nz);
    order.sort_unstable();
    let values = order.iter().map(|&i| v[i]).collect();
    Ok(SparseVector {
        len: v.len(),
        indices: order,
        values,
    })
}

pub fn sparse_dot(s: &SparseVector, d: &DenseVector) -> Result<f64> {
    s.dot_counted(d, &mut OpCounter::new())
}

pub fn matvec(m: &DenseMatrix, x: &DenseVector) -> Result<DenseVector> {
    matvec_counted(m, x, &mut OpCounter::new())
}

/// Row-by-row product; each row sum runs in ascending column order.
/// Charges `2·rows·cols`.
pub fn matvec_counted(m: &DenseMatrix, x: &[f64], ops: &mut OpCounter) -> Result<DenseVector> {
    ensure_len("matvec", m.cols, x.len())?;
    let out = (0..m.rows).map(|i| dot(m.row(i), x)).collect();
    ops.charge(2 * (m.rows * m.cols) as u64);
    Ok(DenseVector(out))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseMatrix::new(rows, cols, data).unwrap()
    }

    /// Largest singular value via a symmetric eigensolver on M Mᵀ.
    fn gram_oracle_sigma(m: &DenseMatrix) -> f64 {
        let a = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        let g = &a * a.transpose();
        let eig = g.symmetric_eigen();
        eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max).sqrt()
    }

    fn lead(m: &DenseMatrix) -> SingularTriplet {
        leading_triplet(m, DEFAULT_TRIPLET_TOL, DEFAULT_TRIPLET_MAX_ITERS).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let m = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let t = lead(&m);
        assert_relative_eq!(t.sigma, 3.0, max_relative = 1e-9);
        // the stopping rule is on σ, so the vectors are only good to ~√tol
        assert_relative_eq!(t.u[0], 1.0, epsilon = 1e-4);
        assert!(t.u[1].abs() < 1e-4);
        assert_relative_eq!(t.v[0], 1.0, epsilon = 1e-4);
        assert!(t.v[1].abs() < 1e-4);
        assert_relative_eq!(t.u.norm(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(t.v.norm(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn rank_one_matrix() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 4.0], vec![1.0, 2.0]]).unwrap();
        let t = lead(&m);
        let s5 = 5f64.sqrt();
        assert_relative_eq!(t.sigma, 5.0, max_relative = 1e-12);
        assert_relative_eq!(t.u[0], 2.0 / s5, epsilon = 1e-12);
        assert_relative_eq!(t.u[1], 1.0 / s5, epsilon = 1e-12);
        assert_relative_eq!(t.v[0], 1.0 / s5, epsilon = 1e-12);
        assert_relative_eq!(t.v[1], 2.0 / s5, epsilon = 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(t.sigma * t.u[i] * t.v[j], m.get(i, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tall_matrix_uses_column_gram() {
        let m = random_matrix(12, 5, 3);
        let t = lead(&m);
        assert_relative_eq!(t.sigma, gram_oracle_sigma(&m), max_relative = 1e-6);
        assert_relative_eq!(t.u.norm(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(t.v.norm(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn random_matches_gram_oracle() {
        for seed in 0..20 {
            let m = random_matrix(8, 12, seed);
            let t = lead(&m);
            assert_relative_eq!(t.sigma, gram_oracle_sigma(&m), max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_matrix_is_distinguished() {
        let t = lead(&DenseMatrix::zeros(3, 4));
        assert_eq!(t.status, TripletStatus::ZeroMatrix);
        assert_eq!(t.sigma, 0.0);
        assert_eq!(t.u.norm(), 1.0);
    }

    #[test]
    fn non_convergence_carries_last_iterate() {
        let m = random_matrix(16, 32, 9);
        match leading_triplet(&m, 1e-10, 2) {
            Err(Error::NoConvergence { iterations, last }) => {
                assert_eq!(iterations, 2);
                assert!(last.sigma > 0.0);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn repeated_singular_value_is_flagged() {
        let m = DenseMatrix::from_rows(&[
            vec![2.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let t = lead(&m);
        assert_relative_eq!(t.sigma, 2.0, max_relative = 1e-12);
        assert!(t.u[2].abs() < 1e-6);
        assert!(t.near_degenerate);

        let m = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(!lead(&m).near_degenerate);
    }

    #[test]
    fn bad_arguments() {
        let m = random_matrix(2, 2, 0);
        assert!(leading_triplet(&m, 0.0, 10).is_err());
        assert!(leading_triplet(&m, 1e-10, 0).is_err());
    }

    #[test]
    fn prune_examples() {
        let s = prune_vector(&[0.3, -0.7, 0.1, 0.5], 2).unwrap();
        assert_eq!(s.indices(), &[1, 3]);
        assert_eq!(s.values(), &[-0.7, 0.5]);

        let s = prune_vector(&[0.5, 0.5, 0.5], 1).unwrap();
        assert_eq!(s.indices(), &[0]);
        assert_eq!(s.values(), &[0.5]);

        let s = prune_vector(&[0.0, 1.0, 0.0], 3).unwrap();
        assert_eq!(s.nnz(), 1);

        assert!(prune_vector(&[1.0], 0).is_err());
        assert!(prune_vector(&[1.0], 2).is_err());
    }

    /// Full-sort-then-mask reference.
    fn prune_oracle(v: &[f64], nz: usize) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| {
            v[b].abs()
                .partial_cmp(&v[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut out = vec![0.0; v.len()];
        for &i in idx.iter().take(nz) {
            out[i] = v[i];
        }
        out
    }

    #[test]
    fn prune_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for _ in 0..50 {
            let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = prune_vector(&v, 16).unwrap();
            assert_eq!(s.to_dense().as_slice(), prune_oracle(&v, 16).as_slice());
        }
    }

    #[test]
    fn sparse_dot_examples() {
        let s = SparseVector::new(4, vec![1, 3], vec![-0.7, 0.5]).unwrap();
        let d = DenseVector::new(vec![1.0; 4]).unwrap();
        assert_relative_eq!(sparse_dot(&s, &d).unwrap(), -0.2, epsilon = 1e-15);

        let d = DenseVector::new(vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(sparse_dot(&s, &d).unwrap(), 0.0);

        let mut ops = OpCounter::new();
        s.dot_counted(&[1.0; 4], &mut ops).unwrap();
        assert_eq!(ops.get(), 4);

        assert!(sparse_dot(&s, &DenseVector::zeros(3)).is_err());
    }

    #[test]
    fn sparse_vector_rejects_bad_layout() {
        assert!(SparseVector::new(4, vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseVector::new(4, vec![4], vec![1.0]).is_err());
        assert!(SparseVector::new(4, vec![1], vec![0.0]).is_err());
        assert!(SparseVector::new(4, vec![1], vec![]).is_err());
    }

    #[test]
    fn matvec_examples() {
        let x = DenseVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(matvec(&DenseMatrix::identity(3), &x).unwrap(), x);
        assert_eq!(
            matvec(&DenseMatrix::zeros(2, 3), &x).unwrap().as_slice(),
            &[0.0, 0.0]
        );
        assert!(matvec(&DenseMatrix::zeros(2, 4), &x).is_err());

        let mut ops = OpCounter::new();
        matvec_counted(&DenseMatrix::zeros(5, 7), &[0.0; 7], &mut ops).unwrap();
        assert_eq!(ops.get(), 70);
    }

    #[test]
    fn matvec_matches_naive_loop() {
        let m = random_matrix(5, 7, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = matvec(&m, &DenseVector::new(x.clone()).unwrap()).unwrap();
        for i in 0..5 {
            let mut s = 0.0;
            for j in 0..7 {
                s += m.data()[i * 7 + j] * x[j];
            }
            assert!((got[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(DenseVector::new(vec![f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pythagorean_rank_one(rows in 1usize..64, cols in 1usize..256, seed in any::<u64>()) {
            let m = random_matrix(rows, cols, seed);
            let t = lead(&m);
            let mut lhs = 0.0;
            for i in 0..rows {
                for j in 0..cols {
                    let e = m.get(i, j) - t.sigma * t.u[i] * t.v[j];
                    lhs += e * e;
                }
            }
            let rhs = m.frobenius_norm_sq() - t.sigma * t.sigma;
            prop_assert!((lhs - rhs).abs() <= 1e-6 * m.frobenius_norm_sq());
        }

        #[test]
        fn triplet_is_bit_deterministic(seed in any::<u64>()) {
            let m = random_matrix(9, 13, seed);
            let a = lead(&m);
            let b = lead(&m);
            prop_assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
            prop_assert_eq!(a.u, b.u);
            prop_assert_eq!(a.v, b.v);
        }

        #[test]
        fn prune_dominance(v in proptest::collection::vec(-10.0f64..10.0, 1..80), nz_frac in 0.0f64..1.0) {
            let nz = 1 + ((v.len() - 1) as f64 * nz_frac) as usize;
            let s = prune_vector(&v, nz).unwrap();
            let kept_min = s.values().iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
            for j in (0..v.len()).filter(|j| !s.indices().contains(j)) {
                prop_assert!(kept_min >= v[j].abs());
            }
            let nonzero = v.iter().filter(|x| **x != 0.0).count();
            prop_assert_eq!(s.nnz(), nz.min(nonzero));
        }

        #[test]
        fn sparse_dot_matches_densified(v in proptest::collection::vec(-1.0f64..1.0, 1..50),
                                        d_seed in any::<u64>(), nz_frac in 0.0f64..1.0) {
            let nz = 1 + ((v.len() - 1) as f64 * nz_frac) as usize;
            let s = prune_vector(&v, nz).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(d_seed);
            let d = DenseVector::new((0..v.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let row = DenseMatrix::new(1, v.len(), s.to_dense().into_vec()).unwrap();
            let dense = matvec(&row, &d).unwrap()[0];
            prop_assert!((sparse_dot(&s, &d).unwrap() - dense).abs() < 1e-12);
        }
    }
}
