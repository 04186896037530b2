//! Small dense matrix kernels.
//!
//! Everything here targets the regime of a handful of rows and columns: the
//! tangent maps of a planar flow, per-layer weight matrices and the
//! Cauchy–Green tensor. Decompositions use Jacobi rotations throughout, which
//! are slow asymptotically but accurate and deterministic at these sizes.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{invalid, Result};

/// Largest dimension accepted by the decompositions.
pub const MAX_DIM: usize = 64;

const MAX_SWEEPS: usize = 80;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: size mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "Mat::from_rows: ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// `u vᵀ`
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |r, c| u[r] * v[c])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul: inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec: dimension mismatch");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, y.len(), "matvec_t: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        )
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        )
    }

    /// `self += s · rhs`
    pub fn axpy(&mut self, s: f64, rhs: &Mat) {
        assert_eq!(self.shape(), rhs.shape(), "axpy: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius inner product `Σ aᵢⱼ bᵢⱼ`.
    pub fn dot(&self, rhs: &Mat) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "dot: shape mismatch");
        self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum()
    }

    /// Determinant by LU factorization with partial pivoting.
    pub fn det(&self) -> f64 {
        assert!(self.is_square(), "det: matrix must be square");
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap_or(k);
            if a[p * n + k] == 0.0 {
                return 0.0;
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                det = -det;
            }
            let pivot = a[k * n + k];
            det *= pivot;
            for i in k + 1..n {
                let f = a[i * n + k] / pivot;
                for c in k..n {
                    a[i * n + c] -= f * a[k * n + c];
                }
            }
        }
        det
    }

    /// Largest absolute asymmetry `|mᵢⱼ − mⱼᵢ|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in r + 1..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Thin singular value decomposition `m = U · diag(σ) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Descending, nonnegative.
    pub singular_values: Vec<f64>,
    /// `rows × k` with orthonormal columns, `k = min(rows, cols)`.
    pub left_vectors: Mat,
    /// `cols × k` with orthonormal columns.
    pub right_vectors: Mat,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Mat {
        let k = self.singular_values.len();
        let us = Mat::from_fn(self.left_vectors.rows(), k, |r, c| {
            self.left_vectors[(r, c)] * self.singular_values[c]
        });
        us.matmul(&self.right_vectors.transpose())
    }

    pub fn left(&self, j: usize) -> Vec<f64> {
        self.left_vectors.col(j)
    }

    pub fn right(&self, j: usize) -> Vec<f64> {
        self.right_vectors.col(j)
    }
}

fn check_input(m: &Mat, what: &str) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(invalid(format!("{what}: empty matrix")));
    }
    if m.rows() > MAX_DIM || m.cols() > MAX_DIM {
        return Err(invalid(format!(
            "{what}: {}x{} exceeds the small dense regime ({MAX_DIM})",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(invalid(format!("{what}: non-finite entry")));
    }
    Ok(())
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Right singular vectors are normalized so their first nonzero component is
/// nonnegative; the matching left vectors are flipped along with them.
pub fn svd(m: &Mat) -> Result<SvdResult> {
    check_input(m, "svd")?;
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose());
        let mut out = SvdResult {
            singular_values: t.singular_values,
            left_vectors: t.right_vectors,
            right_vectors: t.left_vectors,
        };
        fix_signs(&mut out.right_vectors, Some(&mut out.left_vectors));
        return Ok(out);
    }
    let mut out = svd_tall(m);
    fix_signs(&mut out.right_vectors, Some(&mut out.left_vectors));
    Ok(out)
}

/// `rows >= cols`
fn svd_tall(m: &Mat) -> SvdResult {
    let (rows, n) = m.shape();
    // Work on columns stored contiguously.
    let mut u: Vec<Vec<f64>> = (0..n).map(|c| m.col(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = f64::EPSILON * (rows as f64);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(a, b)| a * b).sum();
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut u, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = u
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let mut needs_completion = vec![false; n];
    for (j, col) in u.iter_mut().enumerate() {
        if sigma[j] > smax * 1e-13 && sigma[j] > 0.0 {
            let s = sigma[j];
            col.iter_mut().for_each(|x| *x /= s);
        } else {
            needs_completion[j] = true;
        }
    }

    // Sort descending by singular value.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let u_sorted: Vec<Vec<f64>> = order.iter().map(|&j| u[j].clone()).collect();
    let v_sorted: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    let flags: Vec<bool> = order.iter().map(|&j| needs_completion[j]).collect();
    sigma = order.iter().map(|&j| sigma[j]).collect();
    let mut u = u_sorted;
    complete_orthonormal(&mut u, &flags, rows);

    SvdResult {
        singular_values: sigma,
        left_vectors: Mat::from_fn(rows, n, |r, c| u[c][r]),
        right_vectors: Mat::from_fn(n, n, |r, c| v_sorted[c][r]),
    }
}

#[inline]
fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Replaces flagged columns with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Vec<f64>], flags: &[bool], dim: usize) {
    for j in 0..cols.len() {
        if !flags[j] {
            continue;
        }
        let mut best: Option<Vec<f64>> = None;
        for e in 0..dim {
            let mut cand: Vec<f64> = (0..dim).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
            // Two passes of modified Gram–Schmidt.
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == j || (flags[k] && k > j) {
                        continue;
                    }
                    let proj: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                    cand.iter_mut().zip(other).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                cand.iter_mut().for_each(|x| *x /= norm);
                best = Some(cand);
                break;
            }
            if best.is_none() && norm > 1e-8 {
                cand.iter_mut().for_each(|x| *x /= norm);
                best = Some(cand);
            }
        }
        cols[j] = best.expect("orthonormal completion failed");
    }
}

fn fix_signs(vectors: &mut Mat, mut paired: Option<&mut Mat>) {
    for j in 0..vectors.cols() {
        let scale = (0..vectors.rows()).fold(0.0_f64, |m, r| m.max(vectors[(r, j)].abs()));
        let lead = (0..vectors.rows())
            .map(|r| vectors[(r, j)])
            .find(|v| v.abs() > scale * 1e-12);
        if matches!(lead, Some(v) if v < 0.0) {
            for r in 0..vectors.rows() {
                vectors[(r, j)] = -vectors[(r, j)];
            }
            if let Some(p) = paired.as_deref_mut() {
                for r in 0..p.rows() {
                    p[(r, j)] = -p[(r, j)];
                }
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: Mat,
}

impl SymEig {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.eigenvectors.col(j)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(m: &Mat) -> Result<SymEig> {
    check_input(m, "sym_eig")?;
    if !m.is_square() {
        return Err(invalid("sym_eig: matrix must be square"));
    }
    let asym = m.asymmetry();
    if asym > 1e-12 {
        return Err(invalid(format!("sym_eig: matrix not symmetric (|aᵢⱼ−aⱼᵢ| = {asym:e})")));
    }
    let n = m.rows();
    // Symmetrize exactly so rotations see a consistent matrix.
    let mut a = Mat::from_fn(n, n, |r, c| 0.5 * (m[(r, c)] + m[(c, r)]));
    let mut v = Mat::identity(n);
    let scale = a.frobenius_norm();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| a[(r, c)] * a[(r, c)])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * scale * 1e-2 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J acting on (p, q).
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    let eigenvalues: Vec<f64> = order.iter().map(|&j| a[(j, j)]).collect();
    let mut eigenvectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors[(r, dst)] = v[(r, src)];
        }
    }
    fix_signs(&mut eigenvectors, None);
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Operator 2-norm, i.e. the largest singular value.
pub fn spectral_norm(m: &Mat) -> Result<f64> {
    Ok(svd(m)?.singular_values[0])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
