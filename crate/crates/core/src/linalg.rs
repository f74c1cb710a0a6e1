//! Dense linear-algebra helpers shared by the solver modules.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, which stores entries column-major,
//! so `vec[X]` is simply the underlying slice.

use nalgebra::{DMatrix, DVector, SymmetricEigen, LU};

use crate::error::{Error, Result};

/// Pivot ratio below which an LU factorisation is treated as singular.
const SINGULAR_PIVOT_RATIO: f64 = 1e-14;

pub fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn devectorize(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), rows * cols, "devectorize: length mismatch");
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Relative asymmetry `||X - X^T||_F / ||X||_F` (0 for the zero matrix).
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        0.0
    } else {
        (m - m.transpose()).norm() / norm
    }
}

/// Eigen-decomposition of the symmetric part of `m`, eigenvalues sorted
/// in descending order with eigenvectors permuted accordingly.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Flip `v` so that its first entry of non-negligible magnitude is positive.
fn fix_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    if scale == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Extreme eigenvalues `(min, max)` of the symmetric part of `m`.
pub fn sym_eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let vals = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Symmetric positive-semidefinite check with relative tolerance:
/// `lambda_min >= -tol * max(lambda_max, 0)`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let (min, max) = sym_eig_extremes(m);
    min >= -tol * max.max(0.0)
}

/// Symmetric square root `M^{1/2}` of a PSD matrix (negative round-off
/// eigenvalues are clipped).
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let d = DMatrix::from_diagonal(&vals.map(|x| x.max(0.0).sqrt()));
    &vecs * d * vecs.transpose()
}

/// A factor `L` with `L L^T = M` for a PSD matrix: Cholesky when it
/// succeeds, otherwise an eigenvalue-based factor.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = symmetrize(m).cholesky() {
        return ch.l();
    }
    let (vals, vecs) = sym_eigen_desc(m);
    let d = DMatrix::from_diagonal(&vals.map(|x| x.max(0.0).sqrt()));
    vecs * d
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(s)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m)[0]
}

/// 2-norm condition number; infinite for rank-deficient input.
pub fn cond2(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    let smin = s[s.len() - 1];
    if smin == 0.0 {
        f64::INFINITY
    } else {
        s[0] / smin
    }
}

pub fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Orthonormal basis of a column space, truncated at `tol * sigma_max`.
#[derive(Debug, Clone)]
pub struct OrthBasis {
    pub basis: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

impl OrthBasis {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

/// Orthonormal basis for the numerical image of `m`.
///
/// Left singular vectors are sign-normalised so that the matching right
/// singular vector has a positive first non-negligible entry, which makes
/// the basis a deterministic function of `m`.
pub fn orth(m: &DMatrix<f64>, tol: f64) -> Result<OrthBasis> {
    if m.is_empty() || m.amax() == 0.0 {
        return Err(Error::RankDeficient {
            rank: 0,
            requested: m.ncols().max(1),
        });
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let smax = svd.singular_values[order[0]];
    let kept: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| svd.singular_values[i] > tol * smax)
        .collect();
    let mut basis = DMatrix::zeros(m.nrows(), kept.len());
    for (dst, &src) in kept.iter().enumerate() {
        let mut col = u.column(src).clone_owned();
        let row = vt.row(src);
        let scale = row.amax();
        if let Some(first) = row.iter().find(|x| x.abs() > 1e-12 * scale) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        basis.set_column(dst, &col);
    }
    let singular_values = DVector::from_iterator(k, order.iter().map(|&i| svd.singular_values[i]));
    Ok(OrthBasis {
        basis,
        singular_values,
    })
}

/// `orth` followed by a rank requirement: returns exactly `want` columns.
pub fn orth_with_rank(m: &DMatrix<f64>, tol: f64, want: usize) -> Result<DMatrix<f64>> {
    let o = orth(m, tol)?;
    if o.rank() < want {
        return Err(Error::RankDeficient {
            rank: o.rank(),
            requested: want,
        });
    }
    Ok(o.basis.columns(0, want).clone_owned())
}

/// Gap metric `||Pi_a - Pi_b||_2` between the spans of two matrices with
/// orthonormal columns.
pub fn subspace_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let pa = a * a.transpose();
    let pb = b * b.transpose();
    spectral_norm(&(pa - pb))
}

/// Largest principal angle (radians) between the spans of two matrices
/// with orthonormal columns of equal width.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = singular_values(&(a.transpose() * b));
    let smin = s[s.len() - 1].clamp(0.0, 1.0);
    smin.acos()
}

/// LU factorisation with a pivot-ratio singularity check.
pub struct CheckedLu {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    pub pivot_ratio: f64,
}

impl CheckedLu {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        if m.nrows() != m.ncols() || m.is_empty() {
            return None;
        }
        let lu = m.clone().lu();
        let u = lu.u();
        let diag = u.diagonal();
        let max = diag.amax();
        let min = diag.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || !min.is_finite() {
            return None;
        }
        let pivot_ratio = min / max;
        if pivot_ratio < SINGULAR_PIVOT_RATIO {
            return None;
        }
        Some(CheckedLu { lu, pivot_ratio })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(b).expect("checked LU is non-singular")
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu.solve(b).expect("checked LU is non-singular")
    }
}

/// Solve `M x = b` with singularity detection.
pub fn checked_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    CheckedLu::new(m).map(|lu| lu.solve(b))
}

/// Matrix exponential by scaling and squaring (nalgebra's Pade-based
/// implementation). Overflow is reported as a numerical failure.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = m.clone().exp();
    if e.iter().all(|x| x.is_finite()) {
        Ok(e)
    } else {
        Err(Error::NumericalFailure(
            "matrix exponential overflowed".into(),
        ))
    }
}

/// Action `exp(t M) v` by a truncated Taylor series on substeps with
/// `|t| ||M||_1 / s <= 1`, never forming the exponential.
pub fn expm_action(m: &DMatrix<f64>, m_norm1: f64, t: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
    let substeps = (m_norm1 * t.abs()).ceil().max(1.0) as usize;
    let h = t / substeps as f64;
    let mut x = v.clone();
    let mut term = DVector::zeros(v.len());
    for _ in 0..substeps {
        term.copy_from(&x);
        let mut small_in_a_row = 0;
        for j in 1..=60 {
            term = m * &term * (h / j as f64);
            x += &term;
            if term.amax() <= f64::EPSILON * 0.5 * x.amax() {
                small_in_a_row += 1;
                if small_in_a_row == 2 {
                    break;
                }
            } else {
                small_in_a_row = 0;
            }
        }
        if !x.iter().all(|e| e.is_finite()) {
            return Err(Error::NumericalFailure(
                "exponential action overflowed".into(),
            ));
        }
    }
    Ok(x)
}

/// Largest real part of the eigenvalues of a square matrix. Triangular
/// input is read off its diagonal; otherwise a real Schur form is used.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    let upper = (0..n).all(|j| (j + 1..n).all(|i| m[(i, j)] == 0.0));
    let lower = (0..n).all(|j| (0..j).all(|i| m[(i, j)] == 0.0));
    if upper || lower {
        return Ok(m.diagonal().iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    if n <= 2 {
        // closed form for 2x2 avoids the iterative solver
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let tr = a + d;
        let disc = (a - d) * (a - d) / 4.0 + b * c;
        return Ok(if disc >= 0.0 {
            tr / 2.0 + disc.sqrt()
        } else {
            tr / 2.0
        });
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 0).ok_or_else(|| {
        Error::NumericalFailure("Schur decomposition did not converge".into())
    })?;
    let eig = schur.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Nearest correlation matrix (unit diagonal, PSD) by alternating
/// projections with Dykstra's correction.
pub fn nearest_correlation(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut y = symmetrize(m);
    let mut ds = DMatrix::zeros(n, n);
    for _ in 0..max_iter {
        let r = &y - &ds;
        let (vals, vecs) = sym_eigen_desc(&r);
        let d = DMatrix::from_diagonal(&vals.map(|x| x.max(0.0)));
        let x = &vecs * d * vecs.transpose();
        ds = &x - &r;
        let mut y_new = symmetrize(&x);
        for i in 0..n {
            y_new[(i, i)] = 1.0;
        }
        let change = (&y_new - &y).norm() / y.norm().max(1.0);
        y = y_new;
        if change < tol {
            break;
        }
    }
    y
}
