//! Model data types, Lyapunov and Kronecker operator algebra, and the
//! Petrov-Galerkin projection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, CheckedLu};

/// Relative eigenvalue tolerance for the PSD check on `K_M`.
pub const COVARIANCE_PSD_TOL: f64 = 1e-12;
/// Default bound on `cond(W^T V)`.
pub const DEFAULT_COND_THRESHOLD: f64 = 1e8;

/// Full linear stochastic system
/// `dx = A x dt + sum_i N_i x dM_i`, `x(0) = X0 z0`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemCoefficients {
    pub a: DMatrix<f64>,
    pub noise: Vec<DMatrix<f64>>,
    pub x0: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub k_m: DMatrix<f64>,
    pub horizon: f64,
}

/// Coefficients `z0` of the concrete initial state `x(0) = X0 z0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialExpansion {
    pub z0: DVector<f64>,
}

impl InitialExpansion {
    pub fn new(z0: DVector<f64>) -> Self {
        InitialExpansion { z0 }
    }

    pub fn unit() -> Self {
        InitialExpansion {
            z0: DVector::from_element(1, 1.0),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.z0.norm_squared()
    }
}

impl SystemCoefficients {
    pub fn new(
        a: DMatrix<f64>,
        noise: Vec<DMatrix<f64>>,
        x0: DMatrix<f64>,
        c: DMatrix<f64>,
        k_m: DMatrix<f64>,
        horizon: f64,
    ) -> Result<Self> {
        let sys = SystemCoefficients {
            a,
            noise,
            x0,
            c,
            k_m,
            horizon,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if n == 0 || self.a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "A must be square and non-empty, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        let q = self.noise.len();
        if q == 0 {
            return Err(Error::InvalidModel("at least one noise matrix is required".into()));
        }
        for (i, ni) in self.noise.iter().enumerate() {
            if ni.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!(
                    "N[{i}] is {}x{}, expected {n}x{n}",
                    ni.nrows(),
                    ni.ncols()
                )));
            }
        }
        if self.x0.nrows() != n || self.x0.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "X0 is {}x{}, expected {n}xm with m >= 1",
                self.x0.nrows(),
                self.x0.ncols()
            )));
        }
        if self.c.ncols() != n || self.c.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "C is {}x{}, expected px{n} with p >= 1",
                self.c.nrows(),
                self.c.ncols()
            )));
        }
        if self.k_m.shape() != (q, q) {
            return Err(Error::DimensionMismatch(format!(
                "K_M is {}x{}, expected {q}x{q}",
                self.k_m.nrows(),
                self.k_m.ncols()
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        let all = std::iter::once(&self.a)
            .chain(self.noise.iter())
            .chain([&self.x0, &self.c, &self.k_m]);
        for m in all {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidModel("non-finite coefficient".into()));
            }
        }
        check_covariance(&self.k_m)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn q(&self) -> usize {
        self.noise.len()
    }
    pub fn m(&self) -> usize {
        self.x0.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// `L(X)` or, with `adjoint`, its Frobenius adjoint `L*(X)`.
    pub fn lyapunov_apply(&self, x: &DMatrix<f64>, adjoint: bool) -> Result<DMatrix<f64>> {
        lyapunov_apply(&self.a, &self.noise, &self.k_m, x, adjoint)
    }

    /// Kronecker matrix `K` with `vec(L(X)) = K vec(X)`.
    pub fn kron(&self) -> KronMatrix {
        kronecker_matrix(&self.a, &self.noise, &self.a, &self.noise, &self.k_m)
            .expect("coefficients validated")
    }

    /// Whether `A` is a multiple of the identity and every `N_i` is
    /// `xi_i e_i e_i^T` (the Black-Scholes structure).
    pub fn is_diagonal_bs(&self) -> bool {
        let n = self.n();
        if self.q() != n {
            return false;
        }
        let a0 = self.a[(0, 0)];
        for j in 0..n {
            for i in 0..n {
                let expected = if i == j { a0 } else { 0.0 };
                if self.a[(i, j)] != expected {
                    return false;
                }
            }
        }
        self.noise.iter().enumerate().all(|(k, nk)| {
            nk.iter()
                .enumerate()
                .all(|(idx, &v)| idx == k * n + k || v == 0.0)
        })
    }

    /// Volatilities `xi_i` of a diagonal Black-Scholes model.
    pub fn bs_volatilities(&self) -> Result<DVector<f64>> {
        if !self.is_diagonal_bs() {
            return Err(Error::NotDiagonalModel);
        }
        Ok(DVector::from_iterator(
            self.n(),
            self.noise.iter().enumerate().map(|(i, ni)| ni[(i, i)]),
        ))
    }

    /// Initial state `X0 z0`.
    pub fn initial_state(&self, z0: &InitialExpansion) -> Result<DVector<f64>> {
        if z0.z0.len() != self.m() {
            return Err(Error::DimensionMismatch(format!(
                "z0 has length {}, expected {}",
                z0.z0.len(),
                self.m()
            )));
        }
        Ok(&self.x0 * &z0.z0)
    }

    /// Pivot ratio of an LU factorisation of `K`; `None` when singular.
    pub fn kron_pivot_ratio(&self) -> Option<f64> {
        self.kron().lu().map(|lu| lu.pivot_ratio)
    }
}

fn check_covariance(k: &DMatrix<f64>) -> Result<()> {
    if linalg::asymmetry(k) > 1e-12 {
        return Err(Error::InvalidModel("K_M is not symmetric".into()));
    }
    let (min_eig, max_eig) = linalg::sym_eig_extremes(k);
    if min_eig < -COVARIANCE_PSD_TOL * max_eig.max(0.0) || max_eig < 0.0 {
        return Err(Error::NotPositiveSemidefinite { min_eig, max_eig });
    }
    Ok(())
}

/// `AX + XA^T + sum k_ij N_i X N_j^T`, or the adjoint
/// `A^T X + XA + sum k_ij N_i^T X N_j`.
pub fn lyapunov_apply(
    a: &DMatrix<f64>,
    noise: &[DMatrix<f64>],
    k: &DMatrix<f64>,
    x: &DMatrix<f64>,
    adjoint: bool,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if x.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "X is {}x{}, expected {n}x{n}",
            x.nrows(),
            x.ncols()
        )));
    }
    let q = noise.len();
    if adjoint {
        let mut out = a.transpose() * x + x * a;
        for j in 0..q {
            // sum_i k_ij N_i^T X, then times N_j
            let mut left = DMatrix::zeros(n, n);
            for i in 0..q {
                let kij = k[(i, j)];
                if kij != 0.0 {
                    left += noise[i].transpose() * x * kij;
                }
            }
            out += left * &noise[j];
        }
        Ok(out)
    } else {
        let mut out = a * x + x * a.transpose();
        for j in 0..q {
            let mut left = DMatrix::zeros(n, n);
            for i in 0..q {
                let kij = k[(i, j)];
                if kij != 0.0 {
                    left += &noise[i] * x * kij;
                }
            }
            out += left * noise[j].transpose();
        }
        Ok(out)
    }
}

/// Mixed Lyapunov map `AX + XB^T + sum k_ij N_i X M_j^T` for `X` of size
/// `dim(A) x dim(B)`.
pub fn mixed_lyapunov_apply(
    a: &DMatrix<f64>,
    n_a: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    m_b: &[DMatrix<f64>],
    k: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if x.shape() != (a.nrows(), b.nrows()) || n_a.len() != m_b.len() {
        return Err(Error::DimensionMismatch("mixed Lyapunov operands".into()));
    }
    let mut out = a * x + x * b.transpose();
    for j in 0..m_b.len() {
        let mut left = DMatrix::zeros(a.nrows(), b.nrows());
        for i in 0..n_a.len() {
            let kij = k[(i, j)];
            if kij != 0.0 {
                left += &n_a[i] * x * kij;
            }
        }
        out += left * m_b[j].transpose();
    }
    Ok(out)
}

/// A Kronecker matrix together with a structural flag recording whether it
/// is diagonal, which the solvers exploit.
#[derive(Debug, Clone)]
pub struct KronMatrix {
    pub matrix: DMatrix<f64>,
    pub diagonal: bool,
    /// Row dimension of the matrices this operator acts on (after devec).
    pub rows: usize,
    pub cols: usize,
}

impl KronMatrix {
    fn from_matrix(matrix: DMatrix<f64>, rows: usize, cols: usize) -> Self {
        let d = matrix.nrows();
        let diagonal = (0..d).all(|j| (0..d).all(|i| i == j || matrix[(i, j)] == 0.0));
        KronMatrix {
            matrix,
            diagonal,
            rows,
            cols,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The operator of the adjoint equation (`K^T`).
    pub fn transpose(&self) -> KronMatrix {
        KronMatrix {
            matrix: self.matrix.transpose(),
            diagonal: self.diagonal,
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.diagonal {
            v.component_mul(&self.matrix.diagonal())
        } else {
            &self.matrix * v
        }
    }

    pub fn lu(&self) -> Option<CheckedLu> {
        CheckedLu::new(&self.matrix)
    }

    /// Solve `K x = b`; `None` when `K` is singular to working precision.
    pub fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        if self.diagonal {
            let d = self.matrix.diagonal();
            let max = d.amax();
            if max == 0.0 || d.iter().any(|x| x.abs() < 1e-14 * max) {
                return None;
            }
            return Some(b.component_div(&d));
        }
        self.lu().map(|lu| lu.solve(b))
    }

    pub fn spectral_abscissa(&self) -> Result<f64> {
        if self.diagonal {
            return Ok(self
                .matrix
                .diagonal()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max));
        }
        linalg::spectral_abscissa(&self.matrix)
    }
}

/// `I (x) A + B (x) I + sum k_ij M_j (x) N_i`, acting on `vec(X)` for `X` of
/// size `dim(A) x dim(B)`.
pub fn kronecker_matrix(
    a: &DMatrix<f64>,
    n_a: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    m_b: &[DMatrix<f64>],
    k: &DMatrix<f64>,
) -> Result<KronMatrix> {
    let q = n_a.len();
    if m_b.len() != q || k.shape() != (q, q) {
        return Err(Error::DimensionMismatch(format!(
            "noise dimensions {} and {} with K_M {}x{}",
            q,
            m_b.len(),
            k.nrows(),
            k.ncols()
        )));
    }
    let na = a.nrows();
    let nb = b.nrows();
    let d = na * nb;

    // Noise part: entry ((r0,r1),(c0,c1)) equals sum_ij N_i[r0,c0] k_ij M_j[r1,c1],
    // i.e. the matrix U_A K U_B^T with U_A[(r0,c0), i] = N_i[r0,c0].
    let mut u_a = DMatrix::zeros(na * na, q);
    for (i, ni) in n_a.iter().enumerate() {
        u_a.set_column(i, &DVector::from_column_slice(ni.as_slice()));
    }
    let mut u_b = DMatrix::zeros(nb * nb, q);
    for (j, mj) in m_b.iter().enumerate() {
        u_b.set_column(j, &DVector::from_column_slice(mj.as_slice()));
    }
    let g = &u_a * k * u_b.transpose();

    let mut kron = DMatrix::zeros(d, d);
    for c1 in 0..nb {
        for c0 in 0..na {
            let col = c0 + na * c1;
            let g_col_base = c0 * na; // index (r0, c0) = r0 + na*c0
            for r1 in 0..nb {
                let g_col = r1 + nb * c1;
                for r0 in 0..na {
                    let v = g[(r0 + g_col_base, g_col)];
                    if v != 0.0 {
                        kron[(r0 + na * r1, col)] += v;
                    }
                }
            }
        }
    }
    // I (x) A
    for blk in 0..nb {
        for c0 in 0..na {
            for r0 in 0..na {
                let v = a[(r0, c0)];
                if v != 0.0 {
                    kron[(r0 + na * blk, c0 + na * blk)] += v;
                }
            }
        }
    }
    // B (x) I
    for c1 in 0..nb {
        for r1 in 0..nb {
            let v = b[(r1, c1)];
            if v != 0.0 {
                for r0 in 0..na {
                    kron[(r0 + na * r1, r0 + na * c1)] += v;
                }
            }
        }
    }
    Ok(KronMatrix::from_matrix(kron, na, nb))
}

/// Reduced system produced by a projection pair `(V, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSystem {
    pub a: DMatrix<f64>,
    pub noise: Vec<DMatrix<f64>>,
    pub x0: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// State-space transform applied after projection (identity here).
    pub s: DMatrix<f64>,
    pub cond_wv: f64,
}

impl ReducedSystem {
    pub fn nhat(&self) -> usize {
        self.a.nrows()
    }

    /// Kronecker matrix of the reduced system, `K-hat`.
    pub fn kron(&self, k_m: &DMatrix<f64>) -> Result<KronMatrix> {
        kronecker_matrix(&self.a, &self.noise, &self.a, &self.noise, k_m)
    }

    /// Mixed Kronecker matrix `K-tilde` coupling full and reduced systems.
    pub fn mixed_kron(&self, sys: &SystemCoefficients) -> Result<KronMatrix> {
        kronecker_matrix(&sys.a, &sys.noise, &self.a, &self.noise, &sys.k_m)
    }

    pub fn lyapunov_apply(&self, k_m: &DMatrix<f64>, x: &DMatrix<f64>, adjoint: bool) -> Result<DMatrix<f64>> {
        lyapunov_apply(&self.a, &self.noise, k_m, x, adjoint)
    }

    /// The reduced model viewed as a stand-alone system.
    pub fn as_system(&self, sys: &SystemCoefficients) -> Result<SystemCoefficients> {
        SystemCoefficients::new(
            self.a.clone(),
            self.noise.clone(),
            self.x0.clone(),
            self.c.clone(),
            sys.k_m.clone(),
            sys.horizon,
        )
    }
}

/// `A-hat = (W^T V)^{-1} W^T A V` and likewise for `N_i`, `X0`; `C-hat = C V`.
pub fn petrov_galerkin_reduce(
    sys: &SystemCoefficients,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<ReducedSystem> {
    petrov_galerkin_reduce_with(sys, v, w, DEFAULT_COND_THRESHOLD)
}

pub fn petrov_galerkin_reduce_with(
    sys: &SystemCoefficients,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    cond_threshold: f64,
) -> Result<ReducedSystem> {
    let n = sys.n();
    let nhat = v.ncols();
    if v.nrows() != n || w.shape() != (n, nhat) || nhat == 0 || nhat > n {
        return Err(Error::DimensionMismatch(format!(
            "V is {}x{}, W is {}x{}, n = {n}",
            v.nrows(),
            v.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    let wtv = w.transpose() * v;
    let cond = linalg::cond2(&wtv);
    if !(cond <= cond_threshold) {
        return Err(Error::NearSingularProjection {
            cond,
            threshold: cond_threshold,
        });
    }
    let lu = CheckedLu::new(&wtv).ok_or(Error::NearSingularProjection {
        cond,
        threshold: cond_threshold,
    })?;
    let wt = w.transpose();
    let project = |m: &DMatrix<f64>| lu.solve_matrix(&(&wt * m * v));
    let a = project(&sys.a);
    let noise = sys.noise.iter().map(project).collect();
    let x0 = lu.solve_matrix(&(&wt * &sys.x0));
    let c = &sys.c * v;
    Ok(ReducedSystem {
        a,
        noise,
        x0,
        c,
        v: v.clone(),
        w: w.clone(),
        s: DMatrix::identity(nhat, nhat),
        cond_wv: cond,
    })
}

/// Mean-square stability verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    pub stable: bool,
    pub spectral_abscissa: f64,
}

/// Spectral abscissa of `K`; the system is mean-square asymptotically
/// stable iff it is negative.
pub fn mean_square_stability(sys: &SystemCoefficients) -> Result<Stability> {
    let abscissa = sys.kron().spectral_abscissa()?;
    Ok(Stability {
        stable: abscissa < 0.0,
        spectral_abscissa: abscissa,
    })
}

pub fn reduced_mean_square_stability(red: &ReducedSystem, k_m: &DMatrix<f64>) -> Result<Stability> {
    let abscissa = red.kron(k_m)?.spectral_abscissa()?;
    Ok(Stability {
        stable: abscissa < 0.0,
        spectral_abscissa: abscissa,
    })
}

/// Black-Scholes model `dx_i = (r - delta) x_i dt + xi_i x_i dB_i` with
/// `B` correlated by `K_B`. The output map is left to the caller (a single
/// zero row here); see [`basket_output`] and [`identity_output`].
pub fn build_bs_model(
    r: f64,
    delta: f64,
    xi: &DVector<f64>,
    x0: &DVector<f64>,
    k_b: &DMatrix<f64>,
    horizon: f64,
) -> Result<(SystemCoefficients, InitialExpansion)> {
    let n = xi.len();
    if x0.len() != n || k_b.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "xi has length {n}, x0 {}, K_B {}x{}",
            x0.len(),
            k_b.nrows(),
            k_b.ncols()
        )));
    }
    if xi.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidModel("volatilities must be positive".into()));
    }
    if k_b.diagonal().iter().any(|&d| (d - 1.0).abs() > 1e-12) {
        return Err(Error::InvalidModel("K_B must have unit diagonal".into()));
    }
    let a = DMatrix::from_diagonal_element(n, n, r - delta);
    let noise = (0..n)
        .map(|i| {
            let mut ni = DMatrix::zeros(n, n);
            ni[(i, i)] = xi[i];
            ni
        })
        .collect();
    let x0m = DMatrix::from_column_slice(n, 1, x0.as_slice());
    let c = DMatrix::zeros(1, n);
    let sys = SystemCoefficients::new(a, noise, x0m, c, k_b.clone(), horizon)?;
    Ok((sys, InitialExpansion::unit()))
}

/// Unweighted basket `y = sum_i x_i`.
pub fn basket_output(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(1, n, 1.0)
}

/// Full-state output `y = x`.
pub fn identity_output(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(a: f64, xi: f64, k: f64) -> SystemCoefficients {
        SystemCoefficients::new(
            DMatrix::from_element(1, 1, a),
            vec![DMatrix::from_element(1, 1, xi)],
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, k),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn scalar_lyapunov_value() {
        let sys = scalar(1.0, 2.0, 1.0);
        let out = sys.lyapunov_apply(&DMatrix::from_element(1, 1, 3.0), false).unwrap();
        assert_eq!(out[(0, 0)], 18.0);
        assert_eq!(sys.kron().matrix[(0, 0)], 6.0);
    }

    #[test]
    fn zero_operator() {
        let sys = SystemCoefficients::new(
            DMatrix::zeros(2, 2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 2, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sys.lyapunov_apply(&x, false).unwrap(), DMatrix::zeros(2, 2));
        let st = mean_square_stability(&sys).unwrap();
        assert_eq!(st.spectral_abscissa, 0.0);
        assert!(!st.stable);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let sys = scalar(1.0, 2.0, 1.0);
        assert!(matches!(
            sys.lyapunov_apply(&DMatrix::zeros(2, 2), false),
            Err(Error::DimensionMismatch(_))
        ));
        let r = SystemCoefficients::new(
            DMatrix::zeros(2, 2),
            vec![DMatrix::zeros(2, 2)],
            DMatrix::zeros(2, 1),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(2, 2),
            1.0,
        );
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let r = SystemCoefficients::new(
            DMatrix::zeros(1, 1),
            vec![DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)],
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            1.0,
        );
        assert!(matches!(r, Err(Error::NotPositiveSemidefinite { .. })));
    }

    #[test]
    fn scalar_stability_formula() {
        let st = mean_square_stability(&scalar(-0.05, 0.2, 1.0)).unwrap();
        assert_relative_eq!(st.spectral_abscissa, -0.06, epsilon = 1e-15);
    }

    #[test]
    fn bs_model_structure() {
        let xi = DVector::from_vec(vec![0.2]);
        let x0 = DVector::from_vec(vec![1.0]);
        let (sys, z0) = build_bs_model(0.02, 0.07, &xi, &x0, &DMatrix::identity(1, 1), 1.0).unwrap();
        assert_relative_eq!(sys.a[(0, 0)], -0.05, epsilon = 1e-15);
        assert_eq!(sys.noise[0][(0, 0)], 0.2);
        assert_eq!(z0.z0.len(), 1);
        assert!(sys.is_diagonal_bs());
    }

    #[test]
    fn coordinate_selection_projection() {
        let sys = SystemCoefficients::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
            vec![DMatrix::identity(2, 2)],
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
            DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap();
        let e1 = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let red = petrov_galerkin_reduce(&sys, &e1, &e1).unwrap();
        assert_eq!(red.a[(0, 0)], 1.0);
        assert_eq!(red.c[(0, 0)], 3.0);
    }

    #[test]
    fn near_singular_projection_is_rejected() {
        let sys = scalar(1.0, 1.0, 1.0);
        let v = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 0.0);
        assert!(matches!(
            petrov_galerkin_reduce(&sys, &v, &w),
            Err(Error::NearSingularProjection { .. })
        ));
    }
}
