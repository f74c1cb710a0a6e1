use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative PSD tolerance for Gramian input.
const GRAMIAN_PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct HsvReport {
    /// Hankel singular values, nonincreasing.
    pub hsv: DVector<f64>,
    pub eig_p: DVector<f64>,
    pub eig_q: DVector<f64>,
    /// Balancing transformation `T` and its inverse, present when `P` and
    /// `Q` are positive definite: `T P T^T = T^{-T} Q T^{-1} = diag(hsv)`.
    pub balancing: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

fn check_psd(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (vals, _) = linalg::sym_eigen_desc(m);
    let max = vals[0];
    let min = vals[vals.len() - 1];
    if min < -GRAMIAN_PSD_TOL * max.max(0.0) || max < 0.0 {
        return Err(Error::NotPositiveSemidefinite {
            min_eig: min,
            max_eig: max,
        });
    }
    Ok(vals)
}

/// Square roots of the eigenvalues of `P Q`, computed as the singular
/// values of `L^T R` with `P = L L^T`, `Q = R R^T`.
pub fn hankel_singular_values(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<HsvReport> {
    let n = p.nrows();
    if p.shape() != (n, n) || q.shape() != (n, n) || n == 0 {
        return Err(Error::DimensionMismatch("HSV input must be square and of equal size".into()));
    }
    let eig_p = check_psd(p)?;
    let eig_q = check_psd(q)?;
    let chol_p = linalg::symmetrize(p).cholesky();
    let chol_q = linalg::symmetrize(q).cholesky();
    let l = chol_p.as_ref().map(|c| c.l()).unwrap_or_else(|| linalg::psd_factor(p));
    let r = chol_q.as_ref().map(|c| c.l()).unwrap_or_else(|| linalg::psd_factor(q));
    let prod = l.transpose() * &r;
    let svd = prod.clone().svd(true, true);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let hsv = DVector::from_iterator(n, order.iter().map(|&i| svd.singular_values[i]));

    let balancing = if chol_p.is_some() && chol_q.is_some() && hsv[n - 1] > 1e-14 * hsv[0] {
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        let mut u_s = DMatrix::zeros(n, n);
        let mut z_s = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            let s = svd.singular_values[src].sqrt();
            u_s.set_column(dst, &(u.column(src) / s));
            z_s.set_column(dst, &(vt.row(src).transpose() / s));
        }
        // T = S^{-1/2} Z^T R^T, T^{-1} = L U S^{-1/2}
        let t = z_s.transpose() * r.transpose();
        let t_inv = &l * u_s;
        Some((t, t_inv))
    } else {
        None
    };
    Ok(HsvReport {
        hsv,
        eig_p,
        eig_q,
        balancing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_hsv() {
        let p = DMatrix::from_element(1, 1, 0.9705915);
        let r = hankel_singular_values(&p, &p).unwrap();
        assert_relative_eq!(r.hsv[0], 0.9705915, epsilon = 1e-15);
    }

    #[test]
    fn identity_gramians_give_unit_hsv() {
        let eye = DMatrix::identity(4, 4);
        let r = hankel_singular_values(&eye, &eye).unwrap();
        for s in r.hsv.iter() {
            assert_relative_eq!(*s, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn balancing_diagonalises_both_gramians() {
        let p = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let q = DMatrix::from_row_slice(3, 3, &[1.0, -0.3, 0.1, -0.3, 2.0, 0.4, 0.1, 0.4, 1.5]);
        let r = hankel_singular_values(&p, &q).unwrap();
        let (t, t_inv) = r.balancing.unwrap();
        let sigma = DMatrix::from_diagonal(&r.hsv);
        assert_relative_eq!(&t * &p * t.transpose(), sigma, epsilon = 1e-10);
        assert_relative_eq!(t_inv.transpose() * &q * &t_inv, sigma, epsilon = 1e-10);
        assert_relative_eq!(&t * &t_inv, DMatrix::identity(3, 3), epsilon = 1e-12);
    }

    #[test]
    fn indefinite_input_is_rejected() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            hankel_singular_values(&p, &DMatrix::identity(2, 2)),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }
}
