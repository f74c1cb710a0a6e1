//! Scalar model `dx = a x dt + xi x dB`: covariance, Gramian and limit
//! Gramian against their closed forms.

use nalgebra::DMatrix;
use stochmor::covariance::{self, CovKind};
use stochmor::{linsys, mor, SystemCoefficients};

fn main() -> stochmor::Result<()> {
    let (a, xi, x0, t) = (-0.05, 0.2, 1.5, 2.0);
    let one = DMatrix::from_element(1, 1, 1.0);
    let sys = SystemCoefficients::new(
        DMatrix::from_element(1, 1, a),
        vec![DMatrix::from_element(1, 1, xi)],
        DMatrix::from_element(1, 1, x0),
        one.clone(),
        one.clone(),
        t,
    )?;
    let c = 2.0 * a + xi * xi;

    let traj = covariance::solve_covariance(&sys.kron(), &(&sys.x0 * sys.x0.transpose()), t, 20, CovKind::Primal)?;
    println!("F(T)      {:.15e}  closed form {:.15e}", traj.terminal()[(0, 0)], x0 * x0 * (c * t).exp());

    let (p, _) = covariance::full_gramians(&sys, 100)?;
    println!("P(T)      {:.15e}  closed form {:.15e}", p[(0, 0)], x0 * x0 * ((c * t).exp() - 1.0) / c);

    let red = linsys::petrov_galerkin_reduce(&sys, &one, &one)?;
    let lim = mor::limit_gramians(&sys, &red, true)?;
    println!("P(inf)    {:.15e}  closed form {:.15e}", lim.p.unwrap()[(0, 0)], -x0 * x0 / c);
    Ok(())
}
