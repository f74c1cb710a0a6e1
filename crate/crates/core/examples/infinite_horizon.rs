//! Infinite-horizon reduction of a mean-square stable model. The fixed
//! point satisfies the limit optimality conditions and reproduces the mixed
//! limit Gramians exactly.

use nalgebra::DMatrix;
use stochmor::models::{random_system, RandomSpec};
use stochmor::mor::{self, FixedPointOptions};
use stochmor::{linsys, Error};

fn main() -> stochmor::Result<()> {
    let sys = random_system(&RandomSpec::new(10), 5)?;
    let st = linsys::mean_square_stability(&sys)?;
    println!("spectral abscissa of K: {:.4}", st.spectral_abscissa);

    let opts = FixedPointOptions {
        max_iter: 500,
        tol: 1e-10,
        ..Default::default()
    };
    for nhat in 1..=3 {
        let r = mor::stable_fixed_point(&sys, nhat, &opts)?;
        let d = &r.diagnostics;
        let res = d.limit_residuals.unwrap_or([f64::NAN; 4]);
        let (fp, fq) = d.limit_fit.unwrap_or((f64::NAN, f64::NAN));
        println!(
            "nhat {nhat}: {} iterations, residuals [{:.1e}, {:.1e}, {:.1e}, {:.1e}], fit {fp:.1e} / {fq:.1e}",
            d.iterations, res[0], res[1], res[2], res[3]
        );
    }

    let mut unstable = sys.clone();
    unstable.a += DMatrix::identity(10, 10) * 2.0;
    match mor::stable_fixed_point(&unstable, 2, &opts) {
        Err(Error::UnstableSystem { abscissa }) => println!("shifted model rejected, abscissa {abscissa:.3}"),
        other => println!("unexpected: {:?}", other.map(|r| r.diagnostics.iterations)),
    }
    Ok(())
}
