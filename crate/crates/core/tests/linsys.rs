use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stochmor::linalg::{self, devectorize, frobenius_inner, vectorize};
use stochmor::linsys::{self, kronecker_matrix, lyapunov_apply, mixed_lyapunov_apply, SystemCoefficients};

fn gauss(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn correlation(q: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let f = gauss(q, q, rng);
    let k = &f * f.transpose() + DMatrix::identity(q, q);
    let d = DMatrix::from_diagonal(&k.diagonal().map(|x| 1.0 / x.sqrt()));
    linalg::symmetrize(&(&d * k * &d))
}

/// `I (x) A + B (x) I + sum k_ij M_j (x) N_i`, assembled from explicit
/// Kronecker products.
fn brute_kron(a: &DMatrix<f64>, n: &[DMatrix<f64>], b: &DMatrix<f64>, m: &[DMatrix<f64>], k: &DMatrix<f64>) -> DMatrix<f64> {
    let ia = DMatrix::identity(a.nrows(), a.nrows());
    let ib = DMatrix::identity(b.nrows(), b.nrows());
    let mut out = ib.kronecker(a) + b.kronecker(&ia);
    for i in 0..n.len() {
        for j in 0..m.len() {
            out += m[j].kronecker(&n[i]) * k[(i, j)];
        }
    }
    out
}

#[test]
fn scalar_operator_value() {
    let a = DMatrix::from_element(1, 1, 1.0);
    let n = vec![DMatrix::from_element(1, 1, 2.0)];
    let k = DMatrix::from_element(1, 1, 1.0);
    let x = DMatrix::from_element(1, 1, 3.0);
    let y = lyapunov_apply(&a, &n, &k, &x, false).unwrap();
    assert_eq!(y[(0, 0)], 18.0);
}

#[test]
fn zero_coefficients_give_zero_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = DMatrix::zeros(3, 3);
    let x = gauss(3, 3, &mut rng);
    let y = lyapunov_apply(&z, &[z.clone(), z.clone()], &DMatrix::identity(2, 2), &x, false).unwrap();
    assert_eq!(y, DMatrix::zeros(3, 3));
}

#[test]
fn scalar_kronecker_matrix() {
    let a = DMatrix::from_element(1, 1, 1.0);
    let n = vec![DMatrix::from_element(1, 1, 2.0)];
    let k = kronecker_matrix(&a, &n, &a, &n, &DMatrix::from_element(1, 1, 1.0)).unwrap();
    assert_eq!(k.matrix[(0, 0)], 6.0);
}

#[test]
fn mixed_kronecker_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, nhat, q) = (2, 1, 2);
    let a = gauss(n, n, &mut rng);
    let ah = gauss(nhat, nhat, &mut rng);
    let nn: Vec<_> = (0..q).map(|_| gauss(n, n, &mut rng)).collect();
    let nh: Vec<_> = (0..q).map(|_| gauss(nhat, nhat, &mut rng)).collect();
    let k = correlation(q, &mut rng);
    let km = kronecker_matrix(&a, &nn, &ah, &nh, &k).unwrap();
    assert_eq!(km.matrix.shape(), (2, 2));
    let x = gauss(n, nhat, &mut rng);
    let mut direct = &a * &x + &x * ah.transpose();
    for i in 0..q {
        for j in 0..q {
            direct += &nn[i] * &x * nh[j].transpose() * k[(i, j)];
        }
    }
    let via = devectorize(&km.apply(&vectorize(&x)), n, nhat);
    assert_relative_eq!(via, direct, epsilon = 1e-13);
    let op = mixed_lyapunov_apply(&a, &nn, &ah, &nh, &k, &x).unwrap();
    assert_relative_eq!(op, direct, epsilon = 1e-13);
}

#[test]
fn noiseless_spectrum_is_pairwise_sums() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -3.0]);
    let z = DMatrix::zeros(2, 2);
    let k = kronecker_matrix(&a, &[z.clone()], &a, &[z], &DMatrix::identity(1, 1)).unwrap();
    let mut eig: Vec<f64> = k.matrix.complex_eigenvalues().iter().map(|c| c.re).collect();
    eig.sort_by(f64::total_cmp);
    let want = [-6.0, -4.0, -4.0, -2.0];
    for (e, w) in eig.iter().zip(want) {
        assert!((e - w).abs() < 1e-12, "{eig:?}");
    }
}

#[test]
fn identity_and_galerkin_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4;
    let sys = SystemCoefficients::new(
        gauss(n, n, &mut rng),
        vec![gauss(n, n, &mut rng)],
        gauss(n, 1, &mut rng),
        gauss(2, n, &mut rng),
        DMatrix::identity(1, 1),
        1.0,
    )
    .unwrap();
    let eye = DMatrix::identity(n, n);
    let full = linsys::petrov_galerkin_reduce(&sys, &eye, &eye).unwrap();
    assert_relative_eq!(full.a, sys.a, epsilon = 1e-14);
    assert_relative_eq!(full.noise[0], sys.noise[0], epsilon = 1e-14);
    assert_relative_eq!(full.x0, sys.x0, epsilon = 1e-14);
    assert_relative_eq!(full.c, sys.c, epsilon = 1e-14);

    let v = linalg::orth(&gauss(n, 2, &mut rng), 1e-12).unwrap().basis;
    let g = linsys::petrov_galerkin_reduce(&sys, &v, &v).unwrap();
    assert_relative_eq!(g.a, v.transpose() * &sys.a * &v, epsilon = 1e-13);
    assert_relative_eq!(g.c, &sys.c * &v, epsilon = 1e-13);
}

#[test]
fn stability_examples() {
    let xi = DVector::from_element(3, 0.3);
    let x0 = DVector::from_element(3, 1.0);
    let (sys, _) = linsys::build_bs_model(0.02, 0.07, &xi, &x0, &DMatrix::identity(3, 3), 1.0).unwrap();
    let st = linsys::mean_square_stability(&sys).unwrap();
    assert!(st.stable);
    assert!((st.spectral_abscissa + 0.01).abs() < 1e-12);

    let z = DMatrix::zeros(1, 1);
    let one = DMatrix::from_element(1, 1, 1.0);
    let dead = SystemCoefficients::new(z.clone(), vec![z], one.clone(), one.clone(), one.clone(), 1.0).unwrap();
    let st = linsys::mean_square_stability(&dead).unwrap();
    assert!(!st.stable);
    assert_eq!(st.spectral_abscissa, 0.0);

    let scalar = SystemCoefficients::new(
        DMatrix::from_element(1, 1, -0.05),
        vec![DMatrix::from_element(1, 1, 0.2)],
        one.clone(),
        one.clone(),
        one,
        1.0,
    )
    .unwrap();
    assert!((linsys::mean_square_stability(&scalar).unwrap().spectral_abscissa + 0.06).abs() < 1e-15);
}

#[test]
fn basket_model_structure() {
    let spec = stochmor::models::BsSpec::basket();
    let inst = stochmor::models::generate_bs(&spec, 7).unwrap();
    let sys = &inst.sys;
    assert_eq!(sys.a, DMatrix::from_diagonal_element(50, 50, -0.05));
    assert_eq!(sys.noise.len(), 50);
    for (i, ni) in sys.noise.iter().enumerate() {
        assert_eq!(ni.rank(0.0), 1);
        assert!(ni[(i, i)] >= 0.1 && ni[(i, i)] <= 0.3);
    }
    assert_eq!(sys.c, DMatrix::from_element(1, 50, 1.0));

    let (one, _) = linsys::build_bs_model(
        0.02,
        0.07,
        &DVector::from_element(1, 0.2),
        &DVector::from_element(1, 1.0),
        &DMatrix::identity(1, 1),
        1.0,
    )
    .unwrap();
    assert!((one.a[(0, 0)] + 0.05).abs() < 1e-16);
    assert_eq!(one.noise[0][(0, 0)], 0.2);
}

#[test]
fn orth_of_orthonormal_input_keeps_the_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = gauss(10, 3, &mut rng).qr().q();
    let b = linalg::orth(&q, 1e-12).unwrap().basis;
    let diff = &q * q.transpose() - &b * b.transpose();
    assert!(linalg::spectral_norm(&diff) <= 1e-12);

    let r = linalg::orth(&gauss(10, 3, &mut rng), 1e-12).unwrap().basis;
    assert_relative_eq!(r.transpose() * &r, DMatrix::identity(3, 3), epsilon = 1e-13);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn operator_matches_kronecker_and_adjoint(seed in any::<u64>(), n in 1usize..=6, q in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gauss(n, n, &mut rng);
        let noise: Vec<_> = (0..q).map(|_| gauss(n, n, &mut rng)).collect();
        let k = correlation(q, &mut rng);
        let x = gauss(n, n, &mut rng);
        let y = gauss(n, n, &mut rng);

        let brute = brute_kron(&a, &noise, &a, &noise, &k);
        let lx = lyapunov_apply(&a, &noise, &k, &x, false).unwrap();
        let kx = devectorize(&(&brute * vectorize(&x)), n, n);
        let scale = 1.0 + kx.norm();
        prop_assert!((&lx - &kx).norm() <= 1e-12 * scale);

        let ly = lyapunov_apply(&a, &noise, &k, &y, true).unwrap();
        let kty = devectorize(&(brute.transpose() * vectorize(&y)), n, n);
        prop_assert!((&ly - &kty).norm() <= 1e-12 * (1.0 + kty.norm()));

        let lhs = frobenius_inner(&ly, &x);
        let rhs = frobenius_inner(&y, &lx);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + ly.norm() * x.norm()));

        let km = kronecker_matrix(&a, &noise, &a, &noise, &k).unwrap();
        prop_assert!((&km.matrix - &brute).norm() <= 1e-12 * (1.0 + brute.norm()));
    }
}
