//! Model builders: Black-Scholes baskets with generated correlation
//! profiles, and seeded random test systems.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::linsys::{self, InitialExpansion, SystemCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationProfile {
    /// Two asset groups: strong correlation inside a group, weak across.
    Mixed,
    /// Smooth kernel `exp(-(s_i - s_j)^2 / (2 l^2))` over random positions
    /// `s_i` in `[0, 1]`; entries lie in `[0.6, 1]` and the spectrum decays fast.
    High,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    Uniform::new(lo, hi).expect("valid range").sample(rng)
}

/// Smallest entry of the [`CorrelationProfile::High`] kernel.
pub const HIGH_PROFILE_MIN: f64 = 0.6;

/// Correlation matrix of the named profile, projected onto the nearest
/// correlation matrix; PSD with unit diagonal.
pub fn correlation_profile(profile: CorrelationProfile, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let k = match profile {
        CorrelationProfile::Mixed => factor_profile(n, rng),
        CorrelationProfile::High => kernel_profile(n, rng),
    };
    linalg::nearest_correlation(&k, 1e-14, 200)
}

fn kernel_profile(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let s: Vec<f64> = (0..n).map(|_| uniform(rng, 0.0, 1.0)).collect();
    // exp(-1 / (2 l^2)) = HIGH_PROFILE_MIN at unit distance
    let inv_two_l2 = -HIGH_PROFILE_MIN.ln();
    DMatrix::from_fn(n, n, |i, j| (-(s[i] - s[j]).powi(2) * inv_two_l2).exp())
}

/// Common factor plus two group factors.
fn factor_profile(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (groups, common, total) = (2usize, (0.35, 0.6), (0.75, 0.98));
    let mut load_common = DVector::zeros(n);
    let mut load_group = DVector::zeros(n);
    let mut group = vec![0usize; n];
    for i in 0..n {
        group[i] = rng.random_range(0..groups);
        let c = uniform(rng, common.0, common.1);
        let v = uniform(rng, total.0, total.1).max(c * c);
        load_common[i] = c;
        load_group[i] = (v - c * c).sqrt();
    }
    let mut k = DMatrix::identity(n, n);
    for j in 0..n {
        for i in 0..n {
            if i != j {
                let mut v = load_common[i] * load_common[j];
                if group[i] == group[j] {
                    v += load_group[i] * load_group[j];
                }
                k[(i, j)] = v;
            }
        }
    }
    k
}

/// Output map of a Black-Scholes model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// `y = sum_i x_i`
    Basket,
    /// `y = x`
    Identity,
}

/// Parameters of a generated Black-Scholes instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsSpec {
    pub n: usize,
    pub r: f64,
    pub delta: f64,
    pub xi_range: (f64, f64),
    pub x0_range: (f64, f64),
    pub profile: CorrelationProfile,
    pub horizon: f64,
    pub output: OutputKind,
}

impl BsSpec {
    /// The basket configuration: 50 assets, mixed correlations.
    pub fn basket() -> Self {
        BsSpec {
            n: 50,
            r: 0.02,
            delta: 0.07,
            xi_range: (0.1, 0.3),
            x0_range: (0.1, 1.4),
            profile: CorrelationProfile::Mixed,
            horizon: 1.0,
            output: OutputKind::Basket,
        }
    }

    /// The max-call configuration: high correlations, `x0` in `[5, 6]`, `C = I`.
    pub fn max_call() -> Self {
        BsSpec {
            x0_range: (5.0, 6.0),
            profile: CorrelationProfile::High,
            output: OutputKind::Identity,
            ..BsSpec::basket()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !ok_range(self.xi_range) || self.xi_range.0 <= 0.0 {
            return Err(Error::Config("xi range must be positive and ordered".into()));
        }
        if !ok_range(self.x0_range) {
            return Err(Error::Config("x0 range must be ordered".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// A generated instance together with its correlation matrix.
#[derive(Debug, Clone)]
pub struct BsInstance {
    pub sys: SystemCoefficients,
    pub z0: InitialExpansion,
    pub xi: DVector<f64>,
    pub x0: DVector<f64>,
    pub k_b: DMatrix<f64>,
}

/// Draw volatilities, initial prices and correlations from a seed.
pub fn generate_bs(spec: &BsSpec, seed: u64) -> Result<BsInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n;
    let xi = DVector::from_fn(n, |_, _| uniform(&mut rng, spec.xi_range.0, spec.xi_range.1));
    let x0 = DVector::from_fn(n, |_, _| uniform(&mut rng, spec.x0_range.0, spec.x0_range.1));
    let k_b = if n == 1 {
        DMatrix::identity(1, 1)
    } else {
        correlation_profile(spec.profile, n, &mut rng)
    };
    let (mut sys, z0) = linsys::build_bs_model(spec.r, spec.delta, &xi, &x0, &k_b, spec.horizon)?;
    sys.c = match spec.output {
        OutputKind::Basket => linsys::basket_output(n),
        OutputKind::Identity => linsys::identity_output(n),
    };
    Ok(BsInstance { sys, z0, xi, x0, k_b })
}

/// Shape of a random test system.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSpec {
    pub n: usize,
    pub q: usize,
    pub m: usize,
    pub p: usize,
    /// Decay rate subtracted from the drift's diagonal.
    pub decay: f64,
    /// Scale of the random part of the drift.
    pub drift_scale: f64,
    pub noise_scale: f64,
    pub horizon: f64,
    /// Correlate the noise through a random factor model.
    pub correlated: bool,
}

impl RandomSpec {
    pub fn new(n: usize) -> Self {
        RandomSpec {
            n,
            q: 2,
            m: 1,
            p: 1,
            decay: 1.0,
            drift_scale: 0.5,
            noise_scale: 0.3,
            horizon: 1.0,
            correlated: true,
        }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random system `A = drift_scale * G / sqrt(n) - decay * I`,
/// `N_i = noise_scale * G_i / sqrt(n)`, Gaussian `X0`, `C`.
pub fn random_system(spec: &RandomSpec, seed: u64) -> Result<SystemCoefficients> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n;
    let scale = 1.0 / (n as f64).sqrt();
    let a = gaussian(n, n, &mut rng) * (spec.drift_scale * scale) - DMatrix::identity(n, n) * spec.decay;
    let noise = (0..spec.q)
        .map(|_| gaussian(n, n, &mut rng) * (spec.noise_scale * scale))
        .collect();
    let x0 = gaussian(n, spec.m, &mut rng);
    let c = gaussian(spec.p, n, &mut rng);
    let k_m = if spec.correlated && spec.q > 1 {
        let f = gaussian(spec.q, 1, &mut rng) * 0.5;
        let mut k = &f * f.transpose();
        for i in 0..spec.q {
            k[(i, i)] += 1.0;
        }
        let d = k.diagonal().map(|x| 1.0 / x.sqrt());
        let dm = DMatrix::from_diagonal(&d);
        linalg::symmetrize(&(&dm * k * &dm))
    } else {
        DMatrix::identity(spec.q, spec.q)
    };
    SystemCoefficients::new(a, noise, x0, c, k_m, spec.horizon)
}
