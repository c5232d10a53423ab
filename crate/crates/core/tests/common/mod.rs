#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nettsde::netmodel::{ModelParts, NetworkModel};
use nettsde::spectral::{decompose_coupling, SpectralBasis, SpectralOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn spd(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let g = gaussian(rng, d, d, 1.0);
    &g * g.transpose() + DMatrix::identity(d, d)
}

/// Random model with a rank-`rank` coupling matrix built from an explicit
/// orthonormal basis, cost coefficients chosen so that every weight stays
/// positive. Returns `None` if some agent happens to have no auxiliary part.
pub fn random_parts(seed: u64, n: usize, dx: usize, du: usize, rank: usize, sigma_w2: f64) -> ModelParts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = gaussian(&mut rng, n, rank.max(1), 1.0).qr().q();
    let lambdas = DVector::from_fn(rank, |_, _| {
        let mag = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let coupling = if rank == 0 {
        DMatrix::zeros(n, n)
    } else {
        let vr = v.columns(0, rank);
        vr * DMatrix::from_diagonal(&lambdas) * vr.transpose()
    };
    ModelParts {
        coupling,
        a: gaussian(&mut rng, dx, dx, 0.3),
        b: gaussian(&mut rng, dx, du, 0.3),
        d: gaussian(&mut rng, dx, dx, 0.2),
        e: gaussian(&mut rng, dx, du, 0.2),
        q: spd(&mut rng, dx),
        r: spd(&mut rng, du),
        q_coeffs: vec![1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.1..0.1)],
        r_coeffs: vec![1.0, rng.random_range(-0.3..0.3)],
        sigma_w2,
        init_cov: None,
    }
}

pub fn random_instance(
    seed: u64,
    n: usize,
    dx: usize,
    du: usize,
    rank: usize,
) -> Option<(NetworkModel, SpectralBasis)> {
    let model = NetworkModel::new(random_parts(seed, n, dx, du, rank, 1.0)).ok()?;
    let basis = decompose_coupling(&model, &SpectralOptions::default()).ok()?;
    Some((model, basis))
}

/// Batch Bayesian linear regression with a shared column covariance:
/// `Σ = (Σ₀⁻¹ + Σ z zᵀ/σ²)⁻¹`, `μ = Σ (Σ₀⁻¹ μ₀ + Σ z x_nextᵀ/σ²)`.
pub fn batch_posterior(
    mu0: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    obs: &[(DVector<f64>, DVector<f64>, f64)],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let prec0 = sigma0.clone().try_inverse().expect("prior covariance invertible");
    let mut prec = prec0.clone();
    let mut info = &prec0 * mu0;
    for (z, x, s2) in obs {
        prec += z * z.transpose() / *s2;
        info += z * x.transpose() / *s2;
    }
    let cov = prec.try_inverse().expect("posterior precision invertible");
    let mean = &cov * info;
    (mean, cov)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}
