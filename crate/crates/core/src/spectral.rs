//! Spectral decomposition of the coupling matrix into eigen and auxiliary
//! subsystems.
//!
//! Each non-zero eigenpair `(λ, v)` of `M` defines an eigen subsystem whose
//! state is the projection `x v vᵀ`. Whatever remains after removing every
//! eigen projection is the auxiliary state. Both evolve independently under
//! their own `(A, B)` pair and the per-step cost splits accordingly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{scalar_polynomial, NetworkModel};

pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Agents whose auxiliary weight is at or below this are treated as having none.
pub const AUX_WEIGHT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("cost coefficient {name} = {value} must be strictly positive")]
    NonPositiveCostWeight { name: String, value: f64 },
    #[error("agent {agent} has no auxiliary component (weight {weight:e})")]
    NoAuxiliaryComponent { agent: usize, weight: f64 },
}

impl SpectralError {
    /// Name of the standing assumption the error violates.
    pub fn assumption(&self) -> &'static str {
        match self {
            SpectralError::NonPositiveCostWeight { .. } => "A3",
            SpectralError::NoAuxiliaryComponent { .. } => "A5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralOptions {
    /// Eigenvalues with `|λ| <= rank_tol * max(1, ‖M‖₂)` are treated as zero.
    pub rank_tol: f64,
    /// Accept a coupling matrix of full rank (`L = n`), in which case the
    /// auxiliary state is identically zero and the auxiliary subsystem is
    /// dropped. Partial violations are always rejected.
    pub allow_empty_auxiliary: bool,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            allow_empty_auxiliary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    n: usize,
    lambdas: Vec<f64>,
    /// `n x L`, orthonormal columns.
    vectors: DMatrix<f64>,
    q_ell: Vec<f64>,
    r_ell: Vec<f64>,
    q0: f64,
    r0: f64,
    breve_v2: Vec<f64>,
    i_star: Vec<usize>,
    sigma_w2: f64,
    has_auxiliary: bool,
}

/// Eigen and auxiliary components of a `d x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub eigen: Vec<DMatrix<f64>>,
    pub aux: DMatrix<f64>,
}

/// Per-agent pieces of the decomposed per-step cost, unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedCost {
    /// `c̆(x̆ⁱ, ŭⁱ)` for each agent.
    pub aux: Vec<f64>,
    /// `L x n`: `c^ℓ(x^{ℓ,i}, u^{ℓ,i})`.
    pub eigen: DMatrix<f64>,
}

impl DecomposedCost {
    /// `Σ_i [q₀ c̆ⁱ + Σ_ℓ q^ℓ c^{ℓ,i}]`, which equals the global per-step cost.
    pub fn weighted_total(&self, basis: &SpectralBasis) -> f64 {
        let aux: f64 = self.aux.iter().sum::<f64>() * basis.q0;
        let eigen: f64 = (0..basis.rank())
            .map(|l| basis.q_ell[l] * self.eigen.row(l).sum())
            .sum();
        aux + eigen
    }
}

/// Eigendecomposition of the coupling matrix plus the derived cost and noise
/// weights; validates positivity of the cost weights and of every agent's
/// auxiliary weight.
pub fn decompose_coupling(
    m: &NetworkModel,
    opts: &SpectralOptions,
) -> Result<SpectralBasis, SpectralError> {
    let n = m.n();
    let eig = SymmetricEigen::new(m.coupling().clone());
    let spectral_norm = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cutoff = opts.rank_tol * spectral_norm.max(1.0);

    let mut kept: Vec<usize> = (0..n)
        .filter(|&k| eig.eigenvalues[k].abs() > cutoff)
        .collect();
    // Descending eigenvalue, ties by original index.
    kept.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap()
            .then(i.cmp(&j))
    });

    let rank = kept.len();
    let lambdas: Vec<f64> = kept.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, rank);
    let mut i_star = Vec::with_capacity(rank);
    for (l, &k) in kept.iter().enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(k).into_owned();
        let (imax, _) = v.iter().enumerate().fold((0, -1.0), |(bi, bv), (i, x)| {
            if x.abs() > bv {
                (i, x.abs())
            } else {
                (bi, bv)
            }
        });
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        v /= v.norm();
        vectors.set_column(l, &v);
        i_star.push(imax);
    }

    let q0 = m.q_coeffs()[0];
    let r0 = m.r_coeffs()[0];
    let q_ell: Vec<f64> = lambdas
        .iter()
        .map(|&lam| scalar_polynomial(m.q_coeffs(), lam))
        .collect();
    let r_ell: Vec<f64> = lambdas
        .iter()
        .map(|&lam| scalar_polynomial(m.r_coeffs(), lam))
        .collect();

    let breve_v2: Vec<f64> = (0..n)
        .map(|i| {
            let s: f64 = (0..rank).map(|l| vectors[(i, l)].powi(2)).sum();
            (1.0 - s).clamp(0.0, 1.0)
        })
        .collect();

    let has_auxiliary = rank < n;
    let check = |name: String, value: f64| {
        if value > 0.0 {
            Ok(())
        } else {
            Err(SpectralError::NonPositiveCostWeight { name, value })
        }
    };
    if has_auxiliary {
        check("q_0".into(), q0)?;
        check("r_0".into(), r0)?;
    }
    for l in 0..rank {
        check(format!("q^{}", l + 1), q_ell[l])?;
        check(format!("r^{}", l + 1), r_ell[l])?;
    }

    let all_empty = breve_v2.iter().all(|&w| w <= AUX_WEIGHT_TOL);
    if !(all_empty && opts.allow_empty_auxiliary) {
        if let Some((agent, &weight)) = breve_v2
            .iter()
            .enumerate()
            .find(|(_, &w)| w <= AUX_WEIGHT_TOL)
        {
            return Err(SpectralError::NoAuxiliaryComponent { agent, weight });
        }
    }

    Ok(SpectralBasis {
        n,
        lambdas,
        vectors,
        q_ell,
        r_ell,
        q0,
        r0,
        breve_v2,
        i_star,
        sigma_w2: m.sigma_w2(),
        has_auxiliary: !all_empty,
    })
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.n
    }
    /// Number of non-zero eigenvalues `L`.
    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }
    pub fn q_ell(&self) -> &[f64] {
        &self.q_ell
    }
    pub fn r_ell(&self) -> &[f64] {
        &self.r_ell
    }
    pub fn q0(&self) -> f64 {
        self.q0
    }
    pub fn r0(&self) -> f64 {
        self.r0
    }
    /// `(v̆ⁱ)² = 1 − Σ_ℓ (v^{ℓ,i})²`.
    pub fn breve_v2(&self) -> &[f64] {
        &self.breve_v2
    }
    /// Representative agent of each eigen subsystem: largest `|v^{ℓ,i}|`.
    pub fn i_star(&self) -> &[usize] {
        &self.i_star
    }
    /// False only when `L = n` was explicitly allowed.
    pub fn has_auxiliary(&self) -> bool {
        self.has_auxiliary
    }
    /// `Σ_i q₀ (v̆ⁱ)² + Σ_ℓ q^ℓ = q₀(n − L) + Σ_ℓ q^ℓ`.
    pub fn alpha(&self) -> f64 {
        let aux = if self.has_auxiliary {
            self.q0 * (self.n - self.rank()) as f64
        } else {
            0.0
        };
        aux + self.q_ell.iter().sum::<f64>()
    }

    /// `r^ℓ/q^ℓ` for an eigen block or `r₀/q₀` for the auxiliary block.
    pub fn cost_ratio(&self, eigen: Option<usize>) -> f64 {
        match eigen {
            Some(l) => self.r_ell[l] / self.q_ell[l],
            None => self.r0 / self.q0,
        }
    }

    /// Noise variance of the auxiliary state at agent `i`.
    pub fn aux_noise_var(&self, i: usize) -> f64 {
        self.breve_v2[i] * self.sigma_w2
    }

    /// Noise variance of eigenstate `ℓ` at agent `i`.
    pub fn eigen_noise_var(&self, l: usize, i: usize) -> f64 {
        self.vectors[(i, l)].powi(2) * self.sigma_w2
    }

    /// `x v^ℓ` for each ℓ, as columns of a `d x L` matrix. Eigenstate `ℓ` is
    /// then `coeffs[:, ℓ] (v^ℓ)ᵀ`.
    pub fn eigen_coefficients(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * &self.vectors
    }

    /// Auxiliary component given the eigen coefficients of `x`.
    pub fn aux_from_coefficients(&self, x: &DMatrix<f64>, coeffs: &DMatrix<f64>) -> DMatrix<f64> {
        x - coeffs * self.vectors.transpose()
    }

    /// `x^ℓ = x v^ℓ (v^ℓ)ᵀ` and `x̆ = x − Σ_ℓ x^ℓ`. Applies equally to
    /// controls and noise.
    pub fn project(&self, x: &DMatrix<f64>) -> Projection {
        assert_eq!(x.ncols(), self.n, "column count must equal n");
        let coeffs = self.eigen_coefficients(x);
        let eigen: Vec<DMatrix<f64>> = (0..self.rank())
            .map(|l| coeffs.column(l) * self.vectors.column(l).transpose())
            .collect();
        let mut aux = x.clone();
        for xl in &eigen {
            aux -= xl;
        }
        Projection { eigen, aux }
    }

    /// Unweighted per-agent costs of the eigen and auxiliary subsystems.
    pub fn decomposed_cost(
        &self,
        m: &NetworkModel,
        x: &DMatrix<f64>,
        u: &DMatrix<f64>,
    ) -> DecomposedCost {
        let px = self.project(x);
        let pu = self.project(u);
        let quad = |w: &DMatrix<f64>, v: &DMatrix<f64>, i: usize| {
            let c = v.column(i);
            c.dot(&(w * c))
        };
        let aux_ratio = if self.q0 != 0.0 { self.r0 / self.q0 } else { 0.0 };
        let aux = (0..self.n)
            .map(|i| quad(m.q(), &px.aux, i) + aux_ratio * quad(m.r(), &pu.aux, i))
            .collect();
        let eigen = DMatrix::from_fn(self.rank(), self.n, |l, i| {
            quad(m.q(), &px.eigen[l], i) + self.cost_ratio(Some(l)) * quad(m.r(), &pu.eigen[l], i)
        });
        DecomposedCost { aux, eigen }
    }
}
