//! Discrete-time Riccati solver, gain synthesis and the known-model optimal
//! policy of the decomposed system.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::NetworkModel;
use crate::spectral::SpectralBasis;

/// Which parameter block a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockTag {
    Aux,
    Eigen(usize),
}

impl BlockTag {
    pub fn eigen_index(self) -> Option<usize> {
        match self {
            BlockTag::Aux => None,
            BlockTag::Eigen(l) => Some(l),
        }
    }
}

impl std::fmt::Display for BlockTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockTag::Aux => write!(f, "aux"),
            BlockTag::Eigen(l) => write!(f, "eigen{}", l + 1),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("Riccati iteration did not converge after {iterations} iterations (last change {change:e})")]
    NotConverged { iterations: usize, change: f64 },
    #[error("Riccati iteration diverged after {iterations} iterations; pair is likely not stabilizable")]
    Diverged { iterations: usize },
    #[error("R + BᵀSB is not positive definite")]
    Singular,
    #[error("block {tag}: {source}")]
    Block {
        tag: BlockTag,
        #[source]
        source: Box<RiccatiError>,
    },
    #[error("block {tag}: closed loop not stable (spectral radius {radius})")]
    Unstable { tag: BlockTag, radius: f64 },
}

/// One parameter block `θᵀ = [A, B]` of the decomposed dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBlock {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub tag: BlockTag,
}

impl ThetaBlock {
    pub fn zero(dx: usize, du: usize, tag: BlockTag) -> Self {
        Self {
            a: DMatrix::zeros(dx, dx),
            b: DMatrix::zeros(dx, du),
            tag,
        }
    }

    pub fn dx(&self) -> usize {
        self.a.nrows()
    }

    pub fn du(&self) -> usize {
        self.b.ncols()
    }

    /// Builds the block from the stacked `(dx + du) x dx` parameter `θ`,
    /// whose transpose is `[A, B]`.
    pub fn from_stacked(theta: &DMatrix<f64>, dx: usize, tag: BlockTag) -> Self {
        let t = theta.transpose();
        let du = t.ncols() - dx;
        Self {
            a: t.columns(0, dx).into_owned(),
            b: t.columns(dx, du).into_owned(),
            tag,
        }
    }

    /// The `(dx + du) x dx` matrix `θ` with `θᵀ = [A, B]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (dx, du) = (self.dx(), self.du());
        let mut t = DMatrix::zeros(dx, dx + du);
        t.columns_mut(0, dx).copy_from(&self.a);
        t.columns_mut(dx, du).copy_from(&self.b);
        t.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

/// True parameter blocks: `θ̆ = (A, B)` and `θ^ℓ = (A + λ^ℓ D, B + λ^ℓ E)`.
pub fn true_blocks(m: &NetworkModel, basis: &SpectralBasis) -> (ThetaBlock, Vec<ThetaBlock>) {
    let aux = ThetaBlock {
        a: m.a().clone(),
        b: m.b().clone(),
        tag: BlockTag::Aux,
    };
    let eigen = basis
        .lambdas()
        .iter()
        .enumerate()
        .map(|(l, &lam)| ThetaBlock {
            a: m.a() + m.d() * lam,
            b: m.b() + m.e() * lam,
            tag: BlockTag::Eigen(l),
        })
        .collect();
    (aux, eigen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DareOptions {
    /// Stop when `‖S_{k+1} − S_k‖_F <= tol · (1 + ‖S_k‖_F)`.
    pub tol: f64,
    pub max_iter: usize,
    /// `‖S‖_F` above this is taken as divergence.
    pub blowup: f64,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 1_000_000,
            blowup: 1e14,
        }
    }
}

/// `S = AᵀSA − AᵀSB(R + BᵀSB)⁻¹BᵀSA + Q` evaluated at the given `S`.
pub fn dare_rhs(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let sa = s * a;
    let sb = s * b;
    let btsb = b.transpose() * &sb + r;
    let chol = btsb.cholesky().ok_or(RiccatiError::Singular)?;
    let k = chol.solve(&(b.transpose() * &sa));
    Ok(a.transpose() * &sa - (a.transpose() * &sb) * k + q)
}

/// Riccati value iteration from `S₀ = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: &DareOptions,
) -> Result<DMatrix<f64>, RiccatiError> {
    let mut s = q.clone();
    let mut change = f64::INFINITY;
    for it in 0..opts.max_iter {
        let mut next = dare_rhs(a, b, q, r, &s)?;
        next = (&next + next.transpose()) * 0.5;
        let norm = next.norm();
        if !norm.is_finite() || norm > opts.blowup {
            return Err(RiccatiError::Diverged { iterations: it + 1 });
        }
        change = (&next - &s).norm();
        let done = change <= opts.tol * (1.0 + s.norm());
        s = next;
        if done {
            return Ok(s);
        }
    }
    Err(RiccatiError::NotConverged {
        iterations: opts.max_iter,
        change,
    })
}

/// `G = −(BᵀSB + R)⁻¹ BᵀSA`.
pub fn gain_from_solution(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let btsb = b.transpose() * s * b + r;
    let chol = btsb.cholesky().ok_or(RiccatiError::Singular)?;
    Ok(-chol.solve(&(b.transpose() * s * a)))
}

/// Riccati solution and gain of one block with effective control weight
/// `cost_ratio · R`.
pub fn block_solution(
    theta: &ThetaBlock,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    cost_ratio: f64,
    opts: &DareOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>), RiccatiError> {
    let wrap = |e: RiccatiError| RiccatiError::Block {
        tag: theta.tag,
        source: Box::new(e),
    };
    let r_eff = r * cost_ratio;
    let s = solve_dare(&theta.a, &theta.b, q, &r_eff, opts).map_err(wrap)?;
    let g = gain_from_solution(&theta.a, &theta.b, &r_eff, &s).map_err(wrap)?;
    Ok((s, g))
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert!(m.is_square(), "spectral radius of a non-square matrix");
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    m.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    pub s_breve: DMatrix<f64>,
    pub g_breve: DMatrix<f64>,
    pub s_ell: Vec<DMatrix<f64>>,
    pub g_ell: Vec<DMatrix<f64>>,
}

/// Solves every block's Riccati equation and checks that each block's own
/// closed loop is stable.
pub fn gains_for(
    theta_breve: &ThetaBlock,
    thetas_eigen: &[ThetaBlock],
    basis: &SpectralBasis,
    m: &NetworkModel,
    opts: &DareOptions,
) -> Result<GainSet, RiccatiError> {
    assert_eq!(thetas_eigen.len(), basis.rank());
    let solve = |theta: &ThetaBlock, ratio: f64| {
        let (s, g) = block_solution(theta, m.q(), m.r(), ratio, opts)?;
        let radius = spectral_radius(&(&theta.a + &theta.b * &g));
        if radius >= 1.0 {
            return Err(RiccatiError::Unstable {
                tag: theta.tag,
                radius,
            });
        }
        Ok((s, g))
    };
    let (s_breve, g_breve) = if basis.has_auxiliary() {
        solve(theta_breve, basis.cost_ratio(None))?
    } else {
        (DMatrix::zeros(m.dx(), m.dx()), DMatrix::zeros(m.du(), m.dx()))
    };
    let mut s_ell = Vec::with_capacity(basis.rank());
    let mut g_ell = Vec::with_capacity(basis.rank());
    for (l, theta) in thetas_eigen.iter().enumerate() {
        let (s, g) = solve(theta, basis.cost_ratio(Some(l)))?;
        s_ell.push(s);
        g_ell.push(g);
    }
    Ok(GainSet {
        s_breve,
        g_breve,
        s_ell,
        g_ell,
    })
}

/// Applies `uⁱ = Ğ x̆ⁱ + Σ_ℓ G^ℓ x^{ℓ,i}` given one aux gain and one gain per
/// eigen block.
pub fn synthesize_control(
    g_breve: &DMatrix<f64>,
    g_ell: &[DMatrix<f64>],
    basis: &SpectralBasis,
    x: &DMatrix<f64>,
) -> DMatrix<f64> {
    let coeffs = basis.eigen_coefficients(x);
    let aux = basis.aux_from_coefficients(x, &coeffs);
    let mut u = g_breve * aux;
    if !g_ell.is_empty() {
        // Σ_ℓ (G^ℓ x v^ℓ)(v^ℓ)ᵀ
        let du = g_breve.nrows();
        let mut ucoef = DMatrix::zeros(du, g_ell.len());
        for (l, g) in g_ell.iter().enumerate() {
            let c: DVector<f64> = g * coeffs.column(l);
            ucoef.set_column(l, &c);
        }
        u += ucoef * basis.vectors().transpose();
    }
    u
}

/// The known-model optimal control for global state `x: dx x n`.
pub fn optimal_policy_step(gains: &GainSet, basis: &SpectralBasis, x: &DMatrix<f64>) -> DMatrix<f64> {
    synthesize_control(&gains.g_breve, &gains.g_ell, basis, x)
}

/// `J(θ) = q₀(n − L)σ²tr(S̆) + Σ_ℓ q^ℓ σ² tr(S^ℓ)`.
pub fn optimal_average_cost(gains: &GainSet, basis: &SpectralBasis, m: &NetworkModel) -> f64 {
    let sigma2 = m.sigma_w2();
    let aux: f64 = if basis.has_auxiliary() {
        basis.breve_v2().iter().sum::<f64>() * basis.q0() * sigma2 * gains.s_breve.trace()
    } else {
        0.0
    };
    let eigen: f64 = (0..basis.rank())
        .map(|l| basis.q_ell()[l] * sigma2 * gains.s_ell[l].trace())
        .sum();
    aux + eigen
}
