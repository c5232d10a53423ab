//! Ground-truth closed-loop simulation and regret bookkeeping for a single
//! trajectory.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::{PosteriorError, PosteriorState, UncertaintySet};
use crate::netmodel::{MatrixSpec, ModelError, NetworkModel};
use crate::riccati::{
    gains_for, optimal_average_cost, optimal_policy_step, true_blocks, BlockTag, DareOptions,
    GainSet, RiccatiError, ThetaBlock,
};
use crate::spectral::{decompose_coupling, SpectralBasis, SpectralError, SpectralOptions};
use crate::tsde::{ActorState, Coordinator, EpisodeRecord, Membership, TsdeConfig};

/// `‖x_t‖_F` above this aborts the trajectory.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("prior for block {tag}: {source}")]
    Prior {
        tag: BlockTag,
        #[source]
        source: PosteriorError,
    },
    #[error("prior for block {tag}: {reason}")]
    PriorSpec { tag: BlockTag, reason: String },
    #[error("state norm {norm:e} exceeded the divergence guard at t = {t}")]
    Diverged { t: usize, norm: f64 },
    #[error("could not draw a true parameter inside the uncertainty sets after {0} attempts")]
    TruthDraw(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Column-wise Gaussian with shared covariance, restricted to the stability set.
    #[default]
    Gaussian,
    /// All mass on the true block parameters.
    PointMass,
}

/// Prior shared by every block. Without an explicit mean the all-ones
/// `(dx + du) x dx` matrix is used; without a covariance the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<MatrixSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov: Option<MatrixSpec>,
}

impl PriorConfig {
    pub fn mean_matrix(&self, dx: usize, du: usize, tag: BlockTag) -> Result<DMatrix<f64>, SimError> {
        let p = dx + du;
        match &self.mean {
            None => Ok(DMatrix::from_element(p, dx, 1.0)),
            Some(spec) => {
                let m = spec.to_matrix("prior.mean")?;
                // A single column is accepted for dx = 1 regardless of orientation.
                let m = if m.nrows() == 1 && m.ncols() == p && dx == 1 {
                    m.transpose()
                } else {
                    m
                };
                if m.nrows() != p || m.ncols() != dx {
                    return Err(SimError::PriorSpec {
                        tag,
                        reason: format!("mean must be {p}x{dx}, got {}x{}", m.nrows(), m.ncols()),
                    });
                }
                Ok(m)
            }
        }
    }

    pub fn cov_matrix(&self, p: usize, tag: BlockTag) -> Result<DMatrix<f64>, SimError> {
        match &self.cov {
            None => Ok(DMatrix::identity(p, p)),
            Some(MatrixSpec::Scalar(s)) => Ok(DMatrix::identity(p, p) * *s),
            Some(spec) => {
                let c = spec.to_matrix("prior.cov")?;
                if c.nrows() != p || c.ncols() != p {
                    return Err(SimError::PriorSpec {
                        tag,
                        reason: format!("covariance must be {p}x{p}, got {}x{}", c.nrows(), c.ncols()),
                    });
                }
                Ok(c)
            }
        }
    }

    pub fn posterior(&self, truth: &ThetaBlock) -> Result<PosteriorState, SimError> {
        let (dx, du, tag) = (truth.dx(), truth.du(), truth.tag);
        match self.kind {
            PriorKind::PointMass => Ok(PosteriorState::point_mass(truth.stacked(), tag)),
            PriorKind::Gaussian => {
                let mean = self.mean_matrix(dx, du, tag)?;
                let cov = self.cov_matrix(dx + du, tag)?;
                PosteriorState::new(mean, cov, tag).map_err(|source| SimError::Prior { tag, source })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitState {
    /// `x₁ = 0`.
    #[default]
    Zero,
    /// `x₁ⁱ ~ N(0, Ξ₁)` independently per agent.
    Gaussian,
}

/// A validated model with its decomposition and known-model optimum.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: NetworkModel,
    pub basis: SpectralBasis,
    pub theta_aux: ThetaBlock,
    pub theta_eigen: Vec<ThetaBlock>,
    pub gains: GainSet,
    /// `J(θ)`.
    pub optimal_cost: f64,
}

impl Instance {
    pub fn new(model: NetworkModel, spectral: &SpectralOptions, dare: &DareOptions) -> Result<Self, SimError> {
        let basis = decompose_coupling(&model, spectral)?;
        Self::with_basis(model, basis, dare)
    }

    pub fn with_basis(model: NetworkModel, basis: SpectralBasis, dare: &DareOptions) -> Result<Self, SimError> {
        let (theta_aux, theta_eigen) = true_blocks(&model, &basis);
        let gains = gains_for(&theta_aux, &theta_eigen, &basis, &model, dare)?;
        let optimal_cost = optimal_average_cost(&gains, &basis, &model);
        Ok(Self {
            model,
            basis,
            theta_aux,
            theta_eigen,
            gains,
            optimal_cost,
        })
    }

    /// Oracle average-cost rate of each block: auxiliary first, then eigen.
    pub fn block_rates(&self) -> Vec<f64> {
        let s2 = self.model.sigma_w2();
        let b = &self.basis;
        let aux = if b.has_auxiliary() {
            b.q0() * b.breve_v2().iter().sum::<f64>() * s2 * self.gains.s_breve.trace()
        } else {
            0.0
        };
        std::iter::once(aux)
            .chain((0..b.rank()).map(|l| b.q_ell()[l] * s2 * self.gains.s_ell[l].trace()))
            .collect()
    }

    /// Uncertainty set of one block.
    pub fn uncertainty_set(&self, tag: BlockTag, tsde: &TsdeConfig, dare: &DareOptions) -> UncertaintySet {
        let (lambda, l) = match tag {
            BlockTag::Aux => (0.0, None),
            BlockTag::Eigen(l) => (self.basis.lambdas()[l], Some(l)),
        };
        let reference = match tsde.membership {
            Membership::OwnClosedLoop => None,
            Membership::TrueClosedLoop => Some(match l {
                None => self.theta_aux.clone(),
                Some(l) => self.theta_eigen[l].clone(),
            }),
        };
        UncertaintySet {
            delta: tsde.delta,
            reference,
            lambda,
            cost_ratio: self.basis.cost_ratio(l),
            q: self.model.q().clone(),
            r: self.model.r().clone(),
            dare: *dare,
        }
    }

    /// Net-TSDE coordinator with one actor per block, starting from `prior`.
    pub fn coordinator(
        &self,
        prior: &PriorConfig,
        tsde: &TsdeConfig,
        dare: &DareOptions,
    ) -> Result<Coordinator, SimError> {
        let du = self.model.du();
        let eigen = self
            .theta_eigen
            .iter()
            .map(|theta| {
                Ok(ActorState::new(
                    prior.posterior(theta)?,
                    self.uncertainty_set(theta.tag, tsde, dare),
                    tsde,
                    du,
                ))
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        let aux = if self.basis.has_auxiliary() {
            Some(ActorState::new(
                prior.posterior(&self.theta_aux)?,
                self.uncertainty_set(BlockTag::Aux, tsde, dare),
                tsde,
                du,
            ))
        } else {
            None
        };
        Ok(Coordinator::new(&self.basis, eigen, aux))
    }
}

/// `x_{t+1} = A x + B u + D x M + E u M + w`, `w` columns i.i.d. `N(0, σ² I)`.
pub fn simulate_step<R: Rng + ?Sized>(
    m: &NetworkModel,
    x: &DMatrix<f64>,
    u: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let mut next = m.a() * x + m.b() * u + m.d() * (x * m.coupling()) + m.e() * (u * m.coupling());
    let sd = m.sigma_w2().sqrt();
    if sd > 0.0 {
        for v in next.iter_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    next
}

/// `dx x n` draw with independent `N(0, Ξ₁)` columns.
pub fn initial_state<R: Rng + ?Sized>(m: &NetworkModel, init: InitState, rng: &mut R) -> DMatrix<f64> {
    let zero = DMatrix::zeros(m.dx(), m.n());
    match init {
        InitState::Zero => zero,
        InitState::Gaussian => {
            let eig = nalgebra::SymmetricEigen::new(m.init_cov().clone());
            let factor = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
            let white = DMatrix::from_fn(m.dx(), m.n(), |_, _| rng.sample::<f64, _>(StandardNormal));
            factor * white
        }
    }
}

/// Which controller drives the true system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    NetTsde,
    /// Known-model optimal gains.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub horizon: usize,
    pub prior: PriorConfig,
    pub tsde: TsdeConfig,
    pub dare: DareOptions,
    pub init: InitState,
    pub policy: Policy,
    /// Keep the full per-episode log (with posterior snapshots).
    pub record_episodes: bool,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            horizon: 2000,
            prior: PriorConfig::default(),
            tsde: TsdeConfig::default(),
            dare: DareOptions::default(),
            init: InitState::Zero,
            policy: Policy::NetTsde,
            record_episodes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub seed: u64,
    pub optimal_cost: f64,
    /// `Σ_{s<=t} c_s` for `t = 1..=T`.
    pub cumulative_cost: Vec<f64>,
    /// `cumulative_cost[t] − t·J(θ)`.
    pub regret: Vec<f64>,
    /// Final regret per block, auxiliary first then eigen. Sums to `regret[T]`
    /// up to rounding.
    pub block_regret: Vec<f64>,
    /// Tags of the actors in the order of `episode_starts`.
    pub actors: Vec<BlockTag>,
    pub episode_starts: Vec<Vec<i64>>,
    pub episodes: Vec<EpisodeRecord>,
    /// `max_t ‖xⁱ_t‖` per agent.
    pub max_state_norm: Vec<f64>,
    pub truncation_failures: usize,
    /// Posterior means at the end of the run, in `actors` order.
    pub final_means: Vec<DMatrix<f64>>,
}

impl TrajectoryResult {
    /// Number of episodes started by actor `idx` up to and including time `t`.
    pub fn episodes_by(&self, idx: usize, t: usize) -> usize {
        self.episode_starts[idx].partition_point(|&s| s <= t as i64)
    }
}

/// Seeded random streams: one for the plant noise, one for the learner.
pub fn trajectory_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(0);
    let mut algo = ChaCha8Rng::seed_from_u64(seed);
    algo.set_stream(1);
    (noise, algo)
}

/// Runs the closed loop for `cfg.horizon` steps and measures regret against
/// `inst.optimal_cost`. Deterministic given `seed`.
pub fn run_trajectory(inst: &Instance, cfg: &TrajectoryConfig, seed: u64) -> Result<TrajectoryResult, SimError> {
    let m = &inst.model;
    let basis = &inst.basis;
    let (mut noise_rng, mut algo_rng) = trajectory_rngs(seed);
    let j = inst.optimal_cost;
    let rates = inst.block_rates();
    let rank = basis.rank();

    let mut coord = match cfg.policy {
        Policy::NetTsde => Some(inst.coordinator(&cfg.prior, &cfg.tsde, &cfg.dare)?),
        Policy::Oracle => None,
    };

    let mut x = initial_state(m, cfg.init, &mut noise_rng);
    let mut cumulative_cost = Vec::with_capacity(cfg.horizon);
    let mut regret = Vec::with_capacity(cfg.horizon);
    let mut block_cost = vec![0.0; rank + 1];
    let mut episodes = Vec::new();
    let mut max_state_norm = vec![0.0_f64; m.n()];
    let mut total = 0.0;

    for t in 1..=cfg.horizon {
        for (i, best) in max_state_norm.iter_mut().enumerate() {
            *best = best.max(x.column(i).norm());
        }
        let (u, cost) = match coord.as_mut() {
            Some(c) => {
                let (u, rec) = c.step(m, basis, &x, &mut algo_rng);
                if cfg.record_episodes {
                    episodes.extend(rec.episodes);
                }
                (u, rec.cost)
            }
            None => {
                let u = optimal_policy_step(&inst.gains, basis, &x);
                let c = m.per_step_cost(&x, &u);
                (u, c)
            }
        };
        total += cost;
        cumulative_cost.push(total);
        regret.push(total - t as f64 * j);

        if rank > 0 {
            let xc = basis.eigen_coefficients(&x);
            let uc = basis.eigen_coefficients(&u);
            let mut eigen_sum = 0.0;
            for l in 0..rank {
                let xl = xc.column(l);
                let ul = uc.column(l);
                let c = basis.q_ell()[l]
                    * (xl.dot(&(m.q() * xl)) + basis.cost_ratio(Some(l)) * ul.dot(&(m.r() * ul)));
                block_cost[l + 1] += c;
                eigen_sum += c;
            }
            block_cost[0] += cost - eigen_sum;
        } else {
            block_cost[0] += cost;
        }

        x = simulate_step(m, &x, &u, &mut noise_rng);
        let norm = x.norm();
        if norm.is_nan() || norm > DIVERGENCE_NORM {
            return Err(SimError::Diverged { t: t + 1, norm });
        }
    }

    let horizon = cfg.horizon as f64;
    let block_regret = block_cost
        .iter()
        .zip(&rates)
        .map(|(c, r)| c - horizon * r)
        .collect();

    let (actors, episode_starts, truncation_failures, final_means) = match &coord {
        Some(c) => {
            let all: Vec<&ActorState> = c.eigen_actors().iter().chain(c.aux_actor()).collect();
            (
                all.iter().map(|a| a.tag()).collect(),
                all.iter().map(|a| a.episode_starts().to_vec()).collect(),
                all.iter().map(|a| a.truncation_failures()).sum(),
                all.iter().map(|a| a.posterior().mean().clone()).collect(),
            )
        }
        None => (Vec::new(), Vec::new(), 0, Vec::new()),
    };

    Ok(TrajectoryResult {
        seed,
        optimal_cost: j,
        cumulative_cost,
        regret,
        block_regret,
        actors,
        episode_starts,
        episodes,
        max_state_norm,
        truncation_failures,
        final_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_model, ModelConfig, ModelParts};

    fn meanfield(n: usize) -> Instance {
        let m = build_model(&ModelConfig {
            preset: Some("meanfield".into()),
            n: Some(n),
            ..Default::default()
        })
        .unwrap();
        Instance::new(m, &SpectralOptions::default(), &DareOptions::default()).unwrap()
    }

    #[test]
    fn zero_system_stays_at_zero() {
        let m = NetworkModel::new(ModelParts {
            coupling: DMatrix::zeros(3, 3),
            a: DMatrix::zeros(1, 1),
            b: DMatrix::zeros(1, 1),
            d: DMatrix::zeros(1, 1),
            e: DMatrix::zeros(1, 1),
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            q_coeffs: vec![1.0],
            r_coeffs: vec![1.0],
            sigma_w2: 0.0,
            init_cov: None,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_element(1, 3, 4.0);
        let next = simulate_step(&m, &x, &DMatrix::from_element(1, 3, 1.0), &mut rng);
        assert_eq!(next, DMatrix::zeros(1, 3));
    }

    #[test]
    fn uncoupled_agents_evolve_independently() {
        let m = NetworkModel::new(ModelParts {
            coupling: DMatrix::from_element(2, 2, 0.5),
            a: DMatrix::from_element(1, 1, 0.9),
            b: DMatrix::from_element(1, 1, 2.0),
            d: DMatrix::zeros(1, 1),
            e: DMatrix::zeros(1, 1),
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            q_coeffs: vec![1.0],
            r_coeffs: vec![1.0],
            sigma_w2: 0.0,
            init_cov: None,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_row_slice(1, 2, &[1.0, -3.0]);
        let u = DMatrix::from_row_slice(1, 2, &[0.5, 0.0]);
        let next = simulate_step(&m, &x, &u, &mut rng);
        assert_eq!(next, DMatrix::from_row_slice(1, 2, &[1.9, -2.7]));
    }

    #[test]
    fn noiseless_run_has_zero_regret() {
        let m = build_model(&ModelConfig {
            preset: Some("meanfield".into()),
            n: Some(5),
            sigma_w2: Some(0.0),
            ..Default::default()
        })
        .unwrap();
        let inst = Instance::new(m, &SpectralOptions::default(), &DareOptions::default()).unwrap();
        assert_eq!(inst.optimal_cost, 0.0);
        let cfg = TrajectoryConfig {
            horizon: 50,
            ..Default::default()
        };
        let res = run_trajectory(&inst, &cfg, 3).unwrap();
        assert!(res.cumulative_cost.iter().all(|&c| c == 0.0));
        assert!(res.regret.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn regret_identity_and_block_split() {
        let inst = meanfield(4);
        let cfg = TrajectoryConfig {
            horizon: 300,
            ..Default::default()
        };
        let res = run_trajectory(&inst, &cfg, 11).unwrap();
        for (t, (c, r)) in res.cumulative_cost.iter().zip(&res.regret).enumerate() {
            assert_eq!(*r, c - (t + 1) as f64 * inst.optimal_cost);
        }
        let split: f64 = res.block_regret.iter().sum();
        let total = *res.regret.last().unwrap();
        assert!((split - total).abs() <= 1e-8 * (1.0 + total.abs()));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let inst = meanfield(6);
        let cfg = TrajectoryConfig {
            horizon: 400,
            record_episodes: true,
            ..Default::default()
        };
        let a = run_trajectory(&inst, &cfg, 42).unwrap();
        let b = run_trajectory(&inst, &cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = run_trajectory(&inst, &cfg, 43).unwrap();
        assert_ne!(a.cumulative_cost, c.cumulative_cost);
    }

    #[test]
    fn divergence_guard_trips() {
        let m = NetworkModel::new(ModelParts {
            coupling: DMatrix::zeros(2, 2),
            a: DMatrix::from_element(1, 1, 3.0),
            b: DMatrix::from_element(1, 1, 1.0),
            d: DMatrix::zeros(1, 1),
            e: DMatrix::zeros(1, 1),
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            q_coeffs: vec![1.0],
            r_coeffs: vec![1.0],
            sigma_w2: 1.0,
            init_cov: None,
        })
        .unwrap();
        let inst = Instance::new(m, &SpectralOptions::default(), &DareOptions::default()).unwrap();
        // Point mass on a wrong parameter with no control authority keeps the
        // unstable plant in open loop.
        let cfg = TrajectoryConfig {
            horizon: 200,
            prior: PriorConfig {
                kind: PriorKind::Gaussian,
                mean: Some(MatrixSpec::Rows(vec![vec![0.5], vec![0.0]])),
                cov: Some(MatrixSpec::Scalar(1e-300)),
            },
            ..Default::default()
        };
        let err = run_trajectory(&inst, &cfg, 0).unwrap_err();
        assert!(matches!(err, SimError::Diverged { .. }), "{err}");
    }
}
