//! Thompson sampling with dynamic episodes over the decomposed system.
//!
//! One actor per eigen block plus one auxiliary actor. Each actor keeps its
//! own posterior and episode clock, samples a parameter at episode starts and
//! applies that sample's gain until its stopping rule fires. The coordinator
//! projects the global state, feeds each actor its transition and sums the
//! resulting controls.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{
    sample_truncated, select_agent_columns, Observation, PosteriorSnapshot, PosteriorState,
    UncertaintySet,
};
use crate::netmodel::NetworkModel;
use crate::riccati::{BlockTag, ThetaBlock};
use crate::spectral::SpectralBasis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsdeConfig {
    /// Minimum episode length minus one.
    pub t_min: usize,
    /// Stability margin of the uncertainty sets.
    pub delta: f64,
    /// Consecutive rejections before the previous sample is reused.
    pub max_rejects: usize,
    pub membership: Membership,
}

/// Which closed loop a sampled gain has to keep within `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    /// The sample's own dynamics.
    #[default]
    OwnClosedLoop,
    /// The true block dynamics. This uses knowledge of the plant and is only
    /// meaningful in simulation.
    TrueClosedLoop,
}

impl Default for TsdeConfig {
    fn default() -> Self {
        Self {
            t_min: 0,
            delta: 0.99,
            max_rejects: 1000,
            membership: Membership::OwnClosedLoop,
        }
    }
}

/// Logged whenever an actor closes an episode and starts the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub actor: BlockTag,
    /// Index of the episode that starts.
    pub k: usize,
    pub t_k: i64,
    /// Length of the episode that just closed.
    pub closed_len: i64,
    pub det: f64,
    /// Row-major stacked sample `θ`.
    pub theta_k: Vec<Vec<f64>>,
    pub rejections: usize,
    pub fallback: bool,
    pub posterior: PosteriorSnapshot,
}

#[derive(Debug, Clone)]
pub struct ActorState {
    posterior: PosteriorState,
    set: UncertaintySet,
    t_min: i64,
    max_rejects: usize,
    k: usize,
    t_k: i64,
    prev_len: i64,
    det_at_start: f64,
    theta: ThetaBlock,
    gain: DMatrix<f64>,
    truncation_failures: usize,
    episode_starts: Vec<i64>,
}

impl ActorState {
    /// Initial state: `t_0 = −T_min`, `T_{−1} = T_min`, `θ_0 = 0` with gain 0.
    pub fn new(posterior: PosteriorState, set: UncertaintySet, cfg: &TsdeConfig, du: usize) -> Self {
        let dx = posterior.dx();
        let tag = posterior.tag();
        let t_min = cfg.t_min as i64;
        let det = posterior.cov_det();
        Self {
            posterior,
            set,
            t_min,
            max_rejects: cfg.max_rejects,
            k: 0,
            t_k: -t_min,
            prev_len: t_min,
            det_at_start: det,
            theta: ThetaBlock::zero(dx, du, tag),
            gain: DMatrix::zeros(du, dx),
            truncation_failures: 0,
            episode_starts: Vec::new(),
        }
    }

    pub fn tag(&self) -> BlockTag {
        self.posterior.tag()
    }
    pub fn posterior(&self) -> &PosteriorState {
        &self.posterior
    }
    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
    pub fn theta(&self) -> &ThetaBlock {
        &self.theta
    }
    /// Current episode index `k` (0 before the first episode).
    pub fn episode(&self) -> usize {
        self.k
    }
    pub fn episode_start(&self) -> i64 {
        self.t_k
    }
    pub fn prev_len(&self) -> i64 {
        self.prev_len
    }
    pub fn det_at_start(&self) -> f64 {
        self.det_at_start
    }
    pub fn truncation_failures(&self) -> usize {
        self.truncation_failures
    }
    /// Start times of every episode so far.
    pub fn episode_starts(&self) -> &[i64] {
        &self.episode_starts
    }

    /// `t − t_k > T_min` and either `t − t_k > T_{k−1}` or the covariance
    /// determinant fell below half its value at `t_k`.
    pub fn episode_should_end(&self, t: i64, det_now: f64) -> bool {
        let elapsed = t - self.t_k;
        elapsed > self.t_min && (elapsed > self.prev_len || det_now < 0.5 * self.det_at_start)
    }

    /// Absorbs the latest transition and, if the episode ends, samples a new
    /// parameter. Returns the record of the new episode, if one started.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        obs: Option<&Observation>,
        t: i64,
        rng: &mut R,
    ) -> Option<EpisodeRecord> {
        if let Some(obs) = obs {
            self.posterior.update(obs);
        }
        let det_now = self.posterior.cov_det();
        if !self.episode_should_end(t, det_now) {
            return None;
        }
        let closed_len = t - self.t_k;
        self.prev_len = closed_len;
        self.k += 1;
        self.t_k = t;
        self.det_at_start = det_now;
        self.episode_starts.push(t);

        let outcome = sample_truncated(
            &self.posterior,
            &self.set,
            rng,
            self.max_rejects,
            &self.theta,
        );
        match outcome.gain {
            Some(g) => {
                self.theta = outcome.theta;
                self.gain = g;
            }
            None => {
                self.truncation_failures += 1;
                log::debug!(
                    "{}: no admissible sample after {} draws at t={t}; keeping previous gain",
                    self.tag(),
                    outcome.rejections
                );
            }
        }
        let st = self.theta.stacked();
        Some(EpisodeRecord {
            actor: self.tag(),
            k: self.k,
            t_k: t,
            closed_len,
            det: det_now,
            theta_k: (0..st.nrows())
                .map(|i| st.row(i).iter().copied().collect())
                .collect(),
            rejections: outcome.rejections,
            fallback: outcome.used_fallback,
            posterior: self.posterior.snapshot(),
        })
    }
}

/// One time step of the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: i64,
    pub cost: f64,
    /// One flag per eigen actor, then the auxiliary actor if present.
    pub new_episode: Vec<bool>,
    /// Agent whose auxiliary transition feeds the next update.
    pub selected_agent: Option<usize>,
    /// Whether any actor drew a new sample.
    pub sampled: bool,
    pub episodes: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone)]
struct Pending {
    eigen_z: Vec<DVector<f64>>,
    aux: Option<(DVector<f64>, usize)>,
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    eigen: Vec<ActorState>,
    aux: Option<ActorState>,
    aux_sigma2: Vec<f64>,
    pending: Option<Pending>,
    t: i64,
}

impl Coordinator {
    /// `eigen` must hold one actor per eigenvalue in order; `aux` is required
    /// exactly when the basis has an auxiliary subsystem.
    pub fn new(basis: &SpectralBasis, eigen: Vec<ActorState>, aux: Option<ActorState>) -> Self {
        assert_eq!(eigen.len(), basis.rank(), "one eigen actor per eigenvalue");
        assert_eq!(
            aux.is_some(),
            basis.has_auxiliary(),
            "auxiliary actor required iff the auxiliary subsystem exists"
        );
        let aux_sigma2 = (0..basis.n()).map(|i| basis.aux_noise_var(i)).collect();
        Self {
            eigen,
            aux,
            aux_sigma2,
            pending: None,
            t: 0,
        }
    }

    pub fn time(&self) -> i64 {
        self.t
    }
    pub fn eigen_actors(&self) -> &[ActorState] {
        &self.eigen
    }
    pub fn aux_actor(&self) -> Option<&ActorState> {
        self.aux.as_ref()
    }

    /// Advances the clock, feeds every actor the transition ending at `x`
    /// and returns the control for `x`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        model: &NetworkModel,
        basis: &SpectralBasis,
        x: &DMatrix<f64>,
        rng: &mut R,
    ) -> (DMatrix<f64>, StepRecord) {
        self.t += 1;
        let t = self.t;
        let dx = model.dx();
        let du = model.du();
        let rank = basis.rank();
        let v = basis.vectors();
        let coeffs = basis.eigen_coefficients(x);
        let aux_x = basis.aux_from_coefficients(x, &coeffs);
        let pending = self.pending.take();

        let mut new_episode = Vec::with_capacity(rank + 1);
        let mut episodes = Vec::new();

        // Eigen actors: agent i_ℓ's eigenstate transition.
        let mut ucoef = DMatrix::zeros(du, rank);
        let mut eigen_z = Vec::with_capacity(rank);
        for l in 0..rank {
            let i = basis.i_star()[l];
            let vi = v[(i, l)];
            let state: DVector<f64> = coeffs.column(l) * vi;
            let obs = pending.as_ref().map(|p| Observation {
                z: p.eigen_z[l].clone(),
                x_next: state.clone(),
                sigma2: basis.eigen_noise_var(l, i),
            });
            let actor = &mut self.eigen[l];
            let rec = actor.step(obs.as_ref(), t, rng);
            new_episode.push(rec.is_some());
            episodes.extend(rec);
            let c: DVector<f64> = actor.gain() * coeffs.column(l);
            eigen_z.push(stack(&state, &(&c * vi)));
            ucoef.set_column(l, &c);
        }

        let mut u = if rank > 0 {
            ucoef * v.transpose()
        } else {
            DMatrix::zeros(du, model.n())
        };

        // Auxiliary actor: the previously selected agent's transition.
        let mut next_aux = None;
        let mut selected = None;
        if let Some(actor) = self.aux.as_mut() {
            let obs = pending.as_ref().and_then(|p| p.aux.as_ref()).map(|(z, j)| Observation {
                z: z.clone(),
                x_next: aux_x.column(*j).into_owned(),
                sigma2: self.aux_sigma2[*j],
            });
            let rec = actor.step(obs.as_ref(), t, rng);
            new_episode.push(rec.is_some());
            episodes.extend(rec);
            let aux_u = actor.gain() * &aux_x;
            u += &aux_u;

            let mut z = DMatrix::zeros(dx + du, model.n());
            z.rows_mut(0, dx).copy_from(&aux_x);
            z.rows_mut(dx, du).copy_from(&aux_u);
            let j = select_agent_columns(actor.posterior(), &z, &self.aux_sigma2);
            next_aux = Some((z.column(j).into_owned(), j));
            selected = Some(j);
        }

        self.pending = Some(Pending {
            eigen_z,
            aux: next_aux,
        });
        let cost = model.per_step_cost(x, &u);
        let sampled = new_episode.iter().any(|b| *b);
        (
            u,
            StepRecord {
                t,
                cost,
                new_episode,
                selected_agent: selected,
                sampled,
                episodes,
            },
        )
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(a.len() + b.len());
    z.rows_mut(0, a.len()).copy_from(a);
    z.rows_mut(a.len(), b.len()).copy_from(b);
    z
}
