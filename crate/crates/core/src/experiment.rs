//! Monte-Carlo regret experiments: many seeded trajectories per model group,
//! aggregated at a fixed grid of checkpoints.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bayes::sample_truncated;
use crate::config::{deep_merge, ConfigError};
use crate::netmodel::{build_model, ModelConfig};
use crate::riccati::{BlockTag, DareOptions, ThetaBlock};
use crate::sim::{
    run_trajectory, InitState, Instance, Policy, PriorConfig, SimError, TrajectoryConfig,
    TrajectoryResult,
};
use crate::spectral::{SpectralBasis, SpectralOptions};
use crate::tsde::{Membership, TsdeConfig};

pub const CSV_HEADER: [&str; 8] = [
    "experiment",
    "n",
    "T_checkpoint",
    "mean_regret",
    "stderr_regret",
    "mean_regret_over_sqrtT",
    "mean_K_T_aux",
    "mean_K_T_eigen",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every trajectory runs on the configured dynamics.
    #[default]
    FixedTheta,
    /// The true dynamics of each trajectory are drawn from the prior,
    /// restricted to the uncertainty sets.
    Bayes,
}

/// Model overrides for one row group of the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub label: String,
    #[serde(default)]
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub horizon: usize,
    pub trajectories: usize,
    pub checkpoints: usize,
    pub base_seed: u64,
    pub mode: Mode,
    pub policy: Policy,
    pub init: InitState,
    pub model: ModelConfig,
    /// Each group is `model` with the group's keys layered on top. Without
    /// groups a single group named after the experiment is run.
    pub groups: Vec<GroupSpec>,
    pub spectral: SpectralOptions,
    pub dare: DareOptions,
    pub tsde: TsdeConfig,
    pub prior: PriorConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            horizon: 2000,
            trajectories: 100,
            checkpoints: 5,
            base_seed: 1,
            mode: Mode::FixedTheta,
            policy: Policy::NetTsde,
            init: InitState::Zero,
            model: ModelConfig::default(),
            groups: Vec::new(),
            spectral: SpectralOptions::default(),
            dare: DareOptions::default(),
            tsde: TsdeConfig::default(),
            prior: PriorConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["meanfield", "lowrank", "fig2", "fig3"];

fn model_preset(name: &str) -> ModelConfig {
    ModelConfig {
        preset: Some(name.into()),
        ..Default::default()
    }
}

fn lowrank_label(prefix: &str, edge: f64, n_rep: usize) -> String {
    format!("{prefix}_a{edge}_b{edge}_4n{}", 4 * n_rep)
}

/// Named experiment configurations.
pub fn preset(name: &str) -> Result<ExperimentSpec, ConfigError> {
    // The experiment sets ask that a sampled gain keep the true block within
    // the stability margin.
    let base = ExperimentSpec {
        name: name.into(),
        tsde: TsdeConfig {
            membership: Membership::TrueClosedLoop,
            ..Default::default()
        },
        ..Default::default()
    };
    let spec = match name {
        "meanfield" => ExperimentSpec {
            model: ModelConfig {
                n: Some(10),
                ..model_preset("meanfield")
            },
            ..base
        },
        "lowrank" => ExperimentSpec {
            model: ModelConfig {
                n: Some(10),
                edge_a: Some(0.05),
                edge_b: Some(0.05),
                ..model_preset("lowrank")
            },
            ..base
        },
        "fig2" => ExperimentSpec {
            model: model_preset("meanfield"),
            groups: [1, 10, 100]
                .into_iter()
                .map(|n| GroupSpec {
                    label: format!("fig2_n{n}"),
                    model: ModelConfig {
                        n: Some(n),
                        ..Default::default()
                    },
                })
                .collect(),
            // A single agent has no auxiliary component; that group runs on
            // the eigen subsystem alone.
            spectral: SpectralOptions {
                allow_empty_auxiliary: true,
                ..Default::default()
            },
            ..base
        },
        "fig3" => ExperimentSpec {
            model: model_preset("lowrank"),
            groups: [0.05, 5.0]
                .into_iter()
                .flat_map(|edge| {
                    [1, 10, 20, 25].into_iter().map(move |n_rep| GroupSpec {
                        label: lowrank_label("fig3", edge, n_rep),
                        model: ModelConfig {
                            n: Some(n_rep),
                            edge_a: Some(edge),
                            edge_b: Some(edge),
                            ..Default::default()
                        },
                    })
                })
                .collect(),
            ..base
        },
        other => return Err(ConfigError::UnknownPreset(other.into())),
    };
    Ok(spec)
}

/// `T, T/2, T/4, ...` (`count` points, floored, at least 1), ascending and
/// without duplicates.
pub fn checkpoint_grid(horizon: usize, count: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = (0..count)
        .map(|k| {
            let shift = u32::try_from(k).unwrap_or(u32::MAX);
            horizon.checked_shr(shift).unwrap_or(0).max(1)
        })
        .collect();
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Seed of trajectory `index`: the leading 8 bytes of
/// `SHA-256(base_seed ‖ index)`, both little-endian.
pub fn trajectory_seed(base_seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style content hash: SHA-256 of `"blob <len>\0" + content`.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    hex(&h.finalize())
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("group `{label}`: {source}")]
    Group {
        label: String,
        #[source]
        source: SimError,
    },
    #[error("all {0} trajectories failed")]
    AllFailed(usize),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One fully resolved group.
#[derive(Debug, Clone)]
pub struct PreparedGroup {
    pub label: String,
    pub model: ModelConfig,
    pub instance: Instance,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(ConfigError::Key {
                    key: key.into(),
                    message: "must be at least 1".into(),
                })
            } else {
                Ok(())
            }
        };
        positive("horizon", self.horizon)?;
        positive("trajectories", self.trajectories)?;
        positive("checkpoints", self.checkpoints)?;
        if !(self.tsde.delta > 0.0 && self.tsde.delta < 1.0) {
            return Err(ConfigError::Key {
                key: "tsde.delta".into(),
                message: format!("must lie in (0, 1), got {}", self.tsde.delta),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, g) in self.groups.iter().enumerate() {
            if !seen.insert(g.label.as_str()) {
                return Err(ConfigError::Key {
                    key: format!("groups.{i}.label"),
                    message: format!("duplicate label `{}`", g.label),
                });
            }
        }
        Ok(())
    }

    /// The model description of every group after layering overrides.
    pub fn group_models(&self) -> Result<Vec<(String, ModelConfig)>, ConfigError> {
        if self.groups.is_empty() {
            return Ok(vec![(self.name.clone(), self.model.clone())]);
        }
        let to_value = |m: &ModelConfig| {
            toml::Value::try_from(m).map_err(|e| ConfigError::Key {
                key: "model".into(),
                message: e.to_string(),
            })
        };
        self.groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut merged = to_value(&self.model)?;
                deep_merge(&mut merged, to_value(&g.model)?);
                let cfg = ModelConfig::deserialize(merged).map_err(|e| ConfigError::Key {
                    key: format!("groups.{i}.model"),
                    message: e.to_string(),
                })?;
                Ok((g.label.clone(), cfg))
            })
            .collect()
    }

    /// Builds, decomposes and plans every group.
    pub fn prepare(&self) -> Result<Vec<PreparedGroup>, ExperimentError> {
        self.validate()?;
        self.group_models()?
            .into_iter()
            .map(|(label, model)| {
                let instance = build_model(&model)
                    .map_err(SimError::from)
                    .and_then(|m| Instance::new(m, &self.spectral, &self.dare))
                    .map_err(|source| ExperimentError::Group {
                        label: label.clone(),
                        source,
                    })?;
                Ok(PreparedGroup {
                    label,
                    model,
                    instance,
                })
            })
            .collect()
    }

    pub fn trajectory_config(&self) -> TrajectoryConfig {
        TrajectoryConfig {
            horizon: self.horizon,
            prior: self.prior.clone(),
            tsde: self.tsde,
            dare: self.dare,
            init: self.init,
            policy: self.policy,
            record_episodes: false,
        }
    }

    /// Canonical TOML rendering, the input of [`ExperimentSpec::config_hash`].
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes to TOML")
    }

    pub fn config_hash(&self) -> String {
        content_hash(&self.canonical_toml())
    }
}

/// Draws a true instance from the prior restricted to the uncertainty sets.
///
/// `Â = θ̆_A`, `B̂ = θ̆_B` and the coupling terms follow from the first eigen
/// block, `D̂ = (θ¹_A − θ̆_A)/λ¹`, `Ê = (θ¹_B − θ̆_B)/λ¹`. Draws whose remaining
/// blocks are not stabilizable are rejected as a whole.
pub fn draw_instance(
    base: &Instance,
    prior: &PriorConfig,
    tsde: &TsdeConfig,
    dare: &DareOptions,
    seed: u64,
) -> Result<Instance, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    // The truth itself is drawn from the own-closed-loop sets; the learner's
    // sets are then built around whatever was drawn.
    let tsde = &TsdeConfig {
        membership: Membership::OwnClosedLoop,
        ..*tsde
    };
    let m = &base.model;
    let basis: &SpectralBasis = &base.basis;
    let (dx, du) = (m.dx(), m.du());
    let aux_prior = prior.posterior(&base.theta_aux)?;
    let aux_set = base.uncertainty_set(BlockTag::Aux, tsde, dare);
    let eig = match base.theta_eigen.first() {
        Some(truth) => Some((
            prior.posterior(truth)?,
            base.uncertainty_set(truth.tag, tsde, dare),
            basis.lambdas()[0],
        )),
        None => None,
    };

    for _ in 0..tsde.max_rejects {
        let aux = if basis.has_auxiliary() {
            let out = sample_truncated(&aux_prior, &aux_set, &mut rng, 1, &ThetaBlock::zero(dx, du, BlockTag::Aux));
            if out.used_fallback {
                continue;
            }
            Some(out.theta)
        } else {
            None
        };
        let first = match &eig {
            Some((post, set, _)) => {
                let out = sample_truncated(post, set, &mut rng, 1, &ThetaBlock::zero(dx, du, BlockTag::Eigen(0)));
                if out.used_fallback {
                    continue;
                }
                Some(out.theta)
            }
            None => None,
        };
        let (a, b, d, e) = match (aux, first, &eig) {
            (Some(aux), Some(first), Some((_, _, lambda))) => {
                let d = (&first.a - &aux.a) / *lambda;
                let e = (&first.b - &aux.b) / *lambda;
                (aux.a, aux.b, d, e)
            }
            (Some(aux), None, _) => (aux.a, aux.b, DMatrix::zeros(dx, dx), DMatrix::zeros(dx, du)),
            (None, Some(first), Some((_, _, lambda))) => {
                // Only A + λD and B + λE are identifiable; put it all in A, B.
                let _ = lambda;
                (first.a, first.b, DMatrix::zeros(dx, dx), DMatrix::zeros(dx, du))
            }
            _ => unreachable!("a decomposition has at least one block"),
        };
        let model = m.with_dynamics(a, b, d, e)?;
        let inst = match Instance::with_basis(model, basis.clone(), dare) {
            Ok(inst) => inst,
            Err(SimError::Riccati(_)) => continue,
            Err(other) => return Err(other),
        };
        let stable = inst
            .theta_eigen
            .iter()
            .chain(basis.has_auxiliary().then_some(&inst.theta_aux))
            .all(|t| inst.uncertainty_set(t.tag, tsde, dare).membership_gain(t).is_some());
        if stable {
            return Ok(inst);
        }
    }
    Err(SimError::TruthDraw(tsde.max_rejects))
}

/// One aggregated output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub experiment: String,
    pub n: usize,
    #[serde(rename = "T_checkpoint")]
    pub t_checkpoint: usize,
    pub mean_regret: f64,
    pub stderr_regret: f64,
    #[serde(rename = "mean_regret_over_sqrtT")]
    pub mean_regret_over_sqrt_t: f64,
    #[serde(rename = "mean_K_T_aux")]
    pub mean_k_aux: f64,
    #[serde(rename = "mean_K_T_eigen")]
    pub mean_k_eigen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFailure {
    pub index: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub n: usize,
    pub rank: usize,
    pub optimal_cost: f64,
    pub completed: usize,
    pub aborted: Vec<TrajectoryFailure>,
    pub truncation_failures: usize,
    #[serde(skip)]
    pub rows: Vec<CsvRow>,
    /// `regret[T]` of every completed trajectory, in index order.
    #[serde(skip)]
    pub final_regret: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub checkpoints: Vec<usize>,
    pub groups: Vec<GroupSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub config_hash: String,
    pub checkpoints: Vec<usize>,
    pub groups: Vec<GroupSummary>,
    pub spec: ExperimentSpec,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    (mean, (var / m as f64).sqrt())
}

fn mean_episodes(runs: &[&TrajectoryResult], t: usize, aux: bool) -> f64 {
    let counts: Vec<f64> = runs
        .iter()
        .flat_map(|r| {
            r.actors
                .iter()
                .enumerate()
                .filter(move |(_, tag)| (**tag == BlockTag::Aux) == aux)
                .map(move |(i, _)| r.episodes_by(i, t) as f64)
        })
        .collect();
    if counts.is_empty() {
        f64::NAN
    } else {
        counts.iter().sum::<f64>() / counts.len() as f64
    }
}

/// Aggregates completed trajectories of one group at the checkpoints.
pub fn aggregate(label: &str, n: usize, runs: &[&TrajectoryResult], checkpoints: &[usize]) -> Vec<CsvRow> {
    checkpoints
        .iter()
        .map(|&t| {
            let regrets: Vec<f64> = runs.iter().map(|r| r.regret[t - 1]).collect();
            let (mean, stderr) = mean_stderr(&regrets);
            CsvRow {
                experiment: label.into(),
                n,
                t_checkpoint: t,
                mean_regret: mean,
                stderr_regret: stderr,
                mean_regret_over_sqrt_t: mean / (t as f64).sqrt(),
                mean_k_aux: mean_episodes(runs, t, true),
                mean_k_eigen: mean_episodes(runs, t, false),
            }
        })
        .collect()
}

/// Runs one trajectory of a prepared group under the experiment's mode.
pub fn run_one(spec: &ExperimentSpec, group: &PreparedGroup, seed: u64) -> Result<TrajectoryResult, SimError> {
    let cfg = spec.trajectory_config();
    match spec.mode {
        Mode::FixedTheta => run_trajectory(&group.instance, &cfg, seed),
        Mode::Bayes => {
            let inst = draw_instance(&group.instance, &spec.prior, &spec.tsde, &spec.dare, seed)?;
            run_trajectory(&inst, &cfg, seed)
        }
    }
}

/// Runs every trajectory of every group on `jobs` worker threads. The result
/// does not depend on `jobs`.
pub fn run_experiment(spec: &ExperimentSpec, jobs: usize) -> Result<ExperimentResult, ExperimentError> {
    let groups = spec.prepare()?;
    let checkpoints = checkpoint_grid(spec.horizon, spec.checkpoints);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;

    let tasks: Vec<(usize, usize)> = (0..groups.len())
        .flat_map(|g| (0..spec.trajectories).map(move |i| (g, i)))
        .collect();
    let outcomes: Vec<Result<TrajectoryResult, SimError>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(g, i)| run_one(spec, &groups[g], trajectory_seed(spec.base_seed, i as u64)))
            .collect()
    });

    let mut summaries = Vec::with_capacity(groups.len());
    let mut completed_total = 0;
    for (g, chunk) in groups.iter().zip(outcomes.chunks(spec.trajectories)) {
        let mut ok = Vec::new();
        let mut aborted = Vec::new();
        for (i, out) in chunk.iter().enumerate() {
            match out {
                Ok(r) => ok.push(r),
                Err(e) => aborted.push(TrajectoryFailure {
                    index: i,
                    seed: trajectory_seed(spec.base_seed, i as u64),
                    reason: e.to_string(),
                }),
            }
        }
        if !aborted.is_empty() {
            log::warn!(
                "group `{}`: {} of {} trajectories aborted; aggregating the rest",
                g.label,
                aborted.len(),
                spec.trajectories
            );
        }
        completed_total += ok.len();
        let n = g.instance.model.n();
        summaries.push(GroupSummary {
            label: g.label.clone(),
            n,
            rank: g.instance.basis.rank(),
            optimal_cost: g.instance.optimal_cost,
            completed: ok.len(),
            truncation_failures: ok.iter().map(|r| r.truncation_failures).sum(),
            rows: if ok.is_empty() {
                Vec::new()
            } else {
                aggregate(&g.label, n, &ok, &checkpoints)
            },
            final_regret: ok.iter().map(|r| *r.regret.last().expect("horizon >= 1")).collect(),
            aborted,
        });
    }
    if completed_total == 0 {
        return Err(ExperimentError::AllFailed(tasks.len()));
    }
    Ok(ExperimentResult {
        name: spec.name.clone(),
        checkpoints,
        groups: summaries,
    })
}

impl ExperimentResult {
    pub fn rows(&self) -> impl Iterator<Item = &CsvRow> {
        self.groups.iter().flat_map(|g| g.rows.iter())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        // Written explicitly so that an all-aborted group still yields a header.
        w.write_record(CSV_HEADER)?;
        for row in self.rows() {
            w.write_record(&[
                row.experiment.clone(),
                row.n.to_string(),
                row.t_checkpoint.to_string(),
                row.mean_regret.to_string(),
                row.stderr_regret.to_string(),
                row.mean_regret_over_sqrt_t.to_string(),
                row.mean_k_aux.to_string(),
                row.mean_k_eigen.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String, ExperimentError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }

    pub fn manifest(&self, spec: &ExperimentSpec) -> Manifest {
        Manifest {
            name: self.name.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: spec.config_hash(),
            checkpoints: self.checkpoints.clone(),
            groups: self.groups.clone(),
            spec: spec.clone(),
        }
    }

    /// Plain-text table of the final checkpoint of every group.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>5} {:>7} {:>12} {:>10} {:>10} {:>8} {:>8} {:>9}\n",
            "group", "n", "T", "mean R(T)", "stderr", "R/sqrt(T)", "K aux", "K eigen", "aborted"
        );
        for g in &self.groups {
            match g.rows.last() {
                Some(r) => s += &format!(
                    "{:<28} {:>5} {:>7} {:>12.3} {:>10.3} {:>10.4} {:>8.2} {:>8.2} {:>9}\n",
                    g.label,
                    g.n,
                    r.t_checkpoint,
                    r.mean_regret,
                    r.stderr_regret,
                    r.mean_regret_over_sqrt_t,
                    r.mean_k_aux,
                    r.mean_k_eigen,
                    g.aborted.len()
                ),
                None => s += &format!("{:<28} {:>5} (all trajectories aborted)\n", g.label, g.n),
            }
        }
        s
    }
}
