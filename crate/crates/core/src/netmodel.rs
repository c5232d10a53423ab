//! Network-coupled LQG system: graph coupling, per-subsystem dynamics and the
//! graph-polynomial quadratic cost.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum eigenvalue accepted for `Q` and `R`.
pub const PD_TOL: f64 = 1e-10;

/// Asymmetry above this level is reported when `M` is symmetrized.
pub const ASYMMETRY_WARN: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    Dimension {
        field: &'static str,
        expected: String,
        got: String,
    },
    #[error("`{field}` is not positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { field: &'static str, min_eig: f64 },
    #[error("noise variance must be non-negative, got {0}")]
    NegativeNoise(f64),
    #[error("initial-state covariance is not positive semidefinite (min eigenvalue {0:e})")]
    InitCovariance(f64),
    #[error("`{0}` must contain at least one coefficient")]
    EmptyPolynomial(&'static str),
    #[error("unknown preset `{0}` (expected `meanfield` or `lowrank`)")]
    UnknownPreset(String),
    #[error("missing field `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// A matrix given either as a scalar (1x1) or as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, field: &'static str) -> Result<DMatrix<f64>, ModelError> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixSpec::Rows(rows) => {
                let nrows = rows.len();
                let ncols = rows.first().map_or(0, Vec::len);
                if nrows == 0 || ncols == 0 {
                    return Err(ModelError::Invalid {
                        field,
                        reason: "empty matrix".into(),
                    });
                }
                if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
                    return Err(ModelError::Dimension {
                        field,
                        expected: format!("rows of length {ncols}"),
                        got: format!("row of length {}", bad.len()),
                    });
                }
                Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
            }
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        if m.nrows() == 1 && m.ncols() == 1 {
            MatrixSpec::Scalar(m[(0, 0)])
        } else {
            MatrixSpec::Rows(
                (0..m.nrows())
                    .map(|i| m.row(i).iter().copied().collect())
                    .collect(),
            )
        }
    }
}

/// Human-editable model description. Every field is optional so that a named
/// preset can supply defaults and the remaining keys act as overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `meanfield` or `lowrank`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Number of subsystems (mean-field) or size of each complete-graph block (low-rank).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Mean-field cost coupling strength.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Low-rank edge weights of the 4-node base graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_coeffs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_coeffs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_w2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_cov: Option<MatrixSpec>,
}

/// The networked system. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    n: usize,
    dx: usize,
    du: usize,
    coupling: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    e: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    q_coeffs: Vec<f64>,
    r_coeffs: Vec<f64>,
    sigma_w2: f64,
    init_cov: DMatrix<f64>,
    h_x: DMatrix<f64>,
    h_u: DMatrix<f64>,
}

/// Raw parts of a [`NetworkModel`], validated by [`NetworkModel::new`].
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub coupling: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_coeffs: Vec<f64>,
    pub r_coeffs: Vec<f64>,
    pub sigma_w2: f64,
    pub init_cov: Option<DMatrix<f64>>,
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn expect_shape(
    field: &'static str,
    m: &DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> Result<(), ModelError> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(ModelError::Dimension {
            field,
            expected: format!("{rows}x{cols}"),
            got: shape(m),
        });
    }
    Ok(())
}

pub(crate) fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Evaluates `sum_k c_k M^k` with `M^0 = I`.
pub fn matrix_polynomial(coeffs: &[f64], m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut acc = DMatrix::zeros(n, n);
    let mut power = DMatrix::identity(n, n);
    for (k, c) in coeffs.iter().enumerate() {
        if k > 0 {
            power = &power * m;
        }
        acc += &power * *c;
    }
    acc
}

/// Evaluates `sum_k c_k x^k`.
pub fn scalar_polynomial(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

impl NetworkModel {
    pub fn new(parts: ModelParts) -> Result<Self, ModelError> {
        let ModelParts {
            coupling,
            a,
            b,
            d,
            e,
            q,
            r,
            q_coeffs,
            r_coeffs,
            sigma_w2,
            init_cov,
        } = parts;

        let n = coupling.nrows();
        if n == 0 || !coupling.is_square() {
            return Err(ModelError::Dimension {
                field: "coupling",
                expected: "non-empty square matrix".into(),
                got: shape(&coupling),
            });
        }
        let dx = a.nrows();
        if dx == 0 {
            return Err(ModelError::Dimension {
                field: "a",
                expected: "non-empty square matrix".into(),
                got: shape(&a),
            });
        }
        expect_shape("a", &a, dx, dx)?;
        let du = b.ncols();
        if du == 0 {
            return Err(ModelError::Dimension {
                field: "b",
                expected: format!("{dx}xk with k >= 1"),
                got: shape(&b),
            });
        }
        expect_shape("b", &b, dx, du)?;
        expect_shape("d", &d, dx, dx)?;
        expect_shape("e", &e, dx, du)?;
        expect_shape("q", &q, dx, dx)?;
        expect_shape("r", &r, du, du)?;

        if q_coeffs.is_empty() {
            return Err(ModelError::EmptyPolynomial("q_coeffs"));
        }
        if r_coeffs.is_empty() {
            return Err(ModelError::EmptyPolynomial("r_coeffs"));
        }
        if sigma_w2.is_nan() || sigma_w2 < 0.0 {
            return Err(ModelError::NegativeNoise(sigma_w2));
        }

        for (field, m) in [("q", &q), ("r", &r)] {
            let asym = (m - m.transpose()).abs().max();
            if asym > PD_TOL {
                return Err(ModelError::Invalid {
                    field,
                    reason: format!("not symmetric (max asymmetry {asym:e})"),
                });
            }
            let min_eig = min_symmetric_eigenvalue(m);
            if min_eig.is_nan() || min_eig <= PD_TOL {
                return Err(ModelError::NotPositiveDefinite { field, min_eig });
            }
        }
        let q = (&q + q.transpose()) * 0.5;
        let r = (&r + r.transpose()) * 0.5;

        let init_cov = match init_cov {
            Some(c) => {
                expect_shape("init_cov", &c, dx, dx)?;
                let min_eig = min_symmetric_eigenvalue(&c);
                if min_eig < -PD_TOL {
                    return Err(ModelError::InitCovariance(min_eig));
                }
                (&c + c.transpose()) * 0.5
            }
            None => DMatrix::zeros(dx, dx),
        };

        let asym = (&coupling - coupling.transpose()).abs().max();
        if asym > ASYMMETRY_WARN {
            log::warn!("coupling matrix asymmetric by {asym:e}; using (M + M^T)/2");
        }
        let coupling = (&coupling + coupling.transpose()) * 0.5;
        if coupling.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid {
                field: "coupling",
                reason: "non-finite entry".into(),
            });
        }

        let h_x = matrix_polynomial(&q_coeffs, &coupling);
        let h_u = matrix_polynomial(&r_coeffs, &coupling);

        Ok(Self {
            n,
            dx,
            du,
            coupling,
            a,
            b,
            d,
            e,
            q,
            r,
            q_coeffs,
            r_coeffs,
            sigma_w2,
            init_cov,
            h_x,
            h_u,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn dx(&self) -> usize {
        self.dx
    }
    pub fn du(&self) -> usize {
        self.du
    }
    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn q_coeffs(&self) -> &[f64] {
        &self.q_coeffs
    }
    pub fn r_coeffs(&self) -> &[f64] {
        &self.r_coeffs
    }
    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }
    pub fn init_cov(&self) -> &DMatrix<f64> {
        &self.init_cov
    }

    /// Returns a copy with the dynamics `(A, B, D, E)` replaced.
    pub fn with_dynamics(
        &self,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        Self::new(ModelParts {
            coupling: self.coupling.clone(),
            a,
            b,
            d,
            e,
            q: self.q.clone(),
            r: self.r.clone(),
            q_coeffs: self.q_coeffs.clone(),
            r_coeffs: self.r_coeffs.clone(),
            sigma_w2: self.sigma_w2,
            init_cov: Some(self.init_cov.clone()),
        })
    }

    /// Cost weights `(H_x, H_u)`: polynomials of the coupling matrix.
    pub fn cost_weight_matrices(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.h_x, &self.h_u)
    }

    /// `c(x, u) = tr(Q x H_x x^T) + tr(R u H_u u^T)` for `x: dx x n`, `u: du x n`.
    pub fn per_step_cost(&self, x: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
        debug_assert_eq!((x.nrows(), x.ncols()), (self.dx, self.n));
        debug_assert_eq!((u.nrows(), u.ncols()), (self.du, self.n));
        // tr(Q X H X^T) = <Q X, X H>_F
        let state = (&self.q * x).dot(&(x * &self.h_x));
        let control = (&self.r * u).dot(&(u * &self.h_u));
        state + control
    }
}

/// Adjacency matrix of the 4-node base graph used by the low-rank preset.
pub fn base_graph(edge_a: f64, edge_b: f64) -> DMatrix<f64> {
    let (a, b) = (edge_a, edge_b);
    DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, a, 0.0, b, //
            a, 0.0, a, 0.0, //
            0.0, a, 0.0, b, //
            b, 0.0, b, 0.0,
        ],
    )
}

/// `M° ⊗ (1/n)·ones(n, n)`.
pub fn lowrank_coupling(edge_a: f64, edge_b: f64, n_rep: usize) -> DMatrix<f64> {
    let base = base_graph(edge_a, edge_b);
    let block = DMatrix::from_element(n_rep, n_rep, 1.0 / n_rep as f64);
    base.kronecker(&block)
}

pub fn meanfield_coupling(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0 / n as f64)
}

fn get_matrix(
    spec: &Option<MatrixSpec>,
    default: Option<f64>,
    field: &'static str,
) -> Result<DMatrix<f64>, ModelError> {
    match (spec, default) {
        (Some(s), _) => s.to_matrix(field),
        (None, Some(v)) => Ok(DMatrix::from_element(1, 1, v)),
        (None, None) => Err(ModelError::Missing(field)),
    }
}

/// Builds and validates a model from a description, applying preset defaults
/// for any field left unset.
pub fn build_model(cfg: &ModelConfig) -> Result<NetworkModel, ModelError> {
    // Scalar dynamics shared by both presets.
    const DYN: [f64; 4] = [1.0, 0.3, 0.5, 0.2];

    let preset = cfg.preset.as_deref();
    let (coupling, q_default, r_default, dyn_default) = match preset {
        Some("meanfield") => {
            if cfg.edge_a.is_some() || cfg.edge_b.is_some() {
                return Err(ModelError::Invalid {
                    field: "edge_a",
                    reason: "edge weights only apply to the lowrank preset".into(),
                });
            }
            let n = cfg.n.unwrap_or(10);
            if n == 0 {
                return Err(ModelError::Invalid {
                    field: "n",
                    reason: "must be at least 1".into(),
                });
            }
            let kappa = cfg.kappa.unwrap_or(0.5);
            let nf = n as f64;
            let coeffs = vec![1.0 / nf, kappa / nf];
            (
                Some(meanfield_coupling(n)),
                Some(coeffs.clone()),
                Some(coeffs),
                true,
            )
        }
        Some("lowrank") => {
            if cfg.kappa.is_some() {
                return Err(ModelError::Invalid {
                    field: "kappa",
                    reason: "kappa only applies to the meanfield preset".into(),
                });
            }
            let n_rep = cfg.n.unwrap_or(1);
            if n_rep == 0 {
                return Err(ModelError::Invalid {
                    field: "n",
                    reason: "must be at least 1".into(),
                });
            }
            let edge_a = cfg.edge_a.unwrap_or(0.05);
            let edge_b = cfg.edge_b.unwrap_or(edge_a);
            (
                Some(lowrank_coupling(edge_a, edge_b, n_rep)),
                Some(vec![1.0, -2.0, 1.0]),
                Some(vec![1.0]),
                true,
            )
        }
        Some(other) => return Err(ModelError::UnknownPreset(other.to_string())),
        None => (None, None, None, false),
    };

    let coupling = match (&cfg.coupling, coupling) {
        (Some(spec), _) => spec.to_matrix("coupling")?,
        (None, Some(m)) => m,
        (None, None) => return Err(ModelError::Missing("coupling")),
    };
    let dflt = |i: usize| dyn_default.then_some(DYN[i]);
    let unit = dyn_default.then_some(1.0);

    NetworkModel::new(ModelParts {
        coupling,
        a: get_matrix(&cfg.a, dflt(0), "a")?,
        b: get_matrix(&cfg.b, dflt(1), "b")?,
        d: get_matrix(&cfg.d, dflt(2), "d")?,
        e: get_matrix(&cfg.e, dflt(3), "e")?,
        q: get_matrix(&cfg.q, unit, "q")?,
        r: get_matrix(&cfg.r, unit, "r")?,
        q_coeffs: cfg
            .q_coeffs
            .clone()
            .or(q_default)
            .ok_or(ModelError::Missing("q_coeffs"))?,
        r_coeffs: cfg
            .r_coeffs
            .clone()
            .or(r_default)
            .ok_or(ModelError::Missing("r_coeffs"))?,
        sigma_w2: cfg.sigma_w2.or(unit).ok_or(ModelError::Missing("sigma_w2"))?,
        init_cov: cfg
            .init_cov
            .as_ref()
            .map(|s| s.to_matrix("init_cov"))
            .transpose()?,
    })
}
