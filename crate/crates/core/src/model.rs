//! Linear-Gaussian filtering problems.
//!
//! A [`LinearModel`] is a sequence of steps `k = 1..=K`. Step `k` advances
//! the state with the affine map `u -> A u + b` and then observes it through
//! `H` with data `d` and data-error covariance `R`. The Gaussian initial
//! condition `N(u0, Q0)` is attached to the model as step 0.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::to_canonical_json;
use crate::linalg;

/// Relative tolerance for symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative eigenvalue tolerance for positive semidefiniteness.
pub const PSD_TOL: f64 = 1e-10;

/// Mean and covariance of a Gaussian state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks shape, symmetry and positive semidefiniteness of `cov`.
    pub fn check(&self) -> std::result::Result<(), String> {
        let m = self.mean.len();
        if self.cov.shape() != (m, m) {
            return Err(format!("cov has shape {:?}, expected ({m}, {m})", self.cov.shape()));
        }
        if self.mean.iter().chain(self.cov.iter()).any(|x| !x.is_finite()) {
            return Err("non-finite entry".into());
        }
        if !linalg::is_symmetric(&self.cov, SYMMETRY_TOL) {
            return Err("cov not symmetric".into());
        }
        if !linalg::is_psd(&self.cov, PSD_TOL) {
            return Err("cov not positive semidefinite".into());
        }
        Ok(())
    }
}

/// One step of the model: dynamics `A, b`, observation `H`, data error
/// covariance `R` and the data vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSpec {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub data: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub initial: GaussianState,
    pub steps: Vec<StepSpec>,
}

/// A single violated model constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// 1-based step index; `None` for model-level fields.
    pub step: Option<usize>,
    pub field: &'static str,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    Dimension { expected: (usize, usize), actual: (usize, usize) },
    NotSymmetric,
    NotPositiveDefinite,
    NotPositiveSemidefinite,
    NonFinite,
    ZeroDimension,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::Dimension { expected, actual } => write!(
                f,
                "dimension mismatch in {}: expected {}x{}, got {}x{}",
                self.field, expected.0, expected.1, actual.0, actual.1
            )?,
            ViolationKind::NotSymmetric => write!(f, "{} not symmetric", self.field)?,
            ViolationKind::NotPositiveDefinite => write!(f, "{} not positive definite", self.field)?,
            ViolationKind::NotPositiveSemidefinite => {
                write!(f, "{} not positive semidefinite", self.field)?
            }
            ViolationKind::NonFinite => write!(f, "non-finite entry in {}", self.field)?,
            ViolationKind::ZeroDimension => write!(f, "{} must be positive", self.field)?,
        }
        match self.step {
            Some(k) => write!(f, " at step {k}"),
            None => Ok(()),
        }
    }
}

impl LinearModel {
    pub fn new(state_dim: usize, obs_dim: usize, initial: GaussianState, steps: Vec<StepSpec>) -> Self {
        Self {
            state_dim,
            obs_dim,
            initial,
            steps,
        }
    }

    /// Number of filtering steps `K`.
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Step `k` for `1 <= k <= K`.
    pub fn step(&self, k: usize) -> Result<&StepSpec> {
        if k == 0 || k > self.steps.len() {
            return Err(Error::InvalidStep {
                index: k,
                steps: self.steps.len(),
            });
        }
        Ok(&self.steps[k - 1])
    }

    /// Returns the model if [`validate_model`] accepts it.
    pub fn validated(self) -> Result<Self> {
        validate_model(&self).map_err(Error::InvalidModel)?;
        Ok(self)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawModel = serde_json::from_str(s).map_err(|e| Error::Parse {
            context: "model".into(),
            message: e.to_string(),
        })?;
        raw.into_model()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Serializes with one JSON entry per step (no `repeat` compression).
    pub fn to_json(&self) -> String {
        let raw = RawModel {
            state_dim: self.state_dim,
            obs_dim: self.obs_dim,
            initial: Some(RawGaussian {
                mean: self.initial.mean.iter().copied().collect(),
                cov: matrix_rows(&self.initial.cov),
            }),
            steps: self
                .steps
                .iter()
                .map(|s| RawStep {
                    a: matrix_rows(&s.a),
                    b: s.b.iter().copied().collect(),
                    h: matrix_rows(&s.h),
                    r: matrix_rows(&s.r),
                    data: Some(s.data.iter().copied().collect()),
                    repeat: None,
                    data_sequence: None,
                })
                .collect(),
        };
        to_canonical_json(&raw)
    }
}

/// Checks every [`LinearModel`] invariant, collecting all violations.
pub fn validate_model(model: &LinearModel) -> std::result::Result<(), Vec<Violation>> {
    let m = model.state_dim;
    let d = model.obs_dim;
    let mut out = Vec::new();
    if m == 0 {
        out.push(Violation {
            step: None,
            field: "state_dim",
            kind: ViolationKind::ZeroDimension,
        });
    }
    if d == 0 {
        out.push(Violation {
            step: None,
            field: "obs_dim",
            kind: ViolationKind::ZeroDimension,
        });
    }

    let init = &model.initial;
    check_shape(&mut out, None, "initial.mean", (m, 1), (init.mean.len(), 1));
    if check_shape(&mut out, None, "initial.cov", (m, m), init.cov.shape()) {
        if init.cov.iter().chain(init.mean.iter()).any(|x| !x.is_finite()) {
            out.push(Violation {
                step: None,
                field: "initial",
                kind: ViolationKind::NonFinite,
            });
        } else if !linalg::is_symmetric(&init.cov, SYMMETRY_TOL) {
            out.push(Violation {
                step: None,
                field: "initial.cov",
                kind: ViolationKind::NotSymmetric,
            });
        } else if !linalg::is_psd(&init.cov, PSD_TOL) {
            out.push(Violation {
                step: None,
                field: "initial.cov",
                kind: ViolationKind::NotPositiveSemidefinite,
            });
        }
    }

    for (idx, s) in model.steps.iter().enumerate() {
        let k = Some(idx + 1);
        check_shape(&mut out, k, "A", (m, m), s.a.shape());
        check_shape(&mut out, k, "b", (m, 1), (s.b.len(), 1));
        check_shape(&mut out, k, "H", (d, m), s.h.shape());
        check_shape(&mut out, k, "data", (d, 1), (s.data.len(), 1));
        let finite = s
            .a
            .iter()
            .chain(s.b.iter())
            .chain(s.h.iter())
            .chain(s.data.iter())
            .all(|x| x.is_finite());
        if !finite {
            out.push(Violation {
                step: k,
                field: "step",
                kind: ViolationKind::NonFinite,
            });
        }
        if check_shape(&mut out, k, "R", (d, d), s.r.shape()) {
            if s.r.iter().any(|x| !x.is_finite()) {
                out.push(Violation {
                    step: k,
                    field: "R",
                    kind: ViolationKind::NonFinite,
                });
            } else if !linalg::is_symmetric(&s.r, SYMMETRY_TOL) {
                out.push(Violation {
                    step: k,
                    field: "R",
                    kind: ViolationKind::NotSymmetric,
                });
            } else if linalg::Ldlt::new(&linalg::symmetrize(&s.r)).is_none() {
                out.push(Violation {
                    step: k,
                    field: "R",
                    kind: ViolationKind::NotPositiveDefinite,
                });
            }
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn check_shape(
    out: &mut Vec<Violation>,
    step: Option<usize>,
    field: &'static str,
    expected: (usize, usize),
    actual: (usize, usize),
) -> bool {
    if expected == actual {
        true
    } else {
        out.push(Violation {
            step,
            field,
            kind: ViolationKind::Dimension { expected, actual },
        });
        false
    }
}

/// Applies the step-`k` dynamics to every column: `A x_i + b`.
pub fn apply_model(model: &LinearModel, k: usize, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let step = model.step(k)?;
    if states.nrows() != step.a.ncols() {
        return Err(Error::dim("apply_model states rows", step.a.ncols(), states.nrows()));
    }
    let mut out = &step.a * states;
    for mut col in out.column_iter_mut() {
        col += &step.b;
    }
    Ok(out)
}

// JSON layout

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    state_dim: usize,
    obs_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<RawGaussian>,
    steps: Vec<RawStep>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGaussian {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    repeat: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data_sequence: Option<Vec<Vec<f64>>>,
}

fn parse_err(message: impl Into<String>) -> Error {
    Error::Parse {
        context: "model".into(),
        message: message.into(),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], field: &str, step: usize) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(parse_err(format!("ragged rows in {field} at step {step}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn matrix_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl RawModel {
    fn into_model(self) -> Result<LinearModel> {
        let m = self.state_dim;
        let initial = match self.initial {
            Some(g) => {
                let cov = matrix_from_rows(&g.cov, "initial.cov", 0)?;
                GaussianState::new(DVector::from_vec(g.mean), cov)
            }
            None => GaussianState::new(DVector::zeros(m), DMatrix::identity(m, m)),
        };
        let mut steps = Vec::new();
        for (idx, raw) in self.steps.into_iter().enumerate() {
            let entry = idx + 1;
            let a = matrix_from_rows(&raw.a, "A", entry)?;
            let h = matrix_from_rows(&raw.h, "H", entry)?;
            let r = matrix_from_rows(&raw.r, "R", entry)?;
            let b = DVector::from_vec(raw.b);
            let data: Vec<Vec<f64>> = match (raw.data, raw.data_sequence, raw.repeat) {
                (_, Some(seq), Some(n)) if seq.len() != n => {
                    return Err(parse_err(format!(
                        "entry {entry}: data_sequence has {} vectors but repeat is {n}",
                        seq.len()
                    )))
                }
                (Some(_), Some(_), _) => {
                    return Err(parse_err(format!("entry {entry}: both data and data_sequence given")))
                }
                (_, Some(seq), _) => seq,
                (Some(d), None, n) => vec![d; n.unwrap_or(1)],
                (None, None, _) => return Err(parse_err(format!("entry {entry}: missing data"))),
            };
            for d in data {
                steps.push(StepSpec {
                    a: a.clone(),
                    b: b.clone(),
                    h: h.clone(),
                    r: r.clone(),
                    data: DVector::from_vec(d),
                });
            }
        }
        Ok(LinearModel::new(m, self.obs_dim, initial, steps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(a: f64, b: f64, r: f64) -> LinearModel {
        LinearModel::new(
            1,
            1,
            GaussianState::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0)),
            vec![StepSpec {
                a: DMatrix::from_element(1, 1, a),
                b: DVector::from_element(1, b),
                h: DMatrix::from_element(1, 1, 1.0),
                r: DMatrix::from_element(1, 1, r),
                data: DVector::from_element(1, 0.0),
            }],
        )
    }

    #[test]
    fn scalar_model_is_valid() {
        assert!(validate_model(&scalar_model(2.0, 1.0, 1.0)).is_ok());
    }

    #[test]
    fn singular_r_rejected_with_step_index() {
        let mut model = LinearModel::new(
            2,
            2,
            GaussianState::new(DVector::zeros(2), DMatrix::identity(2, 2)),
            vec![StepSpec {
                a: DMatrix::identity(2, 2),
                b: DVector::zeros(2),
                h: DMatrix::identity(2, 2),
                r: DMatrix::identity(2, 2),
                data: DVector::zeros(2),
            }],
        );
        model.steps.push(model.steps[0].clone());
        model.steps[1].r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let errs = validate_model(&model).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].to_string(), "R not positive definite at step 2");
    }

    #[test]
    fn nonsymmetric_r_rejected() {
        let mut model = scalar_model(1.0, 0.0, 1.0);
        model.obs_dim = 2;
        model.steps[0].h = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        model.steps[0].data = DVector::zeros(2);
        model.steps[0].r = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 2.0]);
        let errs = validate_model(&model).unwrap_err();
        assert_eq!(errs[0].kind, ViolationKind::NotSymmetric);
        assert_eq!(errs[0].step, Some(1));
    }

    #[test]
    fn wrong_h_shape_is_dimension_mismatch() {
        let mut model = LinearModel::new(
            2,
            2,
            GaussianState::new(DVector::zeros(2), DMatrix::identity(2, 2)),
            vec![StepSpec {
                a: DMatrix::identity(2, 2),
                b: DVector::zeros(2),
                h: DMatrix::zeros(2, 3),
                r: DMatrix::identity(2, 2),
                data: DVector::zeros(2),
            }],
        );
        let errs = validate_model(&model).unwrap_err();
        assert!(matches!(errs[0].kind, ViolationKind::Dimension { .. }));
        assert_eq!(errs[0].field, "H");
        model.steps[0].h = DMatrix::zeros(2, 2);
        assert!(validate_model(&model).is_ok());
    }

    #[test]
    fn apply_scalar_affine() {
        let model = scalar_model(2.0, 1.0, 1.0);
        let out = apply_model(&model, 1, &DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert_eq!(out[(0, 0)], 7.0);
    }

    #[test]
    fn apply_identity_leaves_states() {
        let model = scalar_model(1.0, 0.0, 1.0);
        let x = DMatrix::from_row_slice(1, 3, &[1.5, -2.0, 0.25]);
        assert_eq!(apply_model(&model, 1, &x).unwrap(), x);
    }

    #[test]
    fn apply_rejects_bad_step_and_rows() {
        let model = scalar_model(1.0, 0.0, 1.0);
        let x = DMatrix::zeros(1, 2);
        assert!(matches!(apply_model(&model, 0, &x), Err(Error::InvalidStep { .. })));
        assert!(matches!(apply_model(&model, 2, &x), Err(Error::InvalidStep { .. })));
        assert!(matches!(
            apply_model(&model, 1, &DMatrix::zeros(2, 2)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn json_repeat_and_data_sequence() {
        let text = r#"{
            "state_dim": 1, "obs_dim": 1,
            "steps": [
                {"A": [[1.0]], "b": [0.0], "H": [[1.0]], "R": [[1.0]], "data": [2.0], "repeat": 2},
                {"A": [[1.0]], "b": [0.0], "H": [[1.0]], "R": [[1.0]], "repeat": 3,
                 "data_sequence": [[1.0], [2.0], [3.0]]}
            ]
        }"#;
        let model = LinearModel::from_json_str(text).unwrap();
        assert_eq!(model.num_steps(), 5);
        let data: Vec<f64> = model.steps.iter().map(|s| s.data[0]).collect();
        assert_eq!(data, vec![2.0, 2.0, 1.0, 2.0, 3.0]);
        assert_eq!(model.initial.cov, DMatrix::identity(1, 1));
    }

    #[test]
    fn json_sequence_length_mismatch_is_parse_error() {
        let text = r#"{"state_dim": 1, "obs_dim": 1, "steps": [
            {"A": [[1.0]], "b": [0.0], "H": [[1.0]], "R": [[1.0]], "repeat": 2, "data_sequence": [[1.0]]}]}"#;
        assert!(matches!(LinearModel::from_json_str(text), Err(Error::Parse { .. })));
    }

    #[test]
    fn json_round_trip() {
        let model = scalar_model(2.0, 1.0, 0.5);
        let back = LinearModel::from_json_str(&model.to_json()).unwrap();
        assert_eq!(back, model);
    }
}
