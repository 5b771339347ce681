//! Exact Kalman filter recursions.
//!
//! The forecast covariance is the covariance of the affine image,
//! `A Q A^T`. The analysis covariance uses `(I - L H) Q^f` followed by
//! explicit symmetrization. No matrix is ever inverted explicitly; the gain
//! comes from an `L D L^T` solve against the innovation covariance.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Ldlt};
use crate::model::{GaussianState, LinearModel};

/// An `m x d` gain matrix: the exact Kalman gain or an ensemble gain.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix(DMatrix<f64>);

impl GainMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gain"));
        }
        Ok(Self(entries))
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        Self(DMatrix::zeros(m, d))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl Deref for GainMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Forecast for step `k`: mean `A u + b`, covariance `A Q A^T`.
pub fn kf_forecast(prior: &GaussianState, model: &LinearModel, k: usize) -> Result<GaussianState> {
    let step = model.step(k)?;
    let m = step.a.ncols();
    if prior.mean.len() != m || prior.cov.shape() != (m, m) {
        return Err(Error::dim("kf_forecast prior", m, prior.mean.len()));
    }
    let mean = &step.a * &prior.mean + &step.b;
    let cov = symmetrize(&(&step.a * &prior.cov * step.a.transpose()));
    Ok(GaussianState::new(mean, cov))
}

/// `Q^f H^T (H Q^f H^T + R)^{-1}`, via an `L D L^T` solve of the innovation
/// covariance against `H Q^f^T` and a transpose.
pub fn kf_gain(forecast_cov: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<GainMatrix> {
    let m = forecast_cov.nrows();
    let d = h.nrows();
    if forecast_cov.shape() != (m, m) {
        return Err(Error::dim("kf_gain forecast_cov", format!("{m}x{m}"), format!("{:?}", forecast_cov.shape())));
    }
    if h.ncols() != m {
        return Err(Error::dim("kf_gain H columns", m, h.ncols()));
    }
    if r.shape() != (d, d) {
        return Err(Error::dim("kf_gain R", format!("{d}x{d}"), format!("{:?}", r.shape())));
    }
    let hq = h * forecast_cov.transpose();
    let innovation = symmetrize(&(h * forecast_cov * h.transpose() + r));
    let factor = Ldlt::new(&innovation).ok_or(Error::Factorization("innovation covariance"))?;
    let z = factor.solve(&hq);
    GainMatrix::new(z.transpose())
}

/// Analysis: `u = u^f + L (d - H u^f)`, `Q = (I - L H) Q^f`.
pub fn kf_analysis(
    forecast: &GaussianState,
    gain: &GainMatrix,
    h: &DMatrix<f64>,
    data: &DVector<f64>,
) -> Result<GaussianState> {
    let m = forecast.mean.len();
    let d = data.len();
    if h.shape() != (d, m) {
        return Err(Error::dim("kf_analysis H", format!("{d}x{m}"), format!("{:?}", h.shape())));
    }
    if gain.shape() != (m, d) {
        return Err(Error::dim("kf_analysis gain", format!("{m}x{d}"), format!("{:?}", gain.shape())));
    }
    let innovation = data - h * &forecast.mean;
    let mean = &forecast.mean + gain.matrix() * innovation;
    let i_minus_lh = DMatrix::identity(m, m) - gain.matrix() * h;
    let cov = symmetrize(&(i_minus_lh * &forecast.cov));
    Ok(GaussianState::new(mean, cov))
}

/// Output of one filtering step.
#[derive(Debug, Clone, PartialEq)]
pub struct KfStep {
    pub forecast: GaussianState,
    pub gain: GainMatrix,
    pub analysis: GaussianState,
}

/// Full KF trajectory: the initial state plus one [`KfStep`] per model step.
#[derive(Debug, Clone, PartialEq)]
pub struct KfTrajectory {
    pub initial: GaussianState,
    pub steps: Vec<KfStep>,
}

impl KfTrajectory {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Filtering distribution at step `k` (`k = 0` is the initial state).
    pub fn analysis(&self, k: usize) -> Result<&GaussianState> {
        match k {
            0 => Ok(&self.initial),
            _ => Ok(&self.step(k)?.analysis),
        }
    }

    /// Step `k >= 1`.
    pub fn step(&self, k: usize) -> Result<&KfStep> {
        if k == 0 || k > self.steps.len() {
            return Err(Error::InvalidStep {
                index: k,
                steps: self.steps.len(),
            });
        }
        Ok(&self.steps[k - 1])
    }
}

pub fn kf_run(model: &LinearModel, init: &GaussianState) -> Result<KfTrajectory> {
    let mut steps = Vec::with_capacity(model.num_steps());
    let mut current = init.clone();
    for k in 1..=model.num_steps() {
        let spec = model.step(k)?;
        let forecast = kf_forecast(&current, model, k)?;
        let gain = kf_gain(&forecast.cov, &spec.h, &spec.r)?;
        let analysis = kf_analysis(&forecast, &gain, &spec.h, &spec.data)?;
        current = analysis.clone();
        steps.push(KfStep {
            forecast,
            gain,
            analysis,
        });
    }
    Ok(KfTrajectory {
        initial: init.clone(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StepSpec;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn scalar_model(a: f64, b: f64, data: &[f64]) -> LinearModel {
        LinearModel::new(
            1,
            1,
            GaussianState::new(v1(0.0), m1(1.0)),
            data.iter()
                .map(|&d| StepSpec {
                    a: m1(a),
                    b: v1(b),
                    h: m1(1.0),
                    r: m1(1.0),
                    data: v1(d),
                })
                .collect(),
        )
    }

    #[test]
    fn scalar_forecast() {
        let model = scalar_model(2.0, 1.0, &[0.0]);
        let f = kf_forecast(&GaussianState::new(v1(3.0), m1(1.0)), &model, 1).unwrap();
        assert_eq!(f.mean[0], 7.0);
        assert_eq!(f.cov[(0, 0)], 4.0);
    }

    #[test]
    fn identity_forecast_is_prior() {
        let model = scalar_model(1.0, 0.0, &[0.0]);
        let prior = GaussianState::new(v1(-0.3), m1(2.5));
        assert_eq!(kf_forecast(&prior, &model, 1).unwrap(), prior);
    }

    #[test]
    fn scalar_gain_is_half() {
        let l = kf_gain(&m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        assert_eq!(l[(0, 0)], 0.5);
    }

    #[test]
    fn zero_forecast_cov_gives_zero_gain() {
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, 2.0]);
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let l = kf_gain(&DMatrix::zeros(3, 3), &h, &r).unwrap();
        assert_eq!(l.shape(), (3, 2));
        assert!(l.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn singular_innovation_fails() {
        assert!(matches!(
            kf_gain(&m1(0.0), &m1(1.0), &m1(0.0)),
            Err(Error::Factorization(_))
        ));
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let f = GaussianState::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::identity(2, 2));
        let h = DMatrix::from_row_slice(1, 2, &[0.5, 1.0]);
        let data = &h * &f.mean;
        let l = kf_gain(&f.cov, &h, &m1(1.0)).unwrap();
        let a = kf_analysis(&f, &l, &h, &data).unwrap();
        assert_eq!(a.mean, f.mean);
    }

    #[test]
    fn zero_gain_keeps_forecast() {
        let f = GaussianState::new(v1(0.4), m1(3.0));
        let a = kf_analysis(&f, &GainMatrix::zeros(1, 1), &m1(1.0), &v1(10.0)).unwrap();
        assert_eq!(a, f);
    }

    #[test]
    fn scalar_conjugate_update() {
        // posterior of N(0,1) prior with unit-variance datum 2: N(1, 1/2)
        let f = GaussianState::new(v1(0.0), m1(1.0));
        let l = kf_gain(&f.cov, &m1(1.0), &m1(1.0)).unwrap();
        let a = kf_analysis(&f, &l, &m1(1.0), &v1(2.0)).unwrap();
        assert_eq!(a.mean[0], 1.0);
        assert_eq!(a.cov[(0, 0)], 0.5);
    }

    #[test]
    fn empty_model_returns_initial_only() {
        let model = scalar_model(1.0, 0.0, &[]);
        let traj = kf_run(&model, &model.initial).unwrap();
        assert_eq!(traj.num_steps(), 0);
        assert_eq!(traj.analysis(0).unwrap(), &model.initial);
        assert!(traj.analysis(1).is_err());
    }

    #[test]
    fn one_step_run() {
        let model = scalar_model(1.0, 0.0, &[2.0]);
        let traj = kf_run(&model, &model.initial).unwrap();
        let a = traj.analysis(1).unwrap();
        assert!((a.mean[0] - 1.0).abs() < 1e-15);
        assert!((a.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }
}
