//! Perturbed-observation EnKF and the coupled reference ensemble.
//!
//! The EnKF ensemble `X` and the reference ensemble `U` start from the same
//! initial draws and consume the same perturbed data at every step. `X` is
//! updated with the ensemble gain `K_N` built from `C(X^f)`, `U` with the
//! exact Kalman gain `L`. Because everything else is shared, `X_1 - U_1`
//! isolates the error the sample covariance introduces.

use nalgebra::DMatrix;

use crate::ensemble::{init_ensemble, perturb_data, sample_cov, Ensemble};
use crate::error::{Error, Result};
use crate::kf::{kf_gain, kf_run, GainMatrix, KfTrajectory};
use crate::model::{apply_model, LinearModel};

/// Forecast every member through the step-`k` dynamics.
pub fn enkf_forecast(model: &LinearModel, k: usize, x: &Ensemble) -> Result<Ensemble> {
    Ensemble::new(apply_model(model, k, x.members())?)
}

/// `K_N = Q_N H^T (H Q_N H^T + R)^{-1}`; same solve as the exact gain.
pub fn ensemble_gain(q_n: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<GainMatrix> {
    kf_gain(q_n, h, r)
}

/// `X = X^f + K (D - H X^f)`, all members at once.
pub fn enkf_analysis(xf: &Ensemble, d: &Ensemble, gain: &GainMatrix, h: &DMatrix<f64>) -> Result<Ensemble> {
    if xf.size() != d.size() {
        return Err(Error::dim("analysis member count", xf.size(), d.size()));
    }
    if h.shape() != (d.dim(), xf.dim()) {
        return Err(Error::dim(
            "analysis H",
            format!("{}x{}", d.dim(), xf.dim()),
            format!("{:?}", h.shape()),
        ));
    }
    if gain.shape() != (xf.dim(), d.dim()) {
        return Err(Error::dim(
            "analysis gain",
            format!("{}x{}", xf.dim(), d.dim()),
            format!("{:?}", gain.shape()),
        ));
    }
    let innovation = d.members() - h * xf.members();
    Ensemble::new(xf.members() + gain.matrix() * innovation)
}

/// Reference update with the exact gain `L`. Same formula as [`enkf_analysis`].
pub fn reference_analysis(uf: &Ensemble, d: &Ensemble, gain: &GainMatrix, h: &DMatrix<f64>) -> Result<Ensemble> {
    enkf_analysis(uf, d, gain, h)
}

/// The pair `(X_N^(k), U_N^(k))` after step `k`, with the gains and forecast
/// ensembles that produced it. At `k = 0` only the ensembles are set.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub step: usize,
    pub enkf: Ensemble,
    pub reference: Ensemble,
    pub enkf_forecast: Option<Ensemble>,
    pub reference_forecast: Option<Ensemble>,
    pub ensemble_gain: Option<GainMatrix>,
    pub exact_gain: Option<GainMatrix>,
}

impl CoupledState {
    pub fn initial(x0: Ensemble) -> Self {
        Self {
            step: 0,
            reference: x0.clone(),
            enkf: x0,
            enkf_forecast: None,
            reference_forecast: None,
            ensemble_gain: None,
            exact_gain: None,
        }
    }

    pub fn size(&self) -> usize {
        self.enkf.size()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GainCovariance {
    Sample,
    #[cfg(feature = "test-hooks")]
    ExactForecast,
}

/// Runs coupled EnKF/reference trajectories for one model and seed. The KF
/// trajectory supplying `L^(k)` is computed once here and shared by every
/// replicate.
#[derive(Debug, Clone)]
pub struct CoupledFilter<'a> {
    model: &'a LinearModel,
    kf: KfTrajectory,
    seed: u64,
    covariance: GainCovariance,
}

impl<'a> CoupledFilter<'a> {
    pub fn new(model: &'a LinearModel, seed: u64) -> Result<Self> {
        let kf = kf_run(model, &model.initial)?;
        Ok(Self {
            model,
            kf,
            seed,
            covariance: GainCovariance::Sample,
        })
    }

    /// Builds the ensemble gain from the exact forecast covariance instead of
    /// `C(X^f)`, which makes `X` and `U` coincide.
    #[cfg(feature = "test-hooks")]
    pub fn with_exact_forecast_covariance(mut self) -> Self {
        self.covariance = GainCovariance::ExactForecast;
        self
    }

    pub fn model(&self) -> &LinearModel {
        self.model
    }

    pub fn kf(&self) -> &KfTrajectory {
        &self.kf
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn init(&self, replicate: u64, n: usize) -> Result<CoupledState> {
        Ok(CoupledState::initial(init_ensemble(
            self.seed,
            replicate,
            n,
            &self.model.initial,
        )?))
    }

    /// Advances both ensembles by one step using a single perturbed-data draw.
    pub fn step(&self, state: &CoupledState, replicate: u64) -> Result<CoupledState> {
        let k = state.step + 1;
        let spec = self.model.step(k)?;
        let n = state.size();
        let d = perturb_data(self.seed, replicate, k, n, &spec.data, &spec.r)?;

        let xf = enkf_forecast(self.model, k, &state.enkf)?;
        let uf = enkf_forecast(self.model, k, &state.reference)?;

        let q_n = match self.covariance {
            GainCovariance::Sample => sample_cov(&xf),
            #[cfg(feature = "test-hooks")]
            GainCovariance::ExactForecast => self.kf.step(k)?.forecast.cov.clone(),
        };
        let k_n = ensemble_gain(&q_n, &spec.h, &spec.r)?;
        let l = self.kf.step(k)?.gain.clone();

        let x = enkf_analysis(&xf, &d, &k_n, &spec.h)?;
        let u = reference_analysis(&uf, &d, &l, &spec.h)?;
        Ok(CoupledState {
            step: k,
            enkf: x,
            reference: u,
            enkf_forecast: Some(xf),
            reference_forecast: Some(uf),
            ensemble_gain: Some(k_n),
            exact_gain: Some(l),
        })
    }

    /// Calls `visit` on the initial state and on each subsequent state.
    pub fn run_with<F>(&self, replicate: u64, n: usize, mut visit: F) -> Result<()>
    where
        F: FnMut(&CoupledState) -> Result<()>,
    {
        let mut state = self.init(replicate, n)?;
        visit(&state)?;
        for _ in 0..self.model.num_steps() {
            state = self.step(&state, replicate)?;
            visit(&state)?;
        }
        Ok(())
    }

    /// All states `k = 0..=K`.
    pub fn run(&self, replicate: u64, n: usize) -> Result<Vec<CoupledState>> {
        let mut out = Vec::with_capacity(self.model.num_steps() + 1);
        self.run_with(replicate, n, |s| {
            out.push(s.clone());
            Ok(())
        })?;
        Ok(out)
    }
}

/// One coupled step. Recomputes the KF trajectory; prefer [`CoupledFilter`]
/// when stepping repeatedly.
pub fn coupled_step(state: &CoupledState, model: &LinearModel, seed: u64, replicate: u64) -> Result<CoupledState> {
    CoupledFilter::new(model, seed)?.step(state, replicate)
}

pub fn coupled_run(model: &LinearModel, seed: u64, replicate: u64, n: usize) -> Result<Vec<CoupledState>> {
    CoupledFilter::new(model, seed)?.run(replicate, n)
}
