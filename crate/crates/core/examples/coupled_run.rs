//! One coupled run: the EnKF ensemble next to a reference ensemble updated
//! with the exact gain from the same initial draws and data perturbations.
//!
//!     cargo run --example coupled_run -- 500

use enkf_lab::enkf::CoupledFilter;
use enkf_lab::ensemble::{sample_cov, sample_mean};
use enkf_lab::model::LinearModel;

fn main() -> enkf_lab::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let model = LinearModel::load("fixtures/reference_model.json")?.validated()?;
    let filter = CoupledFilter::new(&model, 0)?;

    filter.run_with(0, n, |state| {
        let k = state.step;
        let truth = filter.kf().analysis(k)?;
        let mean_err = (sample_mean(&state.enkf) - &truth.mean).norm();
        let cov_err = (sample_cov(&state.enkf) - &truth.cov).norm();
        let member_gap = (state.enkf.members() - state.reference.members()).column(0).norm();
        let gain_gap = match (&state.ensemble_gain, &state.exact_gain) {
            (Some(g), Some(l)) => format!("{:.4e}", (g.matrix() - l.matrix()).norm()),
            _ => "-".into(),
        };
        println!("k={k} N={n} |mean err|={mean_err:.4e} |cov err|={cov_err:.4e} |X1-U1|={member_gap:.4e} |K-L|={gain_gap}");
        Ok(())
    })
}
