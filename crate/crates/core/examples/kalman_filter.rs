//! Exact Kalman filter on a model file.
//!
//!     cargo run --example kalman_filter -- fixtures/reference_model.json

use enkf_lab::kf::kf_run;
use enkf_lab::model::LinearModel;

fn main() -> enkf_lab::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "fixtures/scalar_model.json".into());
    let model = LinearModel::load(&path)?.validated()?;
    let traj = kf_run(&model, &model.initial)?;

    println!("{path}: m={} d={} K={}", model.state_dim, model.obs_dim, model.num_steps());
    for k in 0..=traj.num_steps() {
        let a = traj.analysis(k)?;
        println!("k={k} mean={:.6?} trace(Q)={:.6}", a.mean.as_slice(), a.cov.trace());
    }
    Ok(())
}
