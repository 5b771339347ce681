//! Replicated convergence study over an ensemble-size grid, with log-log
//! rate fits.
//!
//!     cargo run --release --example convergence_study

use enkf_lab::experiment::{run_study, StudyConfig, StudySpec};
use enkf_lab::model::LinearModel;

fn main() -> enkf_lab::Result<()> {
    let model = LinearModel::load("fixtures/reference_model.json")?.validated()?;
    let spec = StudySpec::from_json_str(r#"{"seed": 3, "N_grid": [16, 64, 256, 1024], "replicates": 50}"#)?;
    let config = StudyConfig::new(model, spec, 3);
    let report = run_study(&config)?;

    for s in &report.slopes {
        println!("{} k={}: slope {:+.3} over {} points", s.key, s.k, s.fit.slope, s.fit.points);
    }
    for t in report.moment_monitor.iter().filter(|t| t.flagged) {
        println!("moment monitor flagged at k={} p={}", t.k, t.p);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}
