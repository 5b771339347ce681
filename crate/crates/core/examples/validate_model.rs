//! Model validation reports every violation, not just the first.

use enkf_lab::model::{validate_model, LinearModel};

fn main() -> enkf_lab::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "fixtures/invalid_r_model.json".into());
    let model = LinearModel::load(&path)?;
    match validate_model(&model) {
        Ok(()) => println!("{path}: ok"),
        Err(violations) => {
            for v in violations {
                println!("{path}: {v}");
            }
        }
    }
    Ok(())
}
