//! Every Gaussian draw is addressed by a key, so results do not depend on
//! generation order or on how many members exist.

use enkf_lab::ensemble::{gaussian_draw, init_ensemble};
use enkf_lab::model::GaussianState;
use enkf_lab::rng::DrawKey;
use nalgebra::{DMatrix, DVector};

fn main() -> enkf_lab::Result<()> {
    let mean = DVector::from_vec(vec![1.0, -1.0]);
    let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);

    let key = DrawKey::data(42, 3, 1, 7);
    let a = gaussian_draw(&key, &mean, &cov)?;
    let b = gaussian_draw(&key, &mean, &cov)?;
    assert_eq!(a, b);
    println!("{key:?} -> {:.6?}", a.as_slice());

    // member i of a small ensemble equals member i of a large one
    let init = GaussianState::new(mean, cov);
    let small = init_ensemble(42, 0, 4, &init)?;
    let large = init_ensemble(42, 0, 10_000, &init)?;
    for i in 0..small.size() {
        assert_eq!(small.member(i), large.member(i));
    }
    println!("first 4 of 10000 members match the 4-member ensemble");
    Ok(())
}
