#![allow(dead_code)]

use std::path::PathBuf;

use enkf_lab::model::LinearModel;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn load(name: &str) -> LinearModel {
    LinearModel::load(fixture(name)).unwrap().validated().unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// `G G^T + eps I` for a random `G`.
pub fn random_spd(rng: &mut impl Rng, n: usize, eps: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n);
    let s = &g * g.transpose() + DMatrix::identity(n, n) * eps;
    (&s + s.transpose()) * 0.5
}

/// Plain triple-loop product.
pub fn matmul_loops(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// Sequential conjugate normal-normal update in information form, for a
/// scalar model: returns `(mean, var)` of the filtering distribution after
/// every step.
pub fn scalar_bayes_chain(model: &LinearModel) -> Vec<(f64, f64)> {
    let mut mean = model.initial.mean[0];
    let mut var = model.initial.cov[(0, 0)];
    let mut out = vec![(mean, var)];
    for s in &model.steps {
        let (a, b, h, r, y) = (s.a[(0, 0)], s.b[0], s.h[(0, 0)], s.r[(0, 0)], s.data[0]);
        let prior_mean = a * mean + b;
        let prior_var = a * a * var;
        let precision = 1.0 / prior_var + h * h / r;
        var = 1.0 / precision;
        mean = var * (prior_mean / prior_var + h * y / r);
        out.push((mean, var));
    }
    out
}

/// Sample mean and `1/n` covariance of a list of vectors, in two passes.
pub fn moments(samples: &[nalgebra::DVector<f64>]) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let m = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = nalgebra::DVector::zeros(m);
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(m, m);
    for s in samples {
        let c = s - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / n)
}
