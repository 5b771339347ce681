//! Ensembles stored as `m x N` matrices with members as columns, their
//! sample statistics, and keyed Gaussian sampling.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::format::fmt_f64;
use crate::linalg::{self, symmetrize};
use crate::model::GaussianState;
use crate::rng::DrawKey;

/// Jitter scales tried, in order, when a covariance is only semidefinite.
const JITTER_SCALES: [f64; 3] = [1e-14, 1e-12, 1e-10];

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    /// Wraps an `m x N` matrix. Requires `N >= 2` and finite entries.
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::TooFewMembers(members.ncols()));
        }
        if members.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("ensemble"));
        }
        Ok(Self { members })
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        if columns.len() < 2 {
            return Err(Error::TooFewMembers(columns.len()));
        }
        Self::new(DMatrix::from_columns(columns))
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    /// State dimension `m`.
    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    /// Member count `N`.
    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.members.column(i).into_owned()
    }

    /// Stacked ensemble `[X; Y]`: members concatenated vertically.
    pub fn stack(top: &Ensemble, bottom: &Ensemble) -> Result<Ensemble> {
        if top.size() != bottom.size() {
            return Err(Error::dim("stack member count", top.size(), bottom.size()));
        }
        let (m1, m2, n) = (top.dim(), bottom.dim(), top.size());
        let mut out = DMatrix::zeros(m1 + m2, n);
        out.view_mut((0, 0), (m1, n)).copy_from(&top.members);
        out.view_mut((m1, 0), (m2, n)).copy_from(&bottom.members);
        Ensemble::new(out)
    }

    /// Members reordered so that column `j` of the result is column `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Ensemble {
        assert_eq!(perm.len(), self.size(), "permutation length");
        let cols: Vec<_> = perm.iter().map(|&p| self.members.column(p)).collect();
        Ensemble {
            members: DMatrix::from_columns(&cols),
        }
    }

    /// Binary layout: `m` and `N` as little-endian u64, then the entries in
    /// column-major order as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&(self.size() as u64).to_le_bytes())?;
        for x in self.members.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Ensemble> {
        let parse = |e: std::io::Error| Error::Parse {
            context: "ensemble binary".into(),
            message: e.to_string(),
        };
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(parse)?;
        let m = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(parse)?;
        let n = u64::from_le_bytes(word) as usize;
        let len = m.checked_mul(n).ok_or_else(|| Error::Parse {
            context: "ensemble binary".into(),
            message: format!("header {m}x{n} overflows"),
        })?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word).map_err(parse)?;
            data.push(f64::from_le_bytes(word));
        }
        Ensemble::new(DMatrix::from_vec(m, n, data))
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_binary(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Ensemble> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(std::io::BufReader::new(file))
    }

    /// CSV with one member per row and columns `x0..x{m-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::result::Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record((0..self.dim()).map(|j| format!("x{j}")))?;
        for col in self.members.column_iter() {
            out.write_record(col.iter().map(|&x| fmt_f64(x)))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `(1/N) sum_i x_i`, summed left to right over columns.
pub fn sample_mean(x: &Ensemble) -> DVector<f64> {
    let mut sum = DVector::zeros(x.dim());
    for col in x.members.column_iter() {
        sum += col;
    }
    sum / x.size() as f64
}

/// Ensemble sample covariance `C(X) = mean(x_i x_i^T) - xbar xbar^T`, with
/// the `1/N` normalization. Evaluated in the algebraically identical
/// centered form `(1/N) sum_i (x_i - xbar)(x_i - xbar)^T` to avoid
/// cancellation, then symmetrized.
pub fn sample_cov(x: &Ensemble) -> DMatrix<f64> {
    let m = x.dim();
    let mean = sample_mean(x);
    let mut acc = DMatrix::zeros(m, m);
    let mut centered = DVector::zeros(m);
    for col in x.members.column_iter() {
        centered.copy_from(&col);
        centered -= &mean;
        for j in 0..m {
            let cj = centered[j];
            for i in 0..=j {
                acc[(i, j)] += centered[i] * cj;
            }
        }
    }
    acc /= x.size() as f64;
    for j in 0..m {
        for i in 0..j {
            acc[(j, i)] = acc[(i, j)];
        }
    }
    symmetrize(&acc)
}

/// Sampler for `N(mean, cov)` with a fixed lower-triangular factor of `cov`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    /// Factors `cov` by Cholesky. Semidefinite inputs retry with jitter
    /// `eps * trace(cov) / m * I` for `eps` in `1e-14, 1e-12, 1e-10`; the zero
    /// matrix gets the zero factor.
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if cov.shape() != (m, m) {
            return Err(Error::dim("gaussian covariance", format!("{m}x{m}"), format!("{:?}", cov.shape())));
        }
        let cov = symmetrize(cov);
        if cov.iter().all(|&x| x == 0.0) {
            return Ok(Self {
                mean,
                factor: DMatrix::zeros(m, m),
            });
        }
        if let Some(ch) = linalg::cholesky(&cov) {
            return Ok(Self { mean, factor: ch.l() });
        }
        let scale = cov.trace() / m as f64;
        if scale > 0.0 {
            for eps in JITTER_SCALES {
                let jittered = &cov + DMatrix::identity(m, m) * (eps * scale);
                if let Some(ch) = linalg::cholesky(&jittered) {
                    return Ok(Self { mean, factor: ch.l() });
                }
            }
        }
        Err(Error::Factorization("gaussian covariance"))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `mean + G z` with `z` standard normal from the key's stream.
    pub fn draw(&self, key: &DrawKey) -> DVector<f64> {
        let mut rng = key.stream();
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * z
    }
}

/// A single keyed draw from `N(mean, cov)`.
pub fn gaussian_draw(key: &DrawKey, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(GaussianSampler::new(mean.clone(), cov)?.draw(key))
}

fn keyed_ensemble(n: usize, sampler: &GaussianSampler, key: impl Fn(u64) -> DrawKey) -> Result<Ensemble> {
    if n < 2 {
        return Err(Error::TooFewMembers(n));
    }
    let mut members = DMatrix::zeros(sampler.dim(), n);
    for i in 0..n {
        members.set_column(i, &sampler.draw(&key(i as u64)));
    }
    Ensemble::new(members)
}

/// Initial ensemble: column `i` is the `Init` draw for member `i`. Any
/// larger ensemble with the same seed and replicate starts with these columns.
pub fn init_ensemble(seed: u64, replicate: u64, n: usize, init: &GaussianState) -> Result<Ensemble> {
    let sampler = GaussianSampler::new(init.mean.clone(), &init.cov)?;
    keyed_ensemble(n, &sampler, |i| DrawKey::init(seed, replicate, i))
}

/// Perturbed data `D_i ~ N(d, R)` for step `k >= 1`; same prefix property.
pub fn perturb_data(
    seed: u64,
    replicate: u64,
    k: usize,
    n: usize,
    data: &DVector<f64>,
    r: &DMatrix<f64>,
) -> Result<Ensemble> {
    if k == 0 {
        return Err(Error::InvalidStep { index: 0, steps: 0 });
    }
    let sampler = GaussianSampler::new(data.clone(), r)?;
    keyed_ensemble(n, &sampler, |i| DrawKey::data(seed, replicate, k as u64, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(xs: &[f64]) -> Ensemble {
        Ensemble::new(DMatrix::from_row_slice(1, xs.len(), xs)).unwrap()
    }

    #[test]
    fn single_member_rejected() {
        assert!(matches!(Ensemble::new(DMatrix::zeros(3, 1)), Err(Error::TooFewMembers(1))));
        let init = GaussianState::new(DVector::zeros(1), DMatrix::identity(1, 1));
        assert!(init_ensemble(0, 0, 1, &init).is_err());
    }

    #[test]
    fn midpoint_mean_and_cov() {
        let x = scalar(&[0.0, 2.0]);
        assert_eq!(sample_mean(&x)[0], 1.0);
        assert_eq!(sample_cov(&x)[(0, 0)], 1.0);
    }

    #[test]
    fn constant_ensemble() {
        let v = DVector::from_vec(vec![1.5, -2.0, 3.25]);
        let x = Ensemble::from_columns(&vec![v.clone(); 5]).unwrap();
        assert_eq!(sample_mean(&x), v);
        assert!(sample_cov(&x).iter().all(|&c| c == 0.0));
    }

    #[test]
    fn naive_mean_oracle() {
        let x = Ensemble::new(DMatrix::from_fn(3, 7, |i, j| ((i * 7 + j) as f64).sin() * 3.0)).unwrap();
        let mean = sample_mean(&x);
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..7 {
                s += x.members()[(i, j)];
            }
            assert!((mean[i] - s / 7.0).abs() < 1e-14);
        }
    }

    #[test]
    fn raw_moment_formula_agrees() {
        let x = Ensemble::new(DMatrix::from_fn(3, 9, |i, j| ((i + 2 * j) as f64).cos())).unwrap();
        let mean = sample_mean(&x);
        let mut raw = DMatrix::zeros(3, 3);
        for j in 0..9 {
            let c = x.member(j);
            raw += &c * c.transpose();
        }
        raw /= 9.0;
        raw -= &mean * mean.transpose();
        assert!((sample_cov(&x) - raw).abs().max() < 1e-14);
    }

    #[test]
    fn zero_cov_draw_is_mean() {
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let d = gaussian_draw(&DrawKey::init(1, 0, 0), &mean, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(d, mean);
    }

    #[test]
    fn singular_cov_uses_jitter() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = GaussianSampler::new(DVector::zeros(2), &cov).unwrap();
        let g = s.factor();
        assert!((g * g.transpose() - &cov).abs().max() < 1e-6);
    }

    #[test]
    fn indefinite_cov_fails() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            GaussianSampler::new(DVector::zeros(2), &cov),
            Err(Error::Factorization(_))
        ));
    }

    #[test]
    fn same_key_same_bits() {
        let mean = DVector::from_vec(vec![0.3, -1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let key = DrawKey::data(5, 1, 3, 17);
        let a = gaussian_draw(&key, &mean, &cov).unwrap();
        let b = gaussian_draw(&key, &mean, &cov).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn degenerate_prior_gives_identical_members() {
        let init = GaussianState::new(DVector::from_vec(vec![1.0, -1.0]), DMatrix::zeros(2, 2));
        let x = init_ensemble(3, 0, 6, &init).unwrap();
        for j in 0..6 {
            assert_eq!(x.member(j), init.mean);
        }
    }

    #[test]
    fn perturb_rejects_step_zero() {
        let r = DMatrix::identity(1, 1);
        assert!(perturb_data(0, 0, 0, 4, &DVector::zeros(1), &r).is_err());
    }

    #[test]
    fn stack_and_permute() {
        let x = scalar(&[1.0, 2.0, 3.0]);
        let y = scalar(&[4.0, 5.0, 6.0]);
        let s = Ensemble::stack(&x, &y).unwrap();
        assert_eq!(s.members(), &DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = s.permuted(&[2, 0, 1]);
        assert_eq!(p.member(0), s.member(2));
        assert!(Ensemble::stack(&x, &scalar(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn csv_has_one_row_per_member() {
        let x = Ensemble::new(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let mut buf = Vec::new();
        x.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "x0,x1");
        assert_eq!(lines[1], "1.0000000000000000e0,4.0000000000000000e0");
    }

    #[test]
    fn truncated_binary_is_parse_error() {
        let x = scalar(&[1.0, 2.0]);
        let mut buf = Vec::new();
        x.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 16);
        buf.truncate(20);
        assert!(matches!(Ensemble::read_binary(&buf[..]), Err(Error::Parse { .. })));
    }
}
