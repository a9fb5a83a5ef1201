//! Exact total variation, a Fréchet feature distance and the fixed-point
//! residual.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::distill::{lift_tokens, make_target, student_sample, DistillConfig};
use crate::masking::NoiseSchedule;
use crate::nn::DenoiserNet;
use crate::rng::Rng;
use crate::world::{sequence_from_index, sequence_index, SyntheticDataset};
use crate::{Error, Result, TokenSeq};

/// Largest `K^L` that [`tv_exact`] will enumerate.
pub const ENUMERATION_LIMIT: usize = 100_000;

fn space_size(data: &SyntheticDataset) -> Result<usize> {
    let size = libm::pow(data.vocab() as f64, data.len() as f64);
    if size > ENUMERATION_LIMIT as f64 {
        return Err(Error::EnumerationTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(size as usize)
}

/// `1/2 sum_z |w(z) - p(z | class)|` for weights indexed by
/// [`sequence_index`]. The weights are used as given.
pub fn tv_from_weights(data: &SyntheticDataset, weights: &[f64], class: usize) -> Result<f64> {
    let n = space_size(data)?;
    if weights.len() != n {
        return Err(Error::arg("weights", "one weight per enumerated sequence required"));
    }
    let mut total = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        let z = sequence_from_index(i, data.vocab(), data.len());
        total += libm::fabs(w - data.exact_prob(&z, class)?);
    }
    Ok(0.5 * total)
}

/// TV between the empirical distribution of `samples` and `p(. | class)`.
pub fn tv_from_samples(data: &SyntheticDataset, samples: &[TokenSeq], class: usize) -> Result<f64> {
    let n = space_size(data)?;
    if samples.is_empty() {
        return Err(Error::arg("eval.samples", "need at least one sample"));
    }
    let mut hist = vec![0.0; n];
    for z in samples {
        crate::masking::ensure_complete(z, data.vocab() as u32)?;
        if z.len() != data.len() || z.iter().any(|&t| t as usize >= data.vocab()) {
            return Err(Error::arg("samples", "sample outside the sequence space"));
        }
        hist[sequence_index(z, data.vocab())] += 1.0;
    }
    let inv = 1.0 / samples.len() as f64;
    hist.iter_mut().for_each(|h| *h *= inv);
    tv_from_weights(data, &hist, class)
}

/// Draws `n` samples for `class` from `sampler(n, rng)` and returns their TV
/// to the data distribution. Fails before sampling when the space is too
/// large to enumerate.
pub fn tv_exact(
    data: &SyntheticDataset,
    class: usize,
    n: usize,
    seed: u64,
    sampler: impl FnOnce(usize, &mut Rng) -> Result<Vec<TokenSeq>>,
) -> Result<f64> {
    space_size(data)?;
    let mut rng = Rng::seeded(seed);
    let samples = sampler(n, &mut rng)?;
    tv_from_samples(data, &samples, class)
}

/// Fréchet distance between Gaussian fits of two sample sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frechet {
    pub value: f64,
    /// A rank-deficient covariance received a 1e-6 ridge.
    pub regularized: bool,
}

fn moments(rows: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(dim);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The cross term is evaluated as `tr((A^(1/2) S_b A^(1/2))^(1/2))` with
/// clipped eigenvalues, which has the same spectrum and stays symmetric.
pub fn frechet_proxy(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Frechet> {
    let dim = a.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::arg("features", "non-empty rows of equal width required"));
    }
    if a.len() < dim + 1 || b.len() < dim + 1 {
        return Err(Error::arg(
            "eval.samples",
            alloc::format!("need at least {} samples per side", dim + 1),
        ));
    }
    let (ma, mut sa) = moments(a, dim);
    let (mb, mut sb) = moments(b, dim);
    let mut regularized = false;
    for s in [&mut sa, &mut sb] {
        let eig = SymmetricEigen::new(s.clone());
        let max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        if min <= 1e-12 * max.max(1e-300) {
            *s += DMatrix::identity(dim, dim) * 1e-6;
            regularized = true;
        }
    }
    let root_a = sym_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|&v| libm::sqrt(v.max(0.0)))
        .sum::<f64>();
    let diff = (&ma - &mb).norm_squared();
    let value = diff + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(Frechet {
        value: value.max(0.0),
        regularized,
    })
}

/// Pools `[B, T, S, F]` features over cells and flattens taps into one row
/// per sample.
pub fn pooled_rows(features: &Tensor) -> Vec<Vec<f64>> {
    let s = features.shape();
    let (b, t, cells, f) = (s[0], s[1], s[2], s[3]);
    (0..b)
        .map(|i| {
            let mut row = vec![0.0; t * f];
            for tap in 0..t {
                for c in 0..cells {
                    let at = ((i * t + tap) * cells + c) * f;
                    for k in 0..f {
                        row[tap * f + k] += features.data()[at + k] / cells as f64;
                    }
                }
            }
            row
        })
        .collect()
}

/// Mean over `n` student drafts of the slot-averaged feature distance to
/// their re-mask-and-refine targets. Classes cycle through `0..C`.
#[allow(clippy::too_many_arguments)]
pub fn fixed_point_residual(
    world: &crate::world::World,
    student: &DenoiserNet,
    teacher: &DenoiserNet,
    cfg: &DistillConfig,
    schedule: NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::arg("eval.residual_samples", "must be positive"));
    }
    let classes: Vec<usize> = (0..n).map(|i| i % world.config().classes).collect();
    let mut rng = Rng::seeded(seed);
    let mut total = 0.0;
    for chunk in classes.chunks(256) {
        let drafts = student_sample(student, chunk, cfg, schedule, &mut rng)?;
        let targets = make_target(teacher, &drafts, chunk, cfg, schedule, &mut rng, None)?;
        let x = lift_tokens(world, &drafts, chunk, cfg)?;
        let y = lift_tokens(world, &targets, chunk, cfg)?;
        let f = *x.shape().last().expect("lifted");
        let per_sample = x.numel() / (chunk.len() * f);
        for (a, b) in x.data().chunks(per_sample * f).zip(y.data().chunks(per_sample * f)) {
            let d: f64 = a
                .chunks(f)
                .zip(b.chunks(f))
                .map(|(u, v)| crate::world::euclid(u, v))
                .sum();
            total += d / per_sample as f64;
        }
    }
    Ok(total / n as f64)
}

/// Evaluation summary.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub tv_by_class: Vec<f64>,
    pub frechet: Option<Frechet>,
    pub fp_residual: Option<f64>,
    pub sample_count: usize,
    pub seed: u64,
    pub fingerprint: u64,
}

impl EvalReport {
    pub fn tv_mean(&self) -> Option<f64> {
        (!self.tv_by_class.is_empty())
            .then(|| self.tv_by_class.iter().sum::<f64>() / self.tv_by_class.len() as f64)
    }
}
