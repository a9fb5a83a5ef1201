//! Kernel drift between lifted student features and their refined targets.
//!
//! Features are `[B, T, S, F]`: batch, taps, cells, feature width. Every
//! `(tap, cell)` slot is treated independently: it has `B` anchor points
//! `X_i`, `B` targets `Y_j` and `B` negatives `X_{(j+1) mod B}`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DriftSpace {
    #[default]
    Feature,
    /// Decoder output used directly as a single tap with a single cell.
    Pixel,
}

impl DriftSpace {
    pub fn name(self) -> &'static str {
        match self {
            DriftSpace::Feature => "feature",
            DriftSpace::Pixel => "pixel",
        }
    }
}

impl core::str::FromStr for DriftSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(DriftSpace::Feature),
            "pixel" => Ok(DriftSpace::Pixel),
            other => Err(Error::arg("drift.space", format!("unknown space {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftConfig {
    pub bandwidths: Vec<f64>,
    pub eps_rms: f64,
    pub space: DriftSpace,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            bandwidths: vec![0.02, 0.05, 0.2],
            eps_rms: 1e-8,
            space: DriftSpace::Feature,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::arg("drift.bandwidths", "at least one bandwidth is required"));
        }
        for (i, &h) in self.bandwidths.iter().enumerate() {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::arg("drift.bandwidths", format!("{h} is not positive")));
            }
            if self.bandwidths[..i].contains(&h) {
                return Err(Error::arg("drift.bandwidths", format!("{h} is repeated")));
            }
        }
        if !(self.eps_rms > 0.0) {
            return Err(Error::arg("drift.eps_rms", "must be positive"));
        }
        Ok(())
    }
}

/// Doubly normalized Laplace affinities between `B` anchors and `B`
/// targets, each row-major `B x F`. Row softmax of `-|a_i - t_j| / h`, then
/// each column divided by its sum, then each row by its sum.
pub fn affinities(anchor: &[f64], targets: &[f64], width: usize, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::arg("h", format!("bandwidth {h} is not positive")));
    }
    if width == 0 || anchor.len() != targets.len() || anchor.len() % width != 0 {
        return Err(Error::ShapeMismatch {
            op: "affinities",
            lhs: vec![anchor.len()],
            rhs: vec![targets.len()],
        });
    }
    let b = anchor.len() / width;
    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let a = &anchor[i * width..(i + 1) * width];
            let t = &targets[j * width..(j + 1) * width];
            dist[i * b + j] = crate::world::euclid(a, t);
        }
    }
    Ok(normalize_kernel(&dist, b, h))
}

/// The three-stage normalization applied to a `B x B` distance matrix.
pub fn normalize_kernel(dist: &[f64], b: usize, h: f64) -> Vec<f64> {
    let mut a = vec![0.0; b * b];
    for i in 0..b {
        let row = &dist[i * b..(i + 1) * b];
        let max = row.iter().map(|d| -d / h).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..b {
            let e = libm::exp(-row[j] / h - max);
            a[i * b + j] = e;
            total += e;
        }
        for j in 0..b {
            a[i * b + j] /= total;
        }
    }
    for j in 0..b {
        let total: f64 = (0..b).map(|i| a[i * b + j]).sum();
        for i in 0..b {
            a[i * b + j] /= total;
        }
    }
    for i in 0..b {
        let total: f64 = a[i * b..(i + 1) * b].iter().sum();
        for j in 0..b {
            a[i * b + j] /= total;
        }
    }
    a
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize)> {
    if x.shape() != y.shape() || x.ndim() < 2 {
        return Err(Error::ShapeMismatch {
            op: "drift",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let b = x.shape()[0];
    let f = *x.shape().last().expect("ndim >= 2");
    if b < 2 {
        return Err(Error::arg("batch", "drift needs at least two samples for negatives"));
    }
    Ok((b, x.numel() / (b * f), f))
}

/// `V_h(X_i) = sum_j a+_ij (Y_j - X_i) - sum_j a-_ij (X_{s(j)} - X_i)` in
/// every slot, with `s(j) = (j + 1) mod B`. Same shape as `x`.
pub fn drift_vector(x: &Tensor, y: &Tensor, h: f64) -> Result<Tensor> {
    let (b, slots, f) = check_pair(x, y)?;
    let (xd, yd) = (x.data(), y.data());
    let mut v = vec![0.0; xd.len()];
    let at = |i: usize, s: usize| (i * slots + s) * f;
    let mut anchor = vec![0.0; b * f];
    let mut target = vec![0.0; b * f];
    let mut shifted = vec![0.0; b * f];
    for s in 0..slots {
        for i in 0..b {
            anchor[i * f..(i + 1) * f].copy_from_slice(&xd[at(i, s)..at(i, s) + f]);
            target[i * f..(i + 1) * f].copy_from_slice(&yd[at(i, s)..at(i, s) + f]);
            let n = (i + 1) % b;
            shifted[i * f..(i + 1) * f].copy_from_slice(&xd[at(n, s)..at(n, s) + f]);
        }
        let pos = affinities(&anchor, &target, f, h)?;
        let neg = affinities(&anchor, &shifted, f, h)?;
        for i in 0..b {
            for j in 0..b {
                let (ap, an) = (pos[i * b + j], neg[i * b + j]);
                for k in 0..f {
                    let xi = anchor[i * f + k];
                    v[at(i, s) + k] += ap * (target[j * f + k] - xi) - an * (shifted[j * f + k] - xi);
                }
            }
        }
    }
    Tensor::new(x.shape(), v)
}

/// Root mean square over slots of the per-slot vector norm.
pub fn rms_norm(v: &Tensor) -> f64 {
    let f = *v.shape().last().expect("non-scalar");
    let n = v.numel() / f;
    let total: f64 = v.data().iter().map(|a| a * a).sum();
    libm::sqrt(total / n as f64)
}

/// Loss node plus the per-bandwidth diagnostics.
#[derive(Clone, Debug)]
pub struct DriftTerms {
    pub loss: Var,
    pub normalizers: Vec<f64>,
    pub drifts: Vec<Tensor>,
}

/// `sum_h (1/Z_h) mean_slots |X - sg(X + V_h)|^2`, `Z_h` the floored RMS of
/// `|V_h|`. Only `x` carries gradient; `y` is a plain value.
pub fn drift_loss(g: &mut Graph, x: Var, y: &Tensor, cfg: &DriftConfig) -> Result<DriftTerms> {
    cfg.validate()?;
    let xv = g.value(x).clone();
    check_pair(&xv, y)?;
    let last = xv.ndim() - 1;
    let mut loss = None;
    let mut normalizers = Vec::with_capacity(cfg.bandwidths.len());
    let mut drifts = Vec::with_capacity(cfg.bandwidths.len());
    for &h in &cfg.bandwidths {
        let v = drift_vector(&xv, y, h)?;
        let z = rms_norm(&v).max(cfg.eps_rms);
        let moved: Vec<f64> = xv.data().iter().zip(v.data()).map(|(a, b)| a + b).collect();
        let target = g.constant(Tensor::new(xv.shape(), moved)?);
        let target = g.stop_gradient(target);
        let diff = g.sub(x, target)?;
        let sq = g.square(diff);
        let per_slot = g.sum(sq, last)?;
        let mean = g.mean_all(per_slot);
        let term = g.scale(mean, 1.0 / z);
        loss = Some(match loss {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
        normalizers.push(z);
        drifts.push(v);
    }
    Ok(DriftTerms {
        loss: loss.expect("validated non-empty"),
        normalizers,
        drifts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::seeded(seed);
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn equal_distances_give_uniform_affinities() {
        let a = normalize_kernel(&[1.0; 9], 3, 0.3);
        assert!(a.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let anchor = [0.0, 1.0, 5.0, 2.0];
        let targets = [1.0, 0.0, -3.0, 4.0];
        let a = affinities(&anchor, &targets, 1, 1e6).unwrap();
        assert!(a.iter().all(|v| (v - 0.25).abs() < 1e-6));
        assert!(affinities(&anchor, &targets, 1, 0.0).is_err());
    }

    #[test]
    fn three_by_three_hand_evaluation() {
        let d = [0.0, 1.0, 2.0, 1.5, 0.5, 0.25, 3.0, 0.0, 1.0];
        let h = 0.7;
        let a = normalize_kernel(&d, 3, h);
        // Direct arithmetic with no max shift.
        let mut s = [[0.0; 3]; 3];
        for i in 0..3 {
            let z: f64 = (0..3).map(|j| libm::exp(-d[i * 3 + j] / h)).sum();
            for j in 0..3 {
                s[i][j] = libm::exp(-d[i * 3 + j] / h) / z;
            }
        }
        for j in 0..3 {
            let c = s[0][j] + s[1][j] + s[2][j];
            for row in s.iter_mut() {
                row[j] /= c;
            }
        }
        for i in 0..3 {
            let r: f64 = s[i].iter().sum();
            for j in 0..3 {
                assert!((a[i * 3 + j] - s[i][j] / r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_batch_has_zero_drift_and_zero_loss() {
        let row = rand(&[1, 2, 3, 5], 1);
        let x = Tensor::new(&[4, 2, 3, 5], row.data().repeat(4)).unwrap();
        let v = drift_vector(&x, &x, 0.05).unwrap();
        assert!(v.data().iter().all(|&a| a == 0.0));
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let terms = drift_loss(&mut g, xv, &x, &DriftConfig::default()).unwrap();
        g.backward(terms.loss).unwrap();
        assert_eq!(g.value(terms.loss).item(), 0.0);
        assert!(g.grad(xv).data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn single_bandwidth_loss_equals_rms() {
        let x = rand(&[5, 2, 4, 3], 2);
        let y = rand(&[5, 2, 4, 3], 3);
        let cfg = DriftConfig {
            bandwidths: vec![0.5],
            ..DriftConfig::default()
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let terms = drift_loss(&mut g, xv, &y, &cfg).unwrap();
        let rms = rms_norm(&terms.drifts[0]);
        assert!((g.value(terms.loss).item() - rms).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_batches_and_bad_configs() {
        let x = rand(&[1, 1, 1, 3], 0);
        assert!(drift_vector(&x, &x, 0.1).is_err());
        let bad = DriftConfig {
            bandwidths: vec![0.1, 0.1],
            ..DriftConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DriftConfig {
            bandwidths: vec![-0.1],
            ..DriftConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
