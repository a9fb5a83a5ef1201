use fpd_core::autodiff::{Graph, Tensor};
use fpd_core::drift::{affinities, drift_loss, drift_vector, DriftConfig};
use fpd_core::rng::Rng;
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

/// Straight double-loop evaluation of the drift in every slot.
fn oracle_drift(x: &Tensor, y: &Tensor, h: f64) -> Vec<f64> {
    let s = x.shape();
    let (b, f) = (s[0], s[s.len() - 1]);
    let slots = x.numel() / (b * f);
    let row = |t: &Tensor, i: usize, k: usize| -> Vec<f64> { t.data()[(i * slots + k) * f..(i * slots + k + 1) * f].to_vec() };
    let dist = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let kernel = |anchors: &[Vec<f64>], targets: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut a: Vec<Vec<f64>> = anchors
            .iter()
            .map(|p| {
                let e: Vec<f64> = targets.iter().map(|q| (-dist(p, q) / h).exp()).collect();
                let t: f64 = e.iter().sum();
                e.into_iter().map(|v| v / t).collect()
            })
            .collect();
        for j in 0..b {
            let t: f64 = (0..b).map(|i| a[i][j]).sum();
            for row in a.iter_mut() {
                row[j] /= t;
            }
        }
        for row in a.iter_mut() {
            let t: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= t);
        }
        a
    };
    let mut out = vec![0.0; x.numel()];
    for k in 0..slots {
        let xs: Vec<Vec<f64>> = (0..b).map(|i| row(x, i, k)).collect();
        let ys: Vec<Vec<f64>> = (0..b).map(|i| row(y, i, k)).collect();
        let shifted: Vec<Vec<f64>> = (0..b).map(|i| xs[(i + 1) % b].clone()).collect();
        let pos = kernel(&xs, &ys);
        let neg = kernel(&xs, &shifted);
        for i in 0..b {
            for j in 0..b {
                for c in 0..f {
                    out[(i * slots + k) * f + c] +=
                        pos[i][j] * (ys[j][c] - xs[i][c]) - neg[i][j] * (shifted[j][c] - xs[i][c]);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drift_matches_double_loop_oracle(seed in any::<u64>(), b in 2usize..5, slots in 1usize..4, f in 1usize..5, h in 0.02f64..1.0) {
        let mut rng = Rng::seeded(seed);
        let x = random(&[b, slots, f], &mut rng, 0.3);
        let y = random(&[b, slots, f], &mut rng, 0.3);
        let v = drift_vector(&x, &y, h).unwrap();
        for (a, o) in v.data().iter().zip(oracle_drift(&x, &y, h)) {
            prop_assert!((a - o).abs() < 1e-12, "{a} vs {o}");
        }
    }

    #[test]
    fn affinity_rows_sum_to_one(seed in any::<u64>(), b in 1usize..8, f in 1usize..6, h in 0.01f64..2.0) {
        let mut rng = Rng::seeded(seed);
        let a: Vec<f64> = (0..b * f).map(|_| rng.normal()).collect();
        let t: Vec<f64> = (0..b * f).map(|_| rng.normal()).collect();
        let k = affinities(&a, &t, f, h).unwrap();
        for row in k.chunks(b) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gradient_equals_scaled_negative_drift(seed in any::<u64>(), b in 2usize..6, slots in 1usize..4, f in 2usize..5) {
        let mut rng = Rng::seeded(seed);
        let x = random(&[b, slots, f], &mut rng, 0.3);
        let y = random(&[b, slots, f], &mut rng, 0.3);
        let cfg = DriftConfig::default();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let terms = drift_loss(&mut g, xv, &y, &cfg).unwrap();
        g.backward(terms.loss).unwrap();
        let grad = g.grad(xv);
        let n = (b * slots) as f64;
        let mut expected = vec![0.0; x.numel()];
        for &h in &cfg.bandwidths {
            let v = oracle_drift(&x, &y, h);
            let rms = (v.iter().map(|a| a * a).sum::<f64>() / n).sqrt().max(cfg.eps_rms);
            for (e, a) in expected.iter_mut().zip(&v) {
                *e -= 2.0 * a / (rms * n);
            }
        }
        for (a, e) in grad.data().iter().zip(&expected) {
            prop_assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
    }

    #[test]
    fn drift_is_permutation_equivariant(seed in any::<u64>(), b in 2usize..6, f in 1usize..4) {
        let mut rng = Rng::seeded(seed);
        let x = random(&[b, 2, f], &mut rng, 0.5);
        let y = random(&[b, 2, f], &mut rng, 0.5);
        let perm = rng.choose(b, b);
        let permute = |t: &Tensor| {
            let w = 2 * f;
            let mut d = Vec::with_capacity(t.numel());
            for &p in &perm {
                d.extend_from_slice(&t.data()[p * w..(p + 1) * w]);
            }
            Tensor::new(t.shape(), d).unwrap()
        };
        let v = drift_vector(&x, &y, 0.2).unwrap();
        let vp = drift_vector(&permute(&x), &permute(&y), 0.2).unwrap();
        for (a, e) in vp.data().iter().zip(permute(&v).data()) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_matched_batch_is_a_fixed_point(seed in any::<u64>(), b in 2usize..6, f in 1usize..5) {
        let mut rng = Rng::seeded(seed);
        let one = random(&[1, 1, f], &mut rng, 1.0);
        let x = Tensor::from_fn(&[b, 1, f], |i| one.data()[i % f]);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let terms = drift_loss(&mut g, xv, &x, &DriftConfig::default()).unwrap();
        prop_assert_eq!(g.value(terms.loss).item(), 0.0);
    }
}
