use fpd_core::metrics::{frechet_proxy, tv_exact, tv_from_samples};
use fpd_core::rng::Rng;
use fpd_core::world::{sequence_from_index, SyntheticDataset, World, WorldConfig};
use proptest::prelude::*;

fn rows(n: usize, dim: usize, rng: &mut Rng, shift: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|k| rng.normal() * (1.0 + k as f64 * 0.3) + shift).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tv_is_invariant_under_consistent_relabeling(seed in 0u64..500, rho in 0.01f64..0.5, n in 1usize..400) {
        let w = World::generate(&WorldConfig { seed, rho, ..WorldConfig::enumeration() }).unwrap();
        let data = w.dataset();
        let mut rng = Rng::seeded(seed);
        let perm = rng.choose(3, 3);
        let relabel = |z: &[u32]| -> Vec<u32> { z.iter().map(|&t| perm[t as usize] as u32).collect() };
        let templates: Vec<Vec<Vec<u32>>> = (0..data.classes())
            .map(|c| data.templates(c).unwrap().iter().map(|z| relabel(z)).collect())
            .collect();
        let moved = SyntheticDataset::new(3, 4, rho, templates).unwrap();
        for c in 0..data.classes() {
            // A deliberately imperfect sampler: data mixed with uniform noise.
            let samples: Vec<Vec<u32>> = (0..n)
                .map(|_| {
                    if rng.uniform() < 0.3 {
                        sequence_from_index(rng.below(81), 3, 4)
                    } else {
                        w.sample_data(c, 1, &mut rng).unwrap().remove(0)
                    }
                })
                .collect();
            let mapped: Vec<Vec<u32>> = samples.iter().map(|z| relabel(z)).collect();
            let a = tv_from_samples(data, &samples, c).unwrap();
            let b = tv_from_samples(&moved, &mapped, c).unwrap();
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn frechet_is_symmetric(seed in any::<u64>(), dim in 1usize..6, shift in -2.0f64..2.0) {
        let mut rng = Rng::seeded(seed);
        let a = rows(40, dim, &mut rng, 0.0);
        let b = rows(30, dim, &mut rng, shift);
        let ab = frechet_proxy(&a, &b).unwrap().value;
        let ba = frechet_proxy(&b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        prop_assert!(ab >= 0.0);
    }
}

#[test]
fn frechet_matches_closed_form_for_diagonal_gaussians() {
    // Two exact point sets with diagonal covariance: the distance reduces to
    // |mu_a - mu_b|^2 + sum_k (s_a,k - s_b,k)^2.
    let square = |s: f64, m: f64| -> Vec<Vec<f64>> {
        vec![vec![m + s, m + s], vec![m + s, m - s], vec![m - s, m + s], vec![m - s, m - s]]
    };
    let a = square(1.0, 0.0);
    let b = square(2.0, 1.0);
    // Sample variance with n - 1 = 3: s^2 * 4 / 3.
    let sa = (4.0f64 / 3.0).sqrt();
    let sb = 2.0 * sa;
    let expected = 2.0 + 2.0 * (sa - sb).powi(2);
    let f = frechet_proxy(&a, &b).unwrap();
    assert!(!f.regularized);
    assert!((f.value - expected).abs() < 1e-9, "{} vs {expected}", f.value);
}

#[test]
fn oversized_space_fails_before_sampling() {
    let w = World::generate(&WorldConfig::default()).unwrap();
    let err = tv_exact(w.dataset(), 0, 10, 0, |_, _| panic!("sampler must not run")).unwrap_err();
    assert!(err.to_string().contains("too large"));
}
