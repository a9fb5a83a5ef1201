use fpd_core::masking::{corrupt, init_draft, mask_count, remask, select_top_confidence, NoiseSchedule};
use fpd_core::rng::Rng;
use proptest::prelude::*;

const MASK: u32 = 7;

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..MASK, 1..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn schedules_are_monotone_bounded_and_invertible(t in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        for s in [NoiseSchedule::Linear, NoiseSchedule::Cosine] {
            let (a, b) = (s.gamma(t.min(u)), s.gamma(t.max(u)));
            prop_assert!((0.0..=1.0).contains(&a) && a <= b);
            prop_assert!((s.gamma(s.inverse(b)) - b).abs() < 1e-8);
        }
    }

    #[test]
    fn corrupt_never_changes_unmasked_tokens(z in tokens(), t in 0.0f64..=1.0, seed in any::<u64>()) {
        let s = corrupt(&z, t, NoiseSchedule::Cosine, MASK, &mut Rng::seeded(seed)).unwrap();
        for (i, (&a, &b)) in z.iter().zip(s.tokens()).enumerate() {
            prop_assert!(b == a || b == MASK);
            prop_assert_eq!(b == MASK, s.mask_set().contains(&i));
        }
    }

    #[test]
    fn remask_masks_exactly_ceil_r_l_and_reveal_restores(z in tokens(), r in 0.001f64..0.999, seed in any::<u64>()) {
        let mut s = remask(&z, r, MASK, &mut Rng::seeded(seed)).unwrap();
        let l = z.len();
        let expected = ((r * l as f64 - 1e-9).ceil() as usize).clamp(1, l);
        prop_assert_eq!(s.mask_set().len(), expected);
        prop_assert_eq!(mask_count(r, l), expected);
        for p in s.mask_set().to_vec() {
            s.reveal(p, z[p]).unwrap();
        }
        prop_assert_eq!(s.tokens(), &z[..]);
    }

    #[test]
    fn init_draft_has_the_requested_mask_count(len in 1usize..24, r in 0.01f64..=1.0, seed in any::<u64>()) {
        let s = init_draft(r, len, MASK as usize, &mut Rng::seeded(seed)).unwrap();
        prop_assert_eq!(s.mask_set().len(), mask_count(r, len));
        prop_assert!(s.tokens().iter().all(|&t| t <= MASK));
    }

    #[test]
    fn top_confidence_is_deterministic_and_maximal(
        conf in prop::collection::vec(prop_oneof![Just(0.5f64), 0.0f64..1.0], 1..16),
        keep_frac in 0.0f64..=1.0,
    ) {
        let mask_set: Vec<usize> = (0..conf.len()).filter(|i| i % 3 != 1).collect();
        let keep = (keep_frac * mask_set.len() as f64).floor() as usize;
        let a = select_top_confidence(&conf, &mask_set, keep).unwrap();
        prop_assert_eq!(&a, &select_top_confidence(&conf, &mask_set, keep).unwrap());
        prop_assert_eq!(a.len(), keep);
        // Brute-force oracle: sort by (-confidence, index).
        let mut order = mask_set.clone();
        order.sort_by(|&x, &y| conf[y].partial_cmp(&conf[x]).unwrap().then(x.cmp(&y)));
        let mut oracle = order[..keep].to_vec();
        oracle.sort();
        prop_assert_eq!(a, oracle);
    }
}

#[test]
fn cosine_and_linear_meet_at_the_ends_only() {
    let (c, l) = (NoiseSchedule::Cosine, NoiseSchedule::Linear);
    for t in [0.0, 1.0] {
        assert_eq!(c.gamma(t), l.gamma(t));
    }
    assert!((c.gamma(0.5) - (1.0 - std::f64::consts::FRAC_PI_4.cos())).abs() < 1e-15);
    assert!((c.gamma(0.5) - l.gamma(0.5)).abs() > 0.2);
}
