//! Randomized invariant checks over the estimators and fit metrics.

use battid::evalkit::bfr;
use battid::signals::{add_noise, pulse_train, SampledSignal, SegmentPlan};
use battid::sre::{sre_identify_segment1, sre_simulate_segment};
use battid::warburg::warburg_impulse;
use proptest::prelude::*;

const TS: f64 = 0.008;

fn test_current(n: usize) -> SampledSignal {
    pulse_train(0.75, 2.0, 2.0, n as f64 * TS, TS).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// BFR of a signal against itself is exactly 100 for any non-constant signal.
    #[test]
    fn bfr_self_is_hundred(seed in any::<u64>()) {
        let base = test_current(500);
        let v = add_noise(&base, 10.0, seed).unwrap();
        prop_assert_eq!(bfr(v.values(), v.values()).unwrap(), 100.0);
    }

    /// BFR is invariant under a common affine change of units.
    #[test]
    fn bfr_is_affine_invariant(
        scale in prop_oneof![(-50.0..-0.1f64), (0.1..50.0f64)],
        offset in -10.0..10.0f64,
        seed in any::<u64>(),
    ) {
        let base = test_current(500);
        let r = add_noise(&base, 20.0, seed).unwrap();
        let s = add_noise(&base, 10.0, seed ^ 0x5eed).unwrap();
        let map = |x: &[f64]| x.iter().map(|v| scale * v + offset).collect::<Vec<_>>();
        let plain = bfr(r.values(), s.values()).unwrap();
        let mapped = bfr(&map(r.values()), &map(s.values())).unwrap();
        prop_assert!((plain - mapped).abs() < 1e-8, "{plain} vs {mapped}");
    }

    /// Series-resistance identification recovers whatever parameters generated
    /// the record, across the physical range.
    #[test]
    fn sre_round_trip_recovers_params(
        c0 in 500.0..10_000.0f64,
        r0 in 1e-3..1.0f64,
        ocv0 in 2.5..4.5f64,
    ) {
        let current = test_current(2_000);
        let (v, _) = sre_simulate_segment(c0, r0, current.values(), TS, ocv0);
        let voltage = current.with_values(v).unwrap();
        let fit = sre_identify_segment1(&current, &voltage).unwrap();
        prop_assert!((fit.params.c0 / c0 - 1.0).abs() < 1e-6);
        prop_assert!((fit.params.r0 / r0 - 1.0).abs() < 1e-6);
        prop_assert!((fit.params.ocv0.unwrap() - ocv0).abs() < 1e-6);
    }

    /// The diffusion impulse sequence starts at zero, scales linearly with
    /// its gain, and is positive and strictly decreasing from sample 1 on.
    #[test]
    fn warburg_impulse_shape(aw in 1e-4..1.0f64) {
        let w = warburg_impulse(aw, TS, 200).unwrap();
        let unit = warburg_impulse(1.0, TS, 200).unwrap();
        prop_assert_eq!(w[0], 0.0);
        for k in 1..w.len() {
            prop_assert!(w[k] > 0.0);
            prop_assert!((w[k] - aw * unit[k]).abs() <= 1e-12 * aw.max(1.0));
            if k > 1 {
                prop_assert!(w[k] < w[k - 1]);
            }
        }
    }

    /// Noise injection is deterministic in the seed and mean-free in scale:
    /// same seed reproduces the signal bit for bit, different seeds differ.
    #[test]
    fn noise_is_seed_deterministic(seed in any::<u64>()) {
        let base = test_current(400);
        let a = add_noise(&base, 15.0, seed).unwrap();
        let b = add_noise(&base, 15.0, seed).unwrap();
        prop_assert_eq!(a.values(), b.values());
        let c = add_noise(&base, 15.0, seed.wrapping_add(1)).unwrap();
        prop_assert!(a.values() != c.values());
    }

    /// Segment plans either cover at most the record or refuse to build; the
    /// ranges they report tile [0, total) without gaps or overlap.
    #[test]
    fn segment_plan_ranges_tile(lengths in prop::collection::vec(1usize..400, 1..6)) {
        let record_len = 1_000;
        match SegmentPlan::new(lengths.clone(), 1, record_len) {
            Ok(plan) => {
                let mut next = 0;
                for (start, len) in plan.ranges() {
                    prop_assert_eq!(start, next);
                    next = start + len;
                }
                prop_assert_eq!(next, plan.total());
                prop_assert!(next <= record_len);
            }
            Err(_) => {
                prop_assert!(lengths.iter().sum::<usize>() > record_len);
            }
        }
    }
}
