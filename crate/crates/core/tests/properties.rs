use proptest::prelude::*;

use rydlock::allan::{cross_correlation, overlapping_adev, transfer_factor};
use rydlock::atomic::{detector_signal, Cascade, LadderScheme, RydbergTarget, Series};
use rydlock::counter::{beat_trace, gated_readings};
use rydlock::noise::{split_seed, synth_power_law_noise, FrequencyTrace, NoiseSpec};
use rydlock::servo::{actuator_response, pid_update, Actuator, ActuatorState, PidGains, PidState};

fn series(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e6..1e6f64, len)
}

proptest! {
    #[test]
    fn adev_scales_with_readings_and_ignores_offsets(y in series(64), c in -50.0..50.0f64, b in -1e7..1e7f64) {
        let m = [1usize, 2, 4, 8];
        let base = overlapping_adev(&y, 1.0, &m).unwrap().0;
        let moved: Vec<f64> = y.iter().map(|v| c * v + b).collect();
        let scaled = overlapping_adev(&moved, 1.0, &m).unwrap().0;
        for (s, t) in base.sigmas.iter().zip(&scaled.sigmas) {
            prop_assert!((t - c.abs() * s).abs() <= 1e-8 * (1.0 + c.abs() * s));
        }
    }

    #[test]
    fn adev_is_never_negative(y in series(40)) {
        let (curve, _) = overlapping_adev(&y, 0.5, &[1, 2, 4, 8, 16]).unwrap();
        prop_assert!(curve.sigmas.iter().all(|&s| s >= 0.0));
        prop_assert_eq!(curve.taus, vec![0.5, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn affine_series_are_fully_correlated(y in series(20), c in 0.1..10.0f64, b in -5.0..5.0f64) {
        prop_assume!(y.iter().any(|&v| (v - y[0]).abs() > 1.0));
        let up: Vec<f64> = y.iter().map(|v| c * v + b).collect();
        let down: Vec<f64> = y.iter().map(|v| -c * v).collect();
        prop_assert!((cross_correlation(&y, &up).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((cross_correlation(&y, &down).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn exact_lines_fit_exactly(k in -3.0..3.0f64, b in -1e6..1e6f64) {
        let cause = [-2e6, -1e6, 0.0, 1e6, 2e6];
        let effect: Vec<f64> = cause.iter().map(|x| k * x + b).collect();
        let fit = transfer_factor(&cause, &effect).unwrap();
        prop_assert!((fit.slope - k).abs() < 1e-9);
        prop_assert!(fit.ci_half_width < 1e-6);
    }

    #[test]
    fn pid_is_linear_without_integral(kp in 0.0..100.0f64, e in -1.0..1.0f64) {
        let gains = PidGains { kp, ki: 0.0, kd: 0.0, integrator_limit: 1.0 };
        let out = pid_update(&mut PidState::default(), e, &gains, 1e-4);
        prop_assert!((out - kp * e).abs() <= 1e-12 * (1.0 + (kp * e).abs()));
    }

    #[test]
    fn actuator_output_stays_in_range(cmds in prop::collection::vec(-1e3..1e3f64, 1..200)) {
        let act = Actuator::current();
        let mut st = ActuatorState::default();
        for c in cmds {
            let f = actuator_response(c, &act, &mut st, 1e-4);
            prop_assert!(f.abs() <= act.range);
        }
    }

    #[test]
    fn beat_is_folded_offset(f in -1e8..1e8f64) {
        let t = FrequencyTrace::constant(0.1, 3, f).unwrap();
        let b = beat_trace(&t, 20e6).unwrap();
        prop_assert!(b.samples().iter().all(|&v| v == (20e6 + f).abs()));
    }

    #[test]
    fn counting_errors_stay_bounded(fm in 0.0..2e6f64, seed in any::<u64>()) {
        let t = FrequencyTrace::constant(0.25, 400, 2e7).unwrap();
        let r = gated_readings(&t, 1.0, fm, seed).unwrap();
        prop_assert_eq!(r.len(), 100);
        prop_assert!(r.iter().all(|v| (v - 2e7).abs() <= fm));
    }

    #[test]
    fn split_seeds_differ_by_label(seed in any::<u64>(), a in 0u64..64, b in 0u64..64) {
        prop_assume!(a != b);
        prop_assert_ne!(split_seed(seed, a), split_seed(seed, b));
    }

    #[test]
    fn noise_depends_only_on_its_seed(seed in any::<u64>()) {
        let spec = NoiseSpec { h0: 1e4, h_flicker: 1e4, h_rw: 10.0, drift_rate: 1.0, seed };
        let a = synth_power_law_noise(&spec, 0.01, 300).unwrap();
        let b = synth_power_law_noise(&spec, 0.01, 300).unwrap();
        prop_assert_eq!(a.samples(), b.samples());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn detector_signal_is_positive_and_bounded(
        d1 in -300e6..300e6f64,
        d2 in -300e6..300e6f64,
        d3 in -300e6..300e6f64,
        n in 36u32..90,
    ) {
        let scheme = LadderScheme::rb85_default();
        let target = RydbergTarget::new(n, Series::F7_2).unwrap();
        let bound = Cascade::new(&scheme, &target).unwrap().peak_bound();
        let s = detector_signal(d1, d2, d3, &scheme, &target).unwrap();
        prop_assert!(s > 0.0 && s <= bound, "{s} vs {bound}");
    }
}
