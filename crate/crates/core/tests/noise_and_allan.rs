mod common;

use rydlock::allan::{cross_correlation, detrend, octave_multiples, overlapping_adev};
use rydlock::noise::{add_drift, synth_power_law_noise, NoiseSpec};

fn adev_at(readings: &[f64], multiples: &[usize]) -> Vec<f64> {
    overlapping_adev(readings, 1.0, multiples).unwrap().0.sigmas
}

#[test]
fn white_fm_one_second_ensemble() {
    let spec = NoiseSpec::white(1e6, 0);
    let mut acc = 0.0;
    for seed in 0..20 {
        let t = synth_power_law_noise(&NoiseSpec { seed, ..spec }, 1.0, 1_000_000).unwrap();
        acc += adev_at(t.samples(), &[1])[0];
    }
    let mean = acc / 20.0;
    assert!(common::rel(mean, 707.106_781) < 0.05, "sigma(1 s) = {mean}");
}

#[test]
fn white_fm_follows_inverse_root_tau() {
    let taus = [1usize, 2, 4, 8, 16, 32, 64];
    let mut acc = [0.0; 7];
    for seed in 100..120 {
        let t = synth_power_law_noise(&NoiseSpec::white(1e6, seed), 1.0, 1 << 17).unwrap();
        for (a, s) in acc.iter_mut().zip(adev_at(t.samples(), &taus)) {
            *a += s / 20.0;
        }
    }
    for (&m, &s) in taus.iter().zip(&acc) {
        let expected = (1e6 / (2.0 * m as f64)).sqrt();
        assert!(common::rel(s, expected) < 0.05, "tau {m}: {s} vs {expected}");
    }
}

// log-log slope of sigma(tau) over a decade identifies the noise type
fn slope(spec: NoiseSpec, dt: f64, n: usize, lo: usize, hi: usize) -> f64 {
    let t = synth_power_law_noise(&spec, dt, n).unwrap();
    let gate = (1.0 / dt).round() as usize;
    let readings: Vec<f64> = t
        .samples()
        .chunks_exact(gate)
        .map(|c| c.iter().sum::<f64>() / gate as f64)
        .collect();
    let s = adev_at(&readings, &[lo, hi]);
    (s[1] / s[0]).ln() / ((hi as f64) / (lo as f64)).ln()
}

#[test]
fn power_law_slopes_are_identified() {
    let q = NoiseSpec::quiet(5);
    let white = slope(NoiseSpec { h0: 1e6, ..q }, 0.1, 200_000, 2, 64);
    let flicker = slope(NoiseSpec { h_flicker: 1e8, ..q }, 0.1, 400_000, 2, 64);
    let walk = slope(NoiseSpec { h_rw: 1e5, ..q }, 0.1, 400_000, 2, 64);
    assert!((white + 0.5).abs() < 0.1, "white slope {white}");
    assert!(flicker.abs() < 0.15, "flicker slope {flicker}");
    assert!((walk - 0.5).abs() < 0.15, "random walk slope {walk}");
}

#[test]
fn flicker_level_matches_analytic_floor() {
    let spec = NoiseSpec {
        h_flicker: 1e8,
        ..NoiseSpec::quiet(11)
    };
    let t = synth_power_law_noise(&spec, 0.1, 400_000).unwrap();
    let readings: Vec<f64> = t.samples().chunks_exact(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    let s = adev_at(&readings, &[8])[0];
    assert!(common::rel(s, spec.flicker_adev()) < 0.25, "{s} vs {}", spec.flicker_adev());
}

#[test]
fn drift_is_recovered_by_linear_fit() {
    let t = synth_power_law_noise(&NoiseSpec::white(1e4, 3), 0.5, 5000).unwrap();
    let drifted = add_drift(&t, 37.5).unwrap();
    let a = detrend(t.samples());
    let b = detrend(drifted.samples());
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-9 * scale);
    }
}

#[test]
fn independent_white_seeds_are_uncorrelated() {
    let a = synth_power_law_noise(&NoiseSpec::white(1.0, 1), 1.0, 10_000).unwrap();
    let b = synth_power_law_noise(&NoiseSpec::white(1.0, 2), 1.0, 10_000).unwrap();
    let r = cross_correlation(a.samples(), b.samples()).unwrap();
    assert!(r.abs() < 0.05, "r = {r}");
}

#[test]
fn octave_grid_reaches_requested_tau() {
    let m = octave_multiples(1000);
    assert_eq!(m.first(), Some(&1));
    assert_eq!(m.last(), Some(&1000));
    assert!(m.windows(2).all(|w| w[1] > w[0]));
}
