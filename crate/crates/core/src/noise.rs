//! Free-running laser frequency noise.
//!
//! Three power-law classes are synthesized, each from its own random
//! substream of the master seed:
//!
//! * white FM, `S(f) = h0`: i.i.d. Gaussian samples of variance `h0 / (2 dt)`;
//! * flicker FM, `S(f) = h_flicker / f`: a bank of fifteen first-order
//!   (Ornstein–Uhlenbeck) sections with corner frequencies spaced two per
//!   decade below the Nyquist frequency, which together approximate a
//!   half-order integrator of white noise;
//! * random-walk FM, `S(f) = h_rw / f^2`: cumulative sum of Gaussian steps of
//!   variance `2 pi^2 h_rw dt`.
//!
//! A linear drift is added on top. All PSDs are one-sided, in Hz^2/Hz of
//! frequency offset.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{finite, invalid, non_negative, positive, Error, Result};

/// Number of first-order sections in the flicker filter.
pub const FLICKER_ORDER: usize = 15;
/// Corner-frequency ratio between adjacent flicker sections.
const FLICKER_SPACING: f64 = 3.162_277_660_168_379_5; // sqrt(10)

const STREAM_WHITE: u64 = 1;
const STREAM_FLICKER: u64 = 2;
const STREAM_RANDOM_WALK: u64 = 3;

/// Power-law noise levels of one free-running channel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// White FM level, Hz^2/Hz.
    #[serde(rename = "h0_hz2_per_hz", default)]
    pub h0: f64,
    /// Flicker FM level, Hz^2.
    #[serde(rename = "h_flicker_hz2", default)]
    pub h_flicker: f64,
    /// Random-walk FM level, Hz^3.
    #[serde(rename = "h_rw_hz3", default)]
    pub h_rw: f64,
    /// Linear drift, Hz/s.
    #[serde(rename = "drift_rate_hz_per_s", default)]
    pub drift_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn quiet(seed: u64) -> Self {
        NoiseSpec {
            h0: 0.0,
            h_flicker: 0.0,
            h_rw: 0.0,
            drift_rate: 0.0,
            seed,
        }
    }

    pub fn white(h0: f64, seed: u64) -> Self {
        NoiseSpec {
            h0,
            ..Self::quiet(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        non_negative("h0", self.h0)?;
        non_negative("h_flicker", self.h_flicker)?;
        non_negative("h_rw", self.h_rw)?;
        finite("drift_rate", self.drift_rate)?;
        Ok(())
    }

    pub fn is_quiet(&self) -> bool {
        self.h0 == 0.0 && self.h_flicker == 0.0 && self.h_rw == 0.0 && self.drift_rate == 0.0
    }

    /// Analytic overlapping Allan deviation of the pure white component.
    pub fn white_adev(&self, tau: f64) -> f64 {
        (self.h0 / (2.0 * tau)).sqrt()
    }

    /// Analytic Allan deviation of the pure flicker component (flat in tau).
    pub fn flicker_adev(&self) -> f64 {
        (2.0 * std::f64::consts::LN_2 * self.h_flicker).sqrt()
    }

    /// Analytic Allan deviation of the pure random-walk component.
    pub fn random_walk_adev(&self, tau: f64) -> f64 {
        (2.0 * std::f64::consts::PI.powi(2) / 3.0 * self.h_rw * tau).sqrt()
    }
}

/// Random substream `stream` of `seed`. Distinct streams never overlap.
pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent child seed; used to give every channel and every
/// noise role its own master seed.
pub fn split_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed
        .wrapping_add(label.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
struct FlickerBank {
    rng: ChaCha12Rng,
    decay: [f64; FLICKER_ORDER],
    drive: [f64; FLICKER_ORDER],
    state: [f64; FLICKER_ORDER],
}

impl FlickerBank {
    fn new(h_flicker: f64, dt: f64, seed: u64) -> Self {
        let mut rng = substream(seed, STREAM_FLICKER);
        let nyquist = 0.5 / dt;
        // Each section carries variance h ln(r); the sum of their Lorentzian
        // spectra then approximates h / f between the lowest and highest corner.
        let sigma = (h_flicker * FLICKER_SPACING.ln()).sqrt();
        let mut decay = [0.0; FLICKER_ORDER];
        let mut drive = [0.0; FLICKER_ORDER];
        let mut state = [0.0; FLICKER_ORDER];
        for k in 0..FLICKER_ORDER {
            let corner = nyquist / FLICKER_SPACING.powi(k as i32);
            let a = (-2.0 * std::f64::consts::PI * corner * dt).exp();
            decay[k] = a;
            drive[k] = sigma * (1.0 - a * a).sqrt();
            // start from the stationary distribution
            let z: f64 = StandardNormal.sample(&mut rng);
            state[k] = sigma * z;
        }
        FlickerBank {
            rng,
            decay,
            drive,
            state,
        }
    }

    fn current(&self) -> f64 {
        self.state.iter().sum()
    }

    fn advance(&mut self) {
        for k in 0..FLICKER_ORDER {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.state[k] = self.decay[k] * self.state[k] + self.drive[k] * z;
        }
    }
}

/// Sample-by-sample generator; `synth_power_law_noise` collects from it, and
/// long closed-loop runs stream from it without materializing the trace.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    dt: f64,
    index: u64,
    white: Option<(ChaCha12Rng, f64)>,
    walk: Option<(ChaCha12Rng, f64, f64)>,
    flicker: Option<FlickerBank>,
    drift_rate: f64,
}

impl NoiseStream {
    pub fn new(spec: &NoiseSpec, dt: f64) -> Result<Self> {
        spec.validate()?;
        positive("dt", dt)?;
        let white = (spec.h0 > 0.0)
            .then(|| (substream(spec.seed, STREAM_WHITE), (spec.h0 / (2.0 * dt)).sqrt()));
        let walk = (spec.h_rw > 0.0).then(|| {
            let step = (2.0 * std::f64::consts::PI.powi(2) * spec.h_rw * dt).sqrt();
            (substream(spec.seed, STREAM_RANDOM_WALK), step, 0.0)
        });
        let flicker = (spec.h_flicker > 0.0).then(|| FlickerBank::new(spec.h_flicker, dt, spec.seed));
        Ok(NoiseStream {
            dt,
            index: 0,
            white,
            walk,
            flicker,
            drift_rate: spec.drift_rate,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Frequency offset of the next sample, Hz.
    pub fn next_sample(&mut self) -> f64 {
        let mut value = self.drift_rate * (self.index as f64 * self.dt);
        if let Some((rng, scale)) = &mut self.white {
            let z: f64 = StandardNormal.sample(rng);
            value += *scale * z;
        }
        if let Some((rng, step, level)) = &mut self.walk {
            value += *level;
            let z: f64 = StandardNormal.sample(rng);
            *level += *step * z;
        }
        if let Some(bank) = &mut self.flicker {
            value += bank.current();
            bank.advance();
        }
        self.index += 1;
        value
    }
}

impl Iterator for NoiseStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_sample())
    }
}

/// Uniformly sampled frequency offset (Hz) from a nominal optical frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTrace {
    dt: f64,
    samples: Vec<f64>,
    origin: String,
}

impl FrequencyTrace {
    pub fn new(dt: f64, samples: Vec<f64>, origin: impl Into<String>) -> Result<Self> {
        positive("dt", dt)?;
        if samples.len() < 2 {
            return Err(invalid("samples", format!("need at least 2, got {}", samples.len())));
        }
        if let Some(bad) = samples.iter().find(|x| !x.is_finite()) {
            return Err(invalid("samples", format!("non-finite value {bad}")));
        }
        Ok(FrequencyTrace {
            dt,
            samples,
            origin: origin.into(),
        })
    }

    pub fn constant(dt: f64, n: usize, value: f64) -> Result<Self> {
        Self::new(dt, vec![value; n], format!("constant {value} Hz"))
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    pub fn negated(&self) -> FrequencyTrace {
        FrequencyTrace {
            dt: self.dt,
            samples: self.samples.iter().map(|x| -x).collect(),
            origin: format!("-({})", self.origin),
        }
    }

    /// Writes `t_s,offset_hz` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t_s,offset_hz")?;
        let mut line = String::with_capacity(64);
        for (k, x) in self.samples.iter().enumerate() {
            line.clear();
            let _ = writeln!(line, "{},{}", fmt17(self.time(k)), fmt17(*x));
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut times = Vec::new();
        let mut samples = Vec::new();
        let mut lines = input.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "t_s,offset_hz" => {}
            Some(Ok(h)) => return Err(Error::Csv(format!("unexpected header `{h}`"))),
            Some(Err(e)) => return Err(e.into()),
            None => return Err(Error::Csv("empty input".into())),
        }
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let (Some(t), Some(f), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Csv(format!("row {}: expected two columns", row + 2)));
            };
            times.push(parse_f64(t, row)?);
            samples.push(parse_f64(f, row)?);
        }
        if times.len() < 2 {
            return Err(Error::Csv("need at least two rows".into()));
        }
        let dt = times[1] - times[0];
        FrequencyTrace::new(dt, samples, "csv")
    }
}

pub(crate) fn parse_f64(field: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Csv(format!("row {}: `{}`: {e}", row + 2, field.trim())))
}

/// Decimal scientific notation with 17 significant digits; round-trips every f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Synthesizes `n` samples of free-running noise at interval `dt`.
pub fn synth_power_law_noise(spec: &NoiseSpec, dt: f64, n: usize) -> Result<FrequencyTrace> {
    if n < 2 {
        return Err(invalid("n", format!("need at least 2 samples, got {n}")));
    }
    let stream = NoiseStream::new(spec, dt)?;
    let samples: Vec<f64> = stream.take(n).collect();
    FrequencyTrace::new(
        dt,
        samples,
        format!(
            "power-law noise h0={:e} h_flicker={:e} h_rw={:e} drift={:e} seed={}",
            spec.h0, spec.h_flicker, spec.h_rw, spec.drift_rate, spec.seed
        ),
    )
}

/// Adds `rate * k * dt` to sample `k`.
pub fn add_drift(trace: &FrequencyTrace, rate: f64) -> Result<FrequencyTrace> {
    finite("rate", rate)?;
    let dt = trace.dt;
    let samples = trace
        .samples
        .iter()
        .enumerate()
        .map(|(k, x)| x + rate * (k as f64 * dt))
        .collect();
    FrequencyTrace::new(dt, samples, format!("{} + drift {rate:e} Hz/s", trace.origin))
}

/// Elementwise sum. Per sample the addends are summed in ascending order, so
/// the result does not depend on the order of `traces`.
pub fn compose(traces: &[FrequencyTrace]) -> Result<FrequencyTrace> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Shape("compose needs at least one trace".into()))?;
    for t in &traces[1..] {
        if t.dt != first.dt || t.len() != first.len() {
            return Err(Error::Shape(format!(
                "trace ({} samples, dt {:e}) does not match ({} samples, dt {:e})",
                t.len(),
                t.dt,
                first.len(),
                first.dt
            )));
        }
    }
    let mut scratch = Vec::with_capacity(traces.len());
    let samples = (0..first.len())
        .map(|k| {
            scratch.clear();
            scratch.extend(traces.iter().map(|t| t.samples[k]));
            scratch.sort_by(f64::total_cmp);
            scratch.iter().sum::<f64>()
        })
        .collect();
    let origin = traces.iter().map(|t| t.origin.as_str()).collect::<Vec<_>>().join(" + ");
    FrequencyTrace::new(first.dt, samples, origin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quiet_spec_gives_zeros() {
        let t = synth_power_law_noise(&NoiseSpec::quiet(7), 1e-3, 1000).unwrap();
        assert!(t.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn drift_only_is_exact_ramp() {
        let spec = NoiseSpec {
            drift_rate: 100.0,
            ..NoiseSpec::quiet(1)
        };
        let t = synth_power_law_noise(&spec, 0.5, 50).unwrap();
        for (k, x) in t.samples().iter().enumerate() {
            assert_eq!(*x, 100.0 * (k as f64 * 0.5));
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let spec = NoiseSpec {
            h0: 3.0,
            h_flicker: 2.0,
            h_rw: 1.0,
            drift_rate: 0.1,
            seed: 99,
        };
        let a = synth_power_law_noise(&spec, 0.01, 500).unwrap();
        let b = synth_power_law_noise(&spec, 0.01, 500).unwrap();
        assert_eq!(a, b);
        let c = synth_power_law_noise(&NoiseSpec { seed: 100, ..spec }, 0.01, 500).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn adding_a_component_leaves_others_untouched() {
        let white = NoiseSpec::white(5.0, 11);
        let both = NoiseSpec { h_rw: 2.0, ..white };
        let rw = NoiseSpec { h0: 0.0, ..both };
        let a = synth_power_law_noise(&white, 0.1, 200).unwrap();
        let b = synth_power_law_noise(&both, 0.1, 200).unwrap();
        let c = synth_power_law_noise(&rw, 0.1, 200).unwrap();
        for k in 0..200 {
            assert!((b.samples()[k] - a.samples()[k] - c.samples()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(NoiseStream::new(&NoiseSpec::white(-1.0, 0), 1.0).is_err());
        assert!(NoiseStream::new(&NoiseSpec::white(f64::NAN, 0), 1.0).is_err());
        let inf_drift = NoiseSpec {
            drift_rate: f64::INFINITY,
            ..NoiseSpec::quiet(0)
        };
        assert!(synth_power_law_noise(&inf_drift, 1.0, 10).is_err());
        assert!(synth_power_law_noise(&NoiseSpec::quiet(0), 0.0, 10).is_err());
        assert!(synth_power_law_noise(&NoiseSpec::quiet(0), 1.0, 1).is_err());
    }

    #[test]
    fn add_drift_identity_and_ramp() {
        let zero = FrequencyTrace::constant(1.0, 5, 0.0).unwrap();
        assert_eq!(add_drift(&zero, 0.0).unwrap().samples(), zero.samples());
        let ramp = add_drift(&zero, 1.0).unwrap();
        assert_eq!(ramp.samples(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(add_drift(&zero, f64::NAN).is_err());
    }

    #[test]
    fn compose_single_and_inverse() {
        let t = synth_power_law_noise(&NoiseSpec::white(1.0, 3), 1.0, 64).unwrap();
        assert_eq!(compose(std::slice::from_ref(&t)).unwrap().samples(), t.samples());
        let z = compose(&[t.clone(), t.negated()]).unwrap();
        assert!(z.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn compose_rejects_mismatched_shapes() {
        let a = FrequencyTrace::constant(1.0, 10, 0.0).unwrap();
        let b = FrequencyTrace::constant(2.0, 10, 0.0).unwrap();
        let c = FrequencyTrace::constant(1.0, 11, 0.0).unwrap();
        assert!(matches!(compose(&[a.clone(), b]), Err(Error::Shape(_))));
        assert!(matches!(compose(&[a, c]), Err(Error::Shape(_))));
        assert!(compose(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = synth_power_law_noise(&NoiseSpec::white(1e6, 5), 0.25, 20).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_s,offset_hz\n"));
        let back = FrequencyTrace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.samples(), t.samples());
        assert_eq!(back.dt(), t.dt());
    }
}
