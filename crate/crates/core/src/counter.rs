//! Comb beat notes and synchronized gated frequency counting.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{non_negative, positive, Error, Result};
use crate::noise::{fmt17, parse_f64, split_seed, substream, FrequencyTrace};

/// Default beat frequency between each laser and its comb line, Hz.
pub const DEFAULT_BEAT_HZ: f64 = 20e6;

const STREAM_FM_ERROR: u64 = 7;

/// `|nominal_offset + laser offset|` sample by sample.
pub fn beat_trace(laser: &FrequencyTrace, nominal_offset: f64) -> Result<FrequencyTrace> {
    non_negative("nominal_offset", nominal_offset)?;
    let samples = laser.samples().iter().map(|f| (nominal_offset + f).abs()).collect();
    FrequencyTrace::new(laser.dt(), samples, format!("beat of {}", laser.origin()))
}

/// Samples per gate, if `gate` is a whole multiple of `dt`.
fn samples_per_gate(gate: f64, dt: f64) -> Result<usize> {
    positive("gate", gate)?;
    let n = (gate / dt).round();
    if n < 1.0 || (n * dt - gate).abs() > 1e-9 * gate {
        return Err(Error::Counter(format!(
            "gate {gate} s is not a whole multiple of the trace step {dt} s"
        )));
    }
    Ok(n as usize)
}

/// Pi-type gated counting without dead time. Each reading is the mean of the
/// samples inside its gate; when `fm_error > 0` an independent uniform error
/// in `[-fm_error, fm_error]` is added. Trailing samples short of a full gate
/// are dropped.
pub fn gated_readings(beat: &FrequencyTrace, gate: f64, fm_error: f64, seed: u64) -> Result<Vec<f64>> {
    non_negative("fm_error", fm_error)?;
    let per = samples_per_gate(gate, beat.dt())?;
    let gates = beat.len() / per;
    if gates < 2 {
        return Err(Error::Counter(format!(
            "trace of {} samples holds fewer than two gates of {per}",
            beat.len()
        )));
    }
    let mut rng = (fm_error > 0.0).then(|| substream(seed, STREAM_FM_ERROR));
    Ok(beat
        .samples()
        .chunks_exact(per)
        .map(|chunk| {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            match &mut rng {
                Some(rng) => mean + rng.random_range(-fm_error..=fm_error),
                None => mean,
            }
        })
        .collect())
}

/// Readings of all channels on a shared gate clock.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterSeries {
    pub gate: f64,
    pub t0: f64,
    pub labels: Vec<String>,
    pub fm_flags: Vec<bool>,
    /// `readings[channel][gate]`, Hz.
    pub readings: Vec<Vec<f64>>,
}

impl CounterSeries {
    pub fn len(&self) -> usize {
        self.readings.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Timestamp of gate `k`, `t0 + k gate`.
    pub fn timestamp(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.gate
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.timestamp(k)).collect()
    }

    pub fn channel(&self, label: &str) -> Option<&[f64]> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.readings[i].as_slice())
    }

    /// CSV with header `t_s,<label>_hz,...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = self.labels.iter().map(|l| format!("{l}_hz")).collect();
        writeln!(out, "t_s,{}", header.join(","))?;
        for k in 0..self.len() {
            let mut line = fmt17(self.timestamp(k));
            for ch in &self.readings {
                line.push(',');
                line.push_str(&fmt17(ch[k]));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Reads a CSV written by `write_csv`. Gate and `t0` come from the first
    /// two timestamps; FM flags are not stored and come back false.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Csv("empty counter file".into()))??;
        let mut cols = header.trim().split(',');
        if cols.next() != Some("t_s") {
            return Err(Error::Csv(format!("expected t_s as first column, got {header:?}")));
        }
        let labels: Vec<String> = cols
            .map(|c| {
                c.strip_suffix("_hz")
                    .map(str::to_string)
                    .ok_or_else(|| Error::Csv(format!("column {c:?} lacks the _hz suffix")))
            })
            .collect::<Result<_>>()?;
        if labels.is_empty() {
            return Err(Error::Csv("no reading columns".into()));
        }
        let mut times = Vec::new();
        let mut readings = vec![Vec::new(); labels.len()];
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != labels.len() + 1 {
                return Err(Error::Csv(format!(
                    "line {}: expected {} fields, got {}",
                    n + 2,
                    labels.len() + 1,
                    fields.len()
                )));
            }
            times.push(parse_f64(fields[0], n)?);
            for (ch, f) in readings.iter_mut().zip(&fields[1..]) {
                ch.push(parse_f64(f, n)?);
            }
        }
        if times.len() < 2 {
            return Err(Error::Csv("need at least two readings".into()));
        }
        let gate = times[1] - times[0];
        if !(gate > 0.0) {
            return Err(Error::Csv("timestamps must increase".into()));
        }
        let t0 = times[0];
        for (k, t) in times.iter().enumerate() {
            if (t - (t0 + k as f64 * gate)).abs() > 1e-9 * gate.max(t.abs()) {
                return Err(Error::Csv(format!("timestamp {t} breaks the uniform gate clock")));
            }
        }
        let fm_flags = vec![false; labels.len()];
        Ok(CounterSeries {
            gate,
            t0,
            labels,
            fm_flags,
            readings,
        })
    }
}

/// Joins per-channel readings taken on the same gate clock.
pub fn synchronize(
    readings: Vec<Vec<f64>>,
    labels: Vec<String>,
    fm_flags: Vec<bool>,
    gate: f64,
    t0: f64,
) -> Result<CounterSeries> {
    positive("gate", gate)?;
    if readings.is_empty() {
        return Err(Error::Synchronization("no channels".into()));
    }
    if labels.len() != readings.len() || fm_flags.len() != readings.len() {
        return Err(Error::Synchronization(format!(
            "{} channels but {} labels and {} FM flags",
            readings.len(),
            labels.len(),
            fm_flags.len()
        )));
    }
    let n = readings[0].len();
    if let Some((i, r)) = readings.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::Synchronization(format!(
            "channel {} has {} readings, channel {} has {n}",
            labels[i],
            r.len(),
            labels[0]
        )));
    }
    Ok(CounterSeries {
        gate,
        t0,
        labels,
        fm_flags,
        readings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterSettings {
    #[serde(rename = "gate_s")]
    pub gate: f64,
    #[serde(rename = "beat_offset_hz")]
    pub beat_offset: f64,
    /// Bound of the uniform counting error on FM-flagged channels, Hz.
    #[serde(rename = "fm_error_hz")]
    pub fm_error: f64,
    /// Which channels carry a frequency dither.
    pub fm_flags: [bool; 3],
}

impl Default for CounterSettings {
    fn default() -> Self {
        CounterSettings {
            gate: 1.0,
            beat_offset: DEFAULT_BEAT_HZ,
            fm_error: 0.0,
            fm_flags: [false, true, true],
        }
    }
}

impl CounterSettings {
    pub fn validate(&self) -> Result<()> {
        positive("gate", self.gate)?;
        non_negative("beat_offset", self.beat_offset)?;
        non_negative("fm_error", self.fm_error)?;
        Ok(())
    }
}

/// Counts three laser traces; channel `i` draws its counting errors from
/// `split_seed(seed, i)` so channels never share randomness.
pub fn count_chain(traces: &[FrequencyTrace; 3], settings: &CounterSettings, seed: u64) -> Result<CounterSeries> {
    settings.validate()?;
    let mut readings = Vec::with_capacity(3);
    for (i, trace) in traces.iter().enumerate() {
        let beat = beat_trace(trace, settings.beat_offset)?;
        let fm = if settings.fm_flags[i] { settings.fm_error } else { 0.0 };
        readings.push(gated_readings(&beat, settings.gate, fm, split_seed(seed, i as u64))?);
    }
    synchronize(
        readings,
        vec!["ch1".into(), "ch2".into(), "ch3".into()],
        settings.fm_flags.to_vec(),
        settings.gate,
        0.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(dt: f64, samples: Vec<f64>) -> FrequencyTrace {
        FrequencyTrace::new(dt, samples, "test").unwrap()
    }

    #[test]
    fn beat_examples() {
        let z = beat_trace(&FrequencyTrace::constant(0.1, 5, 0.0).unwrap(), DEFAULT_BEAT_HZ).unwrap();
        assert!(z.samples().iter().all(|&v| v == 20e6));
        let neg = beat_trace(&FrequencyTrace::constant(0.1, 5, -20e6).unwrap(), DEFAULT_BEAT_HZ).unwrap();
        assert!(neg.samples().iter().all(|&v| v == 0.0));
        let up = beat_trace(&FrequencyTrace::constant(0.1, 5, 1e3).unwrap(), DEFAULT_BEAT_HZ).unwrap();
        assert!(up.samples().iter().all(|&v| v == 20.001e6));
        assert!(beat_trace(&z, -1.0).is_err());
    }

    #[test]
    fn constant_counts_exactly() {
        let t = FrequencyTrace::constant(0.01, 1000, 20e6).unwrap();
        let r = gated_readings(&t, 1.0, 0.0, 0).unwrap();
        assert_eq!(r.len(), 10);
        assert!(r.iter().all(|&v| v == 2e7));
    }

    #[test]
    fn ramp_reading_is_gate_midpoint() {
        let dt = 1e-3;
        let rate = 1e4;
        let n = 10_000;
        let t = trace(dt, (0..n).map(|j| 20e6 + rate * (j as f64 + 0.5) * dt).collect());
        let r = gated_readings(&t, 1.0, 0.0, 0).unwrap();
        for (k, v) in r.iter().enumerate() {
            let expected = 20e6 + rate * (k as f64 + 0.5);
            assert!((v - expected).abs() < 1e-6 * expected);
        }
    }

    #[test]
    fn gate_must_match_dt() {
        let t = FrequencyTrace::constant(0.3, 100, 1.0).unwrap();
        assert!(matches!(gated_readings(&t, 1.0, 0.0, 0), Err(Error::Counter(_))));
        let short = FrequencyTrace::constant(0.5, 3, 1.0).unwrap();
        assert!(matches!(gated_readings(&short, 1.0, 0.0, 0), Err(Error::Counter(_))));
    }

    #[test]
    fn fm_errors_are_bounded_and_seeded() {
        let t = FrequencyTrace::constant(0.5, 2000, 20e6).unwrap();
        let a = gated_readings(&t, 1.0, 1e6, 9).unwrap();
        let b = gated_readings(&t, 1.0, 1e6, 9).unwrap();
        let c = gated_readings(&t, 1.0, 1e6, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| (v - 20e6).abs() <= 1e6));
    }

    #[test]
    fn synchronize_contract() {
        let s = synchronize(
            vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            vec!["ch1".into(), "ch2".into(), "ch3".into()],
            vec![false, true, true],
            1.0,
            10.0,
        )
        .unwrap();
        assert_eq!(s.timestamps(), vec![10.0, 11.0]);
        let bad = synchronize(
            vec![vec![1.0, 2.0], vec![3.0]],
            vec!["a".into(), "b".into()],
            vec![false, false],
            1.0,
            0.0,
        );
        assert!(matches!(bad, Err(Error::Synchronization(_))));
    }

    #[test]
    fn csv_round_trip() {
        let s = synchronize(
            vec![vec![20e6, 20.1e6, 19.9e6], vec![1.0, 2.0, 3.0], vec![0.1, 0.2, 0.3]],
            vec!["ch1".into(), "ch2".into(), "ch3".into()],
            vec![false, false, false],
            1.0,
            0.0,
        )
        .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"t_s,ch1_hz,ch2_hz,ch3_hz\n"));
        let back = CounterSeries::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }
}
