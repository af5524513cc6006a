//! PID loops, actuators and the closed-loop three-channel chain.
//!
//! Frequencies are offsets from each laser's nominal lock frequency, Hz.
//! The cells see `d1 = f1`, `d2 = f2`, `d3 = f3`, except that a channel's
//! `lock_offset_hz` shifts the frequency seen by that channel's own lock cell
//! only, the way an offset modulator in the reference path would. A channel
//! locked with offset `o` therefore sits `o` away from its own zero crossing
//! as seen by every other cell.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::atomic::{Cascade, LadderScheme, RydbergTarget};
use crate::discriminator::{CellTables, DispersiveCurve, TableLayout, TableSet};
use crate::error::{finite, invalid, non_negative, positive, Error, Result};
use crate::lockin::{Demodulator, DitherSpec, DEFAULT_TARGET_SLOPE};
use crate::noise::{FrequencyTrace, NoiseSpec, NoiseStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    #[serde(rename = "kp_v_per_v")]
    pub kp: f64,
    /// Integral rate; the integrator accumulates `ki kp e dt`.
    #[serde(rename = "ki_per_s")]
    pub ki: f64,
    #[serde(rename = "kd_s", default)]
    pub kd: f64,
    #[serde(rename = "integrator_limit_v")]
    pub integrator_limit: f64,
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        finite("kp", self.kp)?;
        non_negative("ki", self.ki)?;
        finite("kd", self.kd)?;
        positive("integrator_limit", self.integrator_limit)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

/// One PID step. The integrator is clamped to `±integrator_limit` (anti-windup);
/// the derivative term is skipped on the first call.
pub fn pid_update(state: &mut PidState, error: f64, gains: &PidGains, dt: f64) -> f64 {
    let lim = gains.integrator_limit;
    state.integral = (state.integral + gains.ki * gains.kp * error * dt).clamp(-lim, lim);
    let derivative = match state.prev_error {
        Some(prev) if gains.kd != 0.0 => gains.kd * (error - prev) / dt,
        _ => 0.0,
    };
    state.prev_error = Some(error);
    gains.kp * error + state.integral + derivative
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActuatorKind {
    Piezo,
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actuator {
    pub kind: ActuatorKind,
    #[serde(rename = "gain_hz_per_v")]
    pub gain: f64,
    #[serde(rename = "bandwidth_hz")]
    pub bandwidth: f64,
    /// Correction saturates at `±range`, Hz.
    #[serde(rename = "range_hz")]
    pub range: f64,
}

impl Actuator {
    pub fn piezo() -> Self {
        Actuator {
            kind: ActuatorKind::Piezo,
            gain: 20e6,
            bandwidth: 1e3,
            range: 500e6,
        }
    }

    pub fn current() -> Self {
        Actuator {
            kind: ActuatorKind::Current,
            gain: 2e6,
            bandwidth: 50e3,
            range: 20e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        finite("actuator gain", self.gain)?;
        if self.gain == 0.0 {
            return Err(invalid("actuator gain", "must be nonzero"));
        }
        positive("actuator bandwidth", self.bandwidth)?;
        positive("actuator range", self.range)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActuatorState {
    /// Current frequency correction, Hz.
    pub output: f64,
}

/// Advances the single-pole actuator by `dt` with the command held constant
/// and returns the clamped correction, Hz.
pub fn actuator_response(command: f64, actuator: &Actuator, state: &mut ActuatorState, dt: f64) -> f64 {
    let alpha = 1.0 - (-2.0 * PI * actuator.bandwidth * dt).exp();
    let next = state.output + alpha * (actuator.gain * command - state.output);
    state.output = next.clamp(-actuator.range, actuator.range);
    state.output
}

/// An actuator with the PID that drives it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorLoop {
    pub actuator: Actuator,
    pub pid: PidGains,
}

/// Phase margin in degrees of the continuous-time loop
/// `slope * sum(actuator * pid) * lowpass * delay`, or `None` if the loop
/// gain never crosses unity between 0.1 Hz and 10 MHz.
pub fn phase_margin(loops: &[ActuatorLoop], slope: f64, tau_lp: Option<f64>, delay: f64) -> Option<f64> {
    let gain_at = |f: f64| -> Complex64 {
        let s = Complex64::new(0.0, 2.0 * PI * f);
        let mut sum = Complex64::new(0.0, 0.0);
        for l in loops {
            let pid = l.pid.kp * (1.0 + l.pid.ki / s) + l.pid.kd * s;
            let act = l.actuator.gain / (1.0 + s / (2.0 * PI * l.actuator.bandwidth));
            sum += pid * act;
        }
        let lp = tau_lp.map_or(Complex64::new(1.0, 0.0), |tau| 1.0 / (1.0 + s * tau));
        sum * lp * slope * (-s * delay).exp()
    };
    let mut prev = None;
    let points = 8000;
    for i in 0..=points {
        let f = 0.1 * 1e8f64.powf(i as f64 / points as f64);
        let g = gain_at(f);
        let above = g.norm() >= 1.0;
        if let Some((pf, true)) = prev {
            if !above {
                // refine by bisection on log f
                let (mut lo, mut hi): (f64, f64) = (pf, f);
                for _ in 0..60 {
                    let mid = (lo * hi).sqrt();
                    if gain_at(mid).norm() >= 1.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let phase = gain_at(hi).arg().to_degrees();
                return Some(180.0 + phase);
            }
        }
        prev = Some((f, above));
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FidelityMode {
    /// Tabulated static discriminators through the lock-in low-pass.
    #[default]
    Envelope,
    /// Explicit dither, cell signals and demodulation.
    Waveform,
}

impl std::str::FromStr for FidelityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "envelope" => Ok(FidelityMode::Envelope),
            "waveform" => Ok(FidelityMode::Waveform),
            other => Err(invalid("mode", format!("expected envelope or waveform, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Free-running frequency noise, Hz.
    pub noise: NoiseSpec,
    /// Additive noise on the demodulated error signal before calibration
    /// gain, V.
    pub error_noise: NoiseSpec,
    pub actuators: Vec<ActuatorLoop>,
    /// Frequency dither; channels 2 and 3 only.
    #[serde(default)]
    pub dither: Option<DitherSpec>,
    /// Whether the loop closes at all.
    pub engage: bool,
    #[serde(rename = "engage_at_s")]
    pub engage_at: f64,
    /// Shift applied in the path to this channel's own lock cell, Hz.
    #[serde(rename = "lock_offset_hz", default)]
    pub lock_offset: f64,
    /// Static free-running offset at t = 0, Hz.
    #[serde(rename = "initial_offset_hz", default)]
    pub initial_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoChainConfig {
    pub ch1: ChannelConfig,
    pub ch2: ChannelConfig,
    pub ch3: ChannelConfig,
    pub mode: FidelityMode,
    #[serde(rename = "dt_s")]
    pub dt: f64,
    #[serde(rename = "duration_s")]
    pub duration: f64,
    /// Interval of the recorded block-mean traces, s.
    #[serde(rename = "record_dt_s")]
    pub record_dt: f64,
    /// Calibrated discriminator slope, V/Hz.
    #[serde(rename = "target_slope_v_per_hz")]
    pub target_slope: f64,
    /// Half-width of the first-step dispersive curve; defaults to gamma1 / 2.
    #[serde(rename = "ch1_half_width_hz", default)]
    pub ch1_half_width: Option<f64>,
    #[serde(default)]
    pub tables: TableLayout,
}

impl ServoChainConfig {
    /// Envelope-mode chain with tuned default gains and quiet noise.
    pub fn default_chain() -> Self {
        let pid = |kp: f64, ki: f64, act: &Actuator| PidGains {
            kp,
            ki,
            kd: 0.0,
            integrator_limit: act.range / act.gain.abs(),
        };
        let piezo = Actuator::piezo();
        let current = Actuator::current();
        let channel = |loops: Vec<ActuatorLoop>, dither: Option<DitherSpec>, engage_at: f64, seed: u64| ChannelConfig {
            noise: NoiseSpec::quiet(seed),
            error_noise: NoiseSpec::quiet(seed + 100),
            actuators: loops,
            dither,
            engage: true,
            engage_at,
            lock_offset: 0.0,
            initial_offset: 0.0,
        };
        ServoChainConfig {
            ch1: channel(
                vec![
                    ActuatorLoop {
                        actuator: current,
                        pid: pid(20.0, 0.0, &current),
                    },
                    ActuatorLoop {
                        actuator: piezo,
                        pid: pid(2.5, 1600.0, &piezo),
                    },
                ],
                None,
                0.0,
                1,
            ),
            ch2: channel(
                vec![
                    ActuatorLoop {
                        actuator: current,
                        pid: pid(10.0, 0.0, &current),
                    },
                    ActuatorLoop {
                        actuator: piezo,
                        pid: pid(1.5, 1000.0, &piezo),
                    },
                ],
                Some(DitherSpec::second_step()),
                0.01,
                2,
            ),
            ch3: channel(
                vec![ActuatorLoop {
                    actuator: piezo,
                    pid: pid(2.5, 1600.0, &piezo),
                }],
                Some(DitherSpec::third_step()),
                0.02,
                3,
            ),
            mode: FidelityMode::Envelope,
            dt: 100e-6,
            duration: 1.0,
            record_dt: 0.01,
            target_slope: DEFAULT_TARGET_SLOPE,
            ch1_half_width: None,
            tables: TableLayout::default(),
        }
    }

    pub fn channel(&self, i: usize) -> &ChannelConfig {
        match i {
            0 => &self.ch1,
            1 => &self.ch2,
            _ => &self.ch3,
        }
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut ChannelConfig {
        match i {
            0 => &mut self.ch1,
            1 => &mut self.ch2,
            _ => &mut self.ch3,
        }
    }

    /// Switches to waveform mode with the default 0.5 us step.
    pub fn waveform(mut self) -> Self {
        self.mode = FidelityMode::Waveform;
        self.dt = 0.5e-6;
        self
    }

    pub fn validate(&self) -> Result<()> {
        positive("dt", self.dt)?;
        positive("duration", self.duration)?;
        positive("record_dt", self.record_dt)?;
        positive("target_slope", self.target_slope)?;
        if let Some(w) = self.ch1_half_width {
            positive("ch1_half_width", w)?;
        }
        self.tables.validate()?;
        step_count("record_dt", self.record_dt, self.dt)?;
        step_count("duration", self.duration, self.record_dt)?;
        if self.mode == FidelityMode::Waveform && self.duration > 10.0 {
            return Err(invalid("duration", "waveform mode is limited to 10 s; use envelope mode"));
        }
        for i in 0..3 {
            let ch = self.channel(i);
            let name = |field: usize| FIELD_NAMES[i][field];
            ch.noise.validate()?;
            ch.error_noise.validate()?;
            non_negative(name(0), ch.engage_at)?;
            finite(name(1), ch.lock_offset)?;
            finite(name(2), ch.initial_offset)?;
            for l in &ch.actuators {
                l.actuator.validate()?;
                l.pid.validate()?;
            }
            let count = |kind| ch.actuators.iter().filter(|l| l.actuator.kind == kind).count();
            let (piezos, currents) = (count(ActuatorKind::Piezo), count(ActuatorKind::Current));
            let ok = if i == 2 {
                piezos == 1 && currents == 0
            } else {
                piezos == 1 && currents == 1
            };
            if !ok {
                let want = if i == 2 { "exactly one piezo" } else { "one piezo and one current" };
                return Err(invalid(name(3), format!("expected {want} actuator")));
            }
            match (i, &ch.dither) {
                (0, Some(_)) => return Err(invalid("ch1 dither", "the first step is not dithered")),
                (0, None) => {}
                (_, None) => return Err(invalid(name(4), "required")),
                (_, Some(d)) => {
                    d.validate()?;
                    if d.depth == 0.0 {
                        return Err(invalid(name(4), "must be positive for a lock"));
                    }
                    if self.mode == FidelityMode::Waveform {
                        if self.dt > d.tau_lp / 10.0 {
                            return Err(invalid("dt", "waveform mode needs dt <= tau_lp / 10"));
                        }
                        // reports Undersampled with the bound
                        Demodulator::new(d, self.dt)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn dither(&self, i: usize) -> &DitherSpec {
        self.channel(i).dither.as_ref().expect("validated")
    }
}

const FIELD_NAMES: [[&str; 5]; 3] = [
    ["ch1.engage_at_s", "ch1.lock_offset_hz", "ch1.initial_offset_hz", "ch1.actuators", "ch1.dither"],
    ["ch2.engage_at_s", "ch2.lock_offset_hz", "ch2.initial_offset_hz", "ch2.actuators", "ch2.dither"],
    ["ch3.engage_at_s", "ch3.lock_offset_hz", "ch3.initial_offset_hz", "ch3.actuators", "ch3.dither"],
];

fn step_count(name: &'static str, span: f64, step: f64) -> Result<usize> {
    let n = (span / step).round();
    if n < 1.0 || (n * step - span).abs() > 1e-9 * span {
        return Err(invalid(name, format!("{span} s is not a whole multiple of {step} s")));
    }
    Ok(n as usize)
}

/// Lock status and loop statistics for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSummary {
    pub engaged: bool,
    pub lock_acquired: bool,
    /// Time at which the error left the capture range for more than 100 ms.
    pub lock_lost_at: Option<f64>,
    /// Per actuator, fraction of engaged steps spent at the range limit.
    pub saturation: Vec<f64>,
    /// RMS calibrated error while engaged, V.
    pub rms_error: f64,
    /// Multiplier taking the raw discriminator to the calibrated slope.
    pub calibration_gain: f64,
    /// Distance from the zero crossing to the nearest error extremum, Hz.
    pub capture_range: f64,
    /// Mean offset over the last tenth of the run, Hz.
    pub final_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub mode: FidelityMode,
    pub dt: f64,
    pub duration: f64,
    pub channels: [ChannelSummary; 3],
}

impl RunSummary {
    pub fn any_lock_lost(&self) -> bool {
        self.channels.iter().any(|c| c.engaged && !c.lock_acquired)
    }

    /// Key-value text, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            FidelityMode::Envelope => "envelope",
            FidelityMode::Waveform => "waveform",
        };
        let _ = writeln!(s, "mode = {mode}");
        let _ = writeln!(s, "dt_s = {}", self.dt);
        let _ = writeln!(s, "duration_s = {}", self.duration);
        for (i, c) in self.channels.iter().enumerate() {
            let p = format!("ch{}", i + 1);
            let _ = writeln!(s, "{p}.engaged = {}", c.engaged);
            let _ = writeln!(s, "{p}.lock_acquired = {}", c.lock_acquired);
            match c.lock_lost_at {
                Some(t) => {
                    let _ = writeln!(s, "{p}.lock_lost_at_s = {t}");
                }
                None => {
                    let _ = writeln!(s, "{p}.lock_lost_at_s = none");
                }
            }
            for (k, f) in c.saturation.iter().enumerate() {
                let _ = writeln!(s, "{p}.actuator{}.saturation_fraction = {f}", k + 1);
            }
            let _ = writeln!(s, "{p}.rms_error_v = {:e}", c.rms_error);
            let _ = writeln!(s, "{p}.calibration_gain = {:e}", c.calibration_gain);
            let _ = writeln!(s, "{p}.capture_range_hz = {:e}", c.capture_range);
            let _ = writeln!(s, "{p}.final_offset_hz = {:e}", c.final_offset);
        }
        s
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_text().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ChainRun {
    /// Closed-loop laser offsets as block means over `record_dt`.
    pub traces: [FrequencyTrace; 3],
    pub summary: RunSummary,
}

/// Discriminators of all three channels with their calibration.
pub struct ChainDiscriminators {
    tables: std::sync::Arc<CellTables>,
    ch1: DispersiveCurve,
    gains: [f64; 3],
    capture: [f64; 3],
}

impl ChainDiscriminators {
    pub fn new(config: &ServoChainConfig, scheme: &LadderScheme, target: &RydbergTarget) -> Result<Self> {
        let cascade = Cascade::new(scheme, target)?;
        let set = match config.mode {
            FidelityMode::Envelope => TableSet::Errors,
            FidelityMode::Waveform => TableSet::ErrorsAndSignals,
        };
        let tables = CellTables::cached(&cascade, config.dither(1), config.dither(2), &config.tables, set)?;
        let h = 2e3;
        let slope2 = (tables.reference_error(0.0, h) - tables.reference_error(0.0, -h)) / (2.0 * h);
        let slope3 = (tables.detection_error(0.0, 0.0, h) - tables.detection_error(0.0, 0.0, -h)) / (2.0 * h);
        let gain = |slope: f64| -> Result<f64> {
            if slope == 0.0 || !slope.is_finite() {
                return Err(Error::Calibration(format!("discriminator slope is {slope}")));
            }
            Ok(config.target_slope / slope)
        };
        let w1 = config.ch1_half_width.unwrap_or(0.5 * scheme.gamma1);
        let reach2 = (config.tables.fine_y + config.tables.coarse_y) / 2.0;
        let reach3 = (config.tables.fine_z + config.tables.coarse_z) / 2.0;
        Ok(ChainDiscriminators {
            ch1: DispersiveCurve {
                slope: config.target_slope,
                half_width: w1,
            },
            gains: [1.0, gain(slope2)?, gain(slope3)?],
            capture: [
                w1,
                capture_range(|d| tables.reference_error(0.0, d), reach2),
                capture_range(|d| tables.detection_error(0.0, 0.0, d), reach3),
            ],
            tables,
        })
    }

    pub fn calibration_gains(&self) -> [f64; 3] {
        self.gains
    }

    pub fn capture_ranges(&self) -> [f64; 3] {
        self.capture
    }

    pub fn tables(&self) -> &CellTables {
        &self.tables
    }

    /// Raw (uncalibrated) static error of each channel at laser offsets `f`
    /// with lock offsets `o`.
    #[inline]
    pub fn static_errors(&self, f: [f64; 3], o: [f64; 3]) -> [f64; 3] {
        [
            self.ch1.eval(f[0] - o[0]),
            self.tables.reference_error(f[0], f[1] - o[1]),
            self.tables.detection_error(f[0], f[1], f[2] - o[2]),
        ]
    }
}

/// Distance from zero to the nearest extremum of `e` on either side.
fn capture_range(e: impl Fn(f64) -> f64, reach: f64) -> f64 {
    let step = 10e3;
    let side = |sign: f64| {
        let mut best = 0.0f64;
        let mut at = reach;
        let mut d = step;
        while d <= reach {
            let v = e(sign * d).abs();
            if v > best {
                best = v;
                at = d;
            } else if v < 0.999 * best {
                break;
            }
            d += step;
        }
        at
    };
    side(1.0).min(side(-1.0))
}

/// First-order low-pass with the lock-in's time constant, for envelope mode.
struct LowPass {
    alpha: f64,
    stages: Vec<f64>,
}

impl LowPass {
    fn new(d: &DitherSpec, dt: f64) -> Self {
        LowPass {
            alpha: 1.0 - (-dt / d.tau_lp).exp(),
            stages: vec![0.0; d.filter_order as usize],
        }
    }

    #[inline]
    fn step(&mut self, mut x: f64) -> f64 {
        for y in self.stages.iter_mut() {
            *y += self.alpha * (x - *y);
            x = *y;
        }
        x
    }
}

enum Detector {
    Envelope([Option<LowPass>; 3]),
    Waveform {
        demod: [Option<Demodulator>; 3],
        omega: [f64; 3],
        phase: [f64; 3],
        amplitude: [f64; 3],
    },
}

struct ChannelRuntime {
    noise: NoiseStream,
    error_noise: NoiseStream,
    pid: Vec<PidState>,
    act: Vec<ActuatorState>,
    saturated: Vec<u64>,
    engaged_steps: u64,
    err_sq: f64,
    outside_since: Option<f64>,
    lost_at: Option<f64>,
    block_sum: f64,
    recorded: Vec<f64>,
}

/// Runs the three-channel chain and returns block-mean traces and a summary.
pub fn run_locked_chain(config: &ServoChainConfig, scheme: &LadderScheme, target: &RydbergTarget) -> Result<ChainRun> {
    config.validate()?;
    let disc = ChainDiscriminators::new(config, scheme, target)?;
    run_with_discriminators(config, &disc)
}

/// As `run_locked_chain`, reusing discriminators built for the same scheme,
/// target, dithers and mode.
pub fn run_with_discriminators(config: &ServoChainConfig, disc: &ChainDiscriminators) -> Result<ChainRun> {
    config.validate()?;
    if config.mode == FidelityMode::Waveform && !disc.tables.has_signals() {
        return Err(Error::Config("waveform mode needs discriminators built in waveform mode".into()));
    }
    let dt = config.dt;
    let steps = (config.duration / dt).round() as u64;
    let per_block = step_count("record_dt", config.record_dt, dt)? as u64;
    let lost_after = 0.1;

    let mut rt: Vec<ChannelRuntime> = (0..3)
        .map(|i| {
            let ch = config.channel(i);
            Ok(ChannelRuntime {
                noise: NoiseStream::new(&ch.noise, dt)?,
                error_noise: NoiseStream::new(&ch.error_noise, dt)?,
                pid: vec![PidState::default(); ch.actuators.len()],
                act: vec![ActuatorState::default(); ch.actuators.len()],
                saturated: vec![0; ch.actuators.len()],
                engaged_steps: 0,
                err_sq: 0.0,
                outside_since: None,
                lost_at: None,
                block_sum: 0.0,
                recorded: Vec::with_capacity((steps / per_block) as usize),
            })
        })
        .collect::<Result<_>>()?;

    let mut detector = match config.mode {
        FidelityMode::Envelope => Detector::Envelope([
            None,
            Some(LowPass::new(config.dither(1), dt)),
            Some(LowPass::new(config.dither(2), dt)),
        ]),
        FidelityMode::Waveform => {
            let (d2, d3) = (config.dither(1), config.dither(2));
            Detector::Waveform {
                demod: [None, Some(Demodulator::new(d2, dt)?), Some(Demodulator::new(d3, dt)?)],
                omega: [0.0, 2.0 * PI * d2.f_mod, 2.0 * PI * d3.f_mod],
                phase: [0.0, d2.phase, d3.phase],
                amplitude: [0.0, d2.amplitude(), d3.amplitude()],
            }
        }
    };

    let offsets = [config.ch1.lock_offset, config.ch2.lock_offset, config.ch3.lock_offset];
    let kappa = [1.0, disc.tables.kappa2(), disc.tables.kappa3()];
    let tables = &*disc.tables;

    for k in 0..steps {
        let t = k as f64 * dt;
        let mut f = [0.0; 3];
        for i in 0..3 {
            let r = &mut rt[i];
            let correction: f64 = r.act.iter().map(|a| a.output).sum();
            f[i] = config.channel(i).initial_offset + r.noise.next_sample() + correction;
            r.block_sum += f[i];
        }

        let raw = match &mut detector {
            Detector::Envelope(lp) => {
                let e = disc.static_errors(f, offsets);
                let mut out = [e[0], 0.0, 0.0];
                for i in 1..3 {
                    out[i] = lp[i].as_mut().map_or(e[i], |p| p.step(e[i]));
                }
                out
            }
            Detector::Waveform {
                demod,
                omega,
                phase,
                amplitude,
            } => {
                let f2 = f[1] + amplitude[1] * (omega[1] * t + phase[1]).sin();
                let f3 = f[2] + amplitude[2] * (omega[2] * t + phase[2]).sin();
                let s2 = tables.reference_signal(f[0], f2 - offsets[1])?;
                let s3 = tables.detection_signal(f[0], f2, f3 - offsets[2])?;
                let e2 = demod[1].as_mut().map_or(0.0, |d| d.step(s2));
                let e3 = demod[2].as_mut().map_or(0.0, |d| d.step(s3));
                [disc.ch1.eval(f[0] - offsets[0]), e2, e3]
            }
        };

        for i in 0..3 {
            let ch = config.channel(i);
            let r = &mut rt[i];
            let e_cal = disc.gains[i] * (raw[i] + r.error_noise.next_sample());
            let active = ch.engage && t >= ch.engage_at && r.lost_at.is_none();
            if active {
                r.engaged_steps += 1;
                r.err_sq += e_cal * e_cal;
                for (j, l) in ch.actuators.iter().enumerate() {
                    let cmd = pid_update(&mut r.pid[j], -e_cal, &l.pid, dt);
                    let out = actuator_response(cmd, &l.actuator, &mut r.act[j], dt);
                    if out.abs() >= l.actuator.range {
                        r.saturated[j] += 1;
                    }
                }
                let mismatch = f[i] - offsets[i] - kappa[i] * if i == 0 { 0.0 } else { f[0] };
                if mismatch.abs() > disc.capture[i] {
                    let since = *r.outside_since.get_or_insert(t);
                    if t - since > lost_after {
                        r.lost_at = Some(t);
                    }
                } else {
                    r.outside_since = None;
                }
            }
            if (k + 1) % per_block == 0 {
                r.recorded.push(r.block_sum / per_block as f64);
                r.block_sum = 0.0;
            }
        }
    }

    let mut traces = Vec::with_capacity(3);
    let mut summaries = Vec::with_capacity(3);
    for (i, r) in rt.into_iter().enumerate() {
        let ch = config.channel(i);
        let tail = (r.recorded.len() / 10).max(1);
        let final_offset = r.recorded[r.recorded.len() - tail..].iter().sum::<f64>() / tail as f64;
        let engaged = ch.engage && ch.engage_at < config.duration;
        summaries.push(ChannelSummary {
            engaged,
            lock_acquired: engaged && r.lost_at.is_none() && r.outside_since.is_none(),
            lock_lost_at: r.lost_at,
            saturation: r
                .saturated
                .iter()
                .map(|&s| if r.engaged_steps == 0 { 0.0 } else { s as f64 / r.engaged_steps as f64 })
                .collect(),
            rms_error: if r.engaged_steps == 0 {
                0.0
            } else {
                (r.err_sq / r.engaged_steps as f64).sqrt()
            },
            calibration_gain: disc.gains[i],
            capture_range: disc.capture[i],
            final_offset,
        });
        traces.push(FrequencyTrace::new(config.record_dt, r.recorded, format!("closed-loop ch{}", i + 1))?);
    }
    let traces: [FrequencyTrace; 3] = traces.try_into().expect("three channels");
    let channels: [ChannelSummary; 3] = summaries.try_into().expect("three channels");
    Ok(ChainRun {
        traces,
        summary: RunSummary {
            mode: config.mode,
            dt,
            duration: config.duration,
            channels,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pid_examples() {
        let g = PidGains {
            kp: 2.0,
            ki: 0.0,
            kd: 0.0,
            integrator_limit: 10.0,
        };
        let mut s = PidState::default();
        assert_eq!(pid_update(&mut s, 0.0, &g, 1e-3), 0.0);
        let mut s = PidState::default();
        assert_eq!(pid_update(&mut s, 0.5, &g, 1e-3), 1.0);

        let g = PidGains {
            kp: 1.0,
            ki: 10.0,
            kd: 0.0,
            integrator_limit: 100.0,
        };
        let mut s = PidState::default();
        for _ in 0..100 {
            pid_update(&mut s, 1.0, &g, 1e-3);
        }
        assert!((s.integral - 1.0).abs() < 1e-9);
    }

    #[test]
    fn integrator_clamps() {
        let g = PidGains {
            kp: 1.0,
            ki: 1000.0,
            kd: 0.0,
            integrator_limit: 0.5,
        };
        let mut s = PidState::default();
        for _ in 0..1000 {
            pid_update(&mut s, 1.0, &g, 1e-3);
        }
        assert_eq!(s.integral, 0.5);
        for _ in 0..1000 {
            pid_update(&mut s, -1.0, &g, 1e-3);
        }
        assert_eq!(s.integral, -0.5);
    }

    #[test]
    fn no_derivative_kick_on_first_step() {
        let g = PidGains {
            kp: 0.0,
            ki: 0.0,
            kd: 1.0,
            integrator_limit: 1.0,
        };
        let mut s = PidState::default();
        assert_eq!(pid_update(&mut s, 1.0, &g, 1e-3), 0.0);
        assert!((pid_update(&mut s, 2.0, &g, 1e-3) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn actuator_step_response() {
        let a = Actuator::piezo();
        let mut s = ActuatorState::default();
        assert_eq!(actuator_response(0.0, &a, &mut s, 1e-6), 0.0);

        let dt = 1e-6;
        let t_char = 1.0 / (2.0 * PI * a.bandwidth);
        let n = (t_char / dt).round() as usize;
        let mut s = ActuatorState::default();
        let mut out = 0.0;
        for _ in 0..n {
            out = actuator_response(1.0, &a, &mut s, dt);
        }
        let expected = 1.0 - (-2.0 * PI * a.bandwidth * n as f64 * dt).exp();
        assert!((out / a.gain - expected).abs() < 0.01 * expected);

        for _ in 0..100_000 {
            out = actuator_response(1.0, &a, &mut s, dt);
        }
        assert!((out - a.gain).abs() < 1e-3 * a.gain);
    }

    #[test]
    fn actuator_saturates() {
        let a = Actuator::current();
        let mut s = ActuatorState::default();
        let mut out = 0.0;
        for _ in 0..10_000 {
            out = actuator_response(100.0, &a, &mut s, 1e-5);
        }
        assert_eq!(out, a.range);
    }

    #[test]
    fn default_gains_have_phase_margin() {
        let c = ServoChainConfig::default_chain();
        for i in 0..3 {
            let ch = c.channel(i);
            let tau = ch.dither.as_ref().map(|d| d.tau_lp);
            let pm = phase_margin(&ch.actuators, c.target_slope, tau, c.dt).unwrap();
            assert!(pm >= 60.0, "ch{} phase margin {pm}", i + 1);
        }
    }

    #[test]
    fn default_chain_validates() {
        ServoChainConfig::default_chain().validate().unwrap();
        ServoChainConfig::default_chain().waveform().validate().unwrap();
        let mut bad = ServoChainConfig::default_chain();
        bad.ch3.actuators.push(ActuatorLoop {
            actuator: Actuator::current(),
            pid: bad.ch1.actuators[0].pid,
        });
        assert!(bad.validate().is_err());
        let mut bad = ServoChainConfig::default_chain();
        bad.record_dt = 0.00015;
        assert!(bad.validate().is_err());
    }
}
