//! Frequency-modulation spectroscopy: sinusoidal dither of one laser and
//! phase-sensitive detection of the probe absorption.
//!
//! The dither moves the laser to `delta + (m / 2) sin(2 pi f_mod t + phase)`,
//! where `m` is the peak-to-peak modulation depth. The lock-in multiplies the
//! detector signal by `2 sin(2 pi f_mod t + phase)` and low-pass filters it,
//! so a detector signal `A sin(...)` demodulates to `A`. In the small-depth
//! limit the error signal is `(m / 2) dS/d(delta)`.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::atomic::{Axis, Cascade, Detunings, LadderScheme, RydbergTarget};
use crate::error::{finite, invalid, non_negative, positive, Error, Result};
use crate::noise::fmt17;

/// 10 mV/MHz.
pub const DEFAULT_TARGET_SLOPE: f64 = 1e-8;

/// Minimum number of dither phases in the static cycle average.
pub const MIN_DITHER_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitherSpec {
    /// Peak-to-peak frequency excursion, Hz.
    #[serde(rename = "depth_hz")]
    pub depth: f64,
    #[serde(rename = "f_mod_hz")]
    pub f_mod: f64,
    #[serde(rename = "phase_rad", default)]
    pub phase: f64,
    /// Lock-in low-pass time constant, s.
    #[serde(rename = "tau_lp_s")]
    pub tau_lp: f64,
    /// Number of identical cascaded low-pass poles.
    #[serde(default = "default_order")]
    pub filter_order: u32,
    /// Dither phases sampled per cycle in the static error curve.
    #[serde(default = "default_points")]
    pub cycle_points: usize,
}

fn default_order() -> u32 {
    1
}

fn default_points() -> usize {
    128
}

impl DitherSpec {
    /// Third-step dither: 15 MHz at 90 kHz, 100 us lock-in time constant.
    pub fn third_step() -> Self {
        DitherSpec {
            depth: 15e6,
            f_mod: 90e3,
            phase: 0.0,
            tau_lp: 100e-6,
            filter_order: 1,
            cycle_points: default_points(),
        }
    }

    /// Second-step dither: 1 MHz at 30 kHz.
    pub fn second_step() -> Self {
        DitherSpec {
            depth: 1e6,
            f_mod: 30e3,
            ..Self::third_step()
        }
    }

    pub fn with_depth(mut self, depth: f64) -> Self {
        self.depth = depth;
        self
    }

    pub fn amplitude(&self) -> f64 {
        0.5 * self.depth
    }

    pub fn validate(&self) -> Result<()> {
        non_negative("depth", self.depth)?;
        positive("f_mod", self.f_mod)?;
        finite("phase", self.phase)?;
        positive("tau_lp", self.tau_lp)?;
        if self.filter_order == 0 {
            return Err(invalid("filter_order", "must be at least 1"));
        }
        if self.cycle_points < MIN_DITHER_POINTS || self.cycle_points % 2 != 0 {
            return Err(invalid(
                "cycle_points",
                format!(
                    "must be even and at least {MIN_DITHER_POINTS}, got {}",
                    self.cycle_points
                ),
            ));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let product = self.f_mod * self.tau_lp;
        if product < 1.0 {
            vec![format!(
                "f_mod * tau_lp = {product:.3} < 1: demodulated output will carry strong ripple"
            )]
        } else {
            Vec::new()
        }
    }

    /// `sin(theta_j)` for `j = 0..cycle_points`, built so that the second
    /// half is the exact negation of the first.
    pub fn cycle_sines(&self) -> Vec<f64> {
        let n = self.cycle_points;
        let mut s = vec![0.0; n];
        for j in 1..n / 2 {
            let v = (2.0 * PI * j as f64 / n as f64).sin();
            s[j] = v;
            s[n - j] = -v;
        }
        s
    }
}

/// Quasi-static first harmonic of `signal` under `dither`:
/// `(2/N) sum_j S(delta + (m/2) sin theta_j) sin theta_j`.
pub fn cycle_average<F>(signal: F, delta: f64, amplitude: f64, sines: &[f64]) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let mut acc = 0.0;
    for &s in sines {
        if s != 0.0 {
            acc += signal(delta + amplitude * s)? * s;
        }
    }
    Ok(2.0 * acc / sines.len() as f64)
}

/// Static error signal along one axis, as a reusable function of detuning.
pub struct ErrorFunction {
    cascade: Cascade,
    axis: Axis,
    fixed: Detunings,
    amplitude: f64,
    sines: Vec<f64>,
}

impl ErrorFunction {
    pub fn new(
        scheme: &LadderScheme,
        target: &RydbergTarget,
        dither: &DitherSpec,
        axis: Axis,
        fixed: Detunings,
    ) -> Result<Self> {
        dither.validate()?;
        Ok(ErrorFunction {
            cascade: Cascade::new(scheme, target)?,
            axis,
            fixed,
            amplitude: dither.amplitude(),
            sines: dither.cycle_sines(),
        })
    }

    pub fn eval(&self, delta: f64) -> Result<f64> {
        finite("delta", delta)?;
        if self.amplitude == 0.0 {
            return Ok(0.0);
        }
        cycle_average(
            |x| self.cascade.signal(&self.fixed.with(self.axis, x)),
            delta,
            self.amplitude,
            &self.sines,
        )
    }
}

/// Error-signal values on `grid` without locating a lock point.
pub fn error_curve_values(
    scheme: &LadderScheme,
    target: &RydbergTarget,
    dither: &DitherSpec,
    axis: Axis,
    grid: &[f64],
    fixed: Detunings,
) -> Result<Vec<f64>> {
    let f = ErrorFunction::new(scheme, target, dither, axis, fixed)?;
    grid.iter().map(|&x| f.eval(x)).collect()
}

/// An error signal sampled on a detuning grid, with its lock point.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub axis: Axis,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Derivative at the zero crossing, V/Hz.
    pub slope_at_zero: f64,
    pub zero_crossing: f64,
}

impl ErrorCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "detuning_hz,error_v")?;
        for (d, e) in self.grid.iter().zip(&self.values) {
            writeln!(out, "{},{}", fmt17(*d), fmt17(*e))?;
        }
        Ok(())
    }

    /// Multiplies every value and the slope by `gain`.
    pub fn scaled(&self, gain: f64) -> ErrorCurve {
        ErrorCurve {
            values: self.values.iter().map(|v| v * gain).collect(),
            slope_at_zero: self.slope_at_zero * gain,
            ..self.clone()
        }
    }
}

/// Bracket width at which lock-point bisection stops, Hz.
const ZERO_TOLERANCE: f64 = 1.0;
/// Half step of the central difference used for the lock-point slope, Hz.
const SLOPE_STEP: f64 = 2e3;

/// Picks the steepest sign change of `values` and refines it by bisection.
pub(crate) fn locate_zero<F>(grid: &[f64], values: &[f64], f: F) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for i in 0..values.len().saturating_sub(1) {
        let (a, b) = (values[i], values[i + 1]);
        let brackets = (a < 0.0 && b > 0.0) || (a > 0.0 && b < 0.0) || (a == 0.0 && b != 0.0);
        if !brackets {
            continue;
        }
        let steepness = ((b - a) / (grid[i + 1] - grid[i])).abs();
        if best.map_or(true, |(_, s)| steepness > s) {
            best = Some((i, steepness));
        }
    }
    let (i, _) = best.ok_or(Error::NoLockPoint)?;
    let (mut lo, mut hi) = (grid[i], grid[i + 1]);
    let (mut flo, fhi) = (values[i], values[i + 1]);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    while hi - lo > ZERO_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Quasi-static error curve of the dithered `axis` on a sorted grid.
pub fn static_error_curve(
    scheme: &LadderScheme,
    target: &RydbergTarget,
    dither: &DitherSpec,
    axis: Axis,
    grid: &[f64],
    fixed: Detunings,
) -> Result<ErrorCurve> {
    if grid.len() < 2 {
        return Err(invalid("grid", "need at least two points"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("grid", "must be strictly increasing"));
    }
    let f = ErrorFunction::new(scheme, target, dither, axis, fixed)?;
    let values = grid.iter().map(|&x| f.eval(x)).collect::<Result<Vec<_>>>()?;
    let zero_crossing = locate_zero(grid, &values, |x| f.eval(x))?;
    let slope_at_zero =
        (f.eval(zero_crossing + SLOPE_STEP)? - f.eval(zero_crossing - SLOPE_STEP)?) / (2.0 * SLOPE_STEP);
    if !(slope_at_zero.is_finite() && slope_at_zero != 0.0) {
        return Err(Error::NoLockPoint);
    }
    Ok(ErrorCurve {
        axis,
        grid: grid.to_vec(),
        values,
        slope_at_zero,
        zero_crossing,
    })
}

/// Gain `g` with `g * slope_at_zero == target_slope`.
pub fn calibrate_slope(curve: &ErrorCurve, target_slope: f64) -> Result<f64> {
    if !target_slope.is_finite() || target_slope == 0.0 {
        return Err(Error::Calibration(format!(
            "target slope must be finite and nonzero, got {target_slope}"
        )));
    }
    let slope = curve.slope_at_zero;
    if !slope.is_finite() || slope == 0.0 {
        return Err(Error::Calibration(format!(
            "error curve slope {slope} cannot be scaled to {target_slope}"
        )));
    }
    Ok(target_slope / slope)
}

/// Filter state of a lock-in, carried between calls.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemodState {
    pub stages: Vec<f64>,
    /// Time of the next input sample, s.
    pub t: f64,
}

/// Streaming lock-in: mixer plus cascaded single-pole low-pass.
#[derive(Debug, Clone)]
pub struct Demodulator {
    omega: f64,
    phase: f64,
    dt: f64,
    alpha: f64,
    state: DemodState,
}

impl Demodulator {
    pub fn new(dither: &DitherSpec, dt: f64) -> Result<Self> {
        Self::with_state(dither, dt, DemodState::default())
    }

    pub fn with_state(dither: &DitherSpec, dt: f64, mut state: DemodState) -> Result<Self> {
        dither.validate()?;
        positive("dt", dt)?;
        let required = 1.0 / (20.0 * dither.f_mod);
        if dt > required * (1.0 + 1e-12) {
            return Err(Error::Undersampled { dt, required });
        }
        state.stages.resize(dither.filter_order as usize, 0.0);
        Ok(Demodulator {
            omega: 2.0 * PI * dither.f_mod,
            phase: dither.phase,
            dt,
            alpha: 1.0 - (-dt / dither.tau_lp).exp(),
            state,
        })
    }

    /// Reference `sin(2 pi f_mod t + phase)` at the next sample time.
    pub fn reference(&self) -> f64 {
        (self.omega * self.state.t + self.phase).sin()
    }

    /// Feeds one detector sample and returns the filtered output.
    pub fn step(&mut self, detector: f64) -> f64 {
        let mixed = 2.0 * detector * self.reference();
        self.filter(mixed)
    }

    /// Feeds an already-mixed sample through the low-pass.
    pub fn filter(&mut self, mut x: f64) -> f64 {
        for y in self.state.stages.iter_mut() {
            *y += self.alpha * (x - *y);
            x = *y;
        }
        self.state.t += self.dt;
        x
    }

    pub fn output(&self) -> f64 {
        *self.state.stages.last().unwrap_or(&0.0)
    }

    pub fn state(&self) -> &DemodState {
        &self.state
    }

    pub fn into_state(self) -> DemodState {
        self.state
    }
}

/// Demodulates a detector record sampled at `dt`, starting from rest at t = 0.
pub fn demodulate(detector: &[f64], dt: f64, dither: &DitherSpec) -> Result<Vec<f64>> {
    demodulate_from(detector, dt, dither, DemodState::default()).map(|(out, _)| out)
}

/// Demodulates starting from an explicit filter state; returns the state
/// after the last sample so that records can be processed in pieces.
pub fn demodulate_from(
    detector: &[f64],
    dt: f64,
    dither: &DitherSpec,
    state: DemodState,
) -> Result<(Vec<f64>, DemodState)> {
    let mut lockin = Demodulator::with_state(dither, dt, state)?;
    let out = detector.iter().map(|&x| lockin.step(x)).collect();
    Ok((out, lockin.into_state()))
}
