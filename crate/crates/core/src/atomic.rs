//! Velocity-integrated cascade signal of a three-step ladder in a vapor cell.
//!
//! The first-step probe absorption is reduced whenever atoms of the same
//! velocity class are also resonant with the upper steps. With detunings
//! `d1, d2, d3` and atomic velocity `v`, each step sees
//! `delta_i(v) = d_i - v / lambda_i` for co-propagating beams, and the
//! photodetector signal is
//!
//! ```text
//! S = G * Int W(v) L1 L2 [C2 + C3 A(target) L3] dv
//! ```
//!
//! with `W` the one-dimensional Maxwell–Boltzmann density and `Li` unit-peak
//! Lorentzians of FWHM `gamma_i`. The product form is a rate-equation cascade;
//! two-photon coherences are not modelled.
//!
//! Internally the velocity is measured as the first-step Doppler shift
//! `x = v / lambda1` (Hz), so `delta_i = d_i - kappa_i x` with
//! `kappa_i = lambda1 / lambda_i`.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{finite, invalid, positive, Result};
use crate::noise::fmt17;
use crate::quad::{integrate, QuadSettings};

const BOLTZMANN: f64 = 1.380_649e-23;
const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Mass of 85Rb, kg.
pub const RB85_MASS: f64 = 84.911_789_738 * ATOMIC_MASS_UNIT;

/// Velocity integrals extend over +-this many thermal widths.
const DOPPLER_SPAN: f64 = 10.0;

/// Unit-peak Lorentzian of full width `gamma_fwhm` at detuning `delta`.
pub fn lorentzian(delta: f64, gamma_fwhm: f64) -> Result<f64> {
    positive("gamma_fwhm", gamma_fwhm)?;
    finite("delta", delta)?;
    Ok(lorentz(delta, 0.5 * gamma_fwhm))
}

/// Unchecked Lorentzian with half width `hw`.
#[inline]
pub(crate) fn lorentz(delta: f64, hw: f64) -> f64 {
    let h2 = hw * hw;
    h2 / (delta * delta + h2)
}

/// The three-step excitation scheme and vapor-cell parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderScheme {
    #[serde(rename = "lambda1_m")]
    pub lambda1: f64,
    #[serde(rename = "lambda2_m")]
    pub lambda2: f64,
    #[serde(rename = "lambda3_m")]
    pub lambda3: f64,
    /// Effective Lorentzian FWHM of each step, Hz.
    #[serde(rename = "gamma1_hz")]
    pub gamma1: f64,
    #[serde(rename = "gamma2_hz")]
    pub gamma2: f64,
    #[serde(rename = "gamma3_hz")]
    pub gamma3: f64,
    /// Contrast of the two-step (Doppler-free peak) term.
    pub c2: f64,
    /// Contrast of the three-step (Rydberg) term.
    pub c3: f64,
    #[serde(rename = "temperature_k")]
    pub temperature: f64,
    #[serde(rename = "atomic_mass_kg")]
    pub atomic_mass: f64,
    /// All three beams travel the same way through the cell. When false the
    /// third beam counter-propagates.
    pub copropagating: bool,
    /// Photodetector calibration gain G, V.
    #[serde(rename = "gain_v")]
    pub gain: f64,
}

impl Default for LadderScheme {
    fn default() -> Self {
        Self::rb85_default()
    }
}

impl LadderScheme {
    /// 5S1/2 -> 5P3/2 -> 5D5/2 -> Rydberg in 85Rb at room temperature.
    pub fn rb85_default() -> Self {
        LadderScheme {
            lambda1: 780e-9,
            lambda2: 776e-9,
            lambda3: 1260e-9,
            gamma1: 6e6,
            gamma2: 2e6,
            gamma3: 3e6,
            c2: 0.3,
            c3: 0.05,
            temperature: 293.0,
            atomic_mass: RB85_MASS,
            copropagating: true,
            gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("lambda1", self.lambda1)?;
        positive("lambda2", self.lambda2)?;
        positive("lambda3", self.lambda3)?;
        positive("gamma1", self.gamma1)?;
        positive("gamma2", self.gamma2)?;
        positive("gamma3", self.gamma3)?;
        for (name, c) in [("c2", self.c2), ("c3", self.c3)] {
            if !(c > 0.0 && c <= 1.0) {
                return Err(invalid(name, format!("contrast must lie in (0, 1], got {c}")));
            }
        }
        positive("temperature", self.temperature)?;
        positive("atomic_mass", self.atomic_mass)?;
        finite("gain", self.gain)?;
        Ok(())
    }

    /// Validation for the rubidium ladder, which additionally requires the
    /// ordering of its wavelengths, `lambda2 < lambda1 < lambda3`.
    pub fn validate_rb85(&self) -> Result<()> {
        self.validate()?;
        if !(self.lambda2 < self.lambda1 && self.lambda1 < self.lambda3) {
            return Err(invalid(
                "lambda",
                "rubidium ladder needs lambda2 < lambda1 < lambda3",
            ));
        }
        Ok(())
    }

    /// Doppler factor of step 2 relative to step 1, `lambda1 / lambda2`.
    pub fn kappa2(&self) -> f64 {
        self.lambda1 / self.lambda2
    }

    /// Signed Doppler factor of step 3 relative to step 1.
    pub fn kappa3(&self) -> f64 {
        let k = self.lambda1 / self.lambda3;
        if self.copropagating {
            k
        } else {
            -k
        }
    }

    /// Thermal rms velocity along the beams, m/s.
    pub fn thermal_velocity(&self) -> f64 {
        (BOLTZMANN * self.temperature / self.atomic_mass).sqrt()
    }

    /// Thermal width expressed as a first-step Doppler shift, Hz.
    pub fn doppler_sigma(&self) -> f64 {
        self.thermal_velocity() / self.lambda1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Series {
    #[serde(rename = "P3/2")]
    P3_2,
    #[serde(rename = "F7/2")]
    F7_2,
}

impl Series {
    pub fn default_quantum_defect(self) -> f64 {
        match self {
            Series::P3_2 => 2.65,
            Series::F7_2 => 0.016,
        }
    }

    /// Principal quantum numbers for which locking has been demonstrated.
    pub fn demonstrated_range(self) -> (u32, u32) {
        match self {
            Series::P3_2 => (36, 70),
            Series::F7_2 => (33, 90),
        }
    }

    /// Relative line strength at equal effective quantum number.
    pub fn strength(self) -> f64 {
        match self {
            Series::P3_2 => 0.5,
            Series::F7_2 => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Series::P3_2 => "P3/2",
            Series::F7_2 => "F7/2",
        }
    }
}

impl fmt::Display for Series {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Series {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "P3/2" | "P" | "p" | "P3_2" => Ok(Series::P3_2),
            "F7/2" | "F" | "f" | "F7_2" => Ok(Series::F7_2),
            other => Err(invalid("series", format!("unknown Rydberg series `{other}`"))),
        }
    }
}

/// Reference point of the amplitude scaling: 50F7/2 has amplitude 1.
pub const REFERENCE_N: u32 = 50;

/// The Rydberg level addressed by the third step.
#[derive(Debug, Clone, PartialEq)]
pub struct RydbergTarget {
    pub n: u32,
    pub series: Series,
    pub quantum_defect: f64,
    /// Amplitude scales as `(n - defect)^-exponent`.
    pub amplitude_exponent: f64,
}

impl RydbergTarget {
    pub fn new(n: u32, series: Series) -> Result<Self> {
        Self::with_defect(n, series, series.default_quantum_defect())
    }

    pub fn with_defect(n: u32, series: Series, quantum_defect: f64) -> Result<Self> {
        finite("quantum_defect", quantum_defect)?;
        if !(n as f64 - quantum_defect > 0.0) {
            return Err(invalid(
                "n",
                format!("effective quantum number {n} - {quantum_defect} must be positive"),
            ));
        }
        Ok(RydbergTarget {
            n,
            series,
            quantum_defect,
            amplitude_exponent: 3.0,
        })
    }

    pub fn effective_n(&self) -> f64 {
        self.n as f64 - self.quantum_defect
    }

    /// Warnings for levels outside the demonstrated locking range. Such
    /// targets are still simulated.
    pub fn warnings(&self) -> Vec<String> {
        let (lo, hi) = self.series.demonstrated_range();
        if self.n < lo || self.n > hi {
            vec![format!(
                "{}{} is beyond demonstrated range ({lo}-{hi}{})",
                self.n, self.series, self.series
            )]
        } else {
            Vec::new()
        }
    }
}

impl fmt::Display for RydbergTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.n, self.series)
    }
}

/// Relative third-step signal amplitude, normalized to 1 at 50F7/2.
pub fn rydberg_amplitude(target: &RydbergTarget) -> f64 {
    let reference = REFERENCE_N as f64 - Series::F7_2.default_quantum_defect();
    target.series.strength() * (reference / target.effective_n()).powf(target.amplitude_exponent)
}

/// Detunings of the three lasers from their zero-velocity resonances, Hz.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Detunings {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl Detunings {
    pub const ZERO: Detunings = Detunings {
        d1: 0.0,
        d2: 0.0,
        d3: 0.0,
    };

    pub fn new(d1: f64, d2: f64, d3: f64) -> Self {
        Detunings { d1, d2, d3 }
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::One => self.d1,
            Axis::Two => self.d2,
            Axis::Three => self.d3,
        }
    }

    pub fn with(mut self, axis: Axis, value: f64) -> Self {
        match axis {
            Axis::One => self.d1 = value,
            Axis::Two => self.d2 = value,
            Axis::Three => self.d3 = value,
        }
        self
    }
}

/// One of the three excitation steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    One,
    Two,
    Three,
}

impl Axis {
    pub fn from_index(i: u8) -> Result<Axis> {
        match i {
            1 => Ok(Axis::One),
            2 => Ok(Axis::Two),
            3 => Ok(Axis::Three),
            other => Err(invalid("axis", format!("must be 1, 2 or 3, got {other}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Axis::One => 1,
            Axis::Two => 2,
            Axis::Three => 3,
        }
    }
}

/// Precomputed constants of the velocity integral for one scheme and target.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub(crate) scheme: LadderScheme,
    pub(crate) amplitude: f64,
    pub(crate) kappa2: f64,
    pub(crate) kappa3: f64,
    pub(crate) sigma: f64,
    pub(crate) hw1: f64,
    pub(crate) hw2: f64,
    pub(crate) hw3: f64,
    norm: f64,
    quad: QuadSettings,
}

impl Cascade {
    pub fn new(scheme: &LadderScheme, target: &RydbergTarget) -> Result<Self> {
        scheme.validate()?;
        let sigma = scheme.doppler_sigma();
        Ok(Cascade {
            scheme: scheme.clone(),
            amplitude: rydberg_amplitude(target),
            kappa2: scheme.kappa2(),
            kappa3: scheme.kappa3(),
            sigma,
            hw1: 0.5 * scheme.gamma1,
            hw2: 0.5 * scheme.gamma2,
            hw3: 0.5 * scheme.gamma3,
            norm: 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma),
            quad: QuadSettings::default(),
        })
    }

    pub fn scheme(&self) -> &LadderScheme {
        &self.scheme
    }

    /// Relative Rydberg amplitude A(target) in use.
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Thermal width as a first-step Doppler shift, Hz.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Maxwell–Boltzmann density over `x = v / lambda1`.
    #[inline]
    pub(crate) fn weight(&self, x: f64) -> f64 {
        let r = x / self.sigma;
        self.norm * (-0.5 * r * r).exp()
    }

    pub(crate) fn span(&self) -> f64 {
        DOPPLER_SPAN * self.sigma
    }

    /// Signal integrand at velocity coordinate `x`, without the gain.
    #[inline]
    pub fn integrand(&self, x: f64, d: &Detunings) -> f64 {
        let l1 = lorentz(d.d1 - x, self.hw1);
        let l2 = lorentz(d.d2 - self.kappa2 * x, self.hw2);
        let l3 = lorentz(d.d3 - self.kappa3 * x, self.hw3);
        self.weight(x) * l1 * l2 * (self.scheme.c2 + self.scheme.c3 * self.amplitude * l3)
    }

    /// Velocity coordinates at which each step is resonant.
    pub(crate) fn resonances(&self, d: &Detunings) -> [f64; 3] {
        [d.d1, d.d2 / self.kappa2, d.d3 / self.kappa3]
    }

    /// Photodetector signal, V.
    pub fn signal(&self, d: &Detunings) -> Result<f64> {
        finite("d1", d.d1)?;
        finite("d2", d.d2)?;
        finite("d3", d.d3)?;
        let span = self.span();
        let r = integrate(
            |x| [self.integrand(x, d)],
            -span,
            span,
            &self.resonances(d),
            &self.quad,
        )?;
        Ok(self.scheme.gain * r.value[0])
    }

    /// Upper bound `G (C2 + C3 A)` of the signal.
    pub fn peak_bound(&self) -> f64 {
        self.scheme.gain * (self.scheme.c2 + self.scheme.c3 * self.amplitude)
    }
}

/// Detection-cell photodetector signal at the given laser detunings, V.
pub fn detector_signal(
    d1: f64,
    d2: f64,
    d3: f64,
    scheme: &LadderScheme,
    target: &RydbergTarget,
) -> Result<f64> {
    Cascade::new(scheme, target)?.signal(&Detunings::new(d1, d2, d3))
}

/// A lineshape scan along one laser axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LineScan {
    pub axis: Axis,
    pub detuning: Vec<f64>,
    pub signal: Vec<f64>,
}

impl LineScan {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "detuning_hz,signal_v")?;
        for (d, s) in self.detuning.iter().zip(&self.signal) {
            writeln!(out, "{},{}", fmt17(*d), fmt17(*s))?;
        }
        Ok(())
    }

    /// Full width at half maximum by linear interpolation of the
    /// half-maximum crossings either side of the peak.
    pub fn fwhm(&self) -> Option<f64> {
        let (imax, &smax) = self
            .signal
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))?;
        let half = 0.5 * smax;
        let cross = |i: usize, j: usize| {
            let (x0, x1) = (self.detuning[i], self.detuning[j]);
            let (y0, y1) = (self.signal[i], self.signal[j]);
            x0 + (half - y0) * (x1 - x0) / (y1 - y0)
        };
        let left = (1..=imax).rev().find(|&i| self.signal[i - 1] < half).map(|i| cross(i - 1, i))?;
        let right = (imax..self.signal.len() - 1)
            .find(|&i| self.signal[i + 1] < half)
            .map(|i| cross(i, i + 1))?;
        Some(right - left)
    }
}

/// Symmetric grid of `points` values spanning `[-half_range, half_range]`.
pub fn symmetric_grid(half_range: f64, points: usize) -> Vec<f64> {
    let m = (points - 1) as f64;
    (0..points)
        .map(|i| half_range * ((2 * i) as f64 - m) / m)
        .collect()
}

/// Scans the detuning of `axis` over `+-half_range` with the other two held
/// at their values in `fixed`.
pub fn scan_lineshape(
    scheme: &LadderScheme,
    target: &RydbergTarget,
    axis: Axis,
    half_range: f64,
    points: usize,
    fixed: Detunings,
) -> Result<LineScan> {
    positive("half_range", half_range)?;
    if points < 51 {
        return Err(invalid("points", format!("need at least 51, got {points}")));
    }
    let cascade = Cascade::new(scheme, target)?;
    let detuning = symmetric_grid(half_range, points);
    let signal = detuning
        .iter()
        .map(|&x| cascade.signal(&fixed.with(axis, x)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LineScan {
        axis,
        detuning,
        signal,
    })
}
