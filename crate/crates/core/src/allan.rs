//! Overlapping Allan deviation, transfer factors and correlation.

use std::io::{BufRead, Write};

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{positive, Error, Result};
use crate::noise::{fmt17, parse_f64};

/// Allan deviation in Hz at multiples of the base gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AllanCurve {
    pub taus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub n_pairs: Vec<usize>,
}

impl AllanCurve {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Deviation at `tau`, if it was computed.
    pub fn at(&self, tau: f64) -> Option<f64> {
        self.taus
            .iter()
            .position(|t| (t - tau).abs() <= 1e-9 * tau)
            .map(|i| self.sigmas[i])
    }

    /// Largest deviation over `tau <= max_tau`.
    pub fn max_up_to(&self, max_tau: f64) -> Option<f64> {
        self.taus
            .iter()
            .zip(&self.sigmas)
            .filter(|(t, _)| **t <= max_tau * (1.0 + 1e-12))
            .map(|(_, s)| *s)
            .reduce(f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "tau_s,sigma_hz,n_pairs")?;
        for i in 0..self.len() {
            writeln!(out, "{},{},{}", fmt17(self.taus[i]), fmt17(self.sigmas[i]), self.n_pairs[i])?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Csv("empty Allan file".into()))??;
        if header.trim() != "tau_s,sigma_hz,n_pairs" {
            return Err(Error::Csv(format!("unexpected header {header:?}")));
        }
        let mut curve = AllanCurve {
            taus: Vec::new(),
            sigmas: Vec::new(),
            n_pairs: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 3 {
                return Err(Error::Csv(format!("row {}: expected 3 fields", n + 2)));
            }
            curve.taus.push(parse_f64(f[0], n)?);
            curve.sigmas.push(parse_f64(f[1], n)?);
            curve.n_pairs.push(
                f[2].trim()
                    .parse()
                    .map_err(|e| Error::Csv(format!("row {}: n_pairs: {e}", n + 2)))?,
            );
        }
        Ok(curve)
    }
}

/// Octave multiples `1, 2, 4, ...` up to `max_multiple`, with `max_multiple`
/// itself appended when it is not a power of two.
pub fn octave_multiples(max_multiple: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut m = 1usize;
    while m <= max_multiple {
        out.push(m);
        m *= 2;
    }
    if max_multiple >= 1 && out.last() != Some(&max_multiple) {
        out.push(max_multiple);
    }
    out
}

/// Overlapping Allan deviation
///
/// ```text
/// sigma(m gate)^2 = 1 / (2 (N - 2m + 1)) * sum_{i=0}^{N-2m} (ybar_{i+m} - ybar_i)^2
/// ```
///
/// with `ybar_i` the mean of readings `i..i+m`. A multiple with fewer than
/// `3m` readings is left out and reported in the returned warnings.
pub fn overlapping_adev(readings: &[f64], gate: f64, multiples: &[usize]) -> Result<(AllanCurve, Vec<String>)> {
    positive("gate", gate)?;
    if let Some(bad) = readings.iter().find(|v| !v.is_finite()) {
        return Err(Error::Estimation(format!("non-finite reading {bad}")));
    }
    let mut sorted: Vec<usize> = multiples.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let n = readings.len();
    // centering keeps the block sums small; it does not change any difference
    let origin = readings.first().copied().unwrap_or(0.0);
    let y: Vec<f64> = readings.iter().map(|v| v - origin).collect();

    let mut curve = AllanCurve {
        taus: Vec::new(),
        sigmas: Vec::new(),
        n_pairs: Vec::new(),
    };
    let mut warnings = Vec::new();
    for &m in &sorted {
        if m == 0 {
            warnings.push("tau multiple 0 skipped".to_string());
            continue;
        }
        if n < 3 * m {
            warnings.push(format!(
                "tau = {} s omitted: {n} readings, need at least {}",
                m as f64 * gate,
                3 * m
            ));
            continue;
        }
        let means: Vec<f64> = (0..=n - m)
            .map(|i| y[i..i + m].iter().sum::<f64>() / m as f64)
            .collect();
        let pairs = n - 2 * m + 1;
        let sum: f64 = (0..pairs).map(|i| (means[i + m] - means[i]).powi(2)).sum();
        curve.taus.push(m as f64 * gate);
        curve.sigmas.push((sum / (2.0 * pairs as f64)).sqrt());
        curve.n_pairs.push(pairs);
    }
    Ok((curve, warnings))
}

/// Removes the least-squares line from a series.
pub fn detrend(readings: &[f64]) -> Vec<f64> {
    let n = readings.len();
    if n < 2 {
        return readings.to_vec();
    }
    let xm = (n - 1) as f64 / 2.0;
    let ym = readings.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in readings.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    let b = sxy / sxx;
    readings
        .iter()
        .enumerate()
        .map(|(i, y)| y - ym - b * (i as f64 - xm))
        .collect()
}

/// Least-squares slope of effect against cause.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferFit {
    pub slope: f64,
    pub intercept: f64,
    /// Half-width of the 95% confidence interval on the slope.
    pub ci_half_width: f64,
    pub points: usize,
}

impl TransferFit {
    pub fn ci(&self) -> (f64, f64) {
        (self.slope - self.ci_half_width, self.slope + self.ci_half_width)
    }
}

pub fn transfer_factor(cause: &[f64], effect: &[f64]) -> Result<TransferFit> {
    if cause.len() != effect.len() {
        return Err(Error::Estimation(format!(
            "{} causes but {} effects",
            cause.len(),
            effect.len()
        )));
    }
    let mut levels: Vec<f64> = cause.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 3 {
        return Err(Error::Estimation(format!(
            "need at least 3 distinct cause levels, got {}",
            levels.len()
        )));
    }
    let n = cause.len() as f64;
    let xm = cause.iter().sum::<f64>() / n;
    let ym = effect.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in cause.iter().zip(effect) {
        sxx += (x - xm) * (x - xm);
        sxy += (x - xm) * (y - ym);
    }
    if !(sxx > 0.0) || !sxx.is_finite() {
        return Err(Error::Estimation("cause has no variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let sse: f64 = cause
        .iter()
        .zip(effect)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let dof = n - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::Estimation(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(TransferFit {
        slope,
        intercept,
        ci_half_width: t * se,
        points: cause.len(),
    })
}

/// Pearson correlation of two equal-length series.
pub fn cross_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Estimation(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < 10 {
        return Err(Error::Estimation(format!("need at least 10 points, got {}", a.len())));
    }
    let n = a.len() as f64;
    let am = a.iter().sum::<f64>() / n;
    let bm = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - am, y - bm);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Estimation("correlation undefined for a constant series".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_has_zero_deviation() {
        let (c, w) = overlapping_adev(&[5.0; 64], 1.0, &octave_multiples(16)).unwrap();
        assert!(w.is_empty());
        assert!(c.sigmas.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn alternating_series() {
        let a = 3.5;
        let x: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { a } else { -a }).collect();
        let (c, _) = overlapping_adev(&x, 1.0, &[1]).unwrap();
        assert_eq!(c.sigmas[0], a * 2f64.sqrt());
        assert_eq!(c.n_pairs[0], 99);
    }

    #[test]
    fn short_series_omits_tau_with_warning() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let (c, w) = overlapping_adev(&x, 2.0, &[1, 2, 4]).unwrap();
        assert_eq!(c.taus, vec![2.0, 4.0]);
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("tau = 8"));
    }

    #[test]
    fn octave_grid() {
        assert_eq!(octave_multiples(16), vec![1, 2, 4, 8, 16]);
        assert_eq!(octave_multiples(1000).last(), Some(&1000));
        assert_eq!(octave_multiples(1000)[9], 512);
    }

    #[test]
    fn transfer_identity_and_errors() {
        let x = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let fit = transfer_factor(&x, &x).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-15);
        assert!(fit.ci_half_width < 1e-9);
        assert!(transfer_factor(&[1.0, 1.0, 2.0, 2.0], &[0.0, 0.0, 1.0, 1.0]).is_err());
        assert!(transfer_factor(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn transfer_ci_matches_textbook() {
        // y = 2x + noise with known residuals; t(0.975, 3) = 3.182446
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [0.1, 1.9, 4.2, 5.8, 8.0];
        let fit = transfer_factor(&x, &y).unwrap();
        assert!((fit.slope - 1.97).abs() < 1e-12);
        let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - fit.intercept - fit.slope * a).powi(2)).sum();
        let se = (sse / 3.0 / 10.0).sqrt();
        assert!((fit.ci_half_width - 3.182446305284263 * se).abs() < 1e-9);
    }

    #[test]
    fn correlation_examples() {
        let a: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 5.0).collect();
        assert!((cross_correlation(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cross_correlation(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert!(cross_correlation(&a, &[1.0; 20]).is_err());
        assert!(cross_correlation(&a[..5], &b[..5]).is_err());
    }

    #[test]
    fn detrend_removes_line() {
        let x: Vec<f64> = (0..50).map(|i| 3.0 + 0.5 * i as f64).collect();
        assert!(detrend(&x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn csv_round_trip() {
        let (c, _) = overlapping_adev(&[1.0, 3.0, 2.0, 5.0, 4.0, 4.5, 1.0, 0.0], 1.0, &[1, 2]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(AllanCurve::read_csv(buf.as_slice()).unwrap(), c);
    }
}
