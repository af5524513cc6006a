//! Globally adaptive Gauss–Kronrod (7/15) quadrature over vector-valued
//! integrands.
//!
//! Every component is integrated on the same subdivision. Convergence is
//! judged per component against `rel_tol` times the integral of that
//! component's absolute value, so components that integrate to (nearly) zero
//! by symmetry do not stall the refinement.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, QuadratureFailure, Result};

// node and weight tables quoted to their published digits
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

/// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5, 7).
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadSettings {
    fn default() -> Self {
        QuadSettings {
            rel_tol: 1e-10,
            abs_tol: 0.0,
            max_intervals: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Integral<const N: usize> {
    pub value: [f64; N],
    pub error: [f64; N],
    pub intervals: usize,
}

#[derive(Clone, Copy)]
struct Panel<const N: usize> {
    a: f64,
    b: f64,
    value: [f64; N],
    error: [f64; N],
    abs: [f64; N],
    /// Largest error relative to the current per-component tolerance scale,
    /// used for heap ordering.
    priority: f64,
}

impl<const N: usize> PartialEq for Panel<N> {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority
    }
}
impl<const N: usize> Eq for Panel<N> {}
impl<const N: usize> PartialOrd for Panel<N> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<const N: usize> Ord for Panel<N> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority)
    }
}

fn kronrod<const N: usize, F>(f: &F, a: f64, b: f64) -> ([f64; N], [f64; N], [f64; N])
where
    F: Fn(f64) -> [f64; N],
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut lo = [[0.0; N]; 7];
    let mut hi = [[0.0; N]; 7];
    for j in 0..7 {
        let dx = half * XGK[j];
        lo[j] = f(center - dx);
        hi[j] = f(center + dx);
    }
    let mut resk = [0.0; N];
    let mut err = [0.0; N];
    let mut resabs = [0.0; N];
    for i in 0..N {
        let mut k = fc[i] * WGK[7];
        let mut g = fc[i] * WG[3];
        let mut abs = fc[i].abs() * WGK[7];
        for j in 0..7 {
            let s = lo[j][i] + hi[j][i];
            k += WGK[j] * s;
            abs += WGK[j] * (lo[j][i].abs() + hi[j][i].abs());
            if j % 2 == 1 {
                g += WG[j / 2] * s;
            }
        }
        // Scaled error estimate as in QUADPACK's qk15.
        let mean = 0.5 * k;
        let mut asc = WGK[7] * (fc[i] - mean).abs();
        for j in 0..7 {
            asc += WGK[j] * ((lo[j][i] - mean).abs() + (hi[j][i] - mean).abs());
        }
        let scale = half.abs();
        let asc = asc * scale;
        let abs = abs * scale;
        let mut e = ((k - g) * half).abs();
        if asc != 0.0 && e != 0.0 {
            e = asc * (200.0 * e / asc).powf(1.5).min(1.0);
        }
        if abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
            e = e.max(50.0 * f64::EPSILON * abs);
        }
        resk[i] = k * half;
        err[i] = e;
        resabs[i] = abs;
    }
    (resk, err, resabs)
}

/// Integrates `f` over `[a, b]`, splitting first at every breakpoint that
/// falls strictly inside the interval.
pub fn integrate<const N: usize, F>(
    f: F,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    settings: &QuadSettings,
) -> Result<Integral<N>>
where
    F: Fn(f64) -> [f64; N],
{
    let mut edges: Vec<f64> = Vec::with_capacity(breakpoints.len() + 2);
    edges.push(a);
    edges.extend(breakpoints.iter().copied().filter(|x| *x > a && *x < b));
    edges.push(b);
    edges.sort_by(f64::total_cmp);
    edges.dedup();

    let mut heap: BinaryHeap<Panel<N>> = BinaryHeap::new();
    let mut total = [0.0; N];
    let mut total_err = [0.0; N];
    let mut total_abs = [0.0; N];
    for w in edges.windows(2) {
        let (value, error, abs) = kronrod(&f, w[0], w[1]);
        for i in 0..N {
            total[i] += value[i];
            total_err[i] += error[i];
            total_abs[i] += abs[i];
        }
        heap.push(Panel {
            a: w[0],
            b: w[1],
            value,
            error,
            abs,
            priority: 0.0,
        });
    }

    let tol_of = |abs: &[f64; N]| -> [f64; N] {
        let mut t = [0.0; N];
        for i in 0..N {
            t[i] = settings.rel_tol * abs[i] + settings.abs_tol;
        }
        t
    };
    let converged = |err: &[f64; N], tol: &[f64; N]| (0..N).all(|i| err[i] <= tol[i]);

    // Priorities depend on the global tolerance, which only settles after the
    // first pass, so rebuild the heap once with proper keys.
    let tol = tol_of(&total_abs);
    let panels: Vec<Panel<N>> = heap.drain().collect();
    for mut p in panels {
        p.priority = priority(&p.error, &tol);
        heap.push(p);
    }

    let mut intervals = heap.len();
    loop {
        let tol = tol_of(&total_abs);
        if converged(&total_err, &tol) {
            break;
        }
        if intervals >= settings.max_intervals {
            let worst = (0..N)
                .max_by(|&i, &j| {
                    (total_err[i] / tol[i].max(f64::MIN_POSITIVE))
                        .total_cmp(&(total_err[j] / tol[j].max(f64::MIN_POSITIVE)))
                })
                .unwrap_or(0);
            return Err(Error::Quadrature(QuadratureFailure {
                estimate: total[worst],
                error_estimate: total_err[worst],
                intervals,
                tolerance: tol[worst],
            }));
        }
        let Some(worst) = heap.pop() else { break };
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Interval can no longer be split in floating point.
            return Err(Error::Quadrature(QuadratureFailure {
                estimate: total[0],
                error_estimate: total_err[0],
                intervals,
                tolerance: tol[0],
            }));
        }
        let (lv, le, la) = kronrod(&f, worst.a, mid);
        let (rv, re, ra) = kronrod(&f, mid, worst.b);
        for i in 0..N {
            total[i] += lv[i] + rv[i] - worst.value[i];
            total_err[i] += le[i] + re[i] - worst.error[i];
            total_abs[i] += la[i] + ra[i] - worst.abs[i];
        }
        let tol = tol_of(&total_abs);
        heap.push(Panel {
            a: worst.a,
            b: mid,
            value: lv,
            error: le,
            abs: la,
            priority: priority(&le, &tol),
        });
        heap.push(Panel {
            a: mid,
            b: worst.b,
            value: rv,
            error: re,
            abs: ra,
            priority: priority(&re, &tol),
        });
        intervals += 1;
    }

    // Re-sum from the panels to shed accumulated update rounding.
    let mut value = [0.0; N];
    let mut error = [0.0; N];
    let mut panels: Vec<Panel<N>> = heap.into_vec();
    panels.sort_by(|p, q| p.a.total_cmp(&q.a));
    for p in &panels {
        for i in 0..N {
            value[i] += p.value[i];
            error[i] += p.error[i];
        }
    }
    Ok(Integral {
        value,
        error,
        intervals,
    })
}

fn priority<const N: usize>(err: &[f64; N], tol: &[f64; N]) -> f64 {
    (0..N)
        .map(|i| err[i] / tol[i].max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(|x| [x * x, x.powi(5)], 0.0, 2.0, &[], &QuadSettings::default()).unwrap();
        assert!((r.value[0] - 8.0 / 3.0).abs() < 1e-14);
        assert!((r.value[1] - 64.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn sharp_lorentzian_with_breakpoint() {
        let g = 1e-3;
        let r = integrate(
            |x: f64| [g / (x * x + g * g)],
            -1.0,
            1.0,
            &[0.0],
            &QuadSettings::default(),
        )
        .unwrap();
        let exact = 2.0 * (1.0f64 / g).atan();
        assert!((r.value[0] - exact).abs() < 1e-9 * exact);
    }

    #[test]
    fn odd_component_does_not_block_convergence() {
        let r = integrate(
            |x: f64| [(-x * x).exp(), x * (-x * x).exp()],
            -8.0,
            8.0,
            &[],
            &QuadSettings::default(),
        )
        .unwrap();
        assert!((r.value[0] - std::f64::consts::PI.sqrt()).abs() < 1e-12);
        assert!(r.value[1].abs() < 1e-12);
    }

    #[test]
    fn reports_non_convergence() {
        let settings = QuadSettings {
            rel_tol: 1e-15,
            abs_tol: 0.0,
            max_intervals: 3,
        };
        let err = integrate(|x: f64| [1.0 / (x.abs() + 1e-9).sqrt()], -1.0, 1.0, &[], &settings)
            .unwrap_err();
        match err {
            Error::Quadrature(d) => assert!(d.intervals >= 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
