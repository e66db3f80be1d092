//! Periodic least-squares fit used to measure range of motion on noisy
//! angle series. Raw max - min picks up the extremes of the noise; the
//! peak-to-peak of a low-order Fourier fit at the stride period does not.

use nalgebra::{DMatrix, DVector};

pub const HARMONICS: usize = 2;
/// Relative half-width of the period search around the event estimate.
pub const PERIOD_SEARCH: f64 = 0.05;
pub const PERIOD_GRID: usize = 41;

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicFit {
    pub period: f64,
    /// `[c0, a1, b1, a2, b2, ...]` for `c0 + sum a_k cos(k w t) + b_k sin(k w t)`.
    pub coef: Vec<f64>,
    pub residual: f64,
}

impl HarmonicFit {
    pub fn eval(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI / self.period;
        let mut y = self.coef[0];
        for k in 1..self.coef.len().div_ceil(2) {
            let kt = k as f64 * w * t;
            y += self.coef[2 * k - 1] * kt.cos() + self.coef[2 * k] * kt.sin();
        }
        y
    }

    /// Peak-to-peak of the fitted curve over one period: grid search, then
    /// golden-section refinement around the best grid points.
    pub fn peak_to_peak(&self) -> f64 {
        const N: usize = 720;
        let step = self.period / N as f64;
        let (mut lo, mut hi) = (0usize, 0usize);
        let ys: Vec<f64> = (0..N).map(|i| self.eval(step * i as f64)).collect();
        for i in 1..N {
            if ys[i] < ys[lo] {
                lo = i;
            }
            if ys[i] > ys[hi] {
                hi = i;
            }
        }
        let refine = |c: usize, sign: f64| -> f64 {
            let f = |t: f64| sign * self.eval(t);
            let (mut a, mut b) = ((c as f64 - 1.0) * step, (c as f64 + 1.0) * step);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..60 {
                let (x1, x2) = (b - g * (b - a), a + g * (b - a));
                if f(x1) > f(x2) {
                    b = x2;
                } else {
                    a = x1;
                }
            }
            sign * f(0.5 * (a + b)).max(sign * ys[c])
        };
        refine(hi, 1.0) - refine(lo, -1.0)
    }
}

/// Least-squares fit of `harmonics` harmonics at a fixed period (frames).
pub fn fit_at_period(y: &[f64], period: f64, harmonics: usize) -> Option<HarmonicFit> {
    let n = y.len();
    let p = 1 + 2 * harmonics;
    if n < p || !(period > 0.0) {
        return None;
    }
    let w = 2.0 * std::f64::consts::PI / period;
    let a = DMatrix::from_fn(n, p, |t, j| {
        if j == 0 {
            1.0
        } else {
            let k = j.div_ceil(2) as f64;
            let kt = k * w * t as f64;
            if j % 2 == 1 {
                kt.cos()
            } else {
                kt.sin()
            }
        }
    });
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    let coef = svd.solve(&b, 1e-12).ok()?;
    let residual = (&a * &coef - &b).norm_squared();
    Some(HarmonicFit {
        period,
        coef: coef.iter().copied().collect(),
        residual,
    })
}

/// Best fit over a grid of periods within `PERIOD_SEARCH` of `period`.
pub fn fit_periodic(y: &[f64], period: f64) -> Option<HarmonicFit> {
    let mut best: Option<HarmonicFit> = None;
    for i in 0..PERIOD_GRID {
        let f = -PERIOD_SEARCH + 2.0 * PERIOD_SEARCH * i as f64 / (PERIOD_GRID - 1) as f64;
        if let Some(fit) = fit_at_period(y, period * (1.0 + f), HARMONICS) {
            if best.as_ref().is_none_or(|b| fit.residual < b.residual) {
                best = Some(fit);
            }
        }
    }
    best
}

/// Range of motion of a periodic series given a stride-period estimate.
pub fn harmonic_rom(y: &[f64], period: f64) -> Option<f64> {
    fit_periodic(y, period).map(|f| f.peak_to_peak())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_sinusoid() {
        let y: Vec<f64> = (0..124).map(|t| 120.0 + 25.0 * (t as f64 * 0.2 + 0.4).sin()).collect();
        let period = 2.0 * std::f64::consts::PI / 0.2;
        let fit = fit_at_period(&y, period, 2).unwrap();
        assert!(fit.residual < 1e-16 * 124.0 * 120.0 * 120.0);
        assert!((fit.peak_to_peak() - 50.0).abs() < 1e-6);
        // period search lands on the true period from a 3% misestimate
        let r = harmonic_rom(&y, period * 1.03).unwrap();
        assert!((r - 50.0).abs() < 0.1, "{r}");
    }

    #[test]
    fn second_harmonic_shape() {
        let y: Vec<f64> = (0..124)
            .map(|t| {
                let x = t as f64 * 0.25;
                x.sin() + 0.3 * (2.0 * x).cos()
            })
            .collect();
        let fit = fit_at_period(&y, 2.0 * std::f64::consts::PI / 0.25, 2).unwrap();
        let dense = (0..10000).map(|i| {
            let x = i as f64 * 2.0 * std::f64::consts::PI / 10000.0;
            x.sin() + 0.3 * (2.0 * x).cos()
        });
        let (lo, hi) = dense.fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
        assert!((fit.peak_to_peak() - (hi - lo)).abs() < 1e-4);
    }

    #[test]
    fn too_short_is_none() {
        assert!(fit_at_period(&[1.0, 2.0], 10.0, 2).is_none());
    }
}
