use serde::{Deserialize, Serialize};

/// Ipsilateral foot events (frame indices) per side.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GaitEvents {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

impl GaitEvents {
    pub fn left_intervals(&self) -> Vec<usize> {
        self.left.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn right_intervals(&self) -> Vec<usize> {
        self.right.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// At least two events on each side.
    pub fn is_valid(&self) -> bool {
        self.left.len() >= 2 && self.right.len() >= 2
    }

    /// Mean ipsilateral interval in frames, pooled over both sides.
    pub fn mean_interval(&self) -> Option<f64> {
        let all: Vec<usize> = self.left_intervals().into_iter().chain(self.right_intervals()).collect();
        if all.is_empty() {
            None
        } else {
            Some(all.iter().sum::<usize>() as f64 / all.len() as f64)
        }
    }
}

/// Centered moving average; the window shrinks at the edges.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Strict local extrema of `sign * s` that lie on the far side of the mean,
/// thinned so no two kept peaks are closer than `min_gap` frames (the
/// stronger one survives; ties keep the earlier frame).
fn pick_peaks(s: &[f64], sign: f64, min_gap: f64) -> Vec<usize> {
    let n = s.len();
    if n < 3 {
        return Vec::new();
    }
    let m = s.iter().sum::<f64>() / n as f64;
    let mut cand: Vec<usize> = (1..n - 1)
        .filter(|&t| {
            let v = sign * s[t];
            v > sign * s[t - 1] && v > sign * s[t + 1] && v > sign * m
        })
        .collect();
    cand.sort_by(|&a, &b| (sign * s[b]).total_cmp(&(sign * s[a])).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for t in cand {
        if kept.iter().all(|&k| (k as f64 - t as f64).abs() >= min_gap) {
            kept.push(t);
        }
    }
    kept.sort_unstable();
    kept
}

/// Events from the horizontal ankle separation `s = x_left - x_right`:
/// maxima are left events and minima right events, after a 5-frame
/// centered moving average and `0.25 * fps` refractory suppression.
pub fn detect_gait_events(separation: &[f64], fps: f64) -> GaitEvents {
    let s = moving_average(separation, 5);
    let gap = 0.25 * fps;
    GaitEvents {
        left: pick_peaks(&s, 1.0, gap),
        right: pick_peaks(&s, -1.0, gap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, fps: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fps + phase).sin())
            .collect()
    }

    #[test]
    fn one_hertz_at_thirty_fps() {
        let ev = detect_gait_events(&sine(1.0, 30.0, 124, 0.3), 30.0);
        assert!(ev.is_valid());
        for d in ev.left_intervals().into_iter().chain(ev.right_intervals()) {
            assert!((28..=32).contains(&d), "{ev:?}");
        }
        assert_eq!(ev.mean_interval().unwrap(), 30.0);
    }

    #[test]
    fn constant_signal_has_no_events() {
        let ev = detect_gait_events(&[0.4; 124], 30.0);
        assert!(ev.left.is_empty() && ev.right.is_empty());
        assert!(!ev.is_valid());
    }

    #[test]
    fn reversal_reverses_events() {
        let s = sine(0.9, 30.0, 124, 1.1);
        let fwd = detect_gait_events(&s, 30.0);
        let rev_s: Vec<f64> = s.iter().rev().copied().collect();
        let rev = detect_gait_events(&rev_s, 30.0);
        let back: Vec<usize> = rev.left.iter().rev().map(|&t| 123 - t).collect();
        assert_eq!(back, fwd.left);
        let mut a = fwd.left_intervals();
        let mut b = rev.left_intervals();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn refractory_suppression_keeps_the_stronger_peak() {
        let mut s = vec![0.0; 40];
        s[10] = 1.0;
        s[13] = 2.0;
        s[30] = 1.5;
        // no smoothing needed to see it: call the picker directly
        assert_eq!(pick_peaks(&s, 1.0, 7.5), vec![13, 30]);
    }
}
