use crate::error::{contract, Result};

/// Angle in degrees at `center` between the rays to `a` and `b`, or `None`
/// when either ray has zero length.
pub fn angle_deg(center: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<f64> {
    let (ax, ay) = (a[0] - center[0], a[1] - center[1]);
    let (bx, by) = (b[0] - center[0], b[1] - center[1]);
    let na = ax.hypot(ay);
    let nb = bx.hypot(by);
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    let c = ((ax * bx + ay * by) / (na * nb)).clamp(-1.0, 1.0);
    Some(c.acos().to_degrees())
}

/// Frame-wise joint angle `arccos(a.b / |a||b|)` with `a = p_a - p_center`,
/// `b = p_b - p_center`. `None` if any frame has a zero-length vector.
pub fn joint_angle_series(center: &[[f64; 2]], a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<Option<Vec<f64>>> {
    contract!(
        center.len() == a.len() && a.len() == b.len(),
        "angle series lengths differ: {} {} {}",
        center.len(),
        a.len(),
        b.len()
    );
    Ok(center
        .iter()
        .zip(a)
        .zip(b)
        .map(|((&c, &pa), &pb)| angle_deg(c, pa, pb))
        .collect())
}

/// `max - min`; zero for empty and single-element series.
pub fn rom(series: &[f64]) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// `|l - r| / (0.5 (l + r)) * 100`, defined as 0 when `l + r < 1e-8`.
pub fn symmetry_index(left: f64, right: f64) -> Result<f64> {
    contract!(left >= 0.0 && right >= 0.0, "symmetry index needs nonnegative inputs, got ({left}, {right})");
    let denom = 0.5 * (left + right);
    if left + right < 1e-8 {
        return Ok(0.0);
    }
    Ok((left - right).abs() / denom * 100.0)
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Population standard deviation.
pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}
