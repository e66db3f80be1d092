use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClipWindow, COCO_KEYPOINTS, MIN_CONF};
use crate::error::{contract, Result};

/// Left/right keypoint pairs in COCO order.
pub const FLIP_PAIRS: [(usize, usize); 8] = [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)];

/// Mirror the clip about its mean x over confident cells, then swap the
/// left/right keypoints. The stored hip trajectory is mirrored too, so
/// un-centered positions stay consistent with the mirrored image.
pub fn augment_flip(clip: &ClipWindow) -> ClipWindow {
    let valid: Vec<f64> = clip.x.iter().filter(|k| k[2] >= MIN_CONF).map(|k| k[0]).collect();
    let xbar = if valid.is_empty() {
        clip.x.iter().map(|k| k[0]).sum::<f64>() / clip.x.len().max(1) as f64
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    let mut out = clip.clone();
    for frame in out.x.chunks_exact_mut(COCO_KEYPOINTS) {
        for k in frame.iter_mut() {
            k[0] = 2.0 * xbar - k[0];
        }
        for &(l, r) in &FLIP_PAIRS {
            frame.swap(l, r);
        }
    }
    if let Some(n) = out.normalization.as_mut() {
        let obar = n.origin.iter().map(|o| o[0]).sum::<f64>() / n.origin.len().max(1) as f64;
        for o in &mut n.origin {
            o[0] = 2.0 * obar - o[0];
        }
    }
    out
}

/// Add i.i.d. Gaussian noise of `sigma` pixels to every x and y. For a
/// normalized clip the deviation is divided by its torso scale.
pub fn augment_noise(clip: &ClipWindow, sigma: f64, seed: u64) -> Result<ClipWindow> {
    contract!(sigma >= 0.0 && sigma.is_finite(), "noise sigma must be nonnegative, got {sigma}");
    let mut out = clip.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma / clip.scale()).expect("finite positive deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in &mut out.x {
        k[0] += normal.sample(&mut rng);
        k[1] += normal.sample(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{Normalization, WINDOW};

    fn clip(seed: u64) -> ClipWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        ClipWindow {
            x: (0..WINDOW * COCO_KEYPOINTS)
                .map(|i| [n.sample(&mut rng), n.sample(&mut rng), if i % 7 == 0 { 0.1 } else { 0.9 }])
                .collect(),
            patient_id: "p".into(),
            video_id: "v".into(),
            label: 3,
            start_frame: 0,
            fps: 30.0,
            normalization: Some(Normalization {
                scale: 250.0,
                origin: (0..WINDOW).map(|t| [10.0 * t as f64, 400.0]).collect(),
            }),
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let c = clip(1);
        let back = augment_flip(&augment_flip(&c));
        for (a, b) in c.x.iter().zip(&back.x) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            assert_eq!(a[2].to_bits(), b[2].to_bits());
        }
        let (o, ob) = (c.normalization.unwrap(), back.normalization.unwrap());
        for (a, b) in o.origin.iter().zip(&ob.origin) {
            assert!((a[0] - b[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_mirrors_left_into_right() {
        let c = clip(2);
        let f = augment_flip(&c);
        let (a, b) = (f.get(5, 5), c.get(5, 6));
        let c0 = f.get(5, 0)[0] + c.get(5, 0)[0];
        assert!((a[0] + b[0] - c0).abs() < 1e-9, "mirror about a common axis");
        assert_eq!((a[1], a[2]), (b[1], b[2]));
    }

    #[test]
    fn symmetric_clip_is_fixed() {
        let mut c = clip(3);
        for t in 0..WINDOW {
            for &(l, r) in &FLIP_PAIRS {
                let k = c.get(t, l);
                c.x[t * COCO_KEYPOINTS + r] = [-k[0], k[1], k[2]];
            }
            c.x[t * COCO_KEYPOINTS][0] = 0.0;
        }
        let f = augment_flip(&c);
        for (a, b) in c.x.iter().zip(&f.x) {
            assert!((a[0] - b[0]).abs() < 1e-6 && a[1] == b[1]);
        }
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let mut c = clip(4);
        c.normalization = None;
        assert_eq!(augment_noise(&c, 0.0, 9).unwrap(), c);
        let a = augment_noise(&c, 2.0, 9).unwrap();
        assert_eq!(a, augment_noise(&c, 2.0, 9).unwrap());
        assert!(augment_noise(&c, -1.0, 9).is_err());

        // 10^5 draws: the sample mean has standard error 2/sqrt(1e5) ~ 0.006
        // and the sample std about 0.0045.
        let mut d = Vec::new();
        let mut seed = 0;
        while d.len() < 100_000 {
            let n = augment_noise(&c, 2.0, seed).unwrap();
            for (p, q) in n.x.iter().zip(&c.x) {
                d.push(p[0] - q[0]);
                d.push(p[1] - q[1]);
            }
            seed += 1;
        }
        d.truncate(100_000);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((std - 2.0).abs() < 0.05, "{std}");
    }

    #[test]
    fn normalized_noise_is_in_torso_units() {
        let c = clip(5);
        let a = augment_noise(&c, 2.0, 1).unwrap();
        let max = a.x.iter().zip(&c.x).map(|(p, q)| (p[0] - q[0]).abs()).fold(0.0, f64::max);
        assert!(max < 10.0 / 250.0);
    }
}
