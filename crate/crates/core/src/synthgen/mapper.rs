//! Monotone piecewise-linear style mappers fitted by quantile matching.

use serde::{Deserialize, Serialize};

use super::{Image, StyleId};
use crate::{Error, Result};

pub const MAPPER_KNOTS: usize = 32;
pub const MIN_FIT_IMAGES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMapper {
    pub source_id: StyleId,
    pub target_id: StyleId,
    /// Strictly increasing source intensities.
    pub knots_x: Vec<f64>,
    /// Non-decreasing target intensities, one per source knot.
    pub knots_y: Vec<f64>,
}

/// Quantile of sorted data at level `p` with linear interpolation between
/// order statistics.
pub fn quantile_sorted(sorted: &[f32], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - t) + sorted[hi] as f64 * t
}

fn pooled_sorted(images: &[Image]) -> Vec<f32> {
    let mut v: Vec<f32> = images.iter().flat_map(|i| i.pixels().iter().copied()).collect();
    v.sort_unstable_by(f32::total_cmp);
    v
}

impl StyleMapper {
    pub fn identity(id: StyleId) -> Self {
        Self {
            source_id: id,
            target_id: id,
            knots_x: vec![0.0, 1.0],
            knots_y: vec![0.0, 1.0],
        }
    }

    /// Matches `MAPPER_KNOTS` evenly spaced quantiles of the pooled source
    /// intensities to the same quantiles of the target intensities.
    pub fn fit(
        source_id: StyleId,
        source: &[Image],
        target_id: StyleId,
        target: &[Image],
    ) -> Result<Self> {
        if source.len() < MIN_FIT_IMAGES || target.len() < MIN_FIT_IMAGES {
            return Err(Error::Unfittable(format!(
                "need at least {MIN_FIT_IMAGES} images per side, got {} and {}",
                source.len(),
                target.len()
            )));
        }
        let s = pooled_sorted(source);
        let t = pooled_sorted(target);
        for (name, v) in [("source", &s), ("target", &t)] {
            if (v[v.len() - 1] - v[0]).abs() < 1e-6 {
                return Err(Error::Unfittable(format!("{name} samples have constant intensity")));
            }
        }
        let mut knots_x: Vec<f64> = Vec::with_capacity(MAPPER_KNOTS);
        let mut knots_y: Vec<f64> = Vec::with_capacity(MAPPER_KNOTS);
        let mut run = 0usize;
        for k in 0..MAPPER_KNOTS {
            let p = k as f64 / (MAPPER_KNOTS - 1) as f64;
            let (x, y) = (quantile_sorted(&s, p), quantile_sorted(&t, p));
            // Tied source quantiles (e.g. a clamped mass at 0) collapse to one
            // knot carrying the mean of their targets.
            match knots_x.last() {
                Some(&last) if x - last <= 1e-9 => {
                    run += 1;
                    let yl = knots_y.last_mut().expect("paired with x");
                    *yl += (y - *yl) / run as f64;
                }
                _ => {
                    knots_x.push(x);
                    knots_y.push(y);
                    run = 1;
                }
            }
        }
        // Averaging tied runs cannot break monotonicity of sorted quantiles,
        // but keep the invariant explicit.
        for i in 1..knots_y.len() {
            if knots_y[i] < knots_y[i - 1] {
                knots_y[i] = knots_y[i - 1];
            }
        }
        Ok(Self {
            source_id,
            target_id,
            knots_x,
            knots_y,
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        let (xs, ys) = (&self.knots_x, &self.knots_y);
        let y = if x <= xs[0] {
            ys[0]
        } else if x >= xs[xs.len() - 1] {
            ys[ys.len() - 1]
        } else {
            let i = xs.partition_point(|&k| k <= x);
            let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        };
        y.clamp(0.0, 1.0)
    }

    pub fn is_monotone(&self) -> bool {
        self.knots_x.windows(2).all(|w| w[0] < w[1]) && self.knots_y.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Applies `mapper` pixel-wise; geometry is untouched.
pub fn transfer_style(image: &Image, mapper: &StyleMapper) -> Image {
    image.map(|p| mapper.apply(p as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn uniform_images(lo: f32, hi: f32, n: usize, seed_value: u64) -> Vec<Image> {
        let mut rng = seed::rng(seed_value);
        (0..n)
            .map(|_| {
                Image::new(16, 16, (0..256).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn self_fit_is_near_identity() {
        let imgs = uniform_images(0.0, 1.0, 60, 1);
        let m = StyleMapper::fit(StyleId::A, &imgs, StyleId::A, &imgs).unwrap();
        let worst = (0..=100)
            .map(|i| i as f64 / 100.0)
            .map(|x| (m.apply(x) - x).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.02, "{worst}");
    }

    #[test]
    fn uniform_shift_is_recovered() {
        // Quantile functions: source p/2, target 0.5 + p/2, so f(x) = x + 0.5.
        let src = uniform_images(0.0, 0.5, 60, 2);
        let dst = uniform_images(0.5, 1.0, 60, 3);
        let m = StyleMapper::fit(StyleId::A, &src, StyleId::B, &dst).unwrap();
        let worst = (0..=50)
            .map(|i| i as f64 / 100.0)
            .map(|x| (m.apply(x) - (x + 0.5)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.03, "{worst}");
        let out = transfer_style(&Image::filled(4, 4, 0.25), &m);
        assert!(out.pixels().iter().all(|&p| (p - 0.75).abs() < 0.03));
    }

    #[test]
    fn constant_samples_cannot_be_fitted() {
        let flat: Vec<Image> = (0..60).map(|_| Image::filled(8, 8, 0.3)).collect();
        let ok = uniform_images(0.0, 1.0, 60, 4);
        assert!(matches!(
            StyleMapper::fit(StyleId::A, &flat, StyleId::B, &ok),
            Err(Error::Unfittable(_))
        ));
    }

    #[test]
    fn too_few_images_is_rejected() {
        let few = uniform_images(0.0, 1.0, 10, 5);
        assert!(StyleMapper::fit(StyleId::A, &few, StyleId::B, &few).is_err());
    }

    #[test]
    fn identity_mapper_leaves_image_unchanged() {
        let img = uniform_images(0.0, 1.0, 1, 6).remove(0);
        assert_eq!(transfer_style(&img, &StyleMapper::identity(StyleId::C)), img);
    }

    #[test]
    fn ties_collapse_to_monotone_knots() {
        // Half the mass at exactly 0 produces many tied low quantiles.
        let mut imgs = uniform_images(0.0, 1.0, 60, 7);
        for img in &mut imgs {
            img.pixels_mut()[..128].iter_mut().for_each(|p| *p = 0.0);
        }
        let m = StyleMapper::fit(StyleId::A, &imgs, StyleId::B, &uniform_images(0.2, 0.9, 60, 8)).unwrap();
        assert!(m.is_monotone());
        assert!(m.knots_x.len() < MAPPER_KNOTS);
    }
}
