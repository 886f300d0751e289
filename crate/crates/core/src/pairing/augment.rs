//! Diversifying augmentations applied to every contrastive sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::synthgen::Image;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugParams {
    /// Crop side as a fraction of the image side.
    pub crop_scale_range: (f64, f64),
    /// Rotation drawn uniformly from `[-rotation_range_deg, rotation_range_deg]`.
    pub rotation_range_deg: f64,
    pub hflip_prob: f64,
    /// Brightness and contrast factors are drawn from `[1 - s, 1 + s]`.
    pub jitter_strength: f64,
}

impl Default for AugParams {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.8, 1.0),
            rotation_range_deg: 10.0,
            hflip_prob: 0.5,
            jitter_strength: 0.2,
        }
    }
}

impl AugParams {
    /// All operations disabled.
    pub fn identity() -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            rotation_range_deg: 0.0,
            hflip_prob: 0.0,
            jitter_strength: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale_range {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale_range)));
        }
        if !(0.0..=45.0).contains(&self.rotation_range_deg) {
            return Err(Error::Config(format!("rotation bound {} exceeds 45 degrees", self.rotation_range_deg)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::Config("hflip_prob and jitter_strength must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn draw<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Random crop (resized back), rotation with reflected borders, horizontal
/// flip and brightness/contrast jitter, in that order.
pub fn augment<R: Rng>(image: &Image, params: &AugParams, rng: &mut R) -> Image {
    let (h, w) = (image.height(), image.width());
    let (hf, wf) = (h as f64, w as f64);

    let scale = draw(rng, params.crop_scale_range.0, params.crop_scale_range.1);
    let (ch, cw) = (scale * hf, scale * wf);
    let oy = draw(rng, 0.0, hf - ch);
    let ox = draw(rng, 0.0, wf - cw);
    let angle = draw(rng, -params.rotation_range_deg, params.rotation_range_deg).to_radians();
    let flip = params.hflip_prob > 0.0 && rng.random::<f64>() < params.hflip_prob;
    let s = params.jitter_strength;
    let brightness = draw(rng, 1.0 - s, 1.0 + s) as f32;
    let contrast = draw(rng, 1.0 - s, 1.0 + s) as f32;

    let mut out = image.clone();
    if scale < 1.0 {
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let sy = oy + (y as f64 + 0.5) * scale;
                let sx = ox + (x as f64 + 0.5) * scale;
                px.push(out.sample_bilinear(sx, sy));
            }
        }
        out = Image::new(h, w, px).expect("same size");
    }
    if angle != 0.0 {
        let (sin, cos) = angle.sin_cos();
        let (cy, cx) = (hf / 2.0, wf / 2.0);
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let sx = cx + cos * dx + sin * dy;
                let sy = cy - sin * dx + cos * dy;
                px.push(out.sample_bilinear(sx, sy));
            }
        }
        out = Image::new(h, w, px).expect("same size");
    }
    if flip {
        out = out.hflip();
    }
    if s > 0.0 {
        out = out.map(|p| p * brightness);
        let mean = out.mean();
        out = out.map(|p| (p - mean) * contrast + mean);
    }
    out.clamp_unit();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn sample_image() -> Image {
        Image::new(16, 16, (0..256).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap()
    }

    #[test]
    fn degenerate_params_are_identity() {
        let img = sample_image();
        let out = augment(&img, &AugParams::identity(), &mut seed::rng(1));
        assert_eq!(out, img);
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let img = sample_image();
        let p = AugParams {
            hflip_prob: 1.0,
            ..AugParams::identity()
        };
        let once = augment(&img, &p, &mut seed::rng(2));
        assert_eq!(once, img.hflip());
        assert_eq!(augment(&once, &p, &mut seed::rng(3)), img);
    }

    #[test]
    fn default_augmentations_stay_in_range_and_change_the_image() {
        let img = sample_image();
        let mut rng = seed::rng(4);
        let mut unchanged = 0;
        for _ in 0..1000 {
            let out = augment(&img, &AugParams::default(), &mut rng);
            let (lo, hi) = out.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
            assert_eq!((out.height(), out.width()), (16, 16));
            if out == img {
                unchanged += 1;
            }
        }
        assert!(unchanged <= 10, "{unchanged} of 1000 augmentations were identities");
    }

    #[test]
    fn rotation_bound_is_validated() {
        let p = AugParams {
            rotation_range_deg: 60.0,
            ..AugParams::default()
        };
        assert!(p.validate().is_err());
        AugParams::default().validate().unwrap();
    }
}
