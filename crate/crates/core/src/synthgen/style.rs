//! Parametric vendor styles: noise, then `gain * x^gamma + bias`, then blur.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::reflect;
use super::Image;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StyleId {
    A,
    B,
    C,
    D,
    E,
}

impl StyleId {
    pub const ALL: [StyleId; 5] = [StyleId::A, StyleId::B, StyleId::C, StyleId::D, StyleId::E];

    pub fn as_str(self) -> &'static str {
        match self {
            StyleId::A => "A",
            StyleId::B => "B",
            StyleId::C => "C",
            StyleId::D => "D",
            StyleId::E => "E",
        }
    }
}

impl fmt::Display for StyleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StyleId::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown style {s:?}")))
    }
}

pub const GAMMA_BOUNDS: (f64, f64) = (0.5, 2.0);
pub const GAIN_BOUNDS: (f64, f64) = (0.7, 1.3);
pub const BIAS_BOUNDS: (f64, f64) = (-0.15, 0.15);
pub const NOISE_MAX: f64 = 0.05;
pub const BLUR_MAX: f64 = 2.0;

/// Minimum [`DomainStyle::distance`] between any two presets.
pub const STYLE_SEPARATION: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub style_id: StyleId,
    pub gamma: f64,
    pub gain: f64,
    pub bias: f64,
    pub noise_sigma: f64,
    pub blur_sigma_px: f64,
}

impl DomainStyle {
    pub fn identity(style_id: StyleId) -> Self {
        Self {
            style_id,
            gamma: 1.0,
            gain: 1.0,
            bias: 0.0,
            noise_sigma: 0.0,
            blur_sigma_px: 0.0,
        }
    }

    /// Built-in vendor signatures. A, B and C are the seen domains, D and E
    /// are held out.
    pub fn preset(id: StyleId) -> Self {
        let (gamma, gain, bias, noise_sigma, blur_sigma_px) = match id {
            StyleId::A => (0.65, 1.15, 0.00, 0.010, 0.0),
            StyleId::B => (1.50, 0.90, 0.10, 0.020, 0.8),
            StyleId::C => (1.00, 1.25, -0.12, 0.005, 0.4),
            StyleId::D => (1.85, 0.75, 0.14, 0.030, 1.2),
            StyleId::E => (0.55, 0.80, -0.05, 0.040, 1.6),
        };
        Self {
            style_id: id,
            gamma,
            gain,
            bias,
            noise_sigma,
            blur_sigma_px,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64, (lo, hi): (f64, f64)| v > lo && v < hi;
        let ok = open(self.gamma, GAMMA_BOUNDS)
            && open(self.gain, GAIN_BOUNDS)
            && open(self.bias, BIAS_BOUNDS)
            && (0.0..=NOISE_MAX).contains(&self.noise_sigma)
            && (0.0..=BLUR_MAX).contains(&self.blur_sigma_px);
        if ok || *self == Self::identity(self.style_id) {
            Ok(())
        } else {
            Err(Error::Config(format!("style {} parameters out of range: {self:?}", self.style_id)))
        }
    }

    /// Distance between styles with each parameter scaled to its range
    /// (gamma in log2 space).
    pub fn distance(&self, other: &DomainStyle) -> f64 {
        let d = [
            (self.gamma.log2() - other.gamma.log2()) / 2.0,
            (self.gain - other.gain) / (GAIN_BOUNDS.1 - GAIN_BOUNDS.0),
            (self.bias - other.bias) / (BIAS_BOUNDS.1 - BIAS_BOUNDS.0),
            (self.noise_sigma - other.noise_sigma) / NOISE_MAX,
            (self.blur_sigma_px - other.blur_sigma_px) / BLUR_MAX,
        ];
        d.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Pointwise intensity transform (no noise, no blur).
    pub fn intensity(&self, x: f32) -> f32 {
        let y = self.gain * (x.clamp(0.0, 1.0) as f64).powf(self.gamma) + self.bias;
        y.clamp(0.0, 1.0) as f32
    }
}

/// Renders `content` in `style`. With `noise_sigma = 0` the rng is unused
/// and the result is deterministic.
pub fn apply_style<R: Rng>(content: &Image, style: &DomainStyle, rng: &mut R) -> Image {
    let mut img = content.clone();
    if style.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, style.noise_sigma).expect("positive sigma");
        for p in img.pixels_mut() {
            *p = (*p + noise.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }
    let mut img = img.map(|x| style.intensity(x));
    if style.blur_sigma_px > 0.0 {
        img = gaussian_blur(&img, style.blur_sigma_px);
    }
    img.clamp_unit();
    img
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (img.height(), img.width());
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (j, k) in kernel.iter().enumerate() {
                let xx = reflect(x as isize + j as isize - radius, w);
                acc += k * img.get(y, xx);
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (j, k) in kernel.iter().enumerate() {
                let yy = reflect(y as isize + j as isize - radius, h);
                acc += k * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Image::new(h, w, out).expect("same dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn ramp() -> Image {
        Image::new(8, 8, (0..64).map(|i| i as f32 / 63.0).collect()).unwrap()
    }

    #[test]
    fn identity_style_is_a_no_op() {
        let img = ramp();
        let out = apply_style(&img, &DomainStyle::identity(StyleId::A), &mut seed::rng(0));
        assert_eq!(out, img);
    }

    #[test]
    fn gamma_two_squares_constant_image() {
        let style = DomainStyle {
            gamma: 2.0,
            ..DomainStyle::identity(StyleId::A)
        };
        let out = apply_style(&Image::filled(4, 4, 0.5), &style, &mut seed::rng(0));
        assert!(out.pixels().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn presets_are_valid_and_separated() {
        for a in StyleId::ALL {
            DomainStyle::preset(a).validate().unwrap();
            for b in StyleId::ALL {
                if a < b {
                    let d = DomainStyle::preset(a).distance(&DomainStyle::preset(b));
                    assert!(d > STYLE_SEPARATION, "{a} vs {b}: {d}");
                }
            }
        }
    }

    #[test]
    fn styled_output_stays_in_unit_interval() {
        let img = ramp();
        for id in StyleId::ALL {
            let out = apply_style(&img, &DomainStyle::preset(id), &mut seed::rng(5));
            let (lo, hi) = out.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let out = gaussian_blur(&Image::filled(9, 9, 0.4), 1.5);
        assert!(out.pixels().iter().all(|&p| (p - 0.4).abs() < 1e-6));
    }

    #[test]
    fn style_id_parses_case_insensitively() {
        assert_eq!("d".parse::<StyleId>().unwrap(), StyleId::D);
        assert!("Z".parse::<StyleId>().is_err());
    }
}
