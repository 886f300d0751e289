//! Latent "breast" content and its rendering into CC and MLO views.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoxLabel, Image, LesionClass};
use crate::seed;
use crate::{Error, Result};

pub const MAX_LESIONS: usize = 4;
pub const RADIUS_BOUNDS: (f64, f64) = (0.03, 0.15);
pub const INTENSITY_BOUNDS: (f64, f64) = (0.1, 0.5);
/// Smallest number of dots in a calcification cluster.
pub const MIN_CALC_DOTS: usize = 5;
/// Standard deviation of one calcification dot, as a fraction of the side.
const CALC_DOT_SIGMA: f64 = 0.012;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "MLO")]
    Mlo,
}

impl View {
    pub const BOTH: [View; 2] = [View::Cc, View::Mlo];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Cc => "CC",
            View::Mlo => "MLO",
        }
    }

    pub fn other(self) -> View {
        match self {
            View::Cc => View::Mlo,
            View::Mlo => View::Cc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentLesion {
    pub class: LesionClass,
    /// Center in the unit content square.
    pub center: (f64, f64),
    /// Radius as a fraction of the image side.
    pub radius: f64,
    pub intensity_delta: f64,
    /// Dot offsets (unit-square units) for calcification clusters; empty for masses.
    pub dots: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    /// Spatial frequency of the parenchyma texture, in cycles per side.
    pub texture_frequency: f64,
    pub base_intensity: f64,
    pub texture_amplitude: f64,
    /// Orientation and phase of each texture component.
    pub waves: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub subject_id: u64,
    pub rng_seed: u64,
    pub lesions: Vec<LatentLesion>,
    pub background: BackgroundParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Relative frequency of 0, 1, .., 4 lesions per subject.
    pub lesion_count_weights: [f64; MAX_LESIONS + 1],
    pub max_lesions: usize,
    pub mass_fraction: f64,
    pub radius_range: (f64, f64),
    pub intensity_range: (f64, f64),
    /// Range of lesion center coordinates inside the content square.
    pub center_range: (f64, f64),
    pub texture_frequency_range: (f64, f64),
    pub base_intensity_range: (f64, f64),
    pub texture_amplitude: f64,
    /// MLO shear angle in degrees.
    pub mlo_shear_deg: f64,
    /// Leg length of the MLO axilla triangle, as a fraction of the side.
    pub axilla_size: f64,
    pub axilla_intensity: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            lesion_count_weights: [0.10, 0.35, 0.30, 0.15, 0.10],
            max_lesions: MAX_LESIONS,
            mass_fraction: 0.5,
            radius_range: (0.07, 0.15),
            intensity_range: (0.15, 0.4),
            center_range: (0.15, 0.85),
            texture_frequency_range: (2.0, 6.0),
            base_intensity_range: (0.3, 0.5),
            texture_amplitude: 0.06,
            mlo_shear_deg: 20.0,
            axilla_size: 0.3,
            axilla_intensity: 0.35,
        }
    }
}

fn within(r: (f64, f64), bounds: (f64, f64)) -> bool {
    r.0 <= r.1 && r.0 >= bounds.0 && r.1 <= bounds.1
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_lesions > MAX_LESIONS {
            return bad(format!("max_lesions {} exceeds {MAX_LESIONS}", self.max_lesions));
        }
        if self.lesion_count_weights.iter().any(|w| !(*w >= 0.0))
            || self.lesion_count_weights[..=self.max_lesions].iter().sum::<f64>() <= 0.0
        {
            return bad("lesion_count_weights must be non-negative with positive mass".into());
        }
        if !within(self.radius_range, RADIUS_BOUNDS) {
            return bad(format!("radius_range {:?} outside {RADIUS_BOUNDS:?}", self.radius_range));
        }
        if !within(self.intensity_range, INTENSITY_BOUNDS) {
            return bad(format!("intensity_range {:?} outside {INTENSITY_BOUNDS:?}", self.intensity_range));
        }
        if !within(self.center_range, (0.0, 1.0)) || !within(self.base_intensity_range, (0.0, 1.0)) {
            return bad("center_range and base_intensity_range must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.mass_fraction) {
            return bad("mass_fraction must lie in [0, 1]".into());
        }
        if !(0.0..60.0).contains(&self.mlo_shear_deg.abs()) {
            return bad("mlo_shear_deg must be below 60 degrees".into());
        }
        Ok(())
    }

    /// Probability of each lesion count after truncation at `max_lesions`.
    pub fn lesion_count_distribution(&self) -> Vec<f64> {
        let w = &self.lesion_count_weights[..=self.max_lesions];
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    fn shear(&self) -> f64 {
        self.mlo_shear_deg.to_radians().tan()
    }
}

fn uniform<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Draws a subject; a pure function of `(seed, cfg)`.
pub fn make_subject(seed: u64, cfg: &GenConfig) -> Subject {
    let mut rng = seed::rng(seed);
    let probs = cfg.lesion_count_distribution();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut count = probs.len() - 1;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            count = k;
            break;
        }
    }

    let mut lesions = Vec::with_capacity(count);
    for _ in 0..count {
        let class = if rng.random::<f64>() < cfg.mass_fraction {
            LesionClass::Mass
        } else {
            LesionClass::CalcCluster
        };
        let center = (uniform(&mut rng, cfg.center_range), uniform(&mut rng, cfg.center_range));
        let radius = uniform(&mut rng, cfg.radius_range);
        let intensity_delta = uniform(&mut rng, cfg.intensity_range);
        let dots = match class {
            LesionClass::Mass => Vec::new(),
            LesionClass::CalcCluster => {
                let n = rng.random_range(MIN_CALC_DOTS..=MIN_CALC_DOTS + 4);
                let reach = (radius - 2.0 * CALC_DOT_SIGMA).max(0.3 * radius);
                (0..n)
                    .map(|_| {
                        let rr = reach * rng.random::<f64>().sqrt();
                        let a = rng.random_range(0.0..2.0 * PI);
                        (rr * a.cos(), rr * a.sin())
                    })
                    .collect()
            }
        };
        lesions.push(LatentLesion {
            class,
            center,
            radius,
            intensity_delta,
            dots,
        });
    }

    let waves = (0..3)
        .map(|_| (rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let background = BackgroundParams {
        texture_frequency: uniform(&mut rng, cfg.texture_frequency_range),
        base_intensity: uniform(&mut rng, cfg.base_intensity_range),
        texture_amplitude: cfg.texture_amplitude,
        waves,
    };
    Subject {
        subject_id: seed,
        rng_seed: seed,
        lesions,
        background,
    }
}

impl Subject {
    /// Tissue intensity at content coordinates `(u, v)` in the unit square.
    pub fn content_at(&self, u: f64, v: f64) -> f64 {
        let bg = &self.background;
        let texture: f64 = bg
            .waves
            .iter()
            .map(|&(theta, phase)| {
                (2.0 * PI * bg.texture_frequency * (u * theta.cos() + v * theta.sin()) + phase).sin()
            })
            .sum::<f64>()
            / bg.waves.len().max(1) as f64;
        let mut value = bg.base_intensity + bg.texture_amplitude * texture;
        for l in &self.lesions {
            let (du, dv) = (u - l.center.0, v - l.center.1);
            match l.class {
                LesionClass::Mass => {
                    let q = (du * du + dv * dv) / (l.radius * l.radius);
                    if q < 1.0 {
                        value += l.intensity_delta * (1.0 - q) * (1.0 - q);
                    }
                }
                LesionClass::CalcCluster => {
                    let s2 = 2.0 * CALC_DOT_SIGMA * CALC_DOT_SIGMA;
                    for &(ox, oy) in &l.dots {
                        let (a, b) = (du - ox, dv - oy);
                        let d2 = a * a + b * b;
                        if d2 < 9.0 * s2 {
                            value += l.intensity_delta * (-d2 / s2).exp();
                        }
                    }
                }
            }
        }
        value.clamp(0.0, 1.0)
    }
}

/// Renders one view of `subject` at `resolution x resolution`.
///
/// CC shows the content square directly. MLO shears it horizontally about
/// the image center (`x = u + tan(shear) * (v - 0.5)`) and adds a bright
/// triangular axilla band in the top-left corner; pixels whose preimage
/// leaves the content square are background air (0).
pub fn render_view(
    subject: &Subject,
    view: View,
    resolution: usize,
    cfg: &GenConfig,
) -> Result<(Image, Vec<BoxLabel>)> {
    if resolution < 32 {
        return Err(Error::Config(format!("resolution {resolution} is below 32")));
    }
    let n = resolution as f64;
    let k = match view {
        View::Cc => 0.0,
        View::Mlo => cfg.shear(),
    };
    let mut pixels = Vec::with_capacity(resolution * resolution);
    for py in 0..resolution {
        let y = (py as f64 + 0.5) / n;
        for px in 0..resolution {
            let x = (px as f64 + 0.5) / n;
            let u = x - k * (y - 0.5);
            let mut value = if (0.0..=1.0).contains(&u) {
                subject.content_at(u, y)
            } else {
                0.0
            };
            if view == View::Mlo && x + y < cfg.axilla_size {
                value = (value + cfg.axilla_intensity).min(1.0);
            }
            pixels.push(value as f32);
        }
    }

    let mut boxes = Vec::with_capacity(subject.lesions.len());
    for (i, l) in subject.lesions.iter().enumerate() {
        let (cx, cy) = (l.center.0 + k * (l.center.1 - 0.5), l.center.1);
        let half_w = l.radius * (1.0 + k * k).sqrt();
        let b = BoxLabel {
            class: l.class,
            x_min: ((cx - half_w) * n).max(0.0),
            y_min: ((cy - l.radius) * n).max(0.0),
            x_max: ((cx + half_w) * n).min(n),
            y_max: ((cy + l.radius) * n).min(n),
        };
        if !(b.x_min < b.x_max && b.y_min < b.y_max) {
            return Err(Error::Render(format!(
                "lesion {i} of subject {} leaves the {} frame",
                subject.subject_id,
                view.as_str()
            )));
        }
        boxes.push(b);
    }
    Ok((Image::new(resolution, resolution, pixels)?, boxes))
}
