//! Center-inside target assignment on a single stride-`s` grid.

use serde::{Deserialize, Serialize};

use crate::synthgen::{BoxLabel, LesionClass};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Grid {
    pub fn for_image(image_height: usize, image_width: usize, stride: usize) -> Result<Self> {
        if stride == 0 || !image_height.is_multiple_of(stride) || !image_width.is_multiple_of(stride) {
            return Err(Error::Shape(format!(
                "stride {stride} does not divide {image_height}x{image_width}"
            )));
        }
        Ok(Self {
            height: image_height / stride,
            width: image_width / stride,
            stride,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel-space center of location `(row, col)`.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub grid: Grid,
    /// Per location (row-major): lesion class, or `None` for background.
    pub class: Vec<Option<LesionClass>>,
    /// Distances `[l, t, r, b]` in pixels; zero at background locations.
    pub regression: Vec<[f64; 4]>,
    pub centerness: Vec<f64>,
    /// Boxes narrower or shorter than one stride cell.
    pub tiny_boxes: usize,
}

impl TargetMap {
    pub fn num_positive(&self) -> usize {
        self.class.iter().filter(|c| c.is_some()).count()
    }
}

pub fn centerness([l, t, r, b]: [f64; 4]) -> f64 {
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// A location is positive iff its center lies strictly inside a box; among
/// several such boxes the smallest one (then the earliest) wins.
pub fn assign_targets(gt: &[BoxLabel], grid: Grid) -> TargetMap {
    let n = grid.len();
    let mut map = TargetMap {
        grid,
        class: vec![None; n],
        regression: vec![[0.0; 4]; n],
        centerness: vec![0.0; n],
        tiny_boxes: 0,
    };
    let s = grid.stride as f64;
    for b in gt {
        if b.x_max - b.x_min < s || b.y_max - b.y_min < s {
            map.tiny_boxes += 1;
            log::warn!("box {:?} is smaller than one stride cell", b.coords());
        }
    }
    for row in 0..grid.height {
        for col in 0..grid.width {
            let (cx, cy) = grid.center(row, col);
            let mut best: Option<(&BoxLabel, [f64; 4])> = None;
            for b in gt {
                let d = [cx - b.x_min, cy - b.y_min, b.x_max - cx, b.y_max - cy];
                if d.iter().all(|&v| v > 0.0) && best.is_none_or(|(w, _)| b.area() < w.area()) {
                    best = Some((b, d));
                }
            }
            if let Some((b, d)) = best {
                let i = row * grid.width + col;
                map.class[i] = Some(b.class);
                map.regression[i] = d;
                map.centerness[i] = centerness(d);
            }
        }
    }
    map
}
