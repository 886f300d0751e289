//! Detection head, detector and inference.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{sigmoid, NUM_CLASSES};
use super::Grid;
use crate::metrics::{iou_unchecked, BoxCoords};
use crate::nn::{he_normal, lookup, Checkpoint, Encoder, EncoderConfig, Graph, Mode, ParamId, ParamSet, Provenance, Tensor, ValueId};
use crate::pairing::images_to_tensor;
use crate::synthgen::{Image, LesionClass};
use crate::{Error, Result};

/// Encoder blocks feeding the head (stride 8 for the default encoder).
pub const HEAD_BLOCKS: usize = 3;
pub const STEM_CHANNELS: usize = 32;
/// Initial foreground probability of the class logits.
pub const CLASS_PRIOR: f64 = 0.01;
pub const MAX_DETECTIONS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class: LesionClass,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoxCoords,
}

#[derive(Clone, Copy, Debug)]
pub struct DetectHead {
    stem_w: ParamId,
    stem_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    box_w: ParamId,
    box_b: ParamId,
    ctr_w: ParamId,
    ctr_b: ParamId,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadValues {
    pub class_logits: ValueId,
    pub box_raw: ValueId,
    pub centerness_logits: ValueId,
}

impl DetectHead {
    pub fn init<R: Rng>(in_channels: usize, params: &mut ParamSet<f32>, rng: &mut R) -> Result<Self> {
        let c = STEM_CHANNELS;
        let prior = (-((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln()) as f32;
        let small = |shape: &[usize], rng: &mut R| {
            let t: Tensor<f32> = he_normal(shape, c, rng);
            let data = t.data().iter().map(|v| v * 0.1).collect();
            Tensor::from_vec(shape, data).expect("shape")
        };
        Ok(Self {
            stem_w: params.add("det.stem.weight", he_normal(&[3, 3, in_channels, c], 9 * in_channels, rng), true)?,
            stem_b: params.add("det.stem.bias", Tensor::zeros(&[c]), true)?,
            cls_w: params.add("det.cls.weight", small(&[1, 1, c, NUM_CLASSES], rng), true)?,
            cls_b: params.add("det.cls.bias", Tensor::full(&[NUM_CLASSES], prior), true)?,
            box_w: params.add("det.box.weight", small(&[1, 1, c, 4], rng), true)?,
            box_b: params.add("det.box.bias", Tensor::zeros(&[4]), true)?,
            ctr_w: params.add("det.ctr.weight", small(&[1, 1, c, 1], rng), true)?,
            ctr_b: params.add("det.ctr.bias", Tensor::zeros(&[1]), true)?,
        })
    }

    pub fn bind(params: &ParamSet<f32>) -> Result<Self> {
        let id = |n: &str| lookup(|x| params.id(x), n);
        Ok(Self {
            stem_w: id("det.stem.weight")?,
            stem_b: id("det.stem.bias")?,
            cls_w: id("det.cls.weight")?,
            cls_b: id("det.cls.bias")?,
            box_w: id("det.box.weight")?,
            box_b: id("det.box.bias")?,
            ctr_w: id("det.ctr.weight")?,
            ctr_b: id("det.ctr.bias")?,
        })
    }

    pub fn forward(&self, g: &mut Graph<f32>, params: &ParamSet<f32>, features: ValueId) -> Result<HeadValues> {
        let (w, b) = (g.param(params, self.stem_w), g.param(params, self.stem_b));
        let h = g.conv2d(features, w, Some(b), 1, 1)?;
        let h = g.relu(h);
        let mut branch = |wid, bid| -> Result<ValueId> {
            let (w, b) = (g.param(params, wid), g.param(params, bid));
            g.conv2d(h, w, Some(b), 1, 0)
        };
        Ok(HeadValues {
            class_logits: branch(self.cls_w, self.cls_b)?,
            box_raw: branch(self.box_w, self.box_b)?,
            centerness_logits: branch(self.ctr_w, self.ctr_b)?,
        })
    }
}

/// Backbone plus head, with all parameters.
#[derive(Clone, Debug)]
pub struct Detector {
    pub encoder: Encoder,
    pub head: DetectHead,
    pub params: ParamSet<f32>,
}

impl Detector {
    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn stride(&self) -> usize {
        1 << HEAD_BLOCKS.min(self.config().widths.len())
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: ValueId) -> Result<HeadValues> {
        let blocks = self.encoder.forward_blocks(g, &self.params, x, HEAD_BLOCKS)?;
        self.head.forward(g, &self.params, *blocks.last().expect("head blocks"))
    }

    pub fn to_checkpoint(&self, mut provenance: Provenance) -> Checkpoint {
        provenance.kind = "detector".into();
        Checkpoint::new(provenance, &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.provenance.kind != "detector" {
            return Err(Error::Checkpoint(format!("expected a detector, found {}", ckpt.provenance.kind)));
        }
        let params = ckpt.params.clone();
        let encoder = Encoder::bind_backbone(&ckpt.provenance.encoder, &params)?;
        let head = DetectHead::bind(&params)?;
        Ok(Self { encoder, head, params })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.5,
        }
    }
}

const INFER_CHUNK: usize = 32;

/// Detections for each image, in input order. `ids` labels the images.
pub fn infer(det: &Detector, images: &[Image], ids: &[u64], cfg: &InferConfig) -> Result<Vec<Vec<Detection>>> {
    if images.len() != ids.len() {
        return Err(Error::Shape("one id per image".into()));
    }
    let mut all = Vec::with_capacity(images.len());
    for (chunk, chunk_ids) in images.chunks(INFER_CHUNK).zip(ids.chunks(INFER_CHUNK)) {
        let x: Tensor<f32> = images_to_tensor(chunk)?;
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let grid = Grid::for_image(h, w, det.stride())?;
        let mut g = Graph::new(Mode::Eval);
        let xi = g.input(x, false);
        let out = det.forward(&mut g, xi)?;
        let cls = g.value(out.class_logits).to_f64_vec();
        let bx = g.value(out.box_raw).to_f64_vec();
        let ctr = g.value(out.centerness_logits).to_f64_vec();
        for (b, &id) in chunk_ids.iter().enumerate() {
            let mut cands = Vec::new();
            for row in 0..grid.height {
                for col in 0..grid.width {
                    let loc = b * grid.len() + row * grid.width + col;
                    let c_score = sigmoid(ctr[loc]);
                    let (cx, cy) = grid.center(row, col);
                    let s = grid.stride as f64;
                    let d: Vec<f64> = bx[loc * 4..loc * 4 + 4].iter().map(|r| s * r.exp()).collect();
                    let bbox = [
                        (cx - d[0]).clamp(0.0, w as f64),
                        (cy - d[1]).clamp(0.0, h as f64),
                        (cx + d[2]).clamp(0.0, w as f64),
                        (cy + d[3]).clamp(0.0, h as f64),
                    ];
                    if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
                        continue;
                    }
                    for (k, class) in LesionClass::ALL.into_iter().enumerate() {
                        let score = sigmoid(cls[loc * NUM_CLASSES + k]) * c_score;
                        if score >= cfg.score_thresh && score.is_finite() {
                            cands.push(Detection {
                                image_id: id,
                                class,
                                score,
                                bbox,
                            });
                        }
                    }
                }
            }
            let mut kept = nms(cands, cfg.nms_iou);
            kept.truncate(MAX_DETECTIONS);
            all.push(kept);
        }
    }
    Ok(all)
}

/// Total order used by NMS: score descending, then lower coordinates, then class.
fn rank(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .then_with(|| a.class.cmp(&b.class))
}

/// Per-class greedy suppression of boxes overlapping a kept box by more
/// than `iou_thresh`. Output is ranked and independent of input order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && k.image_id == d.image_id && iou_unchecked(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Writes detections as JSON lines `{image_id, class, score, box}`.
pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dets {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
