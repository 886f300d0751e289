//! Fine-tuning a detector from a pretrained backbone.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{detect_loss, FocalParams, HeadOutputs};
use super::model::{infer, DetectHead, Detector, InferConfig, HEAD_BLOCKS};
use super::{assign_targets, Detection, Grid};
use crate::metrics::{mean_ap, ClassAps, GroundTruth};
use crate::nn::{Checkpoint, Encoder, Graph, Mode, ParamSet, Sgd, SgdConfig, Tensor};
use crate::pairing::images_to_tensor;
use crate::seed;
use crate::synthgen::{BoxLabel, Image, LabeledImage, LesionClass};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// IoU threshold for matching in validation mAP.
    pub eval_iou: f64,
    pub hflip: bool,
    pub focal: FocalParams,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            weight_decay: 1e-4,
            momentum: 0.9,
            epochs: 20,
            batch_size: 8,
            score_thresh: 0.05,
            nms_iou: 0.5,
            eval_iou: 0.5,
            hflip: true,
            focal: FocalParams::default(),
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        for (name, v) in [("score_thresh", self.score_thresh), ("nms_iou", self.nms_iou), ("eval_iou", self.eval_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        self.sgd().validate()
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn infer(&self) -> InferConfig {
        InferConfig {
            score_thresh: self.score_thresh,
            nms_iou: self.nms_iou,
        }
    }
}

/// Detector with the checkpoint's backbone and a freshly initialized head.
pub fn init_detector(ckpt: &Checkpoint, seed: u64) -> Result<Detector> {
    let cfg = &ckpt.provenance.encoder;
    if cfg.widths.len() < HEAD_BLOCKS {
        return Err(Error::Config(format!("encoder needs at least {HEAD_BLOCKS} blocks for the head")));
    }
    let mut params: ParamSet<f32> = ParamSet::new();
    for name in Encoder::backbone_names(&ckpt.params) {
        let p = ckpt.params.by_name(&name).expect("listed name");
        params.add(&name, p.value.clone(), p.trainable)?;
    }
    let encoder = Encoder::bind_backbone(cfg, &params)?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("detect-head")]));
    let head = DetectHead::init(cfg.widths[HEAD_BLOCKS - 1], &mut params, &mut rng)?;
    Ok(Detector { encoder, head, params })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Detector of the best validation epoch.
    pub detector: Detector,
    pub best_epoch: usize,
    pub val_map: Vec<f64>,
    pub train_loss: Vec<f64>,
}

fn ground_truth(images: &[LabeledImage]) -> Vec<GroundTruth> {
    images
        .iter()
        .flat_map(|li| {
            li.boxes.iter().map(move |b| GroundTruth {
                image_id: li.id,
                class: b.class,
                bbox: b.coords(),
            })
        })
        .collect()
}

/// mAP of `det` on labeled images.
pub fn evaluate(det: &Detector, images: &[LabeledImage], infer_cfg: &InferConfig, iou_thresh: f64) -> Result<(ClassAps, Vec<Detection>)> {
    let imgs: Vec<Image> = images.iter().map(|l| l.image.clone()).collect();
    let ids: Vec<u64> = images.iter().map(|l| l.id).collect();
    let dets: Vec<Detection> = infer(det, &imgs, &ids, infer_cfg)?.into_iter().flatten().collect();
    let aps = mean_ap(&dets, &ground_truth(images), &LesionClass::ALL, iou_thresh)?;
    Ok((aps, dets))
}

/// One SGD step on a batch; returns the loss.
pub fn train_step(det: &mut Detector, sgd: &mut Sgd<f32>, batch: &[(Image, Vec<BoxLabel>)], focal: FocalParams) -> Result<f64> {
    let imgs: Vec<Image> = batch.iter().map(|b| b.0.clone()).collect();
    let x: Tensor<f32> = images_to_tensor(&imgs)?;
    let grid = Grid::for_image(imgs[0].height(), imgs[0].width(), det.stride())?;
    let targets: Vec<_> = batch.iter().map(|(_, boxes)| assign_targets(boxes, grid)).collect();

    let mut g = Graph::new(Mode::Train);
    let xi = g.input(x, false);
    let out = det.forward(&mut g, xi)?;
    let (cls, bx, ctr) = (
        g.value(out.class_logits).to_f64_vec(),
        g.value(out.box_raw).to_f64_vec(),
        g.value(out.centerness_logits).to_f64_vec(),
    );
    let l = detect_loss(
        HeadOutputs {
            class_logits: &cls,
            box_raw: &bx,
            centerness_logits: &ctr,
        },
        &targets,
        focal,
    )?;
    let grads = vec![
        Tensor::from_f64_slice(g.value(out.class_logits).shape(), &l.grad_class)?,
        Tensor::from_f64_slice(g.value(out.box_raw).shape(), &l.grad_box)?,
        Tensor::from_f64_slice(g.value(out.centerness_logits).shape(), &l.grad_centerness)?,
    ];
    let loss = g.fused_loss(&[out.class_logits, out.box_raw, out.centerness_logits], l.total as f32, grads)?;
    det.params.zero_grad();
    g.backward(loss, &mut det.params)?;
    g.commit_buffers(&mut det.params);
    sgd.step(&mut det.params);
    Ok(l.total)
}

/// Trains on `train`, keeping the epoch with the best mAP on `val`
/// (earliest on ties).
pub fn finetune(ckpt: &Checkpoint, train: &[LabeledImage], val: &[LabeledImage], cfg: &DetectConfig, seed: u64) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty detection training split".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("empty detection validation split".into()));
    }
    let mut det = init_detector(ckpt, seed)?;
    let mut sgd = Sgd::new(cfg.sgd(), &det.params)?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("finetune")]));
    let infer_cfg = cfg.infer();

    let mut best: Option<(f64, usize, ParamSet<f32>)> = None;
    let mut val_map = Vec::with_capacity(cfg.epochs);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Image, Vec<BoxLabel>)> = chunk
                .iter()
                .map(|&i| {
                    let li = &train[i];
                    if cfg.hflip && rng.random::<bool>() {
                        let w = li.image.width();
                        (li.image.hflip(), li.boxes.iter().map(|b| b.hflip(w)).collect())
                    } else {
                        (li.image.clone(), li.boxes.clone())
                    }
                })
                .collect();
            total += train_step(&mut det, &mut sgd, &batch, cfg.focal).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    step: epoch,
                    loss: f64::NAN,
                },
                e => e,
            })?;
            steps += 1;
        }
        train_loss.push(total / steps as f64);
        let (aps, _) = evaluate(&det, val, &infer_cfg, cfg.eval_iou)?;
        val_map.push(aps.map);
        log::debug!("finetune epoch {epoch}: loss {:.4} val mAP {:.4}", total / steps as f64, aps.map);
        if best.as_ref().is_none_or(|(m, _, _)| aps.map > *m) {
            best = Some((aps.map, epoch, det.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    det.params = params;
    Ok(FinetuneOutcome {
        detector: det,
        best_epoch,
        val_map,
        train_loss,
    })
}
