//! Focal + IoU + centerness loss with analytic gradients.

use serde::{Deserialize, Serialize};

use super::TargetMap;
use crate::synthgen::LesionClass;
use crate::{Error, Result};

pub const NUM_CLASSES: usize = LesionClass::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// Raw head outputs for a batch, NHWC and flattened.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs<'a> {
    /// `[B, H, W, NUM_CLASSES]` logits.
    pub class_logits: &'a [f64],
    /// `[B, H, W, 4]`; distances are `stride * exp(raw)`.
    pub box_raw: &'a [f64],
    /// `[B, H, W, 1]` logits.
    pub centerness_logits: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct DetectLoss {
    pub total: f64,
    pub focal: f64,
    pub iou: f64,
    pub centerness: f64,
    pub num_positive: usize,
    pub grad_class: Vec<f64>,
    pub grad_box: Vec<f64>,
    pub grad_centerness: Vec<f64>,
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal(x: f64, target: bool, p: FocalParams) -> (f64, f64) {
    let prob = sigmoid(x);
    if target {
        let log_p = -softplus(-x);
        let w = (1.0 - prob).powf(p.gamma);
        (-p.alpha * w * log_p, p.alpha * w * (p.gamma * prob * log_p - (1.0 - prob)))
    } else {
        let log_q = -softplus(x);
        let w = prob.powf(p.gamma);
        (
            -(1.0 - p.alpha) * w * log_q,
            (1.0 - p.alpha) * w * (prob - p.gamma * (1.0 - prob) * log_q),
        )
    }
}

/// `-ln IoU` between two boxes given as distances `[l, t, r, b]` from the
/// same point, and the derivative with respect to the predicted distances.
pub fn iou_loss(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [pl, pt, pr, pb] = pred;
    let [tl, tt, tr, tb] = target;
    let iw = pl.min(tl) + pr.min(tr);
    let ih = pt.min(tt) + pb.min(tb);
    let inter = iw * ih;
    let ap = (pl + pr) * (pt + pb);
    let at = (tl + tr) * (tt + tb);
    let union = ap + at - inter;
    let loss = union.ln() - inter.ln();
    let di = [
        if pl < tl { ih } else { 0.0 },
        if pt < tt { iw } else { 0.0 },
        if pr < tr { ih } else { 0.0 },
        if pb < tb { iw } else { 0.0 },
    ];
    let da = [pt + pb, pl + pr, pt + pb, pl + pr];
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = (da[k] - di[k]) / union - di[k] / inter;
    }
    (loss, g)
}

/// Sum of focal, IoU and centerness terms, each normalized by the number
/// of positive locations in the batch. With no positives only the focal
/// term remains.
pub fn detect_loss(out: HeadOutputs<'_>, targets: &[TargetMap], focal_params: FocalParams) -> Result<DetectLoss> {
    let locs: usize = targets.iter().map(|t| t.grid.len()).sum();
    if out.class_logits.len() != locs * NUM_CLASSES || out.box_raw.len() != locs * 4 || out.centerness_logits.len() != locs {
        return Err(Error::Shape(format!(
            "head outputs ({}, {}, {}) do not match {locs} target locations",
            out.class_logits.len(),
            out.box_raw.len(),
            out.centerness_logits.len()
        )));
    }
    let num_positive: usize = targets.iter().map(|t| t.num_positive()).sum();
    let norm = 1.0 / num_positive.max(1) as f64;

    let mut r = DetectLoss {
        total: 0.0,
        focal: 0.0,
        iou: 0.0,
        centerness: 0.0,
        num_positive,
        grad_class: vec![0.0; out.class_logits.len()],
        grad_box: vec![0.0; out.box_raw.len()],
        grad_centerness: vec![0.0; out.centerness_logits.len()],
    };
    let mut loc = 0;
    for t in targets {
        let stride = t.grid.stride as f64;
        for i in 0..t.grid.len() {
            for c in 0..NUM_CLASSES {
                let k = loc * NUM_CLASSES + c;
                let is_target = t.class[i].map(|cl| cl.index()) == Some(c);
                let (l, g) = focal(out.class_logits[k], is_target, focal_params);
                r.focal += l * norm;
                r.grad_class[k] = g * norm;
            }
            if t.class[i].is_some() {
                let raw = &out.box_raw[loc * 4..loc * 4 + 4];
                let pred = [0, 1, 2, 3].map(|k| stride * raw[k].exp());
                let (l, g) = iou_loss(pred, t.regression[i]);
                r.iou += l * norm;
                for k in 0..4 {
                    r.grad_box[loc * 4 + k] = g[k] * pred[k] * norm;
                }
                let x = out.centerness_logits[loc];
                let c = t.centerness[i];
                r.centerness += (softplus(x) - c * x) * norm;
                r.grad_centerness[loc] = (sigmoid(x) - c) * norm;
            }
            loc += 1;
        }
    }
    r.total = r.focal + r.iou + r.centerness;
    if !r.total.is_finite() {
        return Err(Error::NonFinite("detect_loss".into()));
    }
    Ok(r)
}
