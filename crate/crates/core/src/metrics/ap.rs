//! IoU, precision/recall curves, AP and mAP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::synthgen::{LesionClass, StyleId};
use crate::{Error, Result};

/// `[x_min, y_min, x_max, y_max]` in pixels.
pub type BoxCoords = [f64; 4];

fn area(b: &BoxCoords) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn is_degenerate(b: &BoxCoords) -> bool {
    !b.iter().all(|v| v.is_finite()) || b[2] <= b[0] || b[3] <= b[1]
}

pub fn iou(a: &BoxCoords, b: &BoxCoords) -> Result<f64> {
    if is_degenerate(a) || is_degenerate(b) {
        return Err(Error::Eval(format!("degenerate box in iou: {a:?} vs {b:?}")));
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BoxCoords, b: &BoxCoords) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// A ground-truth box of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class: LesionClass,
    pub bbox: BoxCoords,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// Detections in ranked order with their TP flag.
    pub ranked: Vec<(f64, bool)>,
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
    pub n_gt: usize,
}

impl PrCurve {
    /// Area under the precision envelope (all-points interpolation).
    pub fn average_precision(&self) -> f64 {
        if self.n_gt == 0 {
            return 0.0;
        }
        let mut envelope: Vec<f64> = self.points.iter().map(|p| p.1).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (i, &(r, _)) in self.points.iter().enumerate() {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
        ap
    }
}

/// Ranks single-class detections and matches them greedily: each detection,
/// in descending score order (ties keep input order), takes the unmatched
/// ground truth of its image with the highest IoU, if that IoU reaches
/// `iou_thresh`.
pub fn pr_curve(dets: &[&Detection], gts: &[&GroundTruth], iou_thresh: f64) -> Result<PrCurve> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut matched = vec![false; gts.len()];
    let mut ranked = Vec::with_capacity(dets.len());
    let mut points = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for (rank, &di) in order.iter().enumerate() {
        let d = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if matched[gi] || g.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox)?;
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        let hit = if let Some((gi, _)) = best {
            matched[gi] = true;
            tp += 1;
            true
        } else {
            false
        };
        ranked.push((d.score, hit));
        let recall = if gts.is_empty() { 0.0 } else { tp as f64 / gts.len() as f64 };
        points.push((recall, tp as f64 / (rank + 1) as f64));
    }
    Ok(PrCurve {
        ranked,
        points,
        n_gt: gts.len(),
    })
}

/// AP of one class. `None` when there is neither ground truth nor a
/// detection; `Some(0.0)` for detections without ground truth.
pub fn average_precision(dets: &[&Detection], gts: &[&GroundTruth], iou_thresh: f64) -> Result<Option<f64>> {
    if gts.is_empty() {
        return Ok(if dets.is_empty() { None } else { Some(0.0) });
    }
    Ok(Some(pr_curve(dets, gts, iou_thresh)?.average_precision()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAps {
    /// AP of every class that has ground truth or detections.
    pub ap: BTreeMap<LesionClass, f64>,
    /// Mean AP over classes present in the ground truth.
    pub map: f64,
}

pub fn mean_ap(dets: &[Detection], gts: &[GroundTruth], classes: &[LesionClass], iou_thresh: f64) -> Result<ClassAps> {
    if gts.is_empty() {
        return Err(Error::Eval("mean_ap needs at least one ground-truth box".into()));
    }
    let mut ap = BTreeMap::new();
    let mut present = Vec::new();
    for &c in classes {
        let d: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == c).collect();
        if let Some(v) = average_precision(&d, &g, iou_thresh)? {
            ap.insert(c, v);
            if !g.is_empty() {
                present.push(v);
            }
        }
    }
    if present.is_empty() {
        return Err(Error::Eval("no ground truth among the requested classes".into()));
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ClassAps { ap, map })
}

/// Per-style detection quality of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_style: BTreeMap<StyleId, ClassAps>,
    pub seen: Vec<StyleId>,
    pub unseen: Vec<StyleId>,
}

impl EvalReport {
    pub fn style_map(&self, s: StyleId) -> Option<f64> {
        self.per_style.get(&s).map(|c| c.map)
    }

    fn avg(&self, styles: &[StyleId]) -> f64 {
        let v: Vec<f64> = styles.iter().filter_map(|&s| self.style_map(s)).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn seen_avg(&self) -> f64 {
        self.avg(&self.seen)
    }

    pub fn unseen_avg(&self) -> f64 {
        self.avg(&self.unseen)
    }

    /// Column names: method, each seen style, seen avg, each unseen style, unseen avg.
    pub fn csv_header(seen: &[StyleId], unseen: &[StyleId]) -> Vec<String> {
        let mut h = vec!["method".to_string()];
        h.extend(seen.iter().map(|s| format!("style_{s}")));
        h.push("seen_avg".into());
        h.extend(unseen.iter().map(|s| format!("style_{s}")));
        h.push("unseen_avg".into());
        h
    }

    /// Values in [`EvalReport::csv_header`] order, without the method.
    pub fn csv_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.seen.iter().map(|&s| self.style_map(s).unwrap_or(f64::NAN)).collect();
        v.push(self.seen_avg());
        v.extend(self.unseen.iter().map(|&s| self.style_map(s).unwrap_or(f64::NAN)));
        v.push(self.unseen_avg());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(image_id: u64, score: f64, bbox: BoxCoords) -> Detection {
        Detection {
            image_id,
            class: LesionClass::Mass,
            score,
            bbox,
        }
    }

    fn gt(image_id: u64, bbox: BoxCoords) -> GroundTruth {
        GroundTruth {
            image_id,
            class: LesionClass::Mass,
            bbox,
        }
    }

    fn ap(d: &[Detection], g: &[GroundTruth]) -> Option<f64> {
        let d: Vec<_> = d.iter().collect();
        let g: Vec<_> = g.iter().collect();
        average_precision(&d, &g, 0.5).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[20.0, 20.0, 30.0, 30.0]).unwrap(), 0.0);
        assert!((iou(&a, &[5.0, 0.0, 15.0, 10.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(iou(&a, &[5.0, 5.0, 5.0, 9.0]).is_err());
    }

    #[test]
    fn single_detection_examples() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
        // IoU 0.6: [0,0,10,6] inside the GT
        assert_eq!(ap(&[det(0, 0.9, [0.0, 0.0, 10.0, 6.0])], &g), Some(1.0));
        assert_eq!(ap(&[det(0, 0.9, [0.0, 0.0, 10.0, 4.0])], &g), Some(0.0));
        assert_eq!(ap(&[], &[]), None);
        assert_eq!(ap(&[det(0, 0.9, [0.0, 0.0, 1.0, 1.0])], &[]), Some(0.0));
    }

    #[test]
    fn hand_derived_ap() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0]), gt(0, [20.0, 20.0, 30.0, 30.0])];
        let d = [
            det(0, 0.9, [0.0, 0.0, 10.0, 10.0]),
            det(0, 0.8, [40.0, 40.0, 50.0, 50.0]),
            det(0, 0.7, [20.0, 20.0, 30.0, 30.0]),
        ];
        let v = ap(&d, &g).unwrap();
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
        let d = [det(0, 0.9, [0.0, 0.0, 10.0, 10.0]), det(0, 0.8, [0.0, 0.0, 10.0, 10.0])];
        let c = pr_curve(&d.iter().collect::<Vec<_>>(), &g.iter().collect::<Vec<_>>(), 0.5).unwrap();
        assert_eq!(c.ranked, vec![(0.9, true), (0.8, false)]);
        assert_eq!(c.average_precision(), 1.0);
    }

    #[test]
    fn detections_only_match_their_own_image() {
        let g = [gt(1, [0.0, 0.0, 10.0, 10.0])];
        assert_eq!(ap(&[det(2, 0.9, [0.0, 0.0, 10.0, 10.0])], &g), Some(0.0));
    }

    #[test]
    fn mean_ap_averages_present_classes() {
        let mut d = vec![det(0, 0.9, [0.0, 0.0, 10.0, 10.0])];
        let mut g = vec![gt(0, [0.0, 0.0, 10.0, 10.0])];
        g.push(GroundTruth {
            class: LesionClass::CalcCluster,
            ..gt(0, [20.0, 20.0, 30.0, 30.0])
        });
        d.push(Detection {
            class: LesionClass::CalcCluster,
            ..det(0, 0.5, [20.0, 20.0, 30.0, 30.0])
        });
        let r = mean_ap(&d, &g, &LesionClass::ALL, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        d.pop();
        let r = mean_ap(&d, &g, &LesionClass::ALL, 0.5).unwrap();
        assert_eq!(r.map, 0.5);
        assert!(mean_ap(&d, &[], &LesionClass::ALL, 0.5).is_err());
    }

    #[test]
    fn report_averages() {
        let entry = |map| ClassAps {
            ap: BTreeMap::new(),
            map,
        };
        let r = EvalReport {
            method: "x".into(),
            per_style: [
                (StyleId::A, entry(0.8)),
                (StyleId::B, entry(0.4)),
                (StyleId::C, entry(0.6)),
                (StyleId::D, entry(0.1)),
                (StyleId::E, entry(0.3)),
            ]
            .into(),
            seen: vec![StyleId::A, StyleId::B, StyleId::C],
            unseen: vec![StyleId::D, StyleId::E],
        };
        assert!((r.seen_avg() - 0.6).abs() < 1e-12);
        assert!((r.unseen_avg() - 0.2).abs() < 1e-12);
        assert_eq!(r.csv_values().len(), 7);
        assert_eq!(EvalReport::csv_header(&r.seen, &r.unseen).len(), 8);
    }

    fn arb_box() -> impl Strategy<Value = BoxCoords> {
        (0.0f64..20.0, 0.0f64..20.0, 1.0f64..15.0, 1.0f64..15.0).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let x = iou(&a, &b).unwrap();
            prop_assert_eq!(x, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ap_invariants(
            gboxes in prop::collection::vec(arb_box(), 1..4),
            dets in prop::collection::vec((arb_box(), 0.0f64..1.0), 0..6),
        ) {
            let g: Vec<_> = gboxes.iter().map(|&b| gt(0, b)).collect();
            let d: Vec<_> = dets.iter().map(|&(b, s)| det(0, s, b)).collect();
            let base = ap(&d, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));

            // strictly monotone score transform
            let t: Vec<_> = d.iter().map(|x| det(0, (3.0 * x.score).exp() - 7.0, x.bbox)).collect();
            prop_assert!((ap(&t, &g).unwrap() - base).abs() < 1e-12);

            // a false positive below every score cannot raise AP
            let mut extra = d.clone();
            extra.push(det(0, -1.0, [100.0, 100.0, 110.0, 110.0]));
            prop_assert!(ap(&extra, &g).unwrap() <= base + 1e-12);
        }
    }
}
