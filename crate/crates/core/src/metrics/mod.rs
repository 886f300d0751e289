//! Detection metrics and measurements of domain invariance.

mod ap;
mod probe;
mod project;

pub use ap::{
    average_precision, is_degenerate, iou, mean_ap, pr_curve, BoxCoords, ClassAps, EvalReport, GroundTruth, PrCurve,
};
pub(crate) use ap::iou_unchecked;
pub use probe::{domain_probe, ProbeConfig, ProbeResult};
pub use project::{embed_project, write_projection_csv, Projection2d};
