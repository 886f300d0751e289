//! Deterministic synthetic multi-domain, two-view lesion images.

mod dataset;
mod image;
mod mapper;
mod style;
mod subject;

pub use dataset::{
    build_dataset, render_subject, BuildSummary, Dataset, DatasetManifest, IndexRecord,
    LabeledImage, RenderedSubject, Split, SplitCounts,
};
pub use image::{BoxLabel, Image, LesionClass};
pub use mapper::{quantile_sorted, transfer_style, StyleMapper, MAPPER_KNOTS, MIN_FIT_IMAGES};
pub use style::{apply_style, gaussian_blur, DomainStyle, StyleId, STYLE_SEPARATION};
pub use subject::{
    make_subject, render_view, BackgroundParams, GenConfig, LatentLesion, Subject, View,
    MAX_LESIONS,
};
