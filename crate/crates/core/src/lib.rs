//! Multi-style and multi-view contrastive pretraining for domain-generalized
//! lesion detection, at desk scale.
//!
//! The crate is organized along the experiment pipeline:
//!
//! - [`synthgen`]: deterministic synthetic two-view, multi-style images with
//!   lesion boxes, plus quantile-matching style mappers.
//! - [`pairing`]: augmentations and contrastive batch construction for the
//!   SimCLR, MSCL, MVCL and MSVCL schemes.
//! - [`nn`]: tensors, reverse-mode tape, the DeskNet encoder and SGD.
//! - [`contrastive`]: NT-Xent loss and the pretraining loop.
//! - [`detect`]: single-scale FCOS-style detector fine-tuned from a checkpoint.
//! - [`metrics`]: IoU, AP/mAP, the linear domain probe and PCA export.
//! - [`harness`]: experiment configuration, run ledger and reports.

mod error;
pub mod seed;
pub mod pairing;
pub mod synthgen;
pub mod nn;
pub mod contrastive;
pub mod detect;
pub mod harness;
pub mod metrics;

pub use error::{Error, Result};
