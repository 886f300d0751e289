//! Augmentations and contrastive batches for SimCLR, MSCL, MVCL and MSVCL.

mod augment;
mod batch;

pub use augment::{augment, AugParams};
pub use batch::{
    build_batch, count_possible_positives, images_to_tensor, ContrastiveBatch, MapperBank,
    MsvclMode, PairingContext, SampleSource, Scheme,
};
