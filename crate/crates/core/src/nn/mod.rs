//! Dense tensors, a reverse-mode tape, the DeskNet encoder and SGD.

mod checkpoint;
mod encoder;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use checkpoint::{Checkpoint, Provenance};
pub use encoder::{Encoder, EncoderConfig};
pub(crate) use encoder::{he_normal, lookup};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{BatchNormIds, Gradients, Graph, Mode, ValueId, BN_EPS, BN_MOMENTUM};
pub use kernels::ConvGeom;
pub use optim::{Sgd, SgdConfig};
pub use param::{ParamId, ParamSet, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
