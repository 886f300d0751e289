//! NT-Xent loss and the contrastive pretraining loop.

mod loss;
mod pretrain;

pub use loss::{nt_xent, nt_xent_lower_bound, EmbeddingSet, NtXent, UNIT_NORM_TOL};
pub use pretrain::{
    embed_corpus, init_encoder, init_seed, pretrain, random_checkpoint, write_loss_curve, Features,
    PretrainConfig, PretrainData, PretrainOutcome,
};
