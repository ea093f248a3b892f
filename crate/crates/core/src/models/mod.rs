//! Recommenders: pretrained embedding banks, pointwise rankers (biased MF,
//! NeuMF) with top-K and MMR selection, the List-CVAE slate generator, the
//! two-phase Pivot-CVAE variants, and post-generation perturbation wrappers.

mod bank;
mod cvae;
mod perturb;
mod ranker;

pub use bank::{pretrain_embeddings, EmbeddingBank, PretrainConfig};
pub use cvae::{nearest_item, CvaeConfig, CvaeLossParts, ListCvae, PivotCvae, PivotVariant};
pub use perturb::{multinomial_similar_item, nongreedy_perturb, NonGreedyPolicy};
pub use ranker::{
    mmr_rerank, mmr_rerank_classic, rank_topk, train_pointwise_ranker, MmrPolicy,
    PointwiseRanker, RankerConfig, RankerKind, TopKPolicy,
};

use crate::dataio::{Slate, UserId};
use crate::Result;

/// Anything that can emit a slate for a (possibly absent) user. Stochastic
/// generators draw from the caller's generator; deterministic rankers ignore
/// it and always return the same slate.
pub trait SlateGenerator {
    fn generate(&self, user: Option<UserId>, rng: &mut dyn rand::RngCore) -> Result<Slate>;

    fn is_deterministic(&self) -> bool {
        false
    }
}
