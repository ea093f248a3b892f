//! Frozen embedding tables shared by the CVAE models, MMR, and perturbation.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Dataset, ItemId, UserId};
use crate::numkit::{ParamSet, Tensor2};
use crate::simenv::Environment;
use crate::{Error, Result};

use super::ranker::{train_pointwise_ranker, RankerConfig, RankerKind};

/// Item (and optional user) embedding tables, frozen after pretraining.
/// Cloning is cheap; the tables are shared.
#[derive(Debug, Clone)]
pub struct EmbeddingBank {
    items: Arc<Tensor2>,
    users: Option<Arc<Tensor2>>,
}

impl EmbeddingBank {
    pub fn new(items: Tensor2, users: Option<Tensor2>) -> Self {
        EmbeddingBank {
            items: Arc::new(items),
            users: users.map(Arc::new),
        }
    }

    /// Export the simulator's explicit embeddings, bit-exactly.
    pub fn from_environment(env: &Environment) -> Result<Self> {
        if env.item_vecs.is_empty() {
            return Err(Error::Contract(
                "environment has no explicit embeddings to export".into(),
            ));
        }
        Ok(EmbeddingBank::new(
            env.item_vecs.clone(),
            Some(env.user_vecs.clone()),
        ))
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    pub fn item(&self, id: ItemId) -> &[f64] {
        self.items.row(id)
    }

    pub fn item_table(&self) -> &Arc<Tensor2> {
        &self.items
    }

    pub fn user_table(&self) -> Option<&Arc<Tensor2>> {
        self.users.as_ref()
    }

    pub fn user(&self, id: UserId) -> Option<&[f64]> {
        self.users.as_ref().map(|u| u.row(id))
    }

    /// Sigmoid dot-product similarity between two items.
    pub fn item_similarity(&self, a: ItemId, b: ItemId) -> f64 {
        crate::numkit::sigmoid(self.items.row_dot(a, self.items.row(b)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = ParamSet::new();
        params.insert("bank.items", (*self.items).clone());
        if let Some(users) = &self.users {
            params.insert("bank.users", (**users).clone());
        }
        crate::numkit::save_params(&params, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = crate::numkit::load_params(path)?;
        let items = params.get("bank.items")?.clone();
        let users = if params.contains("bank.users") {
            Some(params.get("bank.users")?.clone())
        } else {
            None
        };
        Ok(EmbeddingBank::new(items, users))
    }
}

/// Pretraining settings for the biased-MF embedding extractor.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub emb_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            emb_dim: 8,
            lr: 3e-4,
            weight_decay: 1e-4,
            batch: 64,
            epochs: 15,
            negatives_per_positive: 2,
            seed: 0,
        }
    }
}

/// Train a biased-MF pointwise model on the clicks, then freeze and export
/// its embedding tables.
pub fn pretrain_embeddings(train: &Dataset, config: &PretrainConfig) -> Result<EmbeddingBank> {
    if train.is_empty() {
        return Err(Error::Empty("cannot pretrain embeddings on no data".into()));
    }
    let ranker_config = RankerConfig {
        emb_dim: config.emb_dim,
        lr: config.lr,
        weight_decay: config.weight_decay,
        batch: config.batch,
        max_epochs: config.epochs,
        patience: config.epochs, // fixed-budget run; no validation here
        negatives_per_positive: config.negatives_per_positive,
        seed: config.seed,
        ..Default::default()
    };
    let ranker = train_pointwise_ranker(RankerKind::Mf, train, None, &ranker_config)?;
    let has_user = train.records.iter().any(|r| r.user.is_some());
    Ok(EmbeddingBank::new(
        ranker.item_embeddings().clone(),
        has_user.then(|| ranker.user_embeddings().clone()),
    ))
}

/// Deterministic standard-normal noise vector helper used by CVAE training
/// and generation.
pub(crate) fn normal_vec<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

pub(crate) fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
