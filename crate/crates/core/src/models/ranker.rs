//! Discriminative baselines: biased MF and NeuMF trained with pointwise
//! binary cross entropy plus random negatives, greedy top-K selection, and
//! MMR reranking over the pretrained embeddings.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::dataio::{Dataset, ItemId, Slate, UserId};
use crate::numkit::{adam_step, softplus, AdamState, Graph, ParamSet, Tensor2};
use crate::{Error, Result};

use super::bank::{seeded, EmbeddingBank};
use super::SlateGenerator;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankerKind {
    Mf,
    NeuMf,
}

impl RankerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RankerKind::Mf => "MF",
            RankerKind::NeuMf => "NeuMF",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RankerConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Early stopping patience on validation loss, in epochs.
    pub patience: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            emb_dim: 8,
            hidden: 256,
            lr: 3e-4,
            weight_decay: 1e-4,
            batch: 64,
            max_epochs: 30,
            patience: 3,
            negatives_per_positive: 2,
            seed: 0,
        }
    }
}

/// A trained pointwise scorer over (user, item) pairs. Datasets without user
/// ids train a single universal user row.
#[derive(Debug, Clone)]
pub struct PointwiseRanker {
    pub kind: RankerKind,
    params: ParamSet,
    n_items: usize,
    n_users: usize,
    has_user_ids: bool,
    emb_dim: usize,
    optimizer: Option<AdamState>,
}

impl PointwiseRanker {
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn item_embeddings(&self) -> &Tensor2 {
        self.params.get("rank.item_emb").expect("trained ranker")
    }

    /// Optimizer state left by training, for the checkpoint sidecar.
    pub fn optimizer(&self) -> Option<&AdamState> {
        self.optimizer.as_ref()
    }

    pub fn user_embeddings(&self) -> &Tensor2 {
        self.params.get("rank.user_emb").expect("trained ranker")
    }

    fn user_row(&self, user: Option<UserId>) -> Result<usize> {
        match (self.has_user_ids, user) {
            (true, Some(u)) if u < self.n_users => Ok(u),
            (true, Some(u)) => Err(Error::Lookup(format!(
                "user {u} outside universe of {}",
                self.n_users
            ))),
            (true, None) => Err(Error::Lookup(
                "ranker was trained with user ids; none given".into(),
            )),
            (false, _) => Ok(0),
        }
    }

    /// Raw relevance score of an item for a user.
    pub fn score(&self, user: Option<UserId>, item: ItemId) -> Result<f64> {
        if item >= self.n_items {
            return Err(Error::Lookup(format!(
                "item {item} outside universe of {}",
                self.n_items
            )));
        }
        let u = self.user_row(user)?;
        let users = self.params.get("rank.user_emb")?;
        let items = self.params.get("rank.item_emb")?;
        match self.kind {
            RankerKind::Mf => {
                let dot = items.row_dot(item, users.row(u));
                Ok(dot
                    + self.params.get("rank.user_bias")?.data()[u]
                    + self.params.get("rank.item_bias")?.data()[item]
                    + self.params.get("rank.global_bias")?.data()[0])
            }
            RankerKind::NeuMf => {
                let mut x = users.row(u).to_vec();
                x.extend_from_slice(items.row(item));
                let w1 = self.params.get("rank.w1")?;
                let b1 = self.params.get("rank.b1")?;
                let mut h = w1.matvec(&x);
                for (hi, bi) in h.iter_mut().zip(b1.data()) {
                    *hi = (*hi + bi).max(0.0);
                }
                let w2 = self.params.get("rank.w2")?;
                Ok(w2.row_dot(0, &h) + self.params.get("rank.b2")?.data()[0])
            }
        }
    }

    pub fn scores_for(&self, user: Option<UserId>) -> Result<Vec<f64>> {
        (0..self.n_items).map(|i| self.score(user, i)).collect()
    }

    pub fn save(&self, params_path: &Path, meta_path: &Path) -> Result<()> {
        crate::numkit::save_params(&self.params, params_path)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(meta_path)?);
        writeln!(w, "kind={}", self.kind.as_str())?;
        writeln!(w, "n_items={}", self.n_items)?;
        writeln!(w, "n_users={}", self.n_users)?;
        writeln!(w, "has_user_ids={}", self.has_user_ids)?;
        writeln!(w, "emb_dim={}", self.emb_dim)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(params_path: &Path, meta_path: &Path) -> Result<Self> {
        let params = crate::numkit::load_params(params_path)?;
        let mut kind = None;
        let mut n_items = 0usize;
        let mut n_users = 0usize;
        let mut has_user_ids = false;
        let mut emb_dim = 0usize;
        for (idx, line) in std::fs::read_to_string(meta_path)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let bad = |what: &str| Error::Parse {
                line: idx + 1,
                msg: format!("bad {what} {value:?}"),
            };
            match key {
                "kind" => {
                    kind = Some(match value {
                        "MF" => RankerKind::Mf,
                        "NeuMF" => RankerKind::NeuMf,
                        other => return Err(Error::Format(format!("unknown ranker kind {other:?}"))),
                    })
                }
                "n_items" => n_items = value.parse().map_err(|_| bad("n_items"))?,
                "n_users" => n_users = value.parse().map_err(|_| bad("n_users"))?,
                "has_user_ids" => has_user_ids = value.parse().map_err(|_| bad("has_user_ids"))?,
                "emb_dim" => emb_dim = value.parse().map_err(|_| bad("emb_dim"))?,
                other => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        msg: format!("unknown ranker key {other:?}"),
                    })
                }
            }
        }
        Ok(PointwiseRanker {
            kind: kind.ok_or_else(|| Error::Format("ranker sidecar missing kind".into()))?,
            params,
            n_items,
            n_users,
            has_user_ids,
            emb_dim,
            optimizer: None,
        })
    }

    fn graph_score(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        user_row: usize,
        item: ItemId,
    ) -> crate::numkit::NodeId {
        let users = g.param("rank.user_emb", params.get("rank.user_emb").unwrap());
        let items = g.param("rank.item_emb", params.get("rank.item_emb").unwrap());
        let u = g.gather_row(users, user_row);
        let v = g.gather_row(items, item);
        match self.kind {
            RankerKind::Mf => {
                let ub_t = g.param("rank.user_bias", params.get("rank.user_bias").unwrap());
                let ib_t = g.param("rank.item_bias", params.get("rank.item_bias").unwrap());
                let gb = g.param("rank.global_bias", params.get("rank.global_bias").unwrap());
                let dot = g.dot(u, v);
                let ub = g.gather_row(ub_t, user_row);
                let ib = g.gather_row(ib_t, item);
                g.sum_scalars(&[dot, ub, ib, gb])
            }
            RankerKind::NeuMf => {
                let x = g.concat(&[u, v]);
                let w1 = g.param("rank.w1", params.get("rank.w1").unwrap());
                let b1 = g.param("rank.b1", params.get("rank.b1").unwrap());
                let w2 = g.param("rank.w2", params.get("rank.w2").unwrap());
                let b2 = g.param("rank.b2", params.get("rank.b2").unwrap());
                let h = g.affine(w1, b1, x);
                let h = g.relu(h);
                g.affine(w2, b2, h)
            }
        }
    }
}

/// Pointwise (user, item, click) sample.
struct Sample {
    user_row: usize,
    item: ItemId,
    label: f64,
}

fn expand_samples(
    d: &Dataset,
    has_user_ids: bool,
    negatives_per_positive: usize,
    rng: &mut impl Rng,
) -> Vec<Sample> {
    let mut samples = Vec::new();
    for rec in &d.records {
        let user_row = if has_user_ids {
            rec.user.unwrap_or(0)
        } else {
            0
        };
        for (slot, &item) in rec.slate.items().iter().enumerate() {
            let label = f64::from(rec.response.bits()[slot]);
            samples.push(Sample {
                user_row,
                item,
                label,
            });
            if label > 0.5 {
                for _ in 0..negatives_per_positive {
                    let mut neg = rng.gen_range(0..d.n_items);
                    while d.n_items > 1 && neg == item {
                        neg = rng.gen_range(0..d.n_items);
                    }
                    samples.push(Sample {
                        user_row,
                        item: neg,
                        label: 0.0,
                    });
                }
            }
        }
    }
    samples
}

fn validation_bce(ranker: &PointwiseRanker, val: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for rec in &val.records {
        for (slot, &item) in rec.slate.items().iter().enumerate() {
            let s = ranker.score(rec.user, item)?;
            let y = f64::from(rec.response.bits()[slot]);
            total += softplus(s) - y * s;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Standard pointwise LTR training: BCE on the observed clicks plus random
/// negatives per positive, Adam, and early stopping on validation loss when
/// a validation set is given.
pub fn train_pointwise_ranker(
    kind: RankerKind,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &RankerConfig,
) -> Result<PointwiseRanker> {
    if train.is_empty() {
        return Err(Error::Empty("cannot train a ranker on no data".into()));
    }
    let has_user_ids = train.records.iter().any(|r| r.user.is_some());
    let n_users = if has_user_ids {
        train
            .records
            .iter()
            .filter_map(|r| r.user)
            .max()
            .map_or(1, |u| u + 1)
    } else {
        1
    };
    let mut rng = seeded(config.seed);

    let mut params = ParamSet::new();
    params.insert(
        "rank.user_emb",
        Tensor2::randn(n_users, config.emb_dim, 0.1, &mut rng),
    );
    params.insert(
        "rank.item_emb",
        Tensor2::randn(train.n_items, config.emb_dim, 0.1, &mut rng),
    );
    match kind {
        RankerKind::Mf => {
            params.insert("rank.user_bias", Tensor2::zeros(n_users, 1));
            params.insert("rank.item_bias", Tensor2::zeros(train.n_items, 1));
            params.insert("rank.global_bias", Tensor2::zeros(1, 1));
        }
        RankerKind::NeuMf => {
            let input = 2 * config.emb_dim;
            params.insert(
                "rank.w1",
                Tensor2::randn(config.hidden, input, (1.0 / input as f64).sqrt(), &mut rng),
            );
            params.insert("rank.b1", Tensor2::zeros(config.hidden, 1));
            params.insert(
                "rank.w2",
                Tensor2::randn(1, config.hidden, (1.0 / config.hidden as f64).sqrt(), &mut rng),
            );
            params.insert("rank.b2", Tensor2::zeros(1, 1));
        }
    }

    let mut ranker = PointwiseRanker {
        kind,
        params,
        n_items: train.n_items,
        n_users,
        has_user_ids,
        emb_dim: config.emb_dim,
        optimizer: None,
    };

    let mut opt = AdamState::new(config.lr, config.weight_decay);
    let mut best_loss = f64::INFINITY;
    let mut best_params = ranker.params.clone();
    let mut stale = 0usize;

    for _ in 0..config.max_epochs {
        use rand::seq::SliceRandom;
        let mut samples = expand_samples(train, has_user_ids, config.negatives_per_positive, &mut rng);
        samples.shuffle(&mut rng);
        for batch in samples.chunks(config.batch) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            for sample in batch {
                let score = ranker.graph_score(&mut g, &ranker.params, sample.user_row, sample.item);
                losses.push(g.bce_logit(score, sample.label));
            }
            let total = g.sum_scalars(&losses);
            let loss = g.scale(total, 1.0 / batch.len() as f64);
            let grads = g.backward(loss)?;
            adam_step(&mut opt, &mut ranker.params, &grads)?;
        }
        if let Some(val) = val {
            let loss = validation_bce(&ranker, val)?;
            if loss + 1e-6 < best_loss {
                best_loss = loss;
                best_params = ranker.params.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    if val.is_some() {
        ranker.params = best_params;
    }
    ranker.optimizer = Some(opt);
    Ok(ranker)
}

/// Deterministic top-K by score; ties break to the lower item id.
pub fn rank_topk(ranker: &PointwiseRanker, user: Option<UserId>, k: usize) -> Result<Slate> {
    if k > ranker.n_items {
        return Err(Error::Contract(format!(
            "asked for top-{k} of {} items",
            ranker.n_items
        )));
    }
    let scores = ranker.scores_for(user)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    Ok(Slate::new(idx[..k].to_vec()))
}

fn mmr_select(
    ranker: &PointwiseRanker,
    bank: &EmbeddingBank,
    user: Option<UserId>,
    k: usize,
    lambda: f64,
    redundancy_sign: f64,
) -> Result<Slate> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} outside [0,1]")));
    }
    if k > ranker.n_items {
        return Err(Error::Contract(format!(
            "asked for {k} of {} items",
            ranker.n_items
        )));
    }
    let relevance = ranker.scores_for(user)?;
    let mut chosen: Vec<ItemId> = Vec::with_capacity(k);
    let mut in_slate = vec![false; ranker.n_items];
    for _ in 0..k {
        let mut best: Option<(f64, ItemId)> = None;
        for d in 0..ranker.n_items {
            if in_slate[d] {
                continue;
            }
            // max over the chosen set; 0 on the first step (empty slate)
            let max_sim = chosen
                .iter()
                .map(|&di| bank.item_similarity(di, d))
                .fold(f64::NEG_INFINITY, f64::max);
            let max_sim = if chosen.is_empty() { 0.0 } else { max_sim };
            let score = lambda * relevance[d] + redundancy_sign * (1.0 - lambda) * max_sim;
            let better = match best {
                None => true,
                Some((s, _)) => score > s,
            };
            if better {
                best = Some((score, d));
            }
        }
        let (_, d) = best.expect("k <= n_items leaves candidates");
        in_slate[d] = true;
        chosen.push(d);
    }
    Ok(Slate::new(chosen))
}

/// Greedy MMR with the redundancy term *added*, exactly as the score is
/// written in the reference formulation:
/// `score(d) = lambda * sim(d, j) + (1 - lambda) * max_{d_i in s} sim(d_i, d)`.
pub fn mmr_rerank(
    ranker: &PointwiseRanker,
    bank: &EmbeddingBank,
    user: Option<UserId>,
    k: usize,
    lambda: f64,
) -> Result<Slate> {
    mmr_select(ranker, bank, user, k, lambda, 1.0)
}

/// Classic MMR: the redundancy term is subtracted.
pub fn mmr_rerank_classic(
    ranker: &PointwiseRanker,
    bank: &EmbeddingBank,
    user: Option<UserId>,
    k: usize,
    lambda: f64,
) -> Result<Slate> {
    mmr_select(ranker, bank, user, k, lambda, -1.0)
}

/// Deterministic top-K policy.
pub struct TopKPolicy<'a> {
    pub ranker: &'a PointwiseRanker,
    pub k: usize,
}

impl SlateGenerator for TopKPolicy<'_> {
    fn generate(&self, user: Option<UserId>, _rng: &mut dyn rand::RngCore) -> Result<Slate> {
        rank_topk(self.ranker, user, self.k)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Deterministic MMR policy.
pub struct MmrPolicy<'a> {
    pub ranker: &'a PointwiseRanker,
    pub bank: &'a EmbeddingBank,
    pub k: usize,
    pub lambda: f64,
    pub classic: bool,
}

impl SlateGenerator for MmrPolicy<'_> {
    fn generate(&self, user: Option<UserId>, _rng: &mut dyn rand::RngCore) -> Result<Slate> {
        if self.classic {
            mmr_rerank_classic(self.ranker, self.bank, user, self.k, self.lambda)
        } else {
            mmr_rerank(self.ranker, self.bank, user, self.k, self.lambda)
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}
