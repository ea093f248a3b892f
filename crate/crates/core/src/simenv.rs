//! Ground-truth user-response environments.
//!
//! Three parameterized simulators share one probe/sample interface:
//!
//! - `URM`: pointwise biased-MF interest, `sigmoid(u.v + b_u + b_i + b)`
//! - `URM_P`: URM plus a personalized positional bias, clipped to `[0,1]`
//! - `URM_P_MR`: URM_P plus an attention-based multi-item relation term
//!   weighted by `rho`; `rho = 0` reduces it to URM_P exactly
//!
//! A fourth kind wraps a response network trained on logged slates so real
//! datasets can be evaluated through the same interface.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{Dataset, ItemId, Record, ResponseVector, Slate, UserId};
use crate::numkit::{
    adam_step, sigmoid, AdamState, Graph, NodeId, ParamSet, Tensor2,
};
use crate::{Error, Result};

/// Simulator shape and sampling parameters. The embedding/bias sampling
/// moments default to `N(0,1)` vectors and `N(0,0.1)` biases; real deployments
/// calibrate them against a pretrained response model, so they are config, not
/// code.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub emb_dim: usize,
    /// Average positional offset per slot; its length fixes the slate size K.
    pub pos_offsets: Vec<f64>,
    /// Std of the per-user positional bias around `pos_offsets`.
    pub pos_noise_std: f64,
    /// Weight of the positional term (the simulator's lambda).
    pub pos_weight: f64,
    /// Weight of the multi-item relation term (rho).
    pub relation_weight: f64,
    pub seed: u64,
    pub vec_std: f64,
    pub bias_std: f64,
    pub global_bias: f64,
    /// Sample slates with distinct items during dataset generation. Off
    /// mirrors logs where the same item repeats within a slate.
    pub distinct_slate_items: bool,
}

impl SimConfig {
    /// Positional variance 0.2 and unit positional weight; slate size 5.
    pub fn new(n_items: usize, n_users: usize, seed: u64) -> Self {
        SimConfig {
            n_items,
            n_users,
            emb_dim: 8,
            pos_offsets: vec![0.2, 0.1, 0.0, -0.1, -0.2],
            pos_noise_std: 0.2f64.sqrt(),
            pos_weight: 1.0,
            relation_weight: 0.0,
            seed,
            vec_std: 1.0,
            bias_std: 0.1,
            global_bias: 0.0,
            distinct_slate_items: true,
        }
    }

    pub fn slate_size(&self) -> usize {
        self.pos_offsets.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_users == 0 || self.emb_dim == 0 {
            return Err(Error::Contract(
                "simulator needs positive item/user/embedding counts".into(),
            ));
        }
        if self.pos_offsets.is_empty() {
            return Err(Error::Contract("pos_offsets must fix a slate size".into()));
        }
        if self.pos_noise_std < 0.0 || self.relation_weight < 0.0 {
            return Err(Error::Contract(
                "pos_noise_std and relation_weight must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Urm,
    UrmP,
    UrmPMr,
    Learned,
}

impl EnvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvKind::Urm => "URM",
            EnvKind::UrmP => "URM_P",
            EnvKind::UrmPMr => "URM_P_MR",
            EnvKind::Learned => "Learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "URM" => Ok(EnvKind::Urm),
            "URM_P" => Ok(EnvKind::UrmP),
            "URM_P_MR" => Ok(EnvKind::UrmPMr),
            "Learned" => Ok(EnvKind::Learned),
            other => Err(Error::Format(format!("unknown environment kind {other:?}"))),
        }
    }
}

/// An immutable response model `R(r|s,u)`. Parameterized kinds hold explicit
/// embedding tables; the learned kind answers through a trained network.
#[derive(Debug, Clone)]
pub struct Environment {
    pub kind: EnvKind,
    pub item_vecs: Tensor2,
    pub user_vecs: Tensor2,
    pub item_bias: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub global_bias: f64,
    /// Per-user positional bias rows, drawn once at construction.
    pub per_user_pos_bias: Tensor2,
    pub config: SimConfig,
    learned: Option<ResponseModel>,
}

/// Sample all embeddings, biases, and per-user positional rows from the
/// configured Gaussians. Deterministic given `config.seed`.
pub fn build_environment(kind: EnvKind, config: &SimConfig) -> Result<Environment> {
    config.validate()?;
    if kind == EnvKind::Learned {
        return Err(Error::Contract(
            "learned environments come from fit_response_model".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.slate_size();

    let item_vecs = Tensor2::randn(config.n_items, config.emb_dim, config.vec_std, &mut rng);
    let user_vecs = Tensor2::randn(config.n_users, config.emb_dim, config.vec_std, &mut rng);
    let bias_dist = Normal::new(0.0, config.bias_std.max(0.0)).expect("finite bias std");
    let item_bias: Vec<f64> = (0..config.n_items).map(|_| bias_dist.sample(&mut rng)).collect();
    let user_bias: Vec<f64> = (0..config.n_users).map(|_| bias_dist.sample(&mut rng)).collect();

    let pos_dist = Normal::new(0.0, config.pos_noise_std.max(0.0)).expect("finite pos std");
    let mut pos = Tensor2::zeros(config.n_users, k);
    for u in 0..config.n_users {
        for slot in 0..k {
            pos.set(u, slot, config.pos_offsets[slot] + pos_dist.sample(&mut rng));
        }
    }

    Ok(Environment {
        kind,
        item_vecs,
        user_vecs,
        item_bias,
        user_bias,
        global_bias: config.global_bias,
        per_user_pos_bias: pos,
        config: config.clone(),
        learned: None,
    })
}

impl Environment {
    pub fn slate_size(&self) -> usize {
        self.config.slate_size()
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }

    pub fn n_users(&self) -> usize {
        self.config.n_users
    }

    fn check_ids(&self, item: ItemId, user: Option<UserId>) -> Result<()> {
        if item >= self.config.n_items {
            return Err(Error::Lookup(format!(
                "item {item} outside universe of {}",
                self.config.n_items
            )));
        }
        match (self.kind, user) {
            (EnvKind::Learned, None) => Ok(()),
            (_, Some(u)) if u < self.config.n_users => Ok(()),
            (_, Some(u)) => Err(Error::Lookup(format!(
                "user {u} outside universe of {}",
                self.config.n_users
            ))),
            (_, None) => Err(Error::Lookup(
                "parameterized simulators need a user id".into(),
            )),
        }
    }

    fn base_interest(&self, item: ItemId, user: UserId) -> f64 {
        let score = self.user_vecs.row_dot(user, self.item_vecs.row(item))
            + self.user_bias[user]
            + self.item_bias[item]
            + self.global_bias;
        sigmoid(score)
    }

    /// Click probability of `slate[slot]` for this user. `slot` is 0-based;
    /// the slate context only matters for `URM_P_MR` and learned models.
    pub fn interest(
        &self,
        item: ItemId,
        user: Option<UserId>,
        slate: &Slate,
        slot: usize,
    ) -> Result<f64> {
        self.check_ids(item, user)?;
        if slot >= self.slate_size() {
            return Err(Error::Contract(format!(
                "slot {slot} outside slate of size {}",
                self.slate_size()
            )));
        }
        match self.kind {
            EnvKind::Urm => Ok(self.base_interest(item, user.unwrap())),
            EnvKind::UrmP => {
                let u = user.unwrap();
                let raw = self.base_interest(item, u)
                    + self.config.pos_weight * self.per_user_pos_bias.get(u, slot);
                Ok(raw.clamp(0.0, 1.0))
            }
            EnvKind::UrmPMr => {
                let u = user.unwrap();
                let raw = self.base_interest(item, u)
                    + self.config.pos_weight * self.per_user_pos_bias.get(u, slot)
                    + self.config.relation_weight * self.relation_term(slate, u, item);
                Ok(raw.clamp(0.0, 1.0))
            }
            EnvKind::Learned => {
                let model = self.learned.as_ref().expect("learned env has a model");
                Ok(model.probs(slate, user)?[slot])
            }
        }
    }

    /// Attention excursion: `Atn(s,u) = sigmoid(mean(slate vectors) . u)`
    /// elementwise, applied to the item as `Atn . v_i`.
    fn relation_term(&self, slate: &Slate, user: UserId, item: ItemId) -> f64 {
        let dim = self.config.emb_dim;
        let mut mean = vec![0.0; dim];
        for &d in slate.items() {
            for (m, v) in mean.iter_mut().zip(self.item_vecs.row(d)) {
                *m += v;
            }
        }
        let k = slate.len() as f64;
        let urow = self.user_vecs.row(user);
        let vrow = self.item_vecs.row(item);
        let mut acc = 0.0;
        for i in 0..dim {
            acc += sigmoid(mean[i] / k * urow[i]) * vrow[i];
        }
        acc
    }

    /// Exact expectation of the click count: the sum of per-slot interests.
    pub fn expected_clicks(&self, slate: &Slate, user: Option<UserId>) -> Result<f64> {
        if slate.len() != self.slate_size() {
            return Err(Error::Contract(format!(
                "slate of length {} in environment of slate size {}",
                slate.len(),
                self.slate_size()
            )));
        }
        let mut acc = 0.0;
        for (slot, &item) in slate.items().iter().enumerate() {
            acc += self.interest(item, user, slate, slot)?;
        }
        Ok(acc)
    }

    /// Bernoulli draw per slot at the slot's interest.
    pub fn sample_response(
        &self,
        slate: &Slate,
        user: Option<UserId>,
        rng: &mut impl Rng,
    ) -> Result<ResponseVector> {
        let mut bits = Vec::with_capacity(slate.len());
        for (slot, &item) in slate.items().iter().enumerate() {
            let p = self.interest(item, user, slate, slot)?;
            bits.push(u8::from(rng.gen::<f64>() < p));
        }
        ResponseVector::new(bits)
    }
}

/// Draw uniform users and uniform slates, sample responses, then balance the
/// click-count groups by repetition. Deterministic given the generator state.
pub fn generate_dataset(
    env: &Environment,
    n_slates: usize,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    let k = env.slate_size();
    let mut d = Dataset::new(env.n_items(), k);
    for _ in 0..n_slates {
        let user = rng.gen_range(0..env.n_users());
        let items: Vec<ItemId> = if env.config.distinct_slate_items {
            rand::seq::index::sample(rng, env.n_items(), k.min(env.n_items())).into_vec()
        } else {
            (0..k).map(|_| rng.gen_range(0..env.n_items())).collect()
        };
        let slate = Slate::new(items);
        let response = env.sample_response(&slate, Some(user), rng)?;
        d.push(Record {
            user: Some(user),
            slate,
            response,
        })?;
    }
    if d.is_empty() {
        return Ok(d);
    }
    let (balanced, _) = crate::dataio::balance_responses(&d, rng);
    Ok(balanced)
}

/// Hyperparameters for the learned response model.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseFitConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ResponseFitConfig {
    fn default() -> Self {
        ResponseFitConfig {
            emb_dim: 8,
            hidden: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch: 64,
            epochs: 20,
            seed: 0,
        }
    }
}

/// A slate-aware click model: two affine layers over the concatenated slate
/// item embeddings (plus the user embedding when ids are present), one
/// sigmoid output per slot.
#[derive(Debug, Clone)]
struct ResponseModel {
    params: ParamSet,
    emb_dim: usize,
    k: usize,
    has_user: bool,
}

impl ResponseModel {
    fn logits_graph(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        slate: &Slate,
        user: Option<UserId>,
    ) -> NodeId {
        let items = g.param("resp.item_emb", params.get("resp.item_emb").unwrap());
        let mut parts: Vec<NodeId> = slate
            .items()
            .iter()
            .map(|&d| g.gather_row(items, d))
            .collect();
        if self.has_user {
            let users = g.param("resp.user_emb", params.get("resp.user_emb").unwrap());
            match user {
                Some(u) => parts.push(g.gather_row(users, u)),
                None => parts.push(g.constant(&vec![0.0; self.emb_dim])),
            }
        }
        let x = g.concat(&parts);
        let w1 = g.param("resp.w1", params.get("resp.w1").unwrap());
        let b1 = g.param("resp.b1", params.get("resp.b1").unwrap());
        let w2 = g.param("resp.w2", params.get("resp.w2").unwrap());
        let b2 = g.param("resp.b2", params.get("resp.b2").unwrap());
        let h = g.affine(w1, b1, x);
        let h = g.relu(h);
        g.affine(w2, b2, h)
    }

    fn probs(&self, slate: &Slate, user: Option<UserId>) -> Result<Vec<f64>> {
        if slate.len() != self.k {
            return Err(Error::Contract(format!(
                "learned model expects slates of size {}",
                self.k
            )));
        }
        let mut g = Graph::new();
        let logits = self.logits_graph(&mut g, &self.params, slate, user);
        Ok(g.value(logits).iter().map(|l| sigmoid(*l)).collect())
    }
}

/// Train the learned response model with pointwise binary cross entropy and
/// wrap it as an Environment. Per-epoch mean losses are returned alongside so
/// callers can check convergence.
pub fn fit_response_model(
    train: &Dataset,
    config: &ResponseFitConfig,
) -> Result<(Environment, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Empty("cannot fit a response model on no data".into()));
    }
    let has_user = train.records.iter().any(|r| r.user.is_some());
    let n_users = train
        .records
        .iter()
        .filter_map(|r| r.user)
        .max()
        .map_or(0, |u| u + 1);
    let k = train.slate_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut params = ParamSet::new();
    params.insert(
        "resp.item_emb",
        Tensor2::randn(train.n_items, config.emb_dim, 0.1, &mut rng),
    );
    if has_user {
        params.insert(
            "resp.user_emb",
            Tensor2::randn(n_users, config.emb_dim, 0.1, &mut rng),
        );
    }
    let input_dim = k * config.emb_dim + if has_user { config.emb_dim } else { 0 };
    params.insert(
        "resp.w1",
        Tensor2::randn(config.hidden, input_dim, (1.0 / input_dim as f64).sqrt(), &mut rng),
    );
    params.insert("resp.b1", Tensor2::zeros(config.hidden, 1));
    params.insert(
        "resp.w2",
        Tensor2::randn(k, config.hidden, (1.0 / config.hidden as f64).sqrt(), &mut rng),
    );
    params.insert("resp.b2", Tensor2::zeros(k, 1));

    let model = ResponseModel {
        params: ParamSet::new(),
        emb_dim: config.emb_dim,
        k,
        has_user,
    };

    let mut opt = AdamState::new(config.lr, config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let rec = &train.records[idx];
                let logits = model.logits_graph(&mut g, &params, &rec.slate, rec.user);
                for (slot, &bit) in rec.response.bits().iter().enumerate() {
                    let logit = g.slice(logits, slot, 1);
                    losses.push(g.bce_logit(logit, f64::from(bit)));
                }
            }
            let total = g.sum_scalars(&losses);
            let loss = g.scale(total, 1.0 / losses.len() as f64);
            epoch_loss += g.scalar(loss) * batch.len() as f64;
            let grads = g.backward(loss)?;
            adam_step(&mut opt, &mut params, &grads)?;
        }
        epoch_losses.push(epoch_loss / train.len() as f64);
    }

    let sim = SimConfig {
        n_items: train.n_items,
        n_users: n_users.max(1),
        emb_dim: config.emb_dim,
        pos_offsets: vec![0.0; k],
        pos_noise_std: 0.0,
        pos_weight: 0.0,
        relation_weight: 0.0,
        seed: config.seed,
        vec_std: 0.0,
        bias_std: 0.0,
        global_bias: 0.0,
        distinct_slate_items: true,
    };
    let env = Environment {
        kind: EnvKind::Learned,
        item_vecs: Tensor2::zeros(0, 0),
        user_vecs: Tensor2::zeros(0, 0),
        item_bias: Vec::new(),
        user_bias: Vec::new(),
        global_bias: 0.0,
        per_user_pos_bias: Tensor2::zeros(0, 0),
        config: sim,
        learned: Some(ResponseModel { params, ..model }),
    };
    Ok((env, epoch_losses))
}

/// Environment checkpoint: the numkit parameter container plus a `key=value`
/// SimConfig sidecar.
pub fn save_environment(env: &Environment, params_path: &Path, sidecar_path: &Path) -> Result<()> {
    let mut params = ParamSet::new();
    match env.kind {
        EnvKind::Learned => {
            let model = env.learned.as_ref().expect("learned env has a model");
            for (name, t) in model.params.iter() {
                params.insert(name.clone(), t.clone());
            }
        }
        _ => {
            params.insert("env.item_vecs", env.item_vecs.clone());
            params.insert("env.user_vecs", env.user_vecs.clone());
            params.insert("env.item_bias", Tensor2::col_vec(&env.item_bias));
            params.insert("env.user_bias", Tensor2::col_vec(&env.user_bias));
            params.insert("env.pos_bias", env.per_user_pos_bias.clone());
        }
    }
    crate::numkit::save_params(&params, params_path)?;

    let c = &env.config;
    let mut w = std::io::BufWriter::new(std::fs::File::create(sidecar_path)?);
    writeln!(w, "kind={}", env.kind.as_str())?;
    writeln!(w, "n_items={}", c.n_items)?;
    writeln!(w, "n_users={}", c.n_users)?;
    writeln!(w, "emb_dim={}", c.emb_dim)?;
    let offsets: Vec<String> = c.pos_offsets.iter().map(|v| v.to_string()).collect();
    writeln!(w, "pos_offsets={}", offsets.join(","))?;
    writeln!(w, "pos_noise_std={}", c.pos_noise_std)?;
    writeln!(w, "pos_weight={}", c.pos_weight)?;
    writeln!(w, "relation_weight={}", c.relation_weight)?;
    writeln!(w, "seed={}", c.seed)?;
    writeln!(w, "vec_std={}", c.vec_std)?;
    writeln!(w, "bias_std={}", c.bias_std)?;
    writeln!(w, "global_bias={}", c.global_bias)?;
    writeln!(w, "distinct_slate_items={}", c.distinct_slate_items)?;
    w.flush()?;
    Ok(())
}

pub fn load_environment(params_path: &Path, sidecar_path: &Path) -> Result<Environment> {
    let params = crate::numkit::load_params(params_path)?;
    let mut kind = None;
    let mut config = SimConfig::new(1, 1, 0);
    for (idx, line) in std::fs::read_to_string(sidecar_path)?.lines().enumerate() {
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
            "kind" => kind = Some(EnvKind::parse(value)?),
            "n_items" => config.n_items = value.parse().map_err(|_| bad("n_items"))?,
            "n_users" => config.n_users = value.parse().map_err(|_| bad("n_users"))?,
            "emb_dim" => config.emb_dim = value.parse().map_err(|_| bad("emb_dim"))?,
            "pos_offsets" => {
                config.pos_offsets = value
                    .split(',')
                    .map(|v| v.parse().map_err(|_| bad("pos_offsets")))
                    .collect::<Result<_>>()?
            }
            "pos_noise_std" => config.pos_noise_std = value.parse().map_err(|_| bad("pos_noise_std"))?,
            "pos_weight" => config.pos_weight = value.parse().map_err(|_| bad("pos_weight"))?,
            "relation_weight" => {
                config.relation_weight = value.parse().map_err(|_| bad("relation_weight"))?
            }
            "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
            "vec_std" => config.vec_std = value.parse().map_err(|_| bad("vec_std"))?,
            "bias_std" => config.bias_std = value.parse().map_err(|_| bad("bias_std"))?,
            "global_bias" => config.global_bias = value.parse().map_err(|_| bad("global_bias"))?,
            "distinct_slate_items" => {
                config.distinct_slate_items = value.parse().map_err(|_| bad("distinct_slate_items"))?
            }
            other => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("unknown sim key {other:?}"),
                })
            }
        }
    }
    let kind = kind.ok_or_else(|| Error::Format("sidecar missing kind".into()))?;
    match kind {
        EnvKind::Learned => {
            let has_user = params.contains("resp.user_emb");
            Ok(Environment {
                kind,
                item_vecs: Tensor2::zeros(0, 0),
                user_vecs: Tensor2::zeros(0, 0),
                item_bias: Vec::new(),
                user_bias: Vec::new(),
                global_bias: 0.0,
                per_user_pos_bias: Tensor2::zeros(0, 0),
                learned: Some(ResponseModel {
                    params,
                    emb_dim: config.emb_dim,
                    k: config.slate_size(),
                    has_user,
                }),
                config,
            })
        }
        _ => Ok(Environment {
            kind,
            item_vecs: params.get("env.item_vecs")?.clone(),
            user_vecs: params.get("env.user_vecs")?.clone(),
            item_bias: params.get("env.item_bias")?.data().to_vec(),
            user_bias: params.get("env.user_bias")?.data().to_vec(),
            global_bias: config.global_bias,
            per_user_pos_bias: params.get("env.pos_bias")?.clone(),
            config,
            learned: None,
        }),
    }
}
