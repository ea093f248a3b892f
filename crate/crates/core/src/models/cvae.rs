//! Conditional-VAE slate generators.
//!
//! `ListCvae` decodes all K latent item embeddings in one shot. `PivotCvae`
//! splits the decoder into a pivot selection head for slot 1 and a slate
//! completion head for slots 2..K conditioned on the pivot, which allows
//! similarity-weighted perturbation *before* the final generation. Both share
//! the same encoder / conditional-prior structure and the loss
//!
//! ```text
//! loss = sum_k sampled_ce(slot k) + beta * KL(posterior || prior(c))
//! ```
//!
//! with per-slot sampled-softmax reconstruction against the frozen embedding
//! bank. Inference always draws z from the conditional prior at the ideal
//! constraint.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{
    make_constraint, ConstraintVector, Dataset, ItemId, Record, ResponseVector, Slate, UserId,
};
use crate::numkit::{
    adam_step, affine_apply, argmax_tie_low, relu, AdamState, GaussianParams, Graph, NodeId,
    ParamSet, Tensor2,
};
use crate::{Error, Result};

use super::bank::{normal_vec, seeded, EmbeddingBank};
use super::perturb::{multinomial, multinomial_similar_item};
use super::SlateGenerator;

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub beta: f64,
    /// Concatenate the user embedding into the constraint vector.
    pub personalized: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Sampled-softmax negatives per slot.
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            latent_dim: 16,
            hidden: 256,
            beta: 1.0,
            personalized: false,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch: 64,
            negatives: 100,
            epochs: 20,
            seed: 0,
        }
    }
}

/// Loss value with its reconstruction / KL split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeLossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Pivot-CVAE perturbation schedule: `Sgt*` perturbs the pivot fed to the
/// completion model during training, `*Spi` samples the pivot at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PivotVariant {
    GtPi,
    SgtPi,
    GtSpi,
    SgtSpi,
}

impl PivotVariant {
    pub fn perturb_train(&self) -> bool {
        matches!(self, PivotVariant::SgtPi | PivotVariant::SgtSpi)
    }

    pub fn perturb_inference(&self) -> bool {
        matches!(self, PivotVariant::GtSpi | PivotVariant::SgtSpi)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PivotVariant::GtPi => "GT-PI",
            PivotVariant::SgtPi => "SGT-PI",
            PivotVariant::GtSpi => "GT-SPI",
            PivotVariant::SgtSpi => "SGT-SPI",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "GT-PI" => Ok(PivotVariant::GtPi),
            "SGT-PI" => Ok(PivotVariant::SgtPi),
            "GT-SPI" => Ok(PivotVariant::GtSpi),
            "SGT-SPI" => Ok(PivotVariant::SgtSpi),
            other => Err(Error::Format(format!("unknown pivot variant {other:?}"))),
        }
    }
}

/// Nearest catalog item to a decoded embedding by dot product; ties break to
/// the lower item id.
pub fn nearest_item(bank: &EmbeddingBank, x: &[f64]) -> ItemId {
    let scores: Vec<f64> = (0..bank.n_items())
        .map(|i| bank.item_table().row_dot(i, x))
        .collect();
    argmax_tie_low(&scores)
}

fn init_linear(params: &mut ParamSet, w: &str, b: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
    params.insert(w, Tensor2::randn(rows, cols, (1.0 / cols as f64).sqrt(), rng));
    params.insert(b, Tensor2::zeros(rows, 1));
}

fn init_gaussian_head(
    params: &mut ParamSet,
    prefix: &str,
    input: usize,
    hidden: usize,
    latent: usize,
    rng: &mut ChaCha8Rng,
) {
    init_linear(params, &format!("{prefix}.w1"), &format!("{prefix}.b1"), hidden, input, rng);
    init_linear(params, &format!("{prefix}.wm"), &format!("{prefix}.bm"), latent, hidden, rng);
    init_linear(params, &format!("{prefix}.wl"), &format!("{prefix}.bl"), latent, hidden, rng);
}

/// Graph version of a two-layer Gaussian head: returns (mean, clamped logvar).
fn head_graph(g: &mut Graph, params: &ParamSet, prefix: &str, x: NodeId) -> (NodeId, NodeId) {
    let w1 = g.param(&format!("{prefix}.w1"), params.get(&format!("{prefix}.w1")).unwrap());
    let b1 = g.param(&format!("{prefix}.b1"), params.get(&format!("{prefix}.b1")).unwrap());
    let wm = g.param(&format!("{prefix}.wm"), params.get(&format!("{prefix}.wm")).unwrap());
    let bm = g.param(&format!("{prefix}.bm"), params.get(&format!("{prefix}.bm")).unwrap());
    let wl = g.param(&format!("{prefix}.wl"), params.get(&format!("{prefix}.wl")).unwrap());
    let bl = g.param(&format!("{prefix}.bl"), params.get(&format!("{prefix}.bl")).unwrap());
    let h = g.affine(w1, b1, x);
    let h = g.relu(h);
    let mean = g.affine(wm, bm, h);
    let logvar_raw = g.affine(wl, bl, h);
    let logvar = g.clamp_logvar(logvar_raw);
    (mean, logvar)
}

/// Pure-forward version of the same head.
fn head_forward(params: &ParamSet, prefix: &str, x: &[f64]) -> Result<GaussianParams> {
    let h = affine_apply(
        params.get(&format!("{prefix}.w1"))?,
        params.get(&format!("{prefix}.b1"))?.data(),
        x,
    )?;
    let h: Vec<f64> = h.into_iter().map(relu).collect();
    let mean = affine_apply(
        params.get(&format!("{prefix}.wm"))?,
        params.get(&format!("{prefix}.bm"))?.data(),
        &h,
    )?;
    let logvar = affine_apply(
        params.get(&format!("{prefix}.wl"))?,
        params.get(&format!("{prefix}.bl"))?.data(),
        &h,
    )?;
    GaussianParams::new(mean, logvar)
}

/// Graph two-layer MLP: `W2 relu(W1 x + b1) + b2`.
fn mlp_graph(g: &mut Graph, params: &ParamSet, prefix: &str, x: NodeId) -> NodeId {
    let w1 = g.param(&format!("{prefix}.w1"), params.get(&format!("{prefix}.w1")).unwrap());
    let b1 = g.param(&format!("{prefix}.b1"), params.get(&format!("{prefix}.b1")).unwrap());
    let w2 = g.param(&format!("{prefix}.w2"), params.get(&format!("{prefix}.w2")).unwrap());
    let b2 = g.param(&format!("{prefix}.b2"), params.get(&format!("{prefix}.b2")).unwrap());
    let h = g.affine(w1, b1, x);
    let h = g.relu(h);
    g.affine(w2, b2, h)
}

fn mlp_forward(params: &ParamSet, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
    let h = affine_apply(
        params.get(&format!("{prefix}.w1"))?,
        params.get(&format!("{prefix}.b1"))?.data(),
        x,
    )?;
    let h: Vec<f64> = h.into_iter().map(relu).collect();
    affine_apply(
        params.get(&format!("{prefix}.w2"))?,
        params.get(&format!("{prefix}.b2"))?.data(),
        &h,
    )
}

/// Draw `count` negatives for one slot, uniform over the catalog, excluding
/// the target when the catalog has more than one item.
fn draw_negatives(
    n_items: usize,
    target: ItemId,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ItemId> {
    (0..count)
        .map(|_| {
            let mut neg = rng.gen_range(0..n_items);
            while n_items > 1 && neg == target {
                neg = rng.gen_range(0..n_items);
            }
            neg
        })
        .collect()
}

/// One shuffled pass over the training set; returns the mean loss.
fn run_epoch(
    params: &mut ParamSet,
    train: &Dataset,
    config: &CvaeConfig,
    opt: &mut AdamState,
    order: &mut [usize],
    rng: &mut ChaCha8Rng,
    build: &mut impl FnMut(&mut Graph, &ParamSet, &Record, &mut ChaCha8Rng) -> Result<NodeId>,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
    let mut epoch_loss = 0.0;
    for batch in order.chunks(config.batch) {
        let mut g = Graph::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &idx in batch {
            losses.push(build(&mut g, params, &train.records[idx], rng)?);
        }
        let total = g.sum_scalars(&losses);
        let loss = g.scale(total, 1.0 / batch.len() as f64);
        epoch_loss += g.scalar(loss) * batch.len() as f64;
        let grads = g.backward(loss)?;
        adam_step(opt, params, &grads)?;
    }
    Ok(epoch_loss / train.len() as f64)
}

fn save_meta(path: &Path, fields: &[(&str, String)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in fields {
        writeln!(w, "{k}={v}")?;
    }
    w.flush()?;
    Ok(())
}

fn load_meta(path: &Path) -> Result<std::collections::BTreeMap<String, String>> {
    let mut map = std::collections::BTreeMap::new();
    for (idx, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn meta_get<T: std::str::FromStr>(
    map: &std::collections::BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Format(format!("model sidecar missing {key}")))?
        .parse()
        .map_err(|_| Error::Format(format!("bad value for {key} in model sidecar")))
}

fn config_meta(config: &CvaeConfig, k: usize) -> Vec<(&'static str, String)> {
    vec![
        ("k", k.to_string()),
        ("latent_dim", config.latent_dim.to_string()),
        ("hidden", config.hidden.to_string()),
        ("beta", config.beta.to_string()),
        ("personalized", config.personalized.to_string()),
        ("lr", config.lr.to_string()),
        ("weight_decay", config.weight_decay.to_string()),
        ("batch", config.batch.to_string()),
        ("negatives", config.negatives.to_string()),
        ("epochs", config.epochs.to_string()),
        ("seed", config.seed.to_string()),
    ]
}

fn config_from_meta(map: &std::collections::BTreeMap<String, String>) -> Result<(CvaeConfig, usize)> {
    let config = CvaeConfig {
        latent_dim: meta_get(map, "latent_dim")?,
        hidden: meta_get(map, "hidden")?,
        beta: meta_get(map, "beta")?,
        personalized: meta_get(map, "personalized")?,
        lr: meta_get(map, "lr")?,
        weight_decay: meta_get(map, "weight_decay")?,
        batch: meta_get(map, "batch")?,
        negatives: meta_get(map, "negatives")?,
        epochs: meta_get(map, "epochs")?,
        seed: meta_get(map, "seed")?,
    };
    let k = meta_get(map, "k")?;
    Ok((config, k))
}

/// One-shot conditional-VAE slate generator.
#[derive(Debug, Clone)]
pub struct ListCvae {
    pub config: CvaeConfig,
    pub k: usize,
    params: ParamSet,
    bank: EmbeddingBank,
    optimizer: Option<AdamState>,
}

impl ListCvae {
    pub fn new(bank: EmbeddingBank, k: usize, config: CvaeConfig) -> Result<Self> {
        if config.personalized && bank.user_table().is_none() {
            return Err(Error::Contract(
                "personalized CVAE needs a user embedding table".into(),
            ));
        }
        let mut rng = seeded(config.seed);
        let c_dim = (k + 1) + if config.personalized { bank.dim() } else { 0 };
        let mut params = ParamSet::new();
        init_gaussian_head(
            &mut params,
            "enc",
            k * bank.dim() + c_dim,
            config.hidden,
            config.latent_dim,
            &mut rng,
        );
        init_gaussian_head(&mut params, "prior", c_dim, config.hidden, config.latent_dim, &mut rng);
        init_linear(
            &mut params,
            "dec.w1",
            "dec.b1",
            config.hidden,
            config.latent_dim + c_dim,
            &mut rng,
        );
        init_linear(&mut params, "dec.w2", "dec.b2", k * bank.dim(), config.hidden, &mut rng);
        Ok(ListCvae {
            config,
            k,
            params,
            bank,
            optimizer: None,
        })
    }

    /// Optimizer state left by training, for the checkpoint sidecar.
    pub fn optimizer(&self) -> Option<&AdamState> {
        self.optimizer.as_ref()
    }

    pub fn bank(&self) -> &EmbeddingBank {
        &self.bank
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn c_dim(&self) -> usize {
        (self.k + 1) + if self.config.personalized { self.bank.dim() } else { 0 }
    }

    /// Constraint for an observed response; includes the user part when
    /// personalized.
    pub fn constraint_for(
        &self,
        r: &ResponseVector,
        user: Option<UserId>,
    ) -> Result<ConstraintVector> {
        let user_part = if self.config.personalized {
            let u = user.ok_or_else(|| {
                Error::Contract("personalized CVAE needs a user id in the constraint".into())
            })?;
            self.bank.user(u)
        } else {
            None
        };
        Ok(make_constraint(r, user_part))
    }

    /// The all-clicked ideal constraint used at inference time.
    pub fn ideal_constraint(&self, user: Option<UserId>) -> Result<ConstraintVector> {
        self.constraint_for(&ResponseVector::ideal(self.k), user)
    }

    fn slate_embedding_input(&self, slate: &Slate) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.k * self.bank.dim());
        for &item in slate.items() {
            x.extend_from_slice(self.bank.item(item));
        }
        x
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        slate: &Slate,
        c: &ConstraintVector,
        noise: &[f64],
        negatives: &[Vec<ItemId>],
    ) -> Result<(NodeId, NodeId, NodeId)> {
        if slate.len() != self.k || negatives.len() != self.k {
            return Err(Error::Contract(format!(
                "slate/negatives must both have {} slots",
                self.k
            )));
        }
        if c.dim() != self.c_dim() {
            return Err(Error::Contract(format!(
                "constraint has dim {}, model expects {}",
                c.dim(),
                self.c_dim()
            )));
        }
        let c_in = g.constant(&c.as_input());
        let slate_in = g.constant(&self.slate_embedding_input(slate));
        let enc_in = g.concat(&[slate_in, c_in]);
        let (post_mean, post_logvar) = head_graph(g, params, "enc", enc_in);
        let (prior_mean, prior_logvar) = head_graph(g, params, "prior", c_in);
        let z = g.reparam(post_mean, post_logvar, noise);
        let dec_in = g.concat(&[z, c_in]);
        let decoded = mlp_graph(g, params, "dec", dec_in);

        let dim = self.bank.dim();
        let mut slot_losses = Vec::with_capacity(self.k);
        for (slot, negs) in negatives.iter().enumerate() {
            let x_hat = g.slice(decoded, slot * dim, dim);
            let mut rows = Vec::with_capacity(negs.len() + 1);
            rows.push(slate.get(slot));
            rows.extend_from_slice(negs);
            let logits = g.dot_rows(x_hat, self.bank.item_table().clone(), rows);
            slot_losses.push(g.sampled_ce(logits));
        }
        let recon = g.sum_scalars(&slot_losses);
        let kl = g.kl_diag(post_mean, post_logvar, prior_mean, prior_logvar);
        let kl_scaled = g.scale(kl, self.config.beta);
        let total = g.add(recon, kl_scaled);
        Ok((total, recon, kl))
    }

    /// Loss of one slate with injected noise and negatives.
    pub fn cvae_loss(
        &self,
        slate: &Slate,
        c: &ConstraintVector,
        noise: &[f64],
        negatives: &[Vec<ItemId>],
    ) -> Result<CvaeLossParts> {
        let mut g = Graph::new();
        let (total, recon, kl) = self.build_loss(&mut g, &self.params, slate, c, noise, negatives)?;
        Ok(CvaeLossParts {
            total: g.scalar(total),
            recon: g.scalar(recon),
            kl: g.scalar(kl),
        })
    }

    /// Mirror of `build_loss` for gradient checking: builds the per-record
    /// loss on a caller graph against caller params.
    pub fn loss_node_for_check(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        slate: &Slate,
        c: &ConstraintVector,
        noise: &[f64],
        negatives: &[Vec<ItemId>],
    ) -> NodeId {
        self.build_loss(g, params, slate, c, noise, negatives)
            .expect("valid loss inputs")
            .0
    }

    /// Train on a slate dataset; returns per-epoch mean losses.
    pub fn fit(&mut self, train: &Dataset) -> Result<Vec<f64>> {
        self.fit_with_stop(train, |_, _| false)
    }

    /// Train with an after-epoch stop callback, up to the configured epoch
    /// cap. The callback sees the model with its current parameters so it can
    /// probe validation metrics.
    pub fn fit_with_stop(
        &mut self,
        train: &Dataset,
        mut stop: impl FnMut(usize, &Self) -> bool,
    ) -> Result<Vec<f64>> {
        if train.is_empty() {
            return Err(Error::Empty("cannot train a CVAE on no data".into()));
        }
        let mut rng = seeded(self.config.seed.wrapping_add(1));
        let latent = self.config.latent_dim;
        let negatives = self.config.negatives;
        let n_items = self.bank.n_items();
        let config = self.config.clone();
        let mut opt = AdamState::new(config.lr, config.weight_decay);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_losses = Vec::new();
        for epoch in 0..config.epochs {
            let mut params = std::mem::take(&mut self.params);
            let result = run_epoch(
                &mut params,
                train,
                &config,
                &mut opt,
                &mut order,
                &mut rng,
                &mut |g, p, rec, rng| {
                    let c = self.constraint_for(&rec.response, rec.user)?;
                    let noise = normal_vec(latent, rng);
                    let negs: Vec<Vec<ItemId>> = rec
                        .slate
                        .items()
                        .iter()
                        .map(|&t| draw_negatives(n_items, t, negatives, rng))
                        .collect();
                    let (total, _, _) = self.build_loss(g, p, &rec.slate, &c, &noise, &negs)?;
                    Ok(total)
                },
            );
            self.params = params;
            epoch_losses.push(result?);
            if stop(epoch, self) {
                break;
            }
        }
        self.optimizer = Some(opt);
        Ok(epoch_losses)
    }

    /// Conditional prior at a constraint.
    pub fn prior_params(&self, c: &ConstraintVector) -> Result<GaussianParams> {
        head_forward(&self.params, "prior", &c.as_input())
    }

    /// Variational posterior for an observed slate.
    pub fn posterior_params(&self, slate: &Slate, c: &ConstraintVector) -> Result<GaussianParams> {
        let mut x = self.slate_embedding_input(slate);
        x.extend_from_slice(&c.as_input());
        head_forward(&self.params, "enc", &x)
    }

    /// Decode a latent code into K latent item embeddings.
    pub fn decode_embeddings(&self, z: &[f64], c: &ConstraintVector) -> Result<Vec<Vec<f64>>> {
        let mut x = z.to_vec();
        x.extend_from_slice(&c.as_input());
        let out = mlp_forward(&self.params, "dec", &x)?;
        let dim = self.bank.dim();
        Ok((0..self.k).map(|s| out[s * dim..(s + 1) * dim].to_vec()).collect())
    }

    /// Nearest-item decode of a latent code.
    pub fn decode_slate(&self, z: &[f64], c: &ConstraintVector) -> Result<Slate> {
        let embeddings = self.decode_embeddings(z, c)?;
        Ok(Slate::new(
            embeddings.iter().map(|x| nearest_item(&self.bank, x)).collect(),
        ))
    }

    /// Generation with externally drawn prior noise; `generate` wraps this
    /// with noise from the caller's generator.
    pub fn generate_with_noise(&self, user: Option<UserId>, noise: &[f64]) -> Result<Slate> {
        let c = self.ideal_constraint(user)?;
        let prior = self.prior_params(&c)?;
        let z = crate::numkit::reparameterize(&prior, noise)?;
        self.decode_slate(&z, &c)
    }

    /// Posterior-mean reconstruction of an observed slate (no noise).
    pub fn reconstruct(&self, slate: &Slate, c: &ConstraintVector) -> Result<Slate> {
        let post = self.posterior_params(slate, c)?;
        self.decode_slate(post.mean(), c)
    }

    pub fn save(&self, params_path: &Path, meta_path: &Path) -> Result<()> {
        crate::numkit::save_params(&self.params, params_path)?;
        let mut fields = vec![("kind", "ListCvae".to_string())];
        fields.extend(config_meta(&self.config, self.k));
        save_meta(meta_path, &fields)
    }

    pub fn load(bank: EmbeddingBank, params_path: &Path, meta_path: &Path) -> Result<Self> {
        let map = load_meta(meta_path)?;
        let kind: String = meta_get(&map, "kind")?;
        if kind != "ListCvae" {
            return Err(Error::Format(format!("expected a ListCvae sidecar, got {kind}")));
        }
        let (config, k) = config_from_meta(&map)?;
        let params = crate::numkit::load_params(params_path)?;
        Ok(ListCvae {
            config,
            k,
            params,
            bank,
            optimizer: None,
        })
    }
}

impl SlateGenerator for ListCvae {
    fn generate(&self, user: Option<UserId>, rng: &mut dyn rand::RngCore) -> Result<Slate> {
        let noise = normal_vec(self.config.latent_dim, rng);
        self.generate_with_noise(user, &noise)
    }
}

/// Two-phase conditional-VAE: pivot selection then slate completion.
#[derive(Debug, Clone)]
pub struct PivotCvae {
    pub config: CvaeConfig,
    pub variant: PivotVariant,
    pub k: usize,
    params: ParamSet,
    bank: EmbeddingBank,
    optimizer: Option<AdamState>,
}

impl PivotCvae {
    pub fn new(
        bank: EmbeddingBank,
        k: usize,
        variant: PivotVariant,
        config: CvaeConfig,
    ) -> Result<Self> {
        if config.personalized && bank.user_table().is_none() {
            return Err(Error::Contract(
                "personalized CVAE needs a user embedding table".into(),
            ));
        }
        if k < 2 {
            return Err(Error::Contract("pivot models need slates of size >= 2".into()));
        }
        let mut rng = seeded(config.seed);
        let dim = bank.dim();
        let c_dim = (k + 1) + if config.personalized { dim } else { 0 };
        let mut params = ParamSet::new();
        init_gaussian_head(&mut params, "enc", k * dim + c_dim, config.hidden, config.latent_dim, &mut rng);
        init_gaussian_head(&mut params, "prior", c_dim, config.hidden, config.latent_dim, &mut rng);
        init_linear(&mut params, "pivot.w1", "pivot.b1", config.hidden, config.latent_dim + c_dim, &mut rng);
        init_linear(&mut params, "pivot.w2", "pivot.b2", dim, config.hidden, &mut rng);
        init_linear(
            &mut params,
            "comp.w1",
            "comp.b1",
            config.hidden,
            dim + config.latent_dim + c_dim,
            &mut rng,
        );
        init_linear(&mut params, "comp.w2", "comp.b2", (k - 1) * dim, config.hidden, &mut rng);
        Ok(PivotCvae {
            config,
            variant,
            k,
            params,
            bank,
            optimizer: None,
        })
    }

    /// Optimizer state left by training, for the checkpoint sidecar.
    pub fn optimizer(&self) -> Option<&AdamState> {
        self.optimizer.as_ref()
    }

    pub fn bank(&self) -> &EmbeddingBank {
        &self.bank
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn c_dim(&self) -> usize {
        (self.k + 1) + if self.config.personalized { self.bank.dim() } else { 0 }
    }

    pub fn constraint_for(
        &self,
        r: &ResponseVector,
        user: Option<UserId>,
    ) -> Result<ConstraintVector> {
        let user_part = if self.config.personalized {
            let u = user.ok_or_else(|| {
                Error::Contract("personalized CVAE needs a user id in the constraint".into())
            })?;
            self.bank.user(u)
        } else {
            None
        };
        Ok(make_constraint(r, user_part))
    }

    pub fn ideal_constraint(&self, user: Option<UserId>) -> Result<ConstraintVector> {
        self.constraint_for(&ResponseVector::ideal(self.k), user)
    }

    fn slate_embedding_input(&self, slate: &Slate) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.k * self.bank.dim());
        for &item in slate.items() {
            x.extend_from_slice(self.bank.item(item));
        }
        x
    }

    /// Loss graph. `pivot_input` is the item whose embedding feeds the
    /// completion model; `None` uses the ground-truth first item. The pivot
    /// head itself is always trained against the ground truth, independent of
    /// the completion model.
    fn build_loss(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        slate: &Slate,
        c: &ConstraintVector,
        noise: &[f64],
        negatives: &[Vec<ItemId>],
        pivot_input: Option<ItemId>,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        if slate.len() != self.k || negatives.len() != self.k {
            return Err(Error::Contract(format!(
                "slate/negatives must both have {} slots",
                self.k
            )));
        }
        if c.dim() != self.c_dim() {
            return Err(Error::Contract(format!(
                "constraint has dim {}, model expects {}",
                c.dim(),
                self.c_dim()
            )));
        }
        let dim = self.bank.dim();
        let c_in = g.constant(&c.as_input());
        let slate_in = g.constant(&self.slate_embedding_input(slate));
        let enc_in = g.concat(&[slate_in, c_in]);
        let (post_mean, post_logvar) = head_graph(g, params, "enc", enc_in);
        let (prior_mean, prior_logvar) = head_graph(g, params, "prior", c_in);
        let z = g.reparam(post_mean, post_logvar, noise);

        // pivot head: slot 1 reconstruction
        let pivot_in = g.concat(&[z, c_in]);
        let x1_hat = mlp_graph(g, params, "pivot", pivot_in);
        let mut rows = Vec::with_capacity(negatives[0].len() + 1);
        rows.push(slate.get(0));
        rows.extend_from_slice(&negatives[0]);
        let pivot_logits = g.dot_rows(x1_hat, self.bank.item_table().clone(), rows);
        let pivot_ce = g.sampled_ce(pivot_logits);

        // completion head: slots 2..K given the (possibly perturbed) pivot
        let fed = pivot_input.unwrap_or_else(|| slate.get(0));
        let pivot_emb = g.constant(self.bank.item(fed));
        let comp_in = g.concat(&[pivot_emb, z, c_in]);
        let completed = mlp_graph(g, params, "comp", comp_in);

        let mut slot_losses = vec![pivot_ce];
        for slot in 1..self.k {
            let x_hat = g.slice(completed, (slot - 1) * dim, dim);
            let mut rows = Vec::with_capacity(negatives[slot].len() + 1);
            rows.push(slate.get(slot));
            rows.extend_from_slice(&negatives[slot]);
            let logits = g.dot_rows(x_hat, self.bank.item_table().clone(), rows);
            slot_losses.push(g.sampled_ce(logits));
        }
        let recon = g.sum_scalars(&slot_losses);
        let kl = g.kl_diag(post_mean, post_logvar, prior_mean, prior_logvar);
        let kl_scaled = g.scale(kl, self.config.beta);
        let total = g.add(recon, kl_scaled);
        Ok((total, recon, kl))
    }

    /// Loss of one slate. `pivot_input: None` feeds the ground-truth pivot to
    /// the completion model (the GT-* schedule); `Some(item)` injects an
    /// already-perturbed pivot (the SGT-* schedule draws it by ground-truth
    /// similarity).
    pub fn cvae_loss(
        &self,
        slate: &Slate,
        c: &ConstraintVector,
        noise: &[f64],
        negatives: &[Vec<ItemId>],
        pivot_input: Option<ItemId>,
    ) -> Result<CvaeLossParts> {
        let mut g = Graph::new();
        let (total, recon, kl) =
            self.build_loss(&mut g, &self.params, slate, c, noise, negatives, pivot_input)?;
        Ok(CvaeLossParts {
            total: g.scalar(total),
            recon: g.scalar(recon),
            kl: g.scalar(kl),
        })
    }

    pub fn loss_node_for_check(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        slate: &Slate,
        c: &ConstraintVector,
        noise: &[f64],
        negatives: &[Vec<ItemId>],
        pivot_input: Option<ItemId>,
    ) -> NodeId {
        self.build_loss(g, params, slate, c, noise, negatives, pivot_input)
            .expect("valid loss inputs")
            .0
    }

    pub fn fit(&mut self, train: &Dataset) -> Result<Vec<f64>> {
        self.fit_with_stop(train, |_, _| false)
    }

    pub fn fit_with_stop(
        &mut self,
        train: &Dataset,
        mut stop: impl FnMut(usize, &Self) -> bool,
    ) -> Result<Vec<f64>> {
        if train.is_empty() {
            return Err(Error::Empty("cannot train a CVAE on no data".into()));
        }
        let mut rng = seeded(self.config.seed.wrapping_add(1));
        let latent = self.config.latent_dim;
        let negatives = self.config.negatives;
        let n_items = self.bank.n_items();
        let perturb_train = self.variant.perturb_train();
        let config = self.config.clone();
        let mut opt = AdamState::new(config.lr, config.weight_decay);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_losses = Vec::new();
        for epoch in 0..config.epochs {
            let mut params = std::mem::take(&mut self.params);
            let result = run_epoch(
                &mut params,
                train,
                &config,
                &mut opt,
                &mut order,
                &mut rng,
                &mut |g, p, rec, rng| {
                    let c = self.constraint_for(&rec.response, rec.user)?;
                    let noise = normal_vec(latent, rng);
                    let negs: Vec<Vec<ItemId>> = rec
                        .slate
                        .items()
                        .iter()
                        .map(|&t| draw_negatives(n_items, t, negatives, rng))
                        .collect();
                    let pivot_input = if perturb_train {
                        Some(multinomial_similar_item(&self.bank, rec.slate.get(0), 1.0, rng))
                    } else {
                        None
                    };
                    let (total, _, _) =
                        self.build_loss(g, p, &rec.slate, &c, &noise, &negs, pivot_input)?;
                    Ok(total)
                },
            );
            self.params = params;
            epoch_losses.push(result?);
            if stop(epoch, self) {
                break;
            }
        }
        self.optimizer = Some(opt);
        Ok(epoch_losses)
    }

    pub fn prior_params(&self, c: &ConstraintVector) -> Result<GaussianParams> {
        head_forward(&self.params, "prior", &c.as_input())
    }

    pub fn posterior_params(&self, slate: &Slate, c: &ConstraintVector) -> Result<GaussianParams> {
        let mut x = self.slate_embedding_input(slate);
        x.extend_from_slice(&c.as_input());
        head_forward(&self.params, "enc", &x)
    }

    /// The pivot head's ideal latent item embedding for (z, c).
    pub fn pivot_embedding(&self, z: &[f64], c: &ConstraintVector) -> Result<Vec<f64>> {
        let mut x = z.to_vec();
        x.extend_from_slice(&c.as_input());
        mlp_forward(&self.params, "pivot", &x)
    }

    /// Choose the pivot item: the argmax catalog item by dot product, or,
    /// with perturbation, a multinomial draw over sigmoid-dot weights.
    pub fn pivot_select(
        &self,
        z: &[f64],
        c: &ConstraintVector,
        perturb: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<ItemId> {
        let x1 = self.pivot_embedding(z, c)?;
        if !perturb {
            return Ok(nearest_item(&self.bank, &x1));
        }
        let weights: Vec<f64> = (0..self.bank.n_items())
            .map(|i| crate::numkit::sigmoid(self.bank.item_table().row_dot(i, &x1)))
            .collect();
        Ok(multinomial(&weights, rng))
    }

    /// Fill slots 2..K for a given pivot; never perturbs.
    pub fn complete_slate(
        &self,
        pivot: ItemId,
        z: &[f64],
        c: &ConstraintVector,
    ) -> Result<Slate> {
        let mut x = self.bank.item(pivot).to_vec();
        x.extend_from_slice(z);
        x.extend_from_slice(&c.as_input());
        let out = mlp_forward(&self.params, "comp", &x)?;
        let dim = self.bank.dim();
        let mut items = Vec::with_capacity(self.k);
        items.push(pivot);
        for slot in 0..self.k - 1 {
            items.push(nearest_item(&self.bank, &out[slot * dim..(slot + 1) * dim]));
        }
        Ok(Slate::new(items))
    }

    /// Generation with externally drawn prior noise; perturbation of the
    /// pivot still comes from `rng` when the variant samples at inference.
    pub fn generate_with_noise(
        &self,
        user: Option<UserId>,
        noise: &[f64],
        rng: &mut dyn rand::RngCore,
    ) -> Result<Slate> {
        let c = self.ideal_constraint(user)?;
        let prior = self.prior_params(&c)?;
        let z = crate::numkit::reparameterize(&prior, noise)?;
        let pivot = self.pivot_select(&z, &c, self.variant.perturb_inference(), rng)?;
        self.complete_slate(pivot, &z, &c)
    }

    /// Posterior-mean reconstruction; the pivot is the argmax item.
    pub fn reconstruct(&self, slate: &Slate, c: &ConstraintVector) -> Result<Slate> {
        let post = self.posterior_params(slate, c)?;
        let x1 = self.pivot_embedding(post.mean(), c)?;
        let pivot = nearest_item(&self.bank, &x1);
        self.complete_slate(pivot, post.mean(), c)
    }

    pub fn save(&self, params_path: &Path, meta_path: &Path) -> Result<()> {
        crate::numkit::save_params(&self.params, params_path)?;
        let mut fields = vec![
            ("kind", "PivotCvae".to_string()),
            ("variant", self.variant.as_str().to_string()),
        ];
        fields.extend(config_meta(&self.config, self.k));
        save_meta(meta_path, &fields)
    }

    pub fn load(bank: EmbeddingBank, params_path: &Path, meta_path: &Path) -> Result<Self> {
        let map = load_meta(meta_path)?;
        let kind: String = meta_get(&map, "kind")?;
        if kind != "PivotCvae" {
            return Err(Error::Format(format!("expected a PivotCvae sidecar, got {kind}")));
        }
        let variant = PivotVariant::parse(&meta_get::<String>(&map, "variant")?)?;
        let (config, k) = config_from_meta(&map)?;
        let params = crate::numkit::load_params(params_path)?;
        Ok(PivotCvae {
            config,
            variant,
            k,
            params,
            bank,
            optimizer: None,
        })
    }
}

impl SlateGenerator for PivotCvae {
    fn generate(&self, user: Option<UserId>, rng: &mut dyn rand::RngCore) -> Result<Slate> {
        let noise = normal_vec(self.config.latent_dim, rng);
        self.generate_with_noise(user, &noise, rng)
    }
}
