//! The experiment pipeline: environment, dataset, embeddings, model
//! training, and evaluation, composed stage by stage. Every stage derives
//! its seed from the master seed by a fixed offset, so a full rerun with the
//! same config and seed reproduces every output byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slategen_core::dataio::{
    balance_responses, load_dataset, parse_interaction_log, save_dataset, sessions_to_slates,
    split_dataset, Dataset, Slate, UserId,
};
use slategen_core::evalkit::{evaluate_generator, MetricsReport};
use slategen_core::models::{
    mmr_rerank, mmr_rerank_classic, nongreedy_perturb, pretrain_embeddings, rank_topk,
    train_pointwise_ranker, CvaeConfig, EmbeddingBank, ListCvae, PivotCvae, PointwiseRanker,
    PretrainConfig, RankerConfig, RankerKind, SlateGenerator,
};
use slategen_core::simenv::{
    build_environment, fit_response_model, generate_dataset, load_environment, save_environment,
    Environment, ResponseFitConfig, SimConfig,
};
use slategen_core::Result as CoreResult;

use crate::config::{EmbeddingSource, ModelKind, RunConfig};
use crate::manifest::RunManifest;
use crate::CliError;

// Stage seed offsets from the master seed.
const SEED_ENV: u64 = 0;
const SEED_DATAGEN: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_PRETRAIN: u64 = 3;
const SEED_RESPONSE: u64 = 4;
const SEED_MODEL_BASE: u64 = 100;
const SEED_EVAL_BASE: u64 = 200;

/// Conventional artifact names inside the output directory.
pub struct StagePaths {
    pub out: PathBuf,
}

impl StagePaths {
    pub fn new(out: &Path) -> Self {
        StagePaths { out: out.to_path_buf() }
    }

    pub fn env_params(&self) -> PathBuf {
        self.out.join("env.params")
    }
    pub fn env_sidecar(&self) -> PathBuf {
        self.out.join("env.sim")
    }
    pub fn dataset(&self, split: &str) -> PathBuf {
        self.out.join(format!("{split}.slates"))
    }
    pub fn bank(&self) -> PathBuf {
        self.out.join("bank.params")
    }
    pub fn model_params(&self, kind: &ModelKind) -> PathBuf {
        self.out.join(format!("{}.params", kind.stem()))
    }
    pub fn model_meta(&self, kind: &ModelKind) -> PathBuf {
        self.out.join(format!("{}.model", kind.stem()))
    }
    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }
    pub fn config_snapshot(&self) -> PathBuf {
        self.out.join("config_resolved.cfg")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.out.join(format!("run_manifest_{command}.txt"))
    }
}

fn stage_err(stage: &str) -> impl Fn(slategen_core::Error) -> CliError + '_ {
    move |source| CliError::Stage {
        stage: stage.to_string(),
        source,
    }
}

pub fn sim_config_of(config: &RunConfig, seed: u64) -> SimConfig {
    SimConfig {
        n_items: config.sim.n_items,
        n_users: config.sim.n_users,
        emb_dim: config.sim.emb_dim,
        pos_offsets: config.sim.pos_offsets.clone(),
        pos_noise_std: config.sim.pos_noise_std,
        pos_weight: config.sim.pos_weight,
        relation_weight: config.sim.rho,
        seed: seed.wrapping_add(SEED_ENV),
        vec_std: config.sim.vec_std,
        bias_std: config.sim.bias_std,
        global_bias: config.sim.global_bias,
        distinct_slate_items: config.data.distinct_slate_items,
    }
}

/// Build and persist the simulator environment.
pub fn stage_environment(
    config: &RunConfig,
    seed: u64,
    paths: &StagePaths,
    manifest: &mut RunManifest,
) -> Result<Environment, CliError> {
    let sim = sim_config_of(config, seed);
    manifest.seed_for("env", sim.seed);
    let env = build_environment(config.sim.kind, &sim).map_err(stage_err("env"))?;
    save_environment(&env, &paths.env_params(), &paths.env_sidecar()).map_err(stage_err("env"))?;
    manifest.add_output(&paths.env_params());
    manifest.add_output(&paths.env_sidecar());
    Ok(env)
}

pub struct DataArtifacts {
    pub env: Environment,
    pub full: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Simulate (or ingest) the slate log, balance it, and split 80-10-10.
/// Ingested runs also fit the learned response environment here.
pub fn stage_data(
    config: &RunConfig,
    seed: u64,
    paths: &StagePaths,
    manifest: &mut RunManifest,
) -> Result<DataArtifacts, CliError> {
    let full = match &config.data.ingest {
        None => {
            let env = stage_environment(config, seed, paths, manifest)?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(manifest.seed_for("datagen", seed.wrapping_add(SEED_DATAGEN)));
            generate_dataset(&env, config.data.n_slates, &mut rng).map_err(stage_err("datagen"))?
        }
        Some(log_path) => {
            let reader = std::io::BufReader::new(
                std::fs::File::open(log_path).map_err(|e| CliError::Stage {
                    stage: "ingest".into(),
                    source: slategen_core::Error::Io(e),
                })?,
            );
            let log = parse_interaction_log(reader).map_err(stage_err("ingest"))?;
            let chunked =
                sessions_to_slates(&log, config.data.slate_size, config.data.positive_threshold)
                    .map_err(stage_err("ingest"))?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(manifest.seed_for("balance", seed.wrapping_add(SEED_DATAGEN)));
            let (balanced, report) = balance_responses(&chunked, &mut rng);
            manifest.note(format!(
                "balance groups before={:?} after={:?} empty={:?}",
                report.sizes_before, report.sizes_after, report.empty_groups
            ));
            balanced
        }
    };
    manifest.note(format!("dataset records={} groups={:?}", full.len(), full.group_sizes()));

    let split_seed = manifest.seed_for("split", seed.wrapping_add(SEED_SPLIT));
    let (train, val, test) =
        split_dataset(&full, config.data.fractions, split_seed).map_err(stage_err("split"))?;
    manifest.note(format!(
        "split sizes train={} val={} test={}",
        train.len(),
        val.len(),
        test.len()
    ));

    for (name, d) in [("full", &full), ("train", &train), ("val", &val), ("test", &test)] {
        let path = paths.dataset(name);
        save_dataset(d, &path).map_err(stage_err("split"))?;
        manifest.add_output(&path);
    }

    let env = match &config.data.ingest {
        None => load_environment(&paths.env_params(), &paths.env_sidecar())
            .map_err(stage_err("env"))?,
        Some(_) => {
            // real logs have no simulator; fit the learned response model to
            // stand in as ground truth
            let fit = ResponseFitConfig {
                emb_dim: config.sim.emb_dim,
                hidden: config.model.hidden,
                lr: 1e-3,
                weight_decay: config.train.weight_decay,
                batch: config.train.batch,
                epochs: config.train.response_epochs,
                seed: manifest.seed_for("response_fit", seed.wrapping_add(SEED_RESPONSE)),
            };
            let (env, losses) = fit_response_model(&full, &fit).map_err(stage_err("response_fit"))?;
            manifest.note(format!(
                "response model BCE first={:.4} last={:.4}",
                losses.first().unwrap_or(&f64::NAN),
                losses.last().unwrap_or(&f64::NAN)
            ));
            save_environment(&env, &paths.env_params(), &paths.env_sidecar())
                .map_err(stage_err("response_fit"))?;
            manifest.add_output(&paths.env_params());
            manifest.add_output(&paths.env_sidecar());
            env
        }
    };

    Ok(DataArtifacts {
        env,
        full,
        train,
        val,
        test,
    })
}

/// Export the simulator's explicit embeddings, or pretrain the biased-MF
/// extractor on the training split.
pub fn stage_bank(
    config: &RunConfig,
    seed: u64,
    data: &DataArtifacts,
    paths: &StagePaths,
    manifest: &mut RunManifest,
) -> Result<EmbeddingBank, CliError> {
    let bank = match (config.train.embeddings, &config.data.ingest) {
        (EmbeddingSource::Explicit, None) => {
            EmbeddingBank::from_environment(&data.env).map_err(stage_err("bank"))?
        }
        _ => {
            let pretrain = PretrainConfig {
                emb_dim: config.sim.emb_dim,
                lr: config.train.ranker_lr,
                weight_decay: config.train.weight_decay,
                batch: config.train.batch,
                epochs: config.train.pretrain_epochs,
                negatives_per_positive: 2,
                seed: manifest.seed_for("pretrain", seed.wrapping_add(SEED_PRETRAIN)),
            };
            pretrain_embeddings(&data.train, &pretrain).map_err(stage_err("bank"))?
        }
    };
    bank.save(&paths.bank()).map_err(stage_err("bank"))?;
    manifest.add_output(&paths.bank());
    Ok(bank)
}

#[derive(Debug, Clone)]
pub enum BaseModel {
    Ranker(PointwiseRanker),
    List(ListCvae),
    Pivot(PivotCvae),
}

/// A trained recommender plus the wrapper parameters its kind implies.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub base: BaseModel,
}

impl TrainedModel {
    pub fn beta(&self) -> Option<f64> {
        match &self.base {
            BaseModel::List(m) => Some(m.config.beta),
            BaseModel::Pivot(m) => Some(m.config.beta),
            BaseModel::Ranker(_) => None,
        }
    }
}

/// View of a trained model as a slate generator, with the non-greedy and MMR
/// wrappers applied according to the model kind.
pub struct Policy<'a> {
    pub model: &'a TrainedModel,
    pub bank: &'a EmbeddingBank,
    pub k: usize,
    pub mmr_lambda: f64,
    pub mmr_classic: bool,
    pub perturb_position: usize,
}

impl SlateGenerator for Policy<'_> {
    fn generate(&self, user: Option<UserId>, rng: &mut dyn rand::RngCore) -> CoreResult<Slate> {
        let base = match (&self.model.base, &self.model.kind) {
            (BaseModel::Ranker(r), ModelKind::MfMmr) => {
                if self.mmr_classic {
                    mmr_rerank_classic(r, self.bank, user, self.k, self.mmr_lambda)?
                } else {
                    mmr_rerank(r, self.bank, user, self.k, self.mmr_lambda)?
                }
            }
            (BaseModel::Ranker(r), _) => rank_topk(r, user, self.k)?,
            (BaseModel::List(m), _) => m.generate(user, rng)?,
            (BaseModel::Pivot(m), _) => m.generate(user, rng)?,
        };
        Ok(match self.model.kind {
            ModelKind::NonGreedyMf | ModelKind::NonGreedyNeuMf | ModelKind::NonGreedyListCvae => {
                nongreedy_perturb(&base, self.perturb_position, self.bank, rng)
            }
            _ => base,
        })
    }

    fn is_deterministic(&self) -> bool {
        matches!(
            self.model.kind,
            ModelKind::Mf | ModelKind::NeuMf | ModelKind::MfMmr
        )
    }
}

fn cvae_config(config: &RunConfig, beta: f64, personalized: bool, seed: u64) -> CvaeConfig {
    CvaeConfig {
        latent_dim: config.model.latent_dim,
        hidden: config.model.hidden,
        beta,
        personalized,
        lr: config.train.cvae_lr,
        weight_decay: config.train.weight_decay,
        batch: config.train.batch,
        negatives: config.model.negatives,
        epochs: config.train.epochs,
        seed,
    }
}

fn ranker_config(config: &RunConfig, seed: u64) -> RankerConfig {
    RankerConfig {
        emb_dim: config.sim.emb_dim,
        hidden: config.model.hidden,
        lr: config.train.ranker_lr,
        weight_decay: config.train.weight_decay,
        batch: config.train.batch,
        max_epochs: config.train.epochs,
        patience: config.train.ranker_patience,
        negatives_per_positive: 2,
        seed,
    }
}

/// Tracks the validation-ENC moving average during CVAE training and calls
/// the stop once it plateaus: after `patience` consecutive windows whose
/// moving average fails to improve on the best by `min_improve` (relative),
/// training ends.
pub struct EncConvergence<'a> {
    env: &'a Environment,
    users: Vec<Option<UserId>>,
    probe_samples: usize,
    probe_seed: u64,
    window: usize,
    patience: usize,
    min_improve: f64,
    history: Vec<f64>,
    best_avg: f64,
    stale: usize,
}

impl<'a> EncConvergence<'a> {
    pub fn new(env: &'a Environment, users: &[Option<UserId>], config: &RunConfig, seed: u64) -> Self {
        EncConvergence {
            env,
            users: users.to_vec(),
            probe_samples: config.train.converge_probe_samples,
            probe_seed: seed,
            window: config.train.converge_window.max(1),
            patience: config.train.converge_patience.max(1),
            min_improve: config.train.converge_min_improve,
            history: Vec::new(),
            best_avg: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, _epoch: usize, model: &dyn SlateGenerator) -> bool {
        // common random numbers: the same probe draws every epoch, so the
        // ENC curve is a smooth function of the parameters and small
        // improvement thresholds stay meaningful
        let mut rng = ChaCha8Rng::seed_from_u64(self.probe_seed);
        let value = slategen_core::evalkit::enc(
            model,
            self.env,
            &self.users,
            self.probe_samples,
            &mut rng,
        )
        .expect("validation ENC probe");
        self.history.push(value);
        if self.history.len() < self.window {
            return false;
        }
        let avg: f64 =
            self.history[self.history.len() - self.window..].iter().sum::<f64>() / self.window as f64;
        if avg > self.best_avg * (1.0 + self.min_improve) || self.best_avg == f64::NEG_INFINITY {
            self.best_avg = avg;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn epochs_seen(&self) -> usize {
        self.history.len()
    }
}

/// Train one model of the given kind. Exposed for the sweep harness, which
/// trains many CVAEs against one shared data/bank stage.
pub fn train_one_model(
    kind: ModelKind,
    config: &RunConfig,
    beta: f64,
    personalized: bool,
    seed: u64,
    data: &DataArtifacts,
    bank: &EmbeddingBank,
) -> CoreResult<TrainedModel> {
    let k = data.full.slate_size;
    let users = eval_users(config, &data.full);
    let base = match kind {
        ModelKind::Mf | ModelKind::MfMmr | ModelKind::NonGreedyMf => BaseModel::Ranker(
            train_pointwise_ranker(RankerKind::Mf, &data.train, Some(&data.val), &ranker_config(config, seed))?,
        ),
        ModelKind::NeuMf | ModelKind::NonGreedyNeuMf => BaseModel::Ranker(
            train_pointwise_ranker(RankerKind::NeuMf, &data.train, Some(&data.val), &ranker_config(config, seed))?,
        ),
        ModelKind::ListCvae | ModelKind::NonGreedyListCvae => {
            let mut model = ListCvae::new(bank.clone(), k, cvae_config(config, beta, personalized, seed))?;
            if config.train.early_stop {
                let mut tracker = EncConvergence::new(&data.env, &users, config, seed ^ 0xE57);
                model.fit_with_stop(&data.train, |epoch, m| tracker.observe(epoch, m))?;
            } else {
                model.fit(&data.train)?;
            }
            BaseModel::List(model)
        }
        ModelKind::PivotCvae(variant) => {
            let mut model =
                PivotCvae::new(bank.clone(), k, variant, cvae_config(config, beta, personalized, seed))?;
            if config.train.early_stop {
                let mut tracker = EncConvergence::new(&data.env, &users, config, seed ^ 0xE57);
                model.fit_with_stop(&data.train, |epoch, m| tracker.observe(epoch, m))?;
            } else {
                model.fit(&data.train)?;
            }
            BaseModel::Pivot(model)
        }
    };
    Ok(TrainedModel { kind, base })
}

/// Train every configured model kind, reusing shared bases (MF backs MF,
/// MF-MMR and NonGreedy-MF; one List-CVAE backs its non-greedy wrapper).
pub fn stage_train(
    config: &RunConfig,
    seed: u64,
    data: &DataArtifacts,
    bank: &EmbeddingBank,
    paths: &StagePaths,
    manifest: &mut RunManifest,
) -> Result<Vec<TrainedModel>, CliError> {
    let personalized = config.model.personalized && data.full.records.iter().any(|r| r.user.is_some());
    if personalized != config.model.personalized {
        manifest.note("personalized=false forced: dataset has no user ids");
    }
    let mut shared: std::collections::BTreeMap<String, BaseModel> = std::collections::BTreeMap::new();
    let mut models = Vec::new();
    for (idx, &kind) in config.model.kinds.iter().enumerate() {
        let model_seed = manifest.seed_for(
            &format!("model.{}", kind.stem()),
            seed.wrapping_add(SEED_MODEL_BASE).wrapping_add(idx as u64),
        );
        let share_key = match kind {
            ModelKind::Mf | ModelKind::MfMmr | ModelKind::NonGreedyMf => "mf".to_string(),
            ModelKind::NeuMf | ModelKind::NonGreedyNeuMf => "neumf".to_string(),
            ModelKind::ListCvae | ModelKind::NonGreedyListCvae => "list".to_string(),
            ModelKind::PivotCvae(v) => format!("pivot:{}", v.as_str()),
        };
        let base = match shared.get(&share_key) {
            Some(base) => base.clone(),
            None => {
                let trained = train_one_model(
                    kind,
                    config,
                    config.model.beta,
                    personalized,
                    model_seed,
                    data,
                    bank,
                )
                .map_err(stage_err(&format!("train.{}", kind.stem())))?;
                shared.insert(share_key, trained.base.clone());
                trained.base
            }
        };
        let model = TrainedModel { kind, base };
        save_model(&model, paths).map_err(stage_err(&format!("train.{}", kind.stem())))?;
        manifest.add_output(&paths.model_params(&kind));
        manifest.add_output(&paths.model_meta(&kind));
        models.push(model);
    }
    Ok(models)
}

pub fn save_model(model: &TrainedModel, paths: &StagePaths) -> CoreResult<()> {
    let params = paths.model_params(&model.kind);
    let meta = paths.model_meta(&model.kind);
    let opt_path = paths.out.join(format!("{}.opt", model.kind.stem()));
    let optimizer = match &model.base {
        BaseModel::Ranker(r) => {
            r.save(&params, &meta)?;
            r.optimizer()
        }
        BaseModel::List(m) => {
            m.save(&params, &meta)?;
            m.optimizer()
        }
        BaseModel::Pivot(m) => {
            m.save(&params, &meta)?;
            m.optimizer()
        }
    };
    if let Some(state) = optimizer {
        slategen_core::numkit::save_optimizer(state, &opt_path)?;
    }
    Ok(())
}

pub fn load_model(kind: ModelKind, bank: &EmbeddingBank, paths: &StagePaths) -> CoreResult<TrainedModel> {
    let params = paths.model_params(&kind);
    let meta = paths.model_meta(&kind);
    let base = match kind {
        ModelKind::Mf
        | ModelKind::NeuMf
        | ModelKind::MfMmr
        | ModelKind::NonGreedyMf
        | ModelKind::NonGreedyNeuMf => BaseModel::Ranker(PointwiseRanker::load(&params, &meta)?),
        ModelKind::ListCvae | ModelKind::NonGreedyListCvae => {
            BaseModel::List(ListCvae::load(bank.clone(), &params, &meta)?)
        }
        ModelKind::PivotCvae(_) => BaseModel::Pivot(PivotCvae::load(bank.clone(), &params, &meta)?),
    };
    Ok(TrainedModel { kind, base })
}

/// Users the metrics average over: every user id seen in the dataset (or the
/// universal user when ids are absent), capped by `eval.max_users`.
pub fn eval_users(config: &RunConfig, data: &Dataset) -> Vec<Option<UserId>> {
    let mut users: Vec<UserId> = data.records.iter().filter_map(|r| r.user).collect();
    users.sort_unstable();
    users.dedup();
    if users.is_empty() {
        return vec![None];
    }
    if config.eval.max_users > 0 {
        users.truncate(config.eval.max_users);
    }
    users.into_iter().map(Some).collect()
}

pub fn policy<'a>(
    config: &RunConfig,
    model: &'a TrainedModel,
    bank: &'a EmbeddingBank,
    k: usize,
) -> Policy<'a> {
    Policy {
        model,
        bank,
        k,
        mmr_lambda: config.model.mmr_lambda,
        mmr_classic: config.model.mmr_classic,
        perturb_position: config.model.perturb_position,
    }
}

/// Evaluate every trained model and write one metrics CSV row per model.
pub fn stage_eval(
    config: &RunConfig,
    seed: u64,
    data: &DataArtifacts,
    bank: &EmbeddingBank,
    models: &[TrainedModel],
    paths: &StagePaths,
    manifest: &mut RunManifest,
) -> Result<Vec<(ModelKind, MetricsReport)>, CliError> {
    let users = eval_users(config, &data.full);
    let k = data.full.slate_size;
    let mut rows = Vec::new();
    let mut csv = String::new();
    csv.push_str(&format!("model,beta,seed,n_samples,{}\n", MetricsReport::csv_header()));
    for (idx, model) in models.iter().enumerate() {
        let eval_seed = manifest.seed_for(
            &format!("eval.{}", model.kind.stem()),
            seed.wrapping_add(SEED_EVAL_BASE).wrapping_add(idx as u64),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        let generator = policy(config, model, bank, k);
        let report = evaluate_generator(
            &generator,
            &data.env,
            bank,
            &users,
            &data.test,
            config.eval.n_samples,
            &mut rng,
        )
        .map_err(stage_err(&format!("eval.{}", model.kind.stem())))?;
        let beta = model
            .beta()
            .map(|b| b.to_string())
            .unwrap_or_else(|| "-".to_string());
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            model.kind.label(),
            beta,
            eval_seed,
            config.eval.n_samples,
            report.csv_row()
        ));
        rows.push((model.kind, report));
    }
    std::fs::write(paths.metrics(), csv)?;
    manifest.add_output(&paths.metrics());
    Ok(rows)
}

/// The full composed pipeline: data, bank, training, evaluation, manifest.
pub fn run_pipeline(
    config: &RunConfig,
    seed: u64,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let paths = StagePaths::new(out);
    let mut manifest = RunManifest::new("pipeline", seed);

    std::fs::write(paths.config_snapshot(), config.to_text())?;
    manifest.config_snapshot_path = Some(paths.config_snapshot());

    let data = stage_data(config, seed, &paths, &mut manifest)?;
    let bank = stage_bank(config, seed, &data, &paths, &mut manifest)?;
    let models = stage_train(config, seed, &data, &bank, &paths, &mut manifest)?;
    stage_eval(config, seed, &data, &bank, &models, &paths, &mut manifest)?;

    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.save(&paths.manifest("pipeline"))?;
    Ok(manifest)
}

/// Reload the data artifacts a previous `dataset`/`ingest` run left in the
/// output directory.
pub fn reload_data(paths: &StagePaths) -> Result<DataArtifacts, CliError> {
    let env = load_environment(&paths.env_params(), &paths.env_sidecar())
        .map_err(stage_err("load-env"))?;
    let full = load_dataset(&paths.dataset("full")).map_err(stage_err("load-data"))?;
    let train = load_dataset(&paths.dataset("train")).map_err(stage_err("load-data"))?;
    let val = load_dataset(&paths.dataset("val")).map_err(stage_err("load-data"))?;
    let test = load_dataset(&paths.dataset("test")).map_err(stage_err("load-data"))?;
    Ok(DataArtifacts {
        env,
        full,
        train,
        val,
        test,
    })
}
