//! Flat key=value run configuration with `[sim] [data] [model] [train]
//! [eval] [sweep]` sections. Unknown keys are config errors so typos cannot
//! silently fall back to defaults.

use slategen_core::models::PivotVariant;
use slategen_core::simenv::EnvKind;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct SimSection {
    pub kind: EnvKind,
    pub n_items: usize,
    pub n_users: usize,
    pub emb_dim: usize,
    pub rho: f64,
    pub pos_weight: f64,
    pub pos_noise_std: f64,
    pub pos_offsets: Vec<f64>,
    pub vec_std: f64,
    pub bias_std: f64,
    pub global_bias: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            kind: EnvKind::UrmPMr,
            n_items: 3000,
            n_users: 1000,
            emb_dim: 8,
            rho: 0.5,
            pos_weight: 1.0,
            pos_noise_std: 0.2f64.sqrt(),
            pos_offsets: vec![0.2, 0.1, 0.0, -0.1, -0.2],
            vec_std: 1.0,
            bias_std: 0.1,
            global_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub n_slates: usize,
    pub fractions: (f64, f64, f64),
    pub positive_threshold: u8,
    pub distinct_slate_items: bool,
    /// Ratings log to ingest instead of simulating.
    pub ingest: Option<String>,
    pub slate_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_slates: 100_000,
            fractions: (0.8, 0.1, 0.1),
            positive_threshold: 4,
            distinct_slate_items: true,
            ingest: None,
            slate_size: 5,
        }
    }
}

/// Which recommenders a run trains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mf,
    NeuMf,
    MfMmr,
    NonGreedyMf,
    NonGreedyNeuMf,
    ListCvae,
    NonGreedyListCvae,
    PivotCvae(PivotVariant),
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "mf" => ModelKind::Mf,
            "neumf" => ModelKind::NeuMf,
            "mf-mmr" => ModelKind::MfMmr,
            "ng-mf" => ModelKind::NonGreedyMf,
            "ng-neumf" => ModelKind::NonGreedyNeuMf,
            "list-cvae" => ModelKind::ListCvae,
            "ng-list-cvae" => ModelKind::NonGreedyListCvae,
            other => {
                if let Some(variant) = other.strip_prefix("pivot-cvae:") {
                    ModelKind::PivotCvae(
                        PivotVariant::parse(variant)
                            .map_err(|e| CliError::Config(e.to_string()))?,
                    )
                } else if other == "pivot-cvae" {
                    ModelKind::PivotCvae(PivotVariant::GtSpi)
                } else {
                    return Err(CliError::Config(format!("unknown model kind {other:?}")));
                }
            }
        })
    }

    pub fn label(&self) -> String {
        match self {
            ModelKind::Mf => "MF".into(),
            ModelKind::NeuMf => "NeuMF".into(),
            ModelKind::MfMmr => "MF-MMR".into(),
            ModelKind::NonGreedyMf => "NonGreedy-MF".into(),
            ModelKind::NonGreedyNeuMf => "NonGreedy-NeuMF".into(),
            ModelKind::ListCvae => "List-CVAE".into(),
            ModelKind::NonGreedyListCvae => "NonGreedy-List-CVAE".into(),
            ModelKind::PivotCvae(v) => format!("Pivot-CVAE-{}", v.as_str()),
        }
    }

    /// File stem for checkpoints.
    pub fn stem(&self) -> String {
        self.label().to_lowercase().replace(['-', ' '], "_")
    }

    /// CVAE-family kinds have latent codes and reconstruction paths.
    pub fn is_cvae(&self) -> bool {
        matches!(
            self,
            ModelKind::ListCvae | ModelKind::NonGreedyListCvae | ModelKind::PivotCvae(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub kinds: Vec<ModelKind>,
    pub beta: f64,
    pub latent_dim: usize,
    pub hidden: usize,
    pub negatives: usize,
    pub personalized: bool,
    pub mmr_lambda: f64,
    pub mmr_classic: bool,
    /// Slot perturbed by the non-greedy wrappers.
    pub perturb_position: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kinds: vec![ModelKind::ListCvae],
            beta: 1.0,
            latent_dim: 16,
            hidden: 256,
            negatives: 100,
            personalized: true,
            mmr_lambda: 0.5,
            mmr_classic: false,
            perturb_position: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub cvae_lr: f64,
    pub ranker_lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Hard epoch cap; CVAE runs usually stop earlier on ENC convergence.
    pub epochs: usize,
    pub ranker_patience: usize,
    /// `explicit` exports the simulator embeddings; `pretrained` runs the
    /// biased-MF extractor. Ingested data always pretrains.
    pub embeddings: EmbeddingSource,
    pub pretrain_epochs: usize,
    pub response_epochs: usize,
    /// Stop CVAE training once validation ENC stops improving: the
    /// `converge_window`-epoch moving average must improve by at least
    /// `converge_min_improve` (relative) or the run goes stale; after
    /// `converge_patience` stale windows training stops.
    pub early_stop: bool,
    pub converge_window: usize,
    pub converge_patience: usize,
    pub converge_min_improve: f64,
    /// Slates per user for the per-epoch ENC probe.
    pub converge_probe_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Explicit,
    Pretrained,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            cvae_lr: 1e-4,
            ranker_lr: 3e-4,
            weight_decay: 1e-4,
            batch: 64,
            epochs: 150,
            ranker_patience: 3,
            embeddings: EmbeddingSource::Explicit,
            pretrain_epochs: 15,
            response_epochs: 20,
            early_stop: true,
            converge_window: 5,
            converge_patience: 3,
            converge_min_improve: 0.005,
            converge_probe_samples: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// N sampled slates per user for the stochastic metrics.
    pub n_samples: usize,
    /// Evaluate at most this many users (0 = all).
    pub max_users: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_samples: 500,
            max_users: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub betas: Vec<f64>,
    pub replicates: usize,
    pub model: ModelKind,
    /// Dump latent encodings for replicate 0 of each beta.
    pub dump_z: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            betas: default_beta_grid(),
            replicates: 5,
            model: ModelKind::ListCvae,
            dump_z: true,
        }
    }
}

/// 13 points log-uniform over [1e-5, 30] plus a 5-point fine grid over
/// [1e-3, 1e-2].
pub fn default_beta_grid() -> Vec<f64> {
    let mut betas = log_grid(1e-5, 30.0, 13);
    betas.extend(log_grid(1e-3, 1e-2, 5));
    betas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    betas.dedup();
    betas
}

pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2 && lo > 0.0 && hi > lo);
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (ln_lo + (ln_hi - ln_lo) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub sim: SimSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["sim", "data", "model", "train", "eval", "sweep"].contains(&section.as_str())
                {
                    return Err(CliError::Config(format!(
                        "line {}: unknown section [{section}]",
                        idx + 1
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key=value, got {line:?}", idx + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            config
                .apply(&section, key, value)
                .map_err(|e| CliError::Config(format!("line {}: {e}", idx + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        match (section, key) {
            ("sim", "kind") => {
                self.sim.kind = EnvKind::parse(value).map_err(|e| e.to_string())?
            }
            ("sim", "n_items") => self.sim.n_items = num(key, value)?,
            ("sim", "n_users") => self.sim.n_users = num(key, value)?,
            ("sim", "emb_dim") => self.sim.emb_dim = num(key, value)?,
            ("sim", "rho") => self.sim.rho = num(key, value)?,
            ("sim", "pos_weight") => self.sim.pos_weight = num(key, value)?,
            ("sim", "pos_noise_std") => self.sim.pos_noise_std = num(key, value)?,
            ("sim", "pos_offsets") => {
                self.sim.pos_offsets = value
                    .split(',')
                    .map(|v| num("pos_offsets", v.trim()))
                    .collect::<Result<_, _>>()?
            }
            ("sim", "vec_std") => self.sim.vec_std = num(key, value)?,
            ("sim", "bias_std") => self.sim.bias_std = num(key, value)?,
            ("sim", "global_bias") => self.sim.global_bias = num(key, value)?,
            ("data", "n_slates") => self.data.n_slates = num(key, value)?,
            ("data", "fractions") => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|v| num("fractions", v.trim()))
                    .collect::<Result<_, _>>()?;
                if parts.len() != 3 {
                    return Err("fractions needs exactly three values".into());
                }
                self.data.fractions = (parts[0], parts[1], parts[2]);
            }
            ("data", "positive_threshold") => self.data.positive_threshold = num(key, value)?,
            ("data", "distinct_slate_items") => {
                self.data.distinct_slate_items = num(key, value)?
            }
            ("data", "ingest") => self.data.ingest = Some(value.to_string()),
            ("data", "slate_size") => self.data.slate_size = num(key, value)?,
            ("model", "kinds") => {
                self.model.kinds = value
                    .split(',')
                    .map(|v| ModelKind::parse(v.trim()).map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?
            }
            ("model", "beta") => self.model.beta = num(key, value)?,
            ("model", "latent_dim") => self.model.latent_dim = num(key, value)?,
            ("model", "hidden") => self.model.hidden = num(key, value)?,
            ("model", "negatives") => self.model.negatives = num(key, value)?,
            ("model", "personalized") => self.model.personalized = num(key, value)?,
            ("model", "mmr_lambda") => self.model.mmr_lambda = num(key, value)?,
            ("model", "mmr_classic") => self.model.mmr_classic = num(key, value)?,
            ("model", "perturb_position") => self.model.perturb_position = num(key, value)?,
            ("train", "cvae_lr") => self.train.cvae_lr = num(key, value)?,
            ("train", "ranker_lr") => self.train.ranker_lr = num(key, value)?,
            ("train", "weight_decay") => self.train.weight_decay = num(key, value)?,
            ("train", "batch") => self.train.batch = num(key, value)?,
            ("train", "epochs") => self.train.epochs = num(key, value)?,
            ("train", "ranker_patience") => self.train.ranker_patience = num(key, value)?,
            ("train", "embeddings") => {
                self.train.embeddings = match value {
                    "explicit" => EmbeddingSource::Explicit,
                    "pretrained" => EmbeddingSource::Pretrained,
                    other => return Err(format!("unknown embeddings source {other:?}")),
                }
            }
            ("train", "pretrain_epochs") => self.train.pretrain_epochs = num(key, value)?,
            ("train", "response_epochs") => self.train.response_epochs = num(key, value)?,
            ("train", "early_stop") => self.train.early_stop = num(key, value)?,
            ("train", "converge_window") => self.train.converge_window = num(key, value)?,
            ("train", "converge_patience") => self.train.converge_patience = num(key, value)?,
            ("train", "converge_min_improve") => {
                self.train.converge_min_improve = num(key, value)?
            }
            ("train", "converge_probe_samples") => {
                self.train.converge_probe_samples = num(key, value)?
            }
            ("eval", "n_samples") => self.eval.n_samples = num(key, value)?,
            ("eval", "max_users") => self.eval.max_users = num(key, value)?,
            ("sweep", "betas") => {
                self.sweep.betas = value
                    .split(',')
                    .map(|v| num("betas", v.trim()))
                    .collect::<Result<_, _>>()?
            }
            ("sweep", "replicates") => self.sweep.replicates = num(key, value)?,
            ("sweep", "model") => {
                self.sweep.model = ModelKind::parse(value).map_err(|e| e.to_string())?
            }
            ("sweep", "dump_z") => self.sweep.dump_z = num(key, value)?,
            ("", key) => return Err(format!("key {key:?} appears before any section")),
            (section, key) => return Err(format!("unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let (f1, f2, f3) = self.data.fractions;
        if (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
            return Err(CliError::Config("fractions must sum to 1".into()));
        }
        if self.sweep.betas.iter().any(|b| *b <= 0.0) {
            return Err(CliError::Config("sweep betas must be positive".into()));
        }
        if self.model.kinds.is_empty() {
            return Err(CliError::Config("model kinds must not be empty".into()));
        }
        if self.model.perturb_position >= self.data.slate_size {
            return Err(CliError::Config(format!(
                "perturb_position {} outside slate of size {}",
                self.model.perturb_position, self.data.slate_size
            )));
        }
        if self.data.slate_size != self.sim.pos_offsets.len() && self.data.ingest.is_none() {
            return Err(CliError::Config(format!(
                "slate_size {} does not match the {} positional offsets",
                self.data.slate_size,
                self.sim.pos_offsets.len()
            )));
        }
        Ok(())
    }

    /// Resolved snapshot written next to the run outputs.
    pub fn to_text(&self) -> String {
        let kinds: Vec<String> = self
            .model
            .kinds
            .iter()
            .map(|k| kind_key(k))
            .collect();
        let offsets: Vec<String> = self.sim.pos_offsets.iter().map(|v| v.to_string()).collect();
        let betas: Vec<String> = self.sweep.betas.iter().map(|v| v.to_string()).collect();
        format!(
            "[sim]\nkind={}\nn_items={}\nn_users={}\nemb_dim={}\nrho={}\npos_weight={}\n\
             pos_noise_std={}\npos_offsets={}\nvec_std={}\nbias_std={}\nglobal_bias={}\n\
             \n[data]\nn_slates={}\nfractions={},{},{}\npositive_threshold={}\n\
             distinct_slate_items={}\n{}slate_size={}\n\
             \n[model]\nkinds={}\nbeta={}\nlatent_dim={}\nhidden={}\nnegatives={}\n\
             personalized={}\nmmr_lambda={}\nmmr_classic={}\nperturb_position={}\n\
             \n[train]\ncvae_lr={}\nranker_lr={}\nweight_decay={}\nbatch={}\nepochs={}\n\
             ranker_patience={}\nembeddings={}\npretrain_epochs={}\nresponse_epochs={}\n\
             early_stop={}\nconverge_window={}\nconverge_patience={}\nconverge_min_improve={}\n\
             converge_probe_samples={}\n\
             \n[eval]\nn_samples={}\nmax_users={}\n\
             \n[sweep]\nbetas={}\nreplicates={}\nmodel={}\ndump_z={}\n",
            self.sim.kind.as_str(),
            self.sim.n_items,
            self.sim.n_users,
            self.sim.emb_dim,
            self.sim.rho,
            self.sim.pos_weight,
            self.sim.pos_noise_std,
            offsets.join(","),
            self.sim.vec_std,
            self.sim.bias_std,
            self.sim.global_bias,
            self.data.n_slates,
            self.data.fractions.0,
            self.data.fractions.1,
            self.data.fractions.2,
            self.data.positive_threshold,
            self.data.distinct_slate_items,
            self.data
                .ingest
                .as_ref()
                .map(|p| format!("ingest={p}\n"))
                .unwrap_or_default(),
            self.data.slate_size,
            kinds.join(","),
            self.model.beta,
            self.model.latent_dim,
            self.model.hidden,
            self.model.negatives,
            self.model.personalized,
            self.model.mmr_lambda,
            self.model.mmr_classic,
            self.model.perturb_position,
            self.train.cvae_lr,
            self.train.ranker_lr,
            self.train.weight_decay,
            self.train.batch,
            self.train.epochs,
            self.train.ranker_patience,
            match self.train.embeddings {
                EmbeddingSource::Explicit => "explicit",
                EmbeddingSource::Pretrained => "pretrained",
            },
            self.train.pretrain_epochs,
            self.train.response_epochs,
            self.train.early_stop,
            self.train.converge_window,
            self.train.converge_patience,
            self.train.converge_min_improve,
            self.train.converge_probe_samples,
            self.eval.n_samples,
            self.eval.max_users,
            betas.join(","),
            self.sweep.replicates,
            kind_key(&self.sweep.model),
            self.sweep.dump_z,
        )
    }
}

fn kind_key(kind: &ModelKind) -> String {
    match kind {
        ModelKind::Mf => "mf".into(),
        ModelKind::NeuMf => "neumf".into(),
        ModelKind::MfMmr => "mf-mmr".into(),
        ModelKind::NonGreedyMf => "ng-mf".into(),
        ModelKind::NonGreedyNeuMf => "ng-neumf".into(),
        ModelKind::ListCvae => "list-cvae".into(),
        ModelKind::NonGreedyListCvae => "ng-list-cvae".into(),
        ModelKind::PivotCvae(v) => format!("pivot-cvae:{}", v.as_str()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let text = "
[sim]
n_items = 300
n_users = 100
rho = 0.5

[model]
kinds = list-cvae, pivot-cvae:GT-SPI
beta = 0.01

[sweep]
betas = 0.0001, 0.01, 1.0
replicates = 3
";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.sim.n_items, 300);
        assert_eq!(config.sim.n_users, 100);
        assert_eq!(config.model.kinds.len(), 2);
        assert_eq!(
            config.model.kinds[1],
            ModelKind::PivotCvae(PivotVariant::GtSpi)
        );
        assert_eq!(config.sweep.betas, vec![1e-4, 1e-2, 1.0]);
        // untouched keys keep defaults
        assert_eq!(config.train.cvae_lr, 1e-4);
        assert_eq!(config.eval.n_samples, 500);
    }

    #[test]
    fn unknown_keys_and_sections_are_config_errors() {
        assert!(RunConfig::parse("[sim]\nbogus = 3\n").is_err());
        assert!(RunConfig::parse("[nope]\nn_items = 3\n").is_err());
        assert!(RunConfig::parse("n_items = 3\n").is_err());
    }

    #[test]
    fn snapshot_roundtrips() {
        let mut config = RunConfig::default();
        config.sim.n_items = 123;
        config.model.kinds = vec![ModelKind::Mf, ModelKind::PivotCvae(PivotVariant::SgtPi)];
        config.sweep.betas = vec![0.5, 2.0];
        let text = config.to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn default_grid_spans_the_search_space() {
        let grid = default_beta_grid();
        assert!((grid.first().unwrap() - 1e-5).abs() < 1e-12);
        assert!((grid.last().unwrap() - 30.0).abs() < 1e-9);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
        // fine region is present
        assert!(grid.iter().filter(|b| (1e-3..=1e-2).contains(*b)).count() >= 5);
    }
}
