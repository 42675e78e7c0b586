//! Run configuration, loaded from a TOML file.
//!
//! Every table rejects unknown keys and [`RunConfig::validate`] runs before any
//! command touches data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embeddings::MixOp;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of n-gram blocks (N).
    pub blocks: usize,
    /// Convolution window of blocks after the first (ws).
    pub window: usize,
    /// Feature dimension of every block output (s).
    pub features: usize,
    pub pool_width: usize,
    /// Hidden width of the per-score chain in the document-aware softmax block.
    pub scorer_hidden: usize,
    /// Share n-gram and conductor parameters between query and document.
    pub tie_sides: bool,
    pub max_query_len: usize,
    pub max_doc_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 2,
            window: 3,
            features: 32,
            pool_width: 1,
            scorer_hidden: 4,
            tie_sides: true,
            max_query_len: 64,
            max_doc_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("model.blocks must be at least 1".into()));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("model.window must be odd, got {}", self.window)));
        }
        if self.pool_width.is_multiple_of(2) {
            return Err(Error::Config(format!("model.pool_width must be odd, got {}", self.pool_width)));
        }
        if self.features == 0 || self.scorer_hidden == 0 {
            return Err(Error::Config("model.features and model.scorer_hidden must be positive".into()));
        }
        if self.max_query_len == 0 || self.max_doc_len == 0 {
            return Err(Error::Config("maximum lengths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of the gradient.
    pub decoupled_weight_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub margin: f64,
    /// Compare squared distances in the triplet hinge.
    pub square_distance: bool,
    pub epochs: usize,
    /// Epochs without validation recall@1 improvement before stopping; 0 disables.
    pub patience: usize,
    /// Re-mine triplets before every optimizer step instead of once per epoch.
    pub mine_every_step: bool,
    pub bn_momentum: f64,
    /// Texts per side used to seed the batch-norm running statistics before
    /// the first epoch; 0 keeps the mean 0 / variance 1 initialization.
    pub calibration_texts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            decoupled_weight_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            margin: 0.5,
            square_distance: false,
            epochs: 10,
            patience: 0,
            mine_every_step: false,
            bn_momentum: 0.9,
            calibration_texts: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("train.margin must be > 0, got {}", self.margin)));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be > 0 and weight decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("train.bn_momentum must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Per-token, per-layer records keyed by (example id, position).
    Bundle,
    /// Token-string lookup table with a single layer.
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub kind: SourceKind,
    pub path: PathBuf,
    /// Layer weights (m).
    pub layers: Vec<f64>,
    #[serde(default)]
    pub idf: bool,
    #[serde(default = "default_mix")]
    pub mix: MixOp,
}

fn default_mix() -> MixOp {
    MixOp::Sum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub sources: Vec<SourceConfig>,
    /// Ensemble weights (u), one per source.
    pub weights: Vec<f64>,
    #[serde(default = "default_ensemble")]
    pub ensemble: MixOp,
    /// Precomputed IDF table; computed from the training documents when absent.
    #[serde(default)]
    pub idf_table: Option<PathBuf>,
}

fn default_ensemble() -> MixOp {
    MixOp::Concat
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// Benchmarks with published hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Benchmark {
    Squad,
    QuasarT,
    WikiQa,
    TrecQa,
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "squad" => Ok(Benchmark::Squad),
            "quasar-t" | "quasart" | "quasar" => Ok(Benchmark::QuasarT),
            "wikiqa" => Ok(Benchmark::WikiQa),
            "trecqa" => Ok(Benchmark::TrecQa),
            other => Err(Error::Config(format!("unknown benchmark `{other}`"))),
        }
    }
}

impl Benchmark {
    pub fn margin(self) -> f64 {
        match self {
            Benchmark::Squad => 1.0,
            Benchmark::QuasarT => 0.8,
            Benchmark::WikiQa | Benchmark::TrecQa => 0.5,
        }
    }

    pub fn blocks(self) -> usize {
        match self {
            Benchmark::Squad | Benchmark::QuasarT => 6,
            Benchmark::WikiQa | Benchmark::TrecQa => 4,
        }
    }
}

impl RunConfig {
    /// Full-scale hyperparameters published for `bench`.
    pub fn published_defaults(bench: Benchmark, embedding: EmbeddingConfig) -> Self {
        RunConfig {
            model: ModelConfig {
                blocks: bench.blocks(),
                window: 3,
                features: 1024,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-4,
                weight_decay: 1e-3,
                batch_size: 512,
                margin: bench.margin(),
                ..TrainConfig::default()
            },
            embedding,
            paths: PathsConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves relative paths against the directory holding the config file.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for s in &mut self.embedding.sources {
            fix(&mut s.path);
        }
        if let Some(p) = self.embedding.idf_table.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.dataset.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.out.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let emb = &self.embedding;
        if emb.sources.is_empty() {
            return Err(Error::Config("embedding.sources must not be empty".into()));
        }
        if emb.weights.len() != emb.sources.len() {
            return Err(Error::Config(format!(
                "embedding.weights has {} entries for {} sources",
                emb.weights.len(),
                emb.sources.len()
            )));
        }
        if emb.sources.iter().any(|s| s.layers.is_empty()) {
            return Err(Error::Config("every embedding source needs at least one layer weight".into()));
        }
        Ok(())
    }

    /// One-line summary printed at the start of a run.
    pub fn header(&self) -> String {
        format!(
            "blocks={} window={} features={} pool_width={} lr={:e} weight_decay={:e} batch={} margin={} epochs={} seed={}",
            self.model.blocks,
            self.model.window,
            self.model.features,
            self.model.pool_width,
            self.train.learning_rate,
            self.train.weight_decay,
            self.train.batch_size,
            self.train.margin,
            self.train.epochs,
            self.train.seed,
        )
    }
}
