//! Self-contained synthetic workspace: dataset, embedding bundle and config.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mrnn_core::config::{EmbeddingConfig, ModelConfig, PathsConfig, RunConfig, SourceConfig, SourceKind, TrainConfig};
use mrnn_core::dataset::{synthetic_dataset, Dataset, SyntheticDataSpec};
use mrnn_core::embeddings::{synthetic_bundle, Bundle, MixOp, SyntheticSpec};

/// Everything needed to regenerate a synthetic run.
#[derive(Clone, Debug)]
pub struct SynthSettings {
    pub data: SyntheticDataSpec,
    pub embedding: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for SynthSettings {
    /// Desk-scale retrieval task: 200/50/50 queries, a 3-token key phrase,
    /// 7 distractors, 32-dim synthetic vectors; N=2, s=32, batch 32, lr 1e-3.
    fn default() -> Self {
        SynthSettings {
            data: SyntheticDataSpec::default(),
            embedding: SyntheticSpec {
                layers: 1,
                dim: 32,
                seed: 1,
                context_noise: 0.1,
            },
            model: ModelConfig {
                blocks: 2,
                window: 3,
                features: 32,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                // Distances at this width sit in the tens; a small margin is
                // satisfied within an epoch and the loss stalls at zero.
                margin: 10.0,
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

pub fn build(settings: &SynthSettings) -> Result<(Dataset, Bundle)> {
    let data = synthetic_dataset(&settings.data)?;
    let texts = data.texts();
    let bundle = synthetic_bundle(&settings.embedding, texts.iter().map(|(k, t)| (k.as_str(), *t)))?;
    Ok((data, bundle))
}

pub fn embedding_config(bundle_dir: PathBuf, layers: usize) -> EmbeddingConfig {
    EmbeddingConfig {
        sources: vec![SourceConfig {
            kind: SourceKind::Bundle,
            path: bundle_dir,
            layers: vec![1.0 / layers as f64; layers],
            idf: false,
            mix: MixOp::Sum,
        }],
        weights: vec![1.0],
        ensemble: MixOp::Concat,
        idf_table: None,
    }
}

/// Writes `dataset.jsonl`, `bundle/` and `config.toml` (paths relative to `dir`).
pub fn write(dir: &Path, settings: &SynthSettings) -> Result<RunConfig> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (data, bundle) = build(settings)?;
    data.save(&dir.join("dataset.jsonl"))?;
    bundle.save(&dir.join("bundle"))?;
    let config = RunConfig {
        model: settings.model.clone(),
        train: settings.train.clone(),
        embedding: embedding_config(PathBuf::from("bundle"), settings.embedding.layers),
        paths: PathsConfig {
            dataset: Some(PathBuf::from("dataset.jsonl")),
            out: Some(PathBuf::from("run")),
        },
    };
    config.validate()?;
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    Ok(config)
}
