//! Settings resolution: command-line flags override the config file, which
//! overrides built-in defaults.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use choppy_core::data::DEFAULT_TOP_N;
use choppy_core::{MetricKind, ModelConfig, SynthConfig, TrainConfig};

use crate::Failure;

/// Model keys as written in the config file. Kept optional so that `eval`
/// can tell which ones were actually set when checking a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub seed: Option<u64>,
    pub standardize_scores: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub top_n: usize,
    pub recall_from_qrels: bool,
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            recall_from_qrels: false,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// Candidate list length (model positions; also the ingestion cutoff).
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Model dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Attention heads per layer; must divide d.
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// z-score each query's scores before they enter the model.
    #[arg(long)]
    pub standardize_scores: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hold out this fraction of the training set for early stopping.
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
}

/// Model settings from defaults, then the file, then the flags.
pub fn resolve_model(file: &FileConfig, flags: &ModelFlags, seed: Option<u64>) -> ModelConfig {
    let m = &file.model;
    let base = ModelConfig::default();
    ModelConfig {
        n: flags.top_n.or(m.n).unwrap_or(base.n),
        d: flags.d.or(m.d).unwrap_or(base.d),
        heads: flags.heads.or(m.heads).unwrap_or(base.heads),
        layers: flags.layers.or(m.layers).unwrap_or(base.layers),
        seed: seed.or(m.seed).unwrap_or(base.seed),
        standardize_scores: flags.standardize_scores
            || m.standardize_scores.unwrap_or(base.standardize_scores),
    }
}

pub fn resolve_train(
    file: &FileConfig,
    flags: &TrainFlags,
    metric: Option<MetricKind>,
    seed: Option<u64>,
) -> TrainConfig {
    let mut cfg = file.train.clone();
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if flags.validation_fraction.is_some() {
        cfg.validation_fraction = flags.validation_fraction;
    }
    if let Some(v) = flags.patience {
        cfg.patience = v;
    }
    if let Some(v) = metric {
        cfg.metric = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    cfg
}

/// Names of model settings given explicitly (by flag or file) that differ
/// from `stored`, as `name: requested vs stored` descriptions.
pub fn model_mismatches(
    file: &FileConfig,
    flags: &ModelFlags,
    stored: &ModelConfig,
) -> Vec<String> {
    let m = &file.model;
    let mut out = Vec::new();
    let mut check = |name: &str, requested: Option<usize>, have: usize| {
        if let Some(r) = requested {
            if r != have {
                out.push(format!("{name}: requested {r}, checkpoint has {have}"));
            }
        }
    };
    check("n", flags.top_n.or(m.n), stored.n);
    check("d", flags.d.or(m.d), stored.d);
    check("heads", flags.heads.or(m.heads), stored.heads);
    check("layers", flags.layers.or(m.layers), stored.layers);
    let standardize = if flags.standardize_scores {
        Some(true)
    } else {
        m.standardize_scores
    };
    if let Some(s) = standardize {
        if s != stored.standardize_scores {
            out.push(format!(
                "standardize_scores: requested {s}, checkpoint has {}",
                stored.standardize_scores
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = toml::from_str(
            "[model]\nd = 64\nheads = 4\n[train]\nepochs = 7\nlearning_rate = 0.01\n",
        )
        .unwrap();
        let flags = ModelFlags {
            d: Some(32),
            ..ModelFlags::default()
        };
        let model = resolve_model(&file, &flags, Some(9));
        assert_eq!(
            (model.n, model.d, model.heads, model.layers),
            (300, 32, 4, 3)
        );
        assert_eq!(model.seed, 9);
        let train = resolve_train(
            &file,
            &TrainFlags {
                epochs: Some(2),
                ..TrainFlags::default()
            },
            None,
            None,
        );
        assert_eq!(train.epochs, 2);
        assert_eq!(train.learning_rate, 0.01);
        assert_eq!(train.batch_size, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[model]\ndim = 3\n").is_err());
        assert!(toml::from_str::<FileConfig>("[trian]\n").is_err());
    }

    #[test]
    fn mismatches_only_for_explicit_settings() {
        let stored = ModelConfig {
            d: 16,
            heads: 2,
            ..ModelConfig::default()
        };
        let file = FileConfig::default();
        assert!(model_mismatches(&file, &ModelFlags::default(), &stored).is_empty());
        let flags = ModelFlags {
            heads: Some(4),
            ..ModelFlags::default()
        };
        let found = model_mismatches(&file, &flags, &stored);
        assert_eq!(
            found,
            vec!["heads: requested 4, checkpoint has 2".to_string()]
        );
    }
}
