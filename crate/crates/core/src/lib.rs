//! Ranked list truncation with a Cut Transformer.
//!
//! Given a query's descending relevance scores, the model predicts a
//! distribution over cut positions and is trained to maximize the expected
//! value of a chosen IR metric (F1, precision or penalized DCG) under that
//! distribution. Fixed-k, Greedy-k and Oracle policies are provided for
//! comparison, along with TREC run/qrels ingestion and a synthetic
//! score-mixture generator.

pub mod baselines;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use baselines::{
    fixed_k_eval, greedy_eval, greedy_k, model_eval, oracle_eval, render_table, EvalReport,
};
pub use data::synth::{synth_generate, SynthConfig};
pub use data::{
    build_dataset, split_train_test, BuildOptions, Dataset, Example, RankedList, Split,
};
pub use error::{Error, Result};
pub use metrics::{LabelVector, MetricKind, MetricVector};
pub use model::{forward, init_params, predict_cutoff, CutDistribution, ModelConfig, ModelParams};
pub use tensor::Tensor;
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};
