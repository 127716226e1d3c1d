//! Inputs shared by the benchmarks in `benches/`.

use choppy_core::metrics::LabelVector;
use choppy_core::{synth_generate, SynthConfig};

/// One synthetic query: descending scores and their labels.
pub fn query(len: usize, seed: u64) -> (Vec<f64>, LabelVector) {
    let data = synth_generate(&SynthConfig {
        queries: 1,
        list_len: len,
        seed,
        ..SynthConfig::default()
    })
    .expect("synthetic query");
    let example = data.examples.into_iter().next().expect("one query");
    (example.list.scores, example.list.labels)
}
