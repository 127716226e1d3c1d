//! Helpers shared by the integration tests.
#![allow(dead_code)]

use choppy_core::metrics::{LabelVector, MetricKind, MetricVector};
use choppy_core::train::{example_gradient, expected_metric_loss};
use choppy_core::{
    forward, split_train_test, synth_generate, Dataset, ModelConfig, ModelParams, SynthConfig,
};

/// Gradients smaller than this are compared on an absolute scale, since a
/// relative error between two values that are both numerically zero says
/// nothing about correctness.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Loss from the forward pass alone; no tape gradients involved.
pub fn loss_at(scores: &[f64], c: &[f64], config: &ModelConfig, params: &ModelParams) -> f64 {
    let o = forward(scores, config, params).unwrap();
    let c = MetricVector {
        kind: MetricKind::F1,
        values: c.to_vec(),
    };
    expected_metric_loss(&o, &c).unwrap()
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares every analytic gradient entry with a central difference of the
/// loss using the given step.
pub fn grad_check(
    scores: &[f64],
    c: &[f64],
    config: &ModelConfig,
    params: &ModelParams,
    step: f64,
) -> GradCheck {
    let analytic = example_gradient(scores, c, config, params).unwrap().grads;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut report = GradCheck {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut probe = params.clone();
    for (t, name) in names.iter().enumerate() {
        let len = params.tensors()[t].len();
        for i in 0..len {
            let original = params.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = original + step;
            let up = loss_at(scores, c, config, &probe);
            probe.tensors_mut()[t].data_mut()[i] = original - step;
            let down = loss_at(scores, c, config, &probe);
            probe.tensors_mut()[t].data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.tensors()[t].data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.worst {
                report.worst = err;
                report.worst_at = format!("{name}[{i}]");
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report
}

/// Deterministic labels with roughly a third relevant, denser near the top.
pub fn labels(n: usize, seed: u64) -> LabelVector {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let ys = (0..n)
        .map(|i| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            let p = 0.6 * (1.0 - i as f64 / n as f64) + 0.05;
            if u < p {
                1
            } else {
                -1
            }
        })
        .collect();
    LabelVector::new(ys).unwrap()
}

/// The separable two-Gaussian task: 600 queries of 300 results with score
/// spread 0.5, split into 500 training and 100 test queries.
pub fn separable_task() -> (Dataset, Dataset) {
    let cfg = SynthConfig {
        queries: 600,
        ..SynthConfig::default()
    }
    .with_spread(0.5);
    let all = synth_generate(&cfg).unwrap();
    split_train_test(&all, 500.0 / 600.0, 0).unwrap()
}
