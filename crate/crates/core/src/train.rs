//! Expected-metric loss, Adam, and the mini-batch training loop.
//!
//! The loss for one query is `-Σ_i o_i C_i`: the negative expected metric
//! when the cut position is drawn from the model distribution `o`. The
//! metric vector `C` is a constant per example, so F1, precision and DCG
//! training share one code path and differ only in the `C` they pass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::model_eval;
use crate::data::{split_train_test, Dataset, Example};
use crate::error::{Error, Result};
use crate::metrics::{MetricKind, MetricVector};
use crate::model::{init_params, CutDistribution, ForwardPass, ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds the per-epoch shuffle and the validation hold-out.
    pub seed: u64,
    pub metric: MetricKind,
    /// Hold out this fraction of the training queries for early stopping.
    pub validation_fraction: Option<f64>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            metric: MetricKind::F1,
            validation_fraction: None,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if let Some(f) = self.validation_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "validation fraction must lie in (0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// `-Σ o_i C_i` over the valid positions.
pub fn expected_metric_loss(o: &CutDistribution, c: &MetricVector) -> Result<f64> {
    if o.valid_len != c.len() {
        return Err(Error::InvalidArgument(format!(
            "distribution covers {} positions but metric vector has {}",
            o.valid_len,
            c.len()
        )));
    }
    Ok(-o
        .valid()
        .iter()
        .zip(&c.values)
        .map(|(p, v)| p * v)
        .sum::<f64>())
}

/// Records the loss on `tape` given the recorded distribution `probs`.
pub fn expected_metric_loss_on_tape(tape: &mut Tape, probs: Var, c: &[f64]) -> Result<Var> {
    let negated: Vec<f64> = c.iter().map(|v| -v).collect();
    tape.weighted_sum(probs, &negated)
}

/// Anything Adam can update: a fixed, ordered list of named arrays.
pub trait ParamSet: Clone {
    fn param_names(&self) -> Vec<String>;
    fn param_tensors(&self) -> Vec<&Tensor>;
    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl ParamSet for ModelParams {
    fn param_names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        self.tensors()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut()
    }
}

impl ParamSet for Tensor {
    fn param_names(&self) -> Vec<String> {
        vec!["param".into()]
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        vec![self]
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![self]
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<P: ParamSet> {
    pub first: P,
    pub second: P,
    pub t: u64,
}

impl<P: ParamSet> AdamState<P> {
    pub fn new(like: &P) -> Self {
        let mut zero = like.clone();
        for t in zero.param_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Self {
            first: zero.clone(),
            second: zero,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    cfg: &TrainConfig,
) -> Result<()> {
    let names = grads.param_names();
    for (name, g) in names.iter().zip(grads.param_tensors()) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.adam_eps);
    for (((p, g), m), v) in params
        .param_tensors_mut()
        .into_iter()
        .zip(grads.param_tensors())
        .zip(state.first.param_tensors_mut())
        .zip(state.second.param_tensors_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss, metric at the predicted cut, and parameter gradients for one query.
#[derive(Debug, Clone)]
pub struct ExampleGradient {
    pub loss: f64,
    pub metric_at_argmax: f64,
    pub grads: ModelParams,
}

pub fn example_gradient(
    scores: &[f64],
    c: &[f64],
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<ExampleGradient> {
    if c.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} metric values",
            scores.len(),
            c.len()
        )));
    }
    let mut pass = ForwardPass::run(scores, config, params)?;
    let k = pass.distribution().argmax();
    let loss_var = expected_metric_loss_on_tape(&mut pass.tape, pass.probs, c)?;
    let loss = pass.tape.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite("expected-metric loss".into()));
    }
    let mut grads = pass.tape.backward(loss_var)?;
    Ok(ExampleGradient {
        loss,
        metric_at_argmax: c[k - 1],
        grads: pass.vars.gradients(&mut grads),
    })
}

/// Mean loss, mean metric at argmax, and mean gradient over a batch.
/// Per-example work runs in parallel; the reduction is sequential in batch
/// order so results do not depend on thread count.
pub fn batch_gradient(
    batch: &[(&[f64], &[f64])],
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<(f64, f64, ModelParams)> {
    let results: Vec<ExampleGradient> = batch
        .par_iter()
        .map(|(scores, c)| example_gradient(scores, c, config, params))
        .collect::<Result<_>>()?;
    let mut iter = results.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (mut loss, mut metric, mut grads) = (first.loss, first.metric_at_argmax, first.grads);
    for r in iter {
        loss += r.loss;
        metric += r.metric_at_argmax;
        grads.accumulate(&r.grads);
    }
    let n = batch.len() as f64;
    grads.scale_in_place(1.0 / n);
    Ok((loss / n, metric / n, grads))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example loss over the epoch's batches.
    pub loss: f64,
    /// Mean metric at the argmax cut, measured on each batch before its update.
    pub train_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

pub fn train(dataset: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_callback(dataset, model, cfg, |_| {})
}

/// Trains from `init_params(model)`; `on_epoch` sees each log record as it
/// is produced.
pub fn train_with_callback(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model.validate()?;
    let params = init_params(model)?;
    train_from(params, dataset, model, cfg, on_epoch)
}

/// Trains starting from the given parameters.
pub fn train_from(
    mut params: ModelParams,
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    params.check_shapes(model)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if let Some(e) = dataset.examples.iter().find(|e| e.list.len() > model.n) {
        return Err(Error::Config(format!(
            "query {} has {} results but the model has {} positions",
            e.query_id(),
            e.list.len(),
            model.n
        )));
    }

    let (fit, validation) = match cfg.validation_fraction {
        Some(f) if dataset.len() >= 2 => {
            let (train, held) = split_train_test(dataset, 1.0 - f, cfg.seed)?;
            (train, Some(held))
        }
        _ => (dataset.clone(), None),
    };
    let examples: Vec<&Example> = fit.examples.iter().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut metric_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .map(|&i| {
                    let e = examples[i];
                    (
                        e.list.scores.as_slice(),
                        e.metric(cfg.metric).values.as_slice(),
                    )
                })
                .collect();
            let (loss, metric, grads) = batch_gradient(&batch, model, &params)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += loss * chunk.len() as f64;
            metric_sum += metric * chunk.len() as f64;
            adam_step(&mut params, &grads, &mut adam, cfg)?;
        }
        let validation_metric = match &validation {
            Some(v) => Some(model_eval(v, model, &params, cfg.metric)?.mean),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / examples.len() as f64,
            train_metric: metric_sum / examples.len() as f64,
            validation_metric,
        };
        on_epoch(&record);
        log.push(record);

        if let Some(vm) = validation_metric {
            if best.as_ref().is_none_or(|(b, _)| vm > *b) {
                best = Some((vm, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};

    fn dist(p: &[f64]) -> CutDistribution {
        CutDistribution {
            probs: p.to_vec(),
            valid_len: p.len(),
        }
    }

    fn mv(c: &[f64]) -> MetricVector {
        MetricVector {
            kind: MetricKind::F1,
            values: c.to_vec(),
        }
    }

    #[test]
    fn loss_examples() {
        let l = expected_metric_loss(&dist(&[0.25, 0.25, 0.5]), &mv(&[0.0, 1.0, 0.5])).unwrap();
        assert!((l + 0.5).abs() < 1e-15);
        let c = [0.3, -0.7, 0.9, 0.1];
        for i in 0..4 {
            let mut p = [0.0; 4];
            p[i] = 1.0;
            assert_eq!(expected_metric_loss(&dist(&p), &mv(&c)).unwrap(), -c[i]);
        }
        assert!(expected_metric_loss(&dist(&[1.0]), &mv(&[1.0, 2.0])).is_err());
    }

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut p = Tensor::scalar(0.5);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg()).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_direction_and_zero_gradient() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&p);
        for _ in 0..50 {
            adam_step(&mut p, &Tensor::scalar(-3.0), &mut st, &cfg()).unwrap();
        }
        assert!(p.data()[0] > 0.0);

        let mut q = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut st = AdamState::new(&q);
        adam_step(&mut q, &Tensor::zeros(&[2]), &mut st, &cfg()).unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_rejects_non_finite_with_name() {
        let model = ModelConfig {
            n: 4,
            d: 4,
            heads: 2,
            layers: 1,
            ..Default::default()
        };
        let mut params = init_params(&model).unwrap();
        let mut grads = params.zeros_like();
        grads.layers[0].w_key.data_mut()[3] = f64::NAN;
        let before = params.clone();
        let mut st = AdamState::new(&params);
        let err = adam_step(&mut params, &grads, &mut st, &cfg()).unwrap_err();
        assert!(err.to_string().contains("layer0.w_key"), "{err}");
        assert_eq!(params, before);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { epochs: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig {
            validation_fraction: Some(1.5),
            ..cfg()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn identical_c_vectors_give_identical_updates() {
        let model = ModelConfig {
            n: 12,
            d: 4,
            heads: 2,
            layers: 1,
            ..Default::default()
        };
        let params = init_params(&model).unwrap();
        let scores: Vec<f64> = (0..10).map(|i| 3.0 - 0.3 * i as f64).collect();
        let c: Vec<f64> = (0..10).map(|i| ((i * 7) % 5) as f64 / 4.0).collect();
        // Same C but presented as a DCG and as an F1 vector.
        let as_dcg = MetricVector {
            kind: MetricKind::Dcg,
            values: c.clone(),
        };
        let as_f1 = MetricVector {
            kind: MetricKind::F1,
            values: c,
        };
        let a = example_gradient(&scores, &as_dcg.values, &model, &params).unwrap();
        let b = example_gradient(&scores, &as_f1.values, &model, &params).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn training_is_reproducible_and_logs_every_epoch() {
        let data = synth_generate(&SynthConfig {
            queries: 12,
            list_len: 10,
            min_relevant: 1,
            max_relevant: 5,
            ..Default::default()
        })
        .unwrap();
        let model = ModelConfig {
            n: 10,
            d: 4,
            heads: 2,
            layers: 1,
            ..Default::default()
        };
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 5,
            ..cfg()
        };
        let a = train(&data, &model, &tc).unwrap();
        let b = train(&data, &model, &tc).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 3);
        assert!(a.log.iter().all(|r| r.validation_metric.is_none()));

        let with_val = TrainConfig {
            validation_fraction: Some(0.25),
            patience: 1,
            epochs: 4,
            ..tc
        };
        let v = train(&data, &model, &with_val).unwrap();
        assert!(v.log.iter().all(|r| r.validation_metric.is_some()));

        let too_short = ModelConfig { n: 8, ..model };
        assert!(train(&data, &too_short, &TrainConfig { epochs: 1, ..cfg() }).is_err());
    }
}
