//! The Cut Transformer.
//!
//! A query's score column is concatenated with a learnable positional
//! embedding, passed through a stack of post-norm Transformer layers,
//! projected to one logit per position and normalized with a softmax over
//! the real (non-padded) positions. The result is a distribution over cut
//! positions; inference cuts at its argmax.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of candidate positions (list length after padding).
    pub n: usize,
    /// Model dimension; one column carries the score, `d - 1` the embedding.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub seed: u64,
    /// z-score each query's scores before padding.
    pub standardize_scores: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 300,
            d: 128,
            heads: 8,
            layers: 3,
            seed: 0,
            standardize_scores: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.d < 2 {
            return Err(Error::Config(format!(
                "d must be at least 2, got {}",
                self.d
            )));
        }
        if self.heads < 1 || self.layers < 1 {
            return Err(Error::Config("heads and layers must be at least 1".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Weights of one Transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_ff: Tensor,
    pub b_ff: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

impl LayerParams {
    const NAMES: [&'static str; 9] = [
        "w_query",
        "w_key",
        "w_value",
        "w_ff",
        "b_ff",
        "norm1_gain",
        "norm1_bias",
        "norm2_gain",
        "norm2_bias",
    ];

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_query,
            &self.w_key,
            &self.w_value,
            &self.w_ff,
            &self.b_ff,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.norm2_gain,
            &self.norm2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_ff,
            &mut self.b_ff,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
        ]
    }

    /// A layer whose attention and feed-forward weights are all zero, with
    /// identity layer norms.
    pub fn zeroed(d: usize) -> Self {
        Self {
            w_query: Tensor::zeros(&[d, d]),
            w_key: Tensor::zeros(&[d, d]),
            w_value: Tensor::zeros(&[d, d]),
            w_ff: Tensor::zeros(&[d, d]),
            b_ff: Tensor::zeros(&[d]),
            norm1_gain: Tensor::full(&[d], 1.0),
            norm1_bias: Tensor::zeros(&[d]),
            norm2_gain: Tensor::full(&[d], 1.0),
            norm2_bias: Tensor::zeros(&[d]),
        }
    }
}

/// Every learnable array of the model. Also used as the container for
/// gradients and optimizer moments, which share its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `n × (d-1)` positional embedding.
    pub positional: Tensor,
    pub layers: Vec<LayerParams>,
    /// `d × 1` output projection.
    pub output: Tensor,
}

impl ModelParams {
    /// Parameter arrays in their fixed declaration order, with names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("positional".to_string(), &self.positional)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("output".to_string(), &self.output));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.positional];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.output);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn accumulate(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Checks every array against the shapes implied by `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(config);
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays for {} layers, found {}",
                expected.len(),
                config.layers,
                actual.len()
            )));
        }
        for ((name, t), shape) in actual.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn expected_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let d = config.d;
    let mut shapes = vec![vec![config.n, d - 1]];
    for _ in 0..config.layers {
        shapes.extend([
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
        ]);
    }
    shapes.push(vec![d, 1]);
    shapes
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, &[rows, cols], limit)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// Deterministic initialization from `config.seed`: Glorot-uniform weight
/// matrices, positional embedding uniform in ±0.05, zero biases, unit gains.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d;
    let positional = uniform(&mut rng, &[config.n, d - 1], 0.05);
    let layers = (0..config.layers)
        .map(|_| {
            let mut layer = LayerParams::zeroed(d);
            layer.w_query = glorot(&mut rng, d, d);
            layer.w_key = glorot(&mut rng, d, d);
            layer.w_value = glorot(&mut rng, d, d);
            layer.w_ff = glorot(&mut rng, d, d);
            layer
        })
        .collect();
    let output = glorot(&mut rng, d, 1);
    Ok(ModelParams {
        positional,
        layers,
        output,
    })
}

/// A model distribution over cut positions `1..=valid_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct CutDistribution {
    /// Length `n`; entries past `valid_len` are exactly zero.
    pub probs: Vec<f64>,
    pub valid_len: usize,
}

impl CutDistribution {
    /// Softmax over the first `valid_len` logits, zero-padded to `n`.
    pub fn from_logits(logits: &[f64], n: usize) -> Result<Self> {
        if logits.is_empty() || logits.len() > n {
            return Err(Error::InvalidArgument(format!(
                "{} logits for {n} positions",
                logits.len()
            )));
        }
        let mut probs = logits.to_vec();
        crate::tensor::softmax_in_place(&mut probs, 1.0);
        let valid_len = probs.len();
        probs.resize(n, 0.0);
        Ok(Self { probs, valid_len })
    }

    pub fn valid(&self) -> &[f64] {
        &self.probs[..self.valid_len]
    }

    /// 1-based argmax, earliest position on ties.
    pub fn argmax(&self) -> usize {
        argmax_first(self.valid()) + 1
    }
}

/// 0-based index of the maximum, smallest index on ties.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The model's score column: optionally standardized, then padded to `n`
/// with `min - 1`.
pub fn prepare_scores(scores: &[f64], config: &ModelConfig) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty score list".into()));
    }
    if scores.len() > config.n {
        return Err(Error::InvalidArgument(format!(
            "{} scores exceed the model's {} positions",
            scores.len(),
            config.n
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score at position {}", i + 1)));
    }
    let mut column = scores.to_vec();
    if config.standardize_scores {
        let m = column.len() as f64;
        let mean = column.iter().sum::<f64>() / m;
        let sd = (column.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / m).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for s in &mut column {
            *s = (*s - mean) / sd;
        }
    }
    let pad = column.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    column.resize(config.n, pad);
    Ok(column)
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub w_ff: Var,
    pub b_ff: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

impl LayerVars {
    pub fn register(tape: &mut Tape, layer: &LayerParams) -> Self {
        Self {
            w_query: tape.leaf(layer.w_query.clone()),
            w_key: tape.leaf(layer.w_key.clone()),
            w_value: tape.leaf(layer.w_value.clone()),
            w_ff: tape.leaf(layer.w_ff.clone()),
            b_ff: tape.leaf(layer.b_ff.clone()),
            norm1_gain: tape.leaf(layer.norm1_gain.clone()),
            norm1_bias: tape.leaf(layer.norm1_bias.clone()),
            norm2_gain: tape.leaf(layer.norm2_gain.clone()),
            norm2_bias: tape.leaf(layer.norm2_bias.clone()),
        }
    }

    fn vars(&self) -> [Var; 9] {
        [
            self.w_query,
            self.w_key,
            self.w_value,
            self.w_ff,
            self.b_ff,
            self.norm1_gain,
            self.norm1_bias,
            self.norm2_gain,
            self.norm2_bias,
        ]
    }
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub positional: Var,
    pub layers: Vec<LayerVars>,
    pub output: Var,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        Self {
            positional: tape.leaf(params.positional.clone()),
            layers: params
                .layers
                .iter()
                .map(|l| LayerVars::register(tape, l))
                .collect(),
            output: tape.leaf(params.output.clone()),
        }
    }

    /// Collects the gradients of every parameter into a [`ModelParams`].
    pub fn gradients(&self, grads: &mut crate::tensor::Gradients) -> ModelParams {
        let mut take = |v: Var| grads.take(v);
        let positional = take(self.positional);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let [w_query, w_key, w_value, w_ff, b_ff, norm1_gain, norm1_bias, norm2_gain, norm2_bias] =
                    l.vars().map(&mut take);
                LayerParams {
                    w_query,
                    w_key,
                    w_value,
                    w_ff,
                    b_ff,
                    norm1_gain,
                    norm1_bias,
                    norm2_gain,
                    norm2_bias,
                }
            })
            .collect();
        let output = take(self.output);
        ModelParams {
            positional,
            layers,
            output,
        }
    }
}

/// `softmax(q kᵀ · scale) v` on the tape.
/// Multi-head self-attention: head `i` uses columns `[i·d/h, (i+1)·d/h)`
/// of each full `d×d` projection. Logits are scaled by `1/√d`.
pub fn multi_head_attention_on_tape(
    tape: &mut Tape,
    x: Var,
    w_query: Var,
    w_key: Var,
    w_value: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(x).dims2("multi_head_attention")?.1;
    let q = tape.matmul(x, w_query)?;
    let k = tape.matmul(x, w_key)?;
    let v = tape.matmul(x, w_value)?;
    tape.attention(q, k, v, heads, 1.0 / (d as f64).sqrt())
}

/// `A = LN(X + MultiAttn(X))`, then `LN(A + ReLU(A·W_ff + b_ff))`.
pub fn transformer_layer_on_tape(
    tape: &mut Tape,
    x: Var,
    layer: &LayerVars,
    heads: usize,
) -> Result<Var> {
    let attn =
        multi_head_attention_on_tape(tape, x, layer.w_query, layer.w_key, layer.w_value, heads)?;
    let res1 = tape.add(x, attn)?;
    let a = tape.layer_norm_rows(res1, layer.norm1_gain, layer.norm1_bias, LAYER_NORM_EPS)?;
    let ff = tape.matmul(a, layer.w_ff)?;
    let ff = tape.add_row_bias(ff, layer.b_ff)?;
    let ff = tape.relu(ff);
    let res2 = tape.add(a, ff)?;
    tape.layer_norm_rows(res2, layer.norm2_gain, layer.norm2_bias, LAYER_NORM_EPS)
}

/// Single-head attention `softmax((XW_q)(XW_k)ᵀ/√d)(XW_v)` where `d` is the
/// column count of `x`.
pub fn attention(x: &Tensor, w_query: &Tensor, w_key: &Tensor, w_value: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let scale = 1.0 / (x.dims2("attention")?.1 as f64).sqrt();
    let wq = tape.leaf(w_query.clone());
    let wk = tape.leaf(w_key.clone());
    let wv = tape.leaf(w_value.clone());
    let q = tape.matmul(xv, wq)?;
    let k = tape.matmul(xv, wk)?;
    let v = tape.matmul(xv, wv)?;
    // Projections may have different widths here, so use the general ops.
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let weights = tape.row_softmax(logits, scale)?;
    let out = tape.matmul(weights, v)?;
    Ok(tape.value(out).clone())
}

pub fn multi_head_attention(
    x: &Tensor,
    w_query: &Tensor,
    w_key: &Tensor,
    w_value: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wq = tape.leaf(w_query.clone());
    let wk = tape.leaf(w_key.clone());
    let wv = tape.leaf(w_value.clone());
    let out = multi_head_attention_on_tape(&mut tape, xv, wq, wk, wv, heads)?;
    Ok(tape.value(out).clone())
}

pub fn transformer_layer(x: &Tensor, layer: &LayerParams, heads: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = LayerVars::register(&mut tape, layer);
    let out = transformer_layer_on_tape(&mut tape, xv, &vars, heads)?;
    Ok(tape.value(out).clone())
}

/// A recorded forward pass, kept around so the caller can attach a loss
/// and differentiate.
pub struct ForwardPass {
    pub tape: Tape,
    pub vars: ParamVars,
    /// Logits of the valid positions, `valid_len × 1`.
    pub logits: Var,
    /// Softmax over valid positions, `1 × valid_len`.
    pub probs: Var,
    pub valid_len: usize,
    pub n: usize,
}

impl ForwardPass {
    pub fn run(scores: &[f64], config: &ModelConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let column = prepare_scores(scores, config)?;
        let valid_len = scores.len();
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params);
        let s = tape.leaf(Tensor::column(column)?);
        let mut x = tape.concat_per_row(&[s, vars.positional])?;
        for layer in &vars.layers {
            x = transformer_layer_on_tape(&mut tape, x, layer, config.heads)?;
        }
        let projected = tape.project(x, vars.output)?;
        let logits = tape.slice_rows(projected, 0, valid_len)?;
        let row = tape.transpose(logits)?;
        let probs = tape.row_softmax(row, 1.0)?;
        Ok(Self {
            tape,
            vars,
            logits,
            probs,
            valid_len,
            n: config.n,
        })
    }

    pub fn logits(&self) -> &[f64] {
        self.tape.value(self.logits).data()
    }

    pub fn distribution(&self) -> CutDistribution {
        let mut probs = self.tape.value(self.probs).data().to_vec();
        probs.resize(self.n, 0.0);
        CutDistribution {
            probs,
            valid_len: self.valid_len,
        }
    }
}

/// Distribution over cut positions for one query's scores.
pub fn forward(
    scores: &[f64],
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<CutDistribution> {
    Ok(ForwardPass::run(scores, config, params)?.distribution())
}

/// Pre-softmax logits of the valid positions.
pub fn logits(scores: &[f64], config: &ModelConfig, params: &ModelParams) -> Result<Vec<f64>> {
    Ok(ForwardPass::run(scores, config, params)?.logits().to_vec())
}

/// 1-based cut position at the argmax of the model distribution.
pub fn predict_cutoff(scores: &[f64], config: &ModelConfig, params: &ModelParams) -> Result<usize> {
    Ok(forward(scores, config, params)?.argmax())
}
