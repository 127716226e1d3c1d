use super::gemm::{gemm, gemm_strided, View};
use super::kernels::{lane_dot, softmax_backward_in_place, softmax_in_place};
use super::{layer_norm_forward, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    RowSoftmax {
        x: Var,
        scale: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        /// Row-stochastic `m×m` attention weights, one per head.
        weights: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse.
///
/// A tape is single-threaded; concurrent training uses one tape per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Single-column projection; recorded as a matrix product.
    pub fn project(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).project(self.value(w))?;
        Ok(self.push(out, Op::MatMul(x, w)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a length-`d` bias to every row of an `m×d` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, d) = xv.dims2("add_row_bias")?;
        let bv = self.value(bias);
        if bv.shape() != [d] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} must be [{d}]", bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        self.push(out, Op::Relu(x))
    }

    pub fn concat_per_row(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_per_row(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, width)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, count)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn row_softmax(&mut self, x: Var, scale: f64) -> Result<Var> {
        let out = self.value(x).row_softmax(scale)?;
        Ok(self.push(out, Op::RowSoftmax { x, scale }))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) =
            layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ_i w_i · x_i` against constant weights; the weights receive no gradient.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} values vs {} weights", xv.len(), weights.len()),
            ));
        }
        let s = xv.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// Multi-head scaled dot-product attention over `m×d` inputs. Head `i`
    /// reads columns `[i·d/h, (i+1)·d/h)` of `q`, `k` and `v` and writes the
    /// same columns of the output: `softmax(scale · q_i·k_iᵀ) · v_i`.
    ///
    /// Equivalent to slicing, `transpose`, `matmul`, `row_softmax` and
    /// `concat_per_row`, but without materializing the intermediates.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let (m, d) = self.value(q).dims2("attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [m, d] {
                return Err(Error::shape(
                    "attention",
                    format!(
                        "query is {m}x{d} but key/value is {:?}",
                        self.value(other).shape()
                    ),
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "d = {d} is not divisible by heads = {heads}"
            )));
        }
        let width = d / heads;
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; m * d];
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let start = h * width;
            let mut w = vec![0.0; m * m];
            gemm(
                View::columns(qv, d, start, width),
                View::columns(kv, d, start, width).t(),
                &mut w,
                false,
            );
            for row in w.chunks_mut(m) {
                softmax_in_place(row, scale);
            }
            gemm_strided(
                View::row_major(&w, m, m),
                View::columns(vv, d, start, width),
                &mut out[start..],
                d,
                false,
            );
            weights.push(w);
        }
        let out = Tensor::new(vec![m, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            },
        ))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let p = bv.cols();
                gemm(
                    View::row_major(g.data(), m, p),
                    View::transposed(bv.data(), k, p),
                    slot(grads, *a, av.shape()).data_mut(),
                    true,
                );
                gemm(
                    View::transposed(av.data(), m, k),
                    View::row_major(g.data(), m, p),
                    slot(grads, *b, bv.shape()).data_mut(),
                    true,
                );
            }
            Op::Transpose(x) => {
                let gt = g.transpose().expect("transpose of a matrix gradient");
                slot(grads, *x, gt.shape()).add_assign(&gt);
            }
            Op::Add(a, b) => {
                slot(grads, *a, g.shape()).add_assign(g);
                slot(grads, *b, g.shape()).add_assign(g);
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b)).expect("same shape");
                let gb = g.mul(self.value(*a)).expect("same shape");
                slot(grads, *a, g.shape()).add_assign(&ga);
                slot(grads, *b, g.shape()).add_assign(&gb);
            }
            Op::AddRowBias(x, bias) => {
                slot(grads, *x, g.shape()).add_assign(g);
                let d = g.cols();
                let gb = slot(grads, *bias, &[d]);
                for row in g.data().chunks(d) {
                    for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            Op::Relu(x) => {
                let out = &node.value;
                let gx = slot(grads, *x, g.shape());
                for ((acc, &gv), &o) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    if o > 0.0 {
                        *acc += gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let w = shape[1];
                    let gp = slot(grads, *p, &shape);
                    for i in 0..m {
                        let src = &g.data()[i * total + offset..i * total + offset + w];
                        for (acc, v) in gp.data_mut()[i * w..(i + 1) * w].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let n = shape[1];
                let w = g.cols();
                let gx = slot(grads, *x, &shape);
                for (i, row) in g.data().chunks(w).enumerate() {
                    let dst = &mut gx.data_mut()[i * n + start..i * n + start + w];
                    for (acc, v) in dst.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let n = shape[1];
                let gx = slot(grads, *x, &shape);
                let dst = &mut gx.data_mut()[start * n..start * n + g.len()];
                for (acc, v) in dst.iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
            Op::RowSoftmax { x, scale } => {
                let y = &node.value;
                let n = y.cols();
                let gx = slot(grads, *x, y.shape());
                for ((acc, yr), gr) in gx
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot = lane_dot(yr, gr);
                    for j in 0..n {
                        acc[j] += scale * yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let gain_v = self.value(*gain).data().to_vec();
                {
                    let gg = slot(grads, *gain, &[d]);
                    for (gr, xr) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for j in 0..d {
                            gg.data_mut()[j] += gr[j] * xr[j];
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, &[d]);
                    for gr in g.data().chunks(d) {
                        for (acc, v) in gb.data_mut().iter_mut().zip(gr) {
                            *acc += v;
                        }
                    }
                }
                let gx = slot(grads, *x, g.shape());
                let mut dxhat = vec![0.0; d];
                let df = d as f64;
                for (i, ((acc, gr), xr)) in gx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(g.data().chunks(d))
                    .zip(xhat.data().chunks(d))
                    .enumerate()
                {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gain_v[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xr[j];
                    }
                    let r = inv_std[i] / df;
                    for j in 0..d {
                        acc[j] += r * (df * dxhat[j] - sum_dxhat - xr[j] * sum_dxhat_xhat);
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let shape = self.value(*x).shape().to_vec();
                for acc in slot(grads, *x, &shape).data_mut() {
                    *acc += gv;
                }
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                let shape = self.value(*x).shape().to_vec();
                for (acc, w) in slot(grads, *x, &shape).data_mut().iter_mut().zip(weights) {
                    *acc += gv * w;
                }
            }
            Op::Scale { x, factor } => {
                let gx = slot(grads, *x, g.shape());
                for (acc, v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *acc += factor * v;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            } => {
                let (m, d) = (g.rows(), g.cols());
                let width = d / heads;
                let shape = [m, d];
                let mut dw = vec![0.0; m * m];
                for (h, w) in weights.iter().enumerate() {
                    let start = h * width;
                    let g_h = View::columns(g.data(), d, start, width);
                    let w_view = View::row_major(w, m, m);
                    // dW = G_h · V_hᵀ, then the softmax Jacobian in place.
                    gemm(
                        g_h,
                        View::columns(self.value(*v).data(), d, start, width).t(),
                        &mut dw,
                        false,
                    );
                    for (dr, wr) in dw.chunks_mut(m).zip(w.chunks(m)) {
                        softmax_backward_in_place(dr, wr, *scale);
                    }
                    let ds = View::row_major(&dw, m, m);
                    gemm_strided(
                        w_view.t(),
                        g_h,
                        &mut slot(grads, *v, &shape).data_mut()[start..],
                        d,
                        true,
                    );
                    gemm_strided(
                        ds,
                        View::columns(self.value(*k).data(), d, start, width),
                        &mut slot(grads, *q, &shape).data_mut()[start..],
                        d,
                        true,
                    );
                    gemm_strided(
                        ds.t(),
                        View::columns(self.value(*q).data(), d, start, width),
                        &mut slot(grads, *k, &shape).data_mut()[start..],
                        d,
                        true,
                    );
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradient out, substituting zeros for values the loss
    /// does not depend on.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn composed_attention(
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
    ) -> Var {
        let d = tape.value(q).cols();
        let w = d / heads;
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qi = tape.slice_cols(q, h * w, w).unwrap();
                let ki = tape.slice_cols(k, h * w, w).unwrap();
                let vi = tape.slice_cols(v, h * w, w).unwrap();
                let kt = tape.transpose(ki).unwrap();
                let s = tape.matmul(qi, kt).unwrap();
                let p = tape.row_softmax(s, scale).unwrap();
                tape.matmul(p, vi).unwrap()
            })
            .collect();
        tape.concat_per_row(&outs).unwrap()
    }

    #[test]
    fn fused_attention_matches_composed_ops() {
        let (m, d) = (5, 4);
        let fill = |seed: usize| {
            Tensor::new(
                vec![m, d],
                (0..m * d)
                    .map(|i| (((i + seed) * 37 % 23) as f64 - 11.0) * 0.13)
                    .collect(),
            )
            .unwrap()
        };
        let weights: Vec<f64> = (0..m * d)
            .map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.3)
            .collect();
        for heads in [1, 2, 4] {
            let mut results = Vec::new();
            for fused in [true, false] {
                let mut tape = Tape::new();
                let (q, k, v) = (tape.leaf(fill(1)), tape.leaf(fill(2)), tape.leaf(fill(3)));
                let out = if fused {
                    tape.attention(q, k, v, heads, 0.7).unwrap()
                } else {
                    composed_attention(&mut tape, q, k, v, heads, 0.7)
                };
                let value = tape.value(out).clone();
                let loss = tape.weighted_sum(out, &weights).unwrap();
                let mut g = tape.backward(loss).unwrap();
                results.push((value, g.take(q), g.take(k), g.take(v)));
            }
            let (a, b) = (&results[0], &results[1]);
            for (x, y) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2), (&a.3, &b.3)] {
                for (p, r) in x.data().iter().zip(y.data()) {
                    assert!((p - r).abs() < 1e-12, "heads {heads}: {p} vs {r}");
                }
            }
        }
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::zeros(&[3, 4]));
        let k = tape.leaf(Tensor::zeros(&[2, 4]));
        assert!(tape.attention(q, k, q, 2, 1.0).is_err());
        assert!(tape.attention(q, q, q, 3, 1.0).is_err());
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 9.0]]));
        let s = tape.sum(x);
        let mut g = tape.backward(s).unwrap();
        assert!(g.take(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quadratic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn unused_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = tape.leaf(Tensor::zeros(&[2, 3]));
        let s = tape.sum(x);
        let mut g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.take(y), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x·x) for square x: d/dx = G·xᵀ + xᵀ·G with G = ones
        let mut tape = Tape::new();
        let xv = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let x = tape.leaf(xv.clone());
        let p = tape.matmul(x, x).unwrap();
        let s = tape.sum(p);
        let mut g = tape.backward(s).unwrap();
        let ones = Tensor::full(&[2, 2], 1.0);
        let expected = ones
            .matmul(&xv.transpose().unwrap())
            .unwrap()
            .add(&xv.transpose().unwrap().matmul(&ones).unwrap())
            .unwrap();
        assert_eq!(g.take(x), expected);
    }
}
