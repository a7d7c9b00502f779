//! Define-by-run reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the ids of its inputs, so node order is a topological order by
//! construction. [`Tape::backward`] walks the nodes once in reverse. Named
//! parameters may be bound at any number of leaves; their gradient is the sum
//! over every site where they were used.

use indexmap::IndexMap;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale(usize, f32),
    Relu(usize),
    Sigmoid(usize),
    Conv2d { x: usize, k: usize, stride: usize, padding: usize },
    Conv2dTranspose { g: usize, k: usize, stride: usize, padding: usize },
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    HalfMse { a: usize, b: usize },
    Mse { a: usize, b: usize },
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(usize, String)>,
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
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// An input leaf. Gradients reach it but it is not a named parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf bound to the parameter `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.bindings.push((v.0, name.into()));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [ar, ac] = av.dims2("matmul")?;
        let [br, bc] = bv.dims2("matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut out, false);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a: a.0, b: b.0, ta, tb },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    /// Adds `bias[c]` along the channel axis: axis 0 for rank 1, axis 1 otherwise.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (outer, channels, inner) = channel_layout(xv.shape());
        if bv.shape() != [channels] {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for (c, &b) in bv.data().iter().enumerate() {
                let start = (o * channels + c) * inner;
                out[start..start + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale(x.0, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        self.push(out, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x.0))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                stride,
                padding,
            },
        ))
    }

    pub fn conv2d_transpose(
        &mut self,
        g: Var,
        k: Var,
        stride: usize,
        padding: usize,
        target_hw: Option<(usize, usize)>,
    ) -> Result<Var> {
        let out = kernels::conv2d_transpose(self.value(g), self.value(k), stride, padding, target_hw)?;
        Ok(self.push(
            out,
            Op::Conv2dTranspose {
                g: g.0,
                k: k.0,
                stride,
                padding,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0)))
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let [rows, cols] = xv.dims2("slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::Index {
                index: start + len,
                bound: cols + 1,
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::SliceCols { x: x.0, start },
        ))
    }

    /// `½ · mean((a − b)²)` as a scalar.
    pub fn half_mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = kernels::mse(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(0.5 * m), Op::HalfMse { a: a.0, b: b.0 }))
    }

    /// `mean((a − b)²)` as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = kernels::mse(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(m), Op::Mse { a: a.0, b: b.0 }))
    }

    /// Mean softmax cross-entropy over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = kernels::logit_rows(lv, labels)?;
        let (probs, nll) = kernels::softmax_rows(lv.data(), classes, labels);
        let loss = (nll.iter().sum::<f64>() / rows as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Sign pattern (`> 0`) of every ReLU input on the tape, in node order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut shapes = IndexMap::new();
        for (idx, name) in &self.bindings {
            shapes
                .entry(name.clone())
                .or_insert_with(|| self.nodes[*idx].value.shape().to_vec());
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
            shapes,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let [ar, ac] = av.dims2("matmul")?;
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = g.shape()[1];
                let mut da = vec![0.0; m * k];
                if ta {
                    kernels::gemm(k, n, m, bv.data(), tb, g.data(), true, &mut da, false);
                } else {
                    kernels::gemm(m, n, k, g.data(), false, bv.data(), !tb, &mut da, false);
                }
                let mut db = vec![0.0; k * n];
                if tb {
                    kernels::gemm(n, m, k, g.data(), true, av.data(), ta, &mut db, false);
                } else {
                    kernels::gemm(k, m, n, av.data(), !ta, g.data(), false, &mut db, false);
                }
                accumulate(grads, a, Tensor::from_parts(av.shape().to_vec(), da));
                accumulate(grads, b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            &Op::AddBias { x, bias } => {
                let (outer, channels, inner) = channel_layout(g.shape());
                let mut db = vec![0.0f64; channels];
                for o in 0..outer {
                    for (c, acc) in db.iter_mut().enumerate() {
                        let start = (o * channels + c) * inner;
                        *acc += g.data()[start..start + inner].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                accumulate(grads, x, g.clone());
                accumulate(
                    grads,
                    bias,
                    Tensor::from_parts(vec![channels], db.into_iter().map(|v| v as f32).collect()),
                );
            }
            &Op::Scale(x, factor) => accumulate(grads, x, g.scale(factor)),
            &Op::Relu(x) => {
                let dx = val(x).zip_map(g, |v, d| if v > 0.0 { d } else { 0.0 })?;
                accumulate(grads, x, dx);
            }
            &Op::Sigmoid(x) => {
                let dx = self.nodes[i].value.zip_map(g, |s, d| kernels::flush_subnormal(d * s * (1.0 - s)))?;
                accumulate(grads, x, dx);
            }
            &Op::Conv2d { x, k, stride, padding } => {
                let (xv, kv) = (val(x), val(k));
                let (batch, chw, _) = kernels::as_batch(xv, "conv2d")?;
                let geom = ConvGeometry::forward(chw, kv.shape(), stride, padding)?;
                let dx = geom.adjoint_batch(g.data(), kv.data(), batch);
                let dk = geom.kernel_grad_batch(xv.data(), g.data(), batch);
                accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), dx));
                accumulate(grads, k, Tensor::from_parts(kv.shape().to_vec(), dk));
            }
            &Op::Conv2dTranspose { g: gin, k, stride, padding } => {
                // y = Cᵀ g  ⇒  dg = C dy,  dK = kernel_grad(input = dy, output grad = g)
                let (gv, kv) = (val(gin), val(k));
                let (batch, chw, _) = kernels::as_batch(g, "conv2d_transpose")?;
                let geom = ConvGeometry::forward(chw, kv.shape(), stride, padding)?;
                let dg = geom.forward_batch(g.data(), kv.data(), batch);
                let dk = geom.kernel_grad_batch(g.data(), gv.data(), batch);
                accumulate(grads, gin, Tensor::from_parts(gv.shape().to_vec(), dg));
                accumulate(grads, k, Tensor::from_parts(kv.shape().to_vec(), dk));
            }
            &Op::Reshape(x) => accumulate(grads, x, g.reshape(val(x).shape().to_vec())?),
            &Op::SliceCols { x, start } => {
                let xv = val(x);
                let [rows, cols] = xv.dims2("slice_cols")?;
                let len = g.shape()[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                accumulate(grads, x, Tensor::from_parts(vec![rows, cols], dx));
            }
            &Op::HalfMse { a, b } => {
                let scale = g.item() / val(a).len() as f32;
                let da = val(a).zip_map(val(b), |x, y| (x - y) * scale)?;
                accumulate(grads, b, da.scale(-1.0));
                accumulate(grads, a, da);
            }
            &Op::Mse { a, b } => {
                let scale = 2.0 * g.item() / val(a).len() as f32;
                let da = val(a).zip_map(val(b), |x, y| (x - y) * scale)?;
                accumulate(grads, b, da.scale(-1.0));
                accumulate(grads, a, da);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let lv = val(*logits);
                let classes = *lv.shape().last().unwrap_or(&1);
                let scale = g.item() / labels.len() as f32;
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * classes + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
        }
        Ok(())
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [] => (1, 1, 1),
        [c] => (1, *c, 1),
        [n, c, rest @ ..] => (*n, *c, rest.iter().product()),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, t: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(t.data())
            .for_each(|(e, &v)| *e += v),
        slot @ None => *slot = Some(t),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(usize, String)>,
    shapes: IndexMap<String, Vec<usize>>,
}

impl Gradients {
    /// Gradient at a node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Total gradient of a named parameter: the sum over all its bound
    /// sites, or zeros if the loss does not depend on it.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let shape = self.shapes.get(name)?;
        let mut total = Tensor::zeros(shape.clone());
        for (idx, _) in self.bindings.iter().filter(|(_, n)| n == name) {
            if let Some(g) = &self.grads[*idx] {
                total
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(t, &v)| *t += v);
            }
        }
        Some(total)
    }

    /// Every bound parameter's total gradient, in first-binding order.
    pub fn params(&self) -> IndexMap<String, Tensor> {
        self.shapes
            .keys()
            .map(|name| (name.clone(), self.param(name).expect("bound name")))
            .collect()
    }
}
