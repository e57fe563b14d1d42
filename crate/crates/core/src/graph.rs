//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records forward operations as nodes; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! transitively feeds the loss. Losses built from several terms can share
//! leaves, so gradient routing (e.g. a term that must only reach the
//! prediction head) is expressed by inserting detached constants instead of
//! differentiable nodes.
//!
//! Every forward op validates shapes and rejects non-finite outputs rather
//! than letting NaNs propagate silently.

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Association between a named parameter and its leaf on a graph, kept so
/// gradients can be harvested back into the owning [`ParameterSet`] after a
/// backward pass.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    pub name: String,
    pub var: Var,
}

use crate::params::ParameterSet;

/// Accumulate the gradients of bound leaves into the owning parameter set.
pub fn accumulate_grads<T: Element>(
    g: &Graph<T>,
    bindings: &[ParamBinding],
    params: &mut ParameterSet<T>,
) -> Result<()> {
    for binding in bindings {
        let grad = g
            .grad(binding.var)
            .ok_or_else(|| Error::MissingGradient(binding.name.clone()))?;
        ensure_finite(grad, &format!("gradient of '{}'", binding.name))?;
        params.get_mut(&binding.name)?.tensor.add_grad(grad)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Op<T: Element> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Relu {
        x: usize,
    },
    ConcatCols {
        a: usize,
        b: usize,
        a_cols: usize,
    },
    GatherRows {
        table: usize,
        index: Vec<usize>,
    },
    Softmax {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    EntropyLoss {
        logits: usize,
    },
    Mmd {
        x: usize,
        y: usize,
        bandwidths: Vec<f64>,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<T>,
        mean: Vec<T>,
    },
}

struct Node<T: Element> {
    data: Vec<T>,
    shape: Vec<usize>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Batch statistics observed by a train-mode batch normalization op, used
/// by the caller to update running buffers.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Element> {
    pub mean: Vec<T>,
    /// Biased (divide by B) variance used for normalization.
    pub var_biased: Vec<T>,
    pub batch: usize,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool, op: Op<T>, context: &str) -> Result<Var> {
        ensure_finite(&data, context)?;
        Ok(self.push(data, shape, needs_grad, op))
    }

    /// Add a non-differentiable leaf holding a copy of `t`.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    /// Add a differentiable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), true, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Copy a node's forward value into a fresh non-differentiable leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let data = self.nodes[v.0].data.clone();
        let shape = self.nodes[v.0].shape.clone();
        self.push(data, shape, false, Op::Leaf)
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Copy a node's forward value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape is consistent")
    }

    fn dims2(&self, v: Var, context: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: format!("{context}: expected rank-2 tensor"),
                left: s.clone(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- forward ops -----------------------------------------------------

    /// `[m x k] . [k x n] -> [m x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                context: "matmul inner dimensions".into(),
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let out = matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.checked(out, vec![m, n], needs, Op::MatMul { a: a.0, b: b.0 }, "matmul")
    }

    /// Broadcast-add a `[n]` bias to each row of a `[m x n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "bias add input")?;
        if self.nodes[bias.0].data.len() != n {
            return Err(Error::ShapeMismatch {
                context: "bias add".into(),
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut out = self.nodes[x.0].data.clone();
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] = out[r * n + c] + self.nodes[bias.0].data[c];
            }
        }
        let needs = self.nodes[x.0].needs_grad || self.nodes[bias.0].needs_grad;
        self.checked(out, vec![m, n], needs, Op::AddBias { x: x.0, bias: bias.0 }, "bias add")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.checked(out, shape, needs, Op::Add { a: a.0, b: b.0 }, "add")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.checked(out, shape, needs, Op::Mul { a: a.0, b: b.0 }, "mul")
    }

    /// Multiply every element by a constant factor.
    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.checked(out, shape, needs, Op::Scale { x: x.0, factor }, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.checked(out, shape, needs, Op::Relu { x: x.0 }, "relu")
    }

    /// Column-wise concatenation of `[m x a]` and `[m x b]` into `[m x (a+b)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, ca) = self.dims2(a, "concat lhs")?;
        let (mb, cb) = self.dims2(b, "concat rhs")?;
        if ma != mb {
            return Err(Error::ShapeMismatch {
                context: "concat rows".into(),
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(ma * (ca + cb));
        for r in 0..ma {
            out.extend_from_slice(&self.nodes[a.0].data[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.nodes[b.0].data[r * cb..(r + 1) * cb]);
        }
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.checked(
            out,
            vec![ma, ca + cb],
            needs,
            Op::ConcatCols { a: a.0, b: b.0, a_cols: ca },
            "concat",
        )
    }

    /// Select rows of a `[r x c]` table by index, producing `[index.len() x c]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather table")?;
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::LabelOutOfRange { label: i, classes: rows });
            }
            out.extend_from_slice(&self.nodes[table.0].data[i * cols..(i + 1) * cols]);
        }
        let needs = self.nodes[table.0].needs_grad;
        self.checked(
            out,
            vec![index.len(), cols],
            needs,
            Op::GatherRows { table: table.0, index: index.to_vec() },
            "gather",
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax")?;
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &self.nodes[x.0].data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for c in 0..n {
                let e = (row[c] - max).exp();
                out[r * n + c] = e;
                denom = denom + e;
            }
            for c in 0..n {
                out[r * n + c] = out[r * n + c] / denom;
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.checked(out, vec![m, n], needs, Op::Softmax { x: x.0 }, "softmax")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].data.iter().fold(T::zero(), |acc, &v| acc + v);
        let needs = self.nodes[x.0].needs_grad;
        self.checked(vec![s], vec![1], needs, Op::SumAll { x: x.0 }, "sum")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].data.len();
        if n == 0 {
            return Err(Error::DegenerateBatch {
                context: "mean over empty tensor".into(),
                size: 0,
                min: 1,
            });
        }
        let s = self.nodes[x.0].data.iter().fold(T::zero(), |acc, &v| acc + v);
        let mean = s / T::from_f64(n as f64);
        let needs = self.nodes[x.0].needs_grad;
        self.checked(vec![mean], vec![1], needs, Op::MeanAll { x: x.0 }, "mean")
    }

    /// Mean over the batch of `-log softmax(logits)[i, labels[i]]`, computed
    /// via log-sum-exp with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross entropy logits")?;
        if labels.len() != m {
            return Err(Error::ShapeMismatch {
                context: "cross entropy labels".into(),
                left: vec![m],
                right: vec![labels.len()],
            });
        }
        if m == 0 {
            return Err(Error::DegenerateBatch {
                context: "cross entropy".into(),
                size: 0,
                min: 1,
            });
        }
        let mut total = T::zero();
        for r in 0..m {
            let label = labels[r];
            if label >= n {
                return Err(Error::LabelOutOfRange { label, classes: n });
            }
            let row = &self.nodes[logits.0].data[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            total = total + (lse - row[label]);
        }
        let loss = total / T::from_f64(m as f64);
        let needs = self.nodes[logits.0].needs_grad;
        self.checked(
            vec![loss],
            vec![1],
            needs,
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec() },
            "cross entropy",
        )
    }

    /// Mean over the batch of the Shannon entropy of `softmax(logits)`.
    pub fn entropy(&mut self, logits: Var) -> Result<Var> {
        let (m, n) = self.dims2(logits, "entropy logits")?;
        if m == 0 {
            return Err(Error::DegenerateBatch {
                context: "entropy".into(),
                size: 0,
                min: 1,
            });
        }
        let mut total = T::zero();
        for r in 0..m {
            let row = &self.nodes[logits.0].data[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            // H = lse - sum_c p_c * z_c
            let mut weighted = T::zero();
            for c in 0..n {
                let p = (row[c] - lse).exp();
                weighted = weighted + p * row[c];
            }
            total = total + (lse - weighted);
        }
        let loss = total / T::from_f64(m as f64);
        let needs = self.nodes[logits.0].needs_grad;
        self.checked(
            vec![loss],
            vec![1],
            needs,
            Op::EntropyLoss { logits: logits.0 },
            "entropy",
        )
    }

    /// Biased V-statistic squared MMD between the rows of `x` and `y` under
    /// a sum of Gaussian kernels `exp(-d^2 / (2 * bw))`, one per bandwidth.
    ///
    /// Bandwidths are treated as constants: no gradient flows through them.
    pub fn mmd(&mut self, x: Var, y: Var, bandwidths: &[f64]) -> Result<Var> {
        let (n, d) = self.dims2(x, "mmd lhs")?;
        let (m, dy) = self.dims2(y, "mmd rhs")?;
        if d != dy {
            return Err(Error::ShapeMismatch {
                context: "mmd feature dimension".into(),
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[y.0].shape.clone(),
            });
        }
        if n == 0 || m == 0 {
            return Err(Error::DegenerateBatch {
                context: "mmd sample set".into(),
                size: 0,
                min: 1,
            });
        }
        if bandwidths.is_empty() || bandwidths.iter().any(|&b| b <= 0.0) {
            return Err(Error::config("mmd bandwidths must be non-empty and positive"));
        }
        let xs = &self.nodes[x.0].data;
        let ys = &self.nodes[y.0].data;
        let term_xx = kernel_double_sum(xs, xs, n, n, d, bandwidths) / T::from_f64((n * n) as f64);
        let term_yy = kernel_double_sum(ys, ys, m, m, d, bandwidths) / T::from_f64((m * m) as f64);
        let term_xy = kernel_double_sum(xs, ys, n, m, d, bandwidths) / T::from_f64((n * m) as f64);
        let value = term_xx + term_yy - T::from_f64(2.0) * term_xy;
        let needs = self.nodes[x.0].needs_grad || self.nodes[y.0].needs_grad;
        self.checked(
            vec![value],
            vec![1],
            needs,
            Op::Mmd { x: x.0, y: y.0, bandwidths: bandwidths.to_vec() },
            "mmd",
        )
    }

    /// Train-mode batch normalization: normalize by batch statistics
    /// (biased variance) and report them so the caller can update running
    /// buffers. Requires at least two rows.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (b, d) = self.dims2(x, "batchnorm input")?;
        if b < 2 {
            return Err(Error::DegenerateBatch {
                context: "train-mode batch normalization".into(),
                size: b,
                min: 2,
            });
        }
        if eps <= 0.0 {
            return Err(Error::config("batchnorm eps must be positive"));
        }
        self.bn_affine_shapes(gamma, beta, d)?;
        let xs = &self.nodes[x.0].data;
        let inv_b = T::from_f64(1.0 / b as f64);
        let mut mean = vec![T::zero(); d];
        for r in 0..b {
            for c in 0..d {
                mean[c] = mean[c] + xs[r * d + c];
            }
        }
        for c in 0..d {
            mean[c] = mean[c] * inv_b;
        }
        let mut var = vec![T::zero(); d];
        for r in 0..b {
            for c in 0..d {
                let diff = xs[r * d + c] - mean[c];
                var[c] = var[c] + diff * diff;
            }
        }
        for c in 0..d {
            var[c] = var[c] * inv_b;
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps_t).sqrt().recip()).collect();
        let mut normalized = vec![T::zero(); b * d];
        let mut out = vec![T::zero(); b * d];
        for r in 0..b {
            for c in 0..d {
                let xh = (xs[r * d + c] - mean[c]) * inv_std[c];
                normalized[r * d + c] = xh;
                out[r * d + c] = self.nodes[gamma.0].data[c] * xh + self.nodes[beta.0].data[c];
            }
        }
        let stats = BatchStats { mean, var_biased: var, batch: b };
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        let v = self.checked(
            out,
            vec![b, d],
            needs,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                normalized,
                inv_std,
            },
            "batchnorm train",
        )?;
        Ok((v, stats))
    }

    /// Eval-mode batch normalization using fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (b, d) = self.dims2(x, "batchnorm input")?;
        if eps <= 0.0 {
            return Err(Error::config("batchnorm eps must be positive"));
        }
        self.bn_affine_shapes(gamma, beta, d)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::ShapeMismatch {
                context: "batchnorm running statistics".into(),
                left: vec![d],
                right: vec![running_mean.len(), running_var.len()],
            });
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| (v + eps_t).sqrt().recip()).collect();
        let xs = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); b * d];
        for r in 0..b {
            for c in 0..d {
                let xh = (xs[r * d + c] - running_mean[c]) * inv_std[c];
                out[r * d + c] = self.nodes[gamma.0].data[c] * xh + self.nodes[beta.0].data[c];
            }
        }
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        self.checked(
            out,
            vec![b, d],
            needs,
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                inv_std,
                mean: running_mean.to_vec(),
            },
            "batchnorm eval",
        )
    }

    fn bn_affine_shapes(&self, gamma: Var, beta: Var, d: usize) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].data.len() != d {
                return Err(Error::ShapeMismatch {
                    context: format!("batchnorm {name}"),
                    left: vec![d],
                    right: self.nodes[v.0].shape.clone(),
                });
            }
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, context: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagate from a scalar loss node.
    ///
    /// Leaf gradients accumulate across calls (explicit zeroing is the
    /// caller's job); gradients of intermediate nodes are recomputed fresh
    /// on every pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "backward expects a scalar loss".into(),
                left: self.nodes[loss.0].shape.clone(),
                right: vec![1],
            });
        }
        ensure_finite(&self.nodes[loss.0].data, "loss value")?;
        for node in self.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
            if node.needs_grad && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.data.len()]);
            }
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any parameter; nothing to do.
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = g[0] + T::one();
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let grad = match self.nodes[i].grad.as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backprop_one(i, &grad, &op);
        }
        Ok(())
    }

    fn add_into(&mut self, target: usize, delta: &[T]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let grad = self.nodes[target]
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    fn backprop_one(&mut self, node: usize, grad: &[T], op: &Op<T>) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let m = self.nodes[node].shape[0];
                let n = self.nodes[node].shape[1];
                let k = self.nodes[*a].shape[1];
                if self.nodes[*a].needs_grad {
                    let da = matmul_nt(grad, &self.nodes[*b].data, m, n, k);
                    self.add_into(*a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db = matmul_tn(&self.nodes[*a].data, grad, m, k, n);
                    self.add_into(*b, &db);
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.nodes[node].shape[1];
                let m = self.nodes[node].shape[0];
                if self.nodes[*x].needs_grad {
                    self.add_into(*x, grad);
                }
                if self.nodes[*bias].needs_grad {
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] = db[c] + grad[r * n + c];
                        }
                    }
                    self.add_into(*bias, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_into(*a, grad);
                self.add_into(*b, grad);
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<T> = grad
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.add_into(*a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<T> = grad
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.add_into(*b, &db);
                }
            }
            Op::Scale { x, factor } => {
                let dx: Vec<T> = grad.iter().map(|&g| g * *factor).collect();
                self.add_into(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<T> = grad
                    .iter()
                    .zip(&self.nodes[*x].data)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.add_into(*x, &dx);
            }
            Op::ConcatCols { a, b, a_cols } => {
                let rows = self.nodes[node].shape[0];
                let total = self.nodes[node].shape[1];
                let b_cols = total - a_cols;
                if self.nodes[*a].needs_grad {
                    let mut da = vec![T::zero(); rows * a_cols];
                    for r in 0..rows {
                        da[r * a_cols..(r + 1) * a_cols]
                            .copy_from_slice(&grad[r * total..r * total + a_cols]);
                    }
                    self.add_into(*a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![T::zero(); rows * b_cols];
                    for r in 0..rows {
                        db[r * b_cols..(r + 1) * b_cols]
                            .copy_from_slice(&grad[r * total + a_cols..(r + 1) * total]);
                    }
                    self.add_into(*b, &db);
                }
            }
            Op::GatherRows { table, index } => {
                let cols = self.nodes[node].shape[1];
                let table_len = self.nodes[*table].data.len();
                let mut dt = vec![T::zero(); table_len];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] = dt[i * cols + c] + grad[r * cols + c];
                    }
                }
                self.add_into(*table, &dt);
            }
            Op::Softmax { x } => {
                let m = self.nodes[node].shape[0];
                let n = self.nodes[node].shape[1];
                let out = &self.nodes[node].data;
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    let mut dot = T::zero();
                    for c in 0..n {
                        dot = dot + grad[r * n + c] * out[r * n + c];
                    }
                    for c in 0..n {
                        dx[r * n + c] = out[r * n + c] * (grad[r * n + c] - dot);
                    }
                }
                self.add_into(*x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![grad[0]; self.nodes[*x].data.len()];
                self.add_into(*x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[*x].data.len();
                let g = grad[0] / T::from_f64(n as f64);
                let dx = vec![g; n];
                self.add_into(*x, &dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let m = self.nodes[*logits].shape[0];
                let n = self.nodes[*logits].shape[1];
                let scale = grad[0] / T::from_f64(m as f64);
                let mut dl = vec![T::zero(); m * n];
                for r in 0..m {
                    let row = &self.nodes[*logits].data[r * n..(r + 1) * n];
                    let lse = log_sum_exp(row);
                    for c in 0..n {
                        let p = (row[c] - lse).exp();
                        let target = if c == labels[r] { T::one() } else { T::zero() };
                        dl[r * n + c] = scale * (p - target);
                    }
                }
                self.add_into(*logits, &dl);
            }
            Op::EntropyLoss { logits } => {
                let m = self.nodes[*logits].shape[0];
                let n = self.nodes[*logits].shape[1];
                let scale = grad[0] / T::from_f64(m as f64);
                let mut dl = vec![T::zero(); m * n];
                for r in 0..m {
                    let row = &self.nodes[*logits].data[r * n..(r + 1) * n];
                    let lse = log_sum_exp(row);
                    let mut weighted = T::zero();
                    let mut probs = vec![T::zero(); n];
                    for c in 0..n {
                        probs[c] = (row[c] - lse).exp();
                        weighted = weighted + probs[c] * row[c];
                    }
                    // dH/dz_c = -p_c * (z_c - sum_j p_j z_j)
                    for c in 0..n {
                        dl[r * n + c] = scale * (-(probs[c] * (row[c] - weighted)));
                    }
                }
                self.add_into(*logits, &dl);
            }
            Op::Mmd { x, y, bandwidths } => {
                let n = self.nodes[*x].shape[0];
                let m = self.nodes[*y].shape[0];
                let d = self.nodes[*x].shape[1];
                let g = grad[0];
                let xs = self.nodes[*x].data.clone();
                let ys = self.nodes[*y].data.clone();
                let inv_nn = T::from_f64(1.0 / (n * n) as f64);
                let inv_mm = T::from_f64(1.0 / (m * m) as f64);
                let inv_nm = T::from_f64(1.0 / (n * m) as f64);
                let two = T::from_f64(2.0);
                if self.nodes[*x].needs_grad {
                    let mut dx = vec![T::zero(); n * d];
                    // d/dx_i of mean_xx: both argument slots contribute.
                    accumulate_kernel_grad(&xs, &xs, n, n, d, bandwidths, g * inv_nn * two, &mut dx);
                    accumulate_kernel_grad(&xs, &ys, n, m, d, bandwidths, -g * inv_nm * two, &mut dx);
                    self.add_into(*x, &dx);
                }
                if self.nodes[*y].needs_grad {
                    let mut dy = vec![T::zero(); m * d];
                    accumulate_kernel_grad(&ys, &ys, m, m, d, bandwidths, g * inv_mm * two, &mut dy);
                    accumulate_kernel_grad(&ys, &xs, m, n, d, bandwidths, -g * inv_nm * two, &mut dy);
                    self.add_into(*y, &dy);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, normalized, inv_std } => {
                let b = self.nodes[node].shape[0];
                let d = self.nodes[node].shape[1];
                let gamma_data = self.nodes[*gamma].data.clone();
                if self.nodes[*beta].needs_grad {
                    let mut db = vec![T::zero(); d];
                    for r in 0..b {
                        for c in 0..d {
                            db[c] = db[c] + grad[r * d + c];
                        }
                    }
                    self.add_into(*beta, &db);
                }
                if self.nodes[*gamma].needs_grad {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..b {
                        for c in 0..d {
                            dg[c] = dg[c] + grad[r * d + c] * normalized[r * d + c];
                        }
                    }
                    self.add_into(*gamma, &dg);
                }
                if self.nodes[*x].needs_grad {
                    // Standard batchnorm backward through batch statistics.
                    let inv_b = T::from_f64(1.0 / b as f64);
                    let mut dxhat_sum = vec![T::zero(); d];
                    let mut dxhat_dot = vec![T::zero(); d];
                    for r in 0..b {
                        for c in 0..d {
                            let dxh = grad[r * d + c] * gamma_data[c];
                            dxhat_sum[c] = dxhat_sum[c] + dxh;
                            dxhat_dot[c] = dxhat_dot[c] + dxh * normalized[r * d + c];
                        }
                    }
                    let mut dx = vec![T::zero(); b * d];
                    for r in 0..b {
                        for c in 0..d {
                            let dxh = grad[r * d + c] * gamma_data[c];
                            let bt = T::from_f64(b as f64);
                            dx[r * d + c] = inv_std[c]
                                * inv_b
                                * (bt * dxh - dxhat_sum[c] - normalized[r * d + c] * dxhat_dot[c]);
                        }
                    }
                    self.add_into(*x, &dx);
                }
            }
            Op::BatchNormEval { x, gamma, beta, inv_std, mean } => {
                let b = self.nodes[node].shape[0];
                let d = self.nodes[node].shape[1];
                let gamma_data = self.nodes[*gamma].data.clone();
                if self.nodes[*x].needs_grad {
                    let mut dx = vec![T::zero(); b * d];
                    for r in 0..b {
                        for c in 0..d {
                            dx[r * d + c] = grad[r * d + c] * gamma_data[c] * inv_std[c];
                        }
                    }
                    self.add_into(*x, &dx);
                }
                if self.nodes[*gamma].needs_grad {
                    let xs = self.nodes[*x].data.clone();
                    let mut dg = vec![T::zero(); d];
                    for r in 0..b {
                        for c in 0..d {
                            let xh = (xs[r * d + c] - mean[c]) * inv_std[c];
                            dg[c] = dg[c] + grad[r * d + c] * xh;
                        }
                    }
                    self.add_into(*gamma, &dg);
                }
                if self.nodes[*beta].needs_grad {
                    let mut db = vec![T::zero(); d];
                    for r in 0..b {
                        for c in 0..d {
                            db[c] = db[c] + grad[r * d + c];
                        }
                    }
                    self.add_into(*beta, &db);
                }
            }
        }
    }
}

fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

/// `C[m x n] = A[m x k] . B[k x n]`
pub fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// `C[m x k] = A[m x n] . B^T where B is [k x n]`
fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        for j in 0..k {
            let mut s = T::zero();
            let arow = &a[i * n..(i + 1) * n];
            let brow = &b[j * n..(j + 1) * n];
            for p in 0..n {
                s = s + arow[p] * brow[p];
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// `C[k x n] = A^T . B where A is [m x k], B is [m x n]`
fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// Sum of the multi-bandwidth Gaussian kernel over all ordered pairs of rows.
fn kernel_double_sum<T: Element>(
    a: &[T],
    b: &[T],
    n: usize,
    m: usize,
    d: usize,
    bandwidths: &[f64],
) -> T {
    let mut total = T::zero();
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..m {
            let bj = &b[j * d..(j + 1) * d];
            let mut dist = T::zero();
            for c in 0..d {
                let diff = ai[c] - bj[c];
                dist = dist + diff * diff;
            }
            for &bw in bandwidths {
                total = total + (-dist / T::from_f64(2.0 * bw)).exp();
            }
        }
    }
    total
}

/// Accumulate `coeff * d/da_i sum_j k(a_i, b_j)` into `out` for every row i.
fn accumulate_kernel_grad<T: Element>(
    a: &[T],
    b: &[T],
    n: usize,
    m: usize,
    d: usize,
    bandwidths: &[f64],
    coeff: T,
    out: &mut [T],
) {
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..m {
            let bj = &b[j * d..(j + 1) * d];
            let mut dist = T::zero();
            for c in 0..d {
                let diff = ai[c] - bj[c];
                dist = dist + diff * diff;
            }
            for &bw in bandwidths {
                let bw_t = T::from_f64(bw);
                let k = (-dist / (T::from_f64(2.0) * bw_t)).exp();
                // d k / d a_c = k * -(a_c - b_c) / bw
                let factor = coeff * k / bw_t;
                for c in 0..d {
                    let diff = ai[c] - bj[c];
                    out[i * d + c] = out[i * d + c] - factor * diff;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn matmul_forward_matches_hand_result() {
        let mut g: Graph<f64> = Graph::new();
        let a = g
            .constant_from(vec![1, 2], vec![1.0, 1.0])
            .unwrap();
        let b = g
            .constant_from(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0])
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[6.0, 8.0]);
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant_from(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = g
            .constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = g.constant_from(vec![2], vec![0.0, 0.0]).unwrap();
        let xw = g.matmul(x, w).unwrap();
        let y = g.add_bias(xw, b).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0]);
    }

    #[test]
    fn dense_hand_example() {
        // [[1,1]] . [[2,3],[4,5]] + [1,1] = [[7,9]]
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant_from(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let w = g
            .constant_from(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0])
            .unwrap();
        let b = g.constant_from(vec![2], vec![1.0, 1.0]).unwrap();
        let xw = g.matmul(x, w).unwrap();
        let y = g.add_bias(xw, b).unwrap();
        assert_eq!(g.data(y), &[7.0, 9.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut g: Graph<f64> = Graph::new();
        let x = g
            .constant_from(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0])
            .unwrap();
        let s = g.softmax(x).unwrap();
        let data = g.data(s).to_vec();
        assert!((data[0] - 1.0 / 3.0).abs() < 1e-12);
        let sum0: f64 = data[..3].iter().sum();
        let sum1: f64 = data[3..].iter().sum();
        assert!((sum0 - 1.0).abs() < 1e-12);
        assert!((sum1 - 1.0).abs() < 1e-12);

        let shifted = g
            .constant_from(vec![1, 3], vec![101.0, 102.0, 103.0])
            .unwrap();
        let s2 = g.softmax(shifted).unwrap();
        for (a, b) in g.data(s2).iter().zip(&data[3..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_two_logit_example() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant_from(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let s = g.softmax(x).unwrap();
        assert!(approx(g.data(s)[0], 0.26894142, 1e-6));
        assert!(approx(g.data(s)[1], 0.73105858, 1e-6));
    }

    #[test]
    fn matmul_grad_is_input_column_sum_for_sum_loss() {
        // loss = sum(x . w); dloss/dw[k][j] = sum_i x[i][k]
        let x_t = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let w_t = Tensor::from_rows(&[vec![0.5f64, -0.5], vec![0.25, 0.75]]).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(&x_t);
        let w = g.param(&w_t);
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let gw = g.grad(w).unwrap();
        assert_eq!(gw, &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let w_t = Tensor::from_rows(&[vec![1.0f64, 2.0]]).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let w = g.param(&w_t);
        let loss = g.sum_all(w).unwrap();
        g.backward(loss).unwrap();
        let first = g.grad(w).unwrap().to_vec();
        g.backward(loss).unwrap();
        let second = g.grad(w).unwrap().to_vec();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        for c in [2usize, 10, 100] {
            let mut g: Graph<f64> = Graph::new();
            let logits = g.constant_from(vec![1, c], vec![0.0; c]).unwrap();
            let loss = g.cross_entropy(logits, &[0]).unwrap();
            assert!(approx(g.scalar(loss), (c as f64).ln(), 1e-12));
        }
    }

    #[test]
    fn cross_entropy_confident_and_hand_example() {
        let mut g: Graph<f64> = Graph::new();
        let confident = g.constant_from(vec![1, 2], vec![20.0, 0.0]).unwrap();
        let loss = g.cross_entropy(confident, &[0]).unwrap();
        assert!(g.scalar(loss) < 1e-8);

        let logits = g.constant_from(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        // -log(e / (e + e^2)) = ln(1 + e)
        assert!(approx(g.scalar(loss), (1.0 + std::f64::consts::E).ln(), 1e-10));
        assert!(approx(g.scalar(loss), 1.31326, 1e-5));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant_from(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            g.cross_entropy(logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn entropy_uniform_and_confident() {
        let mut g: Graph<f64> = Graph::new();
        let uniform = g.constant_from(vec![1, 4], vec![0.0; 4]).unwrap();
        let h = g.entropy(uniform).unwrap();
        assert!(approx(g.scalar(h), 4.0f64.ln(), 1e-12));

        let mut row = vec![0.0; 4];
        row[1] = 40.0;
        let confident = g.constant_from(vec![1, 4], row).unwrap();
        let h = g.entropy(confident).unwrap();
        assert!(g.scalar(h).abs() < 1e-8);

        let logits = g.constant_from(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let h = g.entropy(logits).unwrap();
        assert!(approx(g.scalar(h), 0.58220, 1e-4));
    }

    #[test]
    fn mmd_identical_sets_is_exactly_zero() {
        let x_t = Tensor::from_rows(&[vec![0.3f64, -1.0], vec![2.0, 0.5], vec![-0.7, 0.1]]).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(&x_t);
        let y = g.constant(&x_t);
        let v = g.mmd(x, y, &[0.7, 1.3]).unwrap();
        assert_eq!(g.scalar(v), 0.0);
    }

    #[test]
    fn mmd_single_pair_hand_value() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant_from(vec![1, 1], vec![0.0]).unwrap();
        let y = g.constant_from(vec![1, 1], vec![2.0]).unwrap();
        let v = g.mmd(x, y, &[1.0]).unwrap();
        let expected = 2.0 - 2.0 * (-2.0f64).exp();
        assert!((g.scalar(v) - expected).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_columns() {
        let rows: Vec<Vec<f64>> = vec![
            vec![1.0, 10.0],
            vec![2.0, 20.0],
            vec![3.0, 30.0],
            vec![4.0, 40.0],
        ];
        let x_t = Tensor::from_rows(&rows).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(&x_t);
        let gamma = g.constant_from(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = g.constant_from(vec![2], vec![0.0, 0.0]).unwrap();
        let (y, stats) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        let out = g.data(y);
        for c in 0..2 {
            let mean: f64 = (0..4).map(|r| out[r * 2 + c]).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|r| (out[r * 2 + c] - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        assert!((stats.var_biased[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_rejects_single_row() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant_from(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let gamma = g.constant_from(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = g.constant_from(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(g.batchnorm_train(x, gamma, beta, 1e-5).is_err());
        let x2 = g
            .constant_from(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        assert!(g.batchnorm_train(x2, gamma, beta, 0.0).is_err());
    }

    #[test]
    fn batchnorm_constant_column_maps_to_zero() {
        let rows: Vec<Vec<f64>> = vec![vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]];
        let x_t = Tensor::from_rows(&rows).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(&x_t);
        let gamma = g.constant_from(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = g.constant_from(vec![2], vec![0.0, 0.0]).unwrap();
        let (y, _) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        for r in 0..3 {
            assert_eq!(g.data(y)[r * 2], 0.0);
        }
    }

    #[test]
    fn batchnorm_eval_hand_example() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant_from(vec![1, 1], vec![1.0]).unwrap();
        let gamma = g.constant_from(vec![1], vec![2.0]).unwrap();
        let beta = g.constant_from(vec![1], vec![3.0]).unwrap();
        let y = g.batchnorm_eval(x, gamma, beta, &[0.0], &[1.0], 1e-5).unwrap();
        // 2 * (1 - 0) / sqrt(1 + eps) + 3
        let expected = 2.0 / (1.0f64 + 1e-5).sqrt() + 3.0;
        assert!((g.data(y)[0] - expected).abs() < 1e-12);
        assert!((g.data(y)[0] - 5.0).abs() < 1e-4);
    }

    #[test]
    fn nonfinite_forward_is_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant_from(vec![1, 1], vec![1e308]).unwrap();
        let y = g.constant_from(vec![1, 1], vec![1e308]).unwrap();
        assert!(matches!(g.add(x, y), Err(Error::NonFinite { .. })));
    }
}
