use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Batching {
    Matched,
    LeftOnly,
    RightOnly,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    MeanAxis {
        src: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        batching: Batching,
        batches: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Reshape(usize),
    /// `out[i] = src[map[i]]`
    Permute {
        src: usize,
        map: Vec<usize>,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Gather {
        src: usize,
        indices: Vec<usize>,
        k: usize,
    },
    ScatterMul {
        src: usize,
        indices: Vec<usize>,
        factors: Vec<f64>,
        k: usize,
    },
    ConvRows {
        src: usize,
        kernel: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-use recording tape.
///
/// Nodes are appended in evaluation order, so every node's parents have
/// smaller indices and a reverse sweep over the node list is a valid
/// topological traversal. [`Graph::backward`] may run once; a second call
/// is a contract error.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: Tensor { grad: None, ..tensor },
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a `requires_grad` leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let needs_grad = parents(&op).iter().any(|&p| self.nodes[p].needs_grad);
        let value = Tensor {
            shape,
            data,
            requires_grad: needs_grad,
            grad: None,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        (x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let x = self.value(a);
        (x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (shape, data) = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(shape, data, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (shape, data) = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(shape, data, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (shape, data) = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(shape, data, Op::Mul(a.0, b.0)))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape
    /// (bias vectors, positional tables). No other broadcasting exists.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let (x, y) = (self.value(a), self.value(b));
        let inner = y.numel();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + y.data()[i % inner])
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(shape, data, Op::AddBroadcast(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (shape, data) = self.map(a, |v| v * factor);
        self.push(shape, data, Op::Scale(a.0, factor))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (shape, data) = self.map(a, f64::exp);
        self.push(shape, data, Op::Exp(a.0))
    }

    /// Natural logarithm; every input entry must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Parameter(format!("ln of non-positive value {bad}")));
        }
        let (shape, data) = self.map(a, f64::ln);
        Ok(self.push(shape, data, Op::Ln(a.0)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (shape, data) = self.map(a, |v| v.max(0.0));
        self.push(shape, data, Op::Relu(a.0))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Vec::new(), vec![m], Op::Mean(a.0))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::InvalidShape(format!(
                "mean_axis({axis}) on shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += x[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        data.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(
            out_shape,
            data,
            Op::MeanAxis {
                src: a.0,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]`.
    ///
    /// Leading batch dimensions must match exactly, or one operand may be a
    /// plain matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (batching, batch_shape) = if ba == bb {
            (Batching::Matched, ba.to_vec())
        } else if bb.is_empty() {
            (Batching::LeftOnly, ba.to_vec())
        } else if ba.is_empty() {
            (Batching::RightOnly, bb.to_vec())
        } else {
            return Err(err());
        };
        let batches: usize = batch_shape.iter().product();
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batches * m * p];
        for bi in 0..batches {
            let (ao, bo) = offsets(batching, bi, m * k, k * p);
            matmul_into(&x[ao..ao + m * k], &y[bo..bo + k * p], m, k, p, &mut out[bi * m * p..(bi + 1) * m * p]);
        }
        let mut shape = batch_shape;
        shape.extend([m, p]);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batching,
                batches,
                m,
                k,
                p,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let data = x.data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a.0)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::InvalidShape(format!(
                "permute axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let numel: usize = shape.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..numel {
            map.push(idx.iter().zip(axes).map(|(&i, &ax)| i * in_strides[ax]).sum());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.value(a).data();
        let data = map.iter().map(|&i| x[i]).collect();
        Ok(self.push(out_shape, data, Op::Permute { src: a.0, map }))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::InvalidShape(format!(
                "transpose_last2 needs rank >= 2, got {:?}",
                self.shape(a)
            )));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    fn check_rows(&self, op: &'static str, a: Var) -> Result<usize> {
        let shape = self.shape(a);
        match shape.last() {
            Some(&n) if n >= 1 => Ok(n),
            _ => Err(Error::InvalidShape(format!("{op}: tensor of shape {shape:?} has no rows"))),
        }
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.check_rows("softmax_rows", a)?;
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            softmax_into(row, &mut data);
        }
        let shape = x.shape().to_vec();
        Ok(self.push(shape, data, Op::SoftmaxRows(a.0)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.check_rows("log_softmax_rows", a)?;
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            let lse = logsumexp(row);
            data.extend(row.iter().map(|&v| v - lse));
        }
        let shape = x.shape().to_vec();
        Ok(self.push(shape, data, Op::LogSoftmaxRows(a.0)))
    }

    /// Picks `k` entries per row of the last axis; `indices` holds `k`
    /// column indices for each row, row-major.
    pub fn gather_last_dim(&mut self, a: Var, indices: &[usize], k: usize) -> Result<Var> {
        let n = self.check_rows("gather_last_dim", a)?;
        let x = self.value(a);
        let rows = x.numel() / n;
        check_row_indices("gather_last_dim", indices, rows, k, n)?;
        let data = indices
            .iter()
            .enumerate()
            .map(|(t, &j)| x.data()[(t / k) * n + j])
            .collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        Ok(self.push(
            shape,
            data,
            Op::Gather {
                src: a.0,
                indices: indices.to_vec(),
                k,
            },
        ))
    }

    /// Copy of `a` with `k` entries per row multiplied by constant factors.
    /// The factors are not differentiated.
    pub fn scatter_mul_last_dim(&mut self, a: Var, indices: &[usize], factors: &[f64], k: usize) -> Result<Var> {
        let n = self.check_rows("scatter_mul_last_dim", a)?;
        let x = self.value(a);
        let rows = x.numel() / n;
        check_row_indices("scatter_mul_last_dim", indices, rows, k, n)?;
        if factors.len() != indices.len() {
            return Err(Error::shape("scatter_mul_last_dim", &[indices.len()], &[factors.len()]));
        }
        let mut data = x.data().to_vec();
        for (t, (&j, &f)) in indices.iter().zip(factors).enumerate() {
            data[(t / k) * n + j] *= f;
        }
        let shape = x.shape().to_vec();
        Ok(self.push(
            shape,
            data,
            Op::ScatterMul {
                src: a.0,
                indices: indices.to_vec(),
                factors: factors.to_vec(),
                k,
            },
        ))
    }

    /// Convolves every row of the last axis with a constant odd-width kernel,
    /// zero-padding `w / 2` positions on each side so the row length is kept.
    pub fn conv_rows(&mut self, a: Var, kernel: &[f64]) -> Result<Var> {
        let n = self.check_rows("conv_rows", a)?;
        if kernel.len() % 2 == 0 {
            return Err(Error::Parameter(format!(
                "conv_rows kernel width must be odd, got {}",
                kernel.len()
            )));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            conv_row_into(row, kernel, &mut data);
        }
        let shape = x.shape().to_vec();
        Ok(self.push(
            shape,
            data,
            Op::ConvRows {
                src: a.0,
                kernel: kernel.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of `[B, C]` logits against integer labels.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy_with_logits", &shape, &[labels.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Parameter(format!("label {bad} out of range for {c} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(x.len());
        let mut total = 0.0;
        for (row, &y) in x.chunks(c).zip(labels) {
            let lse = logsumexp(row);
            total += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.check_rows("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (xv, g, b) = (self.value(x), self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                data.push(g[j] * h + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            shape,
            data,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row lookup into a `[V, D]` table. Output shape is `id_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || id_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", &ts, id_shape));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Parameter(format!("token id {bad} out of range for vocabulary {v}")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            shape,
            data,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, filling the gradient of every
    /// `requires_grad` leaf. Leaves unreachable from `loss` get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let mut acc = Accumulator {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            let out = &self.nodes[i].value;
            match &self.nodes[i].op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    acc.add(*a, || g.clone());
                    acc.add(*b, || g.clone());
                }
                Op::Sub(a, b) => {
                    acc.add(*a, || g.clone());
                    acc.add(*b, || g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    acc.add(*a, || g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    acc.add(*b, || g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::AddBroadcast(a, b) => {
                    acc.add(*a, || g.clone());
                    let inner = self.nodes[*b].value.numel();
                    acc.add(*b, || {
                        let mut gb = vec![0.0; inner];
                        for (t, v) in g.iter().enumerate() {
                            gb[t % inner] += v;
                        }
                        gb
                    });
                }
                Op::Scale(a, f) => acc.add(*a, || g.iter().map(|v| v * f).collect()),
                Op::Exp(a) => acc.add(*a, || g.iter().zip(out.data()).map(|(x, y)| x * y).collect()),
                Op::Ln(a) => {
                    let av = self.nodes[*a].value.data();
                    acc.add(*a, || g.iter().zip(av).map(|(x, y)| x / y).collect());
                }
                Op::Relu(a) => {
                    let av = self.nodes[*a].value.data();
                    acc.add(*a, || g.iter().zip(av).map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }).collect());
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.numel();
                    acc.add(*a, || vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.numel();
                    acc.add(*a, || vec![g[0] / n as f64; n]);
                }
                Op::MeanAxis { src, outer, len, inner } => {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    acc.add(*src, || {
                        let scale = 1.0 / len as f64;
                        let mut gs = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    gs[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        gs
                    });
                }
                Op::MatMul { a, b, batching, batches, m, k, p } => {
                    let (m, k, p, batches, batching) = (*m, *k, *p, *batches, *batching);
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    acc.add(*a, || {
                        let mut ga = vec![0.0; av.len()];
                        for bi in 0..batches {
                            let (ao, bo) = offsets(batching, bi, m * k, k * p);
                            let gc = &g[bi * m * p..(bi + 1) * m * p];
                            let bm = &bv[bo..bo + k * p];
                            let gslice = &mut ga[ao..ao + m * k];
                            for i in 0..m {
                                for j in 0..p {
                                    let gij = gc[i * p + j];
                                    for kk in 0..k {
                                        gslice[i * k + kk] += gij * bm[kk * p + j];
                                    }
                                }
                            }
                        }
                        ga
                    });
                    acc.add(*b, || {
                        let mut gb = vec![0.0; bv.len()];
                        for bi in 0..batches {
                            let (ao, bo) = offsets(batching, bi, m * k, k * p);
                            let gc = &g[bi * m * p..(bi + 1) * m * p];
                            let am = &av[ao..ao + m * k];
                            let gslice = &mut gb[bo..bo + k * p];
                            for i in 0..m {
                                for kk in 0..k {
                                    let aik = am[i * k + kk];
                                    for j in 0..p {
                                        gslice[kk * p + j] += aik * gc[i * p + j];
                                    }
                                }
                            }
                        }
                        gb
                    });
                }
                Op::Reshape(a) => acc.add(*a, || g.clone()),
                Op::Permute { src, map } => {
                    let n = self.nodes[*src].value.numel();
                    acc.add(*src, || {
                        let mut gs = vec![0.0; n];
                        for (o, &s) in map.iter().enumerate() {
                            gs[s] += g[o];
                        }
                        gs
                    });
                }
                Op::SoftmaxRows(a) => {
                    let n = out.last_dim();
                    acc.add(*a, || {
                        let mut gs = Vec::with_capacity(g.len());
                        for (gr, yr) in g.chunks(n).zip(out.data().chunks(n)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                            gs.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                        }
                        gs
                    });
                }
                Op::LogSoftmaxRows(a) => {
                    let n = out.last_dim();
                    acc.add(*a, || {
                        let mut gs = Vec::with_capacity(g.len());
                        for (gr, yr) in g.chunks(n).zip(out.data().chunks(n)) {
                            let total: f64 = gr.iter().sum();
                            gs.extend(gr.iter().zip(yr).map(|(x, y)| x - y.exp() * total));
                        }
                        gs
                    });
                }
                Op::Gather { src, indices, k } => {
                    let src_val = &self.nodes[*src].value;
                    let (n, k) = (src_val.last_dim(), *k);
                    acc.add(*src, || {
                        let mut gs = vec![0.0; src_val.numel()];
                        for (t, &j) in indices.iter().enumerate() {
                            gs[(t / k) * n + j] += g[t];
                        }
                        gs
                    });
                }
                Op::ScatterMul { src, indices, factors, k } => {
                    let (n, k) = (out.last_dim(), *k);
                    acc.add(*src, || {
                        let mut gs = g.clone();
                        for (t, (&j, &f)) in indices.iter().zip(factors).enumerate() {
                            gs[(t / k) * n + j] *= f;
                        }
                        gs
                    });
                }
                Op::ConvRows { src, kernel } => {
                    let n = out.last_dim();
                    let c = kernel.len() / 2;
                    acc.add(*src, || {
                        let mut gs = vec![0.0; g.len()];
                        for (gr, sr) in g.chunks(n).zip(gs.chunks_mut(n)) {
                            for (i, &gi) in gr.iter().enumerate() {
                                for (j, &kj) in kernel.iter().enumerate() {
                                    if let Some(t) = (i + j).checked_sub(c).filter(|&t| t < n) {
                                        sr[t] += gi * kj;
                                    }
                                }
                            }
                        }
                        gs
                    });
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let bsz = labels.len();
                    let c = probs.len() / bsz;
                    let scale = g[0] / bsz as f64;
                    acc.add(*logits, || {
                        let mut gs: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                        for (r, &y) in labels.iter().enumerate() {
                            gs[r * c + y] -= scale;
                        }
                        gs
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.nodes[*gamma].value.data();
                    let d = gv.len();
                    acc.add(*x, || {
                        let mut gs = Vec::with_capacity(g.len());
                        for ((gr, hr), &is) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                            let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            gs.extend(dh.iter().zip(hr).map(|(a, h)| is * (a - mean_dh - h * mean_dh_h)));
                        }
                        gs
                    });
                    acc.add(*gamma, || {
                        let mut gg = vec![0.0; d];
                        for (t, (a, h)) in g.iter().zip(xhat).enumerate() {
                            gg[t % d] += a * h;
                        }
                        gg
                    });
                    acc.add(*beta, || {
                        let mut gb = vec![0.0; d];
                        for (t, a) in g.iter().enumerate() {
                            gb[t % d] += a;
                        }
                        gb
                    });
                }
                Op::Embedding { table, ids } => {
                    let tv = &self.nodes[*table].value;
                    let d = tv.last_dim();
                    acc.add(*table, || {
                        let mut gt = vec![0.0; tv.numel()];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] += g[r * d + j];
                            }
                        }
                        gt
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            self.nodes[i].value.set_grad(g);
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.value.grad.is_none() {
                let n = node.value.numel();
                node.value.set_grad(vec![0.0; n]);
            }
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    fn add(&mut self, target: usize, contribution: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let c = contribution();
        match &mut self.grads[target] {
            Some(existing) => existing.iter_mut().zip(&c).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(c),
        }
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBroadcast(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Relu(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a) => vec![*a],
        Op::MeanAxis { src, .. }
        | Op::Permute { src, .. }
        | Op::Gather { src, .. }
        | Op::ScatterMul { src, .. }
        | Op::ConvRows { src, .. } => vec![*src],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Embedding { table, .. } => vec![*table],
    }
}

fn offsets(batching: Batching, bi: usize, a_len: usize, b_len: usize) -> (usize, usize) {
    match batching {
        Batching::Matched => (bi * a_len, bi * b_len),
        Batching::LeftOnly => (bi * a_len, 0),
        Batching::RightOnly => (0, bi * b_len),
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

fn check_row_indices(op: &'static str, indices: &[usize], rows: usize, k: usize, n: usize) -> Result<()> {
    if k == 0 || indices.len() != rows * k {
        return Err(Error::shape(op, &[rows, n], &[indices.len()]));
    }
    if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
        return Err(Error::Parameter(format!("{op}: index {bad} out of range for rows of length {n}")));
    }
    Ok(())
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    out.extend(row.iter().map(|&v| (v - max).exp()));
    let total: f64 = out[start..].iter().sum();
    out[start..].iter_mut().for_each(|v| *v /= total);
}

fn conv_row_into(row: &[f64], kernel: &[f64], out: &mut Vec<f64>) {
    let n = row.len();
    let c = kernel.len() / 2;
    for i in 0..n {
        let mut acc = 0.0;
        for (j, &kj) in kernel.iter().enumerate() {
            if let Some(t) = (i + j).checked_sub(c).filter(|&t| t < n) {
                acc += kj * row[t];
            }
        }
        out.push(acc);
    }
}
