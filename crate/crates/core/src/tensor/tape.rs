use super::kernels::{self, ConvDims};
use super::{Scalar, Tensor};
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How batch-norm groups elements into normalized features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnLayout {
    /// One feature per channel; statistics over every other axis.
    Channel,
    /// One feature per (channel, node) pair of an `N x C x T x V` tensor,
    /// statistics over (N, T). Parameters are indexed `v * C + c`.
    ChannelNode,
}

/// Batch statistics from a train-mode batch norm, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Var,
    },
    TemporalConv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GraphMul {
        x: Var,
        a: Var,
        entries: Vec<(usize, usize, T)>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        train: bool,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    SelectSum {
        x: Var,
        index: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of primitive applications. Node order is a valid
/// topological order, so backward is a single reverse sweep.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    track_all: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` if it does not require grad or was not
    /// reached from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_all: false,
        }
    }

    /// A tape on which every node requires grad, so gradients with respect
    /// to intermediate activations are available (used by attribution).
    pub fn tracking_all() -> Self {
        Self {
            nodes: Vec::new(),
            track_all: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad || self.track_all)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.track_all || vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Sign pattern of every relu input on the tape. Finite differences are
    /// only meaningful when this pattern is unchanged by the perturbation.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.relu_inputs().iter().map(|&e| e > T::zero()).collect()
    }

    /// Every relu input element on the tape, flattened in tape order.
    pub fn relu_inputs(&self) -> Vec<T> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend_from_slice(self.nodes[x.0].value.data());
            }
        }
        out
    }

    /// `(relu output, relu input)` pairs in tape order.
    pub fn relu_nodes(&self) -> Vec<(Var, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Relu { x } => Some((Var(i), x)),
                _ => None,
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        contract!(
            k == k2,
            "matmul inner dimensions differ: {m}x{k} * {k2}x{n}"
        );
        let y = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], y)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Affine layer `x w^T + b` with `x: N x I`, `w: O x I`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, inp) = self.value(x).dims2()?;
        let (out, inp2) = self.value(w).dims2()?;
        contract!(
            inp == inp2,
            "linear expects {inp2} input features, got {inp}"
        );
        contract!(
            self.value(b).numel() == out,
            "linear bias length must be {out}"
        );
        let y = kernels::linear(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            inp,
            out,
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::new([n, out], y)?, Op::Linear { x, w, b }, rg))
    }

    /// 1x1 convolution: `x: N x Cin x T x V`, `w: Cout x Cin`, `b: Cout`.
    pub fn pointwise_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c_in, t, v) = self.value(x).dims4()?;
        let (c_out, c_in2) = self.value(w).dims2()?;
        contract!(
            c_in == c_in2,
            "pointwise_linear expects {c_in2} channels, got {c_in}"
        );
        contract!(
            self.value(b).numel() == c_out,
            "pointwise_linear bias length must be {c_out}"
        );
        let y = kernels::pointwise(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            c_in,
            c_out,
            t * v,
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::new([n, c_out, t, v], y)?,
            Op::Pointwise { x, w, b },
            rg,
        ))
    }

    /// Convolution along T: `w: Cout x Cin x k` with odd `k`, zero padding.
    pub fn temporal_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let d = self.conv_dims(x, w, stride, pad)?;
        contract!(
            self.value(b).numel() == d.c_out,
            "temporal_conv bias length must be {}",
            d.c_out
        );
        let y = kernels::temporal_conv(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &d,
        );
        let rg = self.any_grad(&[x, w, b]);
        let shape = [d.n, d.c_out, d.t_out, d.v];
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::TemporalConv {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    fn conv_dims(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvDims> {
        let (n, c_in, t_in, v) = self.value(x).dims4()?;
        let (c_out, c_in2, k) = self.value(w).dims3()?;
        contract!(
            c_in == c_in2,
            "temporal_conv expects {c_in2} channels, got {c_in}"
        );
        contract!(k % 2 == 1, "temporal kernel size must be odd, got {k}");
        contract!(stride >= 1, "temporal stride must be at least 1");
        let span = t_in + 2 * pad;
        contract!(
            span >= k,
            "temporal_conv output length < 1 (T={t_in}, k={k}, pad={pad})"
        );
        let t_out = (span - k) / stride + 1;
        Ok(ConvDims {
            n,
            c_in,
            c_out,
            t_in,
            t_out,
            v,
            k,
            stride,
            pad,
        })
    }

    /// `y[n,c,t,v] = sum_u x[n,c,t,u] a[u,v]`.
    pub fn graph_mul(&mut self, x: Var, a: Var) -> Result<Var> {
        let (_, _, _, v) = self.value(x).dims4()?;
        let (r, c) = self.value(a).dims2()?;
        contract!(
            r == v && c == v,
            "graph_mul adjacency is {r}x{c} but the input has {v} nodes"
        );
        let entries = kernels::sparse_entries(self.value(a).data(), v);
        let y = kernels::graph_mul(self.value(x).data(), &entries, v);
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, a]);
        Ok(self.push(Tensor::new(shape, y)?, Op::GraphMul { x, a, entries }, rg))
    }

    /// Batch normalization. In train mode the batch statistics are returned
    /// for the caller to fold into its running averages; in eval mode the
    /// supplied running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        layout: BnLayout,
        train: bool,
        eps: f64,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        contract!(
            shape.len() >= 2,
            "batch_norm needs at least N x C, got {shape:?}"
        );
        let (n, c) = (shape[0], shape[1]);
        let groups = match layout {
            BnLayout::Channel => c,
            BnLayout::ChannelNode => {
                contract!(shape.len() == 4, "node-wise batch_norm needs N x C x T x V");
                c * shape[3]
            }
        };
        contract!(n > 0, "batch_norm on an empty batch");
        contract!(
            self.value(gamma).numel() == groups && self.value(beta).numel() == groups,
            "batch_norm affine parameters must have {groups} entries"
        );
        contract!(
            running_mean.len() == groups && running_var.len() == groups,
            "batch_norm running statistics must have {groups} entries"
        );
        let data = xv.data();
        let eps_t = T::lit(eps);
        let (mean, var_b, stats) = if train {
            let count = T::lit((data.len() / groups) as f64);
            let mut sum = vec![T::zero(); groups];
            for_each_run(&shape, layout, |r, k| sum[k] += data[r].iter().copied().sum::<T>());
            let mean: Vec<T> = sum.iter().map(|&s| s / count).collect();
            let mut sq = vec![T::zero(); groups];
            for_each_run(&shape, layout, |r, k| {
                let m = mean[k];
                sq[k] += data[r].iter().map(|&e| (e - m) * (e - m)).sum::<T>();
            });
            let var_b: Vec<T> = sq.iter().map(|&s| s / count).collect();
            let m = (data.len() / groups) as f64;
            let unbiased = sq
                .iter()
                .map(|&s| {
                    if m > 1.0 {
                        s / T::lit(m - 1.0)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let stats = BnStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var_b, Some(stats))
        } else {
            (running_mean.to_vec(), running_var.to_vec(), None)
        };
        let inv_std: Vec<T> = var_b
            .iter()
            .map(|&v| T::one() / (v + eps_t).sqrt())
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut y = vec![T::zero(); data.len()];
        for_each_run(&shape, layout, |r, k| {
            let (m, is, gk, bk) = (mean[k], inv_std[k], g[k], b[k]);
            for ((h, o), &e) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&data[r]) {
                *h = (e - m) * is;
                *o = gk * *h + bk;
            }
        });
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                train,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, stats))
    }

    /// Per-row layer normalization of an `N x D` tensor.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        contract!(d >= 2, "layer_norm needs at least 2 features");
        contract!(
            self.value(gain).numel() == d && self.value(bias).numel() == d,
            "layer_norm affine parameters must have {d} entries"
        );
        let data = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n * d);
        let dt = T::lit(d as f64);
        for row in data.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dt;
            let is = T::one() / (var + T::lit(eps)).sqrt();
            inv_std.push(is);
            for (j, &e) in row.iter().enumerate() {
                let h = (e - mean) * is;
                xhat.push(h);
                y.push(g[j] * h + b[j]);
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new([n, d], y)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self
            .value(x)
            .map(|e| if e > T::zero() { e } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    /// Inverted dropout with an explicit keep-mask of 0/1 values. The mask is
    /// rescaled by `1/(1-p)` here.
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        contract!(
            (0.0..1.0).contains(&p),
            "dropout rate must be in [0, 1), got {p}"
        );
        contract!(
            keep.len() == self.value(x).numel(),
            "dropout mask length mismatch"
        );
        let scale = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = keep
            .iter()
            .map(|&k| if k { scale } else { T::zero() })
            .collect();
        let xv = self.value(x);
        let y: Vec<T> = xv.data().iter().zip(&mask).map(|(&e, &m)| e * m).collect();
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Dropout { x, mask }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        contract!(
            av.shape() == bv.shape(),
            "add shape mismatch: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let y: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let y = Tensor::new(av.shape().to_vec(), y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let y = self.value(x).map(|e| e * c);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Scale { x, c }, rg)
    }

    /// `y[n, :] = s[n] * x[n, :]` with `s: N x 1`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        contract!(
            self.value(s).shape() == [n, 1],
            "scale_rows expects an {n}x1 scale"
        );
        let sv = self.value(s).data();
        let mut y = self.value(x).data().to_vec();
        for (row, &k) in y.chunks_exact_mut(d).zip(sv) {
            row.iter_mut().for_each(|e| *e *= k);
        }
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(Tensor::new([n, d], y)?, Op::ScaleRows { x, s }, rg))
    }

    /// Row-wise inner product of two `N x D` tensors, giving `N x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        contract!(self.value(b).shape() == [n, d], "row_dot shape mismatch");
        let y: Vec<T> = self
            .value(a)
            .data()
            .chunks_exact(d)
            .zip(self.value(b).data().chunks_exact(d))
            .map(|(p, q)| p.iter().zip(q).map(|(&u, &v)| u * v).sum())
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([n, 1], y)?, Op::RowDot { a, b }, rg))
    }

    /// Concatenate `N x D1` and `N x D2` along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d1) = self.value(a).dims2()?;
        let (n2, d2) = self.value(b).dims2()?;
        contract!(n == n2, "concat batch sizes differ: {n} vs {n2}");
        let mut y = Vec::with_capacity(n * (d1 + d2));
        for i in 0..n {
            y.extend_from_slice(self.value(a).row(i));
            y.extend_from_slice(self.value(b).row(i));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([n, d1 + d2], y)?, Op::Concat { a, b }, rg))
    }

    /// Mean over (T, V) of an `N x C x T x V` tensor, giving `N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, t, v) = self.value(x).dims4()?;
        let plane = t * v;
        let inv = T::lit(1.0 / plane as f64);
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([n, c], y)?, Op::GlobalAvgPool { x }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        contract!(
            labels.len() == n,
            "expected {n} labels, got {}",
            labels.len()
        );
        contract!(labels.iter().all(|&l| l < k), "label out of range [0, {k})");
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = self.value(logits).row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[l];
        }
        loss = loss / T::lit(n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// `sum_n x[n, index[n]]` for an `N x K` tensor.
    pub fn select_sum(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        contract!(index.len() == n, "select_sum expects {n} indices");
        contract!(
            index.iter().all(|&i| i < k),
            "select_sum index out of range"
        );
        let s = index
            .iter()
            .enumerate()
            .map(|(r, &i)| self.value(x).row(r)[i])
            .sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SelectSum {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// `sum(x * w)` for a constant tensor `w` of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        contract!(
            self.value(x).shape() == w.shape(),
            "weighted_sum shape mismatch"
        );
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                w: w.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        contract!(
            self.value(loss).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            for (var, g) in self.input_grads(node, &gy)? {
                accumulate(&mut grads, var, g);
            }
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, node: &Node<T>, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let bt = kernels::transpose(self.value(b).data(), k, n);
                    out.push((a, Tensor::new([m, k], kernels::matmul(g, &bt, m, n, k))?));
                }
                if self.needs(b) {
                    let at = kernels::transpose(self.value(a).data(), m, k);
                    out.push((b, Tensor::new([k, n], kernels::matmul(&at, g, k, m, n))?));
                }
            }
            &Op::Linear { x, w, b } => {
                let (n, inp) = self.value(x).dims2()?;
                let (o, _) = self.value(w).dims2()?;
                let (gx, gw, gb) = kernels::linear_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    n,
                    inp,
                    o,
                );
                self.push_grad(&mut out, x, gx)?;
                self.push_grad(&mut out, w, gw)?;
                self.push_grad(&mut out, b, gb)?;
            }
            &Op::Pointwise { x, w, b } => {
                let (n, c_in, t, v) = self.value(x).dims4()?;
                let (c_out, _) = self.value(w).dims2()?;
                let (gx, gw, gb) = kernels::pointwise_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    n,
                    c_in,
                    c_out,
                    t * v,
                    self.needs(x),
                );
                self.push_grad(&mut out, x, gx)?;
                self.push_grad(&mut out, w, gw)?;
                self.push_grad(&mut out, b, gb)?;
            }
            &Op::TemporalConv {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let d = self.conv_dims(x, w, stride, pad)?;
                let (gx, gw, gb) = kernels::temporal_conv_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    &d,
                    self.needs(x),
                    self.needs(w),
                );
                self.push_grad(&mut out, x, gx)?;
                self.push_grad(&mut out, w, gw)?;
                self.push_grad(&mut out, b, gb)?;
            }
            Op::GraphMul { x, a, entries } => {
                let v = self.value(*a).shape()[0];
                let (gx, ga) = kernels::graph_mul_backward(
                    self.value(*x).data(),
                    entries,
                    g,
                    v,
                    self.needs(*x),
                    self.needs(*a),
                );
                self.push_grad(&mut out, *x, gx)?;
                self.push_grad(&mut out, *a, ga)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                train,
                xhat,
                inv_std,
            } => {
                let shape = self.value(*x).shape();
                let groups = inv_std.len();
                let mut sum_g = vec![T::zero(); groups];
                let mut sum_gh = vec![T::zero(); groups];
                for_each_run(shape, *layout, |r, k| {
                    for (&gi, &hi) in g[r.clone()].iter().zip(&xhat[r]) {
                        sum_g[k] += gi;
                        sum_gh[k] += gi * hi;
                    }
                });
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let m = T::lit((g.len() / groups) as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for_each_run(shape, *layout, |r, k| {
                        let s = gam[k] * inv_std[k];
                        let (mg, mgh) = (sum_g[k] / m, sum_gh[k] / m);
                        for ((o, &gi), &hi) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                            *o = if *train { s * (gi - mg - hi * mgh) } else { s * gi };
                        }
                    });
                    self.push_grad(&mut out, *x, gx)?;
                }
                self.push_grad(&mut out, *gamma, sum_gh)?;
                self.push_grad(&mut out, *beta, sum_g)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = self.value(*x).dims2()?;
                let gn = self.value(*gain).data();
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                let mut gx = vec![T::zero(); n * d];
                let dt = T::lit(d as f64);
                for r in 0..n {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        let gh = gr[j] * gn[j];
                        s1 += gh;
                        s2 += gh * hr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gn[j];
                        gx[r * d + j] = inv_std[r] * (gh - s1 / dt - hr[j] * s2 / dt);
                    }
                }
                self.push_grad(&mut out, *x, gx)?;
                self.push_grad(&mut out, *gain, ggain)?;
                self.push_grad(&mut out, *bias, gbias)?;
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &e)| if e > T::zero() { gi } else { T::zero() })
                    .collect();
                self.push_grad(&mut out, x, gx)?;
            }
            &Op::Sigmoid { x } => {
                let yv = node.value.data();
                let gx = g
                    .iter()
                    .zip(yv)
                    .map(|(&gi, &s)| gi * s * (T::one() - s))
                    .collect();
                self.push_grad(&mut out, x, gx)?;
            }
            Op::Dropout { x, mask } => {
                let gx = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                self.push_grad(&mut out, *x, gx)?;
            }
            &Op::Add { a, b } => {
                self.push_grad(&mut out, a, g.to_vec())?;
                self.push_grad(&mut out, b, g.to_vec())?;
            }
            &Op::Scale { x, c } => {
                self.push_grad(&mut out, x, g.iter().map(|&e| e * c).collect())?;
            }
            &Op::ScaleRows { x, s } => {
                let (_, d) = self.value(x).dims2()?;
                let sv = self.value(s).data();
                if self.needs(x) {
                    let mut gx = g.to_vec();
                    for (row, &k) in gx.chunks_exact_mut(d).zip(sv) {
                        row.iter_mut().for_each(|e| *e *= k);
                    }
                    self.push_grad(&mut out, x, gx)?;
                }
                let gs = g
                    .chunks_exact(d)
                    .zip(self.value(x).data().chunks_exact(d))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(&p, &q)| p * q).sum())
                    .collect();
                self.push_grad(&mut out, s, gs)?;
            }
            &Op::RowDot { a, b } => {
                let (_, d) = self.value(a).dims2()?;
                let scale_rows = |src: &[T]| -> Vec<T> {
                    let mut v = src.to_vec();
                    for (row, &k) in v.chunks_exact_mut(d).zip(g) {
                        row.iter_mut().for_each(|e| *e *= k);
                    }
                    v
                };
                if self.needs(a) {
                    self.push_grad(&mut out, a, scale_rows(self.value(b).data()))?;
                }
                if self.needs(b) {
                    self.push_grad(&mut out, b, scale_rows(self.value(a).data()))?;
                }
            }
            &Op::Concat { a, b } => {
                let (n, d1) = self.value(a).dims2()?;
                let (_, d2) = self.value(b).dims2()?;
                let mut ga = Vec::with_capacity(n * d1);
                let mut gb = Vec::with_capacity(n * d2);
                for row in g.chunks_exact(d1 + d2) {
                    ga.extend_from_slice(&row[..d1]);
                    gb.extend_from_slice(&row[d1..]);
                }
                self.push_grad(&mut out, a, ga)?;
                self.push_grad(&mut out, b, gb)?;
            }
            &Op::GlobalAvgPool { x } => {
                let (_, _, t, v) = self.value(x).dims4()?;
                let plane = t * v;
                let inv = T::lit(1.0 / plane as f64);
                let mut gx = Vec::with_capacity(g.len() * plane);
                for &gi in g {
                    gx.extend(std::iter::repeat_n(gi * inv, plane));
                }
                self.push_grad(&mut out, x, gx)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let (n, k) = self.value(*logits).dims2()?;
                let scale = g[0] / T::lit(n as f64);
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= T::one();
                }
                gl.iter_mut().for_each(|e| *e *= scale);
                self.push_grad(&mut out, *logits, gl)?;
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                self.push_grad(&mut out, x, vec![g[0]; n])?;
            }
            Op::SelectSum { x, index } => {
                let (_, k) = self.value(*x).dims2()?;
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (r, &i) in index.iter().enumerate() {
                    gx[r * k + i] = g[0];
                }
                self.push_grad(&mut out, *x, gx)?;
            }
            Op::WeightedSum { x, w } => {
                self.push_grad(&mut out, *x, w.iter().map(|&e| e * g[0]).collect())?;
            }
        }
        Ok(out)
    }

    fn push_grad(&self, out: &mut Vec<(Var, Tensor<T>)>, v: Var, g: Vec<T>) -> Result<()> {
        if self.needs(v) {
            out.push((v, Tensor::new(self.value(v).shape().to_vec(), g)?));
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Visit a batch-norm input as runs of contiguous elements sharing one
/// normalization group: `f(range, group)`.
fn for_each_run(shape: &[usize], layout: BnLayout, mut f: impl FnMut(std::ops::Range<usize>, usize)) {
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    match layout {
        BnLayout::Channel => {
            for p in 0..n * c {
                f(p * inner..(p + 1) * inner, p % c);
            }
        }
        BnLayout::ChannelNode => {
            let v = shape[3];
            for p in 0..n * c {
                let ch = p % c;
                for (j, i) in (p * inner..(p + 1) * inner).enumerate() {
                    f(i..i + 1, (j % v) * c + ch);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable row-wise softmax of an `N x K` buffer.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}
