//! Taped reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op reads earlier nodes
//! only, so insertion order is a topological order and [`Graph::backward`]
//! simply walks the tape in reverse. Graphs are cheap to build and are
//! rebuilt for every forward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    id: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    AvgPool {
        input: usize,
        size: usize,
    },
    GlobalAvgPool {
        input: usize,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Concat {
        inputs: Vec<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        // Batch statistics are differentiated through in training mode only.
        training: bool,
    },
    Dropout {
        input: usize,
        mask: Vec<T>,
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
        input: usize,
        factor: T,
    },
    GradScale {
        input: usize,
        factor: T,
    },
    Sum {
        input: usize,
    },
    WeightedBce {
        probs: usize,
        targets: Vec<T>,
        w_pos: Vec<T>,
        w_neg: Vec<T>,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to the leaf `var`, or `None` when
    /// `var` does not influence the loss through differentiable nodes or is
    /// not a leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::InvalidShape(format!("{op}: {a:?} vs {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Handles issued before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed);
    }

    /// Inputs of every ReLU on the tape, in recording order. Gradient checks
    /// use them to tell how close an instance sits to a kink.
    pub fn relu_inputs(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Relu { input } => Some(&self.nodes[input].value),
            _ => None,
        })
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::NoGraph);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let id = self.check(v)?;
        Ok(&self.nodes[id].value)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable input: gradients are materialized for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// 2-d cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, ki) = (self.check(input)?, self.check(kernel)?);
        let bi = bias.map(|b| self.check(b)).transpose()?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let x = &self.nodes[xi].value;
        let k = &self.nodes[ki].value;
        let (n, c_in, h, w) = x.dims4()?;
        let (c_out, kc, kh, kw) = k.dims4().map_err(|_| shape_err("conv2d", x.shape(), k.shape()))?;
        if kc != c_in || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err("conv2d input/kernel", x.shape(), k.shape()));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [c_out] {
                return Err(shape_err("conv2d bias", self.nodes[bi].value.shape(), &[c_out]));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad: padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            x.data(),
            k.data(),
            bi.map(|b| self.nodes[b].value.data()),
        );
        let value = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(xi) || self.rg(ki) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input: xi,
                kernel: ki,
                bias: bi,
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping `size`×`size` average pooling with stride `size`.
    pub fn avg_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let xi = self.check(input)?;
        let x = &self.nodes[xi].value;
        let (n, c, h, w) = x.dims4()?;
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::InvalidShape(format!(
                "avg_pool2d: spatial {h}x{w} not divisible by {size}"
            )));
        }
        let out = kernels::avg_pool_forward(x.data(), n * c, h, w, size);
        let value = Tensor::new(vec![n, c, h / size, w / size], out)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::AvgPool { input: xi, size }, rg))
    }

    /// `[N,C,H,W]` to `[N,C]` by spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let x = &self.nodes[xi].value;
        let (n, c, h, w) = x.dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!(
                "global_avg_pool: empty spatial dims {:?}",
                x.shape()
            )));
        }
        let area = h * w;
        let inv = T::one() / T::of(area as f64);
        let out = x
            .data()
            .chunks_exact(area)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::GlobalAvgPool { input: xi }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let value = self.nodes[xi].value.map(|v| v.max(T::zero()));
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Relu { input: xi }, rg))
    }

    /// Logistic function, clamped so results stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let value = self.nodes[xi].value.map(sigmoid);
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Sigmoid { input: xi }, rg))
    }

    /// `x[N,F] · W[K,F]ᵀ + b[K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.check(input)?, self.check(weight)?);
        let bi = bias.map(|b| self.check(b)).transpose()?;
        let x = &self.nodes[xi].value;
        let w = &self.nodes[wi].value;
        let (n, f) = x.dims2()?;
        let (k, wf) = w.dims2()?;
        if wf != f {
            return Err(shape_err("linear", x.shape(), w.shape()));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [k] {
                return Err(shape_err("linear bias", self.nodes[bi].value.shape(), &[k]));
            }
        }
        let mut out = vec![T::zero(); n * k];
        for r in 0..n {
            let xr = &x.data()[r * f..][..f];
            for c in 0..k {
                let wr = &w.data()[c * f..][..f];
                let mut acc = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>();
                if let Some(bi) = bi {
                    acc = acc + self.nodes[bi].value.data()[c];
                }
                out[r * k + c] = acc;
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Linear {
                input: xi,
                weight: wi,
                bias: bi,
            },
            rg,
        ))
    }

    /// Concatenates along axis 1 (channels); all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let ids = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let first = self.nodes[ids[0]].value.shape().to_vec();
        if first.len() < 2 {
            return Err(Error::InvalidShape(format!("concat needs rank >= 2, got {first:?}")));
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s[0] != outer || s[2..] != first[2..] {
                return Err(shape_err("concat", &first, s));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(outer * channels * inner);
        for o in 0..outer {
            for &i in &ids {
                let t = &self.nodes[i].value;
                let block = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[o * block..][..block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        let rg = ids.iter().any(|&i| self.rg(i));
        Ok(self.push(value, Op::Concat { inputs: ids }, rg))
    }

    /// Training-mode batch normalization over `(N,H,W)` per channel.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (xi, gi, bi) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let x = &self.nodes[xi].value;
        let (n, c, h, w) = x.dims4()?;
        self.check_bn_params(gi, bi, c)?;
        let area = h * w;
        let count = T::of((n * area) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = s + x.data()[(b * c + ch) * area..][..area].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut ss = T::zero();
            for b in 0..n {
                for &v in &x.data()[(b * c + ch) * area..][..area] {
                    ss = ss + (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = ss / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(xi, gi, bi, &mean, &inv_std)?;
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        let out = self.push(
            value,
            Op::BatchNorm {
                input: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                training: true,
            },
            rg,
        );
        Ok((out, BatchStats { mean, var }))
    }

    /// Evaluation-mode batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let (_, c, _, _) = self.nodes[xi].value.dims4()?;
        self.check_bn_params(gi, bi, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::InvalidShape(format!(
                "batch_norm_eval: running stats of length {} for {c} channels",
                running_mean.len()
            )));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(xi, gi, bi, running_mean, &inv_std)?;
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                training: false,
            },
            rg,
        ))
    }

    fn check_bn_params(&self, gi: usize, bi: usize, c: usize) -> Result<()> {
        for i in [gi, bi] {
            if self.nodes[i].value.shape() != [c] {
                return Err(shape_err("batch_norm parameter", self.nodes[i].value.shape(), &[c]));
            }
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        xi: usize,
        gi: usize,
        bi: usize,
        mean: &[T],
        inv_std: &[T],
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let x = &self.nodes[xi].value;
        let (n, c, h, w) = x.dims4()?;
        let area = h * w;
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * area;
                for k in off..off + area {
                    let xh = (x.data()[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + b[ch];
                }
            }
        }
        Ok((Tensor::new(x.shape().to_vec(), out)?, xhat))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R) -> Result<Var> {
        let xi = self.check(input)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0,1)")));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let x = &self.nodes[xi].value;
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Dropout { input: xi, mask }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<(usize, usize)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(shape_err(name, self.nodes[ai].value.shape(), self.nodes[bi].value.shape()));
        }
        Ok((ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "add")?;
        let x = &self.nodes[ai].value;
        let y = &self.nodes[bi].value;
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::Add { a: ai, b: bi }, rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "mul")?;
        let x = &self.nodes[ai].value;
        let y = &self.nodes[bi].value;
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::Mul { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let xi = self.check(input)?;
        let value = self.nodes[xi].value.map(|v| v * factor);
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Scale { input: xi, factor }, rg))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `factor` on the backward pass.
    pub fn grad_scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let xi = self.check(input)?;
        let value = self.nodes[xi].value.clone();
        let rg = self.rg(xi);
        Ok(self.push(value, Op::GradScale { input: xi, factor }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let total = self.nodes[xi].value.data().iter().copied().sum::<T>();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(total), Op::Sum { input: xi }, rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input)?.len();
        if n == 0 {
            return Err(Error::InvalidShape("mean of an empty tensor".into()));
        }
        let s = self.sum(input)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Mean over all `N×K` entries of the class-weighted binary cross-entropy
    /// `-(w_pos[k]·y·ln f + w_neg[k]·(1-y)·ln(1-f))`, with `f` clamped to
    /// `[eps, 1-eps]`.
    pub fn weighted_bce(
        &mut self,
        probs: Var,
        targets: &Tensor<T>,
        w_pos: &[T],
        w_neg: &[T],
        eps: T,
    ) -> Result<Var> {
        let pi = self.check(probs)?;
        let p = &self.nodes[pi].value;
        let (n, k) = p.dims2()?;
        if targets.shape() != p.shape() {
            return Err(shape_err("weighted_bce", p.shape(), targets.shape()));
        }
        if w_pos.len() != k || w_neg.len() != k {
            return Err(Error::InvalidShape(format!(
                "weighted_bce: {} classes but {} / {} weights",
                k,
                w_pos.len(),
                w_neg.len()
            )));
        }
        if !(eps > T::zero() && eps < T::of(0.5)) {
            return Err(Error::InvalidArgument(format!("clamp eps {eps} outside (0, 0.5)")));
        }
        if n * k == 0 {
            return Err(Error::InvalidShape("weighted_bce on an empty batch".into()));
        }
        let hi = T::one() - eps;
        let mut total = T::zero();
        for r in 0..n {
            for c in 0..k {
                let f = p.data()[r * k + c].max(eps).min(hi);
                let y = targets.data()[r * k + c];
                let term = w_pos[c] * y * f.ln() + w_neg[c] * (T::one() - y) * (T::one() - f).ln();
                total = total - term;
            }
        }
        let loss = total / T::of((n * k) as f64);
        let rg = self.rg(pi);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                probs: pi,
                targets: targets.data().to_vec(),
                w_pos: w_pos.to_vec(),
                w_neg: w_neg.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`; gradients from several consumers
    /// of one node accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            // intermediate gradients are released as soon as they are consumed
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, contrib: Vec<T>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                if self.rg(*input) {
                    acc(*input, kernels::conv2d_backward_input(geom, g, val(*kernel).data()));
                }
                if self.rg(*kernel) {
                    acc(*kernel, kernels::conv2d_backward_kernel(geom, g, val(*input).data()));
                }
                if let Some(b) = bias {
                    let plane = geom.h_out * geom.w_out;
                    let mut gb = vec![T::zero(); geom.c_out];
                    for (idx, chunk) in g.chunks_exact(plane).enumerate() {
                        gb[idx % geom.c_out] = gb[idx % geom.c_out] + chunk.iter().copied().sum::<T>();
                    }
                    acc(*b, gb);
                }
            }
            Op::AvgPool { input, size } => {
                let (n, c, h, w) = val(*input).dims4()?;
                acc(*input, kernels::avg_pool_backward(g, n * c, h, w, *size));
            }
            Op::GlobalAvgPool { input } => {
                let (_, _, h, w) = val(*input).dims4()?;
                let area = h * w;
                let inv = T::one() / T::of(area as f64);
                let mut gx = Vec::with_capacity(g.len() * area);
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, area));
                }
                acc(*input, gx);
            }
            Op::Relu { input } => {
                let gx = val(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*input, gx);
            }
            Op::Sigmoid { input } => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                acc(*input, gx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let (n, f) = x.dims2()?;
                let (k, _) = w.dims2()?;
                if self.rg(*input) {
                    let mut gx = vec![T::zero(); n * f];
                    for r in 0..n {
                        for c in 0..k {
                            let gv = g[r * k + c];
                            let wr = &w.data()[c * f..][..f];
                            for (d, &wv) in gx[r * f..][..f].iter_mut().zip(wr) {
                                *d = *d + gv * wv;
                            }
                        }
                    }
                    acc(*input, gx);
                }
                if self.rg(*weight) {
                    let mut gw = vec![T::zero(); k * f];
                    for r in 0..n {
                        let xr = &x.data()[r * f..][..f];
                        for c in 0..k {
                            let gv = g[r * k + c];
                            for (d, &xv) in gw[c * f..][..f].iter_mut().zip(xr) {
                                *d = *d + gv * xv;
                            }
                        }
                    }
                    acc(*weight, gw);
                }
                if let Some(b) = bias {
                    let mut gb = vec![T::zero(); k];
                    for r in 0..n {
                        for c in 0..k {
                            gb[c] = gb[c] + g[r * k + c];
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Concat { inputs } => {
                let shape = node.value.shape();
                let outer = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total_block = shape[1] * inner;
                let mut offset = 0;
                for &j in inputs {
                    let block = val(j).shape()[1] * inner;
                    if self.rg(j) {
                        let mut gx = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            gx.extend_from_slice(&g[o * total_block + offset..][..block]);
                        }
                        acc(j, gx);
                    }
                    offset += block;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, c, h, w) = val(*input).dims4()?;
                let area = h * w;
                let m = T::of((n * area) as f64);
                let gam = val(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * area;
                        for k in off..off + area {
                            sum_g[ch] = sum_g[ch] + g[k];
                            sum_gx[ch] = sum_gx[ch] + g[k] * xhat[k];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut gx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * area;
                            let a = gam[ch] * inv_std[ch];
                            for k in off..off + area {
                                gx[k] = if *training {
                                    a * (g[k] - (sum_g[ch] + xhat[k] * sum_gx[ch]) / m)
                                } else {
                                    a * g[k]
                                };
                            }
                        }
                    }
                    acc(*input, gx);
                }
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::Dropout { input, mask } => {
                acc(*input, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect());
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (x, y) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
                acc(*b, g.iter().zip(x).map(|(&gv, &xv)| gv * xv).collect());
            }
            Op::Scale { input, factor } | Op::GradScale { input, factor } => {
                acc(*input, g.iter().map(|&gv| gv * *factor).collect());
            }
            Op::Sum { input } => {
                acc(*input, vec![g[0]; val(*input).len()]);
            }
            Op::WeightedBce {
                probs,
                targets,
                w_pos,
                w_neg,
                eps,
            } => {
                let p = val(*probs);
                let k = w_pos.len();
                let scale = g[0] / T::of(p.len() as f64);
                let hi = T::one() - *eps;
                let gx = p
                    .data()
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(idx, (&f, &y))| {
                        if f < *eps || f > hi {
                            return T::zero();
                        }
                        let c = idx % k;
                        let d = w_pos[c] * y / f - w_neg[c] * (T::one() - y) / (T::one() - f);
                        -d * scale
                    })
                    .collect();
                acc(*probs, gx);
            }
        }
        Ok(())
    }
}

/// Logistic function with the result kept strictly inside (0, 1).
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(top)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).unwrap().shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).unwrap().data(), &[12., 16., 24., 28.]);

        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        // each kernel tap sums the input values it touches
        assert_eq!(grads.get(k).unwrap().data(), &[12., 16., 24., 28.]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn identity_and_zero_kernels() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 - 3.5).collect();
        let x = g.constant(t(&[1, 1, 3, 4], &data));
        let one = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, one, None, 1, 0).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &data[..]);
        let zero = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let z = g.conv2d(x, zero, None, 1, 0).unwrap();
        assert_eq!(g.value(z).unwrap().shape(), &[1, 1, 2, 3]);
        assert!(g.value(z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[1, 2, 3, 3]));
        let k = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let err = g.conv2d(x, k, None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(ref m) if m.contains("[1, 2, 3, 3]") && m.contains("[1, 3, 2, 2]")));
        let k = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(g.conv2d(x, k, None, 0, 0), Err(Error::InvalidArgument(_))));
        let big = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(g.conv2d(x, big, None, 1, 0), Err(Error::InvalidShape(_))));
        assert!(g.conv2d(x, big, None, 1, 1).is_ok());
    }

    #[test]
    fn global_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2, 2], &[1., 2., 3., 4., 0., 0., 0., 0.]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[2.5, 0.0]);
        let x = g.constant(t(&[1, 2, 2, 2], &[0., 0., 0., 0., 2., 2., 2., 2.]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.0, 2.0]);
        let c = g.constant(Tensor::full(&[1, 1, 3, 5], 7.25));
        let y = g.global_avg_pool(c).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[7.25]);
        let empty = g.constant(Tensor::zeros(&[1, 1, 0, 3]));
        assert!(matches!(g.global_avg_pool(empty), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn power_rule_and_linearity() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);

        let mut g = Graph::new();
        let a = g.param(t(&[3], &[1., 2., 3.]));
        let b = g.param(t(&[3], &[-1., 0.5, 9.]));
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1., 1., 1.]);
        assert_eq!(grads.get(b).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn two_consumers_accumulate() {
        let data = [0.3, -1.2, 2.0];
        let single = |use_relu: bool| {
            let mut g = Graph::new();
            let x = g.param(t(&[3], &data));
            let y = if use_relu { g.relu(x).unwrap() } else { g.sigmoid(x).unwrap() };
            let l = g.sum(y).unwrap();
            g.backward(l).unwrap().get(x).unwrap().clone()
        };
        let mut g = Graph::new();
        let x = g.param(t(&[3], &data));
        let r = g.relu(x).unwrap();
        let s = g.sigmoid(x).unwrap();
        let both = g.add(r, s).unwrap();
        let l = g.sum(both).unwrap();
        let grads = g.backward(l).unwrap();
        let expected: Vec<f64> = single(true)
            .data()
            .iter()
            .zip(single(false).data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(grads.get(x).unwrap().data(), &expected[..]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
        let mut other = Graph::<f64>::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(g.backward(y), Err(Error::NoGraph)));
        let s = g.sum(x).unwrap();
        g.reset();
        assert!(matches!(g.backward(s), Err(Error::NoGraph)));
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        for x in [-1e4, -800.0, -40.0, 0.0, 40.0, 800.0, 1e300] {
            let s: f64 = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "{x} -> {s}");
        }
        assert_eq!(sigmoid(0.0f64), 0.5);
        let s32: f32 = sigmoid(100.0f32);
        assert!(s32 < 1.0);
    }

    #[test]
    fn concat_keeps_operands_bitwise() {
        let mut g = Graph::new();
        let a = t(&[2, 1, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let b = t(&[2, 2, 2, 2], &(0..16).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat(&[va, vb]).unwrap();
        let out = g.value(c).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2, 2]);
        for n in 0..2 {
            assert_eq!(&out.data()[n * 12..n * 12 + 4], &a.data()[n * 4..n * 4 + 4]);
            assert_eq!(&out.data()[n * 12 + 4..n * 12 + 12], &b.data()[n * 8..n * 8 + 8]);
        }
        let bad = g.constant(Tensor::zeros(&[2, 1, 3, 2]));
        assert!(g.concat(&[va, bad]).is_err());
    }
}
