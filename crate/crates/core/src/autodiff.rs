//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and whatever the
//! backward pass needs. [`Tape::backward`] walks the nodes in reverse and
//! returns a [`Gradients`] table indexed by [`Var`]. A node only keeps
//! backward state when one of its inputs needs a gradient, so a tape built
//! from non-differentiable leaves doubles as a plain inference graph.

use crate::error::{Error, Result};
use crate::ops::{self, Axis};
use crate::tensor::{ConvGeometry, Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Mean {
        x: Var,
        axis: Axis,
    },
    Shuffle {
        x: Var,
        groups: usize,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Var, Var),
    BroadcastAdd {
        x: Var,
        v: Var,
        axis: Option<Axis>,
    },
    AdaResNorm {
        x: Var,
        lambda: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates of every convolution recorded so far.
    pub fn conv_macs(&self) -> u64 {
        self.nodes
            .iter()
            .filter_map(|node| match &node.op {
                Op::Conv2d { w, .. } => {
                    let ws = self.shape(*w);
                    let os = node.value.shape();
                    Some((ws.numel() * os.n * os.plane()) as u64)
                }
                _ => None,
            })
            .sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = needs_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf. Its gradient is tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t.clone(), Op::Leaf, rg)
    }

    pub fn leaf_owned(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data());
        let y = ops::conv2d_forward(self.value(x), self.value(w), bias, &geom)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }, ng))
    }

    fn check_channel_vec(&self, op: &'static str, x: Var, v: Var) -> Result<()> {
        let c = self.shape(x).c;
        if self.value(v).numel() != c {
            return Err(Error::shape(
                op,
                format!("{} per-channel values for {} channels", self.value(v).numel(), c),
            ));
        }
        Ok(())
    }

    /// Batch normalization with statistics taken from the batch itself.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        self.check_channel_vec("batch_norm", x, gamma)?;
        self.check_channel_vec("batch_norm", x, beta)?;
        let xv = self.value(x);
        let s = xv.shape();
        if s.n * s.plane() == 0 {
            return Err(Error::shape("batch_norm", "empty batch in training mode"));
        }
        let (mean, var) = ops::channel_moments(xv);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(&m, &i)| -m * i).collect();
        let xhat = ops::channel_affine(xv, &inv_std, &shift);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let y = ops::channel_affine(&xhat, g, b);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: if ng { xhat.into_data() } else { Vec::new() },
            inv_std,
            batch_stats: true,
        };
        Ok((self.push(y, op, ng), BatchStats { mean, var }))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.check_channel_vec("batch_norm", x, gamma)?;
        self.check_channel_vec("batch_norm", x, beta)?;
        let c = self.shape(x).c;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(&m, &i)| -m * i).collect();
        let xhat = ops::channel_affine(self.value(x), &inv_std, &shift);
        let y = ops::channel_affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: if ng { xhat.into_data() } else { Vec::new() },
            inv_std,
            batch_stats: false,
        };
        Ok(self.push(y, op, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(x), kernel, stride)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: Axis) -> Var {
        let y = ops::mean_axis(self.value(x), axis);
        let ng = self.needs(x);
        self.push(y, Op::Mean { x, axis }, ng)
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let y = ops::channel_shuffle(self.value(x), groups)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Shuffle { x, groups }, ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(x), start, len)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Slice { x, start }, ng))
    }

    /// Splits the channels into `[0, at)` and `[at, C)`.
    pub fn split_channels(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.shape(x).c;
        if at > c {
            return Err(Error::shape("split_channels", format!("split at {at} of {c}")));
        }
        Ok((self.slice_channels(x, 0, at)?, self.slice_channels(x, at, c - at)?))
    }

    /// Even two-way split.
    pub fn split_half(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.shape(x).c;
        if c % 2 != 0 {
            return Err(Error::Divisibility {
                op: "split_channels",
                channels: c,
                divisor: 2,
            });
        }
        self.split_channels(x, c / 2)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Concat(a, b), ng))
    }

    pub fn broadcast_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let axis = ops::broadcast_axis(self.shape(x), self.shape(v))?;
        let y = ops::broadcast_add(self.value(x), self.value(v))?;
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(y, Op::BroadcastAdd { x, v, axis }, ng))
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{} vs {}", self.shape(a), self.shape(b))));
        }
        self.broadcast_add(a, b)
    }

    /// `lambda_c * x + (1 - lambda_c) * (gamma_c * FreqIN(x) + beta_c)`, where
    /// `FreqIN` standardizes each `(sample, frequency)` slice over channels
    /// and time.
    pub fn ada_res_norm(&mut self, x: Var, lambda: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        for p in [lambda, gamma, beta] {
            self.check_channel_vec("ada_res_norm", x, p)?;
        }
        let xv = self.value(x);
        let s = xv.shape();
        let (mean, inv_std) = ops::freq_moments(xv, eps);
        let normed = Tensor::from_fn(s, |n, c, f, t| (xv.get(n, c, f, t) - mean[n * s.f + f]) * inv_std[n * s.f + f]);
        let lam = self.value(lambda).data();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let y = Tensor::from_fn(s, |n, c, f, t| {
            let l = lam[c];
            l * xv.get(n, c, f, t) + (T::one() - l) * (gam[c] * normed.get(n, c, f, t) + bet[c])
        });
        let ng = self.needs(x) || self.needs(lambda) || self.needs(gamma) || self.needs(beta);
        let op = Op::AdaResNorm {
            x,
            lambda,
            gamma,
            beta,
            normed: if ng { normed.into_data() } else { Vec::new() },
            inv_std,
        };
        Ok(self.push(y, op, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::full(Shape::scalar(), total), Op::Sum(x), ng)
    }

    /// `sum(x * weights)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} vs {}", self.shape(x), weights.shape()),
            ));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let ng = self.needs(x);
        let op = Op::WeightedSum {
            x,
            weights: weights.data().to_vec(),
        };
        Ok(self.push(Tensor::full(Shape::scalar(), total), op, ng))
    }

    /// Mean over the batch of `-sum_k y_k log softmax(logits)_k`. Both
    /// `logits` and `targets` are `(N, K, 1, 1)`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let s = self.shape(logits);
        if s.f != 1 || s.t != 1 || targets.shape() != s {
            return Err(Error::shape(
                "soft_cross_entropy",
                format!("logits {s}, targets {}", targets.shape()),
            ));
        }
        let logp = ops::log_softmax_rows(self.value(logits).data(), s.c);
        let n = T::lit(s.n as f64);
        let loss = -logp
            .iter()
            .zip(targets.data())
            .map(|(&lp, &y)| lp * y)
            .sum::<T>()
            / n;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let ng = self.needs(logits);
        let op = Op::SoftCrossEntropy {
            logits,
            targets: targets.data().to_vec(),
            probs,
        };
        Ok(self.push(Tensor::full(Shape::scalar(), loss), op, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(Error::NotScalar { op: "backward", shape: s });
        }
        self.backward_with_seed(loss, &Tensor::ones(s))
    }

    /// Reverse pass from an arbitrary node, seeded with `seed` as the
    /// upstream gradient.
    pub fn backward_with_seed(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape(
                "backward",
                format!("seed {} for output {}", seed.shape(), self.shape(out)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.needs(out) {
            return Ok(Gradients { grads, shapes: self.shapes() });
        }
        grads[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at node {i}")));
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes: self.shapes() })
    }

    fn shapes(&self) -> Vec<Shape> {
        self.nodes.iter().map(|n| n.value.shape()).collect()
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let cg = ops::conv2d_backward(self.value(*x), self.value(*w), g, geom, need);
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = cg.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(*b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = node.value.shape();
                let plane = s.plane();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); s.c];
                let mut sum_gx = vec![T::zero(); s.c];
                for (i, (gp, xp)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let c = i % s.c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        sum_g[c] = sum_g[c] + gv;
                        sum_gx[c] = sum_gx[c] + gv * xv;
                    }
                }
                if self.needs(*x) {
                    let m = T::lit((s.n * plane) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (i, ((dp, gp), xp)) in dx.chunks_mut(plane).zip(g.chunks(plane)).zip(xhat.chunks(plane)).enumerate() {
                        let c = i % s.c;
                        let k = gam[c] * inv_std[c];
                        if *batch_stats {
                            let mg = sum_g[c] / m;
                            let mgx = sum_gx[c] / m;
                            for ((d, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
                                *d = k * (gv - mg - xv * mgx);
                            }
                        } else {
                            for (d, &gv) in dp.iter_mut().zip(gp) {
                                *d = k * gv;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::Relu(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() }).collect());
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i] = dx[i] + gv;
                }
                acc(*x, dx);
            }
            Op::Mean { x, axis } => {
                let s = self.shape(*x);
                let dx = match axis {
                    Axis::F => {
                        let inv = T::one() / T::lit(s.f as f64);
                        Tensor::from_fn(s, |n, c, _, t| g[(n * s.c + c) * s.t + t] * inv)
                    }
                    Axis::T => {
                        let inv = T::one() / T::lit(s.t as f64);
                        Tensor::from_fn(s, |n, c, f, _| g[(n * s.c + c) * s.f + f] * inv)
                    }
                    Axis::FT => {
                        let inv = T::one() / T::lit(s.plane() as f64);
                        Tensor::from_fn(s, |n, c, _, _| g[n * s.c + c] * inv)
                    }
                };
                acc(*x, dx.into_data());
            }
            Op::Shuffle { x, groups } => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut dx = vec![T::zero(); g.len()];
                for n in 0..s.n {
                    for j in 0..s.c {
                        let src = ops::shuffle_source(j, s.c, *groups);
                        dx[(n * s.c + src) * plane..][..plane].copy_from_slice(&g[(n * s.c + j) * plane..][..plane]);
                    }
                }
                acc(*x, dx);
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let ys = node.value.shape();
                let plane = xs.plane();
                let mut dx = vec![T::zero(); xs.numel()];
                for n in 0..xs.n {
                    dx[(n * xs.c + start) * plane..][..ys.c * plane]
                        .copy_from_slice(&g[n * ys.c * plane..][..ys.c * plane]);
                }
                acc(*x, dx);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa.plane();
                let total = sa.c + sb.c;
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                for n in 0..sa.n {
                    let row = &g[n * total * plane..][..total * plane];
                    da.extend_from_slice(&row[..sa.c * plane]);
                    db.extend_from_slice(&row[sa.c * plane..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::BroadcastAdd { x, v, axis } => {
                acc(*x, g.to_vec());
                if self.needs(*v) {
                    let s = node.value.shape();
                    let gt = Tensor::from_vec(s, g.to_vec()).expect("gradient shape");
                    let dv = match axis {
                        None => gt.into_data(),
                        Some(a) => {
                            let m = ops::mean_axis(&gt, *a);
                            let k = T::lit(match a {
                                Axis::F => s.f,
                                Axis::T => s.t,
                                Axis::FT => s.plane(),
                            } as f64);
                            m.scale(k).into_data()
                        }
                    };
                    acc(*v, dv);
                }
            }
            Op::AdaResNorm {
                x,
                lambda,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let s = node.value.shape();
                let xv = self.value(*x);
                let lam = self.value(*lambda).data();
                let gam = self.value(*gamma).data();
                let bet = self.value(*beta).data();
                let mut dl = vec![T::zero(); s.c];
                let mut dg = vec![T::zero(); s.c];
                let mut db = vec![T::zero(); s.c];
                // upstream gradient reaching the normalized tensor
                let mut gn = vec![T::zero(); g.len()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let one_m = T::one() - lam[c];
                        for f in 0..s.f {
                            for t in 0..s.t {
                                let i = s.index(n, c, f, t);
                                let nv = normed[i];
                                dl[c] = dl[c] + g[i] * (xv.data()[i] - (gam[c] * nv + bet[c]));
                                dg[c] = dg[c] + g[i] * one_m * nv;
                                db[c] = db[c] + g[i] * one_m;
                                gn[i] = g[i] * one_m * gam[c];
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let m = T::lit((s.c * s.t) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for n in 0..s.n {
                        for f in 0..s.f {
                            let mut sg = T::zero();
                            let mut sgn = T::zero();
                            for c in 0..s.c {
                                for t in 0..s.t {
                                    let i = s.index(n, c, f, t);
                                    sg = sg + gn[i];
                                    sgn = sgn + gn[i] * normed[i];
                                }
                            }
                            let (mg, mgn) = (sg / m, sgn / m);
                            let is = inv_std[n * s.f + f];
                            for c in 0..s.c {
                                for t in 0..s.t {
                                    let i = s.index(n, c, f, t);
                                    dx[i] = lam[c] * g[i] + is * (gn[i] - mg - normed[i] * mgn);
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*lambda, dl);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Sum(x) => {
                acc(*x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, weights.iter().map(|&w| w * g[0]).collect());
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = self.shape(*logits);
                let k = s.c;
                let n = T::lit(s.n as f64);
                let mut d = Vec::with_capacity(probs.len());
                for (prow, yrow) in probs.chunks(k).zip(targets.chunks(k)) {
                    let ysum: T = yrow.iter().copied().sum();
                    d.extend(prow.iter().zip(yrow).map(|(&p, &y)| g[0] * (p * ysum - y) / n));
                }
                acc(*logits, d);
            }
        }
    }
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when no gradient reached `v`.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let s = self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::from_vec(s, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(s),
        }
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng).with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        let g = tape.backward(s).unwrap();
        assert!(g.get(xv).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_grad_is_mask() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![-1.0, 2.0, 0.5, -0.25])
            .unwrap()
            .with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let r = tape.relu(xv);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 2, 2)).with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let r = tape.relu(xv);
        assert!(matches!(tape.backward(r), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn accumulate_into_tensor_grad() {
        let mut x = Tensor::<f64>::ones(Shape::new(1, 1, 1, 3)).with_requires_grad(true);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let s = tape.sum(xv);
            let g = tape.backward(s).unwrap();
            g.accumulate_into(xv, &mut x).unwrap();
        }
        assert_eq!(x.grad.as_deref(), Some(&[2.0, 2.0, 2.0][..]));
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 1, 3));
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        let g = tape.backward(s).unwrap();
        assert!(g.get(xv).is_none());
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(&Tensor::zeros(Shape::new(3, 10, 1, 1)));
        let y = Tensor::from_fn(Shape::new(3, 10, 1, 1), |n, c, _, _| if c == n { 1.0 } else { 0.0 });
        let l = tape.soft_cross_entropy(logits, &y).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
    }
}
