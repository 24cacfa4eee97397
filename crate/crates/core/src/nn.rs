//! Parameter containers and layers that run on a [`Tape`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, Axis};
use crate::tensor::{ConvGeometry, ConvParams, Element, Shape, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and counted as a model parameter.
    Learned,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    id: ParamId,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn learned(value: Tensor<T>) -> Self {
        Param {
            id: ParamId::fresh(),
            kind: ParamKind::Learned,
            value,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Param {
            id: ParamId::fresh(),
            kind: ParamKind::Buffer,
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn is_learned(&self) -> bool {
        self.kind == ParamKind::Learned
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the tape, the mode, the parameter bindings and
/// any buffer updates (batch-norm running statistics) staged during the pass.
pub struct Ctx<T> {
    pub tape: Tape<T>,
    mode: Mode,
    track_params: bool,
    bindings: HashMap<ParamId, Var>,
    staged: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Element> Ctx<T> {
    /// `track_params` makes learned parameters differentiable leaves.
    pub fn new(mode: Mode, track_params: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            mode,
            track_params,
            bindings: HashMap::new(),
            staged: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train, true)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Leaf for a parameter; registered once per context.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.bindings.get(&p.id) {
            return v;
        }
        let rg = self.track_params && p.is_learned();
        let v = self.tape.leaf_owned(p.value.clone().with_requires_grad(rg));
        self.bindings.insert(p.id, v);
        v
    }

    pub fn input(&mut self, x: &Tensor<T>) -> Var {
        self.tape.leaf(x)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn binding(&self, id: ParamId) -> Option<Var> {
        self.bindings.get(&id).copied()
    }

    pub fn stage_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.staged.push((id, value));
    }

    pub fn take_staged(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.staged)
    }

    /// Gradient for parameter `p` from a reverse pass over this context.
    pub fn param_grad<'g>(&self, grads: &'g Gradients<T>, p: &Param<T>) -> Option<&'g [T]> {
        self.binding(p.id).and_then(|v| grads.get(v))
    }
}

/// Anything with parameters that maps one tape value to another.
pub trait Module<T: Element>: Send + Sync {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var>;

    /// Visits every parameter and buffer with its dotted name.
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    /// Output shape for an input shape, without running the layer.
    fn output_shape(&self, input: Shape) -> Result<Shape>;
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of learned scalars in a module.
pub fn count_learned<T: Element, M: Module<T> + ?Sized>(m: &M) -> usize {
    let mut total = 0;
    m.visit_params("", &mut |_, p| {
        if p.is_learned() {
            total += p.numel();
        }
    });
    total
}

/// Applies staged buffer updates from a training pass.
pub fn apply_staged<T: Element, M: Module<T> + ?Sized>(m: &mut M, staged: Vec<(ParamId, Tensor<T>)>) {
    if staged.is_empty() {
        return;
    }
    let mut map: HashMap<ParamId, Tensor<T>> = staged.into_iter().collect();
    m.visit_params_mut("", &mut |_, p| {
        if let Some(v) = map.remove(&p.id) {
            p.value = v;
        }
    });
}

pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Element> Conv2d<T> {
    /// Kaiming-normal (fan-in) initialization; zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let g = geometry.groups;
        if g == 0 || in_ch % g != 0 || out_ch % g != 0 {
            return Err(Error::Divisibility {
                op: "conv2d",
                channels: if g != 0 && in_ch % g != 0 { in_ch } else { out_ch },
                divisor: g,
            });
        }
        let shape = Shape::new(out_ch, in_ch / g, kernel.0, kernel.1);
        let fan_in = (in_ch / g) * kernel.0 * kernel.1;
        let std = (2.0 / fan_in as f64).sqrt();
        Ok(Conv2d {
            weight: Param::learned(Tensor::randn(shape, std, rng)),
            bias: bias.then(|| Param::learned(Tensor::zeros(Shape::new(1, 1, 1, out_ch)))),
            geometry,
        })
    }

    pub fn from_params(p: &ConvParams<T>) -> Result<Self> {
        p.validate()?;
        let oc = p.out_channels();
        Ok(Conv2d {
            weight: Param::learned(p.kernel.clone()),
            bias: match &p.bias {
                Some(b) => Some(Param::learned(Tensor::from_vec(Shape::new(1, 1, 1, oc), b.clone())?)),
                None => None,
            },
            geometry: p.geometry,
        })
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s.f, s.t)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape().c * self.geometry.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }

    /// Multiply-accumulates for one forward pass at `input`.
    pub fn macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        let w = self.weight.value.shape();
        Ok((w.f * w.t * w.c * w.n) as u64 * (out.n * out.plane()) as u64)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.geometry)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        ops::conv_output_shape(
            input,
            self.weight.value.shape(),
            self.bias.as_ref().map(|b| b.numel()),
            &self.geometry,
        )
    }
}

/// Batch normalization over `(N, F, T)` per channel.
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, 1, 1, channels);
        BatchNorm2d {
            gamma: Param::learned(Tensor::ones(s)),
            beta: Param::learned(Tensor::zeros(s)),
            running_mean: Param::buffer(Tensor::zeros(s)),
            running_var: Param::buffer(Tensor::ones(s)),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Invalid("batch norm epsilon must be positive".into()));
        }
        if self.running_var.value.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Invalid("negative running variance".into()));
        }
        Ok(())
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c;
        if c != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                format!("input has {c} channels, state has {}", self.channels()),
            ));
        }
        let gamma = ctx.param(&self.gamma);
        let beta = ctx.param(&self.beta);
        let eps = T::lit(self.eps);
        match ctx.mode() {
            Mode::Eval => ctx.tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                eps,
            ),
            Mode::Train => {
                let s = ctx.tape.shape(x);
                let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, eps)?;
                let m = (s.n * s.plane()) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let k = T::lit(self.momentum);
                let one_k = T::one() - k;
                let rs = self.running_mean.value.shape();
                let mean: Vec<T> = self
                    .running_mean
                    .value
                    .data()
                    .iter()
                    .zip(&stats.mean)
                    .map(|(&r, &b)| one_k * r + k * b)
                    .collect();
                let var: Vec<T> = self
                    .running_var
                    .value
                    .data()
                    .iter()
                    .zip(&stats.var)
                    .map(|(&r, &b)| one_k * r + k * b * T::lit(unbias))
                    .collect();
                ctx.stage_update(self.running_mean.id(), Tensor::from_vec(rs, mean)?);
                ctx.stage_update(self.running_var.id(), Tensor::from_vec(rs, var)?);
                Ok(y)
            }
        }
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.channels() {
            return Err(Error::shape("batch_norm", format!("{input} vs {} channels", self.channels())));
        }
        Ok(input)
    }
}

/// Convolution followed by batch norm and ReLU.
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Element> ConvBnRelu<T> {
    /// Bias-free convolution; the batch norm shift takes its place.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(in_ch, out_ch, kernel, geometry, false, rng)?,
            bn: BatchNorm2d::new(out_ch),
        })
    }
}

impl<T: Element> Module<T> for ConvBnRelu<T> {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.conv.output_shape(input)
    }
}

pub struct Relu;

impl<T: Element> Module<T> for Relu {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        Ok(ctx.tape.relu(x))
    }
    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(input)
    }
}

pub struct MaxPool2d {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl MaxPool2d {
    pub fn halving() -> Self {
        MaxPool2d {
            kernel: (2, 2),
            stride: (2, 2),
        }
    }
}

impl<T: Element> Module<T> for MaxPool2d {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        ctx.tape.maxpool2d(x, self.kernel, self.stride)
    }
    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
    fn output_shape(&self, s: Shape) -> Result<Shape> {
        let (kf, kt) = self.kernel;
        let (sf, st) = self.stride;
        if s.f < kf || s.t < kt || (s.f - kf) % sf != 0 || (s.t - kt) % st != 0 {
            return Err(Error::shape("maxpool2d", format!("{s} not evenly divisible")));
        }
        Ok(Shape::new(s.n, s.c, (s.f - kf) / sf + 1, (s.t - kt) / st + 1))
    }
}

/// Mean over both spatial axes, `(N, C, F, T) -> (N, C, 1, 1)`.
pub struct GlobalAvgPool;

impl<T: Element> Module<T> for GlobalAvgPool {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        Ok(ctx.tape.mean_axis(x, Axis::FT))
    }
    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
    fn output_shape(&self, s: Shape) -> Result<Shape> {
        Ok(Shape::new(s.n, s.c, 1, 1))
    }
}

/// Layers applied in order. Child names are their positions.
pub struct Sequential<T: Element> {
    pub layers: Vec<Box<dyn Module<T>>>,
}

impl<T: Element> Default for Sequential<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Sequential<T> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(mut self, layer: impl Module<T> + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }
}

impl<T: Element> Module<T> for Sequential<T> {
    fn forward(&self, ctx: &mut Ctx<T>, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(ctx, x)?;
        }
        Ok(x)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn output_shape(&self, mut s: Shape) -> Result<Shape> {
        for l in &self.layers {
            s = l.output_shape(s)?;
        }
        Ok(s)
    }
}

/// Runs `m` in eval mode on a detached input.
pub fn infer<T: Element, M: Module<T> + ?Sized>(m: &M, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut ctx = Ctx::eval();
    let xv = ctx.input(x);
    let y = m.forward(&mut ctx, xv)?;
    Ok(ctx.tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bn_constant_channel_train_is_zero() {
        let bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::full(Shape::new(2, 1, 3, 3), 4.0);
        let mut ctx = Ctx::train();
        let xv = ctx.input(&x);
        let y = bn.forward(&mut ctx, xv).unwrap();
        assert!(ctx.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_eval_shift() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.eps = 1e-300;
        bn.beta.value = Tensor::full(Shape::new(1, 1, 1, 2), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(Shape::new(2, 2, 3, 4), 1.0, &mut rng);
        let y = infer(&bn, &x).unwrap();
        let expect = x.map(|v| v + 5.0);
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn bn_train_moments() {
        let bn = BatchNorm2d::<f64>::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(Shape::new(4, 3, 5, 6), 2.0, &mut rng).map(|v| v + 1.5);
        let mut ctx = Ctx::train();
        let xv = ctx.input(&x);
        let y = bn.forward(&mut ctx, xv).unwrap();
        let (mean, var) = ops::channel_moments(ctx.value(y));
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-5);
            assert!((var[c] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bn_updates_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut ctx = Ctx::train();
        let xv = ctx.input(&x);
        bn.forward(&mut ctx, xv).unwrap();
        let staged = ctx.take_staged();
        apply_staged(&mut bn, staged);
        assert!((bn.running_mean.value.data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3, blended with the initial 1.0
        assert!((bn.running_var.value.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn bn_rejects_channel_mismatch_and_empty_batch() {
        let bn = BatchNorm2d::<f64>::new(2);
        let mut ctx = Ctx::train();
        let xv = ctx.input(&Tensor::zeros(Shape::new(1, 3, 2, 2)));
        assert!(bn.forward(&mut ctx, xv).is_err());
        let xv = ctx.input(&Tensor::zeros(Shape::new(0, 2, 2, 2)));
        assert!(bn.forward(&mut ctx, xv).is_err());
    }

    #[test]
    fn conv_macs_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::<f32>::new(1, 20, (3, 3), ConvGeometry::new((2, 2), (1, 1), 1), false, &mut rng).unwrap();
        assert_eq!(c.macs(Shape::new(1, 1, 256, 64)).unwrap(), 9 * 20 * 128 * 32);
        assert_eq!(count_learned(&c), 180);
    }

    #[test]
    fn param_ids_are_unique() {
        let a = Param::learned(Tensor::<f32>::zeros(Shape::scalar()));
        let b = Param::learned(Tensor::<f32>::zeros(Shape::scalar()));
        assert_ne!(a.id(), b.id());
    }
}
