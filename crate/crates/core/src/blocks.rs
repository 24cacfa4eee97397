//! TF-SepConvs, adaptive residual normalization and the consecutive-kernel
//! baseline block.
//!
//! A TF-SepConvs block runs an optional 1×1 transition, shuffles channels,
//! splits them in half and sends one half through a frequency path and the
//! other through a time path:
//!
//! ```text
//! x ─ [1×1 conv+BN+ReLU if C≠C′] ─ shuffle ─ split ─┬─ freq path ─┬─ concat ─ y
//!                                                   └─ temp path ─┘
//! freq path:  v = ReLU(BN(PW₁ₓ₁(mean_F(ReLU(BN(DW₃ₓ₁(x)))))));  x + v broadcast over F
//! temp path:  v = ReLU(BN(PW₁ₓ₁(mean_T(ReLU(BN(DW₁ₓ₃(x)))))));  x + v broadcast over T
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{join, ConvBnRelu, Ctx, Module, Param};
use crate::ops::Axis;
use crate::tensor::{ConvGeometry, Element, Shape, Tensor};

/// Which axis a separated path convolves along and then pools away.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathAxis {
    /// 3×1 kernel, mean over frequency, broadcast back over frequency.
    Freq,
    /// 1×3 kernel, mean over time, broadcast back over time.
    Temp,
}

impl PathAxis {
    pub fn kernel(self) -> (usize, usize) {
        match self {
            PathAxis::Freq => (3, 1),
            PathAxis::Temp => (1, 3),
        }
    }

    fn padding(self) -> (usize, usize) {
        match self {
            PathAxis::Freq => (1, 0),
            PathAxis::Temp => (0, 1),
        }
    }

    pub fn pooled(self) -> Axis {
        match self {
            PathAxis::Freq => Axis::F,
            PathAxis::Temp => Axis::T,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PathAxis::Freq => "freq",
            PathAxis::Temp => "temp",
        }
    }
}

/// One separated path: depthwise 1-D conv, axis mean, pointwise conv, and
/// the broadcast residual onto the path input.
pub struct AxisPath<T> {
    pub axis: PathAxis,
    pub depthwise: ConvBnRelu<T>,
    pub pointwise: ConvBnRelu<T>,
}

impl<T: Element> AxisPath<T> {
    pub fn new<R: Rng + ?Sized>(axis: PathAxis, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(AxisPath {
            axis,
            depthwise: ConvBnRelu::new(
                channels,
                channels,
                axis.kernel(),
                ConvGeometry::new((1, 1), axis.padding(), channels),
                rng,
            )?,
            pointwise: ConvBnRelu::new(channels, channels, (1, 1), ConvGeometry::default(), rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.pointwise.conv.out_channels()
    }

    /// The pooled vector `v` before it is broadcast back.
    pub fn squeeze(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.depthwise.forward(ctx, x)?;
        let m = ctx.tape.mean_axis(h, self.axis.pooled());
        self.pointwise.forward(ctx, m)
    }
}

impl<T: Element> Module<T> for AxisPath<T> {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c;
        if c != self.channels() {
            return Err(Error::shape(
                "axis_path",
                format!("{c} input channels for a {}-channel path", self.channels()),
            ));
        }
        let v = self.squeeze(ctx, x)?;
        ctx.tape.broadcast_add(x, v)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.depthwise.visit_params(&join(prefix, "dw"), f);
        self.pointwise.visit_params(&join(prefix, "pw"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.depthwise.visit_params_mut(&join(prefix, "dw"), f);
        self.pointwise.visit_params_mut(&join(prefix, "pw"), f);
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.channels() {
            return Err(Error::shape("axis_path", format!("{input} vs {} channels", self.channels())));
        }
        Ok(input)
    }
}

/// Which separated paths a block keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathSet {
    Both,
    /// The frequency path is removed; the time path takes every channel.
    TempOnly,
    /// The time path is removed; the frequency path takes every channel.
    FreqOnly,
}

/// Hyperparameters of one TF-SepConvs block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TfSepConvsSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `None` disables the channel shuffle.
    pub shuffle_groups: Option<usize>,
    pub paths: PathSet,
}

impl TfSepConvsSpec {
    pub fn new(in_ch: usize, out_ch: usize) -> Self {
        TfSepConvsSpec {
            in_ch,
            out_ch,
            shuffle_groups: Some(2),
            paths: PathSet::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::Invalid("block channel counts must be positive".into()));
        }
        if self.paths == PathSet::Both && self.out_ch % 2 != 0 {
            return Err(Error::Divisibility {
                op: "tf_sepconvs",
                channels: self.out_ch,
                divisor: 2,
            });
        }
        if let Some(g) = self.shuffle_groups {
            if g == 0 || self.out_ch % g != 0 {
                return Err(Error::Divisibility {
                    op: "channel_shuffle",
                    channels: self.out_ch,
                    divisor: g,
                });
            }
        }
        Ok(())
    }

    pub fn has_transition(&self) -> bool {
        self.in_ch != self.out_ch
    }
}

pub struct TfSepConvs<T> {
    pub spec: TfSepConvsSpec,
    pub transition: Option<ConvBnRelu<T>>,
    pub freq: Option<AxisPath<T>>,
    pub temp: Option<AxisPath<T>>,
}

impl<T: Element> TfSepConvs<T> {
    pub fn new<R: Rng + ?Sized>(spec: TfSepConvsSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let transition = if spec.has_transition() {
            Some(ConvBnRelu::new(spec.in_ch, spec.out_ch, (1, 1), ConvGeometry::default(), rng)?)
        } else {
            None
        };
        let (freq, temp) = match spec.paths {
            PathSet::Both => {
                let half = spec.out_ch / 2;
                (
                    Some(AxisPath::new(PathAxis::Freq, half, rng)?),
                    Some(AxisPath::new(PathAxis::Temp, half, rng)?),
                )
            }
            PathSet::FreqOnly => (Some(AxisPath::new(PathAxis::Freq, spec.out_ch, rng)?), None),
            PathSet::TempOnly => (None, Some(AxisPath::new(PathAxis::Temp, spec.out_ch, rng)?)),
        };
        Ok(TfSepConvs {
            spec,
            transition,
            freq,
            temp,
        })
    }

    /// Features entering the paths: transition output, shuffled.
    pub fn shuffled(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c;
        if c != self.spec.in_ch {
            return Err(Error::shape(
                "tf_sepconvs",
                format!("{c} input channels, block expects {}", self.spec.in_ch),
            ));
        }
        let mut h = match &self.transition {
            Some(t) => t.forward(ctx, x)?,
            None => x,
        };
        if let Some(g) = self.spec.shuffle_groups {
            h = ctx.tape.channel_shuffle(h, g)?;
        }
        Ok(h)
    }
}

impl<T: Element> Module<T> for TfSepConvs<T> {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.shuffled(ctx, x)?;
        match (&self.freq, &self.temp) {
            (Some(fp), Some(tp)) => {
                let (xf, xt) = ctx.tape.split_half(h)?;
                let yf = fp.forward(ctx, xf)?;
                let yt = tp.forward(ctx, xt)?;
                ctx.tape.concat_channels(yf, yt)
            }
            (Some(p), None) | (None, Some(p)) => p.forward(ctx, h),
            (None, None) => Ok(h),
        }
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(t) = &self.transition {
            t.visit_params(&join(prefix, "transition"), f);
        }
        for p in [&self.freq, &self.temp].into_iter().flatten() {
            p.visit_params(&join(prefix, p.axis.name()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(t) = &mut self.transition {
            t.visit_params_mut(&join(prefix, "transition"), f);
        }
        for p in [&mut self.freq, &mut self.temp].into_iter().flatten() {
            let name = p.axis.name();
            p.visit_params_mut(&join(prefix, name), f);
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.spec.in_ch {
            return Err(Error::shape("tf_sepconvs", format!("{input} vs {} channels", self.spec.in_ch)));
        }
        Ok(input.with_c(self.spec.out_ch))
    }
}

pub const ADA_RES_NORM_EPS: f64 = 1e-5;

/// Per-channel blend of the identity and a frequency-wise instance norm:
/// `y = λ_c x + (1 − λ_c)(γ_c FreqIN(x) + β_c)`.
pub struct AdaResNorm<T> {
    pub lambda: Param<T>,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Element> AdaResNorm<T> {
    /// `λ = 0.5`, `γ = 1`, `β = 0`.
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, 1, 1, channels);
        AdaResNorm {
            lambda: Param::learned(Tensor::full(s, T::lit(0.5))),
            gamma: Param::learned(Tensor::ones(s)),
            beta: Param::learned(Tensor::zeros(s)),
            eps: ADA_RES_NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.lambda.numel()
    }
}

impl<T: Element> Module<T> for AdaResNorm<T> {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let l = ctx.param(&self.lambda);
        let g = ctx.param(&self.gamma);
        let b = ctx.param(&self.beta);
        ctx.tape.ada_res_norm(x, l, g, b, T::lit(self.eps))
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "lambda"), &self.lambda);
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "lambda"), &mut self.lambda);
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.channels() {
            return Err(Error::shape("ada_res_norm", format!("{input} vs {} channels", self.channels())));
        }
        Ok(input)
    }
}

/// Consecutive 1-D kernels on the full width: 3×1 then 1×3 depthwise,
/// a pointwise conv on the full map, and an identity residual.
pub struct ConsecutiveBlock<T> {
    pub freq_dw: ConvBnRelu<T>,
    pub temp_dw: ConvBnRelu<T>,
    pub pointwise: ConvBnRelu<T>,
}

impl<T: Element> ConsecutiveBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        let dw = |axis: PathAxis, rng: &mut R| {
            ConvBnRelu::new(
                channels,
                channels,
                axis.kernel(),
                ConvGeometry::new((1, 1), axis.padding(), channels),
                rng,
            )
        };
        Ok(ConsecutiveBlock {
            freq_dw: dw(PathAxis::Freq, rng)?,
            temp_dw: dw(PathAxis::Temp, rng)?,
            pointwise: ConvBnRelu::new(channels, channels, (1, 1), ConvGeometry::default(), rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.pointwise.conv.out_channels()
    }
}

impl<T: Element> Module<T> for ConsecutiveBlock<T> {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c;
        if c != self.channels() {
            return Err(Error::shape(
                "consecutive_block",
                format!("{c} input channels, block expects {}", self.channels()),
            ));
        }
        let h = self.freq_dw.forward(ctx, x)?;
        let h = self.temp_dw.forward(ctx, h)?;
        let h = self.pointwise.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.freq_dw.visit_params(&join(prefix, "freq_dw"), f);
        self.temp_dw.visit_params(&join(prefix, "temp_dw"), f);
        self.pointwise.visit_params(&join(prefix, "pw"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.freq_dw.visit_params_mut(&join(prefix, "freq_dw"), f);
        self.temp_dw.visit_params_mut(&join(prefix, "temp_dw"), f);
        self.pointwise.visit_params_mut(&join(prefix, "pw"), f);
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.channels() {
            return Err(Error::shape("consecutive_block", format!("{input} vs {} channels", self.channels())));
        }
        Ok(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{count_learned, infer, BatchNorm2d, Conv2d};
    use crate::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_weights<T: Element, M: Module<T>>(m: &mut M) {
        m.visit_params_mut("", &mut |name, p| {
            if name.ends_with("weight") {
                p.value = Tensor::zeros(p.value.shape());
            }
        });
    }

    /// Random BN statistics and affine terms so eval mode is not an identity.
    fn randomize_bn<T: Element, M: Module<T>>(m: &mut M, rng: &mut ChaCha8Rng) {
        m.visit_params_mut("", &mut |name, p| {
            let s = p.value.shape();
            let r = Tensor::<T>::randn(s, 0.3, rng);
            if name.ends_with("gamma") || name.ends_with("running_var") {
                p.value = r.map(|v| T::one() + v.abs());
            } else if name.ends_with("beta") || name.ends_with("running_mean") {
                p.value = r;
            }
        });
    }

    fn eval_bn_relu<T: Element>(x: &Tensor<T>, bn: &BatchNorm2d<T>) -> Tensor<T> {
        let s = x.shape();
        let eps = T::lit(bn.eps);
        Tensor::from_fn(s, |n, c, f, t| {
            let m = bn.running_mean.value.data()[c];
            let v = bn.running_var.value.data()[c];
            let y = bn.gamma.value.data()[c] * (x.get(n, c, f, t) - m) / (v + eps).sqrt() + bn.beta.value.data()[c];
            y.max(T::zero())
        })
    }

    fn conv_detached<T: Element>(x: &Tensor<T>, c: &Conv2d<T>) -> Tensor<T> {
        ops::conv2d_forward(x, &c.weight.value, None, &c.geometry).unwrap()
    }

    /// Straight-line frequency path on detached tensors.
    fn freq_path_reference(x: &Tensor<f64>, p: &AxisPath<f64>) -> Tensor<f64> {
        let h = eval_bn_relu(&conv_detached(x, &p.depthwise.conv), &p.depthwise.bn);
        let s = h.shape();
        let m = Tensor::from_fn(Shape::new(s.n, s.c, 1, s.t), |n, c, _, t| {
            (0..s.f).map(|f| h.get(n, c, f, t)).sum::<f64>() / s.f as f64
        });
        let v = eval_bn_relu(&conv_detached(&m, &p.pointwise.conv), &p.pointwise.bn);
        Tensor::from_fn(x.shape(), |n, c, f, t| x.get(n, c, f, t) + v.get(n, c, 0, t))
    }

    #[test]
    fn freq_path_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AxisPath::<f32>::new(PathAxis::Freq, 20, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(2, 20, 64, 16), 1.0, &mut rng);
        let mut ctx = Ctx::eval();
        let xv = ctx.input(&x);
        let v = p.squeeze(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.shape(v), Shape::new(2, 20, 1, 16));
        let y = p.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.shape(y), Shape::new(2, 20, 64, 16));
    }

    #[test]
    fn temp_path_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AxisPath::<f32>::new(PathAxis::Temp, 20, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(2, 20, 64, 16), 1.0, &mut rng);
        let mut ctx = Ctx::eval();
        let xv = ctx.input(&x);
        let v = p.squeeze(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.shape(v), Shape::new(2, 20, 64, 1));
    }

    #[test]
    fn zero_weight_paths_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(Shape::new(2, 6, 8, 5), 1.0, &mut rng);
        for axis in [PathAxis::Freq, PathAxis::Temp] {
            let mut p = AxisPath::<f64>::new(axis, 6, &mut rng).unwrap();
            zero_weights(&mut p);
            assert_eq!(infer(&p, &x).unwrap(), x);
        }
        let mut c = ConsecutiveBlock::<f64>::new(6, &mut rng).unwrap();
        zero_weights(&mut c);
        assert_eq!(infer(&c, &x).unwrap(), x);
    }

    #[test]
    fn freq_path_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = AxisPath::<f64>::new(PathAxis::Freq, 5, &mut rng).unwrap();
        randomize_bn(&mut p, &mut rng);
        let x = Tensor::randn(Shape::new(2, 5, 12, 7), 1.0, &mut rng);
        let y = infer(&p, &x).unwrap();
        assert!(y.max_abs_diff(&freq_path_reference(&x, &p)) < 1e-6);
    }

    #[test]
    fn temp_path_is_transposed_freq_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut fp = AxisPath::<f64>::new(PathAxis::Freq, 4, &mut rng).unwrap();
        randomize_bn(&mut fp, &mut rng);
        let mut tp = AxisPath::<f64>::new(PathAxis::Temp, 4, &mut rng).unwrap();
        // copy every parameter, transposing the depthwise kernel
        let mut values = Vec::new();
        fp.visit_params("", &mut |_, p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        tp.visit_params_mut("", &mut |name, p| {
            let v = it.next().unwrap();
            p.value = if name == "dw.conv.weight" { v.transpose_ft() } else { v };
        });
        let x = Tensor::randn(Shape::new(2, 4, 9, 6), 1.0, &mut rng);
        let yt = infer(&tp, &x).unwrap();
        let yf = infer(&fp, &x.transpose_ft()).unwrap().transpose_ft();
        assert!(yt.max_abs_diff(&yf) < 1e-12);
    }

    #[test]
    fn block_channel_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = TfSepConvs::<f32>::new(TfSepConvsSpec::new(80, 40), &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(2, 80, 64, 16), 1.0, &mut rng);
        assert_eq!(infer(&b, &x).unwrap().shape(), Shape::new(2, 40, 64, 16));
        assert!(b.transition.is_some());
    }

    #[test]
    fn same_width_block_has_no_transition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = TfSepConvs::<f32>::new(TfSepConvsSpec::new(40, 40), &mut rng).unwrap();
        assert!(b.transition.is_none());
        // two paths of 20 channels: DW 3·20 + BN 40, PW 20·20 + BN 40
        let per_path = 60 + 40 + 400 + 40;
        assert_eq!(count_learned(&b), 2 * per_path);
    }

    #[test]
    fn zero_weight_block_passes_shuffled_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = TfSepConvs::<f64>::new(TfSepConvsSpec::new(8, 8), &mut rng).unwrap();
        zero_weights(&mut b);
        let x = Tensor::randn(Shape::new(2, 8, 6, 6), 1.0, &mut rng);
        let y = infer(&b, &x).unwrap();
        assert_eq!(y, ops::channel_shuffle(&x, 2).unwrap());
    }

    #[test]
    fn block_rejects_odd_or_mismatched_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(TfSepConvs::<f32>::new(TfSepConvsSpec::new(8, 7), &mut rng).is_err());
        let b = TfSepConvs::<f32>::new(TfSepConvsSpec::new(8, 8), &mut rng).unwrap();
        assert!(infer(&b, &Tensor::zeros(Shape::new(1, 6, 4, 4))).is_err());
    }

    #[test]
    fn block_halves_equal_independent_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = TfSepConvs::<f64>::new(TfSepConvsSpec::new(6, 10), &mut rng).unwrap();
        randomize_bn(&mut b, &mut rng);
        let x = Tensor::randn(Shape::new(2, 6, 8, 8), 1.0, &mut rng);
        let y = infer(&b, &x).unwrap();
        let mut ctx = Ctx::eval();
        let xv = ctx.input(&x);
        let h = b.shuffled(&mut ctx, xv).unwrap();
        let h = ctx.value(h).clone();
        let yf = infer(b.freq.as_ref().unwrap(), &ops::slice_channels(&h, 0, 5).unwrap()).unwrap();
        let yt = infer(b.temp.as_ref().unwrap(), &ops::slice_channels(&h, 5, 5).unwrap()).unwrap();
        assert_eq!(y, ops::concat_channels(&yf, &yt).unwrap());
    }

    #[test]
    fn ada_res_norm_lambda_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut n = AdaResNorm::<f64>::new(4);
        n.lambda.value = Tensor::ones(n.lambda.value.shape());
        n.gamma.value = Tensor::randn(n.gamma.value.shape(), 1.0, &mut rng);
        let x = Tensor::randn(Shape::new(2, 4, 5, 6), 1.0, &mut rng);
        assert_eq!(infer(&n, &x).unwrap(), x);
    }

    #[test]
    fn ada_res_norm_lambda_zero_is_frequency_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut n = AdaResNorm::<f64>::new(4);
        n.lambda.value = Tensor::zeros(n.lambda.value.shape());
        let x = Tensor::randn(Shape::new(2, 4, 5, 6), 3.0, &mut rng).map(|v| v + 2.0);
        let y = infer(&n, &x).unwrap();
        for b in 0..2 {
            for f in 0..5 {
                let mut acc = 0.0;
                for c in 0..4 {
                    for t in 0..6 {
                        acc += y.get(b, c, f, t);
                    }
                }
                assert!((acc / 24.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ada_res_norm_has_three_params_per_channel() {
        let n = AdaResNorm::<f32>::new(80);
        assert_eq!(count_learned(&n), 240);
        let total: usize = [80, 40, 60, 80, 100].iter().map(|&c| count_learned(&AdaResNorm::<f32>::new(c))).sum();
        assert_eq!(total, 1080);
    }

    #[test]
    fn consecutive_block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = ConsecutiveBlock::<f32>::new(40, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(2, 40, 64, 16), 1.0, &mut rng);
        assert_eq!(infer(&c, &x).unwrap().shape(), Shape::new(2, 40, 64, 16));
    }
    #[test]
    fn block_gradients_match_finite_differences() {
        use crate::gradcheck::{check_module, GradCheckConfig};
        use crate::nn::Mode;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(Shape::new(2, 4, 6, 6), 1.0, &mut rng);
        let mut block = TfSepConvs::<f64>::new(TfSepConvsSpec::new(4, 6), &mut rng).unwrap();
        let mut arn = AdaResNorm::<f64>::new(4);
        let mut cons = ConsecutiveBlock::<f64>::new(4, &mut rng).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let cfg = GradCheckConfig::default();
            for r in [
                check_module(&mut block, &x, mode, &cfg, &mut rng).unwrap(),
                check_module(&mut arn, &x, mode, &cfg, &mut rng).unwrap(),
                check_module(&mut cons, &x, mode, &cfg, &mut rng).unwrap(),
            ] {
                assert!(r.max_rel_error < 1e-5 && r.checked > 100, "{mode:?} {r:?}");
            }
        }
    }
}
