//! The full TF-SepNet-τ model.
//!
//! ```text
//! input (1, F, T)
//!   ConvBnRelu 3×3 s2 p1            -> (C/2, F/2,  T/2)
//!   ConvBnRelu 3×3 s2 p1 g=C/2      -> (2C,  F/4,  T/4)   + AdaResNorm
//!   TF-SepConvs ×2                  -> (C,   F/4,  T/4)   + AdaResNorm
//!   MaxPool 2                       -> (C,   F/8,  T/8)
//!   TF-SepConvs ×2                  -> (1.5C, F/8, T/8)   + AdaResNorm
//!   MaxPool 2                       -> (1.5C, F/16, T/16)
//!   TF-SepConvs ×2                  -> (2C,  F/16, T/16)  + AdaResNorm
//!   TF-SepConvs ×3                  -> (2.5C, F/16, T/16) + AdaResNorm
//!   Conv 1×1 (bias)                 -> (10,  F/16, T/16)
//!   global average pool             -> (10, 1, 1)
//! ```

pub mod summary;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::blocks::{AdaResNorm, PathSet, TfSepConvs, TfSepConvsSpec};
use crate::error::{Error, Result};
use crate::nn::{count_learned, join, Conv2d, ConvBnRelu, Ctx, MaxPool2d, Module, Param};
use crate::ops::Axis;
use crate::tensor::{ConvGeometry, Element, Shape, Tensor};

pub use summary::{LayerSummary, Summary};

pub const STAGE_DEPTHS: [usize; 4] = [2, 2, 2, 3];
/// Stage widths as multiples of τ.
pub const STAGE_WIDTH_FACTORS: [f64; 4] = [1.0, 1.5, 2.0, 2.5];
/// Total spatial downsampling of the network.
pub const DOWNSAMPLE: usize = 16;

/// Components that can be removed from the reference architecture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_shuffle: bool,
    pub no_freq_path: bool,
    pub no_temp_path: bool,
    pub no_adaresnorm: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = ["no_shuffle", "no_freq_path", "no_temp_path", "no_adaresnorm"];

    /// Parses a comma-separated flag list such as `no_shuffle,no_adaresnorm`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for flag in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match flag {
                "no_shuffle" => a.no_shuffle = true,
                "no_freq_path" => a.no_freq_path = true,
                "no_temp_path" => a.no_temp_path = true,
                "no_adaresnorm" => a.no_adaresnorm = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation flag {other:?} (expected one of {})",
                        Self::FLAGS.join(", ")
                    )))
                }
            }
        }
        Ok(a)
    }

    fn paths(&self) -> PathSet {
        match (self.no_freq_path, self.no_temp_path) {
            (true, _) => PathSet::TempOnly,
            (_, true) => PathSet::FreqOnly,
            _ => PathSet::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Base width `C`.
    pub tau: usize,
    pub num_classes: usize,
    pub ablation: Ablation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::new(40)
    }
}

impl NetConfig {
    pub fn new(tau: usize) -> Self {
        NetConfig {
            tau,
            num_classes: 10,
            ablation: Ablation::default(),
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau < 4 || self.tau % 2 != 0 {
            return Err(Error::Config(format!("tau must be even and at least 4, got {}", self.tau)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.ablation.no_freq_path && self.ablation.no_temp_path {
            return Err(Error::Config(
                "no_freq_path and no_temp_path together leave no path".into(),
            ));
        }
        Ok(())
    }

    /// Channel width of each stage, rounded to the nearest even integer.
    pub fn stage_widths(&self) -> [usize; 4] {
        STAGE_WIDTH_FACTORS.map(|k| ((k * self.tau as f64) / 2.0).round() as usize * 2)
    }

    /// Width after the initial downsampling block.
    pub fn stem_width(&self) -> usize {
        2 * self.tau
    }

    pub fn block_spec(&self, in_ch: usize, out_ch: usize) -> TfSepConvsSpec {
        TfSepConvsSpec {
            in_ch,
            out_ch,
            shuffle_groups: (!self.ablation.no_shuffle).then_some(2),
            paths: self.ablation.paths(),
        }
    }

    /// Checks an input shape against the network's downsampling.
    pub fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != 1 {
            return Err(Error::shape("tfsepnet", format!("input {s} must have one channel")));
        }
        if s.n == 0 || s.f == 0 || s.t == 0 || s.f % DOWNSAMPLE != 0 || s.t % DOWNSAMPLE != 0 {
            return Err(Error::shape(
                "tfsepnet",
                format!("input {s}: F and T must be positive multiples of {DOWNSAMPLE}"),
            ));
        }
        Ok(())
    }
}

/// A group of TF-SepConvs blocks followed by an optional AdaResNorm and an
/// optional 2×2 max pool.
pub struct Stage<T> {
    pub blocks: Vec<TfSepConvs<T>>,
    pub norm: Option<AdaResNorm<T>>,
    pub pool: Option<MaxPool2d>,
}

impl<T: Element> Stage<T> {
    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.spec.out_ch)
    }
}

impl<T: Element> Module<T> for Stage<T> {
    fn forward(&self, ctx: &mut Ctx<T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        if let Some(n) = &self.norm {
            x = n.forward(ctx, x)?;
        }
        if let Some(p) = &self.pool {
            x = p.forward(ctx, x)?;
        }
        Ok(x)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &i.to_string()), f);
        }
        if let Some(n) = &self.norm {
            n.visit_params(&join(prefix, "norm"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
        if let Some(n) = &mut self.norm {
            n.visit_params_mut(&join(prefix, "norm"), f);
        }
    }

    fn output_shape(&self, mut s: Shape) -> Result<Shape> {
        for b in &self.blocks {
            s = b.output_shape(s)?;
        }
        if let Some(n) = &self.norm {
            s = n.output_shape(s)?;
        }
        if let Some(p) = &self.pool {
            s = <MaxPool2d as Module<T>>::output_shape(p, s)?;
        }
        Ok(s)
    }
}

pub struct TfSepNet<T> {
    config: NetConfig,
    pub conv1: ConvBnRelu<T>,
    pub conv2: ConvBnRelu<T>,
    pub stem_norm: Option<AdaResNorm<T>>,
    pub stages: Vec<Stage<T>>,
    pub head: Conv2d<T>,
}

impl<T: Element> TfSepNet<T> {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.tau;
        let half = c / 2;
        let stride2 = |groups| ConvGeometry::new((2, 2), (1, 1), groups);
        let conv1 = ConvBnRelu::new(1, half, (3, 3), stride2(1), rng)?;
        let conv2 = ConvBnRelu::new(half, config.stem_width(), (3, 3), stride2(half), rng)?;
        let norm = |ch| (!config.ablation.no_adaresnorm).then(|| AdaResNorm::new(ch));

        let mut stages = Vec::with_capacity(4);
        let mut in_ch = config.stem_width();
        for (i, (&width, &depth)) in config.stage_widths().iter().zip(&STAGE_DEPTHS).enumerate() {
            let mut blocks = Vec::with_capacity(depth);
            for _ in 0..depth {
                blocks.push(TfSepConvs::new(config.block_spec(in_ch, width), rng)?);
                in_ch = width;
            }
            stages.push(Stage {
                blocks,
                norm: norm(width),
                pool: (i < 2).then(MaxPool2d::halving),
            });
        }
        let head = Conv2d::new(in_ch, config.num_classes, (1, 1), ConvGeometry::default(), true, rng)?;
        Ok(TfSepNet {
            config,
            conv1,
            conv2,
            stem_norm: norm(config.stem_width()),
            stages,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Width of the pre-classifier feature map.
    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(0, Stage::out_channels)
    }

    /// Pre-classifier features: everything up to and including the last
    /// stage's normalization.
    pub fn features(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.config.check_input(ctx.tape.shape(x))?;
        let mut h = self.conv1.forward(ctx, x)?;
        h = self.conv2.forward(ctx, h)?;
        if let Some(n) = &self.stem_norm {
            h = n.forward(ctx, h)?;
        }
        for s in &self.stages {
            h = s.forward(ctx, h)?;
        }
        Ok(h)
    }

    /// Logits as an `(N, classes, 1, 1)` tensor.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::nn::infer(self, x)
    }

    /// Learned scalars; batch-norm running statistics are not counted.
    pub fn count_params(&self) -> usize {
        count_learned(self)
    }

    /// Convolution multiply-accumulates for one forward pass.
    pub fn count_macs(&self, input: Shape) -> Result<u64> {
        Ok(Summary::of(self, input)?.total_macs)
    }

    pub fn summary(&self, input: Shape) -> Result<Summary> {
        Summary::of(self, input)
    }

    /// Copies every parameter and buffer, converting the element type.
    pub fn cast<U: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TfSepNet<U>> {
        let mut values = std::collections::HashMap::new();
        self.visit_params("", &mut |name, p| {
            values.insert(name.to_string(), p.value.cast::<U>());
        });
        let mut out = TfSepNet::<U>::new(self.config, rng)?;
        out.visit_params_mut("", &mut |name, p| {
            if let Some(v) = values.remove(name) {
                p.value = v;
            }
        });
        Ok(out)
    }
}

impl<T: Element> Module<T> for TfSepNet<T> {
    fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.features(ctx, x)?;
        let y = self.head.forward(ctx, h)?;
        Ok(ctx.tape.mean_axis(y, Axis::FT))
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit_params(&join(prefix, "stem.conv1"), f);
        self.conv2.visit_params(&join(prefix, "stem.conv2"), f);
        if let Some(n) = &self.stem_norm {
            n.visit_params(&join(prefix, "stem.norm"), f);
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_params(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_params_mut(&join(prefix, "stem.conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "stem.conv2"), f);
        if let Some(n) = &mut self.stem_norm {
            n.visit_params_mut(&join(prefix, "stem.norm"), f);
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.config.check_input(input)?;
        let mut s = self.conv2.output_shape(self.conv1.output_shape(input)?)?;
        for st in &self.stages {
            s = st.output_shape(s)?;
        }
        let s = self.head.output_shape(s)?;
        Ok(Shape::new(s.n, s.c, 1, 1))
    }
}

/// Row-wise softmax of `(N, K, 1, 1)` logits.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let k = s.c * s.plane();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Index of the largest logit per sample.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let s = logits.shape();
    let k = s.c * s.plane();
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(cfg: NetConfig) -> TfSepNet<f32> {
        TfSepNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn stage_widths_round_to_even() {
        assert_eq!(NetConfig::new(40).stage_widths(), [40, 60, 80, 100]);
        assert_eq!(NetConfig::new(8).stage_widths(), [8, 12, 16, 20]);
        for w in NetConfig::new(6).stage_widths() {
            assert_eq!(w % 2, 0);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(NetConfig::new(7).validate().is_err());
        assert!(NetConfig::new(2).validate().is_err());
        let both = Ablation {
            no_freq_path: true,
            no_temp_path: true,
            ..Default::default()
        };
        assert!(NetConfig::new(40).with_ablation(both).validate().is_err());
        assert!(Ablation::parse("no_shuffle,bogus").is_err());
        assert!(Ablation::parse("no_shuffle, no_adaresnorm").unwrap().no_adaresnorm);
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok: NetConfig = serde_json::from_str(r#"{"tau": 8}"#).unwrap();
        assert_eq!(ok.num_classes, 10);
        assert!(serde_json::from_str::<NetConfig>(r#"{"tau": 8, "width": 3}"#).is_err());
    }

    #[test]
    fn tau8_runs_end_to_end() {
        let m = net(NetConfig::new(8));
        let x = Tensor::randn(Shape::new(1, 1, 256, 64), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let y = m.logits(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 10, 1, 1));
        assert!(y.all_finite());
    }

    #[test]
    fn zero_input_gives_a_distribution() {
        let m = net(NetConfig::new(8));
        let y = m.logits(&Tensor::zeros(Shape::new(2, 1, 32, 16))).unwrap();
        let p = softmax(&y);
        for row in p.data().chunks(10) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = net(NetConfig::new(8));
        let x = Tensor::randn(Shape::new(2, 1, 64, 32), 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(m.logits(&x).unwrap().data(), m.logits(&x).unwrap().data());
    }

    #[test]
    fn rejects_indivisible_inputs() {
        let m = net(NetConfig::new(8));
        assert!(m.logits(&Tensor::zeros(Shape::new(1, 1, 40, 64))).is_err());
        assert!(m.logits(&Tensor::zeros(Shape::new(1, 2, 64, 64))).is_err());
    }

    #[test]
    fn parameter_names_are_hierarchical() {
        let m = net(NetConfig::new(8));
        let mut names = Vec::new();
        m.visit_params("", &mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"stem.conv1.conv.weight".to_string()));
        assert!(names.contains(&"stage1.0.transition.conv.weight".to_string()));
        assert!(names.contains(&"stage4.2.temp.pw.bn.gamma".to_string()));
        assert!(names.contains(&"stage2.norm.lambda".to_string()));
        assert!(names.contains(&"head.bias".to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn output_shape_matches_forward() {
        let m = net(NetConfig::new(8));
        let s = Shape::new(1, 1, 64, 32);
        let y = m.logits(&Tensor::zeros(s)).unwrap();
        assert_eq!(m.output_shape(s).unwrap(), y.shape());
    }

    #[test]
    fn cast_preserves_outputs() {
        let m = net(NetConfig::new(8));
        let m64: TfSepNet<f64> = m.cast(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let x = Tensor::<f32>::randn(Shape::new(1, 1, 32, 32), 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let a = m.logits(&x).unwrap();
        let b = m64.logits(&x.cast()).unwrap();
        assert!(a.cast::<f64>().max_abs_diff(&b) < 1e-3);
    }
}
