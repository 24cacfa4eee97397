//! Effective receptive fields.
//!
//! For each input, the scalar `s` is the channel sum of the final feature
//! map at its central position `(F'/2, T'/2)`. The map is `|∂s/∂x|` summed
//! over input channels and averaged over inputs. The high-contribution
//! ratio `r(t)` is the area of the smallest centered rectangle, grown one
//! ring at a time with the map's aspect ratio, that holds a fraction `t`
//! of the total mass.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::blocks::{ConsecutiveBlock, TfSepConvs};
use crate::error::{Error, Result};
use crate::network::TfSepNet;
use crate::nn::{Ctx, Module, Sequential};
use crate::tensor::{Element, Shape, Tensor};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.2, 0.3, 0.5];

/// A model whose final feature map the ERF is measured on.
pub trait FeatureModel<T: Element>: Sync {
    fn features(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var>;

    /// Identifies the model's parameters in reports.
    fn fingerprint(&self) -> String;
}

fn module_fingerprint<T: Element, M: Module<T> + ?Sized>(m: &M) -> String {
    let mut h = Sha256::new();
    m.visit_params("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
    });
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

macro_rules! feature_model_via_forward {
    ($($ty:ident),*) => {$(
        impl<T: Element> FeatureModel<T> for $ty<T> {
            fn features(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
                self.forward(ctx, x)
            }
            fn fingerprint(&self) -> String {
                module_fingerprint(self)
            }
        }
    )*};
}

feature_model_via_forward!(Sequential, TfSepConvs, ConsecutiveBlock);

impl<T: Element> FeatureModel<T> for TfSepNet<T> {
    /// Pre-classifier features, before the 1×1 head.
    fn features(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        TfSepNet::features(self, ctx, x)
    }
    fn fingerprint(&self) -> String {
        module_fingerprint(self)
    }
}

/// Contribution scores over the input's `(F, T)` plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfMap {
    pub f: usize,
    pub t: usize,
    /// Sum over samples, row-major with one row per frequency bin.
    sum: Vec<f64>,
    pub samples: usize,
    pub fingerprint: String,
}

impl ErfMap {
    /// A map holding `values` as the mean of one sample.
    pub fn from_values(f: usize, t: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != f * t || f == 0 || t == 0 {
            return Err(Error::Invalid(format!("{} values for a {f}x{t} map", values.len())));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("map values must be finite and non-negative".into()));
        }
        Ok(ErfMap {
            f,
            t,
            sum: values,
            samples: 1,
            fingerprint: String::new(),
        })
    }

    /// Mean contribution of each cell.
    pub fn values(&self) -> Vec<f64> {
        let n = self.samples.max(1) as f64;
        self.sum.iter().map(|v| v / n).collect()
    }

    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.sum[f * self.t + t] / self.samples.max(1) as f64
    }

    pub fn center(&self) -> (usize, usize) {
        (self.f / 2, self.t / 2)
    }

    /// Cells with a strictly positive score.
    pub fn support(&self) -> Vec<bool> {
        self.sum.iter().map(|&v| v > 0.0).collect()
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    /// Pools two maps of the same model; equals computing over the union.
    pub fn merge(&self, other: &ErfMap) -> Result<ErfMap> {
        if (self.f, self.t) != (other.f, other.t) {
            return Err(Error::Invalid("cannot merge maps of different sizes".into()));
        }
        Ok(ErfMap {
            f: self.f,
            t: self.t,
            sum: self.sum.iter().zip(&other.sum).map(|(a, b)| a + b).collect(),
            samples: self.samples + other.samples,
            fingerprint: self.fingerprint.clone(),
        })
    }

    /// `log(1 + m)`, min-max scaled to `[0, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        let logv: Vec<f64> = self.values().iter().map(|v| v.ln_1p()).collect();
        let lo = logv.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            logv.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; logv.len()]
        }
    }

    /// Raw mean values, one line per frequency bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values().chunks(self.t) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ErfMap> {
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Invalid(format!("map csv: {e}")))?;
            rows.push(row);
        }
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Invalid("map csv rows differ in length".into()));
        }
        ErfMap::from_values(rows.len(), t, rows.concat())
    }

    /// Binary 16-bit PGM of [`ErfMap::normalized`], frequency increasing downwards.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.t, self.f).into_bytes();
        for v in self.normalized() {
            let px = (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&px.to_be_bytes());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassMode {
    /// Contribution scores as they are.
    Raw,
    /// `log(1 + m)` per cell before summing.
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Pgm,
    Csv,
}

pub fn export_map(map: &ErfMap, path: &Path, format: ExportFormat) -> Result<()> {
    let bytes = match format {
        ExportFormat::Pgm => map.to_pgm(),
        ExportFormat::Csv => map.to_csv().into_bytes(),
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// ERF of `model` aggregated over `inputs` (each `(N, C, F, T)`; every item
/// counts as one sample). The model is run in eval mode.
pub fn compute_erf<T: Element, M: FeatureModel<T> + ?Sized>(model: &M, inputs: &[Tensor<T>]) -> Result<ErfMap> {
    let first = inputs.first().ok_or_else(|| Error::Invalid("no inputs for ERF".into()))?.shape();
    let plane = Shape::new(1, first.c, first.f, first.t);
    let mut items = Vec::new();
    for x in inputs {
        let s = x.shape();
        if (s.c, s.f, s.t) != (first.c, first.f, first.t) {
            return Err(Error::shape("compute_erf", format!("inputs {first} and {s} differ")));
        }
        items.extend((0..s.n).map(|n| x.item(n)));
    }
    let maps: Vec<Vec<f64>> = items
        .par_iter()
        .map(|x| single_erf(model, x, plane))
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; first.f * first.t];
    for m in &maps {
        for (s, v) in sum.iter_mut().zip(m) {
            *s += v;
        }
    }
    Ok(ErfMap {
        f: first.f,
        t: first.t,
        sum,
        samples: maps.len(),
        fingerprint: model.fingerprint(),
    })
}

fn single_erf<T: Element, M: FeatureModel<T> + ?Sized>(model: &M, x: &Tensor<T>, plane: Shape) -> Result<Vec<f64>> {
    let mut ctx = Ctx::eval();
    let xv = ctx.tape.leaf(&x.clone().with_requires_grad(true));
    let y = model.features(&mut ctx, xv)?;
    let ys = ctx.tape.shape(y);
    if ys.f == 1 && ys.t == 1 {
        return Err(Error::Invalid(
            "final feature map is 1x1, so its central point is not defined; use a shallower layer or a larger input"
                .into(),
        ));
    }
    let (cf, ct) = (ys.f / 2, ys.t / 2);
    let mut seed = Tensor::zeros(ys);
    for c in 0..ys.c {
        seed.set(0, c, cf, ct, T::one());
    }
    let grads = ctx.tape.backward_with_seed(y, &seed)?;
    let g = grads.tensor(xv);
    let mut out = vec![0.0; plane.plane()];
    for c in 0..plane.c {
        for (o, v) in out.iter_mut().zip(&g.data()[c * plane.plane()..][..plane.plane()]) {
            *o += v.to_f64_lossy().abs();
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ERF gradient".into()));
    }
    Ok(out)
}

/// `n` standard-normal inputs of shape `(1, C, F, T)`.
pub fn noise_inputs<T: Element>(shape: Shape, n: usize, seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = Shape::new(1, shape.c, shape.f, shape.t);
    (0..n).map(|_| Tensor::randn(one, 1.0, &mut rng)).collect()
}

/// Half-extents `(a, b)` of ring `k`: rows `cf-a..=cf+a`, columns `ct-b..=ct+b`.
pub fn ring_extent(f: usize, t: usize, k: usize) -> (usize, usize) {
    if f >= t {
        (k, ((k * t) as f64 / f as f64).round() as usize)
    } else {
        (((k * f) as f64 / t as f64).round() as usize, k)
    }
}

/// Rows and columns a centered rectangle covers after clipping.
fn clipped(center: usize, half: usize, len: usize) -> (usize, usize) {
    (center.saturating_sub(half), (center + half).min(len - 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub ratio: f64,
    /// Ring index that first reached the threshold.
    pub ring: usize,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    /// Area added by the final ring, as a fraction of the map.
    pub last_ring_ratio: f64,
}

fn mass_values(map: &ErfMap, mode: MassMode) -> Vec<f64> {
    match mode {
        MassMode::Raw => map.values(),
        MassMode::Log => map.values().iter().map(|v| v.ln_1p()).collect(),
    }
}

/// Greedy ring growth around the center until `t` of the mass is inside.
pub fn high_contribution(map: &ErfMap, t: f64, mode: MassMode) -> Result<Contribution> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Invalid(format!("threshold {t} not in (0, 1]")));
    }
    let v = mass_values(map, mode);
    let total: f64 = v.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("ERF map has zero mass".into()));
    }
    // Prefix sums for O(1) rectangle mass.
    let (nf, nt) = (map.f, map.t);
    let mut pre = vec![0.0; (nf + 1) * (nt + 1)];
    for i in 0..nf {
        for j in 0..nt {
            pre[(i + 1) * (nt + 1) + j + 1] =
                v[i * nt + j] + pre[i * (nt + 1) + j + 1] + pre[(i + 1) * (nt + 1) + j] - pre[i * (nt + 1) + j];
        }
    }
    let rect = |(r0, r1): (usize, usize), (c0, c1): (usize, usize)| {
        pre[(r1 + 1) * (nt + 1) + c1 + 1] - pre[r0 * (nt + 1) + c1 + 1] - pre[(r1 + 1) * (nt + 1) + c0]
            + pre[r0 * (nt + 1) + c0]
    };
    let (cf, ct) = map.center();
    let area = |r: (usize, usize), c: (usize, usize)| ((r.1 - r.0 + 1) * (c.1 - c.0 + 1)) as f64;
    let goal = t * total * (1.0 - 1e-12);
    let mut prev_area = 0.0;
    for k in 0..=nf.max(nt) {
        let (a, b) = ring_extent(nf, nt, k);
        let rows = clipped(cf, a, nf);
        let cols = clipped(ct, b, nt);
        let ar = area(rows, cols);
        if rect(rows, cols) >= goal {
            let full = (nf * nt) as f64;
            return Ok(Contribution {
                ratio: ar / full,
                ring: k,
                rows,
                cols,
                last_ring_ratio: (ar - prev_area) / full,
            });
        }
        prev_area = ar;
    }
    unreachable!("the largest ring covers the whole map")
}

pub fn high_contribution_ratio(map: &ErfMap, t: f64, mode: MassMode) -> Result<f64> {
    Ok(high_contribution(map, t, mode)?.ratio)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfReport {
    pub thresholds: Vec<f64>,
    pub ratios: Vec<f64>,
    pub mode: MassMode,
    pub samples: usize,
    pub fingerprint: String,
}

impl ErfReport {
    pub fn new(map: &ErfMap, thresholds: &[f64], mode: MassMode) -> Result<Self> {
        let ratios = thresholds
            .iter()
            .map(|&t| high_contribution_ratio(map, t, mode))
            .collect::<Result<_>>()?;
        Ok(ErfReport {
            thresholds: thresholds.to_vec(),
            ratios,
            mode,
            samples: map.samples,
            fingerprint: map.fingerprint.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfComparison {
    pub a: ErfReport,
    pub b: ErfReport,
    /// `r_a − r_b` per threshold.
    pub delta: Vec<f64>,
    #[serde(skip)]
    pub maps: Option<(ErfMap, ErfMap)>,
}

pub fn compare_erf<T: Element, A: FeatureModel<T> + ?Sized, B: FeatureModel<T> + ?Sized>(
    a: &A,
    b: &B,
    inputs: &[Tensor<T>],
    thresholds: &[f64],
    mode: MassMode,
) -> Result<ErfComparison> {
    let ma = compute_erf(a, inputs)?;
    let mb = compute_erf(b, inputs)?;
    let ra = ErfReport::new(&ma, thresholds, mode)?;
    let rb = ErfReport::new(&mb, thresholds, mode)?;
    let delta = ra.ratios.iter().zip(&rb.ratios).map(|(x, y)| x - y).collect();
    Ok(ErfComparison {
        a: ra,
        b: rb,
        delta,
        maps: Some((ma, mb)),
    })
}

/// Geometry of one layer for static receptive-field composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfLayer {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Input rows and columns (inclusive, clipped) that can influence output
/// position `out` of a stack of convolution-like layers.
pub fn theoretical_rf(
    layers: &[RfLayer],
    input: (usize, usize),
    out: (usize, usize),
) -> ((usize, usize), (usize, usize)) {
    let (mut f0, mut f1) = (out.0 as isize, out.0 as isize);
    let (mut t0, mut t1) = (out.1 as isize, out.1 as isize);
    for l in layers.iter().rev() {
        let (kf, kt) = (l.kernel.0 as isize, l.kernel.1 as isize);
        let (sf, st) = (l.stride.0 as isize, l.stride.1 as isize);
        let (pf, pt) = (l.padding.0 as isize, l.padding.1 as isize);
        f0 = f0 * sf - pf;
        f1 = f1 * sf - pf + kf - 1;
        t0 = t0 * st - pt;
        t1 = t1 * st - pt + kt - 1;
    }
    let clip = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    ((clip(f0, input.0), clip(f1, input.0)), (clip(t0, input.1), clip(t1, input.1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Conv2d;
    use crate::tensor::ConvGeometry;
    use proptest::prelude::*;

    fn same3(rng: &mut ChaCha8Rng, c: usize) -> Conv2d<f64> {
        Conv2d::new(c, c, (3, 3), ConvGeometry::new((1, 1), (1, 1), 1), false, rng).unwrap()
    }

    fn support_box(m: &ErfMap) -> ((usize, usize), (usize, usize), usize) {
        let s = m.support();
        let cells: Vec<(usize, usize)> = (0..m.f)
            .flat_map(|i| (0..m.t).map(move |j| (i, j)))
            .filter(|&(i, j)| s[i * m.t + j])
            .collect();
        let r = (cells.iter().map(|c| c.0).min().unwrap(), cells.iter().map(|c| c.0).max().unwrap());
        let c = (cells.iter().map(|c| c.1).min().unwrap(), cells.iter().map(|c| c.1).max().unwrap());
        (r, c, cells.len())
    }

    #[test]
    fn single_conv_support_is_3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Sequential::new().push(same3(&mut rng, 1));
        let map = compute_erf(&m, &noise_inputs::<f64>(Shape::new(1, 1, 9, 9), 2, 0)).unwrap();
        assert_eq!(support_box(&map), ((3, 5), (3, 5), 9));
    }

    #[test]
    fn two_convs_support_is_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Sequential::new().push(same3(&mut rng, 2)).push(same3(&mut rng, 2));
        let map = compute_erf(&m, &noise_inputs::<f64>(Shape::new(1, 2, 10, 10), 2, 0)).unwrap();
        assert_eq!(support_box(&map), ((3, 7), (3, 7), 25));
    }

    #[test]
    fn one_by_one_features_are_rejected() {
        let m = Sequential::<f64>::new().push(crate::nn::GlobalAvgPool);
        assert!(compute_erf(&m, &noise_inputs::<f64>(Shape::new(1, 1, 4, 4), 1, 0)).is_err());
    }

    #[test]
    fn delta_map_ratio_and_pgm() {
        let mut v = vec![0.0; 8 * 6];
        v[4 * 6 + 3] = 2.0;
        let m = ErfMap::from_values(8, 6, v).unwrap();
        for t in [0.1, 0.5, 1.0] {
            assert_eq!(high_contribution_ratio(&m, t, MassMode::Raw).unwrap(), 1.0 / 48.0);
        }
        let pgm = m.to_pgm();
        let header = b"P5\n6 8\n65535\n";
        assert_eq!(&pgm[..header.len()], header);
        let px: Vec<u16> = pgm[header.len()..].chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        assert_eq!(px.iter().filter(|&&p| p > 0).count(), 1);
        assert_eq!(px[4 * 6 + 3], 65535);
    }

    #[test]
    fn uniform_map_half_mass() {
        let m = ErfMap::from_values(16, 16, vec![1.0; 256]).unwrap();
        let c = high_contribution(&m, 0.5, MassMode::Raw).unwrap();
        assert!(c.ratio >= 0.5 && c.ratio - 0.5 <= c.last_ring_ratio);
    }

    #[test]
    fn csv_round_trip_and_merge() {
        let m = ErfMap::from_values(2, 3, vec![0.1, 0.2, 1.0 / 3.0, 0.0, 5.5, 1e-17]).unwrap();
        assert_eq!(ErfMap::from_csv(&m.to_csv()).unwrap().values(), m.values());
        let both = m.merge(&m).unwrap();
        assert_eq!(both.samples, 2);
        assert_eq!(both.values(), m.values());
        assert!(high_contribution_ratio(&ErfMap::from_values(1, 1, vec![0.0]).unwrap(), 0.5, MassMode::Raw).is_err());
    }

    #[test]
    fn rf_of_stacked_convs() {
        let l = RfLayer {
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
        };
        assert_eq!(theoretical_rf(&[l, l], (10, 10), (5, 5)), ((3, 7), (3, 7)));
        let s2 = RfLayer { stride: (2, 2), ..l };
        assert_eq!(theoretical_rf(&[s2], (8, 8), (2, 2)), ((3, 5), (3, 5)));
    }

    #[test]
    fn tf_sep_block_support_is_a_cross() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut block = TfSepConvs::<f64>::new(crate::blocks::TfSepConvsSpec::new(4, 4), &mut rng).unwrap();
        // Keep every ReLU open so the support reflects the wiring alone; the
        // pointwise shift must dominate the pooled depthwise output.
        block.visit_params_mut("", &mut |name, p| {
            if name.ends_with("dw.bn.beta") {
                p.value = p.value.map(|_| 5.0);
            } else if name.ends_with("pw.bn.beta") {
                p.value = p.value.map(|_| 1e3);
            }
        });
        let mut x = Tensor::<f64>::zeros(Shape::new(1, 4, 16, 16));
        x.set(0, 0, 8, 8, 1.0);
        let map = compute_erf(&block, &[x]).unwrap();
        let s = map.support();
        for f in 0..16 {
            for t in 0..16 {
                assert_eq!(s[f * 16 + t], f == 8 || t == 8, "({f}, {t})");
            }
        }
    }

    #[test]
    fn network_features_erf() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = TfSepNet::<f64>::new(crate::network::NetConfig::new(8), &mut rng).unwrap();
        let map = compute_erf(&net, &noise_inputs::<f64>(Shape::new(1, 1, 32, 32), 2, 1)).unwrap();
        assert_eq!((map.f, map.t, map.samples), (32, 32, 2));
        assert!(map.total() > 0.0);
        let r = ErfReport::new(&map, &DEFAULT_THRESHOLDS, MassMode::Raw).unwrap();
        assert!(r.ratios.windows(2).all(|w| w[0] <= w[1]));
    }

    /// Smallest centered rectangle (any half-extents) holding `t` of the mass.
    fn brute_force_ratio(m: &ErfMap, t: f64) -> f64 {
        let v = m.values();
        let total: f64 = v.iter().sum();
        let (cf, ct) = m.center();
        let mut best = 1.0f64;
        for a in 0..=m.f {
            for b in 0..=m.t {
                let (r0, r1) = clipped(cf, a, m.f);
                let (c0, c1) = clipped(ct, b, m.t);
                let mass: f64 = (r0..=r1).flat_map(|i| (c0..=c1).map(move |j| (i, j))).map(|(i, j)| v[i * m.t + j]).sum();
                if mass >= t * total * (1.0 - 1e-12) {
                    best = best.min(((r1 - r0 + 1) * (c1 - c0 + 1)) as f64 / (m.f * m.t) as f64);
                }
            }
        }
        best
    }

    #[test]
    fn gaussian_map_matches_brute_force_within_a_ring() {
        for (f, t) in [(32, 32), (32, 16), (16, 40)] {
            let sigma = f as f64 / 8.0;
            let (cf, ct) = (f / 2, t / 2);
            let vals = (0..f * t)
                .map(|k| {
                    let (i, j) = ((k / t) as f64 - cf as f64, (k % t) as f64 - ct as f64);
                    (-(i * i + j * j) / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let m = ErfMap::from_values(f, t, vals).unwrap();
            let mut last = 0.0;
            for th in DEFAULT_THRESHOLDS {
                let c = high_contribution(&m, th, MassMode::Raw).unwrap();
                let brute = brute_force_ratio(&m, th);
                // Coarse rings on non-square maps can tie neighbouring thresholds.
                assert!(if f == t { c.ratio > last } else { c.ratio >= last });
                assert!(c.ratio >= brute - 1e-12 && c.ratio - brute <= c.last_ring_ratio + 1e-12, "{th}: {} vs {brute}", c.ratio);
                last = c.ratio;
            }
        }
    }

    #[test]
    fn linear_stack_map_ignores_input_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Sequential::new().push(same3(&mut rng, 2)).push(same3(&mut rng, 2));
        let x = noise_inputs::<f64>(Shape::new(1, 2, 12, 12), 3, 4);
        let scaled: Vec<Tensor<f64>> = x.iter().map(|t| t.map(|v| v * 7.5)).collect();
        let a = compute_erf(&m, &x).unwrap();
        let b = compute_erf(&m, &scaled).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.normalized(), b.normalized());
    }

    #[test]
    fn identical_models_have_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let block = ConsecutiveBlock::<f64>::new(4, &mut rng).unwrap();
        let x = noise_inputs::<f64>(Shape::new(1, 4, 12, 12), 4, 0);
        let c = compare_erf(&block, &block, &x, &DEFAULT_THRESHOLDS, MassMode::Raw).unwrap();
        assert_eq!(c.delta, vec![0.0; 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ratio_is_monotone_in_t(f in 2usize..12, t in 2usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = Tensor::<f64>::randn(Shape::new(1, 1, f, t), 1.0, &mut rng).data().iter().map(|v| v.abs()).collect();
            let m = ErfMap::from_values(f, t, vals).unwrap();
            for mode in [MassMode::Raw, MassMode::Log] {
                let mut last = 0.0;
                for k in 1..=20 {
                    let r = high_contribution_ratio(&m, k as f64 / 20.0, mode).unwrap();
                    prop_assert!(r >= last && r > 0.0 && r <= 1.0);
                    last = r;
                }
            }
        }
        #[test]
        fn support_stays_inside_static_rf(
            layers in prop::collection::vec((prop::bool::ANY, prop::bool::ANY), 1..4),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Sequential::new();
            let mut geo = Vec::new();
            for &(wide, strided) in &layers {
                let k = if wide { 3 } else { 1 };
                let st = if strided { 2 } else { 1 };
                let p = k / 2;
                net = net.push(Conv2d::<f64>::new(2, 2, (k, k), ConvGeometry::new((st, st), (p, p), 1), false, &mut rng).unwrap());
                geo.push(RfLayer { kernel: (k, k), stride: (st, st), padding: (p, p) });
            }
            let input = Shape::new(1, 2, 24, 24);
            let out = crate::nn::infer(&net, &Tensor::zeros(input)).unwrap().shape();
            prop_assume!(out.f > 1 || out.t > 1);
            let map = compute_erf(&net, &noise_inputs::<f64>(input, 1, seed)).unwrap();
            let ((f0, f1), (t0, t1)) = theoretical_rf(&geo, (24, 24), (out.f / 2, out.t / 2));
            let s = map.support();
            for f in 0..24 {
                for t in 0..24 {
                    if s[f * 24 + t] {
                        prop_assert!(f >= f0 && f <= f1 && t >= t0 && t <= t1);
                    }
                }
            }
        }

        #[test]
        fn merge_matches_union(seed in 0u64..1000, na in 1usize..4, nb in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Sequential::new().push(same3(&mut rng, 1)).push(crate::nn::Relu).push(same3(&mut rng, 1));
            let xs = noise_inputs::<f64>(Shape::new(1, 1, 8, 8), na + nb, seed);
            let a = compute_erf(&net, &xs[..na]).unwrap();
            let b = compute_erf(&net, &xs[na..]).unwrap();
            let all = compute_erf(&net, &xs).unwrap();
            let merged = a.merge(&b).unwrap();
            prop_assert_eq!(merged.samples, all.samples);
            for (u, v) in merged.values().iter().zip(all.values()) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn raw_ratio_ignores_scale(f in 2usize..10, t in 2usize..10, scale in 1e-3f64..1e3, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = Tensor::<f64>::randn(Shape::new(1, 1, f, t), 1.0, &mut rng).data().iter().map(|v| v.abs()).collect();
            let a = ErfMap::from_values(f, t, vals.clone()).unwrap();
            let b = ErfMap::from_values(f, t, vals.iter().map(|v| v * scale).collect()).unwrap();
            for th in DEFAULT_THRESHOLDS {
                prop_assert_eq!(high_contribution_ratio(&a, th, MassMode::Raw).unwrap(), high_contribution_ratio(&b, th, MassMode::Raw).unwrap());
            }
        }
    }
}
