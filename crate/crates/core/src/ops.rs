//! Forward and backward kernels on plain tensors.
//!
//! These functions know nothing about the tape; [`crate::autodiff::Tape`]
//! calls them and stores whatever the backward pass needs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, ConvParams, Element, Shape, Tensor};

/// Spatial axes a reduction or broadcast can act on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    F,
    T,
    FT,
}

/// Output positions `o` along one axis for which `o * stride + k - pad`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

pub(crate) fn conv_output_shape(x: Shape, w: Shape, bias: Option<usize>, g: &ConvGeometry) -> Result<Shape> {
    if g.groups == 0 {
        return Err(Error::Invalid("groups must be positive".into()));
    }
    if x.c % g.groups != 0 {
        return Err(Error::Divisibility {
            op: "conv2d",
            channels: x.c,
            divisor: g.groups,
        });
    }
    if w.n % g.groups != 0 {
        return Err(Error::Divisibility {
            op: "conv2d",
            channels: w.n,
            divisor: g.groups,
        });
    }
    if x.c / g.groups != w.c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {x} has {} channels per group, kernel {w} expects {}",
                x.c / g.groups,
                w.c
            ),
        ));
    }
    if let Some(len) = bias {
        if len != w.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {len} for {} output channels", w.n),
            ));
        }
    }
    let (fo, to) = g.output_size((x.f, x.t), (w.f, w.t))?;
    Ok(Shape::new(x.n, w.n, fo, to))
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv_output_shape(xs, ws, bias.map(<[T]>::len), g)?;
    let (fo, to) = (os.f, os.t);
    let ocpg = ws.n / g.groups;
    let icpg = ws.c;
    let (sf, st) = g.stride;
    let (pf, pt) = g.padding;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); os.numel()];
    if os.numel() == 0 {
        return Tensor::from_vec(os, out);
    }
    out.par_chunks_mut(fo * to).enumerate().for_each(|(idx, plane)| {
        let n = idx / ws.n;
        let oc = idx % ws.n;
        let grp = oc / ocpg;
        if let Some(b) = bias {
            plane.fill(b[oc]);
        }
        for icg in 0..icpg {
            let ic = grp * icpg + icg;
            let xplane = &xd[(n * xs.c + ic) * xs.plane()..][..xs.plane()];
            for kf in 0..ws.f {
                let (flo, fhi) = valid_range(kf, pf, sf, xs.f, fo);
                for kt in 0..ws.t {
                    let wv = wd[((oc * icpg + icg) * ws.f + kf) * ws.t + kt];
                    let (tlo, thi) = valid_range(kt, pt, st, xs.t, to);
                    for of in flo..fhi {
                        let xrow = &xplane[(of * sf + kf - pf) * xs.t..][..xs.t];
                        let orow = &mut plane[of * to..][..to];
                        for ot in tlo..thi {
                            orow[ot] = orow[ot] + wv * xrow[ot * st + kt - pt];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(os, out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &[T],
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (fo, to) = g
        .output_size((xs.f, xs.t), (ws.f, ws.t))
        .expect("shape validated in forward");
    let oplane = fo * to;
    let ocpg = ws.n / g.groups;
    let icpg = ws.c;
    let (sf, st) = g.stride;
    let (pf, pt) = g.padding;
    let xd = x.data();
    let wd = w.data();

    let dx = need.0.then(|| {
        let mut dx = vec![T::zero(); xs.numel()];
        let per_n = xs.c * xs.plane();
        dx.par_chunks_mut(per_n).enumerate().for_each(|(n, dxn)| {
            for oc in 0..ws.n {
                let grp = oc / ocpg;
                let gplane = &gy[(n * ws.n + oc) * oplane..][..oplane];
                for icg in 0..icpg {
                    let ic = grp * icpg + icg;
                    let dplane = &mut dxn[ic * xs.plane()..][..xs.plane()];
                    for kf in 0..ws.f {
                        let (flo, fhi) = valid_range(kf, pf, sf, xs.f, fo);
                        for kt in 0..ws.t {
                            let wv = wd[((oc * icpg + icg) * ws.f + kf) * ws.t + kt];
                            let (tlo, thi) = valid_range(kt, pt, st, xs.t, to);
                            for of in flo..fhi {
                                let drow = &mut dplane[(of * sf + kf - pf) * xs.t..][..xs.t];
                                let grow = &gplane[of * to..][..to];
                                for ot in tlo..thi {
                                    let i = ot * st + kt - pt;
                                    drow[i] = drow[i] + wv * grow[ot];
                                }
                            }
                        }
                    }
                }
            }
        });
        dx
    });

    let dw = need.1.then(|| {
        let mut dw = vec![T::zero(); ws.numel()];
        let per_oc = icpg * ws.f * ws.t;
        dw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dwo)| {
            let grp = oc / ocpg;
            for n in 0..xs.n {
                let gplane = &gy[(n * ws.n + oc) * oplane..][..oplane];
                for icg in 0..icpg {
                    let ic = grp * icpg + icg;
                    let xplane = &xd[(n * xs.c + ic) * xs.plane()..][..xs.plane()];
                    for kf in 0..ws.f {
                        let (flo, fhi) = valid_range(kf, pf, sf, xs.f, fo);
                        for kt in 0..ws.t {
                            let (tlo, thi) = valid_range(kt, pt, st, xs.t, to);
                            let mut acc = T::zero();
                            for of in flo..fhi {
                                let xrow = &xplane[(of * sf + kf - pf) * xs.t..][..xs.t];
                                let grow = &gplane[of * to..][..to];
                                for ot in tlo..thi {
                                    acc = acc + grow[ot] * xrow[ot * st + kt - pt];
                                }
                            }
                            let slot = &mut dwo[(icg * ws.f + kf) * ws.t + kt];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        });
        dw
    });

    let db = need.2.then(|| {
        (0..ws.n)
            .map(|oc| {
                (0..xs.n)
                    .map(|n| gy[(n * ws.n + oc) * oplane..][..oplane].iter().copied().sum::<T>())
                    .sum()
            })
            .collect()
    });

    ConvGrads { dx, dw, db }
}

/// Convolution on detached tensors.
pub fn conv2d<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    conv2d_forward(x, &p.kernel, p.bias.as_deref(), &p.geometry)
}

/// Per-channel mean and biased variance over `(N, F, T)`.
pub fn channel_moments<T: Element>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let m = T::lit((s.n * s.plane()) as f64);
    let d = x.data();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc = acc + d[(n * s.c + c) * s.plane()..][..s.plane()].iter().copied().sum();
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for n in 0..s.n {
            for &v in &d[(n * s.c + c) * s.plane()..][..s.plane()] {
                sq = sq + (v - mu) * (v - mu);
            }
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    (mean, var)
}

/// Applies `y = scale[c] * x + shift[c]` per channel.
pub(crate) fn channel_affine<T: Element>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.clone();
    out.requires_grad = false;
    out.grad = None;
    let plane = s.plane();
    out.data_mut()
        .chunks_mut(plane)
        .enumerate()
        .for_each(|(i, p)| {
            let c = i % s.c;
            p.iter_mut().for_each(|v| *v = scale[c] * *v + shift[c]);
        });
    out
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Max pooling without padding. Returns the pooled tensor and, for each
/// output element, the flat input index that produced it.
pub fn maxpool2d<T: Element>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let (kf, kt) = kernel;
    let (sf, st) = stride;
    if kf == 0 || kt == 0 || sf == 0 || st == 0 {
        return Err(Error::Invalid("pool kernel and stride must be positive".into()));
    }
    if s.f < kf || s.t < kt || (s.f - kf) % sf != 0 || (s.t - kt) % st != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("input {s} not evenly covered by kernel {kernel:?} stride {stride:?}"),
        ));
    }
    let fo = (s.f - kf) / sf + 1;
    let to = (s.t - kt) / st + 1;
    let os = Shape::new(s.n, s.c, fo, to);
    let d = x.data();
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for of in 0..fo {
            for ot in 0..to {
                let mut best_i = base + (of * sf) * s.t + ot * st;
                let mut best = d[best_i];
                for i in 0..kf {
                    for j in 0..kt {
                        let idx = base + (of * sf + i) * s.t + ot * st + j;
                        if d[idx] > best {
                            best = d[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(os, out)?, arg))
}

pub fn mean_axis<T: Element>(x: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let s = x.shape();
    let d = x.data();
    match axis {
        Axis::F => {
            let inv = T::one() / T::lit(s.f as f64);
            Tensor::from_fn(Shape::new(s.n, s.c, 1, s.t), |n, c, _, t| {
                let mut acc = T::zero();
                for f in 0..s.f {
                    acc = acc + d[s.index(n, c, f, t)];
                }
                acc * inv
            })
        }
        Axis::T => {
            let inv = T::one() / T::lit(s.t as f64);
            Tensor::from_fn(Shape::new(s.n, s.c, s.f, 1), |n, c, f, _| {
                let row = &d[s.index(n, c, f, 0)..][..s.t];
                row.iter().copied().sum::<T>() * inv
            })
        }
        Axis::FT => {
            let inv = T::one() / T::lit(s.plane() as f64);
            Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
                let plane = &d[s.index(n, c, 0, 0)..][..s.plane()];
                plane.iter().copied().sum::<T>() * inv
            })
        }
    }
}

/// Source channel for output position `j` of a `groups`-way shuffle.
#[inline]
pub fn shuffle_source(j: usize, channels: usize, groups: usize) -> usize {
    (j % groups) * (channels / groups) + j / groups
}

/// Reshape `(g, C/g)` → transpose → flatten on the channel axis.
pub fn channel_shuffle<T: Element>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::Divisibility {
            op: "channel_shuffle",
            channels: s.c,
            divisor: groups,
        });
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.numel());
    let d = x.data();
    for n in 0..s.n {
        for j in 0..s.c {
            let src = shuffle_source(j, s.c, groups);
            out.extend_from_slice(&d[(n * s.c + src) * plane..][..plane]);
        }
    }
    Tensor::from_vec(s, out)
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::shape(
            "slice_channels",
            format!("[{start}, {}) out of {} channels", start + len, s.c),
        ));
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        out.extend_from_slice(&x.data()[(n * s.c + start) * plane..][..len * plane]);
    }
    Tensor::from_vec(s.with_c(len), out)
}

pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.f, sa.t) != (sb.n, sb.f, sb.t) {
        return Err(Error::shape("concat_channels", format!("{sa} vs {sb}")));
    }
    let plane = sa.plane();
    let mut out = Vec::with_capacity(sa.numel() + sb.numel());
    for n in 0..sa.n {
        out.extend_from_slice(&a.data()[n * sa.c * plane..][..sa.c * plane]);
        out.extend_from_slice(&b.data()[n * sb.c * plane..][..sb.c * plane]);
    }
    Tensor::from_vec(sa.with_c(sa.c + sb.c), out)
}

/// Which axis of `x` a broadcast operand `v` is expanded along, or `None`
/// when the shapes already agree.
pub(crate) fn broadcast_axis(x: Shape, v: Shape) -> Result<Option<Axis>> {
    if (x.n, x.c) != (v.n, v.c) {
        return Err(Error::shape("broadcast_add", format!("{x} vs {v}")));
    }
    match (x.f == v.f, x.t == v.t) {
        (true, true) => Ok(None),
        (false, true) if v.f == 1 => Ok(Some(Axis::F)),
        (true, false) if v.t == 1 => Ok(Some(Axis::T)),
        _ => Err(Error::shape(
            "broadcast_add",
            format!("{v} cannot broadcast to {x} along a single axis"),
        )),
    }
}

pub fn broadcast_add<T: Element>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let axis = broadcast_axis(s, v.shape())?;
    Ok(Tensor::from_fn(s, |n, c, f, t| {
        let vv = match axis {
            None => v.get(n, c, f, t),
            Some(Axis::F) => v.get(n, c, 0, t),
            Some(Axis::T) => v.get(n, c, f, 0),
            Some(Axis::FT) => unreachable!(),
        };
        x.get(n, c, f, t) + vv
    }))
}

/// Per-`(n, f)` mean and inverse standard deviation over `(C, T)`.
pub(crate) fn freq_moments<T: Element>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let m = T::lit((s.c * s.t) as f64);
    let d = x.data();
    let mut mean = vec![T::zero(); s.n * s.f];
    let mut inv_std = vec![T::zero(); s.n * s.f];
    for n in 0..s.n {
        for f in 0..s.f {
            let mut acc = T::zero();
            for c in 0..s.c {
                acc = acc + d[s.index(n, c, f, 0)..][..s.t].iter().copied().sum();
            }
            let mu = acc / m;
            let mut sq = T::zero();
            for c in 0..s.c {
                for &v in &d[s.index(n, c, f, 0)..][..s.t] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[n * s.f + f] = mu;
            inv_std[n * s.f + f] = T::one() / (sq / m + eps).sqrt();
        }
    }
    (mean, inv_std)
}

pub(crate) fn log_softmax_rows<T: Element>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution, independent of the fast kernel.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, g: &ConvGeometry) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let fo = (xs.f + 2 * g.padding.0 - ws.f) / g.stride.0 + 1;
        let to = (xs.t + 2 * g.padding.1 - ws.t) / g.stride.1 + 1;
        let ocpg = ws.n / g.groups;
        Tensor::from_fn(Shape::new(xs.n, ws.n, fo, to), |n, oc, of, ot| {
            let grp = oc / ocpg;
            let mut acc = b.map_or(0.0, |b| b[oc]);
            for icg in 0..ws.c {
                for kf in 0..ws.f {
                    for kt in 0..ws.t {
                        let i = (of * g.stride.0 + kf) as isize - g.padding.0 as isize;
                        let j = (ot * g.stride.1 + kt) as isize - g.padding.1 as isize;
                        if i < 0 || j < 0 || i >= xs.f as isize || j >= xs.t as isize {
                            continue;
                        }
                        acc += w.get(oc, icg, kf, kt) * x.get(n, grp * ws.c + icg, i as usize, j as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn all_ones_counting() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3));
        let y = conv2d_forward(&x, &w, None, &ConvGeometry::new((1, 1), (1, 1), 1)).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 9.0);
        for (f, t) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.get(0, 0, f, t), 4.0);
        }
        assert_eq!(y.get(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(Shape::new(2, 1, 5, 7), 1.0, &mut rng);
        let p = ConvParams {
            kernel: Tensor::ones(Shape::new(1, 1, 1, 1)),
            bias: Some(vec![0.0]),
            geometry: ConvGeometry::default(),
        };
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn grouped_matches_two_independent_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(Shape::new(1, 4, 5, 5), 1.0, &mut rng);
        let w = Tensor::<f64>::randn(Shape::new(4, 2, 3, 3), 1.0, &mut rng);
        let g = ConvGeometry::new((1, 1), (1, 1), 2);
        let y = conv2d_forward(&x, &w, None, &g).unwrap();

        let single = ConvGeometry::new((1, 1), (1, 1), 1);
        let lo = naive_conv(
            &slice_channels(&x, 0, 2).unwrap(),
            &Tensor::from_vec(Shape::new(2, 2, 3, 3), w.data()[..36].to_vec()).unwrap(),
            None,
            &single,
        );
        let hi = naive_conv(
            &slice_channels(&x, 2, 2).unwrap(),
            &Tensor::from_vec(Shape::new(2, 2, 3, 3), w.data()[36..].to_vec()).unwrap(),
            None,
            &single,
        );
        let expect = concat_channels(&lo, &hi).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn matches_naive_over_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..40 {
            let groups = [1, 2, 3][rng.gen_range(0..3)];
            let icpg = rng.gen_range(1..3);
            let ocpg = rng.gen_range(1..3);
            let kf = rng.gen_range(1..4);
            let kt = rng.gen_range(1..4);
            let stride = (rng.gen_range(1..3), rng.gen_range(1..3));
            let padding = (rng.gen_range(0..2), rng.gen_range(0..2));
            let x = Tensor::<f64>::randn(
                Shape::new(2, icpg * groups, rng.gen_range(kf..8), rng.gen_range(kt..8)),
                1.0,
                &mut rng,
            );
            let w = Tensor::<f64>::randn(Shape::new(ocpg * groups, icpg, kf, kt), 1.0, &mut rng);
            let b: Vec<f64> = (0..ocpg * groups).map(|i| i as f64 * 0.1).collect();
            let g = ConvGeometry::new(stride, padding, groups);
            let y = conv2d_forward(&x, &w, Some(&b), &g).unwrap();
            let z = naive_conv(&x, &w, Some(&b), &g);
            assert_eq!(y.shape(), z.shape());
            assert!(y.max_abs_diff(&z) < 1e-6);
        }
    }

    #[test]
    fn conv_rejects_bad_channels() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f64>::zeros(Shape::new(4, 2, 3, 3));
        assert!(matches!(
            conv2d_forward(&x, &w, None, &ConvGeometry::new((1, 1), (1, 1), 2)),
            Err(Error::Divisibility { .. })
        ));
        let w = Tensor::<f64>::zeros(Shape::new(4, 1, 3, 3));
        assert!(conv2d_forward(&x, &w, None, &ConvGeometry::default()).is_err());
    }

    #[test]
    fn maxpool_block_maxima() {
        let x = Tensor::<f64>::iota(Shape::new(1, 1, 4, 4));
        let (y, _) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert!(maxpool2d(&Tensor::<f64>::zeros(Shape::new(1, 1, 5, 4)), (2, 2), (2, 2)).is_err());
    }

    #[test]
    fn maxpool_unit_is_identity_and_relu_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 6), 1.0, &mut rng);
        assert_eq!(maxpool2d(&x, (1, 1), (1, 1)).unwrap().0, x);
        let r = relu(&x);
        assert_eq!(relu(&r), r);
        assert_eq!(relu(&Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap()).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_over_frequency_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 64, 16), 1.0, &mut rng);
        let m = mean_axis(&x, Axis::F);
        assert_eq!(m.shape(), Shape::new(1, 2, 1, 16));
        for c in 0..2 {
            for t in 0..16 {
                let mut s = 0.0;
                for f in 0..64 {
                    s += x.get(0, c, f, t);
                }
                assert!((m.get(0, c, 0, t) - s / 64.0).abs() < 1e-12);
            }
        }
        assert_eq!(mean_axis(&x, Axis::T).shape(), Shape::new(1, 2, 64, 1));
        assert_eq!(mean_axis(&x, Axis::FT).shape(), Shape::new(1, 2, 1, 1));
    }

    fn channel_order(x: &Tensor<f64>) -> Vec<usize> {
        (0..x.shape().c).map(|c| x.get(0, c, 0, 0) as usize).collect()
    }

    #[test]
    fn shuffle_six_by_two() {
        let x = Tensor::<f64>::iota(Shape::new(1, 6, 1, 1));
        assert_eq!(channel_order(&channel_shuffle(&x, 2).unwrap()), vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
        let back = channel_shuffle(&channel_shuffle(&x, 2).unwrap(), 3).unwrap();
        assert_eq!(back, x);
        assert!(channel_shuffle(&x, 4).is_err());
    }

    #[test]
    fn split_concat_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::randn(Shape::new(3, 40, 4, 5), 1.0, &mut rng);
        let a = slice_channels(&x, 0, 20).unwrap();
        let b = slice_channels(&x, 20, 20).unwrap();
        assert_eq!(a.shape().c, 20);
        assert_eq!(concat_channels(&a, &b).unwrap(), x);
    }

    #[test]
    fn broadcast_rows() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 2));
        let v = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let y = broadcast_add(&x, &v).unwrap();
        for f in 0..3 {
            assert_eq!([y.get(0, 0, f, 0), y.get(0, 0, f, 1)], [1.0, 2.0]);
        }
        let z = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 1));
        assert_eq!(broadcast_add(&y, &z).unwrap(), y);
        let bad = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        let x2 = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 2));
        assert!(broadcast_add(&x2, &bad).is_err());
    }

    #[test]
    fn valid_range_edges() {
        // k=0, pad=1, stride=1: output 0 reads input -1.
        assert_eq!(valid_range(0, 1, 1, 5, 5), (1, 5));
        assert_eq!(valid_range(2, 1, 1, 5, 5), (0, 4));
        assert_eq!(valid_range(1, 1, 2, 4, 2), (0, 2));
    }
}
