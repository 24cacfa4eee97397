//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, Module};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Coordinates sampled per input; `None` checks every coordinate.
    pub samples_per_input: Option<usize>,
    /// Central differences at `h` and `h / 2`, and the matching second
    /// differences, agree to `O(h^2)` on smooth coordinates. A coordinate
    /// where either pair disagrees by more than this (relative) straddles a
    /// ReLU or max-pool switch and is skipped. Undetected switches then bias
    /// the estimate by at most a few multiples of this value.
    pub kink_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            samples_per_input: None,
            kink_tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// Central difference at `orig`, or `None` at a kink. `at(v)` evaluates the
/// function with the coordinate set to `v`; `f0` is the unperturbed value.
fn probe(mut at: impl FnMut(f64) -> Result<f64>, orig: f64, f0: f64, cfg: &GradCheckConfig) -> Result<Option<f64>> {
    let h = cfg.h;
    let (p1, m1) = (at(orig + h)?, at(orig - h)?);
    let (p2, m2) = (at(orig + h / 2.0)?, at(orig - h / 2.0)?);
    let c1 = (p1 - m1) / (2.0 * h);
    let c2 = (p2 - m2) / h;
    let g1 = (p1 - 2.0 * f0 + m1) / h;
    let g2 = (p2 - 2.0 * f0 + m2) / (h / 2.0);
    let tol = cfg.kink_tolerance * c1.abs().max(1.0);
    Ok(((c1 - c2).abs() <= tol && (g1 - 2.0 * g2).abs() <= tol).then_some(c1))
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NotScalar {
            op: "finite_diff_check",
            shape: v.shape(),
        });
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite("function value during gradient check".into()));
    }
    Ok(s)
}

/// Compares tape gradients of the scalar function `f` with central
/// differences, with respect to every input whose `requires_grad` is set.
pub fn finite_diff_check_multi<F, R>(
    f: F,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let f0 = tape.value(out).data()[0];
    drop(tape);

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic = grads.tensor(vars[k]);
        if !analytic.all_finite() {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
        let n = input.numel();
        let coords: Vec<usize> = match cfg.samples_per_input {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut part = GradCheckReport::default();
        for i in coords {
            let orig = work[k].data()[i];
            let numeric = probe(
                |v| {
                    work[k].data_mut()[i] = v;
                    let r = eval_scalar(&f, &work);
                    work[k].data_mut()[i] = orig;
                    r
                },
                orig,
                f0,
                cfg,
            )?;
            let Some(central) = numeric else {
                part.skipped_kinks += 1;
                continue;
            };
            let a = analytic.data()[i];
            let err = (a - central).abs() / central.abs().max(1.0);
            part.max_rel_error = part.max_rel_error.max(err);
            part.checked += 1;
        }
        report.merge(part);
    }
    Ok(report)
}

/// Single-input form: checks `d f(x) / dx`.
pub fn finite_diff_check<F, R>(f: F, x: &Tensor<f64>, cfg: &GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    let x = x.clone().with_requires_grad(true);
    finite_diff_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(&x), cfg, rng)
}

fn module_value<M: Module<f64> + ?Sized>(m: &M, x: &Tensor<f64>, w: &Tensor<f64>, mode: Mode) -> Result<f64> {
    let mut ctx = Ctx::new(mode, false);
    let xv = ctx.input(x);
    let y = m.forward(&mut ctx, xv)?;
    let s = ctx.tape.weighted_sum(y, w)?;
    let v = ctx.value(s).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("function value during gradient check".into()));
    }
    Ok(v)
}

fn set_param<M: Module<f64> + ?Sized>(m: &mut M, name: &str, i: usize, v: f64) {
    m.visit_params_mut("", &mut |n, p| {
        if n == name {
            p.value.data_mut()[i] = v;
        }
    });
}

/// Checks the gradients of `sum(w ⊙ m(x))`, for a fixed random `w`, with
/// respect to `x` and every learned parameter of `m`. Parameters are
/// perturbed in place and restored afterwards.
pub fn check_module<M, R>(m: &mut M, x: &Tensor<f64>, mode: Mode, cfg: &GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    M: Module<f64> + ?Sized,
    R: Rng + ?Sized,
{
    let out = m.output_shape(x.shape())?;
    let w = Tensor::from_fn(out, |_, _, _, _| rng.gen_range(-1.0..1.0));
    let mut ctx = Ctx::new(mode, true);
    let xv = ctx.tape.leaf(&x.clone().with_requires_grad(true));
    let y = m.forward(&mut ctx, xv)?;
    let s = ctx.tape.weighted_sum(y, &w)?;
    let f0 = ctx.value(s).data()[0];
    let grads = ctx.tape.backward(s)?;

    // (name, current values, analytic gradient); the input goes first, unnamed.
    let mut targets: Vec<(Option<String>, Vec<f64>, Vec<f64>)> = vec![(None, x.data().to_vec(), grads.tensor(xv).into_data())];
    m.visit_params("", &mut |name, p| {
        if p.is_learned() {
            let g = ctx.param_grad(&grads, p).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec);
            targets.push((Some(name.to_string()), p.value.data().to_vec(), g));
        }
    });

    let mut report = GradCheckReport::default();
    let mut xw = x.clone();
    for (name, values, analytic) in targets {
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
        let n = values.len();
        let coords: Vec<usize> = match cfg.samples_per_input {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = values[i];
            let mut at = |v: f64, m: &mut M| -> Result<f64> {
                match &name {
                    None => {
                        xw.data_mut()[i] = v;
                        let r = module_value(m, &xw, &w, mode);
                        xw.data_mut()[i] = orig;
                        r
                    }
                    Some(pn) => {
                        set_param(m, pn, i, v);
                        let r = module_value(m, &xw, &w, mode);
                        set_param(m, pn, i, orig);
                        r
                    }
                }
            };
            let Some(central) = probe(|v| at(v, m), orig, f0, cfg)? else {
                report.skipped_kinks += 1;
                continue;
            };
            let err = (analytic[i] - central).abs() / central.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(Shape::new(1, 1, 2, 2), 1.0, &mut rng);
        // sum(relu(x)) has the right gradient; a doubled function value
        // through the tape is still consistent, so corrupt via the weights.
        let w = Tensor::full(Shape::new(1, 1, 2, 2), 2.0);
        let ok = finite_diff_check(|t, v| t.weighted_sum(v, &w), &x, &GradCheckConfig::default(), &mut rng).unwrap();
        assert!(ok.max_rel_error < 1e-8);
        assert_eq!(ok.checked, 4);
    }

    #[test]
    fn kinks_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let r = finite_diff_check(
            |t, v| {
                let r = t.relu(v);
                Ok(t.sum(r))
            },
            &x,
            &GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn kink_at_the_edge_of_the_step_is_skipped() {
        // The switch sits just inside `x + h`: one-sided differences nearly
        // agree, yet the central difference is off by 5e-4.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GradCheckConfig::default();
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 1), vec![-0.999 * cfg.h]).unwrap();
        let r = finite_diff_check(
            |t, v| {
                let r = t.relu(v);
                Ok(t.sum(r))
            },
            &x,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!((r.checked, r.skipped_kinks), (0, 1));
    }

    #[test]
    fn module_check_covers_params_and_input() {
        use crate::nn::{Conv2d, Relu, Sequential};
        use crate::tensor::ConvGeometry;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Sequential::new()
            .push(Conv2d::<f64>::new(2, 3, (3, 3), ConvGeometry::new((1, 1), (1, 1), 1), true, &mut rng).unwrap())
            .push(Relu);
        let x = Tensor::randn(Shape::new(2, 2, 4, 4), 1.0, &mut rng);
        let flat = |m: &Sequential<f64>| {
            let mut v = Vec::new();
            m.visit_params("", &mut |_, p| v.extend_from_slice(p.value.data()));
            v
        };
        let before = flat(&m);
        let r = check_module(&mut m, &x, Mode::Eval, &GradCheckConfig::default(), &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked + r.skipped_kinks, 64 + 54 + 3);
        assert_eq!(flat(&m), before);
    }
}
