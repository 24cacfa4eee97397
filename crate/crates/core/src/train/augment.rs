//! Mixup and Freq-MixStyle.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Draws from `Beta(a, b)` as `X / (X + Y)` with `X ~ Gamma(a)`, `Y ~ Gamma(b)`.
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Config(format!("Beta parameters must be positive, got ({a}, {b})")));
    }
    let ga = Gamma::new(a, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let gb = Gamma::new(b, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let x = ga.sample(rng);
    let y = gb.sample(rng);
    let s = x + y;
    if s > 0.0 && s.is_finite() {
        Ok(x / s)
    } else {
        // Both draws underflowed; the limit is a fair coin between the endpoints.
        Ok(if rng.gen::<bool>() { 1.0 } else { 0.0 })
    }
}

fn check_batch(b: &Batch, op: &str) -> Result<()> {
    if b.len() < 2 {
        return Err(Error::Invalid(format!("{op} needs at least 2 examples, got {}", b.len())));
    }
    Ok(())
}

fn random_perm<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Invalid(format!("not a permutation of 0..{n}")));
    }
    Ok(())
}

/// `λ·row + (1 − λ)·row_π` for every row of `t`.
fn mix_rows(t: &Tensor<f32>, lambda: f64, perm: &[usize]) -> Tensor<f32> {
    let n = t.shape().n;
    let k = t.numel() / n;
    let src = t.data();
    let mut out = t.clone();
    let (l, m) = (lambda as f32, (1.0 - lambda) as f32);
    for (i, row) in out.data_mut().chunks_mut(k).enumerate() {
        let other = &src[perm[i] * k..][..k];
        for (v, &o) in row.iter_mut().zip(other) {
            *v = l * *v + m * o;
        }
    }
    out
}

/// Mixup with a given `λ` and partner permutation.
pub fn mixup_with(batch: &Batch, lambda: f64, perm: &[usize]) -> Result<Batch> {
    check_batch(batch, "mixup")?;
    check_perm(perm, batch.len())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    Ok(Batch {
        inputs: mix_rows(&batch.inputs, lambda, perm),
        labels: mix_rows(&batch.labels, lambda, perm),
        ids: batch.ids.clone(),
    })
}

/// Mixup with `λ ~ Beta(α, α)` and a random partner permutation.
pub fn mixup<R: Rng + ?Sized>(batch: &Batch, alpha: f64, rng: &mut R) -> Result<Batch> {
    check_batch(batch, "mixup")?;
    let lambda = sample_beta(alpha, alpha, rng)?;
    let perm = random_perm(batch.len(), rng);
    mixup_with(batch, lambda, &perm)
}

/// Mean and standard deviation of every `(sample, frequency)` row, taken
/// over channels and time.
pub fn freq_stats(x: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let m = (s.c * s.t) as f64;
    let mut mean = vec![0.0; s.n * s.f];
    let mut std = vec![0.0; s.n * s.f];
    for n in 0..s.n {
        for f in 0..s.f {
            let vals = || (0..s.c).flat_map(move |c| (0..s.t).map(move |t| (c, t)));
            let mu = vals().map(|(c, t)| x.get(n, c, f, t) as f64).sum::<f64>() / m;
            let var = vals().map(|(c, t)| (x.get(n, c, f, t) as f64 - mu).powi(2)).sum::<f64>() / m;
            mean[n * s.f + f] = mu;
            std[n * s.f + f] = var.sqrt();
        }
    }
    (mean, std)
}

/// Freq-MixStyle with a given `λ` and partner permutation: each row is
/// standardized with its own frequency-wise statistics and re-styled with
/// `λ`-mixed statistics of itself and its partner.
pub fn freq_mixstyle_with(batch: &Batch, lambda: f64, perm: &[usize], eps: f64) -> Result<Batch> {
    check_batch(batch, "freq_mixstyle")?;
    check_perm(perm, batch.len())?;
    let x = &batch.inputs;
    let s = x.shape();
    let (mu, sigma) = freq_stats(x);
    let mut out = x.clone();
    for n in 0..s.n {
        let p = perm[n];
        for f in 0..s.f {
            let (m0, s0) = (mu[n * s.f + f], sigma[n * s.f + f]);
            let (m1, s1) = (mu[p * s.f + f], sigma[p * s.f + f]);
            let m_mix = lambda * m0 + (1.0 - lambda) * m1;
            let s_mix = lambda * s0 + (1.0 - lambda) * s1;
            let denom = s0.max(eps);
            for c in 0..s.c {
                for t in 0..s.t {
                    let v = (x.get(n, c, f, t) as f64 - m0) / denom * s_mix + m_mix;
                    out.set(n, c, f, t, v as f32);
                }
            }
        }
    }
    Ok(Batch {
        inputs: out,
        labels: batch.labels.clone(),
        ids: batch.ids.clone(),
    })
}

/// Applies Freq-MixStyle with probability `p`; `λ ~ Beta(α, α)`.
pub fn freq_mixstyle<R: Rng + ?Sized>(batch: &Batch, alpha: f64, p: f64, eps: f64, rng: &mut R) -> Result<Batch> {
    check_batch(batch, "freq_mixstyle")?;
    if rng.gen::<f64>() >= p {
        return Ok(batch.clone());
    }
    let lambda = sample_beta(alpha, alpha, rng)?;
    let perm = random_perm(batch.len(), rng);
    freq_mixstyle_with(batch, lambda, &perm, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, labels: &[usize]) -> Batch {
        let n = labels.len();
        let x = Tensor::randn(Shape::new(n, 1, 8, 6), 1.0, rng).map(|v| v * 2.0 + 1.0);
        let mut y = Tensor::zeros(Shape::new(n, 10, 1, 1));
        for (i, &l) in labels.iter().enumerate() {
            y.data_mut()[i * 10 + l] = 1.0;
        }
        Batch::new(x, y, (0..n).collect()).unwrap()
    }

    #[test]
    fn beta_mean_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<f64> = (0..20000).map(|_| sample_beta(0.3, 0.3, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
        // Var of Beta(a, a) is 1 / (4(2a + 1)).
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((var - 1.0 / (4.0 * 1.6)).abs() < 0.01, "{var}");
        assert!(sample_beta(0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn mixup_lambda_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch(&mut rng, &[3, 7, 1]);
        assert_eq!(mixup_with(&b, 1.0, &[2, 0, 1]).unwrap(), b);
    }

    #[test]
    fn mixup_half_splits_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch(&mut rng, &[3, 7]);
        let m = mixup_with(&b, 0.5, &[1, 0]).unwrap();
        let row = &m.labels.data()[..10];
        assert_eq!(row[3], 0.5);
        assert_eq!(row[7], 0.5);
    }

    #[test]
    fn mixup_stays_in_the_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let b = batch(&mut rng, &[0, 1, 2, 3]);
            let m = mixup(&b, 0.3, &mut rng).unwrap();
            m.validate().unwrap();
            let lo = b.inputs.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = b.inputs.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert!(m.inputs.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        }
        let one = batch(&mut rng, &[0]);
        assert!(mixup(&one, 0.3, &mut rng).is_err());
    }

    #[test]
    fn mixstyle_lambda_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = batch(&mut rng, &[0, 1, 2]);
        let m = freq_mixstyle_with(&b, 1.0, &[1, 2, 0], 1e-6).unwrap();
        assert!(m.inputs.max_abs_diff(&b.inputs) < 1e-5);
    }

    #[test]
    fn mixstyle_lambda_zero_transfers_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = batch(&mut rng, &[0, 1, 2]);
        let perm = [2, 0, 1];
        let m = freq_mixstyle_with(&b, 0.0, &perm, 1e-6).unwrap();
        let (mu, sd) = freq_stats(&b.inputs);
        let (mu2, sd2) = freq_stats(&m.inputs);
        let f = b.inputs.shape().f;
        for n in 0..3 {
            for k in 0..f {
                assert!((mu2[n * f + k] - mu[perm[n] * f + k]).abs() < 1e-4);
                assert!((sd2[n * f + k] - sd[perm[n] * f + k]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn mixstyle_skip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = batch(&mut rng, &[0, 1]);
        assert_eq!(freq_mixstyle(&b, 0.3, 0.0, 1e-6, &mut rng).unwrap(), b);
    }

    #[test]
    fn augmentations_keep_shapes_and_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let b = batch(&mut rng, &[5, 6, 7, 8]);
            let m = freq_mixstyle(&mixup(&b, 0.3, &mut rng).unwrap(), 0.3, 0.7, 1e-6, &mut rng).unwrap();
            assert_eq!(m.inputs.shape(), b.inputs.shape());
            m.validate().unwrap();
        }
    }
}
