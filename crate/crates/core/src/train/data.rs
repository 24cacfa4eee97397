//! Labeled spectrogram datasets and minibatches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{load_wav, resample_linear, LogMel};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Inputs `(B, 1, F, T)` with soft labels `(B, K, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub labels: Tensor<f32>,
    /// Dataset indices the rows came from.
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor<f32>, labels: Tensor<f32>, ids: Vec<usize>) -> Result<Self> {
        let b = Batch { inputs, labels, ids };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.inputs.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.shape().c
    }

    pub fn validate(&self) -> Result<()> {
        let (xs, ys) = (self.inputs.shape(), self.labels.shape());
        if xs.n == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if ys.n != xs.n || ys.f != 1 || ys.t != 1 || ys.c == 0 {
            return Err(Error::shape("batch", format!("inputs {xs}, labels {ys}")));
        }
        if self.ids.len() != xs.n {
            return Err(Error::Invalid(format!("{} ids for {} rows", self.ids.len(), xs.n)));
        }
        for (i, row) in self.labels.data().chunks(ys.c).enumerate() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Invalid(format!("label row {i} is not a distribution (sum {s})")));
            }
        }
        Ok(())
    }

    /// Hard label of each row: the index of its largest entry.
    pub fn hard_labels(&self) -> Vec<usize> {
        crate::network::argmax_rows(&self.labels)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    /// One `(1, 1, F, T)` tensor per example.
    pub inputs: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor<f32>>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Invalid(format!("{} inputs, {} labels", inputs.len(), labels.len())));
        }
        if let Some(first) = inputs.first() {
            let s = first.shape();
            if s.n != 1 || s.c != 1 {
                return Err(Error::shape("dataset", format!("example shape {s}, want (1, 1, F, T)")));
            }
            if let Some(bad) = inputs.iter().find(|x| x.shape() != s) {
                return Err(Error::shape("dataset", format!("mixed shapes {s} and {}", bad.shape())));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Invalid(format!("label {l} with {} classes", class_names.len())));
        }
        Ok(Dataset {
            inputs,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn example_shape(&self) -> Option<Shape> {
        self.inputs.first().map(Tensor::shape)
    }

    /// Stacks the given examples with one-hot labels.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let items: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let inputs = Tensor::stack(&items)?;
        let k = self.num_classes();
        let mut labels = Tensor::zeros(Shape::new(idx.len(), k, 1, 1));
        for (row, &i) in idx.iter().enumerate() {
            labels.data_mut()[row * k + self.labels[i]] = 1.0;
        }
        Batch::new(inputs, labels, idx.to_vec())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Shuffled split; the second part holds `round(val_fraction · len)` examples.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction {val_fraction} not in [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (val_fraction * self.len() as f64).round() as usize;
        let (val, train) = idx.split_at(n_val);
        Ok((self.subset(train), self.subset(val)))
    }

    /// SHA-256 over labels and raw example bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (x, &l) in self.inputs.iter().zip(&self.labels) {
            h.update((l as u64).to_le_bytes());
            for v in x.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Synthetic spectrograms: class `k` puts its energy in the `k`-th of
/// `n_classes` disjoint frequency bands and modulates it in time at
/// `k + 1` cycles per clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub n_mels: usize,
    pub frames: usize,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            n_classes: 10,
            samples_per_class: 500,
            noise: 0.1,
            seed: 0,
            n_mels: 256,
            frames: 64,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("toy dataset needs classes and samples".into()));
        }
        if self.n_mels < self.n_classes || self.frames == 0 {
            return Err(Error::Config(format!(
                "{} mel bins cannot hold {} disjoint bands",
                self.n_mels, self.n_classes
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Mel-bin range `[lo, hi)` of class `k`.
    pub fn band(&self, k: usize) -> (usize, usize) {
        (k * self.n_mels / self.n_classes, (k + 1) * self.n_mels / self.n_classes)
    }
}

pub fn generate_toy_dataset(spec: &ToyDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = Shape::new(1, 1, spec.n_mels, spec.frames);
    let mut inputs = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(inputs.capacity());
    for _ in 0..spec.samples_per_class {
        for k in 0..spec.n_classes {
            let (lo, hi) = spec.band(k);
            let amp: f64 = rng.gen_range(0.8..1.2);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let rate = (k + 1) as f64;
            let x = Tensor::from_fn(shape, |_, _, f, t| {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise;
                let tone = if (lo..hi).contains(&f) {
                    let w = std::f64::consts::TAU * rate * t as f64 / spec.frames as f64 + phase;
                    amp * (1.0 + 0.5 * w.sin())
                } else {
                    0.0
                };
                (tone + noise) as f32
            });
            inputs.push(x);
            labels.push(k);
        }
    }
    let names = (0..spec.n_classes).map(|k| format!("class{k}")).collect();
    Dataset::new(inputs, labels, names)
}

/// Outcome of [`load_wav_folder`].
pub struct FolderLoad {
    pub dataset: Dataset,
    /// Files that could not be read or transformed.
    pub skipped: Vec<(std::path::PathBuf, String)>,
}

/// `root/<class>/*.wav`, classes labeled by sorted directory name.
pub fn load_wav_folder(root: &Path, frontend: &LogMel) -> Result<FolderLoad> {
    let mut classes: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Invalid(format!("{}: no class directories", root.display())));
    }
    let rate = frontend.config().sample_rate;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    let mut skipped = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Invalid(format!("{}: class directory has no .wav files", dir.display())));
        }
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for f in files {
            let spec = load_wav(&f)
                .and_then(|c| resample_linear(&c, rate))
                .and_then(|c| frontend.compute(&c));
            match spec {
                Ok(s) => {
                    inputs.push(s.tensor);
                    labels.push(label);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped.push((f, e.to_string()));
                }
            }
        }
    }
    Ok(FolderLoad {
        dataset: Dataset::new(inputs, labels, names)?,
        skipped,
    })
}
