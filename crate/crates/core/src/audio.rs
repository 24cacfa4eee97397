//! Audio loading and the log-mel frontend.
//!
//! The default configuration turns one second of 32 kHz audio into a
//! `(1, 1, 256, 64)` tensor: a Hann window of 3072 samples zero-padded to a
//! 4096-point FFT, hop 500, reflect-padded centered frames, power spectrum,
//! 256 Slaney-normalized mel filters and `ln(max(v, 1e-10))`.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Mono samples in `[-1, 1]` with their sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl WaveClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty audio clip".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(WaveClip { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit PCM or 32-bit float WAV file, averaging channels to mono.
pub fn load_wav(path: &Path) -> Result<WaveClip> {
    let file = std::fs::File::open(path)?;
    read_wav(std::io::BufReader::new(file), path)
}

/// [`load_wav`] on any reader; `path` only labels errors.
pub fn read_wav<R: Read>(reader: R, path: &Path) -> Result<WaveClip> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut r = hound::WavReader::new(reader).map_err(wav_err)?;
    let spec = r.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => r
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => r
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::Invalid(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits (need 16-bit PCM or 32-bit float)",
                path.display()
            )))
        }
    };
    let ch = spec.channels as usize;
    if ch == 0 || interleaved.len() < ch {
        return Err(Error::Invalid(format!("{}: no audio frames", path.display())));
    }
    let mono = if ch == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(ch)
            .map(|frame| frame.iter().sum::<f32>() / ch as f32)
            .collect()
    };
    WaveClip::new(mono, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav(path: &Path, clip: &WaveClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Linear interpolation onto a `target_rate` grid.
/// Output length is `round(len · target / source)`.
pub fn resample_linear(clip: &WaveClip, target_rate: u32) -> Result<WaveClip> {
    if target_rate == 0 {
        return Err(Error::Invalid("target sample rate must be positive".into()));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let src = &clip.samples;
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let len = ((src.len() as f64) / ratio).round().max(1.0) as usize;
    let last = src.len() - 1;
    let samples = (0..len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = (pos.floor() as usize).min(last);
            let frac = pos - j as f64;
            if j == last || frac == 0.0 {
                src[j]
            } else {
                ((1.0 - frac) * src[j] as f64 + frac * src[j + 1] as f64) as f32
            }
        })
        .collect();
    WaveClip::new(samples, target_rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub target_frames: usize,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            sample_rate: 32_000,
            win_length: 3072,
            hop_length: 500,
            n_fft: 4096,
            n_mels: 256,
            fmin: 0.0,
            fmax: 16_000.0,
            log_floor: 1e-10,
            target_frames: 64,
        }
    }
}

impl LogMelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad("win_length must be in 1..=n_fft");
        }
        if self.hop_length == 0 {
            return bad("hop_length must be positive");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        if self.target_frames == 0 {
            return bad("target_frames must be positive");
        }
        Ok(())
    }

    /// Short hash of every setting plus the fixed choices (Hann window,
    /// reflect padding, Slaney mel scale and normalization).
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(format!("{json}|hann|reflect|slaney|slaney-norm|power|ln").as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// STFT frames before cropping: `floor(len / hop) + 1`.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples / self.hop_length + 1
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(1, 1, self.n_mels, self.target_frames)
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Triangular filters with area normalization, `n_mels × (n_fft/2 + 1)`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Band edges in Hz: filter `m` spans `edges[m]..edges[m + 2]`, peaking at `edges[m + 1]`.
    pub edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &LogMelConfig) -> Self {
        let n_bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (r - l);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
                weights[m * n_bins + k] = w * norm;
            }
        }
        MelFilterbank {
            n_mels: cfg.n_mels,
            n_bins,
            weights,
            edges,
        }
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..][..self.n_bins]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges[m + 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    /// `(1, 1, n_mels, target_frames)`.
    pub tensor: Tensor<f32>,
    pub fingerprint: String,
}

impl LogMelSpectrogram {
    /// One line per mel bin, frames separated by commas.
    pub fn to_csv(&self) -> String {
        let s = self.tensor.shape();
        let mut out = String::new();
        for row in self.tensor.data().chunks(s.t) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// A configured frontend; construction plans the FFT and the filterbank
/// once so that many clips can share them.
pub struct LogMel {
    cfg: LogMelConfig,
    window: Vec<f64>,
    filters: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
    fingerprint: String,
}

impl LogMel {
    pub fn new(cfg: LogMelConfig) -> Result<Self> {
        cfg.validate()?;
        // Periodic Hann of win_length, centered inside n_fft.
        let offset = (cfg.n_fft - cfg.win_length) / 2;
        let mut window = vec![0.0; cfg.n_fft];
        for i in 0..cfg.win_length {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / cfg.win_length as f64;
            window[offset + i] = 0.5 - 0.5 * phase.cos();
        }
        Ok(LogMel {
            cfg,
            window,
            filters: MelFilterbank::new(&cfg),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            fingerprint: cfg.fingerprint(),
        })
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filters
    }

    fn check_clip(&self, clip: &WaveClip) -> Result<()> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::Invalid(format!(
                "clip is at {} Hz, frontend expects {} Hz (resample first)",
                clip.sample_rate, self.cfg.sample_rate
            )));
        }
        if clip.samples.len() < self.cfg.hop_length {
            return Err(Error::Invalid(format!(
                "clip has {} samples, shorter than one hop ({})",
                clip.samples.len(),
                self.cfg.hop_length
            )));
        }
        Ok(())
    }

    /// Power spectrogram, one `n_fft/2 + 1` row per frame.
    pub fn power_frames(&self, clip: &WaveClip) -> Result<Vec<Vec<f64>>> {
        self.check_clip(clip)?;
        let x = &clip.samples;
        let n = x.len() as isize;
        let half = (self.cfg.n_fft / 2) as isize;
        // Reflection without repeating the edge sample, folded as often as needed.
        let period = 2 * (n - 1).max(1);
        let reflect = |i: isize| -> f64 {
            if n == 1 {
                return x[0] as f64;
            }
            let m = i.rem_euclid(period);
            let j = if m < n { m } else { period - m };
            x[j as usize] as f64
        };
        let frames = self.cfg.frame_count(x.len());
        Ok((0..frames)
            .into_par_iter()
            .map(|fi| {
                let start = (fi * self.cfg.hop_length) as isize - half;
                let mut buf: Vec<Complex<f64>> = self
                    .window
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| Complex::new(if w == 0.0 { 0.0 } else { w * reflect(start + k as isize) }, 0.0))
                    .collect();
                self.fft.process(&mut buf);
                buf[..self.filters.n_bins].iter().map(|c| c.norm_sqr()).collect()
            })
            .collect())
    }

    /// Mel energies before the log, `n_mels` rows of `frames` values.
    pub fn mel_energies(&self, clip: &WaveClip) -> Result<Vec<Vec<f64>>> {
        let power = self.power_frames(clip)?;
        Ok((0..self.filters.n_mels)
            .map(|m| {
                let w = self.filters.row(m);
                power
                    .iter()
                    .map(|p| w.iter().zip(p).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect())
    }

    pub fn compute(&self, clip: &WaveClip) -> Result<LogMelSpectrogram> {
        let mel = self.mel_energies(clip)?;
        let t = self.cfg.target_frames;
        let floor = self.cfg.log_floor;
        let mut data = Vec::with_capacity(self.cfg.n_mels * t);
        for row in &mel {
            for j in 0..t {
                let v = row.get(j).copied().unwrap_or(floor);
                data.push(v.max(floor).ln() as f32);
            }
        }
        Ok(LogMelSpectrogram {
            tensor: Tensor::from_vec(self.cfg.output_shape(), data)?,
            fingerprint: self.fingerprint.clone(),
        })
    }
}

/// One-shot convenience around [`LogMel`].
pub fn log_mel(clip: &WaveClip, cfg: &LogMelConfig) -> Result<LogMelSpectrogram> {
    LogMel::new(*cfg)?.compute(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, n: usize, sr: u32) -> WaveClip {
        let s = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32)
            .collect();
        WaveClip::new(s, sr).unwrap()
    }

    /// RIFF header for `data` bytes of PCM16 audio.
    fn pcm16_file(channels: u16, rate: u32, samples: &[i16]) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data_len).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * channels as u32 * 2).to_le_bytes());
        b.extend_from_slice(&(channels * 2).to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn pcm16_scaling() {
        let f = pcm16_file(1, 8000, &[32767, 0, -32768]);
        let c = read_wav(&f[..], Path::new("mem.wav")).unwrap();
        assert_eq!(c.samples, vec![32767.0 / 32768.0, 0.0, -1.0]);
        assert_eq!(c.sample_rate, 8000);
    }

    #[test]
    fn stereo_is_averaged() {
        // Four stereo frames (a, b).
        let f = pcm16_file(2, 16000, &[16384, 0, -16384, 16384, 8192, 8192, 0, -32768]);
        let c = read_wav(&f[..], Path::new("mem.wav")).unwrap();
        assert_eq!(c.samples, vec![0.25, 0.0, 0.25, -0.5]);
    }

    #[test]
    fn zero_payload_and_bad_header() {
        let f = pcm16_file(1, 8000, &[0; 5]);
        assert!(read_wav(&f[..], Path::new("z.wav")).unwrap().samples.iter().all(|&s| s == 0.0));
        assert!(read_wav(&b"RIFX0000"[..], Path::new("bad.wav")).is_err());
        assert!(read_wav(&pcm16_file(1, 8000, &[])[..], Path::new("empty.wav")).is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let clip = sine(440.0, 800, 8000);
        write_wav(&p, &clip).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.samples.len(), 800);
        let err = back.samples.iter().zip(&clip.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-4);
    }

    #[test]
    fn resampling() {
        let c = WaveClip::new(vec![0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(resample_linear(&c, 1).unwrap().samples, vec![0.0, 2.0]);
        assert_eq!(resample_linear(&c, 2).unwrap(), c);
        let k = WaveClip::new(vec![0.3; 441], 44100).unwrap();
        let r = resample_linear(&k, 32000).unwrap();
        assert_eq!(r.samples.len(), 320);
        assert!(r.samples.iter().all(|&s| (s - 0.3).abs() < 1e-7));
        let up = resample_linear(&c, 4).unwrap();
        assert_eq!(up.samples, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.0]);
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 999.0, 1000.0, 4000.0, 16000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn filter_rows_are_nonnegative_and_nonempty() {
        let fb = MelFilterbank::new(&LogMelConfig::default());
        for m in 0..fb.n_mels {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0), "row {m} empty");
        }
    }

    #[test]
    fn one_second_gives_65_then_64_frames() {
        let cfg = LogMelConfig::default();
        assert_eq!(cfg.frame_count(32000), 65);
        let fe = LogMel::new(cfg).unwrap();
        let clip = sine(440.0, 32000, 32000);
        assert_eq!(fe.power_frames(&clip).unwrap().len(), 65);
        let s = fe.compute(&clip).unwrap();
        assert_eq!(s.tensor.shape(), Shape::new(1, 1, 256, 64));
    }

    #[test]
    fn silence_is_the_log_floor() {
        let cfg = LogMelConfig::default();
        let s = log_mel(&WaveClip::new(vec![0.0; 32000], 32000).unwrap(), &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(s.tensor.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn sine_peaks_at_its_mel_bin() {
        let cfg = LogMelConfig::default();
        let fe = LogMel::new(cfg).unwrap();
        let mel = fe.mel_energies(&sine(1000.0, 32000, 32000)).unwrap();
        let energy: Vec<f64> = mel.iter().map(|r| r.iter().sum()).collect();
        let peak = energy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        // Filter m peaks at mel position (m + 1) · step.
        let step = (hz_to_mel(cfg.fmax) - hz_to_mel(cfg.fmin)) / (cfg.n_mels + 1) as f64;
        let expected = (hz_to_mel(1000.0) - hz_to_mel(cfg.fmin)) / step - 1.0;
        assert!((peak as f64 - expected).abs() <= 2.0, "peak {peak}, expected {expected}");
        let width = fe.filterbank().center_hz(peak + 1) - fe.filterbank().center_hz(peak);
        assert!((fe.filterbank().center_hz(peak) - 1000.0).abs() <= 2.0 * width);
    }

    #[test]
    fn power_scales_with_energy() {
        let fe = LogMel::new(LogMelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f32> = (0..32000).map(|_| rng.gen_range(-0.25..0.25)).collect();
        let total = |k: f32| -> f64 {
            let c = WaveClip::new(noise.iter().map(|v| v * k).collect(), 32000).unwrap();
            fe.power_frames(&c).unwrap().iter().flatten().sum()
        };
        let ratio = total(2.0) / total(1.0);
        assert!((ratio - 4.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn deterministic_and_short_clips() {
        let cfg = LogMelConfig::default();
        let clip = sine(250.0, 40000, 32000);
        assert_eq!(log_mel(&clip, &cfg).unwrap(), log_mel(&clip, &cfg).unwrap());
        let short = sine(250.0, 1000, 32000);
        let s = log_mel(&short, &cfg).unwrap();
        assert_eq!(s.tensor.shape(), Shape::new(1, 1, 256, 64));
        assert!(s.tensor.all_finite());
        assert!(log_mel(&sine(250.0, 499, 32000), &cfg).is_err());
        assert!(log_mel(&sine(250.0, 32000, 16000), &cfg).is_err());
    }

    #[test]
    fn config_validation_and_fingerprint() {
        let mut cfg = LogMelConfig::default();
        assert!(cfg.validate().is_ok());
        let fp = cfg.fingerprint();
        cfg.win_length = 5000;
        assert!(cfg.validate().is_err());
        cfg.win_length = 2048;
        assert_ne!(cfg.fingerprint(), fp);
        assert!(serde_json::from_str::<LogMelConfig>(r#"{"hop": 3}"#).is_err());
    }
}
