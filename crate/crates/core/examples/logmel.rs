//! Log-mel features of a synthetic 1 kHz tone: where the energy lands and
//! what the frontend writes out.
//!
//! `cargo run --release --example logmel -- [out.csv]`

use tfsepnet::audio::{hz_to_mel, LogMel, LogMelConfig, WaveClip};

fn main() -> tfsepnet::Result<()> {
    let cfg = LogMelConfig::default();
    let sr = cfg.sample_rate as f32;
    let tone = WaveClip::new(
        (0..cfg.sample_rate as usize)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / sr).sin())
            .collect(),
        cfg.sample_rate,
    )?;
    let frontend = LogMel::new(cfg)?;
    let spec = frontend.compute(&tone)?;
    let s = spec.tensor.shape();
    println!("output shape {s}, {} frames before cropping", cfg.frame_count(tone.samples.len()));

    let t = s.t / 2;
    let (peak, level) = (0..s.f)
        .map(|f| (f, spec.tensor.get(0, 0, f, t)))
        .fold((0, f32::MIN), |a, b| if b.1 > a.1 { b } else { a });
    let fb = frontend.filterbank();
    let expected = (0..fb.n_mels)
        .min_by(|&a, &b| {
            let d = |m: usize| (hz_to_mel(fb.center_hz(m)) - hz_to_mel(1000.0)).abs();
            d(a).total_cmp(&d(b))
        })
        .unwrap_or(0);
    println!("peak mel bin {peak} (centre {:.0} Hz, log energy {level:.2}); nearest filter to 1 kHz is {expected}", fb.center_hz(peak));

    let silence = frontend.compute(&WaveClip::new(vec![0.0; tone.samples.len()], cfg.sample_rate)?)?;
    let floor = silence.tensor.data()[0];
    println!("silence: every value is {floor:.3} (= ln {:e})", cfg.log_floor);

    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, spec.to_csv())?;
        println!("wrote {path}");
    }
    Ok(())
}
