//! ERF of four stacked TF-SepConvs blocks against four consecutive-kernel
//! blocks at random initialization, plus PGM renderings of both maps.
//!
//! `cargo run --release --example erf_compare -- [out_dir]`

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tfsepnet::blocks::{ConsecutiveBlock, TfSepConvs, TfSepConvsSpec};
use tfsepnet::erf::{compare_erf, export_map, noise_inputs, ExportFormat, MassMode, DEFAULT_THRESHOLDS};
use tfsepnet::nn::Sequential;
use tfsepnet::Shape;

const CHANNELS: usize = 16;

fn main() -> tfsepnet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "erf-out".into()));
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut separate = Sequential::<f32>::new();
    let mut consecutive = Sequential::<f32>::new();
    for _ in 0..4 {
        separate = separate.push(TfSepConvs::new(TfSepConvsSpec::new(CHANNELS, CHANNELS), &mut rng)?);
        consecutive = consecutive.push(ConsecutiveBlock::new(CHANNELS, &mut rng)?);
    }
    let inputs = noise_inputs(Shape::new(1, CHANNELS, 32, 32), 32, 1);

    for mode in [MassMode::Raw, MassMode::Log] {
        let cmp = compare_erf(&separate, &consecutive, &inputs, &DEFAULT_THRESHOLDS, mode)?;
        println!("{mode:?} mass");
        println!("{:>6} {:>10} {:>12} {:>8}", "t", "separate", "consecutive", "delta");
        for (i, t) in DEFAULT_THRESHOLDS.iter().enumerate() {
            println!(
                "{:>6.2} {:>9.2}% {:>11.2}% {:>+7.2}%",
                t,
                cmp.a.ratios[i] * 100.0,
                cmp.b.ratios[i] * 100.0,
                cmp.delta[i] * 100.0
            );
        }
        if mode == MassMode::Raw {
            let (ma, mb) = cmp.maps.expect("maps are kept");
            export_map(&ma, &out.join("separate.pgm"), ExportFormat::Pgm)?;
            export_map(&mb, &out.join("consecutive.pgm"), ExportFormat::Pgm)?;
        }
    }
    println!("maps written to {}", out.display());
    Ok(())
}
