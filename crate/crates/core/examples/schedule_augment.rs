//! The learning-rate schedule and what Mixup and Freq-MixStyle do to a
//! small batch of toy spectrograms.
//!
//! `cargo run --example schedule_augment`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tfsepnet::train::augment::freq_stats;
use tfsepnet::train::{
    freq_mixstyle, generate_toy_dataset, lr_at, mixup, sample_beta, ToyDatasetSpec, TrainConfig,
};

fn main() -> tfsepnet::Result<()> {
    let cfg = TrainConfig::default();
    println!("epoch      lr");
    for e in [0.0, 1.0, 2.5, 5.0, 25.0, 52.5, 75.0, 99.0, 100.0] {
        println!("{e:>5} {:>9.6}", lr_at(e, &cfg)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<f64> = (0..10).map(|_| sample_beta(0.3, 0.3, &mut rng)).collect::<Result<_, _>>()?;
    println!("\nBeta(0.3, 0.3) draws: {:?}", draws.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());

    let data = generate_toy_dataset(&ToyDatasetSpec { samples_per_class: 1, ..Default::default() })?;
    let batch = data.batch(&[0, 3, 6, 9])?;
    let mixed = mixup(&batch, cfg.mixup_alpha, &mut rng)?;
    println!("\nmixup soft labels (first row): {:?}", &mixed.labels.data()[..10]);

    let styled = freq_mixstyle(&batch, cfg.fms_alpha, 1.0, cfg.fms_eps, &mut rng)?;
    let (mu0, _) = freq_stats(&batch.inputs);
    let (mu1, _) = freq_stats(&styled.inputs);
    let f = batch.inputs.shape().f;
    println!("freq-mixstyle, example 0, mean of bins 0..4 before {:?}", &mu0[..4].iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    println!("                                             after  {:?}", &mu1[..4].iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    println!("({} frequency bins per example)", f);
    Ok(())
}
