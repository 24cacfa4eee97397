//! Parameter and MAC table for TF-SepNet-τ and its ablations.
//!
//! `cargo run --example summary -- 40`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tfsepnet::network::{Ablation, NetConfig, TfSepNet};
use tfsepnet::Shape;

fn main() -> tfsepnet::Result<()> {
    let tau: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let input = Shape::new(1, 1, 256, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let net = TfSepNet::<f32>::new(NetConfig::new(tau), &mut rng)?;
    print!("{}", net.summary(input)?.table());

    println!("\n{:<16} {:>10} {:>10}", "variant", "params/K", "MACs/M");
    for flags in ["", "no_shuffle", "no_freq_path", "no_temp_path", "no_adaresnorm"] {
        let cfg = NetConfig::new(tau).with_ablation(Ablation::parse(flags)?);
        let net = TfSepNet::<f32>::new(cfg, &mut rng)?;
        println!(
            "{:<16} {:>10.1} {:>10.2}",
            if flags.is_empty() { "baseline" } else { flags },
            net.count_params() as f64 / 1e3,
            net.count_macs(input)? as f64 / 1e6
        );
    }
    Ok(())
}
