//! Finite-difference checks of the tape: a few raw ops, one TF-SepConvs
//! block and a whole TF-SepNet-8, all in double precision.
//!
//! `cargo run --release --example gradcheck`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tfsepnet::blocks::{TfSepConvs, TfSepConvsSpec};
use tfsepnet::gradcheck::{check_module, finite_diff_check, GradCheckConfig, GradCheckReport};
use tfsepnet::network::{NetConfig, TfSepNet};
use tfsepnet::nn::Mode;
use tfsepnet::ops::Axis;
use tfsepnet::{Shape, Tensor};

fn show(name: &str, r: GradCheckReport) {
    println!(
        "{name:<28} max rel err {:.2e}  ({} coords, {} kinks skipped)",
        r.max_rel_error, r.checked, r.skipped_kinks
    );
}

fn main() -> tfsepnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = GradCheckConfig::default();
    let x = Tensor::<f64>::randn(Shape::new(2, 4, 6, 5), 1.0, &mut rng);
    let w = Tensor::<f64>::randn(Shape::new(2, 4, 1, 5), 1.0, &mut rng);

    show(
        "mean over F",
        finite_diff_check(|t, v| { let m = t.mean_axis(v, Axis::F); t.weighted_sum(m, &w) }, &x, &cfg, &mut rng)?,
    );
    let w2 = Tensor::<f64>::randn(Shape::new(2, 4, 6, 5), 1.0, &mut rng);
    show(
        "channel shuffle",
        finite_diff_check(|t, v| { let s = t.channel_shuffle(v, 2)?; t.weighted_sum(s, &w2) }, &x, &cfg, &mut rng)?,
    );
    show(
        "relu",
        finite_diff_check(|t, v| { let r = t.relu(v); t.weighted_sum(r, &w2) }, &x, &cfg, &mut rng)?,
    );

    let mut block = TfSepConvs::<f64>::new(TfSepConvsSpec::new(4, 8), &mut rng)?;
    show("TF-SepConvs (train mode)", check_module(&mut block, &x, Mode::Train, &cfg, &mut rng)?);

    let mut net = TfSepNet::<f64>::new(NetConfig::new(8), &mut rng)?;
    let xn = Tensor::<f64>::randn(Shape::new(2, 1, 32, 32), 1.0, &mut rng);
    let sampled = GradCheckConfig { samples_per_input: Some(4), ..cfg };
    show("TF-SepNet-8 (sampled)", check_module(&mut net, &xn, Mode::Train, &sampled, &mut rng)?);
    Ok(())
}
