//! Weights bundles: save a freshly built network, list what is inside and
//! load it back into a second instance.
//!
//! `cargo run --example checkpoint`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tfsepnet::bundle::Bundle;
use tfsepnet::network::{NetConfig, TfSepNet};
use tfsepnet::{Shape, Tensor};

fn main() -> tfsepnet::Result<()> {
    let cfg = NetConfig::new(8);
    let a = TfSepNet::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    let mut b = TfSepNet::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2))?;

    let dir = std::env::temp_dir().join("tfsep-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("tau8.tfsb");
    Bundle::from_module(&a, json!({ "net": cfg })).save(&path)?;

    let loaded = Bundle::load(&path)?;
    println!("{} tensors, {} bytes; first few:", loaded.len(), std::fs::metadata(&path)?.len());
    for name in loaded.names().take(6) {
        println!("  {name:<32} {}", loaded.get(name).map(|t| t.shape().compact()).unwrap_or_default());
    }
    loaded.load_into(&mut b, "")?;

    let x = Tensor::randn(Shape::new(1, 1, 256, 64), 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let same = a.logits(&x)?.data() == b.logits(&x)?.data();
    println!("logits identical after loading: {same}");
    Ok(())
}
