//! The tape on its own: build a tiny graph by hand and read gradients.
//!
//! `cargo run --example autodiff`

use tfsepnet::ops::Axis;
use tfsepnet::{ConvGeometry, Shape, Tape, Tensor};

fn main() -> tfsepnet::Result<()> {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::from_fn(Shape::new(1, 1, 3, 4), |_, _, f, t| (f * 4 + t) as f64 / 10.0).with_requires_grad(true));
    let w = tape.leaf(&Tensor::full(Shape::new(2, 1, 3, 1), 0.5).with_requires_grad(true));

    // Frequency-axis convolution, pooling over F and a broadcast residual.
    let h = tape.conv2d(x, w, None, ConvGeometry::new((1, 1), (1, 0), 1))?;
    let v = tape.mean_axis(h, Axis::F);
    let h0 = tape.slice_channels(h, 0, 1)?;
    let v0 = tape.slice_channels(v, 0, 1)?;
    let y = tape.broadcast_add(h0, v0)?;
    let r = tape.relu(y);
    let loss = tape.sum(r);

    let g = tape.backward(loss)?;
    println!("loss = {:.4}", tape.value(loss).data()[0]);
    println!("dloss/dx = {:?}", g.tensor(x).data());
    println!("dloss/dw = {:?}", g.tensor(w).data());
    println!("conv MACs recorded on the tape: {}", tape.conv_macs());
    Ok(())
}
