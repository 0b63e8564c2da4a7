//! Max RoI pooling of one proposal over a ramp feature map.
//!
//! ```bash
//! cargo run -p crpn --example roi_pooling
//! ```

use crpn::geometry::BBox;
use crpn::roi::roi_pool;
use crpn::tensor::{Tape, Tensor};

fn main() -> crpn::Result<()> {
    let mut tape = Tape::new();
    let fmap = tape.leaf(Tensor::from_fn([1, 1, 6, 6], |i| i as f64), true);
    let props = [BBox::new(0.0, 0.0, 48.0, 48.0), BBox::new(16.0, 16.0, 40.0, 40.0)];
    let pooled = roi_pool(&mut tape, fmap, &props, 8.0, 2)?;
    for (i, row) in tape.value(pooled).data().chunks(4).enumerate() {
        println!("proposal {i}: {row:?}");
    }
    let total = tape.sum(pooled);
    tape.backward(total)?;
    let winners = tape.grad(fmap).unwrap().data().iter().filter(|&&g| g > 0.0).count();
    println!("{winners} feature cells receive gradient");
    Ok(())
}
