//! Reverse-mode gradients on a tiny graph, checked against finite
//! differences.
//!
//! ```bash
//! cargo run -p crpn --example autodiff
//! ```

use crpn::tensor::{gradcheck, Tape, Tensor};

fn main() -> crpn::Result<()> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.0, -0.3])?, true);
    let w = tape.leaf(Tensor::new([3, 2], vec![1.0, 0.5, -0.5, 0.2, 0.3, -1.0])?, true);
    let b = tape.constant(Tensor::zeros([2]));
    let y = tape.linear(x, w, b)?;
    let p = tape.softmax(y)?;
    let target = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0])?);
    let picked = tape.mul(p, target)?;
    let loss = tape.sum(picked);
    tape.backward(loss)?;
    println!("probability mass on the targets {:.6}", tape.value(loss).item());
    println!("d loss / d x = {:?}", tape.grad(x).unwrap().data());

    let point = Tensor::new([1, 1, 4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let kernel = Tensor::new([2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.11).cos()).collect())?;
    let err = gradcheck(
        |t, v| {
            let k = t.constant(kernel.clone());
            let bias = t.constant(Tensor::zeros([2]));
            let c = t.conv2d(v, k, bias, 1, 1)?;
            let r = t.relu(c);
            Ok(t.sum(r))
        },
        &point,
        1e-6,
    )?;
    println!("conv2d + relu gradcheck: max relative error {err:.2e}");
    Ok(())
}
