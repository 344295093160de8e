//! Finite-difference check of a small tape program: an LSTM step feeding
//! a logistic head trained with BCE.
//!
//! cargo run --release --example gradient_check

use m2d::gradcheck::{check_inputs, random_tensor, DEFAULT_STEP};
use m2d::tensor::nn::lstm_cell;

fn main() -> m2d::Result<()> {
    let (b, d_in, d_h) = (3, 5, 4);
    let inputs = [
        random_tensor(&[b, d_in], 1),
        random_tensor(&[b, d_h], 2),
        random_tensor(&[b, d_h], 3),
        random_tensor(&[d_in, 4 * d_h], 4),
        random_tensor(&[d_h, 4 * d_h], 5),
        random_tensor(&[4 * d_h], 6),
        random_tensor(&[d_h, 1], 7),
    ];
    let targets = [1.0, 0.0, 0.6];
    let report = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
        let (h, _c) = lstm_cell(t, v[0], v[1], v[2], v[3], v[4], v[5])?;
        let h = t.tanh(h)?;
        let z = t.matmul(h, v[6])?;
        t.bce_with_logits(z, &targets)
    })?;
    let names = ["x", "h", "c", "w_ih", "w_hh", "bias", "w_out"];
    for (name, err) in names.iter().zip(&report.relative_errors) {
        println!("{name:<6} relative error {err:.2e}");
    }
    println!("max {:.2e}", report.max_relative_error());
    Ok(())
}
