//! Forward-only wrappers over the tape primitives for plain tensors.

use super::{Tape, Tensor, Var};
use crate::error::Result;

fn unary(a: &Tensor, f: impl FnOnce(&mut Tape<'_>, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let va = tape.constant_ref(a);
    let out = f(&mut tape, va)?;
    Ok(tape.to_tensor(out))
}

fn binary(
    a: &Tensor,
    b: &Tensor,
    f: impl FnOnce(&mut Tape<'_>, Var, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let va = tape.constant_ref(a);
    let vb = tape.constant_ref(b);
    let out = f(&mut tape, va, vb)?;
    Ok(tape.to_tensor(out))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |t, a, b| t.matmul(a, b))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |t, a, b| t.hadamard(a, b))
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    unary(a, |t, a| t.sigmoid(a))
}

pub fn tanh(a: &Tensor) -> Result<Tensor> {
    unary(a, |t, a| t.tanh(a))
}

pub fn l2_normalize(a: &Tensor, axis: usize) -> Result<Tensor> {
    unary(a, |t, a| t.l2_normalize(a, axis))
}

/// Per-channel maximum over rows `x..=y` of `a[N×d]`, as a `[d]` vector.
pub fn segment_max(a: &Tensor, x: usize, y: usize) -> Result<Tensor> {
    unary(a, |t, a| {
        let rows = t.segment_max(a, &[Some((x, y))])?;
        let d = t.shape(rows)[1];
        t.reshape(rows, &[d])
    })
}

pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let i = tape.constant_ref(input);
    let k = tape.constant_ref(kernels);
    let b = tape.constant_ref(bias);
    let out = tape.conv2d(i, k, b)?;
    Ok(tape.to_tensor(out))
}
