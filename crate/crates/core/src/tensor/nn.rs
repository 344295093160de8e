//! Parameterized layers built from tape primitives.

use super::{ParamId, ParamSet, SeededInit, Tape, Var};
use crate::error::{Error, Result};

/// Affine map `x·W + b` on row vectors, `W: [d_in × d_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn register(
        params: &mut ParamSet,
        init: &mut SeededInit,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = params.insert(format!("{name}.weight"), init.uniform(&[d_in, d_out], d_in))?;
        let bias = if with_bias {
            Some(params.insert(format!("{name}.bias"), init.uniform(&[d_out], d_in))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// Applies the map to every row of `x[m × d_in]`.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, params: &'p ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(params, b);
                tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Weights of one LSTM cell; gate column order is input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmParams {
    pub fn register(
        params: &mut ParamSet,
        init: &mut SeededInit,
        name: &str,
        d_in: usize,
        d_h: usize,
    ) -> Result<Self> {
        let w_ih = params.insert(format!("{name}.w_ih"), init.uniform(&[d_in, 4 * d_h], d_in))?;
        let w_hh = params.insert(format!("{name}.w_hh"), init.uniform(&[d_h, 4 * d_h], d_h))?;
        let bias = params.insert(format!("{name}.bias"), init.uniform(&[4 * d_h], d_h))?;
        Ok(LstmParams {
            w_ih,
            w_hh,
            bias,
            d_in,
            d_h,
        })
    }

    pub fn cell<'p>(
        &self,
        tape: &mut Tape<'p>,
        params: &'p ParamSet,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let w_ih = tape.param(params, self.w_ih);
        let w_hh = tape.param(params, self.w_hh);
        let bias = tape.param(params, self.bias);
        lstm_cell(tape, x, h, c, w_ih, w_hh, bias)
    }
}

/// One LSTM step.
///
/// `x` is `[d_in]` or `[B × d_in]`; `h` and `c` match it with `d_h`
/// columns. `w_ih: [d_in × 4d_h]`, `w_hh: [d_h × 4d_h]`, `bias: [4d_h]`.
///
/// ```text
/// i, f, o = σ(·)   g = tanh(·)   c' = f⊙c + i⊙g   h' = o⊙tanh(c')
/// ```
pub fn lstm_cell(
    tape: &mut Tape<'_>,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let vector = tape.shape(x).len() == 1;
    let (x, h, c) = if vector {
        let dx = tape.shape(x)[0];
        let dh = tape.shape(h).first().copied().unwrap_or(0);
        let dc = tape.shape(c).first().copied().unwrap_or(0);
        (
            tape.reshape(x, &[1, dx])?,
            tape.reshape(h, &[1, dh])?,
            tape.reshape(c, &[1, dc])?,
        )
    } else {
        (x, h, c)
    };
    let d_h = match tape.shape(h) {
        [_, d] => *d,
        s => return Err(Error::dim("lstm_cell", s, &[0, 0])),
    };
    if tape.shape(c) != tape.shape(h) {
        return Err(Error::dim("lstm_cell", tape.shape(c), tape.shape(h)));
    }
    if tape.shape(w_hh) != [d_h, 4 * d_h] {
        return Err(Error::dim("lstm_cell", tape.shape(w_hh), &[d_h, 4 * d_h]));
    }
    let xi = tape.matmul(x, w_ih)?;
    let hh = tape.matmul(h, w_hh)?;
    let pre = tape.add(xi, hh)?;
    let pre = tape.add_row_bias(pre, bias)?;
    let i = tape.slice_cols(pre, 0, d_h)?;
    let f = tape.slice_cols(pre, d_h, d_h)?;
    let g = tape.slice_cols(pre, 2 * d_h, d_h)?;
    let o = tape.slice_cols(pre, 3 * d_h, d_h)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.hadamard(f, c)?;
    let ig = tape.hadamard(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.hadamard(o, tc)?;
    if vector {
        Ok((tape.reshape(h_next, &[d_h])?, tape.reshape(c_next, &[d_h])?))
    } else {
        Ok((h_next, c_next))
    }
}
