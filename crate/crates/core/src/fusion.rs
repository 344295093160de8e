//! Cross-modal fusion, masked convolution over the 2D maps, and scoring.
//!
//! Map features travel cell-major: only the valid cells of a scale are
//! materialized, as rows of a `[cells × d]` tensor ordered like
//! [`ScaleLayout::cells`]. Invalid cells are therefore exactly zero at every
//! stage; [`FusedMap::to_dense`] and [`ScoreMap::grid`] expand to full grids.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::temporal_map::ScaleLayout;
use crate::tensor::nn::Linear;
use crate::tensor::{ActiveCells, ParamId, ParamSet, SeededInit, Tape, Tensor, Var};

/// Projections of the sentence and moment features into a common space.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub text: Linear,
    pub video: Linear,
}

impl FusionParams {
    pub fn register(
        params: &mut ParamSet,
        init: &mut SeededInit,
        d_t: usize,
        d_v: usize,
    ) -> Result<Self> {
        Ok(FusionParams {
            text: Linear::register(params, init, "fusion.text", d_t, d_v, false)?,
            video: Linear::register(params, init, "fusion.video", d_v, d_v, false)?,
        })
    }
}

/// Cell-major features of one scale.
#[derive(Debug, Clone)]
pub struct FusedMap {
    pub cells: Arc<ActiveCells>,
    /// `[cells × d]`
    pub features: Var,
}

impl FusedMap {
    /// Expands to a dense `[N × N × d]` tensor with zeros off the mask.
    pub fn to_dense(&self, tape: &Tape<'_>) -> Tensor {
        let (n, w) = self.cells.dims();
        let d = tape.shape(self.features)[1];
        let rows = tape.value(self.features);
        let mut data = vec![0.0; n * w * d];
        for (i, &(x, y)) in self.cells.cells().iter().enumerate() {
            data[(x * w + y) * d..(x * w + y + 1) * d].copy_from_slice(&rows[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![n, w, d], data).expect("finite")
    }

    /// Masks a dense `[N × N × d]` map down to the active cells of `cells`.
    pub fn from_dense(tape: &mut Tape<'_>, dense: Var, cells: &Arc<ActiveCells>) -> Result<Self> {
        let (n, w) = cells.dims();
        let d = match tape.shape(dense) {
            [a, b, d] if *a == n && *b == w => *d,
            s => return Err(Error::dim("FusedMap::from_dense", s, &[n, w, 0])),
        };
        let flat = tape.reshape(dense, &[n * w, d])?;
        let rows: Vec<usize> = cells.cells().iter().map(|&(x, y)| x * w + y).collect();
        Ok(FusedMap {
            cells: Arc::clone(cells),
            features: tape.gather_rows(flat, &rows)?,
        })
    }
}

/// `l2_normalize((W^T·s) ⊙ (W^M·m))` for every valid cell `m`.
///
/// `map_cells` is `[cells × d^v]`, `sentence` is `[d^T]`. The same sentence
/// vector is used for every scale.
pub fn fuse<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    fusion: &FusionParams,
    layout: &ScaleLayout,
    map_cells: Var,
    sentence: Var,
) -> Result<FusedMap> {
    let d_t = fusion.text.d_in;
    if tape.value(sentence).len() != d_t {
        return Err(Error::dim("fuse", tape.shape(sentence), &[d_t]));
    }
    match tape.shape(map_cells) {
        [p, d] if *p == layout.cells.len() && *d == fusion.video.d_in => {}
        s => return Err(Error::dim("fuse", s, &[layout.cells.len(), fusion.video.d_in])),
    }
    let s = tape.reshape(sentence, &[1, d_t])?;
    let t = fusion.text.forward(tape, params, s)?;
    let m = fusion.video.forward(tape, params, map_cells)?;
    let prod = tape.mul_row(m, t)?;
    let fused = tape.l2_normalize(prod, 1)?;
    Ok(FusedMap {
        cells: Arc::clone(&layout.cells),
        features: fused,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
}

/// Convolution layers shared by every scale.
#[derive(Debug, Clone)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
    pub kernel_size: usize,
    pub channels: usize,
    pub activation: Activation,
}

impl ConvStack {
    pub fn register(
        params: &mut ParamSet,
        init: &mut SeededInit,
        n_layers: usize,
        kernel_size: usize,
        channels: usize,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("conv stack needs at least one layer".into()));
        }
        if kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {kernel_size} must be odd")));
        }
        let fan_in = channels * kernel_size * kernel_size;
        let layers = (0..n_layers)
            .map(|l| {
                let kernels = params.insert(
                    format!("conv.l{l}.kernels"),
                    init.uniform(&[channels, channels, kernel_size, kernel_size], fan_in),
                )?;
                let bias = params.insert(format!("conv.l{l}.bias"), init.uniform(&[channels], fan_in))?;
                Ok(ConvLayer { kernels, bias })
            })
            .collect::<Result<_>>()?;
        Ok(ConvStack {
            layers,
            kernel_size,
            channels,
            activation: Activation::Relu,
        })
    }

    /// Applies every layer as conv → mask → activation.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        params: &'p ParamSet,
        fused: &FusedMap,
    ) -> Result<FusedMap> {
        let mut x = fused.features;
        for layer in &self.layers {
            let k = tape.param(params, layer.kernels);
            let b = tape.param(params, layer.bias);
            x = tape.masked_conv2d(x, &fused.cells, k, b)?;
            if self.activation == Activation::Relu {
                x = tape.relu(x)?;
            }
        }
        Ok(FusedMap {
            cells: Arc::clone(&fused.cells),
            features: x,
        })
    }
}

/// Alignment scores of one scale.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub cells: Arc<ActiveCells>,
    /// Pre-sigmoid values, `[cells]`.
    pub logits: Var,
    /// `sigmoid(logits)`, `[cells]`.
    pub scores: Var,
}

impl ScoreMap {
    /// Dense row-major `N × N` grid; invalid cells are 0.
    pub fn grid(&self, tape: &Tape<'_>) -> Vec<f64> {
        let (n, w) = self.cells.dims();
        let mut out = vec![0.0; n * w];
        for (&(x, y), &s) in self.cells.cells().iter().zip(tape.value(self.scores)) {
            out[x * w + y] = s;
        }
        out
    }
}

/// Per-cell `sigmoid(w·f + b)`.
#[derive(Debug, Clone, Copy)]
pub struct Scorer {
    pub linear: Linear,
}

impl Scorer {
    pub fn register(params: &mut ParamSet, init: &mut SeededInit, d_v: usize) -> Result<Self> {
        Ok(Scorer {
            linear: Linear::register(params, init, "score", d_v, 1, true)?,
        })
    }

    pub fn score<'p>(
        &self,
        tape: &mut Tape<'p>,
        params: &'p ParamSet,
        fused: &FusedMap,
    ) -> Result<ScoreMap> {
        let z = self.linear.forward(tape, params, fused.features)?;
        let n = tape.shape(z)[0];
        let logits = tape.reshape(z, &[n])?;
        let scores = tape.sigmoid(logits)?;
        Ok(ScoreMap {
            cells: Arc::clone(&fused.cells),
            logits,
            scores,
        })
    }
}
