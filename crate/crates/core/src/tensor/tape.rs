use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use super::gemm::{gemm, Transpose};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Active cells of an `h×w` grid, used by [`Tape::masked_conv2d`].
///
/// Cells are stored in a fixed order; row `i` of a cell-major tensor holds
/// the channel vector of `cells[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveCells {
    h: usize,
    w: usize,
    cells: Vec<(usize, usize)>,
    lookup: Vec<Option<usize>>,
}

impl ActiveCells {
    pub fn new(h: usize, w: usize, cells: Vec<(usize, usize)>) -> Result<Self> {
        let mut lookup = vec![None; h * w];
        for (i, &(r, c)) in cells.iter().enumerate() {
            if r >= h || c >= w {
                return Err(Error::index(
                    "ActiveCells::new",
                    format!("cell ({r},{c}) outside {h}x{w} grid"),
                ));
            }
            if lookup[r * w + c].replace(i).is_some() {
                return Err(Error::index(
                    "ActiveCells::new",
                    format!("cell ({r},{c}) listed twice"),
                ));
            }
        }
        Ok(ActiveCells { h, w, cells, lookup })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        if r < self.h && c < self.w {
            self.lookup[r * self.w + c]
        } else {
            None
        }
    }

    fn neighbor(&self, r: usize, c: usize, dr: isize, dc: isize) -> Option<usize> {
        let rr = r as isize + dr;
        let cc = c as isize + dc;
        if rr < 0 || cc < 0 {
            return None;
        }
        self.position(rr as usize, cc as usize)
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Scale(Var, f64),
    AddRowBias { a: Var, bias: Var, cols: usize },
    MulRow { a: Var, row: Var, cols: usize },
    Hadamard(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    L2Normalize { a: Var, outer: usize, len: usize, inner: usize, norms: Vec<f64> },
    SegmentMax { a: Var, cols: usize, argmax: Vec<Option<usize>> },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SliceCols { a: Var, cols: usize, start: usize, len: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize, cols: usize },
    RepeatRows { a: Var, times: usize },
    Gather { a: Var, index: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize>, cols: usize },
    SumRows { a: Var, rows: usize, cols: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d(Box<ConvSaved>),
    MaskedConv2d(Box<MaskedConvSaved>),
    LogSoftmaxPick { logits: Var, targets: Vec<usize>, classes: usize, probs: Vec<f64> },
    BceWithLogits { z: Var, targets: Vec<f64> },
}

struct ConvSaved {
    input: Var,
    kernels: Var,
    bias: Var,
    c_out: usize,
    patch: usize,
    hw: usize,
    // im2col buffer, `patch × hw`
    cols: Vec<f64>,
    geom: ConvGeom,
}

struct MaskedConvSaved {
    input: Var,
    kernels: Var,
    bias: Var,
    c_out: usize,
    patch: usize,
    // im2col buffer, `cells × patch`
    cols: Vec<f64>,
    grid: Arc<ActiveCells>,
    k: usize,
    c_in: usize,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
            Op::AddRowBias { a, bias, .. } => vec![*a, *bias],
            Op::MulRow { a, row, .. } => vec![*a, *row],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::L2Normalize { a, .. }
            | Op::SegmentMax { a, .. }
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::RepeatRows { a, .. }
            | Op::Gather { a, .. }
            | Op::GatherRows { a, .. }
            | Op::SumRows { a, .. } => vec![*a],
            Op::ConcatCols { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::ConcatRows(parts) => parts.clone(),
            Op::Conv2d(s) => vec![s.input, s.kernels, s.bias],
            Op::MaskedConv2d(s) => vec![s.input, s.kernels, s.bias],
            Op::LogSoftmaxPick { logits, .. } => vec![*logits],
            Op::BceWithLogits { z, .. } => vec![*z],
        }
    }
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Parameters are borrowed from a [`ParamSet`] for the lifetime `'p`, so a
/// tape never copies weights and any number of tapes may read the same set.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    param_leaves: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.leaves.get(node))
            .map(Vec::as_slice)
    }

    /// Adds `scale ×` every parameter gradient into the matching tensor.
    pub fn accumulate_into(&self, params: &mut ParamSet, scale: f64) -> Result<()> {
        for &(id, node) in &self.params {
            if let Some(g) = self.leaves.get(&node) {
                if scale == 1.0 {
                    params.get_mut(id).accumulate_grad(g)?;
                } else {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    params.get_mut(id).accumulate_grad(&scaled)?;
                }
            }
        }
        Ok(())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        check_finite(op_name, &value)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len(), "{op_name}");
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'p, [f64]>,
        needs_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), false, None)
    }

    /// A borrowed constant leaf.
    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), false, None)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), true, None)
    }

    /// The leaf for a parameter; repeated calls return the same handle.
    pub fn param(&mut self, params: &'p ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let t = params.get(id);
        let v = self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), true, Some(id));
        self.param_leaves.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("tape values are finite and shape-consistent")
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Transpose::No,
            Transpose::No,
            m,
            k,
            n,
            self.value(a),
            self.value(b),
            0.0,
            &mut out,
        );
        self.push_node("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push_node("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push_node("scale", self.shape(a).to_vec(), out, Op::Scale(a, factor))
    }

    /// `a[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims("add_row_bias", a)?;
        if self.value(bias).len() != n {
            return Err(Error::dim("add_row_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push_node(
            "add_row_bias",
            self.shape(a).to_vec(),
            out,
            Op::AddRowBias { a, bias, cols: n },
        )
    }

    /// `a[m×n] ⊙ row[n]`, row broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims("mul_row", a)?;
        if self.value(row).len() != n {
            return Err(Error::dim("mul_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|x| x.iter().zip(r).map(|(p, q)| p * q))
            .collect();
        self.push_node(
            "mul_row",
            self.shape(a).to_vec(),
            out,
            Op::MulRow { a, row, cols: n },
        )
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push_node("hadamard", self.shape(a).to_vec(), out, Op::Hadamard(a, b))
    }

    // ---- elementwise nonlinearities -------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        self.push_node("sigmoid", self.shape(a).to_vec(), out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push_node("tanh", self.shape(a).to_vec(), out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push_node("relu", self.shape(a).to_vec(), out, Op::Relu(a))
    }

    /// Normalizes every line along `axis` to unit L2 norm. Exact-zero lines
    /// stay zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::index(
                "l2_normalize",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let norm = (0..len).map(|l| x[at(l)] * x[at(l)]).sum::<f64>().sqrt();
                norms.push(norm);
                if norm > 0.0 {
                    for l in 0..len {
                        out[at(l)] = x[at(l)] / norm;
                    }
                }
            }
        }
        self.push_node(
            "l2_normalize",
            shape,
            out,
            Op::L2Normalize {
                a,
                outer,
                len,
                inner,
                norms,
            },
        )
    }

    // ---- pooling and reshaping ------------------------------------------

    /// Per-channel maximum over inclusive row ranges of `a[N×d]`.
    ///
    /// Each entry of `segments` produces one output row; `None` yields a
    /// zero row. Ties route the gradient to the first maximal row.
    pub fn segment_max(&mut self, a: Var, segments: &[Option<(usize, usize)>]) -> Result<Var> {
        let (n, d) = self.matrix_dims("segment_max", a)?;
        let x = self.value(a);
        let mut out = vec![0.0; segments.len() * d];
        let mut argmax = vec![None; segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let Some((lo, hi)) = *seg else { continue };
            if lo > hi || hi >= n {
                return Err(Error::index(
                    "segment_max",
                    format!("segment ({lo},{hi}) invalid for {n} rows"),
                ));
            }
            for c in 0..d {
                let mut best = lo;
                for r in lo + 1..=hi {
                    if x[r * d + c] > x[best * d + c] {
                        best = r;
                    }
                }
                out[s * d + c] = x[best * d + c];
                argmax[s * d + c] = Some(best);
            }
        }
        self.push_node(
            "segment_max",
            vec![segments.len(), d],
            out,
            Op::SegmentMax { a, cols: d, argmax },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        self.push_node(
            "concat_cols",
            vec![rows, total],
            out,
            Op::ConcatCols { parts: widths, rows },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", a)?;
        if start + len > cols {
            return Err(Error::index(
                "slice_cols",
                format!("columns {start}..{} of {cols}", start + len),
            ));
        }
        let x = self.value(a);
        let out = (0..rows)
            .flat_map(|r| x[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        self.push_node(
            "slice_cols",
            vec![rows, len],
            out,
            Op::SliceCols {
                a,
                cols,
                start,
                len,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let (_, cols) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
        }
        let out = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.push_node("concat_rows", vec![rows, cols], out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_rows", a)?;
        if start + len > rows {
            return Err(Error::index(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        self.push_node(
            "slice_rows",
            vec![len, cols],
            out,
            Op::SliceRows { a, start, cols },
        )
    }

    /// Stacks `times` copies of a vector (any shape, read flat) as rows.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let d = self.value(a).len();
        let out = self.value(a).repeat(times);
        self.push_node("repeat_rows", vec![times, d], out, Op::RepeatRows { a, times })
    }

    /// Picks flat elements of `a`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::index("gather", format!("element {bad} of {}", x.len())));
        }
        let out = index.iter().map(|&i| x[i]).collect();
        self.push_node(
            "gather",
            vec![index.len()],
            out,
            Op::Gather {
                a,
                index: index.to_vec(),
            },
        )
    }

    /// Row lookup `a[rows[i]]`, e.g. an embedding table.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.matrix_dims("gather_rows", a)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::index("gather_rows", format!("row {bad} of {n}")));
        }
        let x = self.value(a);
        let out = rows
            .iter()
            .flat_map(|&r| x[r * cols..(r + 1) * cols].iter().copied())
            .collect();
        self.push_node(
            "gather_rows",
            vec![rows.len(), cols],
            out,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
                cols,
            },
        )
    }

    /// Column sums of `a[m×n]`, giving `[n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("sum_rows", a)?;
        let mut out = vec![0.0; cols];
        for row in self.value(a).chunks(cols.max(1)) {
            add_into(&mut out, row);
        }
        self.push_node("sum_rows", vec![cols], out, Op::SumRows { a, rows, cols })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push_node("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.push_node("mean", vec![1], vec![s], Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        self.push_node("reshape", shape.to_vec(), out, Op::Reshape(a))
    }

    // ---- convolution ------------------------------------------------------

    fn kernel_dims(
        &self,
        op: &'static str,
        kernels: Var,
        bias: Var,
        c_in: usize,
    ) -> Result<(usize, usize)> {
        let (c_out, kc, k, k2) = match self.shape(kernels) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::dim(op, s, &[0, c_in, 0, 0])),
        };
        if kc != c_in {
            return Err(Error::dim(op, self.shape(kernels), &[c_out, c_in, k, k2]));
        }
        if k != k2 {
            return Err(Error::Config(format!("{op}: kernel must be square, got {k}x{k2}")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("{op}: kernel size {k} must be odd")));
        }
        if self.value(bias).len() != c_out {
            return Err(Error::dim(op, self.shape(bias), &[c_out]));
        }
        Ok((c_out, k))
    }

    /// Same-padded 2D cross-correlation of `input[C×H×W]` with
    /// `kernels[C'×C×k×k]` plus `bias[C']`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (c_in, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("conv2d", s, &[0, 0, 0])),
        };
        let (c_out, k) = self.kernel_dims("conv2d", kernels, bias, c_in)?;
        let geom = ConvGeom { c_in, h, w, k };
        let patch = c_in * k * k;
        let hw = h * w;
        let cols = im2col_dense(self.value(input), geom);
        let mut out = vec![0.0; c_out * hw];
        gemm(
            Transpose::No,
            Transpose::No,
            c_out,
            patch,
            hw,
            self.value(kernels),
            &cols,
            0.0,
            &mut out,
        );
        let b = self.value(bias);
        for (co, plane) in out.chunks_mut(hw.max(1)).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[co]);
        }
        self.push_node(
            "conv2d",
            vec![c_out, h, w],
            out,
            Op::Conv2d(Box::new(ConvSaved {
                input,
                kernels,
                bias,
                c_out,
                patch,
                hw,
                cols,
                geom,
            })),
        )
    }

    /// Cross-correlation restricted to the active cells of a grid.
    ///
    /// `input` is cell-major (`[cells × C]`, rows in `grid` order); inactive
    /// cells read as zero and produce no output. Equivalent to scattering
    /// into a dense `C×H×W` map, running [`Tape::conv2d`], and gathering the
    /// active cells back.
    pub fn masked_conv2d(
        &mut self,
        input: Var,
        grid: &Arc<ActiveCells>,
        kernels: Var,
        bias: Var,
    ) -> Result<Var> {
        let (p, c_in) = self.matrix_dims("masked_conv2d", input)?;
        if p != grid.len() {
            return Err(Error::dim("masked_conv2d", self.shape(input), &[grid.len(), c_in]));
        }
        let (c_out, k) = self.kernel_dims("masked_conv2d", kernels, bias, c_in)?;
        let patch = c_in * k * k;
        let cols = im2col_cells(self.value(input), grid, c_in, k);
        let mut out = vec![0.0; p * c_out];
        gemm(
            Transpose::No,
            Transpose::Yes,
            p,
            patch,
            c_out,
            &cols,
            self.value(kernels),
            0.0,
            &mut out,
        );
        let b = self.value(bias);
        for row in out.chunks_mut(c_out.max(1)) {
            add_into(row, b);
        }
        self.push_node(
            "masked_conv2d",
            vec![p, c_out],
            out,
            Op::MaskedConv2d(Box::new(MaskedConvSaved {
                input,
                kernels,
                bias,
                c_out,
                patch,
                cols,
                grid: Arc::clone(grid),
                k,
                c_in,
            })),
        )
    }

    // ---- losses -----------------------------------------------------------

    /// Row-wise log-softmax of `logits[m×V]`, returning the log-probability
    /// of `targets[r]` for every row `r`.
    pub fn log_softmax_pick(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, classes) = self.matrix_dims("log_softmax_pick", logits)?;
        if targets.len() != m {
            return Err(Error::dim("log_softmax_pick", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::index(
                "log_softmax_pick",
                format!("target {bad} of {classes} classes"),
            ));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; m * classes];
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum.ln();
            for (c, v) in row.iter().enumerate() {
                probs[r * classes + c] = (v - log_norm).exp();
            }
            out.push(row[targets[r]] - log_norm);
        }
        self.push_node(
            "log_softmax_pick",
            vec![m],
            out,
            Op::LogSoftmaxPick {
                logits,
                targets: targets.to_vec(),
                classes,
                probs,
            },
        )
    }

    /// Mean binary cross-entropy between `sigmoid(z)` and constant targets,
    /// computed from logits.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(z);
        if x.len() != targets.len() || x.is_empty() {
            return Err(Error::dim("bce_with_logits", self.shape(z), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::NumericGuard {
                op: "bce_with_logits",
                detail: format!("target {bad} outside [0,1]"),
            });
        }
        let total: f64 = x
            .iter()
            .zip(targets)
            .map(|(&v, &y)| v.max(0.0) - v * y + (-v.abs()).exp().ln_1p())
            .sum();
        let out = vec![total / x.len() as f64];
        self.push_node(
            "bce_with_logits",
            vec![1],
            out,
            Op::BceWithLogits {
                z,
                targets: targets.to_vec(),
            },
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        let mut params = Vec::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                if let Some(id) = node.param {
                    params.push((id, i));
                }
                leaves.insert(i, g);
                continue;
            }
            self.backprop(node, &g, &mut grads)?;
        }
        for g in leaves.values() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { leaves, params })
    }

    fn backprop(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        // Returns the gradient buffer for `v`, allocated as zeros.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let len_of = |v: Var| self.nodes[v.0].value.len();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(Transpose::No, Transpose::Yes, m, n, k, g, val(*b), 1.0, da);
                }
                if needs(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(Transpose::Yes, Transpose::No, k, m, n, val(*a), g, 1.0, db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Scale(a, f) => {
                if needs(*a) {
                    let da = slot(grads, *a, g.len());
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += f * x;
                    }
                }
            }
            Op::AddRowBias { a, bias, cols } => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*bias) {
                    let db = slot(grads, *bias, *cols);
                    for row in g.chunks(*cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::MulRow { a, row, cols } => {
                let cols = *cols;
                if needs(*a) {
                    let r = val(*row);
                    let da = slot(grads, *a, g.len());
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * r[i % cols];
                    }
                }
                if needs(*row) {
                    let x = val(*a);
                    let dr = slot(grads, *row, cols);
                    for (i, gi) in g.iter().enumerate() {
                        dr[i % cols] += gi * x[i];
                    }
                }
            }
            Op::Hadamard(a, b) => {
                if needs(*a) {
                    let y = val(*b);
                    let da = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                }
                if needs(*b) {
                    let x = val(*a);
                    let db = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * x[i];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
            Op::L2Normalize {
                a,
                outer,
                len,
                inner,
                norms,
            } => {
                let y = &node.value;
                let (len, inner) = (*len, *inner);
                let da = slot(grads, *a, g.len());
                for o in 0..*outer {
                    for i in 0..inner {
                        let norm = norms[o * inner + i];
                        if norm == 0.0 {
                            continue;
                        }
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let dot: f64 = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                        for l in 0..len {
                            da[at(l)] += (g[at(l)] - y[at(l)] * dot) / norm;
                        }
                    }
                }
            }
            Op::SegmentMax { a, cols, argmax } => {
                let cols = *cols;
                let da = slot(grads, *a, len_of(*a));
                for (j, src) in argmax.iter().enumerate() {
                    if let Some(r) = src {
                        da[r * cols + j % cols] += g[j];
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if needs(p) {
                        let dp = slot(grads, p, rows * c);
                        for r in 0..*rows {
                            add_into(
                                &mut dp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols {
                a,
                cols,
                start,
                len,
            } => {
                let da = slot(grads, *a, len_of(*a));
                for (r, gr) in g.chunks(*len).enumerate() {
                    add_into(&mut da[r * cols + start..r * cols + start + len], gr);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len_of(p);
                    if needs(p) {
                        add_into(slot(grads, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { a, start, cols } => {
                let da = slot(grads, *a, len_of(*a));
                add_into(&mut da[start * cols..start * cols + g.len()], g);
            }
            Op::RepeatRows { a, times } => {
                let d = len_of(*a);
                let da = slot(grads, *a, d);
                for t in 0..*times {
                    add_into(da, &g[t * d..(t + 1) * d]);
                }
            }
            Op::Gather { a, index } => {
                let da = slot(grads, *a, len_of(*a));
                for (gi, &i) in g.iter().zip(index) {
                    da[i] += gi;
                }
            }
            Op::GatherRows { a, rows, cols } => {
                let cols = *cols;
                let da = slot(grads, *a, len_of(*a));
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut da[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                }
            }
            Op::SumRows { a, rows, cols } => {
                let da = slot(grads, *a, rows * cols);
                for row in da.chunks_mut((*cols).max(1)) {
                    add_into(row, g);
                }
            }
            Op::Sum(a) => {
                let da = slot(grads, *a, len_of(*a));
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = len_of(*a);
                let da = slot(grads, *a, n);
                let share = g[0] / n as f64;
                da.iter_mut().for_each(|d| *d += share);
            }
            Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Conv2d(s) => {
                let ConvSaved {
                    input,
                    kernels,
                    bias,
                    c_out,
                    patch,
                    hw,
                    cols,
                    geom,
                } = s.as_ref();
                let (c_out, patch, hw) = (*c_out, *patch, *hw);
                if needs(*kernels) {
                    let dk = slot(grads, *kernels, c_out * patch);
                    gemm(Transpose::No, Transpose::Yes, c_out, hw, patch, g, cols, 1.0, dk);
                }
                if needs(*bias) {
                    let db = slot(grads, *bias, c_out);
                    for (co, plane) in g.chunks(hw.max(1)).enumerate() {
                        db[co] += plane.iter().sum::<f64>();
                    }
                }
                if needs(*input) {
                    let mut dcols = vec![0.0; patch * hw];
                    gemm(
                        Transpose::Yes,
                        Transpose::No,
                        patch,
                        c_out,
                        hw,
                        val(*kernels),
                        g,
                        0.0,
                        &mut dcols,
                    );
                    let di = slot(grads, *input, len_of(*input));
                    col2im_dense(&dcols, *geom, di);
                }
            }
            Op::MaskedConv2d(s) => {
                let MaskedConvSaved {
                    input,
                    kernels,
                    bias,
                    c_out,
                    patch,
                    cols,
                    grid,
                    k,
                    c_in,
                } = s.as_ref();
                let (c_out, patch) = (*c_out, *patch);
                let p = grid.len();
                if needs(*kernels) {
                    let dk = slot(grads, *kernels, c_out * patch);
                    gemm(Transpose::Yes, Transpose::No, c_out, p, patch, g, cols, 1.0, dk);
                }
                if needs(*bias) {
                    let db = slot(grads, *bias, c_out);
                    for row in g.chunks(c_out.max(1)) {
                        add_into(db, row);
                    }
                }
                if needs(*input) {
                    let mut dcols = vec![0.0; p * patch];
                    gemm(
                        Transpose::No,
                        Transpose::No,
                        p,
                        c_out,
                        patch,
                        g,
                        val(*kernels),
                        0.0,
                        &mut dcols,
                    );
                    let di = slot(grads, *input, p * c_in);
                    col2im_cells(&dcols, grid, *c_in, *k, di);
                }
            }
            Op::LogSoftmaxPick {
                logits,
                targets,
                classes,
                probs,
            } => {
                let classes = *classes;
                let dz = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dz[r * classes + c] += g[r] * (onehot - probs[r * classes + c]);
                    }
                }
            }
            Op::BceWithLogits { z, targets } => {
                let x = val(*z);
                let n = x.len() as f64;
                let dz = slot(grads, *z, x.len());
                for i in 0..x.len() {
                    dz[i] += g[0] * (sigmoid_scalar(x[i]) - targets[i]) / n;
                }
            }
        }
        Ok(())
    }
}

/// `patch × (h·w)` column buffer for a zero-padded dense convolution.
fn im2col_dense(input: &[f64], geom: ConvGeom) -> Vec<f64> {
    let ConvGeom { c_in, h, w, k } = geom;
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c_in * k * k * hw];
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + x] = input[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_dense(dcols: &[f64], geom: ConvGeom, dinput: &mut [f64]) {
    let ConvGeom { c_in, h, w, k } = geom;
    let r = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &dcols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dinput[(ci * h + sy as usize) * w + sx as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
}

/// `cells × patch` column buffer; patch index is `(ci·k + ky)·k + kx`.
fn im2col_cells(input: &[f64], grid: &ActiveCells, c_in: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let patch = c_in * k * k;
    let kk = k * k;
    let mut cols = vec![0.0; grid.len() * patch];
    for (p, &(y, x)) in grid.cells().iter().enumerate() {
        let dst = &mut cols[p * patch..(p + 1) * patch];
        for ky in 0..k {
            for kx in 0..k {
                let Some(q) = grid.neighbor(y, x, ky as isize - r, kx as isize - r) else {
                    continue;
                };
                let src = &input[q * c_in..(q + 1) * c_in];
                let off = ky * k + kx;
                for ci in 0..c_in {
                    dst[ci * kk + off] = src[ci];
                }
            }
        }
    }
    cols
}

fn col2im_cells(dcols: &[f64], grid: &ActiveCells, c_in: usize, k: usize, dinput: &mut [f64]) {
    let r = (k / 2) as isize;
    let patch = c_in * k * k;
    let kk = k * k;
    for (p, &(y, x)) in grid.cells().iter().enumerate() {
        let src = &dcols[p * patch..(p + 1) * patch];
        for ky in 0..k {
            for kx in 0..k {
                let Some(q) = grid.neighbor(y, x, ky as isize - r, kx as isize - r) else {
                    continue;
                };
                let dst = &mut dinput[q * c_in..(q + 1) * c_in];
                let off = ky * k + kx;
                for ci in 0..c_in {
                    dst[ci] += src[ci * kk + off];
                }
            }
        }
    }
}
