//! Seeded finite-difference cases for every differentiable operation.

use std::sync::Arc;

use m2d::captioner::{reconstruct, CaptionParams};
use m2d::encoders::{EmbeddingTable, Query};
use m2d::fusion::{fuse, FusionParams};
use m2d::gradcheck::{check_inputs, check_params, random_tensor, GradCheck, DEFAULT_STEP};
use m2d::temporal_map::ScaleLayout;
use m2d::tensor::nn::lstm_cell;
use m2d::tensor::{ActiveCells, ParamSet, SeededInit, Tape, Tensor, Var};
use m2d::Result;

pub const CASES: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;

/// `Σ w ⊙ v` with fixed random weights, so every output element matters.
fn weighted_sum(tape: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(tape.shape(v), seed ^ 0x5eed);
    let w = tape.constant(w);
    let p = tape.hadamard(v, w)?;
    tape.sum(p)
}

fn dims(seed: u64, lo: usize, hi: usize) -> usize {
    lo + (seed as usize * 7 + 3) % (hi - lo + 1)
}

type Case = fn(u64) -> Result<GradCheck>;

fn matmul(seed: u64) -> Result<GradCheck> {
    let (m, k, n) = (dims(seed, 1, 4), dims(seed + 1, 1, 5), dims(seed + 2, 1, 3));
    let a = random_tensor(&[m, k], seed);
    let b = random_tensor(&[k, n], seed + 100);
    check_inputs(&[a, b], DEFAULT_STEP, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
}

fn conv2d(seed: u64) -> Result<GradCheck> {
    let k = if seed % 2 == 0 { 3 } else { 5 };
    let (c_in, c_out, h, w) = (dims(seed, 1, 3), dims(seed + 1, 1, 3), dims(seed, 3, 6), dims(seed + 2, 3, 6));
    let x = random_tensor(&[c_in, h, w], seed);
    let kern = random_tensor(&[c_out, c_in, k, k], seed + 1);
    let bias = random_tensor(&[c_out], seed + 2);
    check_inputs(&[x, kern, bias], DEFAULT_STEP, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2])?;
        weighted_sum(t, y, seed)
    })
}

fn masked_conv2d(seed: u64) -> Result<GradCheck> {
    let n = dims(seed, 3, 7);
    let layout = ScaleLayout::new(0, n, n)?;
    let grid: Arc<ActiveCells> = Arc::clone(&layout.cells);
    let k = if seed % 2 == 0 { 3 } else { 5 };
    let (c_in, c_out) = (dims(seed, 1, 3), dims(seed + 1, 1, 3));
    let x = random_tensor(&[grid.len(), c_in], seed);
    let kern = random_tensor(&[c_out, c_in, k, k], seed + 1);
    let bias = random_tensor(&[c_out], seed + 2);
    check_inputs(&[x, kern, bias], DEFAULT_STEP, |t, v| {
        let y = t.masked_conv2d(v[0], &grid, v[1], v[2])?;
        weighted_sum(t, y, seed)
    })
}

fn lstm(seed: u64) -> Result<GradCheck> {
    let (b, d_in, d_h) = (dims(seed, 1, 3), dims(seed + 1, 1, 4), dims(seed + 2, 1, 4));
    let inputs = [
        random_tensor(&[b, d_in], seed),
        random_tensor(&[b, d_h], seed + 1),
        random_tensor(&[b, d_h], seed + 2),
        random_tensor(&[d_in, 4 * d_h], seed + 3),
        random_tensor(&[d_h, 4 * d_h], seed + 4),
        random_tensor(&[4 * d_h], seed + 5),
    ];
    check_inputs(&inputs, DEFAULT_STEP, |t, v| {
        let (h, c) = lstm_cell(t, v[0], v[1], v[2], v[3], v[4], v[5])?;
        let a = weighted_sum(t, h, seed)?;
        let b = weighted_sum(t, c, seed + 9)?;
        t.add(a, b)
    })
}

fn unary(seed: u64, f: fn(&mut Tape<'_>, Var) -> Result<Var>) -> Result<GradCheck> {
    let x = random_tensor(&[dims(seed, 1, 4), dims(seed + 1, 1, 5)], seed);
    check_inputs(&[x], DEFAULT_STEP, |t, v| {
        let y = f(t, v[0])?;
        weighted_sum(t, y, seed)
    })
}

fn binary_same(seed: u64, f: fn(&mut Tape<'_>, Var, Var) -> Result<Var>) -> Result<GradCheck> {
    let shape = [dims(seed, 1, 4), dims(seed + 1, 1, 5)];
    let a = random_tensor(&shape, seed);
    let b = random_tensor(&shape, seed + 1);
    check_inputs(&[a, b], DEFAULT_STEP, |t, v| {
        let y = f(t, v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
}

fn row_op(seed: u64, f: fn(&mut Tape<'_>, Var, Var) -> Result<Var>) -> Result<GradCheck> {
    let (m, n) = (dims(seed, 1, 4), dims(seed + 1, 1, 5));
    let a = random_tensor(&[m, n], seed);
    let r = random_tensor(&[n], seed + 1);
    check_inputs(&[a, r], DEFAULT_STEP, |t, v| {
        let y = f(t, v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
}

fn segment_max(seed: u64) -> Result<GradCheck> {
    let n = dims(seed, 2, 8);
    let x = random_tensor(&[n, 3], seed);
    let segs: Vec<_> = (0..n)
        .map(|i| {
            let hi = (i + seed as usize % 3).min(n - 1);
            (i % 3 != 2).then_some((i, hi))
        })
        .collect();
    check_inputs(&[x], DEFAULT_STEP, move |t, v| {
        let y = t.segment_max(v[0], &segs)?;
        weighted_sum(t, y, seed)
    })
}

fn log_softmax_pick(seed: u64) -> Result<GradCheck> {
    let (m, c) = (dims(seed, 1, 4), dims(seed + 1, 2, 6));
    let x = random_tensor(&[m, c], seed).data().iter().map(|v| 3.0 * v).collect();
    let x = Tensor::new(vec![m, c], x)?;
    let targets: Vec<usize> = (0..m).map(|r| (r + seed as usize) % c).collect();
    check_inputs(&[x], DEFAULT_STEP, move |t, v| {
        let y = t.log_softmax_pick(v[0], &targets)?;
        weighted_sum(t, y, seed)
    })
}

fn bce_with_logits(seed: u64) -> Result<GradCheck> {
    let n = dims(seed, 1, 10);
    let z = random_tensor(&[n], seed).data().iter().map(|v| 4.0 * v).collect();
    let z = Tensor::vector(z)?;
    let y: Vec<f64> = random_tensor(&[n], seed + 1).data().iter().map(|v| (v + 1.0) / 2.0).collect();
    check_inputs(&[z], DEFAULT_STEP, move |t, v| t.bce_with_logits(v[0], &y))
}

fn reshaping(seed: u64) -> Result<GradCheck> {
    let (m, n) = (dims(seed, 2, 4), dims(seed + 1, 2, 5));
    let a = random_tensor(&[m, n], seed);
    let b = random_tensor(&[m, 2], seed + 1);
    check_inputs(&[a, b], DEFAULT_STEP, |t, v| {
        let c = t.concat_cols(&[v[0], v[1]])?;
        let s = t.slice_cols(c, 1, n)?;
        let r = t.slice_rows(s, 1, 1)?;
        let rep = t.repeat_rows(r, 2)?;
        let g = t.gather_rows(s, &[0, m - 1, 0])?;
        let flat = t.gather(s, &[1, 0, n + 1])?;
        let flat = t.reshape(flat, &[1, 3])?;
        let wide = t.concat_cols(&[flat, flat])?;
        let wide = t.slice_cols(wide, 0, n.min(6))?;
        let stacked = t.concat_rows(&[g, rep, s])?;
        let extra = weighted_sum(t, wide, seed + 5)?;
        let col = t.sum_rows(stacked)?;
        let mean = t.mean(stacked)?;
        let a = weighted_sum(t, col, seed)?;
        let a = t.add(a, extra)?;
        t.add(a, mean)
    })
}

fn fusion(seed: u64) -> Result<GradCheck> {
    let (d_t, d_v) = (dims(seed, 2, 5), dims(seed + 1, 2, 5));
    let n = dims(seed, 2, 5);
    let layout = ScaleLayout::new(0, n, n)?;
    let mut params = ParamSet::new();
    let mut init = SeededInit::new(seed);
    let f = FusionParams::register(&mut params, &mut init, d_t, d_v)?;
    let cells = params.insert("cells", random_tensor(&[layout.cells.len(), d_v], seed + 1))?;
    let sentence = params.insert("sentence", random_tensor(&[d_t], seed + 2))?;
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    check_params(&params, &ids, DEFAULT_STEP, |t, p| {
        let c = t.param(p, cells);
        let s = t.param(p, sentence);
        let fused = fuse(t, p, &f, &layout, c, s)?;
        weighted_sum(t, fused.features, seed)
    })
}

fn caption_nll(seed: u64) -> Result<GradCheck> {
    let vocab = dims(seed, 3, 6);
    let (d_e, hidden, d_v, batch) = (dims(seed, 2, 3), dims(seed + 1, 2, 3), dims(seed + 2, 2, 4), dims(seed, 1, 3));
    let mut params = ParamSet::new();
    let mut init = SeededInit::new(seed);
    let table = EmbeddingTable::register(&mut params, &mut init, vocab, d_e)?;
    let cap = CaptionParams::register(&mut params, &mut init, d_e, hidden, d_v, vocab)?;
    let feats = params.insert("features", random_tensor(&[batch, d_v], seed + 3))?;
    let len = dims(seed + 3, 1, 4);
    let tokens: Vec<usize> = (0..len).map(|i| 1 + (i * 5 + seed as usize) % (vocab - 1)).collect();
    let query = Query::new(tokens, vocab, 8)?;
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    check_params(&params, &ids, DEFAULT_STEP, |t, p| {
        let f = t.param(p, feats);
        let out = reconstruct(t, p, &cap, &table, f, &query)?;
        weighted_sum(t, out.nll, seed)
    })
}

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", matmul as Case),
        ("conv2d", conv2d),
        ("masked_conv2d", masked_conv2d),
        ("lstm_cell", lstm),
        ("add", |s| binary_same(s, |t, a, b| t.add(a, b))),
        ("hadamard", |s| binary_same(s, |t, a, b| t.hadamard(a, b))),
        ("scale", |s| unary(s, |t, a| t.scale(a, -1.7))),
        ("sigmoid", |s| unary(s, |t, a| t.sigmoid(a))),
        ("tanh", |s| unary(s, |t, a| t.tanh(a))),
        ("relu", |s| unary(s, |t, a| t.relu(a))),
        ("l2_normalize_rows", |s| unary(s, |t, a| t.l2_normalize(a, 1))),
        ("l2_normalize_cols", |s| unary(s, |t, a| t.l2_normalize(a, 0))),
        ("mul_row", |s| row_op(s, |t, a, r| t.mul_row(a, r))),
        ("add_row_bias", |s| row_op(s, |t, a, r| t.add_row_bias(a, r))),
        ("segment_max", segment_max),
        ("log_softmax_pick", log_softmax_pick),
        ("bce_with_logits", bce_with_logits),
        ("concat_slice_gather_sum", reshaping),
        ("fusion", fusion),
        ("caption_nll", caption_nll),
    ]
}

/// Worst relative error of one operation over all seeded cases.
pub fn worst_case(case: Case) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        worst = worst.max(case(seed * 31 + 1)?.max_relative_error());
    }
    Ok(worst)
}
