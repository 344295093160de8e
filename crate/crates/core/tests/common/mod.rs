//! Reference implementations used as independent oracles by the
//! integration suites. Each is the slowest obvious formulation.

#![allow(dead_code)]

pub mod checks;
pub mod gradients;

use m2d::data::{generate_synthetic, SyntheticSpec};
use m2d::eval::MomentPrediction;
use m2d::temporal_map::CandidateId;
use m2d::tensor::Tensor;

/// Per-channel max of rows `x..=y`, scanning every row.
pub fn naive_segment_max(a: &Tensor, x: usize, y: usize) -> Vec<f64> {
    let d = a.shape()[1];
    let mut out = vec![f64::NEG_INFINITY; d];
    for r in x..=y {
        for c in 0..d {
            let v = a.data()[r * d + c];
            if v > out[c] {
                out[c] = v;
            }
        }
    }
    out
}

/// Dense `N × N × d` map: cell `(x, y)` is the max over clips `x..=y` when
/// `keep(x, y)`, zero otherwise. Cubic in `N`.
pub fn naive_map(clips: &Tensor, keep: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    let n = clips.shape()[0];
    let d = clips.shape()[1];
    let mut out = vec![0.0; n * n * d];
    for x in 0..n {
        for y in 0..n {
            if x > y || !keep(x, y) {
                continue;
            }
            for c in 0..d {
                let mut m = f64::NEG_INFINITY;
                for t in x..=y {
                    m = m.max(clips.data()[t * d + c]);
                }
                out[(x * n + y) * d + c] = m;
            }
        }
    }
    out
}

/// Sparse-sampling rule restated: full triangle up to side 16, otherwise
/// lengths ≤ 8 always, ≤ 16 on even starts, ≤ 32 on multiples of 4, longer
/// on multiples of 8.
pub fn naive_keep(n: usize, x: usize, y: usize) -> bool {
    if n <= 16 {
        return true;
    }
    let len = y - x + 1;
    let stride = if len <= 8 {
        1
    } else if len <= 16 {
        2
    } else if len <= 32 {
        4
    } else {
        8
    };
    x % stride == 0
}

/// Dense zero-padded cross-correlation with explicit loops.
///
/// `input[C×H×W]`, `kernels[C'×C×k×k]`, `bias[C']`.
pub fn naive_conv2d(input: &Tensor, kernels: &Tensor, bias: &[f64]) -> Vec<f64> {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, k) = (kernels.shape()[0], kernels.shape()[2]);
    let r = (k / 2) as isize;
    let x = input.data();
    let kd = kernels.data();
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for a in 0..k {
                        for b in 0..k {
                            let ii = i as isize + a as isize - r;
                            let jj = j as isize + b as isize - r;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            let v = x[(ci * h + ii as usize) * w + jj as usize];
                            acc += kd[((co * c_in + ci) * k + a) * k + b] * v;
                        }
                    }
                }
                out[(co * h + i) * w + j] = acc;
            }
        }
    }
    out
}

/// tIoU of integer intervals `[a0, a1)` and `[b0, b1)`, as an exact ratio.
pub fn int_tiou(a: (i64, i64), b: (i64, i64)) -> (i64, i64) {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    (inter, union)
}

/// NMS by characterization: the kept set is the one subset `S` of the
/// ranked list such that `p ∈ S` exactly when no higher-ranked member of `S`
/// overlaps it at tIoU ≥ threshold. Found by enumerating all subsets.
pub fn brute_force_nms(ranked: &[MomentPrediction], threshold: f64) -> Vec<usize> {
    let n = ranked.len();
    assert!(n <= 16);
    let overlaps = |i: usize, j: usize| {
        let (a, b) = (ranked[i].interval, ranked[j].interval);
        let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
        let union = a.1.max(b.1) - a.0.min(b.0);
        inter / union >= threshold
    };
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|p| {
            let blocked = (0..p).any(|q| member(q) && overlaps(q, p));
            member(p) == !blocked
        });
        if consistent {
            found.push((0..n).filter(|&i| member(i)).collect::<Vec<_>>());
        }
    }
    assert_eq!(found.len(), 1, "characterization must have exactly one solution");
    found.pop().unwrap()
}

pub fn prediction(start: f64, end: f64, score: f64) -> MomentPrediction {
    MomentPrediction {
        interval: (start, end),
        score,
        source: CandidateId::new(0, 0, 0),
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` averaged.
pub fn naive_bce(p: &[f64], y: &[f64]) -> f64 {
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    s / p.len() as f64
}

/// A small corpus for tests that train.
pub fn small_spec(n_videos: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_videos,
        ..SyntheticSpec::default()
    }
}

pub fn small_corpus(n_videos: usize) -> m2d::data::Corpus {
    generate_synthetic(&small_spec(n_videos)).unwrap().corpus
}
