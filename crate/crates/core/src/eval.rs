//! Temporal IoU, greedy NMS, and Recall@n at IoU=m.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::temporal_map::CandidateId;

pub type Interval = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct MomentPrediction {
    pub interval: Interval,
    pub score: f64,
    pub source: CandidateId,
}

impl MomentPrediction {
    pub fn start(&self) -> f64 {
        self.interval.0
    }

    pub fn end(&self) -> f64 {
        self.interval.1
    }
}

fn check_interval(i: Interval) -> Result<()> {
    if !(i.0.is_finite() && i.1.is_finite() && i.0 < i.1) {
        return Err(Error::Usage(format!("degenerate interval [{}, {}]", i.0, i.1)));
    }
    Ok(())
}

/// Intersection over union of two intervals on the real line.
pub fn tiou(a: Interval, b: Interval) -> Result<f64> {
    check_interval(a)?;
    check_interval(b)?;
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    Ok(inter / union)
}

fn tiou_unchecked(a: Interval, b: Interval) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / (a.1.max(b.1) - a.0.min(b.0))
}

/// Ranking order: score descending, then earlier start, then shorter.
pub fn rank_order(a: &MomentPrediction, b: &MomentPrediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start().total_cmp(&b.start()))
        .then((a.end() - a.start()).total_cmp(&(b.end() - b.start())))
}

pub fn sort_predictions(preds: &mut [MomentPrediction]) {
    preds.sort_by(rank_order);
}

/// Greedy suppression over predictions already in rank order.
///
/// Keeps the best remaining prediction and discards every later one whose
/// tIoU with it is at least `threshold`.
pub fn nms(predictions: &[MomentPrediction], threshold: f64) -> Result<Vec<MomentPrediction>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("NMS threshold {threshold} must lie in (0,1)")));
    }
    for p in predictions {
        check_interval(p.interval)?;
    }
    let mut suppressed = vec![false; predictions.len()];
    let mut kept = Vec::new();
    for i in 0..predictions.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(predictions[i].clone());
        for j in i + 1..predictions.len() {
            if !suppressed[j]
                && tiou_unchecked(predictions[i].interval, predictions[j].interval) >= threshold
            {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Recall grid over `ns × ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub ns: Vec<usize>,
    pub ms: Vec<f64>,
    /// `hits[a][b]` for `ns[a]`, `ms[b]`.
    pub hits: Vec<Vec<usize>>,
    pub queries: usize,
}

pub const REPORT_NS: [usize; 2] = [1, 5];
pub const REPORT_MS: [f64; 3] = [0.3, 0.5, 0.7];

/// Whether any of the top `n` predictions reaches tIoU `m`.
fn is_hit(preds: &[MomentPrediction], gt: Interval, n: usize, m: f64) -> bool {
    preds.iter().take(n).any(|p| tiou_unchecked(p.interval, gt) >= m)
}

/// Recall@n at IoU=m over a set of queries.
///
/// `predictions[q]` must be rank-ordered. A query without predictions is a
/// miss.
pub fn recall_at(
    predictions: &[Vec<MomentPrediction>],
    ground_truth: &[Interval],
    n: usize,
    m: f64,
) -> Result<f64> {
    let r = evaluate(predictions, ground_truth, &[n], &[m])?;
    Ok(r.recall(0, 0))
}

pub fn evaluate(
    predictions: &[Vec<MomentPrediction>],
    ground_truth: &[Interval],
    ns: &[usize],
    ms: &[f64],
) -> Result<EvalResult> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::dim("evaluate", &[predictions.len()], &[ground_truth.len()]));
    }
    for &gt in ground_truth {
        check_interval(gt)?;
    }
    let mut hits = vec![vec![0; ms.len()]; ns.len()];
    for (preds, &gt) in predictions.iter().zip(ground_truth) {
        for (a, &n) in ns.iter().enumerate() {
            for (b, &m) in ms.iter().enumerate() {
                if is_hit(preds, gt, n, m) {
                    hits[a][b] += 1;
                }
            }
        }
    }
    Ok(EvalResult {
        ns: ns.to_vec(),
        ms: ms.to_vec(),
        hits,
        queries: ground_truth.len(),
    })
}

impl EvalResult {
    pub fn recall(&self, a: usize, b: usize) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.hits[a][b] as f64 / self.queries as f64
        }
    }

    /// Recall for a specific `(n, m)` pair, if it is part of the grid.
    pub fn get(&self, n: usize, m: f64) -> Option<f64> {
        let a = self.ns.iter().position(|&x| x == n)?;
        let b = self.ms.iter().position(|&x| x == m)?;
        Some(self.recall(a, b))
    }

    /// Human-readable table, one row per `n`.
    pub fn table(&self) -> String {
        let mut s = String::from("      ");
        for m in &self.ms {
            let _ = write!(s, "  IoU={m:<4}");
        }
        s.push('\n');
        for (a, n) in self.ns.iter().enumerate() {
            let _ = write!(s, "R@{n:<4}");
            for b in 0..self.ms.len() {
                let _ = write!(s, "  {:>8.2}", 100.0 * self.recall(a, b));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "({} queries)", self.queries);
        s
    }

    /// Tab-separated `n, m, recall, hits, queries` rows with a header.
    pub fn tsv(&self) -> String {
        let mut s = String::from("n\tiou\trecall\thits\tqueries\n");
        for (a, n) in self.ns.iter().enumerate() {
            for (b, m) in self.ms.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{n}\t{m}\t{:.6}\t{}\t{}",
                    self.recall(a, b),
                    self.hits[a][b],
                    self.queries
                );
            }
        }
        s
    }
}
