//! Training without boundary labels.
//!
//! Each step scores every candidate, captions the top-K of every scale, turns
//! the normalized reconstruction losses into soft targets, and fits the
//! scores to those targets while also fitting the captioner.

use std::cmp::Ordering;

use crate::captioner::{batch_reconstruction_loss, reconstruct};
use crate::encoders::Query;
use crate::error::{Error, Result};
use crate::fusion::ScoreMap;
use crate::model::{Forward, Model};
use crate::temporal_map::CandidateId;
use crate::tensor::{Adam, Tape, Tensor, Var};

/// Normalized losses and targets of the selected candidates of one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub l_norm: Vec<f64>,
    pub y: Vec<f64>,
    pub l_min: f64,
    pub l_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub rec: f64,
    pub rg_bce: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    /// `step\tL_rec\tL_rg_bce\ttotal`
    pub fn log_line(&self, step: usize) -> String {
        format!("{step}\t{:.9}\t{:.9}\t{:.9}", self.rec, self.rg_bce, self.total)
    }
}

fn candidate_order(a: (CandidateId, f64), b: (CandidateId, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then(a.0.start.cmp(&b.0.start))
        .then(a.0.duration().cmp(&b.0.duration()))
}

/// Indices into `candidates` of the `k` best, in selection order.
///
/// Higher score first, then smaller start, then shorter duration.
pub fn top_k_positions(candidates: &[CandidateId], scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len().min(scores.len())).collect();
    idx.sort_by(|&i, &j| candidate_order((candidates[i], scores[i]), (candidates[j], scores[j])));
    idx.truncate(k);
    idx
}

/// The selected candidates of one scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Rows of the scale's cell-major tensors.
    pub positions: Vec<usize>,
    pub candidates: Vec<CandidateId>,
}

/// Top-`k` candidates of every scale.
pub fn select_top_k(tape: &Tape<'_>, maps: &[ScoreMap], scale_ids: &[usize], k: usize) -> Vec<Selection> {
    maps.iter()
        .zip(scale_ids)
        .map(|(map, &j)| {
            let ids: Vec<CandidateId> = map
                .cells
                .cells()
                .iter()
                .map(|&(x, y)| CandidateId::new(j, x, y))
                .collect();
            let positions = top_k_positions(&ids, tape.value(map.scores), k);
            let candidates = positions.iter().map(|&p| ids[p]).collect();
            Selection {
                positions,
                candidates,
            }
        })
        .collect()
}

/// Piecewise targets from the reconstruction losses of one scale.
pub fn pseudo_labels(nlls: &[f64], l_min: f64, l_max: f64) -> Result<PseudoLabelSet> {
    if nlls.is_empty() {
        return Err(Error::Usage("pseudo labels need at least one candidate".into()));
    }
    if !(0.0 <= l_min && l_min < l_max && l_max <= 1.0) {
        return Err(Error::Config(format!(
            "need 0 <= l_min < l_max <= 1, got {l_min}, {l_max}"
        )));
    }
    if let Some(bad) = nlls.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::NumericGuard {
            op: "pseudo_labels",
            detail: format!("negative or non-finite loss {bad}"),
        });
    }
    let total: f64 = nlls.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "every reconstruction loss is zero; pseudo labels are undefined".into(),
        ));
    }
    let l_norm: Vec<f64> = nlls.iter().map(|v| v / total).collect();
    let y = l_norm
        .iter()
        .map(|&l| {
            if l >= l_max {
                0.0
            } else if l >= l_min {
                1.0 - l
            } else {
                1.0
            }
        })
        .collect();
    Ok(PseudoLabelSet {
        l_norm,
        y,
        l_min,
        l_max,
    })
}

/// Mean binary cross-entropy of probabilities against targets.
pub fn rg_bce(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::dim("rg_bce", &[scores.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::NumericGuard {
                op: "rg_bce",
                detail: format!("score {p} outside (0,1)"),
            });
        }
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::NumericGuard {
                op: "rg_bce",
                detail: format!("label {y} outside [0,1]"),
            });
        }
        total += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(-total / scores.len() as f64)
}

/// One video/query pair as seen by training: no boundary annotation.
#[derive(Debug, Clone, Copy)]
pub struct TrainingExample<'a> {
    pub clips: &'a Tensor,
    pub query: &'a Query,
}

/// Everything one sample contributes to a step.
#[derive(Debug, Clone)]
pub struct SampleObjective {
    pub forward: Forward,
    pub selections: Vec<Selection>,
    pub labels: Vec<PseudoLabelSet>,
    /// `[Σ selected]` reconstruction losses on the tape.
    pub nll: Var,
    pub rec: Var,
    pub rg_bce: Var,
    pub total: Var,
}

/// Builds the training objective of one sample on `tape`.
///
/// With `labels_override`, those targets replace the ones derived from the
/// reconstruction losses.
pub fn sample_objective<'p>(
    model: &'p Model,
    tape: &mut Tape<'p>,
    example: TrainingExample<'p>,
    lambda: f64,
    labels_override: Option<&[Vec<f64>]>,
) -> Result<SampleObjective> {
    let cfg = &model.config;
    let forward = model.forward(tape, example.clips, example.query)?;
    let scale_ids: Vec<usize> = (0..forward.scores.len()).collect();
    let selections = select_top_k(tape, &forward.scores, &scale_ids, cfg.top_k);

    let mut feats = Vec::with_capacity(selections.len());
    let mut logits = Vec::with_capacity(selections.len());
    for (j, sel) in selections.iter().enumerate() {
        let source = forward.caption_source(cfg.caption_features, j);
        feats.push(tape.gather_rows(source, &sel.positions)?);
        logits.push(tape.gather(forward.scores[j].logits, &sel.positions)?);
    }
    let feats = tape.concat_rows(&feats)?;
    let out = reconstruct(tape, &model.params, &model.caption, &model.embedding, feats, example.query)?;

    let detached = tape.value(out.nll).to_vec();
    let mut labels = Vec::with_capacity(selections.len());
    let mut at = 0;
    for sel in &selections {
        let n = sel.positions.len();
        labels.push(pseudo_labels(&detached[at..at + n], cfg.l_min, cfg.l_max)?);
        at += n;
    }
    let targets: Vec<f64> = match labels_override {
        Some(o) => o.iter().flatten().copied().collect(),
        None => labels.iter().flat_map(|l| l.y.iter().copied()).collect(),
    };

    let flat_logits = concat_vectors(tape, &logits)?;
    let rg = tape.bce_with_logits(flat_logits, &targets)?;
    let rec = batch_reconstruction_loss(tape, out.nll)?;
    let weighted = tape.scale(rec, lambda)?;
    let total = tape.add(rg, weighted)?;
    Ok(SampleObjective {
        forward,
        selections,
        labels,
        nll: out.nll,
        rec,
        rg_bce: rg,
        total,
    })
}

fn concat_vectors(tape: &mut Tape<'_>, parts: &[Var]) -> Result<Var> {
    let cols: Vec<Var> = parts
        .iter()
        .map(|&v| {
            let n = tape.value(v).len();
            tape.reshape(v, &[n, 1])
        })
        .collect::<Result<_>>()?;
    let joined = tape.concat_rows(&cols)?;
    let n = tape.value(joined).len();
    tape.reshape(joined, &[n])
}

/// Batch-mean losses with parameter gradients accumulated into `model`.
pub fn accumulate_batch(model: &mut Model, batch: &[TrainingExample<'_>], lambda: f64) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut report = LossReport {
        rec: 0.0,
        rg_bce: 0.0,
        total: 0.0,
        lambda,
    };
    for ex in batch {
        let grads = {
            let mut tape = Tape::new();
            let obj = sample_objective(model, &mut tape, *ex, lambda, None)?;
            report.rec += tape.scalar(obj.rec) * scale;
            report.rg_bce += tape.scalar(obj.rg_bce) * scale;
            report.total += tape.scalar(obj.total) * scale;
            tape.backward(obj.total)?
        };
        grads.accumulate_into(&mut model.params, scale)?;
    }
    Ok(report)
}

/// One optimizer step over `batch`.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[TrainingExample<'_>],
    lambda: f64,
) -> Result<LossReport> {
    model.params.zero_grads();
    let report = accumulate_batch(model, batch, lambda)?;
    for t in model.params.tensors_mut() {
        if t.grad().is_none() {
            let zeros = vec![0.0; t.len()];
            t.accumulate_grad(&zeros)?;
        }
    }
    adam.step(&mut model.params)?;
    Ok(report)
}
