//! Query reconstruction from candidate features.
//!
//! A two-layer LSTM decoder with teacher forcing. The first layer reads the
//! query's own embeddings (shifted right behind a begin-of-sequence token);
//! its state is concatenated with the candidate feature, projected, and fed
//! to the second layer, whose output head predicts the next word. The first
//! layer does not depend on the candidate, so it runs once per query and is
//! shared across every candidate in a batch.

use crate::encoders::{EmbeddingTable, Query};
use crate::error::{Error, Result};
use crate::tensor::nn::{Linear, LstmParams};
use crate::tensor::{ParamSet, SeededInit, Tape, Tensor, Var};

/// Vocabulary index reserved for the decoder's first input.
pub const BOS_TOKEN: usize = 0;

#[derive(Debug, Clone, Copy)]
pub struct CaptionParams {
    pub lstm1: LstmParams,
    pub fuse: Linear,
    pub lstm2: LstmParams,
    pub head: Linear,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl CaptionParams {
    pub fn register(
        params: &mut ParamSet,
        init: &mut SeededInit,
        d_e: usize,
        hidden: usize,
        d_v: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        Ok(CaptionParams {
            lstm1: LstmParams::register(params, init, "caption.lstm1", d_e, hidden)?,
            fuse: Linear::register(params, init, "caption.fuse", hidden + d_v, hidden, true)?,
            lstm2: LstmParams::register(params, init, "caption.lstm2", hidden, hidden)?,
            head: Linear::register(params, init, "caption.head", hidden, vocab_size, true)?,
            hidden,
            vocab_size,
        })
    }
}

/// Tape handles for one batch of reconstructions.
#[derive(Debug, Clone, Copy)]
pub struct CaptionOutput {
    /// `[L × B]`: log-probability of word `l` for candidate `b`.
    pub word_log_probs: Var,
    /// `[B]`: mean negative log-likelihood per candidate.
    pub nll: Var,
}

/// Plain-value reconstruction of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub nll: f64,
    pub word_log_probs: Vec<f64>,
}

/// Scores the query against every row of `features[B × d^v]`.
pub fn reconstruct<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    caption: &CaptionParams,
    table: &EmbeddingTable,
    features: Var,
    query: &Query,
) -> Result<CaptionOutput> {
    if query.is_empty() {
        return Err(Error::Usage("cannot reconstruct an empty query".into()));
    }
    let d_v = caption.fuse.d_in - caption.hidden;
    let batch = match tape.shape(features) {
        [b, d] if *d == d_v && *b > 0 => *b,
        s => return Err(Error::dim("caption_nll", s, &[1, d_v])),
    };
    let words = query.tokens();
    let len = words.len();
    let mut inputs = Vec::with_capacity(len);
    inputs.push(BOS_TOKEN);
    inputs.extend_from_slice(&words[..len - 1]);
    let emb = table.lookup(tape, params, &inputs)?;

    let hd = caption.hidden;
    let mut h1 = tape.constant(Tensor::zeros(&[1, hd]));
    let mut c1 = tape.constant(Tensor::zeros(&[1, hd]));
    let mut h2 = tape.constant(Tensor::zeros(&[batch, hd]));
    let mut c2 = tape.constant(Tensor::zeros(&[batch, hd]));
    let mut steps = Vec::with_capacity(len);
    for (l, &target) in words.iter().enumerate() {
        let x = tape.slice_rows(emb, l, 1)?;
        (h1, c1) = caption.lstm1.cell(tape, params, x, h1, c1)?;
        let shared = tape.repeat_rows(h1, batch)?;
        let joined = tape.concat_cols(&[shared, features])?;
        let u = caption.fuse.forward(tape, params, joined)?;
        (h2, c2) = caption.lstm2.cell(tape, params, u, h2, c2)?;
        let logits = caption.head.forward(tape, params, h2)?;
        let lp = tape.log_softmax_pick(logits, &vec![target; batch])?;
        steps.push(tape.reshape(lp, &[1, batch])?);
    }
    let word_log_probs = tape.concat_rows(&steps)?;
    let total = tape.sum_rows(word_log_probs)?;
    let nll = tape.scale(total, -1.0 / len as f64)?;
    Ok(CaptionOutput {
        word_log_probs,
        nll,
    })
}

/// Reconstruction of a single candidate feature `[d^v]`.
pub fn caption_nll(
    candidate_feature: &Tensor,
    query: &Query,
    table: &EmbeddingTable,
    params: &ParamSet,
    caption: &CaptionParams,
) -> Result<ReconstructionResult> {
    let mut tape = Tape::new();
    let d = candidate_feature.len();
    let f = tape.constant(candidate_feature.clone().reshape(vec![1, d])?);
    let out = reconstruct(&mut tape, params, caption, table, f, query)?;
    Ok(ReconstructionResult {
        nll: tape.value(out.nll)[0],
        word_log_probs: tape.value(out.word_log_probs).to_vec(),
    })
}

/// Extracts per-candidate results from a batch output.
pub fn results(tape: &Tape<'_>, out: &CaptionOutput) -> Vec<ReconstructionResult> {
    let nll = tape.value(out.nll);
    let lp = tape.value(out.word_log_probs);
    let batch = nll.len();
    (0..batch)
        .map(|b| ReconstructionResult {
            nll: nll[b],
            word_log_probs: lp.iter().skip(b).step_by(batch).copied().collect(),
        })
        .collect()
}

/// Mean of per-candidate NLLs over the whole selection.
pub fn batch_reconstruction_loss(tape: &mut Tape<'_>, nll: Var) -> Result<Var> {
    if tape.value(nll).is_empty() {
        return Err(Error::Usage("reconstruction loss over an empty selection".into()));
    }
    tape.mean(nll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn build(vocab: usize, d_e: usize, hidden: usize, d_v: usize, seed: u64) -> (ParamSet, EmbeddingTable, CaptionParams) {
        let mut params = ParamSet::new();
        let mut init = SeededInit::new(seed);
        let table = EmbeddingTable::register(&mut params, &mut init, vocab, d_e).unwrap();
        let cap = CaptionParams::register(&mut params, &mut init, d_e, hidden, d_v, vocab).unwrap();
        (params, table, cap)
    }

    #[test]
    fn single_class_vocabulary_is_certain() {
        let (params, table, cap) = build(1, 3, 4, 2, 1);
        let q = Query::new(vec![0, 0, 0], 1, 8).unwrap();
        let r = caption_nll(&random_tensor(&[2], 3), &q, &table, &params, &cap).unwrap();
        assert_eq!(r.nll, 0.0);
        assert!(r.word_log_probs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_is_uniform() {
        let (mut params, table, cap) = build(7, 3, 4, 2, 2);
        let w = vec![0.0; params.get(cap.head.weight).len()];
        params.get_mut(cap.head.weight).assign(&w).unwrap();
        params.get_mut(cap.head.bias.unwrap()).assign(&[0.0; 7]).unwrap();
        let q = Query::new(vec![3, 1, 6, 2], 7, 8).unwrap();
        let r = caption_nll(&random_tensor(&[2], 5), &q, &table, &params, &cap).unwrap();
        assert!((r.nll - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_is_mean_negative_log_prob() {
        let (params, table, cap) = build(6, 3, 4, 5, 4);
        let q = Query::new(vec![1, 2, 5], 6, 8).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(random_tensor(&[3, 5], 2));
        let out = reconstruct(&mut tape, &params, &cap, &table, f, &q).unwrap();
        for r in results(&tape, &out) {
            assert_eq!(r.word_log_probs.len(), 3);
            assert!(r.word_log_probs.iter().all(|&lp| lp <= 0.0));
            let want = -r.word_log_probs.iter().sum::<f64>() / 3.0;
            assert!((r.nll - want).abs() < 1e-12);
            assert!(r.nll >= 0.0);
        }
    }

    #[test]
    fn batched_rows_match_single_runs() {
        let (params, table, cap) = build(6, 3, 4, 5, 4);
        let q = Query::new(vec![4, 2], 6, 8).unwrap();
        let feats = random_tensor(&[3, 5], 2);
        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let out = reconstruct(&mut tape, &params, &cap, &table, f, &q).unwrap();
        let batched = results(&tape, &out);
        for b in 0..3 {
            let one = Tensor::vector(feats.row(b).to_vec()).unwrap();
            let r = caption_nll(&one, &q, &table, &params, &cap).unwrap();
            assert!((r.nll - batched[b].nll).abs() < 1e-12);
        }
    }

    #[test]
    fn distinct_candidates_reconstruct_differently() {
        let (params, table, cap) = build(6, 3, 4, 5, 9);
        let q = Query::new(vec![1, 3], 6, 8).unwrap();
        let a = caption_nll(&random_tensor(&[5], 1), &q, &table, &params, &cap).unwrap();
        let b = caption_nll(&random_tensor(&[5], 2), &q, &table, &params, &cap).unwrap();
        assert_ne!(a.nll, b.nll);
    }

    #[test]
    fn loss_is_mean_over_selection() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::vector(vec![2.5]).unwrap());
        let l = batch_reconstruction_loss(&mut tape, one).unwrap();
        assert_eq!(tape.scalar(l), 2.5);
        let two = tape.constant(Tensor::vector(vec![2.0, 4.0]).unwrap());
        let l = batch_reconstruction_loss(&mut tape, two).unwrap();
        assert_eq!(tape.scalar(l), 3.0);
        let thirty = tape.constant(Tensor::vector((0..30).map(f64::from).collect()).unwrap());
        let l = batch_reconstruction_loss(&mut tape, thirty).unwrap();
        assert_eq!(tape.scalar(l), 14.5);
        let empty = tape.constant(Tensor::zeros(&[0]));
        assert!(matches!(batch_reconstruction_loss(&mut tape, empty), Err(Error::Usage(_))));
    }
}
