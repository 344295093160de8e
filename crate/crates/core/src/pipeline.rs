//! End-to-end training and evaluation over a loaded corpus.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{make_batches, training_items, AnnotationRecord, Corpus, TrainingRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, nms, sort_predictions, EvalResult, MomentPrediction, REPORT_MS, REPORT_NS};
use crate::model::Model;
use crate::supervision::{train_step, LossReport, TrainingExample};
use crate::tensor::{Adam, Tensor};

/// Clip features of every video, keyed by id.
pub type FeatureBank = BTreeMap<String, Tensor>;

pub fn feature_bank(corpus: &Corpus) -> FeatureBank {
    corpus
        .features
        .iter()
        .map(|(id, f)| (id.clone(), f.to_tensor()))
        .collect()
}

fn clips_for<'a>(bank: &'a FeatureBank, video_id: &str) -> Result<&'a Tensor> {
    bank.get(video_id)
        .ok_or_else(|| Error::Usage(format!("no features for video {video_id:?}")))
}

/// Checks that the corpus matches the model's input expectations.
pub fn check_corpus(config: &Config, bank: &FeatureBank) -> Result<()> {
    for (id, t) in bank {
        if t.shape()[1] != config.feature_dim {
            return Err(Error::Config(format!(
                "video {id:?} has feature dim {}, config expects {}",
                t.shape()[1],
                config.feature_dim
            )));
        }
    }
    Ok(())
}

/// Trains a fresh model on `records`, calling `on_step` after every step.
///
/// Only the training view of each annotation is accepted here.
pub fn train<F>(
    config: &Config,
    vocab: &Vocabulary,
    records: &[TrainingRecord],
    bank: &FeatureBank,
    mut on_step: F,
) -> Result<Model>
where
    F: FnMut(usize, &LossReport, &Model) -> Result<()>,
{
    check_corpus(config, bank)?;
    if records.is_empty() {
        return Err(Error::Usage("no training records".into()));
    }
    let items = training_items(records, vocab, config.max_query_len)?;
    let mut model = Model::new(config, vocab.len())?;
    let mut adam = Adam::new(&model.params, config.adam());
    let mut epoch = 0u64;
    let mut queue = Vec::new();
    for step in 0..config.steps {
        if queue.is_empty() {
            queue = make_batches(items.len(), config.batch_size, config.seed.wrapping_add(epoch))?;
            queue.reverse();
            epoch += 1;
        }
        let batch_idx = queue.pop().expect("refilled above");
        let batch: Vec<TrainingExample<'_>> = batch_idx
            .iter()
            .map(|&i| {
                Ok(TrainingExample {
                    clips: clips_for(bank, &items[i].record.video_id)?,
                    query: &items[i].query,
                })
            })
            .collect::<Result<_>>()?;
        let report = train_step(&mut model, &mut adam, &batch, config.lambda)?;
        on_step(step, &report, &model)?;
    }
    Ok(model)
}

/// Ranked, NMS-filtered predictions for every record.
pub fn predict_all(
    model: &Model,
    vocab: &Vocabulary,
    records: &[AnnotationRecord],
    bank: &FeatureBank,
    top_n: usize,
) -> Result<Vec<Vec<MomentPrediction>>> {
    records
        .iter()
        .map(|r| {
            let query = model.query(vocab.encode(&r.query_tokens)?)?;
            model.retrieve(clips_for(bank, &r.video_id)?, &query, top_n)
        })
        .collect()
}

fn ground_truth(records: &[AnnotationRecord]) -> Result<Vec<(f64, f64)>> {
    records
        .iter()
        .map(|r| {
            r.gt_interval.ok_or_else(|| {
                Error::Usage(format!("record for {:?} has no gt_interval to evaluate", r.video_id))
            })
        })
        .collect()
}

/// The standard recall grid over `records`.
pub fn evaluate_model(
    model: &Model,
    vocab: &Vocabulary,
    records: &[AnnotationRecord],
    bank: &FeatureBank,
) -> Result<(EvalResult, Vec<Vec<MomentPrediction>>)> {
    let gts = ground_truth(records)?;
    let preds = predict_all(model, vocab, records, bank, 5)?;
    Ok((evaluate(&preds, &gts, &REPORT_NS, &REPORT_MS)?, preds))
}

/// Recall grid when every query's candidate scores are randomly permuted,
/// averaged over `trials` shuffles.
pub fn random_baseline(
    model: &Model,
    vocab: &Vocabulary,
    records: &[AnnotationRecord],
    bank: &FeatureBank,
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let gts = ground_truth(records)?;
    let ranked: Vec<Vec<MomentPrediction>> = records
        .iter()
        .map(|r| {
            let query = model.query(vocab.encode(&r.query_tokens)?)?;
            model.rank_candidates(clips_for(bank, &r.video_id)?, &query)
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![vec![0.0; REPORT_MS.len()]; REPORT_NS.len()];
    for _ in 0..trials {
        let mut preds = Vec::with_capacity(ranked.len());
        for cands in &ranked {
            let mut scores: Vec<f64> = cands.iter().map(|p| p.score).collect();
            scores.shuffle(&mut rng);
            let mut shuffled: Vec<MomentPrediction> = cands
                .iter()
                .zip(scores)
                .map(|(p, s)| MomentPrediction { score: s, ..p.clone() })
                .collect();
            sort_predictions(&mut shuffled);
            let mut kept = nms(&shuffled, model.config.nms_threshold)?;
            kept.truncate(5);
            preds.push(kept);
        }
        let r = evaluate(&preds, &gts, &REPORT_NS, &REPORT_MS)?;
        for (a, row) in sum.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v += r.recall(a, b);
            }
        }
    }
    let t = trials.max(1) as f64;
    Ok(sum
        .into_iter()
        .map(|row| row.into_iter().map(|v| v / t).collect())
        .collect())
}
