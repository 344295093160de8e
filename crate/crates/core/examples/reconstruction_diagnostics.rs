//! Does reconstruction loss prefer candidates near the planted moment?
//!
//! cargo run --release --example reconstruction_diagnostics -- [steps] [key=value ...]

use m2d::captioner::{reconstruct, results};
use m2d::config::Config;
use m2d::data::{generate_synthetic, split_records, SyntheticSpec};
use m2d::eval::tiou;
use m2d::pipeline::{feature_bank, train};
use m2d::temporal_map::to_seconds;
use m2d::tensor::Tape;

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn main() -> m2d::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(100, |s| s.parse().unwrap());
    let overrides: Vec<String> = args.collect();
    let config = Config { steps, ..Config::desk() }.with_overrides(&overrides)?;
    let synth = generate_synthetic(&SyntheticSpec::default())?;
    let corpus = &synth.corpus;
    let bank = feature_bank(corpus);
    let (train_recs, test_recs) = split_records(&corpus.records, config.test_fraction);
    let views: Vec<_> = train_recs.iter().map(|r| r.training_view()).collect();
    let model = train(&config, &corpus.vocab, &views, &bank, |_, _, _| Ok(()))?;

    let scale_cfg = config.scale_config();
    let (mut corr_nll, mut corr_score, mut best_nll_iou, mut best_score_iou) = (0.0, 0.0, 0.0, 0.0);
    for r in test_recs {
        let clips = &bank[&r.video_id];
        let q = model.query(corpus.vocab.encode(&r.query_tokens)?)?;
        let gt = r.gt_interval.unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, clips, &q)?;
        let feats = fwd.caption_source(config.caption_features, 0);
        let out = reconstruct(&mut tape, &model.params, &model.caption, &model.embedding, feats, &q)?;
        let nll: Vec<f64> = results(&tape, &out).iter().map(|x| x.nll).collect();
        let scores = tape.value(fwd.scores[0].scores).to_vec();
        let ious: Vec<f64> = fwd.layouts[0]
            .candidates()
            .map(|id| tiou(to_seconds(id, &scale_cfg, clips.shape()[0]).unwrap(), gt).unwrap())
            .collect();
        corr_nll += spearman(&nll, &ious.iter().map(|v| -v).collect::<Vec<_>>());
        corr_score += spearman(&scores, &ious);
        let argmin = (0..nll.len()).min_by(|&a, &b| nll[a].total_cmp(&nll[b])).unwrap();
        let argmax = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        best_nll_iou += ious[argmin];
        best_score_iou += ious[argmax];
    }
    let (mut superset, mut inside, mut len_ratio) = (0.0, 0.0, 0.0);
    for r in test_recs {
        let q = model.query(corpus.vocab.encode(&r.query_tokens)?)?;
        let top = model.retrieve(&bank[&r.video_id], &q, 1)?;
        let (gs, ge) = r.gt_interval.unwrap();
        let (ps, pe) = top[0].interval;
        if ps <= gs && pe >= ge {
            superset += 1.0;
        }
        if ps >= gs && pe <= ge {
            inside += 1.0;
        }
        len_ratio += (pe - ps) / (ge - gs);
    }
    let n = test_recs.len() as f64;
    println!(
        "top-1: superset of gt {:.2}, inside gt {:.2}, mean length ratio {:.2}",
        superset / n,
        inside / n,
        len_ratio / n
    );
    println!("spearman(nll, -iou) = {:.3}", corr_nll / n);
    println!("spearman(score, iou) = {:.3}", corr_score / n);
    println!("mean iou of lowest-nll candidate = {:.3}", best_nll_iou / n);
    println!("mean iou of top-score candidate = {:.3}", best_score_iou / n);
    Ok(())
}
