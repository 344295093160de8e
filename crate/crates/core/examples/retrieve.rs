//! Trains briefly, then retrieves moments for held-out queries: NMS top-5
//! per query, the scale-0 score map of the first query, and predictions in
//! the tab-separated output format.
//!
//! cargo run --release --example retrieve -- [steps] [key=value ...]

use m2d::config::Config;
use m2d::data::{generate_synthetic, split_records, write_predictions, SyntheticSpec};
use m2d::eval::tiou;
use m2d::pipeline::{feature_bank, train};

fn main() -> m2d::Result<()> {
    let mut config = Config::desk();
    config.steps = 150;
    let mut overrides: Vec<String> = std::env::args().skip(1).collect();
    if overrides.first().is_some_and(|a| !a.contains('=')) {
        config.steps = overrides.remove(0).parse().expect("steps must be an integer");
    }
    let config = config.with_overrides(&overrides)?;

    let synth = generate_synthetic(&SyntheticSpec::default())?;
    let corpus = &synth.corpus;
    let bank = feature_bank(corpus);
    let (train_recs, test_recs) = split_records(&corpus.records, config.test_fraction);
    let views: Vec<_> = train_recs.iter().map(|r| r.training_view()).collect();
    let model = train(&config, &corpus.vocab, &views, &bank, |_, _, _| Ok(()))?;

    let mut rows = Vec::new();
    for (q, r) in test_recs.iter().enumerate().take(4) {
        let gt = r.gt_interval.expect("synthetic ground truth");
        let query = model.query(corpus.vocab.encode(&r.query_tokens)?)?;
        let preds = model.retrieve(&bank[&r.video_id], &query, 5)?;
        println!("\"{}\" in {}  gt {:.1}..{:.1}", r.query_tokens.join(" "), r.video_id, gt.0, gt.1);
        for p in &preds {
            let iou = tiou(p.interval, gt)?;
            println!("  {:>5.1}..{:<5.1} score {:.3}  tIoU {iou:.2}", p.start(), p.end(), p.score);
            rows.push((q, p.start(), p.end(), p.score));
        }
    }

    let first = &test_recs[0];
    let query = model.query(corpus.vocab.encode(&first.query_tokens)?)?;
    let grid = model.score_grid(&bank[&first.video_id], &query, 0)?;
    println!("\nscale-0 scores for the first query (rows start, columns end)");
    for row in &grid {
        let line: String = row
            .iter()
            .map(|c| c.map_or_else(|| "   . ".to_string(), |s| format!("{s:>5.2}")))
            .collect();
        println!("{line}");
    }

    println!("\nquery_id\tstart_s\tend_s\tscore");
    write_predictions(std::io::stdout(), &rows).expect("stdout");
    Ok(())
}
