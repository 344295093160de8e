//! Train on the default synthetic corpus and report test-split recall.
//!
//! cargo run --release --example train_synthetic -- [steps] [key=value ...]

use std::time::Instant;

use m2d::config::Config;
use m2d::data::{generate_synthetic, split_records, SyntheticSpec};
use m2d::pipeline::{evaluate_model, feature_bank, random_baseline, train};

fn main() -> m2d::Result<()> {
    let mut config = Config::desk();
    let mut overrides: Vec<String> = std::env::args().skip(1).collect();
    if overrides.first().is_some_and(|a| !a.contains('=')) {
        config.steps = overrides.remove(0).parse().expect("steps must be an integer");
    }
    config = config.with_overrides(&overrides)?;

    let synth = generate_synthetic(&SyntheticSpec::default())?;
    let corpus = &synth.corpus;
    let bank = feature_bank(corpus);
    let (train_recs, test_recs) = split_records(&corpus.records, config.test_fraction);
    let views: Vec<_> = train_recs.iter().map(|r| r.training_view()).collect();

    let t0 = Instant::now();
    let model = train(&config, &corpus.vocab, &views, &bank, |step, r, _| {
        if step % 25 == 0 || step + 1 == config.steps {
            println!("{}\t{:.1}s", r.log_line(step), t0.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    println!("trained {} steps in {:.1}s", config.steps, t0.elapsed().as_secs_f64());

    let (result, _) = evaluate_model(&model, &corpus.vocab, test_recs, &bank)?;
    print!("{}", result.table());
    let base = random_baseline(&model, &corpus.vocab, test_recs, &bank, 100, 1)?;
    println!("random R@1 IoU=0.5: {:.2}", 100.0 * base[0][1]);
    Ok(())
}
