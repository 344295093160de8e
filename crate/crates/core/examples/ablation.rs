//! Scale and loss-weight ablations on the synthetic corpus.
//!
//! cargo run --release --example ablation -- [scales|lambda|both] [steps]

use m2d::ablation::{lambda_variants, run_variants, scale_variants, table, tsv, Sweep};
use m2d::config::Config;
use m2d::data::{generate_synthetic, SyntheticSpec};

fn main() -> m2d::Result<()> {
    let mut args = std::env::args().skip(1);
    let which = args.next().unwrap_or_else(|| "both".into());
    let mut base = Config::desk();
    if let Some(s) = args.next() {
        base.steps = s.parse().expect("steps must be an integer");
    }
    let synth = generate_synthetic(&SyntheticSpec::default())?;
    let progress = |r: &m2d::ablation::AblationRow| eprintln!("{} done in {:.0}s", r.variant.label, r.seconds);

    if which == "scales" || which == "both" {
        let sets = [vec![16], vec![16, 8], vec![16, 4], vec![16, 8, 4]];
        let rows = run_variants(&scale_variants(&base, &sets), &synth.corpus, progress)?;
        println!("{}", table(&rows, Sweep::Scales));
        print!("{}", tsv(&rows));
    }
    if which == "lambda" || which == "both" {
        let rows = run_variants(&lambda_variants(&base, &[0.1, 0.5, 1.0, 2.0]), &synth.corpus, progress)?;
        println!("{}", table(&rows, Sweep::LossWeight));
        print!("{}", tsv(&rows));
    }
    Ok(())
}
