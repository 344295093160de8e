//! Generates a seeded synthetic corpus, writes it to a directory and reads
//! it back.
//!
//! cargo run --release --example synthetic_corpus -- [out_dir]

use m2d::data::{corpus_summary, generate_synthetic, read_corpus, write_corpus, SyntheticSpec};

fn main() -> m2d::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "synthetic_corpus".into());
    let spec = SyntheticSpec {
        n_videos: 20,
        ..SyntheticSpec::default()
    };
    let synth = generate_synthetic(&spec)?;
    for (e, phrase) in synth.phrases.iter().enumerate() {
        println!("event {e}: \"{}\"", phrase.join(" "));
    }
    for (r, p) in synth.corpus.records.iter().zip(&synth.planted).take(5) {
        let (s, e) = r.gt_interval.expect("synthetic records carry ground truth");
        println!("{}  type {}  clips {:?}  {s:.1}s..{e:.1}s", r.video_id, p.event_type, p.clips);
    }

    let dir = std::path::Path::new(&dir);
    write_corpus(dir, &synth.corpus)?;
    let back = read_corpus(dir)?;
    assert_eq!(back.records, synth.corpus.records);
    println!("\nwrote {}\n{}", dir.display(), corpus_summary(&back));
    Ok(())
}
