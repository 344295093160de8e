//! Builds the multi-scale 2D maps of one synthetic video and prints which
//! cells are candidates, next to the planted moment.
//!
//! cargo run --release --example temporal_maps -- [scales, e.g. 16,8,4]

use m2d::data::{generate_synthetic, SyntheticSpec};
use m2d::temporal_map::{build_map, multi_scale_sample, to_seconds, ScaleConfig};

fn main() -> m2d::Result<()> {
    let scales: Vec<usize> = std::env::args()
        .nth(1)
        .map_or_else(|| vec![16, 8, 4], |s| s.split(',').map(|x| x.trim().parse().expect("scale")).collect());
    let spec = SyntheticSpec {
        n_videos: 1,
        ..SyntheticSpec::default()
    };
    let synth = generate_synthetic(&spec)?;
    let config = ScaleConfig::new(scales, spec.frames_per_clip, spec.fps)?;
    let clips = synth.corpus.features["vid00000"].to_tensor();
    let grid = multi_scale_sample(&clips, &config, spec.feature_dim)?;
    let planted = synth.planted[0].clips;
    println!("planted clips {}..={} of {}", planted.0, planted.1, spec.clips_per_video);

    // Projection of each cell on the planted prototype.
    let proto = &synth.prototypes[synth.planted[0].event_type];
    for j in 0..config.num_scales() {
        let map = build_map(&grid, j)?;
        println!("\nscale {j}: {0}x{0}, {1} candidates", map.n, map.candidates.len());
        for x in 0..map.n {
            let row: String = (0..map.n)
                .map(|y| {
                    if !map.is_valid(x, y) {
                        "    .".to_string()
                    } else {
                        let dot: f64 = map.cell(x, y).iter().zip(proto).map(|(a, b)| a * b).sum();
                        format!("{dot:>5.1}")
                    }
                })
                .collect();
            println!("{row}");
        }
        let widest = map.candidates.iter().max_by_key(|c| c.duration()).expect("non-empty map");
        let (s, e) = to_seconds(*widest, &config, spec.clips_per_video)?;
        println!("longest candidate {widest:?} spans {s:.1}s..{e:.1}s");
    }
    Ok(())
}
