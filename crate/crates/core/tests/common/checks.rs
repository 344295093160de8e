//! Criterion checks shared by the acceptance runner and the focused suites.
//! Each returns a short detail string on success and the first mismatch on
//! failure.

use m2d::config::Config;
use m2d::eval::{evaluate, nms, sort_predictions, MomentPrediction, REPORT_MS, REPORT_NS};
use m2d::fusion::FusedMap;
use m2d::gradcheck::random_tensor;
use m2d::model::Model;
use m2d::supervision::pseudo_labels;
use m2d::temporal_map::{build_map, multi_scale_sample, ScaleConfig, ScaleLayout};
use m2d::tensor::{ops, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{brute_force_nms, naive_conv2d, naive_keep, naive_map, naive_segment_max, prediction};

pub type Check = Result<String, String>;

pub fn map_oracle() -> Check {
    let d = 3;
    let mut cells = 0usize;
    for n in 1..=32usize {
        let clips = random_tensor(&[n, d], n as u64);
        let cfg = ScaleConfig::new(vec![n], 4, 4.0).map_err(|e| e.to_string())?;
        let grid = multi_scale_sample(&clips, &cfg, d).map_err(|e| e.to_string())?;
        if grid.features[0] != clips {
            return Err(format!("N={n}: single-scale sampling altered the clips"));
        }
        let map = build_map(&grid, 0).map_err(|e| e.to_string())?;
        let expect = naive_map(&clips, |x, y| naive_keep(n, x, y));
        if map.features.data() != expect.as_slice() {
            return Err(format!("N={n}: map features differ from the naive construction"));
        }
        for x in 0..n {
            for y in 0..n {
                let want = x <= y && naive_keep(n, x, y);
                if map.is_valid(x, y) != want {
                    return Err(format!("N={n}: validity of ({x},{y}) is {}", !want));
                }
            }
        }
        cells += map.candidates.len();
    }
    let mut segments = 0usize;
    for n in 1..=32usize {
        let a = random_tensor(&[n, 4], 1000 + n as u64);
        for x in 0..n {
            for y in x..n {
                let got = ops::segment_max(&a, x, y).map_err(|e| e.to_string())?;
                if got.data() != naive_segment_max(&a, x, y).as_slice() {
                    return Err(format!("segment_max N={n} ({x},{y}) differs"));
                }
                segments += 1;
            }
        }
    }
    Ok(format!("N=1..32: {cells} map cells, {segments} segments identical"))
}

/// Hand-derived cases: `(nlls, expected labels)` with `l_min=0.1, l_max=0.7`.
pub fn pseudo_label_cases() -> Vec<(Vec<f64>, Vec<f64>)> {
    vec![
        // l = 0.05, 0.3, 0.65: one per branch.
        (vec![0.5, 3.0, 6.5], vec![1.0, 0.7, 0.35]),
        // l = 0.8, 0.15, 0.05.
        (vec![8.0, 1.5, 0.5], vec![0.0, 0.85, 1.0]),
        // l = 0.1 exactly on the lower boundary falls in the middle branch.
        (vec![1.0; 10], vec![0.9; 10]),
        // l = 0.7 exactly on the upper boundary is zero.
        (vec![7.0, 3.0], vec![0.0, 0.7]),
        // l just below 0.1 and just below 0.7.
        (vec![0.0999, 0.6999, 0.2002], vec![1.0, 1.0 - 0.6999, 1.0 - 0.2002]),
        // One candidate takes the whole mass.
        (vec![2.5], vec![0.0]),
        // A zero loss among positive ones is below l_min.
        (vec![0.0, 4.0, 6.0], vec![1.0, 0.6, 0.4]),
    ]
}

pub fn pseudo_label_suite() -> Check {
    for (nlls, want) in pseudo_label_cases() {
        let set = pseudo_labels(&nlls, 0.1, 0.7).map_err(|e| e.to_string())?;
        for (k, (&got, &w)) in set.y.iter().zip(&want).enumerate() {
            if (got - w).abs() > 1e-12 {
                return Err(format!("nlls {nlls:?}: y[{k}] = {got}, expected {w}"));
            }
        }
        let sum: f64 = set.l_norm.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("nlls {nlls:?}: l_norm sums to {sum}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let k = rng.random_range(1..=20);
        let nlls: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..50.0)).collect();
        let set = pseudo_labels(&nlls, 0.1, 0.7).map_err(|e| e.to_string())?;
        let sum: f64 = set.l_norm.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("random nlls {nlls:?}: l_norm sums to {sum}"));
        }
    }
    Ok(format!("{} hand cases + 200 random normalizations", pseudo_label_cases().len()))
}

fn random_ranked(rng: &mut ChaCha8Rng) -> Vec<MomentPrediction> {
    let n = rng.random_range(0..=12);
    let mut preds: Vec<MomentPrediction> = (0..n)
        .map(|_| {
            let s = rng.random_range(0..10);
            let len = rng.random_range(1..=6);
            let score = rng.random_range(0..6) as f64 / 5.0;
            prediction(s as f64, (s + len) as f64, score)
        })
        .collect();
    sort_predictions(&mut preds);
    preds
}

/// The 5-query fixture: predictions, ground truth, and the recall grid
/// derived by hand for `n ∈ {1, 5}` × `m ∈ {0.3, 0.5, 0.7}`.
pub fn recall_fixture() -> (Vec<Vec<MomentPrediction>>, Vec<(f64, f64)>, [[f64; 3]; 2]) {
    let preds = vec![
        // tIoU 1.
        vec![prediction(0.0, 10.0, 0.9)],
        // tIoU 0 then exactly 0.5.
        vec![prediction(20.0, 30.0, 0.9), prediction(0.0, 5.0, 0.8)],
        // tIoU 0.8.
        vec![prediction(12.0, 20.0, 0.7)],
        // tIoU 1/3 then 0.4.
        vec![prediction(5.0, 15.0, 0.6), prediction(0.0, 4.0, 0.5)],
        // Five misses, then an exact hit at rank 6.
        (0..6)
            .map(|i| {
                if i < 5 {
                    prediction(20.0 + 2.0 * i as f64, 21.0 + 2.0 * i as f64, 0.9 - 0.1 * i as f64)
                } else {
                    prediction(0.0, 10.0, 0.1)
                }
            })
            .collect(),
    ];
    let gts = vec![(0.0, 10.0), (0.0, 10.0), (10.0, 20.0), (0.0, 10.0), (0.0, 10.0)];
    let want = [[3.0 / 5.0, 2.0 / 5.0, 2.0 / 5.0], [4.0 / 5.0, 3.0 / 5.0, 2.0 / 5.0]];
    (preds, gts, want)
}

pub fn nms_and_recall() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let thresholds = [0.5, 0.3, 0.7];
    for instance in 0..1000 {
        let ranked = random_ranked(&mut rng);
        let th = thresholds[instance % thresholds.len()];
        let got = nms(&ranked, th).map_err(|e| e.to_string())?;
        let want: Vec<MomentPrediction> = brute_force_nms(&ranked, th)
            .into_iter()
            .map(|i| ranked[i].clone())
            .collect();
        if got != want {
            return Err(format!("instance {instance} (threshold {th}): kept {got:?}, expected {want:?}"));
        }
    }
    let (preds, gts, want) = recall_fixture();
    let r = evaluate(&preds, &gts, &REPORT_NS, &REPORT_MS).map_err(|e| e.to_string())?;
    for (a, row) in want.iter().enumerate() {
        for (b, &w) in row.iter().enumerate() {
            if r.recall(a, b) != w {
                return Err(format!(
                    "R@{} IoU{}: {} != {w}",
                    REPORT_NS[a],
                    REPORT_MS[b],
                    r.recall(a, b)
                ));
            }
        }
    }
    Ok("1000 NMS instances match brute force; 5-query recall grid exact".into())
}

pub fn masking_config() -> Config {
    Config {
        feature_dim: 5,
        video_dim: 4,
        text_dim: 4,
        text_hidden: 3,
        text_layers: 2,
        embed_dim: 3,
        caption_hidden: 4,
        conv_layers: 3,
        kernel_size: 3,
        scales: vec![20, 8, 3],
        ..Config::desk()
    }
}

/// Invalid cells stay zero through fusion, every conv layer, and scoring,
/// and their pre-mask contents cannot reach any valid score.
pub fn masking_invariant() -> Check {
    let cfg = masking_config();
    let model = Model::new(&cfg, 7).map_err(|e| e.to_string())?;
    let mut checked = 0usize;
    for seed in 0..5u64 {
        let n_base = 14 + seed as usize * 3;
        let clips = random_tensor(&[n_base, cfg.feature_dim], seed);
        let q = model.query(vec![1, 3, 2]).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &clips, &q).map_err(|e| e.to_string())?;
        for (j, layout) in fwd.layouts.iter().enumerate() {
            let p = &model.params;
            let mut stages = vec![("fusion".to_string(), fwd.fused[j].clone())];
            let mut x = fwd.fused[j].clone();
            for (l, layer) in model.conv.layers.iter().enumerate() {
                let k = tape.param(p, layer.kernels);
                let b = tape.param(p, layer.bias);
                let y = tape.masked_conv2d(x.features, &x.cells, k, b).map_err(|e| e.to_string())?;
                let y = tape.relu(y).map_err(|e| e.to_string())?;
                x = FusedMap { cells: x.cells.clone(), features: y };
                stages.push((format!("conv layer {l}"), x.clone()));
            }
            if tape.value(x.features) != tape.value(fwd.conv[j].features) {
                return Err(format!("scale {j}: manual layer loop differs from the stack"));
            }
            for (name, stage) in &stages {
                let dense = stage.to_dense(&tape);
                let d = dense.shape()[2];
                if let Some(bad) = invalid_nonzero(layout, dense.data(), d) {
                    return Err(format!("scale {j} {name}: invalid cell {bad:?} is nonzero"));
                }
            }
            let grid = fwd.scores[j].grid(&tape);
            if let Some(bad) = invalid_nonzero(layout, &grid, 1) {
                return Err(format!("scale {j} scores: invalid cell {bad:?} is nonzero"));
            }

            let clean = fwd.fused[j].to_dense(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 10 + j as u64);
            let mut dirty = clean.data().to_vec();
            let n = layout.n_j;
            let d = clean.shape()[2];
            for x in 0..n {
                for y in 0..n {
                    if !layout.is_valid(x, y) {
                        for c in 0..d {
                            dirty[(x * n + y) * d + c] = rng.random_range(-100.0..100.0);
                        }
                    }
                }
            }
            let dirty = Tensor::new(clean.shape().to_vec(), dirty).map_err(|e| e.to_string())?;
            let a = scores_from_dense(&model, &clean, layout)?;
            let b = scores_from_dense(&model, &dirty, layout)?;
            if a != b {
                return Err(format!("scale {j}: garbage in invalid cells changed valid scores"));
            }
            if a.as_slice() != tape.value(fwd.scores[j].scores) {
                return Err(format!("scale {j}: dense entry point disagrees with forward"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} maps: zeros after fusion/conv/score, valid scores bit-identical"))
}

fn invalid_nonzero(layout: &ScaleLayout, dense: &[f64], d: usize) -> Option<(usize, usize)> {
    let n = layout.n_j;
    for x in 0..n {
        for y in 0..n {
            if !layout.is_valid(x, y) && dense[(x * n + y) * d..(x * n + y + 1) * d].iter().any(|&v| v != 0.0) {
                return Some((x, y));
            }
        }
    }
    None
}

fn scores_from_dense(model: &Model, dense: &Tensor, layout: &ScaleLayout) -> Result<Vec<f64>, String> {
    let mut tape = Tape::new();
    let v = tape.constant_ref(dense);
    dense_scores(&mut tape, model, v, layout).map_err(|e| e.to_string())
}

fn dense_scores<'p>(tape: &mut Tape<'p>, model: &'p Model, v: Var, layout: &ScaleLayout) -> m2d::Result<Vec<f64>> {
    let masked = FusedMap::from_dense(tape, v, &layout.cells)?;
    let c = model.conv.forward(tape, &model.params, &masked)?;
    let s = model.scorer.score(tape, &model.params, &c)?;
    Ok(tape.value(s.scores).to_vec())
}

/// `masked_conv2d` equals scatter → dense conv → gather, on random grids.
pub fn masked_conv_matches_dense() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let n = 3 + seed as usize % 14;
        let layout = ScaleLayout::new(0, n, n - seed as usize % 3).map_err(|e| e.to_string())?;
        let cells = &layout.cells;
        let (c_in, c_out, k) = (1 + seed as usize % 3, 1 + (seed as usize + 1) % 3, [3, 5][seed as usize % 2]);
        let x = random_tensor(&[cells.len(), c_in], seed);
        let kern = random_tensor(&[c_out, c_in, k, k], seed + 50);
        let bias = random_tensor(&[c_out], seed + 60);
        let mut dense = vec![0.0; c_in * n * n];
        for (i, &(r, c)) in cells.cells().iter().enumerate() {
            for ch in 0..c_in {
                dense[(ch * n + r) * n + c] = x.data()[i * c_in + ch];
            }
        }
        let dense = Tensor::new(vec![c_in, n, n], dense).map_err(|e| e.to_string())?;
        let reference = naive_conv2d(&dense, &kern, bias.data());
        let mut tape = Tape::new();
        let (vx, vk, vb) = (tape.constant_ref(&x), tape.constant_ref(&kern), tape.constant_ref(&bias));
        let out = tape.masked_conv2d(vx, cells, vk, vb).map_err(|e| e.to_string())?;
        let got = tape.value(out);
        for (i, &(r, c)) in cells.cells().iter().enumerate() {
            for co in 0..c_out {
                let e = (got[i * c_out + co] - reference[(co * n + r) * n + c]).abs();
                worst = worst.max(e);
            }
        }
        let full = ops::conv2d(&dense, &kern, &bias).map_err(|e| e.to_string())?;
        for (a, b) in full.data().iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst < 1e-12 {
        Ok(format!("20 grids, max abs deviation {worst:.1e}"))
    } else {
        Err(format!("max abs deviation {worst:e}"))
    }
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["m2d"];
    full.extend_from_slice(args);
    let code = m2d::cli::run(full, &mut out, &mut err);
    if code == 0 {
        Ok(String::from_utf8_lossy(&out).into_owned())
    } else {
        Err(format!("m2d {args:?} exited {code}: {}", String::from_utf8_lossy(&err)))
    }
}

fn read_bytes(p: &std::path::Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

/// Every file under `dir`, relative path to bytes.
fn tree(dir: &std::path::Path) -> Result<std::collections::BTreeMap<String, Vec<u8>>, String> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, read_bytes(&p)?);
            }
        }
    }
    Ok(out)
}

const TRAIN_SETTINGS: [&str; 8] = [
    "--set", "steps=6", "--set", "checkpoint_every=3", "--set", "batch_size=4", "--set", "conv_layers=2",
];

fn train_into(data: &std::path::Path, out: &std::path::Path) -> Result<(), String> {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "0"];
    args.extend_from_slice(&TRAIN_SETTINGS);
    run_cli(&args).map(|_| ())
}

/// Seeded runs repeat bit-for-bit; files round-trip byte-exactly; the
/// training path cannot see (and is not affected by) boundary annotations.
pub fn determinism_and_formats() -> Check {
    use m2d::data::{
        read_annotations, read_feature_file, write_annotations, write_feature_file, AnnotationRecord,
        FeatureFile, TrainingRecord, ANNOTATION_FILE,
    };
    use m2d::tensor::{read_checkpoint, write_checkpoint};

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let (d1, d2) = (root.join("data1"), root.join("data2"));
    for d in [&d1, &d2] {
        run_cli(&["gen-data", "--seed", "7", "--n-videos", "24", "--out", d.to_str().unwrap()])?;
    }
    if tree(&d1)? != tree(&d2)? {
        return Err("gen-data with one seed produced different directories".into());
    }

    let (r1, r2) = (root.join("run1"), root.join("run2"));
    train_into(&d1, &r1)?;
    train_into(&d1, &r2)?;
    let (t1, t2) = (tree(&r1)?, tree(&r2)?);
    if t1.len() < 4 {
        return Err(format!("expected log, config and two checkpoints, found {:?}", t1.keys()));
    }
    if t1 != t2 {
        return Err("two seeded train runs wrote different files".into());
    }

    // Corrupt every boundary annotation; the training log must not move.
    let ann = d2.join(ANNOTATION_FILE);
    let mut records = read_annotations(&ann).map_err(|e| e.to_string())?;
    for (i, r) in records.iter_mut().enumerate() {
        r.gt_interval = if i % 2 == 0 { None } else { Some((0.0, r.duration_s)) };
    }
    write_annotations(&ann, &records).map_err(|e| e.to_string())?;
    let r3 = root.join("run3");
    train_into(&d2, &r3)?;
    if tree(&r3)? != t1 {
        return Err("changing gt_interval changed training output".into());
    }
    let view = records[1].training_view();
    let TrainingRecord {
        video_id,
        duration_s,
        query_tokens,
    } = view;
    let original: &AnnotationRecord = &records[1];
    if video_id != original.video_id || duration_s != original.duration_s || query_tokens != original.query_tokens {
        return Err("training view does not carry the record's inputs".into());
    }

    // Round trips.
    let ckpt = r1.join(m2d::cli::CHECKPOINT_FILE);
    let bytes = read_bytes(&ckpt)?;
    let params = read_checkpoint(bytes.as_slice()).map_err(|e| e.to_string())?;
    let mut again = Vec::new();
    write_checkpoint(&mut again, &params).map_err(|e| e.to_string())?;
    if again != bytes {
        return Err("checkpoint does not round-trip byte-exactly".into());
    }
    let feat = m2d::data::feature_path(&d1, "vid00003");
    let f = read_feature_file(&feat).map_err(|e| e.to_string())?;
    let copy = root.join("copy.m2df");
    write_feature_file(&copy, &f).map_err(|e| e.to_string())?;
    if read_bytes(&copy)? != read_bytes(&feat)? {
        return Err("feature file does not round-trip byte-exactly".into());
    }
    let odd = FeatureFile::new("odd", 2, 3, vec![f32::MIN_POSITIVE, -0.0, 1.5e-42, 3.25, f32::MAX, -7.0])
        .map_err(|e| e.to_string())?;
    if FeatureFile::from_bytes(&odd.to_bytes(), "odd").map_err(|e| e.to_string())?.to_bytes() != odd.to_bytes() {
        return Err("subnormal/negative-zero features do not round-trip".into());
    }
    let ann_copy = root.join("copy.jsonl");
    let parsed = read_annotations(&ann).map_err(|e| e.to_string())?;
    write_annotations(&ann_copy, &parsed).map_err(|e| e.to_string())?;
    if read_bytes(&ann_copy)? != read_bytes(&ann)? {
        return Err("annotation file does not round-trip byte-exactly".into());
    }
    Ok(format!(
        "gen-data and train repeat bit-for-bit ({} output files); gt-blind; checkpoint/feature/annotation round-trip",
        t1.len()
    ))
}
