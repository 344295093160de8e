//! Side-by-side runs of configuration variants on one corpus, reported as
//! recall tables over IoU ∈ {0.3, 0.5} × R@{1, 5}.

use std::fmt::Write as _;

use crate::config::Config;
use crate::data::{split_records, Corpus};
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::pipeline::{evaluate_model, feature_bank, train};

/// Which parameter the variants sweep; decides the table's leading columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Scales,
    LossWeight,
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub config: Config,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub result: EvalResult,
    pub seconds: f64,
}

/// `64-24-4` style label.
pub fn scale_label(scales: &[usize]) -> String {
    scales.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// One variant per scale list, everything else (seed included) from `base`.
pub fn scale_variants(base: &Config, scale_sets: &[Vec<usize>]) -> Vec<Variant> {
    scale_sets
        .iter()
        .map(|s| Variant {
            label: scale_label(s),
            config: Config {
                scales: s.clone(),
                ..base.clone()
            },
        })
        .collect()
}

pub fn lambda_variants(base: &Config, lambdas: &[f64]) -> Vec<Variant> {
    lambdas
        .iter()
        .map(|&l| Variant {
            label: format!("λ={l:.1}"),
            config: Config {
                lambda: l,
                ..base.clone()
            },
        })
        .collect()
}

/// Trains and evaluates every variant on the corpus's train/test split.
///
/// `progress` receives each row as it completes.
pub fn run_variants<F>(variants: &[Variant], corpus: &Corpus, mut progress: F) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationRow),
{
    if variants.is_empty() {
        return Err(Error::Usage("no ablation variants".into()));
    }
    let bank = feature_bank(corpus);
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let (train_recs, test_recs) = split_records(&corpus.records, v.config.test_fraction);
        let views: Vec<_> = train_recs.iter().map(|r| r.training_view()).collect();
        let t0 = std::time::Instant::now();
        let model = train(&v.config, &corpus.vocab, &views, &bank, |_, _, _| Ok(()))?;
        let (result, _) = evaluate_model(&model, &corpus.vocab, test_recs, &bank)?;
        let row = AblationRow {
            variant: v.clone(),
            result,
            seconds: t0.elapsed().as_secs_f64(),
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

const CELLS: [(usize, f64); 4] = [(1, 0.3), (5, 0.3), (1, 0.5), (5, 0.5)];

fn percent(r: &EvalResult, n: usize, m: f64) -> String {
    r.get(n, m).map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Text table with one row per variant.
pub fn table(rows: &[AblationRow], sweep: Sweep) -> String {
    let mut s = String::new();
    let lead = match sweep {
        Sweep::Scales => format!("{:<12}{:<13}", "T-Scale", "Multi-scale"),
        Sweep::LossWeight => format!("{:<13}", "Loss weight"),
    };
    let pad = " ".repeat(lead.chars().count());
    let _ = writeln!(s, "{pad}{:<20}{:<20}", "IoU0.3", "IoU0.5");
    let _ = writeln!(s, "{lead}{:<10}{:<10}{:<10}{:<10}", "R@1", "R@5", "R@1", "R@5");
    for row in rows {
        match sweep {
            Sweep::Scales => {
                let multi = if row.variant.config.scales.len() > 1 { "yes" } else { "no" };
                let _ = write!(s, "{:<12}{:<13}", row.variant.label, multi);
            }
            Sweep::LossWeight => {
                let _ = write!(s, "{:<13}", row.variant.label);
            }
        }
        for (n, m) in CELLS {
            let _ = write!(s, "{:<10}", percent(&row.result, n, m));
        }
        s.push('\n');
    }
    s
}

/// Tab-separated form of [`table`].
pub fn tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tscales\tlambda\tr1_iou0.3\tr5_iou0.3\tr1_iou0.5\tr5_iou0.5\tqueries\n");
    for row in rows {
        let c = &row.variant.config;
        let _ = write!(s, "{}\t{}\t{}", row.variant.label, scale_label(&c.scales), c.lambda);
        for (n, m) in CELLS {
            let _ = write!(s, "\t{}", row.result.get(n, m).map_or(f64::NAN, |v| v));
        }
        let _ = writeln!(s, "\t{}", row.result.queries);
    }
    s
}
