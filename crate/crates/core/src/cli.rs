//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::data::{
    corpus_summary, generate_synthetic, read_corpus, read_feature_file, feature_path, split_records,
    write_corpus, write_predictions, Corpus, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::{evaluate_model, feature_bank, train};
use crate::tensor::{read_checkpoint, write_checkpoint};

pub const SEED_ENV: &str = "M2D_SEED";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.tsv";
pub const CHECKPOINT_FILE: &str = "model.m2dt";

#[derive(Debug, Parser)]
#[command(name = "m2d", version, about = "Weakly-supervised moment retrieval on multi-scale 2D temporal maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus.
    GenData(GenData),
    /// Train a model on a corpus directory.
    Train(Train),
    /// Report recall on a corpus split and write predictions.
    Eval(Eval),
    /// Print the top moments for one query.
    Infer(Infer),
    /// Print one scale's score map for one query.
    InspectMap(InspectMap),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    n_videos: usize,
    #[arg(long, default_value_t = 16)]
    clips: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    event_types: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML configuration; defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint written by `train`; its directory must hold config.toml
    /// unless --config is given.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct Eval {
    #[command(flatten)]
    model: ModelArgs,
    /// Evaluate every record instead of the held-out split.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    tsv: bool,
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Infer {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    video: String,
    /// Whitespace-separated query tokens.
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Debug, Args)]
struct InspectMap {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    video: String,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 0)]
    scale: usize,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::NonFinite { .. } | Error::NumericGuard { .. } => 4,
        _ => 3,
    }
}

/// Seed precedence: flag, then `M2D_SEED`, then the config value.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        _ => Ok(config),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let base = match path {
        Some(p) => Config::load(p)?,
        None => Config::desk(),
    };
    base.with_overrides(overrides)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Infer(a) => infer_cmd(a, out),
        Command::InspectMap(a) => inspect_cmd(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn gen_data(a: GenData, out: &mut dyn Write) -> Result<()> {
    let seed = resolve_seed(a.seed, std::env::var(SEED_ENV).ok().as_deref(), 0)?;
    let spec = SyntheticSpec {
        seed,
        n_videos: a.n_videos,
        clips_per_video: a.clips,
        feature_dim: a.dim,
        n_event_types: a.event_types,
        noise_sigma: a.sigma,
        ..SyntheticSpec::default()
    };
    let synth = generate_synthetic(&spec)?;
    write_corpus(&a.out, &synth.corpus)?;
    emit(out, &format!("wrote {}\n", a.out.display()))?;
    emit(out, &corpus_summary(&synth.corpus))
}

fn train_cmd(a: Train, out: &mut dyn Write) -> Result<()> {
    let mut config = load_config(a.config.config.as_deref(), &a.config.overrides)?;
    config.seed = resolve_seed(a.config.seed, std::env::var(SEED_ENV).ok().as_deref(), config.seed)?;
    let corpus = read_corpus(&a.data)?;
    let bank = feature_bank(&corpus);
    let (train_recs, _) = split_records(&corpus.records, config.test_fraction);
    let views: Vec<_> = train_recs.iter().map(|r| r.training_view()).collect();

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let cfg_path = a.out.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = a.out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let every = config.checkpoint_every;
    let steps = config.steps;
    let out_dir = a.out.clone();
    let model = train(&config, &corpus.vocab, &views, &bank, |step, report, model| {
        writeln!(log, "{}", report.log_line(step)).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && (step + 1) % every == 0 && step + 1 < steps {
            save_checkpoint(&out_dir.join(format!("model-step{}.m2dt", step + 1)), model)?;
        }
        Ok(())
    })?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &model)?;
    emit(
        out,
        &format!(
            "trained {} steps on {} records ({} parameters)\ncheckpoint: {}\nlog: {}\n",
            steps,
            views.len(),
            model.params.scalar_count(),
            ckpt.display(),
            a.out.join(LOG_FILE).display()
        ),
    )
}

fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), &model.params)
}

/// Rebuilds the model a checkpoint was trained with.
pub fn load_model(checkpoint: &Path, config: Option<&Path>, vocab_size: usize) -> Result<Model> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(CONFIG_FILE),
    };
    let config = Config::load(&cfg_path)?;
    let mut model = Model::new(&config, vocab_size)?;
    let f = fs::File::open(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let params = read_checkpoint(std::io::BufReader::new(f))?;
    model.params.load_from(&params)?;
    Ok(model)
}

fn open_model(a: &ModelArgs) -> Result<(Corpus, Model)> {
    let corpus = read_corpus(&a.data)?;
    let model = load_model(&a.checkpoint, a.config.as_deref(), corpus.vocab.len())?;
    Ok((corpus, model))
}

fn eval_cmd(a: Eval, out: &mut dyn Write) -> Result<()> {
    let (corpus, model) = open_model(&a.model)?;
    let bank = feature_bank(&corpus);
    let (records, offset) = if a.all {
        (&corpus.records[..], 0)
    } else {
        let (train_recs, test) = split_records(&corpus.records, model.config.test_fraction);
        (test, train_recs.len())
    };
    let (result, preds) = evaluate_model(&model, &corpus.vocab, records, &bank)?;
    emit(out, &if a.tsv { result.tsv() } else { result.table() })?;
    if let Some(path) = a.predictions {
        let rows: Vec<_> = preds
            .iter()
            .enumerate()
            .flat_map(|(q, ps)| ps.iter().map(move |p| (offset + q, p.start(), p.end(), p.score)))
            .collect();
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_predictions(std::io::BufWriter::new(f), &rows).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn query_input(model: &Model, corpus: &Corpus, data: &Path, video: &str, query: &str) -> Result<(crate::tensor::Tensor, crate::encoders::Query)> {
    let clips = match corpus.features.get(video) {
        Some(f) => f.to_tensor(),
        None => read_feature_file(&feature_path(data, video))?.to_tensor(),
    };
    let words: Vec<&str> = query.split_whitespace().collect();
    let q = model.query(corpus.vocab.encode(&words)?)?;
    Ok((clips, q))
}

fn infer_cmd(a: Infer, out: &mut dyn Write) -> Result<()> {
    let (corpus, model) = open_model(&a.model)?;
    let (clips, q) = query_input(&model, &corpus, &a.model.data, &a.video, &a.query)?;
    let mut text = String::from("rank\tstart_s\tend_s\tscore\n");
    for (i, p) in model.retrieve(&clips, &q, a.top)?.iter().enumerate() {
        text.push_str(&format!("{}\t{:.3}\t{:.3}\t{:.6}\n", i + 1, p.start(), p.end(), p.score));
    }
    emit(out, &text)
}

/// Text rendering of a score grid; invalid cells print as `·`.
pub fn render_grid(grid: &[Vec<Option<f64>>]) -> String {
    let mut s = String::new();
    for row in grid {
        let cells: Vec<String> = row
            .iter()
            .map(|c| match c {
                Some(v) => format!("{v:.2}"),
                None => "   ·".to_string(),
            })
            .collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

fn inspect_cmd(a: InspectMap, out: &mut dyn Write) -> Result<()> {
    let (corpus, model) = open_model(&a.model)?;
    let (clips, q) = query_input(&model, &corpus, &a.model.data, &a.video, &a.query)?;
    let grid = model.score_grid(&clips, &q, a.scale)?;
    emit(
        out,
        &format!(
            "scale {} ({}x{}), rows = start, columns = end\n{}",
            a.scale,
            grid.len(),
            grid.len(),
            render_grid(&grid)
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some("5"), 7).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some("5"), 7).unwrap(), 5);
        assert_eq!(resolve_seed(None, None, 7).unwrap(), 7);
        assert_eq!(resolve_seed(None, Some(""), 7).unwrap(), 7);
        assert!(resolve_seed(None, Some("x"), 7).is_err());
    }

    #[test]
    fn grid_rendering() {
        let g = vec![vec![Some(0.5), Some(0.25)], vec![None, Some(1.0)]];
        let s = render_grid(&g);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "0.50 0.25");
        assert_eq!(lines[1], "   · 1.00");
    }

    #[test]
    fn missing_out_is_usage_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["m2d", "gen-data"], &mut out, &mut err), 2);
        assert_eq!(run(["m2d", "bogus"], &mut out, &mut err), 2);
        assert!(String::from_utf8(err).unwrap().contains("--out"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Usage("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFinite { op: "x" }), 4);
        assert_eq!(
            exit_code(&Error::Parse {
                source_name: "a".into(),
                location: "b".into(),
                detail: "c".into()
            }),
            3
        );
    }
}
