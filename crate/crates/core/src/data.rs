//! Corpus files, the synthetic generator, and batching.
//!
//! A corpus directory holds:
//!
//! ```text
//! vocab.txt           one token per line; line 0 is the reserved "<bos>"
//! annotations.jsonl   one AnnotationRecord per line
//! features/<id>.m2df  clip features of one video
//! ```
//!
//! Feature files are little-endian:
//!
//! ```text
//! b"M2DF" | version: u32 | id_len: u32 | video_id: utf-8 | n_clips: u64 | dim: u64 | n_clips·dim × f32
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::Query;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"M2DF";
pub const FEATURE_VERSION: u32 = 1;
pub const BOS: &str = "<bos>";

pub const VOCAB_FILE: &str = "vocab.txt";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const FEATURE_DIR: &str = "features";

/// One query with its video and, for evaluation only, its moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub duration_s: f64,
    pub query_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_interval: Option<(f64, f64)>,
}

/// What the training path may see of an annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub video_id: String,
    pub duration_s: f64,
    pub query_tokens: Vec<String>,
}

impl AnnotationRecord {
    pub fn training_view(&self) -> TrainingRecord {
        TrainingRecord {
            video_id: self.video_id.clone(),
            duration_s: self.duration_s,
            query_tokens: self.query_tokens.clone(),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if self.query_tokens.is_empty() {
            return Err("query_tokens is empty".into());
        }
        if let Some((s, e)) = self.gt_interval {
            if !(0.0 <= s && s < e && e <= self.duration_s) {
                return Err(format!(
                    "gt_interval [{s}, {e}] outside [0, {}]",
                    self.duration_s
                ));
            }
        }
        Ok(())
    }
}

// ---- feature files --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub video_id: String,
    pub n_clips: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn new(video_id: impl Into<String>, n_clips: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_clips * dim {
            return Err(Error::dim("feature_file", &[data.len()], &[n_clips, dim]));
        }
        Ok(FeatureFile {
            video_id: video_id.into(),
            n_clips,
            dim,
            data,
        })
    }

    pub fn from_tensor(video_id: impl Into<String>, t: &Tensor) -> Result<Self> {
        match t.shape() {
            [n, d] => FeatureFile::new(video_id, *n, *d, t.data().iter().map(|&v| v as f32).collect()),
            s => Err(Error::dim("feature_file", s, &[0, 0])),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.n_clips, self.dim],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("feature values are finite")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.video_id.len() + 4 * self.data.len());
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.video_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.video_id.as_bytes());
        buf.extend_from_slice(&(self.n_clips as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let err = |offset: usize, detail: String| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("byte offset {offset}"),
            detail,
        };
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<(usize, &[u8])> {
            if pos + n > bytes.len() {
                return Err(err(pos, format!("truncated while reading {what}")));
            }
            let at = pos;
            pos += n;
            Ok((at, &bytes[at..at + n]))
        };
        let (at, magic) = take(4, "magic")?;
        if magic != FEATURE_MAGIC {
            return Err(err(at, format!("bad magic {magic:?}, expected \"M2DF\"")));
        }
        let (at, v) = take(4, "version")?;
        let version = u32::from_le_bytes(v.try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(err(at, format!("unsupported version {version}")));
        }
        let (_, l) = take(4, "video id length")?;
        let id_len = u32::from_le_bytes(l.try_into().unwrap()) as usize;
        let (at, id) = take(id_len, "video id")?;
        let video_id = std::str::from_utf8(id)
            .map_err(|e| err(at, format!("video id is not UTF-8: {e}")))?
            .to_string();
        let (_, n) = take(8, "n_clips")?;
        let n_clips = u64::from_le_bytes(n.try_into().unwrap()) as usize;
        let (_, d) = take(8, "dim")?;
        let dim = u64::from_le_bytes(d.try_into().unwrap()) as usize;
        let count = n_clips
            .checked_mul(dim)
            .and_then(|c| c.checked_mul(4).map(|_| c))
            .ok_or_else(|| err(pos, "feature size overflows".into()))?;
        let data_at = pos;
        let remaining = bytes.len() - pos;
        if remaining < count * 4 {
            return Err(err(
                data_at,
                format!("truncated while reading {count} features ({remaining} bytes left)"),
            ));
        }
        if remaining > count * 4 {
            return Err(err(data_at + count * 4, "trailing bytes after features".into()));
        }
        let data: Vec<f32> = bytes[data_at..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(err(data_at + 4 * i, "non-finite feature value".into()));
        }
        Ok(FeatureFile {
            video_id,
            n_clips,
            dim,
            data,
        })
    }
}

pub fn write_feature_file(path: &Path, file: &FeatureFile) -> Result<()> {
    fs::write(path, file.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::from_bytes(&bytes, &path.display().to_string())
}

// ---- annotations ----------------------------------------------------------

pub fn annotation_line(record: &AnnotationRecord) -> String {
    serde_json::to_string(record).expect("annotation serializes")
}

pub fn parse_annotations(text: &str, source_name: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {}", i + 1),
            detail,
        };
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&annotation_line(r));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string())
}

// ---- vocabulary -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// `<bos>` followed by `words` in order.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec![BOS.to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Vocabulary::from_tokens(tokens, "vocabulary")
    }

    fn from_tokens(tokens: Vec<String>, source_name: &str) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {line}"),
            detail,
        };
        if tokens.first().map(String::as_str) != Some(BOS) {
            return Err(err(1, format!("first token must be {BOS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(err(i + 1, format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(err(i + 1, format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                let w = w.as_ref();
                match self.id(w) {
                    Some(i) if i != 0 => Ok(i),
                    Some(_) => Err(Error::Usage(format!("{BOS:?} cannot appear in a query"))),
                    None => Err(Error::Usage(format!("unknown token {w:?}"))),
                }
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect(), source_name)
    }
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocabulary::parse(&text, &path.display().to_string())
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, vocab.to_text()).map_err(|e| Error::io(path, e))
}

// ---- synthetic corpus -----------------------------------------------------

const LEXICON: [&str; 32] = [
    "person", "opens", "closes", "door", "window", "walks", "sits", "stands", "on", "chair",
    "table", "holds", "cup", "drinks", "water", "eats", "food", "reads", "book", "turns",
    "light", "laughs", "phone", "takes", "puts", "bag", "runs", "away", "the", "a", "box", "towel",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_videos: usize,
    pub clips_per_video: usize,
    pub feature_dim: usize,
    pub n_event_types: usize,
    pub noise_sigma: f64,
    /// Inclusive range of query lengths in tokens.
    pub phrase_len: (usize, usize),
    /// Inclusive range of planted segment lengths in clips.
    pub event_len: (usize, usize),
    pub frames_per_clip: usize,
    pub fps: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            n_videos: 200,
            clips_per_video: 16,
            feature_dim: 64,
            n_event_types: 8,
            noise_sigma: 0.5,
            phrase_len: (2, 4),
            event_len: (3, 8),
            frames_per_clip: 4,
            fps: 4.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_videos == 0 || self.clips_per_video == 0 || self.feature_dim == 0 || self.n_event_types == 0 {
            return cfg("n_videos, clips_per_video, feature_dim and n_event_types must be positive".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return cfg(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        let (pl, ph) = self.phrase_len;
        if pl == 0 || pl > ph {
            return cfg(format!("invalid phrase_len range {pl}..={ph}"));
        }
        let (el, eh) = self.event_len;
        if el == 0 || el > eh || eh > self.clips_per_video {
            return cfg(format!(
                "event_len {el}..={eh} must lie within 1..={}",
                self.clips_per_video
            ));
        }
        if self.frames_per_clip == 0 || !(self.fps.is_finite() && self.fps > 0.0) {
            return cfg("frames_per_clip and fps must be positive".into());
        }
        let phrases: f64 = (pl..=ph).map(|l| (LEXICON.len() as f64).powi(l as i32)).sum();
        if (self.n_event_types as f64) > phrases {
            return cfg(format!("cannot form {} distinct phrases", self.n_event_types));
        }
        Ok(())
    }

    pub fn clip_seconds(&self) -> f64 {
        self.frames_per_clip as f64 / self.fps
    }
}

/// Ground truth the generator planted, kept alongside the annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEvent {
    pub event_type: usize,
    /// Inclusive clip range.
    pub clips: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub records: Vec<AnnotationRecord>,
    pub features: BTreeMap<String, FeatureFile>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub prototypes: Vec<Vec<f64>>,
    pub phrases: Vec<Vec<String>>,
    pub planted: Vec<PlantedEvent>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");

    let prototypes: Vec<Vec<f64>> = (0..spec.n_event_types)
        .map(|_| {
            let v: Vec<f64> = (0..spec.feature_dim).map(|_| std_normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let mut phrases: Vec<Vec<String>> = Vec::with_capacity(spec.n_event_types);
    while phrases.len() < spec.n_event_types {
        let len = rng.random_range(spec.phrase_len.0..=spec.phrase_len.1);
        let p: Vec<String> = (0..len)
            .map(|_| LEXICON[rng.random_range(0..LEXICON.len())].to_string())
            .collect();
        if !phrases.contains(&p) {
            phrases.push(p);
        }
    }
    let mut words: Vec<&str> = Vec::new();
    for w in phrases.iter().flatten() {
        if !words.contains(&w.as_str()) {
            words.push(w);
        }
    }
    let vocab = Vocabulary::new(&words)?;

    let clip_s = spec.clip_seconds();
    let n = spec.clips_per_video;
    let duration_s = n as f64 * clip_s;
    let mut records = Vec::with_capacity(spec.n_videos);
    let mut features = BTreeMap::new();
    let mut planted = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let event_type = rng.random_range(0..spec.n_event_types);
        let len = rng.random_range(spec.event_len.0..=spec.event_len.1);
        let start = rng.random_range(0..=n - len);
        let end = start + len - 1;
        let mut data = Vec::with_capacity(n * spec.feature_dim);
        for c in 0..n {
            let inside = (start..=end).contains(&c);
            for k in 0..spec.feature_dim {
                let base = if inside { prototypes[event_type][k] } else { 0.0 };
                let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((base + eps) as f32);
            }
        }
        let video_id = format!("vid{v:05}");
        records.push(AnnotationRecord {
            video_id: video_id.clone(),
            duration_s,
            query_tokens: phrases[event_type].clone(),
            gt_interval: Some((start as f64 * clip_s, (end + 1) as f64 * clip_s)),
        });
        features.insert(video_id.clone(), FeatureFile::new(video_id, n, spec.feature_dim, data)?);
        planted.push(PlantedEvent {
            event_type,
            clips: (start, end),
        });
    }
    Ok(SyntheticCorpus {
        corpus: Corpus {
            vocab,
            records,
            features,
        },
        prototypes,
        phrases,
        planted,
    })
}

// ---- corpus directories ---------------------------------------------------

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(FEATURE_DIR).join(format!("{video_id}.m2df"))
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let fdir = dir.join(FEATURE_DIR);
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    write_vocabulary(&dir.join(VOCAB_FILE), &corpus.vocab)?;
    write_annotations(&dir.join(ANNOTATION_FILE), &corpus.records)?;
    for (id, f) in &corpus.features {
        write_feature_file(&feature_path(dir, id), f)?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let vocab = read_vocabulary(&dir.join(VOCAB_FILE))?;
    let records = read_annotations(&dir.join(ANNOTATION_FILE))?;
    let mut features = BTreeMap::new();
    for r in &records {
        if features.contains_key(&r.video_id) {
            continue;
        }
        let path = feature_path(dir, &r.video_id);
        let f = read_feature_file(&path)?;
        if f.video_id != r.video_id {
            return Err(Error::Parse {
                source_name: path.display().to_string(),
                location: "header".into(),
                detail: format!("file holds video {:?}, expected {:?}", f.video_id, r.video_id),
            });
        }
        features.insert(r.video_id.clone(), f);
    }
    Ok(Corpus {
        vocab,
        records,
        features,
    })
}

/// Human-readable corpus statistics.
pub fn corpus_summary(corpus: &Corpus) -> String {
    let dims: Vec<usize> = corpus.features.values().map(|f| f.dim).collect();
    let clips: Vec<usize> = corpus.features.values().map(|f| f.n_clips).collect();
    format!(
        "videos: {}\nqueries: {}\nvocabulary: {} tokens\nclips per video: {}..={}\nfeature dim: {}\n",
        corpus.features.len(),
        corpus.records.len(),
        corpus.vocab.len(),
        clips.iter().min().unwrap_or(&0),
        clips.iter().max().unwrap_or(&0),
        dims.first().unwrap_or(&0),
    )
}

// ---- splits and batches ---------------------------------------------------

/// Holds out the trailing `test_fraction` of records, in file order.
pub fn split_records(records: &[AnnotationRecord], test_fraction: f64) -> (&[AnnotationRecord], &[AnnotationRecord]) {
    let n_test = ((records.len() as f64) * test_fraction).round() as usize;
    records.split_at(records.len() - n_test.min(records.len()))
}

/// A training example with its token ids resolved.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub record: TrainingRecord,
    pub query: Query,
}

pub fn training_items(
    records: &[TrainingRecord],
    vocab: &Vocabulary,
    max_query_len: usize,
) -> Result<Vec<TrainingItem>> {
    records
        .iter()
        .map(|r| {
            let ids = vocab.encode(&r.query_tokens)?;
            Ok(TrainingItem {
                record: r.clone(),
                query: Query::new(ids, vocab.len(), max_query_len)?,
            })
        })
        .collect()
}

/// Seeded shuffle of `0..n` cut into batches; the last may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Writes `query_id\tstart_s\tend_s\tscore` lines.
pub fn write_predictions<W: std::io::Write>(
    mut out: W,
    rows: &[(usize, f64, f64, f64)],
) -> std::io::Result<()> {
    for (q, s, e, score) in rows {
        writeln!(out, "{q}\t{s}\t{e}\t{score}")?;
    }
    Ok(())
}
