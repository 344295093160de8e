//! The full retrieval network: encoders, multi-scale maps, fusion, the
//! shared convolution stack, scoring, and the caption module.

use crate::captioner::CaptionParams;
use crate::config::{CaptionFeatures, Config};
use crate::encoders::{embed, EmbeddingTable, Query, TextEncoder, TextEncoding, VideoProjection};
use crate::error::{Error, Result};
use crate::eval::{nms, sort_predictions, MomentPrediction};
use crate::fusion::{fuse, ConvStack, FusedMap, FusionParams, ScoreMap, Scorer};
use crate::temporal_map::{to_seconds, ScaleLayout};
use crate::tensor::{ParamSet, SeededInit, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub vocab_size: usize,
    pub params: ParamSet,
    pub embedding: EmbeddingTable,
    pub text: TextEncoder,
    pub video: VideoProjection,
    pub fusion: FusionParams,
    pub conv: ConvStack,
    pub scorer: Scorer,
    pub caption: CaptionParams,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub layouts: Vec<ScaleLayout>,
    pub text: TextEncoding,
    /// Per scale, pooled video-only cell features `[cells × d^v]`.
    pub video: Vec<Var>,
    /// Per scale, after fusion.
    pub fused: Vec<FusedMap>,
    /// Per scale, after the convolution stack.
    pub conv: Vec<FusedMap>,
    pub scores: Vec<ScoreMap>,
}

impl Forward {
    /// The features the caption module reads for scale `j`.
    pub fn caption_source(&self, which: CaptionFeatures, j: usize) -> Var {
        match which {
            CaptionFeatures::Conv => self.conv[j].features,
            CaptionFeatures::Fused => self.fused[j].features,
            CaptionFeatures::Video => self.video[j],
        }
    }
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &Config, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs the reserved token plus at least one word, got {vocab_size}"
            )));
        }
        let c = config;
        let mut params = ParamSet::new();
        let mut init = SeededInit::new(c.seed);
        let embedding = EmbeddingTable::register(&mut params, &mut init, vocab_size, c.embed_dim)?;
        let text = TextEncoder::register(
            &mut params,
            &mut init,
            c.embed_dim,
            c.text_hidden,
            c.text_layers,
            c.text_dim,
        )?;
        let video = VideoProjection::register(&mut params, &mut init, c.feature_dim, c.video_dim)?;
        let fusion = FusionParams::register(&mut params, &mut init, c.text_dim, c.video_dim)?;
        let conv = ConvStack::register(&mut params, &mut init, c.conv_layers, c.kernel_size, c.video_dim)?;
        let scorer = Scorer::register(&mut params, &mut init, c.video_dim)?;
        let caption = CaptionParams::register(
            &mut params,
            &mut init,
            c.embed_dim,
            c.caption_hidden,
            c.video_dim,
            vocab_size,
        )?;
        Ok(Model {
            config: config.clone(),
            vocab_size,
            params,
            embedding,
            text,
            video,
            fusion,
            conv,
            scorer,
            caption,
        })
    }

    pub fn query(&self, tokens: Vec<usize>) -> Result<Query> {
        Query::new(tokens, self.vocab_size, self.config.max_query_len)
    }

    pub fn layouts(&self, n_base: usize) -> Result<Vec<ScaleLayout>> {
        if n_base == 0 {
            return Err(Error::Usage("video has no clips".into()));
        }
        ScaleLayout::all(&self.config.scale_config(), n_base)
    }

    /// Runs every scale for one video/query pair.
    ///
    /// `clips` is `[N × feature_dim]`.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        clips: &'p Tensor,
        query: &Query,
    ) -> Result<Forward> {
        let n = match clips.shape() {
            [n, d] if *d == self.config.feature_dim => *n,
            s => {
                return Err(Error::Config(format!(
                    "clip features have shape {s:?}, model expects {} columns",
                    self.config.feature_dim
                )))
            }
        };
        let layouts = self.layouts(n)?;
        let p = &self.params;
        let emb = embed(tape, p, query, &self.embedding)?;
        let text = self.text.encode(tape, p, emb)?;
        let raw = tape.constant_ref(clips);
        let base = self.video.project(tape, p, raw)?;
        let mut video = Vec::with_capacity(layouts.len());
        let mut fused = Vec::with_capacity(layouts.len());
        let mut conv = Vec::with_capacity(layouts.len());
        let mut scores = Vec::with_capacity(layouts.len());
        for layout in &layouts {
            let pooled = layout.sample_on(tape, base)?;
            let cells = layout.map_cells_on(tape, pooled)?;
            let f = fuse(tape, p, &self.fusion, layout, cells, text.sentence_feature)?;
            let c = self.conv.forward(tape, p, &f)?;
            scores.push(self.scorer.score(tape, p, &c)?);
            video.push(cells);
            fused.push(f);
            conv.push(c);
        }
        Ok(Forward {
            layouts,
            text,
            video,
            fused,
            conv,
            scores,
        })
    }

    /// Every valid candidate of every scale in rank order, before NMS.
    pub fn rank_candidates(&self, clips: &Tensor, query: &Query) -> Result<Vec<MomentPrediction>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, clips, query)?;
        let scale_cfg = self.config.scale_config();
        let n_base = clips.shape()[0];
        let mut preds = Vec::new();
        for (layout, map) in fwd.layouts.iter().zip(&fwd.scores) {
            for (id, &score) in layout.candidates().zip(tape.value(map.scores)) {
                preds.push(MomentPrediction {
                    interval: to_seconds(id, &scale_cfg, n_base)?,
                    score,
                    source: id,
                });
            }
        }
        sort_predictions(&mut preds);
        Ok(preds)
    }

    /// The top `n` moments after cross-scale NMS.
    pub fn retrieve(&self, clips: &Tensor, query: &Query, n: usize) -> Result<Vec<MomentPrediction>> {
        let ranked = self.rank_candidates(clips, query)?;
        let mut kept = nms(&ranked, self.config.nms_threshold)?;
        kept.truncate(n);
        Ok(kept)
    }

    /// Dense `N_j × N_j` score grid of scale `j`; `None` marks invalid cells.
    pub fn score_grid(&self, clips: &Tensor, query: &Query, j: usize) -> Result<Vec<Vec<Option<f64>>>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, clips, query)?;
        let map = fwd.scores.get(j).ok_or_else(|| {
            Error::Usage(format!("scale {j} out of range (model has {})", fwd.scores.len()))
        })?;
        let (n, w) = map.cells.dims();
        let mut grid = vec![vec![None; w]; n];
        for (&(x, y), &s) in map.cells.cells().iter().zip(tape.value(map.scores)) {
            grid[x][y] = Some(s);
        }
        Ok(grid)
    }
}
