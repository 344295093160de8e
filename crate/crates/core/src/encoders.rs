//! Query text encoder and clip-feature projection.

use crate::error::{Error, Result};
use crate::tensor::nn::{Linear, LstmParams};
use crate::tensor::{ParamId, ParamSet, SeededInit, Tape, Tensor, Var};

/// Token indices of one query sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    tokens: Vec<usize>,
}

impl Query {
    pub fn new(tokens: Vec<usize>, vocab_size: usize, max_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Usage("query must contain at least one token".into()));
        }
        if tokens.len() > max_len {
            return Err(Error::Usage(format!(
                "query has {} tokens, maximum is {max_len}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Vocabulary {
                index: bad,
                size: vocab_size,
            });
        }
        Ok(Query { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Learned word vectors `[V × d_e]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn register(
        params: &mut ParamSet,
        init: &mut SeededInit,
        vocab_size: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = params.insert("embedding.table", init.uniform(&[vocab_size, dim], dim))?;
        Ok(EmbeddingTable {
            table,
            vocab_size,
            dim,
        })
    }

    /// Looks up arbitrary token indices, `[n × d_e]`.
    pub fn lookup<'p>(
        &self,
        tape: &mut Tape<'p>,
        params: &'p ParamSet,
        tokens: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Vocabulary {
                index: bad,
                size: self.vocab_size,
            });
        }
        let table = tape.param(params, self.table);
        tape.gather_rows(table, tokens)
    }
}

/// Word embeddings of a query, `[L × d_e]`.
pub fn embed<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    query: &Query,
    table: &EmbeddingTable,
) -> Result<Var> {
    table.lookup(tape, params, query.tokens())
}

/// Word-level and sentence-level text features on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoding {
    /// `[L × d^T]`
    pub word_features: Var,
    /// `[d^T]`
    pub sentence_feature: Var,
}

/// Stacked bidirectional LSTM with a shared output projection.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    /// `(forward, backward)` cell per layer.
    pub layers: Vec<(LstmParams, LstmParams)>,
    pub projection: Linear,
    pub hidden: usize,
}

impl TextEncoder {
    pub fn register(
        params: &mut ParamSet,
        init: &mut SeededInit,
        d_in: usize,
        hidden: usize,
        n_layers: usize,
        d_t: usize,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("text encoder needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let input = if l == 0 { d_in } else { 2 * hidden };
            let fwd = LstmParams::register(params, init, &format!("text.l{l}.fwd"), input, hidden)?;
            let bwd = LstmParams::register(params, init, &format!("text.l{l}.bwd"), input, hidden)?;
            layers.push((fwd, bwd));
        }
        let projection = Linear::register(params, init, "text.proj", 2 * hidden, d_t, true)?;
        Ok(TextEncoder {
            layers,
            projection,
            hidden,
        })
    }

    fn run_direction<'p>(
        &self,
        tape: &mut Tape<'p>,
        params: &'p ParamSet,
        cell: &LstmParams,
        steps: &[Var],
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut out = vec![h; steps.len()];
        let order: Vec<usize> = if reverse {
            (0..steps.len()).rev().collect()
        } else {
            (0..steps.len()).collect()
        };
        for t in order {
            (h, c) = cell.cell(tape, params, steps[t], h, c)?;
            out[t] = h;
        }
        Ok(out)
    }

    /// Encodes word embeddings `[L × d_e]`.
    pub fn encode<'p>(
        &self,
        tape: &mut Tape<'p>,
        params: &'p ParamSet,
        embeddings: Var,
    ) -> Result<TextEncoding> {
        let len = match tape.shape(embeddings) {
            [l, _] if *l > 0 => *l,
            s => return Err(Error::dim("encode_text", s, &[1, 0])),
        };
        let mut input = embeddings;
        let mut last = (Vec::new(), Vec::new());
        for (fwd, bwd) in &self.layers {
            let steps: Vec<Var> = (0..len)
                .map(|t| tape.slice_rows(input, t, 1))
                .collect::<Result<_>>()?;
            let hf = self.run_direction(tape, params, fwd, &steps, false)?;
            let hb = self.run_direction(tape, params, bwd, &steps, true)?;
            let f_rows = tape.concat_rows(&hf)?;
            let b_rows = tape.concat_rows(&hb)?;
            input = tape.concat_cols(&[f_rows, b_rows])?;
            last = (hf, hb);
        }
        let word_features = self.projection.forward(tape, params, input)?;
        let ends = tape.concat_cols(&[last.0[len - 1], last.1[0]])?;
        let sentence = self.projection.forward(tape, params, ends)?;
        let d_t = self.projection.d_out;
        let sentence_feature = tape.reshape(sentence, &[d_t])?;
        Ok(TextEncoding {
            word_features,
            sentence_feature,
        })
    }
}

/// Per-clip affine projection `d_raw → d^v`.
#[derive(Debug, Clone, Copy)]
pub struct VideoProjection {
    pub linear: Linear,
}

impl VideoProjection {
    pub fn register(
        params: &mut ParamSet,
        init: &mut SeededInit,
        d_raw: usize,
        d_v: usize,
    ) -> Result<Self> {
        Ok(VideoProjection {
            linear: Linear::register(params, init, "video.proj", d_raw, d_v, true)?,
        })
    }

    /// Projects `clips[N × d_raw]` to `[N × d^v]`.
    pub fn project<'p>(&self, tape: &mut Tape<'p>, params: &'p ParamSet, clips: Var) -> Result<Var> {
        match tape.shape(clips) {
            [_, d] if *d == self.linear.d_in => self.linear.forward(tape, params, clips),
            s => Err(Error::dim("project_video", s, &[0, self.linear.d_in])),
        }
    }
}
