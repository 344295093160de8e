//! Multi-scale clip grids and 2D temporal candidate maps.
//!
//! A video arrives as `N` base clip features. For every configured scale
//! `N_j` the base clips are partitioned into `N_j` consecutive groups and
//! max-pooled, and the pooled sequence spans an `N_j × N_j` map whose cell
//! `(x, y)` holds the max-pool of clips `x..=y`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ActiveCells, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    /// Map side lengths, strictly decreasing.
    pub scales: Vec<usize>,
    pub frames_per_clip: usize,
    pub fps: f64,
}

impl ScaleConfig {
    pub fn new(scales: Vec<usize>, frames_per_clip: usize, fps: f64) -> Result<Self> {
        let cfg = ScaleConfig {
            scales,
            frames_per_clip,
            fps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one temporal scale is required".into()));
        }
        if self.scales.contains(&0) {
            return Err(Error::Config("every scale must be at least 1".into()));
        }
        if self.scales.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "scales must be strictly decreasing, got {:?}",
                self.scales
            )));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::Config("frames_per_clip must be positive".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Duration of one base clip in seconds.
    pub fn clip_seconds(&self) -> f64 {
        self.frames_per_clip as f64 / self.fps
    }
}

/// One moment candidate: cell `(start, end)` of the map at `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateId {
    pub scale: usize,
    pub start: usize,
    pub end: usize,
}

impl CandidateId {
    pub fn new(scale: usize, start: usize, end: usize) -> Self {
        CandidateId { scale, start, end }
    }

    /// Number of clips covered at its own scale.
    pub fn duration(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Base-clip range `[lo, hi]` pooled into clip `i` of a scale with `n_j`
/// clips, or `None` when the clip is padding.
pub fn group_bounds(n_base: usize, n_j: usize, i: usize) -> Option<(usize, usize)> {
    if i >= n_j || n_base == 0 {
        return None;
    }
    if n_base < n_j {
        return (i < n_base).then_some((i, i));
    }
    let lo = i * n_base / n_j;
    let hi = (i + 1) * n_base / n_j - 1;
    Some((lo, hi))
}

/// Sparse candidate set of an `n_j × n_j` map, row-major.
///
/// Maps of side 16 or less keep the whole upper triangle. Larger maps keep
/// every candidate of up to 8 clips and thin longer ones by start index:
/// starts divisible by 2 up to 16 clips, by 4 up to 32, by 8 beyond.
pub fn sparse_candidates(n_j: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for x in 0..n_j {
        for y in x..n_j {
            if n_j <= 16 || keep_sparse(x, y - x + 1) {
                out.push((x, y));
            }
        }
    }
    out
}

fn keep_sparse(x: usize, d: usize) -> bool {
    match d {
        0..=8 => true,
        9..=16 => x % 2 == 0,
        17..=32 => x % 4 == 0,
        _ => x % 8 == 0,
    }
}

/// Geometry of one scale for a video with a given number of base clips.
#[derive(Debug, Clone)]
pub struct ScaleLayout {
    pub scale: usize,
    pub n_j: usize,
    pub n_base: usize,
    /// Per pooled clip, the base-clip range or `None` for padding.
    pub groups: Vec<Option<(usize, usize)>>,
    /// Valid cells in row-major order.
    pub cells: Arc<ActiveCells>,
}

impl ScaleLayout {
    pub fn new(scale: usize, n_j: usize, n_base: usize) -> Result<Self> {
        let groups: Vec<_> = (0..n_j).map(|i| group_bounds(n_base, n_j, i)).collect();
        let real = groups.iter().filter(|g| g.is_some()).count();
        let cells: Vec<_> = sparse_candidates(n_j)
            .into_iter()
            .filter(|&(_, y)| y < real)
            .collect();
        Ok(ScaleLayout {
            scale,
            n_j,
            n_base,
            groups,
            cells: Arc::new(ActiveCells::new(n_j, n_j, cells)?),
        })
    }

    /// Layouts for every scale of `config`.
    pub fn all(config: &ScaleConfig, n_base: usize) -> Result<Vec<ScaleLayout>> {
        config
            .scales
            .iter()
            .enumerate()
            .map(|(j, &n_j)| ScaleLayout::new(j, n_j, n_base))
            .collect()
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.cells.position(x, y).is_some()
    }

    pub fn candidates(&self) -> impl Iterator<Item = CandidateId> + '_ {
        self.cells
            .cells()
            .iter()
            .map(move |&(x, y)| CandidateId::new(self.scale, x, y))
    }

    /// Pools `base[N × d]` into this scale's clips `[N_j × d]` on a tape.
    pub fn sample_on(&self, tape: &mut Tape<'_>, base: Var) -> Result<Var> {
        tape.segment_max(base, &self.groups)
    }

    /// Gathers the valid-cell features `[cells × d]` from pooled clips.
    pub fn map_cells_on(&self, tape: &mut Tape<'_>, clips: Var) -> Result<Var> {
        let segments: Vec<_> = self.cells.cells().iter().map(|&c| Some(c)).collect();
        tape.segment_max(clips, &segments)
    }
}

/// Pooled clip features of every scale.
#[derive(Debug, Clone)]
pub struct ClipGrid {
    pub layouts: Vec<ScaleLayout>,
    /// `[N_j × d]` per scale; padded rows are zero.
    pub features: Vec<Tensor>,
}

impl ClipGrid {
    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |t| t.shape()[1])
    }
}

/// Per-scale 2D map with validity mask.
#[derive(Debug, Clone)]
pub struct TemporalMap {
    pub scale: usize,
    pub n: usize,
    /// `[N × N × d]`, zero wherever `valid_mask` is false.
    pub features: Tensor,
    /// Row-major `N × N`.
    pub valid_mask: Vec<bool>,
    pub candidates: Vec<CandidateId>,
}

impl TemporalMap {
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid_mask[x * self.n + y]
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let d = self.features.shape()[2];
        let at = (x * self.n + y) * d;
        &self.features.data()[at..at + d]
    }
}

/// Even-group max-pool of base clips for every scale.
pub fn multi_scale_sample(features: &Tensor, config: &ScaleConfig, d_v: usize) -> Result<ClipGrid> {
    config.validate()?;
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::dim("multi_scale_sample", s, &[0, d_v])),
    };
    if d != d_v {
        return Err(Error::dim("multi_scale_sample", features.shape(), &[n, d_v]));
    }
    let layouts = ScaleLayout::all(config, n)?;
    let mut out = Vec::with_capacity(layouts.len());
    for layout in &layouts {
        let mut tape = Tape::new();
        let base = tape.constant_ref(features);
        let clips = layout.sample_on(&mut tape, base)?;
        out.push(tape.to_tensor(clips));
    }
    Ok(ClipGrid {
        layouts,
        features: out,
    })
}

/// Materializes the 2D map of scale `j`.
pub fn build_map(grid: &ClipGrid, j: usize) -> Result<TemporalMap> {
    let layout = grid
        .layouts
        .get(j)
        .ok_or_else(|| Error::index("build_map", format!("scale {j} of {}", grid.layouts.len())))?;
    let clips = &grid.features[j];
    let d = clips.shape()[1];
    let n = layout.n_j;
    let mut tape = Tape::new();
    let v = tape.constant_ref(clips);
    let rows = layout.map_cells_on(&mut tape, v)?;
    let rows = tape.value(rows);
    let mut data = vec![0.0; n * n * d];
    let mut valid_mask = vec![false; n * n];
    for (i, &(x, y)) in layout.cells.cells().iter().enumerate() {
        valid_mask[x * n + y] = true;
        data[(x * n + y) * d..(x * n + y + 1) * d].copy_from_slice(&rows[i * d..(i + 1) * d]);
    }
    Ok(TemporalMap {
        scale: j,
        n,
        features: Tensor::new(vec![n, n, d], data)?,
        valid_mask,
        candidates: layout.candidates().collect(),
    })
}

/// Converts a candidate to `(start_s, end_s)` on the video timeline.
pub fn to_seconds(id: CandidateId, config: &ScaleConfig, n_base: usize) -> Result<(f64, f64)> {
    let n_j = *config
        .scales
        .get(id.scale)
        .ok_or_else(|| Error::index("to_seconds", format!("scale {} out of range", id.scale)))?;
    if id.start > id.end || id.end >= n_j {
        return Err(Error::index(
            "to_seconds",
            format!("cell ({},{}) invalid for map of side {n_j}", id.start, id.end),
        ));
    }
    let lo = group_bounds(n_base, n_j, id.start);
    let hi = group_bounds(n_base, n_j, id.end);
    match (lo, hi) {
        (Some((lo, _)), Some((_, hi))) => {
            let clip = config.clip_seconds();
            Ok((lo as f64 * clip, (hi + 1) as f64 * clip))
        }
        _ => Err(Error::index(
            "to_seconds",
            format!("cell ({},{}) covers padded clips", id.start, id.end),
        )),
    }
}
