//! Needle-in-a-haystack retention grid.
//!
//! A needle frame built from the reserved direction is inserted at a relative
//! depth, a query aligned with it is formed, and the pipeline is run. The grid
//! records whether the needle kept full resolution and how many of its tokens
//! survived.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FeatureVector, TokenGrid};
use crate::pipeline::{compress, CompressionConfig, CompressionStats};
use crate::queryselect::QueryEmbedding;
use crate::synthbench::generator::{gen_video, reserved_direction, SynthSpec};
use crate::temporal::FrameFeatureSequence;

pub const DEFAULT_FRAME_COUNTS: [usize; 6] = [200, 400, 800, 1400, 2000, 3600];
pub const DEFAULT_DEPTHS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleSpec {
    /// Template haystack; `n_frames` and `seed` are overridden per cell and
    /// `n_scenes` is scaled with the frame count.
    pub haystack: SynthSpec,
    pub depths: Vec<f64>,
    pub frame_counts: Vec<usize>,
    /// 1.0 puts every query row on the needle direction.
    pub query_alignment: f64,
    pub query_len: usize,
    /// Replicates per (count, depth) cell.
    pub seeds: usize,
}

impl Default for NeedleSpec {
    fn default() -> Self {
        Self {
            haystack: SynthSpec::default(),
            depths: DEFAULT_DEPTHS.to_vec(),
            frame_counts: DEFAULT_FRAME_COUNTS.to_vec(),
            query_alignment: 1.0,
            query_len: 32,
            seeds: 1,
        }
    }
}

impl NeedleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depths.is_empty() || self.frame_counts.is_empty() {
            return bad("depths and frame counts must be nonempty".into());
        }
        if self.depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("depths must lie in [0, 1]".into());
        }
        if self.depths.windows(2).any(|w| w[1] < w[0]) {
            return bad("depths must be sorted".into());
        }
        if self.frame_counts.contains(&0) {
            return bad("frame counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.query_alignment) {
            return bad("alignment must lie in [0, 1]".into());
        }
        if self.query_len == 0 || self.seeds == 0 {
            return bad("query length and seed count must be positive".into());
        }
        self.haystack.validate()
    }

    /// Haystack spec for one cell.
    pub fn cell_haystack(&self, frame_count: usize, replicate: usize) -> SynthSpec {
        let template = &self.haystack;
        let scenes = (template.n_scenes as f64 * frame_count as f64 / template.n_frames as f64)
            .round()
            .clamp(1.0, frame_count as f64) as usize;
        SynthSpec {
            n_frames: frame_count,
            n_scenes: scenes,
            seed: template
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((frame_count as u64) << 20)
                .wrapping_add(replicate as u64),
            ..template.clone()
        }
    }
}

/// Inserts `needle` before position `round(depth * T)`; later frames move one period later.
pub fn insert_needle(
    seq: &FrameFeatureSequence,
    needle: TokenGrid,
    depth: f64,
) -> Result<(FrameFeatureSequence, usize)> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::InvalidNeedle(format!(
            "depth {depth} outside [0, 1]"
        )));
    }
    if needle.shape() != seq.grid_shape() {
        return Err(Error::InvalidNeedle(format!(
            "needle shape {:?} does not match video {:?}",
            needle.shape(),
            seq.grid_shape()
        )));
    }
    let t = seq.len();
    let index = (depth * t as f64).round() as usize;
    let ts = seq.timesteps();
    let period = if t > 1 {
        (ts[t - 1] - ts[0]) / (t - 1) as f64
    } else {
        1.0
    };
    let needle_time = if index < t {
        ts[index]
    } else {
        ts[t - 1] + period
    };
    let mut frames = Vec::with_capacity(t + 1);
    let mut timesteps = Vec::with_capacity(t + 1);
    for (i, f) in seq.frames().iter().enumerate() {
        if i == index {
            frames.push(needle.clone());
            timesteps.push(needle_time);
        }
        frames.push(f.clone());
        timesteps.push(if i >= index { ts[i] + period } else { ts[i] });
    }
    if index == t {
        frames.push(needle);
        timesteps.push(needle_time);
    }
    Ok((FrameFeatureSequence::new(frames, timesteps)?, index))
}

/// Needle frame: every token equals the reserved direction of `spec`.
pub fn needle_frame(spec: &SynthSpec) -> Result<TokenGrid> {
    TokenGrid::filled(spec.grid.0, spec.grid.1, &reserved_direction(spec))
}

/// `alignment * needle + sqrt(1 - alignment^2) * r_l`, with `r_l` unit and orthogonal to the needle.
pub fn aligned_query(
    needle: &[f32],
    alignment: f64,
    rows: usize,
    seed: u64,
) -> Result<QueryEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ddba11);
    let dim = needle.len();
    let needle: Vec<f64> = needle.iter().map(|&x| f64::from(x)).collect();
    let needle_norm = needle.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = (1.0 - alignment * alignment).max(0.0).sqrt();
    let rows = (0..rows)
        .map(|_| {
            let mut r: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let p: f64 = r.iter().zip(&needle).map(|(a, b)| a * b).sum::<f64>()
                / (needle_norm * needle_norm);
            r.iter_mut().zip(&needle).for_each(|(a, b)| *a -= p * b);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let row = needle
                .iter()
                .zip(&r)
                .map(|(nv, rv)| (alignment * nv / needle_norm + off * rv / n) as f32)
                .collect();
            FeatureVector::new(row)
        })
        .collect::<Result<Vec<_>>>()?;
    QueryEmbedding::new(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleOutcome {
    pub frame_count: usize,
    pub depth: f64,
    pub replicate: usize,
    pub needle_index: usize,
    pub frames_after_temporal: usize,
    pub n_h: usize,
    pub needle_full_res: bool,
    pub needle_tokens_kept: usize,
    pub needle_tokens_kept_fraction: f64,
    pub any_token_survives: bool,
    pub tokens_final: usize,
}

/// One grid cell: build, insert, query, compress.
pub fn run_needle_cell(
    spec: &NeedleSpec,
    cfg: &CompressionConfig,
    frame_count: usize,
    depth: f64,
    replicate: usize,
) -> Result<(NeedleOutcome, CompressionStats)> {
    let hay_spec = spec.cell_haystack(frame_count, replicate);
    let haystack = gen_video(&hay_spec)?;
    let needle = needle_frame(&hay_spec)?;
    let needle_tokens_in = needle.num_tokens();
    let query = aligned_query(
        needle.token(0, 0),
        spec.query_alignment,
        spec.query_len,
        hay_spec.seed,
    )?;
    let (video, index) = insert_needle(&haystack, needle, depth)?;
    let (tokens, stats) = compress(&video, &query, cfg)?;
    let kept = tokens
        .tokens
        .iter()
        .filter(|t| t.frame_original_index == index)
        .count();
    let outcome = NeedleOutcome {
        frame_count,
        depth,
        replicate,
        needle_index: index,
        frames_after_temporal: stats.frames_after_temporal,
        n_h: stats.n_h,
        needle_full_res: stats.full_res_frames.binary_search(&index).is_ok(),
        needle_tokens_kept: kept,
        needle_tokens_kept_fraction: kept as f64 / needle_tokens_in as f64,
        any_token_survives: kept > 0,
        tokens_final: stats.tokens_final,
    };
    Ok((outcome, stats))
}

/// Every (count, depth, replicate) cell, ordered by that key.
pub fn run_needle_grid(spec: &NeedleSpec, cfg: &CompressionConfig) -> Result<Vec<NeedleOutcome>> {
    spec.validate()?;
    let cells: Vec<(usize, f64, usize)> = spec
        .frame_counts
        .iter()
        .flat_map(|&c| {
            spec.depths
                .iter()
                .flat_map(move |&d| (0..spec.seeds).map(move |s| (c, d, s)))
        })
        .collect();
    cells
        .par_iter()
        .map(|&(c, d, s)| run_needle_cell(spec, cfg, c, d, s).map(|(o, _)| o))
        .collect()
}

/// Per (count, depth) averages over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleCellSummary {
    pub frame_count: usize,
    pub depth: f64,
    pub needle_full_res: f64,
    pub needle_tokens_kept_fraction: f64,
    pub any_token_survives: f64,
    pub mean_n_h: f64,
}

pub fn summarize_cells(outcomes: &[NeedleOutcome]) -> Vec<NeedleCellSummary> {
    let mut out: Vec<NeedleCellSummary> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for o in outcomes {
        let same = out
            .last()
            .is_some_and(|c| c.frame_count == o.frame_count && c.depth == o.depth);
        if !same {
            out.push(NeedleCellSummary {
                frame_count: o.frame_count,
                depth: o.depth,
                needle_full_res: 0.0,
                needle_tokens_kept_fraction: 0.0,
                any_token_survives: 0.0,
                mean_n_h: 0.0,
            });
            counts.push(0);
        }
        let c = out.last_mut().expect("pushed above");
        c.needle_full_res += f64::from(u8::from(o.needle_full_res));
        c.needle_tokens_kept_fraction += o.needle_tokens_kept_fraction;
        c.any_token_survives += f64::from(u8::from(o.any_token_survives));
        c.mean_n_h += o.n_h as f64;
        *counts.last_mut().expect("pushed above") += 1;
    }
    for (c, &n) in out.iter_mut().zip(&counts) {
        let n = n as f64;
        c.needle_full_res /= n;
        c.needle_tokens_kept_fraction /= n;
        c.any_token_survives /= n;
        c.mean_n_h /= n;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleAggregate {
    pub cells: usize,
    pub runs: usize,
    pub any_token_survives_rate: f64,
    pub mean_tokens_kept_fraction: f64,
    /// Full-resolution rate over runs where at least one frame kept full resolution.
    pub full_res_rate_when_selected: Option<f64>,
    pub full_res_rate: f64,
    pub runs_with_full_res_budget: usize,
}

pub fn aggregate(outcomes: &[NeedleOutcome]) -> NeedleAggregate {
    let runs = outcomes.len().max(1) as f64;
    let rate =
        |f: &dyn Fn(&NeedleOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / runs;
    let selected: Vec<&NeedleOutcome> = outcomes.iter().filter(|o| o.n_h >= 1).collect();
    NeedleAggregate {
        cells: summarize_cells(outcomes).len(),
        runs: outcomes.len(),
        any_token_survives_rate: rate(&|o| o.any_token_survives),
        mean_tokens_kept_fraction: outcomes
            .iter()
            .map(|o| o.needle_tokens_kept_fraction)
            .sum::<f64>()
            / runs,
        full_res_rate_when_selected: (!selected.is_empty()).then(|| {
            selected.iter().filter(|o| o.needle_full_res).count() as f64 / selected.len() as f64
        }),
        full_res_rate: rate(&|o| o.needle_full_res),
        runs_with_full_res_budget: selected.len(),
    }
}
