//! Frame keep-rate and STC token-reduction distributions over a corpus.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::adaptive_avg_pool;
use crate::pipeline::{compress, CompressionConfig, CompressionStats};
use crate::queryselect::{QueryEmbedding, ResolutionLevel};
use crate::stc::{stc_pass, AnchorStrategy, FrameMeta};
use crate::synthbench::generator::{gen_video, SynthSpec};
use crate::temporal::temporal_reduce;

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoReduction {
    pub frames_in: usize,
    pub frames_kept: usize,
    pub frames_kept_rate: f64,
    /// Pooled tokens of the temporally reduced video, before STC.
    pub stc_tokens_before: usize,
    pub stc_tokens_after: usize,
    pub tokens_reduced_rate: f64,
    pub pipeline: CompressionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn unit(values: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub videos: usize,
    pub mean_frames_kept: f64,
    pub mean_tokens_reduced: f64,
    pub mean_pipeline_reduction: f64,
    pub mean_tokens_final: f64,
    pub frames_kept_histogram: Histogram,
    pub tokens_reduced_histogram: Histogram,
    pub per_video: Vec<VideoReduction>,
}

/// Query used when running the full pipeline on synthetic videos: one row
/// along the first feature axis.
pub fn probe_query(dim: usize, rows: usize) -> Result<QueryEmbedding> {
    let mut data = vec![0f32; rows * dim];
    for r in 0..rows {
        data[r * dim] = 1.0;
    }
    QueryEmbedding::from_flat(rows, dim, &data)
}

/// Runs temporal reduction and an STC pass over the pooled survivors of one video,
/// plus the full pipeline for end-to-end stats.
pub fn measure_video(spec: &SynthSpec, cfg: &CompressionConfig) -> Result<VideoReduction> {
    let seq = gen_video(spec)?.with_summaries()?;
    let kept = if cfg.stages.temporal {
        temporal_reduce(&seq, cfg.j, cfg.tau_t)?.kept_indices
    } else {
        (0..seq.len()).collect()
    };
    let (lh, lw) = cfg.tokens_low;
    let pooled = kept
        .iter()
        .map(|&i| adaptive_avg_pool(&seq.frames()[i], lh, lw))
        .collect::<Result<Vec<_>>>()?;
    let metas: Vec<FrameMeta> = kept
        .iter()
        .map(|&i| FrameMeta {
            original_index: i,
            timestep: seq.timesteps()[i],
            level: ResolutionLevel::Pooled,
        })
        .collect();
    let stc = stc_pass(&pooled, &metas, cfg.k, cfg.theta, cfg.anchor)?;
    let query = probe_query(spec.dim, 16)?;
    let (_, pipeline) = compress(&seq, &query, cfg)?;
    Ok(VideoReduction {
        frames_in: seq.len(),
        frames_kept: kept.len(),
        frames_kept_rate: kept.len() as f64 / seq.len() as f64,
        stc_tokens_before: stc.tokens_before,
        stc_tokens_after: stc.tokens_after,
        tokens_reduced_rate: 1.0 - stc.tokens_after as f64 / stc.tokens_before as f64,
        pipeline,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn reduction_report(corpus: &[SynthSpec], cfg: &CompressionConfig) -> Result<ReductionReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("corpus must be nonempty".into()));
    }
    let per_video = corpus
        .par_iter()
        .map(|spec| measure_video(spec, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReductionReport {
        videos: per_video.len(),
        mean_frames_kept: mean(per_video.iter().map(|v| v.frames_kept_rate)),
        mean_tokens_reduced: mean(per_video.iter().map(|v| v.tokens_reduced_rate)),
        mean_pipeline_reduction: mean(per_video.iter().map(|v| v.pipeline.total_reduction_rate)),
        mean_tokens_final: mean(per_video.iter().map(|v| v.pipeline.tokens_final as f64)),
        frames_kept_histogram: Histogram::unit(
            per_video.iter().map(|v| v.frames_kept_rate),
            HISTOGRAM_BINS,
        ),
        tokens_reduced_histogram: Histogram::unit(
            per_video.iter().map(|v| v.tokens_reduced_rate),
            HISTOGRAM_BINS,
        ),
        per_video,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorAblationRow {
    pub strategy: AnchorStrategy,
    pub mean_tokens_reduced: f64,
    pub mean_pipeline_reduction: f64,
}

/// Runs the STC measurement once per anchor strategy on the same corpus.
pub fn anchor_ablation(
    corpus: &[SynthSpec],
    cfg: &CompressionConfig,
) -> Result<Vec<AnchorAblationRow>> {
    AnchorStrategy::ALL
        .iter()
        .map(|&strategy| {
            let cfg = CompressionConfig {
                anchor: strategy,
                ..cfg.clone()
            };
            let report = reduction_report(corpus, &cfg)?;
            Ok(AnchorAblationRow {
                strategy,
                mean_tokens_reduced: report.mean_tokens_reduced,
                mean_pipeline_reduction: report.mean_pipeline_reduction,
            })
        })
        .collect()
}

pub fn render_ablation_table(rows: &[AnchorAblationRow]) -> String {
    let mut out = String::from("| anchor | stc token reduction | pipeline reduction |\n");
    out.push_str("|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {:.2}% | {:.2}% |\n",
            r.strategy,
            100.0 * r.mean_tokens_reduced,
            100.0 * r.mean_pipeline_reduction
        ));
    }
    out
}
