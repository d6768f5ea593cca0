//! Three-stage compression under a hard context budget.
//!
//! Order is fixed: temporal reduction, query-guided selection, spatial token
//! compression. If the visual tokens still do not fit after STC, the budget is
//! enforced by tightening the STC threshold and then by uniform subsampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpe::{apply_fpe, FpeConfig};
use crate::numerics::{adaptive_avg_pool, AdapterSpec, FeatureVector, TokenGrid};
use crate::queryselect::{
    select_and_pool, BudgetPlan, MixedResolutionSequence, QueryEmbedding, ResolutionLevel,
    SelectionParams,
};
use crate::stc::{stc_pass, unpruned_pass, AnchorStrategy, FrameMeta, PrunedFrame, StcResult};
use crate::temporal::{temporal_reduce, FrameFeatureSequence};

/// Lowest threshold reached by the tightening loop before subsampling.
pub const THETA_FLOOR: f64 = 0.5;
pub const THETA_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageToggles {
    pub temporal: bool,
    pub query: bool,
    pub stc: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            temporal: true,
            query: true,
            stc: true,
        }
    }
}

impl StageToggles {
    pub fn any(&self) -> bool {
        self.temporal || self.query || self.stc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    pub l_max: usize,
    pub tokens_high: (usize, usize),
    pub tokens_low: (usize, usize),
    pub j: usize,
    pub k: usize,
    pub theta: f64,
    pub tau_t: f64,
    pub anchor: AnchorStrategy,
    pub adapter: AdapterSpec,
    pub fpe: FpeConfig,
    pub min_full_res_frames: usize,
    pub stages: StageToggles,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            l_max: 8192,
            tokens_high: (12, 12),
            tokens_low: (8, 8),
            j: 8,
            k: 8,
            theta: 0.8,
            tau_t: 0.85,
            anchor: AnchorStrategy::First,
            adapter: AdapterSpec::Identity,
            fpe: FpeConfig::default(),
            min_full_res_frames: 0,
            stages: StageToggles::default(),
        }
    }
}

impl CompressionConfig {
    pub fn hw_high(&self) -> usize {
        self.tokens_high.0 * self.tokens_high.1
    }

    pub fn hw_low(&self) -> usize {
        self.tokens_low.0 * self.tokens_low.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.l_max == 0 {
            return bad("context length must be positive".into());
        }
        let (hh, wh) = self.tokens_high;
        let (hl, wl) = self.tokens_low;
        if hl == 0 || wl == 0 || hl > hh || wl > wh || self.hw_high() <= self.hw_low() {
            return bad(format!(
                "tokens-low {hl}x{wl} must be a strictly smaller grid than tokens-high {hh}x{wh}"
            ));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must be in (0, 1), got {}", self.theta));
        }
        if !(self.tau_t > 0.0 && self.tau_t <= 1.0) {
            return bad(format!("tau-t must be in (0, 1], got {}", self.tau_t));
        }
        if self.j == 0 {
            return bad("window-j must be >= 1".into());
        }
        if self.k == 0 {
            return bad("window-k must be >= 1".into());
        }
        self.fpe.validate()
    }

    fn selection_params(&self) -> SelectionParams {
        SelectionParams {
            l_max: self.l_max,
            high: self.tokens_high,
            low: self.tokens_low,
            min_full_res_frames: self.min_full_res_frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedToken {
    pub frame_original_index: usize,
    pub timestep: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub level: ResolutionLevel,
    pub vector: FeatureVector,
}

/// Flattened visual tokens in (timestep, row-major grid) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompressedTokenSequence {
    pub tokens: Vec<CompressedToken>,
}

impl CompressedTokenSequence {
    pub fn total_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.tokens.first().map(|t| t.vector.len())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub frames_in: usize,
    pub frames_after_temporal: usize,
    pub query_tokens: usize,
    pub n_h: usize,
    /// Original indices of frames emitted at full resolution.
    pub full_res_frames: Vec<usize>,
    pub tokens_in: usize,
    pub tokens_after_temporal: usize,
    pub tokens_after_query: usize,
    pub tokens_after_stc: usize,
    pub tokens_final: usize,
    pub stc_applied: bool,
    /// STC threshold in effect at the end; `None` when STC did not run.
    pub theta_effective: Option<f64>,
    pub fallback_used: bool,
    pub frames_kept_rate: f64,
    pub temporal_reduction_rate: f64,
    pub query_reduction_rate: f64,
    pub stc_reduction_rate: f64,
    pub total_reduction_rate: f64,
}

fn reduction(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        1.0 - after as f64 / before as f64
    }
}

/// Result of [`enforce_budget`].
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetOutcome {
    pub result: StcResult,
    pub theta_effective: Option<f64>,
    pub fallback_used: bool,
}

/// Brings `result` down to at most `budget` tokens.
///
/// First lowers theta in steps of [`THETA_STEP`] down to [`THETA_FLOOR`] and
/// re-runs STC (only when `theta` is `Some`). If that is not enough, every
/// anchor token is kept and the remaining non-anchor tokens are subsampled
/// uniformly by rank. When the anchors alone exceed the budget, non-anchor
/// tokens are dropped and each anchor keeps an even share, at least one token.
pub fn enforce_budget(
    frames: &[TokenGrid],
    metas: &[FrameMeta],
    result: StcResult,
    budget: usize,
    k: usize,
    theta: Option<f64>,
    anchor: AnchorStrategy,
) -> Result<BudgetOutcome> {
    if result.tokens_after <= budget {
        return Ok(BudgetOutcome {
            result,
            theta_effective: theta,
            fallback_used: false,
        });
    }
    let windows = result.windows.len();
    if budget < windows {
        return Err(Error::BudgetInfeasible {
            budget,
            required: windows,
        });
    }
    let mut result = result;
    let mut theta_effective = theta;
    if let Some(theta0) = theta {
        let mut step = 1;
        loop {
            let next = theta0 - THETA_STEP * step as f64;
            if next < THETA_FLOOR - 1e-9 {
                break;
            }
            result = stc_pass(frames, metas, k, next, anchor)?;
            theta_effective = Some(next);
            if result.tokens_after <= budget {
                return Ok(BudgetOutcome {
                    result,
                    theta_effective,
                    fallback_used: true,
                });
            }
            step += 1;
        }
    }
    subsample_to_budget(&mut result, budget);
    Ok(BudgetOutcome {
        result,
        theta_effective,
        fallback_used: true,
    })
}

/// Ranks `floor(i * total / keep)` for `i in 0..keep`.
pub fn uniform_ranks(total: usize, keep: usize) -> Vec<usize> {
    let keep = keep.min(total);
    (0..keep).map(|i| i * total / keep).collect()
}

fn subsample_to_budget(result: &mut StcResult, budget: usize) {
    let anchor_tokens = result.anchor_tokens();
    if anchor_tokens <= budget {
        let total: usize = result
            .frames
            .iter()
            .filter(|f| !f.is_anchor)
            .map(PrunedFrame::token_count)
            .sum();
        let keep = uniform_ranks(total, budget - anchor_tokens);
        let mut cursor = 0;
        let mut offset = 0;
        for frame in result.frames.iter_mut().filter(|f| !f.is_anchor) {
            let n = frame.token_count();
            let start = cursor;
            while cursor < keep.len() && keep[cursor] < offset + n {
                cursor += 1;
            }
            let local: Vec<usize> = keep[start..cursor].iter().map(|r| r - offset).collect();
            frame.retain_ranks(&local);
            offset += n;
        }
    } else {
        let anchors = result.frames.iter().filter(|f| f.is_anchor).count();
        let sizes: Vec<usize> = result
            .frames
            .iter()
            .filter(|f| f.is_anchor)
            .map(PrunedFrame::token_count)
            .collect();
        let quotas = share_budget(&sizes, budget);
        debug_assert_eq!(quotas.len(), anchors);
        let mut quota = quotas.into_iter();
        for frame in &mut result.frames {
            if frame.is_anchor {
                let q = quota.next().unwrap_or(0);
                frame.retain_ranks(&uniform_ranks(frame.token_count(), q));
            } else {
                frame.retain_ranks(&[]);
            }
        }
    }
    result.recount();
}

/// Splits `budget` as evenly as possible over groups capped at `sizes`,
/// earlier groups taking the remainder first.
fn share_budget(sizes: &[usize], budget: usize) -> Vec<usize> {
    let mut quotas = vec![0usize; sizes.len()];
    let mut left = budget.min(sizes.iter().sum());
    while left > 0 {
        let open: Vec<usize> = (0..sizes.len()).filter(|&i| quotas[i] < sizes[i]).collect();
        if open.is_empty() {
            break;
        }
        let share = (left / open.len()).max(1);
        for i in open {
            if left == 0 {
                break;
            }
            let add = share.min(sizes[i] - quotas[i]).min(left);
            quotas[i] += add;
            left -= add;
        }
    }
    quotas
}

/// Emits tokens in (timestep, row-major grid) order.
pub fn flatten(frames: &[PrunedFrame]) -> CompressedTokenSequence {
    let mut order: Vec<&PrunedFrame> = frames.iter().collect();
    order.sort_by(|a, b| {
        a.timestep
            .total_cmp(&b.timestep)
            .then(a.original_index.cmp(&b.original_index))
    });
    let tokens = order
        .into_iter()
        .flat_map(|f| {
            f.kept_positions
                .iter()
                .zip(&f.kept_vectors)
                .map(move |(&(h, w), v)| CompressedToken {
                    frame_original_index: f.original_index,
                    timestep: f.timestep,
                    grid_h: h,
                    grid_w: w,
                    level: f.level,
                    vector: v.clone(),
                })
        })
        .collect();
    CompressedTokenSequence { tokens }
}

fn whole_frames(mixed: &MixedResolutionSequence) -> Result<Vec<PrunedFrame>> {
    mixed
        .frames
        .iter()
        .enumerate()
        .map(|(i, g)| {
            PrunedFrame::whole(
                g,
                FrameMeta {
                    original_index: mixed.original_indices[i],
                    timestep: mixed.timesteps[i],
                    level: mixed.levels[i],
                },
                false,
            )
        })
        .collect()
}

fn pool_all(
    seq: &FrameFeatureSequence,
    original_indices: &[usize],
    low: (usize, usize),
) -> Result<MixedResolutionSequence> {
    let frames = seq
        .frames()
        .iter()
        .map(|f| adaptive_avg_pool(f, low.0, low.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixedResolutionSequence {
        levels: vec![ResolutionLevel::Pooled; frames.len()],
        frames,
        original_indices: original_indices.to_vec(),
        timesteps: seq.timesteps().to_vec(),
    })
}

/// Runs every enabled stage and returns the flattened tokens with per-stage stats.
pub fn compress(
    seq: &FrameFeatureSequence,
    query: &QueryEmbedding,
    cfg: &CompressionConfig,
) -> Result<(CompressedTokenSequence, CompressionStats)> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(Error::EmptyVideo);
    }
    let (h, w, _) = seq.grid_shape();
    if (h, w) != cfg.tokens_high {
        return Err(Error::InvalidConfig(format!(
            "input frames are {h}x{w} but tokens-high is {}x{}",
            cfg.tokens_high.0, cfg.tokens_high.1
        )));
    }

    let frames_in = seq.len();
    let kept: Vec<usize> = if cfg.stages.temporal {
        temporal_reduce(seq, cfg.j, cfg.tau_t)?.kept_indices
    } else {
        (0..frames_in).collect()
    };
    let reduced = if kept.len() == frames_in {
        seq.clone()
    } else {
        seq.select(&kept)?
    };
    let t = reduced.len();
    let l_q = query.len();
    let tokens_after_temporal = t * cfg.hw_high();
    let over_budget = tokens_after_temporal + l_q > cfg.l_max;

    let mut n_h = t;
    let mut stc_applied = false;
    let mut theta_effective = None;
    let mut fallback_used = false;
    let tokens_after_query;
    let tokens_after_stc;
    let frames_out: Vec<PrunedFrame>;

    if !over_budget || !cfg.stages.any() {
        let mixed = MixedResolutionSequence {
            frames: reduced.frames().to_vec(),
            levels: vec![ResolutionLevel::Full; t],
            original_indices: kept.clone(),
            timesteps: reduced.timesteps().to_vec(),
        };
        tokens_after_query = tokens_after_temporal;
        tokens_after_stc = tokens_after_temporal;
        frames_out = whole_frames(&mixed)?;
    } else {
        let mixed = if cfg.stages.query {
            let (mixed, plan): (_, BudgetPlan) =
                select_and_pool(&reduced, &kept, query, &cfg.adapter, cfg.selection_params())?;
            n_h = plan.n_h;
            mixed
        } else {
            n_h = 0;
            pool_all(&reduced, &kept, cfg.tokens_low)?
        };
        tokens_after_query = mixed.token_count();
        let budget = cfg.l_max.saturating_sub(l_q);

        if tokens_after_query <= budget {
            tokens_after_stc = tokens_after_query;
            frames_out = whole_frames(&mixed)?;
        } else {
            // Frames kept at full resolution by the query stage are never pruned.
            let mut fixed = Vec::new();
            let mut pooled = Vec::new();
            let mut metas = Vec::new();
            for i in 0..mixed.len() {
                let meta = FrameMeta {
                    original_index: mixed.original_indices[i],
                    timestep: mixed.timesteps[i],
                    level: mixed.levels[i],
                };
                match mixed.levels[i] {
                    ResolutionLevel::Full => {
                        fixed.push(PrunedFrame::whole(&mixed.frames[i], meta, false)?)
                    }
                    ResolutionLevel::Pooled => {
                        pooled.push(mixed.frames[i].clone());
                        metas.push(meta);
                    }
                }
            }
            let fixed_tokens: usize = fixed.iter().map(PrunedFrame::token_count).sum();
            let pooled_budget =
                budget
                    .checked_sub(fixed_tokens)
                    .ok_or(Error::BudgetInfeasible {
                        budget,
                        required: fixed_tokens,
                    })?;
            if pooled.is_empty() {
                return Err(Error::BudgetInfeasible {
                    budget,
                    required: fixed_tokens,
                });
            }
            let theta = cfg.stages.stc.then_some(cfg.theta);
            let first = match theta {
                Some(theta) => stc_pass(&pooled, &metas, cfg.k, theta, cfg.anchor)?,
                None => unpruned_pass(&pooled, &metas, cfg.k, cfg.anchor)?,
            };
            stc_applied = theta.is_some();
            tokens_after_stc = fixed_tokens + first.tokens_after;
            let outcome = enforce_budget(
                &pooled,
                &metas,
                first,
                pooled_budget,
                cfg.k,
                theta,
                cfg.anchor,
            )?;
            theta_effective = outcome.theta_effective;
            fallback_used = outcome.fallback_used;
            let mut all = fixed;
            all.extend(outcome.result.frames);
            frames_out = all;
        }
    }

    let full_res_frames: Vec<usize> = {
        let mut v: Vec<usize> = frames_out
            .iter()
            .filter(|f| f.level == ResolutionLevel::Full)
            .map(|f| f.original_index)
            .collect();
        v.sort_unstable();
        v
    };
    let tokens = flatten(&frames_out);
    let tokens = apply_fpe(tokens, &cfg.fpe)?;
    let tokens_in = frames_in * cfg.hw_high();
    let tokens_final = tokens.total_count();
    let stats = CompressionStats {
        frames_in,
        frames_after_temporal: t,
        query_tokens: l_q,
        n_h,
        full_res_frames,
        tokens_in,
        tokens_after_temporal,
        tokens_after_query,
        tokens_after_stc,
        tokens_final,
        stc_applied,
        theta_effective,
        fallback_used,
        frames_kept_rate: t as f64 / frames_in as f64,
        temporal_reduction_rate: reduction(frames_in, t),
        query_reduction_rate: reduction(tokens_after_temporal, tokens_after_query),
        stc_reduction_rate: reduction(tokens_after_query, tokens_after_stc),
        total_reduction_rate: reduction(tokens_in, tokens_final),
    };
    Ok((tokens, stats))
}
