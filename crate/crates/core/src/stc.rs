//! Stage 3: spatial token compression against a per-window anchor frame.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, frame_summary, FeatureVector, TokenGrid};
use crate::queryselect::ResolutionLevel;
use crate::temporal::{argmin_earliest, partition_windows};

/// Which frame of a window keeps all of its tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorStrategy {
    #[default]
    First,
    Middle,
    /// Frame least similar to its predecessor.
    HighChange,
}

impl AnchorStrategy {
    pub const ALL: [AnchorStrategy; 3] = [Self::First, Self::Middle, Self::HighChange];
}

impl fmt::Display for AnchorStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::First => "first",
            Self::Middle => "middle",
            Self::HighChange => "high-change",
        })
    }
}

impl FromStr for AnchorStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "middle" => Ok(Self::Middle),
            "high-change" | "high_change" => Ok(Self::HighChange),
            other => Err(Error::InvalidConfig(format!(
                "unknown anchor strategy '{other}' (expected first, middle or high-change)"
            ))),
        }
    }
}

/// Provenance carried alongside a frame through the stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMeta {
    pub original_index: usize,
    pub timestep: f64,
    pub level: ResolutionLevel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedFrame {
    pub original_index: usize,
    pub timestep: f64,
    pub level: ResolutionLevel,
    /// Row-major grid coordinates that survived, without duplicates.
    pub kept_positions: Vec<(usize, usize)>,
    pub kept_vectors: Vec<FeatureVector>,
    pub is_anchor: bool,
}

impl PrunedFrame {
    /// Frame with every token kept.
    pub fn whole(grid: &TokenGrid, meta: FrameMeta, is_anchor: bool) -> Result<Self> {
        let mut kept_positions = Vec::with_capacity(grid.num_tokens());
        let mut kept_vectors = Vec::with_capacity(grid.num_tokens());
        for h in 0..grid.height() {
            for w in 0..grid.width() {
                kept_positions.push((h, w));
                kept_vectors.push(FeatureVector::new(grid.token(h, w).to_vec())?);
            }
        }
        Ok(Self {
            original_index: meta.original_index,
            timestep: meta.timestep,
            level: meta.level,
            kept_positions,
            kept_vectors,
            is_anchor,
        })
    }

    pub fn token_count(&self) -> usize {
        self.kept_positions.len()
    }

    /// Keeps only the entries at the given ascending ranks.
    pub(crate) fn retain_ranks(&mut self, ranks: &[usize]) {
        let mut pos = Vec::with_capacity(ranks.len());
        let mut vecs = Vec::with_capacity(ranks.len());
        for &r in ranks {
            pos.push(self.kept_positions[r]);
            vecs.push(self.kept_vectors[r].clone());
        }
        self.kept_positions = pos;
        self.kept_vectors = vecs;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StcResult {
    pub frames: Vec<PrunedFrame>,
    /// `[start, end)` ranges over `frames`.
    pub windows: Vec<(usize, usize)>,
    pub tokens_before: usize,
    pub tokens_after: usize,
}

impl StcResult {
    pub fn anchor_tokens(&self) -> usize {
        self.frames
            .iter()
            .filter(|f| f.is_anchor)
            .map(PrunedFrame::token_count)
            .sum()
    }

    pub(crate) fn recount(&mut self) {
        self.tokens_after = self.frames.iter().map(PrunedFrame::token_count).sum();
    }
}

pub fn select_anchor(window: &[TokenGrid], strategy: AnchorStrategy) -> Result<usize> {
    if window.is_empty() {
        return Err(Error::InvalidWindow("empty window".into()));
    }
    match strategy {
        AnchorStrategy::First => Ok(0),
        AnchorStrategy::Middle => Ok(window.len() / 2),
        AnchorStrategy::HighChange => {
            if window.len() == 1 {
                return Ok(0);
            }
            let summaries = window
                .iter()
                .map(frame_summary)
                .collect::<Result<Vec<_>>>()?;
            let pred_sims = summaries
                .windows(2)
                .map(|p| cosine_similarity(p[0].as_slice(), p[1].as_slice()))
                .collect::<Result<Vec<_>>>()?;
            // pred_sims[i] belongs to frame i + 1
            Ok(argmin_earliest(&pred_sims) + 1)
        }
    }
}

fn check_window(window: &[TokenGrid], metas: &[FrameMeta], anchor_idx: usize) -> Result<()> {
    if window.is_empty() {
        return Err(Error::InvalidWindow("empty window".into()));
    }
    if window.len() != metas.len() {
        return Err(Error::InvalidWindow(format!(
            "{} frames but {} metadata entries",
            window.len(),
            metas.len()
        )));
    }
    if anchor_idx >= window.len() {
        return Err(Error::InvalidWindow(format!(
            "anchor {anchor_idx} outside window of {}",
            window.len()
        )));
    }
    let shape = window[anchor_idx].shape();
    if window.iter().any(|g| g.shape() != shape) {
        return Err(Error::InvalidWindow(
            "frames in a window differ in shape".into(),
        ));
    }
    Ok(())
}

/// Keeps a non-anchor token iff its cosine similarity to the anchor token at the
/// same position is `<= theta`. Zero-norm pairs are kept.
pub fn stc_prune_window(
    window: &[TokenGrid],
    metas: &[FrameMeta],
    anchor_idx: usize,
    theta: f64,
) -> Result<Vec<PrunedFrame>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "theta must be in (0, 1), got {theta}"
        )));
    }
    prune_window(window, metas, anchor_idx, theta)
}

fn prune_window(
    window: &[TokenGrid],
    metas: &[FrameMeta],
    anchor_idx: usize,
    theta: f64,
) -> Result<Vec<PrunedFrame>> {
    check_window(window, metas, anchor_idx)?;
    let anchor = &window[anchor_idx];
    window
        .iter()
        .zip(metas)
        .enumerate()
        .map(|(i, (grid, &meta))| {
            if i == anchor_idx {
                return PrunedFrame::whole(grid, meta, true);
            }
            let mut kept_positions = Vec::new();
            let mut kept_vectors = Vec::new();
            for h in 0..grid.height() {
                for w in 0..grid.width() {
                    let token = grid.token(h, w);
                    let keep = match cosine_similarity(anchor.token(h, w), token) {
                        Ok(sim) => sim <= theta,
                        Err(Error::ZeroVector) => true,
                        Err(e) => return Err(e),
                    };
                    if keep {
                        kept_positions.push((h, w));
                        kept_vectors.push(FeatureVector::new(token.to_vec())?);
                    }
                }
            }
            Ok(PrunedFrame {
                original_index: meta.original_index,
                timestep: meta.timestep,
                level: meta.level,
                kept_positions,
                kept_vectors,
                is_anchor: false,
            })
        })
        .collect()
}

/// Splits `frames` into windows of `k` and prunes each against its anchor.
pub fn stc_pass(
    frames: &[TokenGrid],
    metas: &[FrameMeta],
    k: usize,
    theta: f64,
    strategy: AnchorStrategy,
) -> Result<StcResult> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "theta must be in (0, 1), got {theta}"
        )));
    }
    run_pass(frames, metas, k, Some(theta), strategy)
}

/// Window and anchor structure of [`stc_pass`] with nothing pruned.
pub fn unpruned_pass(
    frames: &[TokenGrid],
    metas: &[FrameMeta],
    k: usize,
    strategy: AnchorStrategy,
) -> Result<StcResult> {
    run_pass(frames, metas, k, None, strategy)
}

fn run_pass(
    frames: &[TokenGrid],
    metas: &[FrameMeta],
    k: usize,
    theta: Option<f64>,
    strategy: AnchorStrategy,
) -> Result<StcResult> {
    if frames.is_empty() {
        return Err(Error::EmptyVideo);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("window k must be >= 1".into()));
    }
    if frames.len() != metas.len() {
        return Err(Error::InvalidWindow(format!(
            "{} frames but {} metadata entries",
            frames.len(),
            metas.len()
        )));
    }
    let windows = partition_windows(frames.len(), k);
    let pruned: Vec<Vec<PrunedFrame>> = windows
        .par_iter()
        .map(|&(start, end)| {
            let window = &frames[start..end];
            let window_metas = &metas[start..end];
            let anchor = select_anchor(window, strategy)?;
            match theta {
                Some(theta) => prune_window(window, window_metas, anchor, theta),
                None => {
                    check_window(window, window_metas, anchor)?;
                    window
                        .iter()
                        .zip(window_metas)
                        .enumerate()
                        .map(|(i, (g, &m))| PrunedFrame::whole(g, m, i == anchor))
                        .collect()
                }
            }
        })
        .collect::<Result<_>>()?;
    let frames_out: Vec<PrunedFrame> = pruned.into_iter().flatten().collect();
    let tokens_before = frames.iter().map(TokenGrid::num_tokens).sum();
    let mut result = StcResult {
        frames: frames_out,
        windows,
        tokens_before,
        tokens_after: 0,
    };
    result.recount();
    Ok(result)
}
