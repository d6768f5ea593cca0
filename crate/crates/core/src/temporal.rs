//! Stage 1: windowed redundancy removal over whole frames.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, frame_summary, FeatureVector, TokenGrid};

/// A video as an ordered list of equally shaped token grids with timestamps in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    frames: Vec<TokenGrid>,
    timesteps: Vec<f64>,
    summaries: Option<Vec<FeatureVector>>,
}

impl FrameFeatureSequence {
    pub fn new(frames: Vec<TokenGrid>, timesteps: Vec<f64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyVideo);
        }
        if frames.len() != timesteps.len() {
            return Err(Error::InvalidGrid(format!(
                "{} frames but {} timesteps",
                frames.len(),
                timesteps.len()
            )));
        }
        let shape = frames[0].shape();
        if let Some(i) = frames.iter().position(|f| f.shape() != shape) {
            return Err(Error::InvalidGrid(format!(
                "frame {i} has shape {:?}, expected {shape:?}",
                frames[i].shape()
            )));
        }
        if timesteps.iter().any(|t| !t.is_finite()) || timesteps.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidGrid(
                "timesteps must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self {
            frames,
            timesteps,
            summaries: None,
        })
    }

    /// Frames sampled at 1 fps: frame `i` sits at `i` seconds.
    pub fn at_one_fps(frames: Vec<TokenGrid>) -> Result<Self> {
        let timesteps = (0..frames.len()).map(|i| i as f64).collect();
        Self::new(frames, timesteps)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[TokenGrid] {
        &self.frames
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    /// `(height, width, dim)` shared by every frame.
    pub fn grid_shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }

    pub fn into_parts(self) -> (Vec<TokenGrid>, Vec<f64>) {
        (self.frames, self.timesteps)
    }

    /// Precomputes and caches per-frame summaries.
    pub fn with_summaries(mut self) -> Result<Self> {
        let summaries = self.compute_summaries()?;
        self.summaries = Some(summaries);
        Ok(self)
    }

    pub fn summaries(&self) -> Result<Vec<FeatureVector>> {
        match &self.summaries {
            Some(s) => Ok(s.clone()),
            None => self.compute_summaries(),
        }
    }

    fn compute_summaries(&self) -> Result<Vec<FeatureVector>> {
        self.frames.par_iter().map(frame_summary).collect()
    }

    /// Subsequence at the given original indices, keeping their timesteps.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let frames = indices.iter().map(|&i| self.frames[i].clone()).collect();
        let timesteps = indices.iter().map(|&i| self.timesteps[i]).collect();
        let mut out = Self::new(frames, timesteps)?;
        out.summaries = self
            .summaries
            .as_ref()
            .map(|s| indices.iter().map(|&i| s[i].clone()).collect());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalReductionResult {
    pub kept_indices: Vec<usize>,
    pub per_frame_avg_sim: Vec<f64>,
    pub windows: Vec<(usize, usize)>,
}

/// Consecutive `[start, end)` windows of length `j`; the last one may be shorter.
pub fn partition_windows(n_frames: usize, j: usize) -> Vec<(usize, usize)> {
    let j = j.max(1);
    (0..n_frames)
        .step_by(j)
        .map(|start| (start, (start + j).min(n_frames)))
        .collect()
}

/// Mean cosine similarity of each frame to every other frame in the window.
/// A single-frame window yields `[0.0]`.
pub fn window_avg_similarity<V: AsRef<[f32]>>(summaries: &[V]) -> Result<Vec<f64>> {
    let n = summaries.len();
    if n <= 1 {
        return Ok(vec![0.0; n]);
    }
    let mut sums = vec![0f64; n];
    for a in 0..n {
        for b in a + 1..n {
            let s = cosine_similarity(summaries[a].as_ref(), summaries[b].as_ref())?;
            sums[a] += s;
            sums[b] += s;
        }
    }
    let denom = (n - 1) as f64;
    Ok(sums.into_iter().map(|s| s / denom).collect())
}

/// Index of the minimum value, earliest on ties.
pub(crate) fn argmin_earliest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Drops frames whose in-window average similarity exceeds `tau_t`.
/// The least similar frame of each window always survives.
pub fn temporal_reduce(
    seq: &FrameFeatureSequence,
    j: usize,
    tau_t: f64,
) -> Result<TemporalReductionResult> {
    if j == 0 {
        return Err(Error::InvalidConfig(
            "temporal window j must be >= 1".into(),
        ));
    }
    if !(tau_t > 0.0 && tau_t <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tau_t must be in (0, 1], got {tau_t}"
        )));
    }
    let summaries = seq.summaries()?;
    let windows = partition_windows(seq.len(), j);
    let per_window: Vec<(Vec<f64>, Vec<usize>)> = windows
        .par_iter()
        .map(|&(start, end)| {
            let sims = window_avg_similarity(&summaries[start..end])?;
            let keep_min = argmin_earliest(&sims);
            let kept = sims
                .iter()
                .enumerate()
                .filter(|&(i, &s)| i == keep_min || s <= tau_t)
                .map(|(i, _)| start + i)
                .collect();
            Ok((sims, kept))
        })
        .collect::<Result<_>>()?;

    let mut per_frame_avg_sim = Vec::with_capacity(seq.len());
    let mut kept_indices = Vec::new();
    for (sims, kept) in per_window {
        per_frame_avg_sim.extend(sims);
        kept_indices.extend(kept);
    }
    Ok(TemporalReductionResult {
        kept_indices,
        per_frame_avg_sim,
        windows,
    })
}
