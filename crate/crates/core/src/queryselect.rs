//! Stage 2: query-guided choice of which frames keep full resolution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adaptive_avg_pool, AdapterSpec, FeatureVector, TokenGrid};
use crate::temporal::FrameFeatureSequence;

/// Text-query embedding, `L_q` rows of dimension `D_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    rows: Vec<FeatureVector>,
}

impl QueryEmbedding {
    pub fn new(rows: Vec<FeatureVector>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidConfig(
                "query must have at least one row".into(),
            ));
        };
        let dim = first.len();
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch(dim, r.len()));
        }
        Ok(Self { rows })
    }

    /// Builds from a row-major `l_q x d_q` buffer.
    pub fn from_flat(l_q: usize, d_q: usize, data: &[f32]) -> Result<Self> {
        if l_q == 0 || d_q == 0 || data.len() != l_q * d_q {
            return Err(Error::InvalidConfig(format!(
                "query buffer of {} values does not match {l_q}x{d_q}",
                data.len()
            )));
        }
        let rows = data
            .chunks_exact(d_q)
            .map(|c| FeatureVector::new(c.to_vec()))
            .collect::<Result<_>>()?;
        Self::new(rows)
    }

    pub fn rows(&self) -> &[FeatureVector] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionLevel {
    Full,
    Pooled,
}

impl ResolutionLevel {
    pub fn code(self) -> u8 {
        match self {
            Self::Full => 0,
            Self::Pooled => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Full),
            1 => Some(Self::Pooled),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    pub l_max: usize,
    pub l_q: usize,
    pub n_h: usize,
    /// Positions (into the scored sequence) of frames kept at full resolution, ascending.
    pub full_res_indices: Vec<usize>,
    /// Per-frame scores; empty when scoring was skipped.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedResolutionSequence {
    pub frames: Vec<TokenGrid>,
    pub levels: Vec<ResolutionLevel>,
    pub original_indices: Vec<usize>,
    pub timesteps: Vec<f64>,
}

impl MixedResolutionSequence {
    pub fn token_count(&self) -> usize {
        self.frames.iter().map(TokenGrid::num_tokens).sum()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Budget inputs for [`select_and_pool`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub l_max: usize,
    pub high: (usize, usize),
    pub low: (usize, usize),
    /// Lower bound on the number of full-resolution frames once over budget.
    pub min_full_res_frames: usize,
}

/// Number of frames that can stay at full resolution:
/// `min(t, floor(max(0, (l_max - l_q - t*hw_low) / (hw_high - hw_low))))`.
pub fn compute_nh(
    t: usize,
    l_max: usize,
    l_q: usize,
    hw_high: usize,
    hw_low: usize,
) -> Result<usize> {
    if hw_low == 0 || hw_high <= hw_low {
        return Err(Error::InvalidConfig(format!(
            "need tokens_high > tokens_low > 0, got {hw_high} and {hw_low}"
        )));
    }
    if l_max == 0 {
        return Err(Error::InvalidConfig(
            "context length must be positive".into(),
        ));
    }
    let numerator = l_max as i128 - l_q as i128 - (t as i128) * (hw_low as i128);
    if numerator <= 0 {
        return Ok(0);
    }
    let n = numerator / (hw_high - hw_low) as i128;
    Ok((n as usize).min(t))
}

/// Mean over all (token, query row) pairs of `<adapter(token), row>`.
pub fn frame_query_scores(
    frames: &[TokenGrid],
    query: &QueryEmbedding,
    adapter: &AdapterSpec,
) -> Result<Vec<f64>> {
    let d_q = query.dim();
    // sum_l q_l, so that sum_{t,l} <F(t), q_l> = <sum_t F(t), sum_l q_l>
    let mut query_sum = vec![0f64; d_q];
    for row in query.rows() {
        for (a, &x) in query_sum.iter_mut().zip(row.as_slice()) {
            *a += f64::from(x);
        }
    }
    frames
        .par_iter()
        .map(|frame| {
            let out_dim = adapter.output_dim(frame.dim())?;
            if out_dim != d_q {
                return Err(Error::AdapterShape(format!(
                    "adapted tokens have dim {out_dim}, query has dim {d_q}"
                )));
            }
            let mut token_sum = vec![0f64; d_q];
            for token in frame.tokens() {
                let mapped = match adapter {
                    AdapterSpec::Identity => None,
                    _ => Some(adapter.apply_token(token)?),
                };
                let mapped = mapped.as_deref().unwrap_or(token);
                for (a, &x) in token_sum.iter_mut().zip(mapped) {
                    *a += f64::from(x);
                }
            }
            let total: f64 = token_sum.iter().zip(&query_sum).map(|(a, b)| a * b).sum();
            Ok(total / (frame.num_tokens() * query.len()) as f64)
        })
        .collect()
}

/// Positions of the `n` highest scores, ties toward the earlier frame, returned ascending.
pub fn top_n_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(n).collect();
    top.sort_unstable();
    top
}

/// Keeps the top-scoring frames at full resolution and pools the rest.
///
/// `original_indices` labels each frame of `seq` with its index in the source video.
pub fn select_and_pool(
    seq: &FrameFeatureSequence,
    original_indices: &[usize],
    query: &QueryEmbedding,
    adapter: &AdapterSpec,
    params: SelectionParams,
) -> Result<(MixedResolutionSequence, BudgetPlan)> {
    if original_indices.len() != seq.len() {
        return Err(Error::InvalidConfig(format!(
            "{} original indices for {} frames",
            original_indices.len(),
            seq.len()
        )));
    }
    let (h, w, _) = seq.grid_shape();
    if (h, w) != params.high {
        return Err(Error::InvalidConfig(format!(
            "frames are {h}x{w}, expected full resolution {}x{}",
            params.high.0, params.high.1
        )));
    }
    let hw_high = params.high.0 * params.high.1;
    let hw_low = params.low.0 * params.low.1;
    let t = seq.len();
    let l_q = query.len();

    let (n_h, full_res_indices, scores) = if t * hw_high + l_q <= params.l_max {
        (t, (0..t).collect(), Vec::new())
    } else {
        let n_h = compute_nh(t, params.l_max, l_q, hw_high, hw_low)?
            .max(params.min_full_res_frames.min(t));
        if n_h == 0 {
            (0, Vec::new(), Vec::new())
        } else {
            let scores = frame_query_scores(seq.frames(), query, adapter)?;
            (n_h, top_n_indices(&scores, n_h), scores)
        }
    };

    let mut is_full = vec![false; t];
    for &i in &full_res_indices {
        is_full[i] = true;
    }
    let frames = seq
        .frames()
        .par_iter()
        .zip(is_full.par_iter())
        .map(|(f, &full)| {
            if full {
                Ok(f.clone())
            } else {
                adaptive_avg_pool(f, params.low.0, params.low.1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let levels = is_full
        .iter()
        .map(|&full| {
            if full {
                ResolutionLevel::Full
            } else {
                ResolutionLevel::Pooled
            }
        })
        .collect();

    Ok((
        MixedResolutionSequence {
            frames,
            levels,
            original_indices: original_indices.to_vec(),
            timesteps: seq.timesteps().to_vec(),
        },
        BudgetPlan {
            l_max: params.l_max,
            l_q,
            n_h,
            full_res_indices,
            scores,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(l_max: usize) -> SelectionParams {
        SelectionParams {
            l_max,
            high: (12, 12),
            low: (8, 8),
            min_full_res_frames: 0,
        }
    }

    fn query(rows: &[&[f32]]) -> QueryEmbedding {
        QueryEmbedding::new(
            rows.iter()
                .map(|r| FeatureVector::new(r.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn nh_examples() {
        assert_eq!(compute_nh(100, 8192, 100, 144, 64).unwrap(), 21);
        assert_eq!(compute_nh(200, 8192, 100, 144, 64).unwrap(), 0);
        assert_eq!(compute_nh(40, 8192, 92, 144, 64).unwrap(), 40);
    }

    #[test]
    fn nh_rejects_bad_resolutions() {
        assert!(matches!(
            compute_nh(10, 8192, 0, 64, 64),
            Err(Error::InvalidConfig(_))
        ));
        assert!(compute_nh(10, 8192, 0, 64, 144).is_err());
        assert!(compute_nh(10, 0, 0, 144, 64).is_err());
    }

    #[test]
    fn score_examples() {
        let q = [1.0f32, 2.0, 2.0];
        let frame = TokenGrid::filled(2, 2, &q).unwrap();
        let s = frame_query_scores(&[frame], &query(&[&q]), &AdapterSpec::Identity).unwrap();
        assert!((s[0] - 9.0).abs() < 1e-12);

        let frame = TokenGrid::filled(2, 2, &[1.0, 0.0, 0.0]).unwrap();
        let s = frame_query_scores(
            &[frame],
            &query(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 3.0]]),
            &AdapterSpec::Identity,
        )
        .unwrap();
        assert_eq!(s[0], 0.0);

        let frame = TokenGrid::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s =
            frame_query_scores(&[frame], &query(&[&[2.0, 2.0]]), &AdapterSpec::Identity).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn score_dim_mismatch() {
        let frame = TokenGrid::filled(1, 1, &[1.0, 0.0, 0.0]).unwrap();
        let r = frame_query_scores(&[frame], &query(&[&[1.0, 0.0]]), &AdapterSpec::Identity);
        assert!(matches!(r, Err(Error::AdapterShape(_))));
    }

    #[test]
    fn top_n_breaks_ties_early() {
        assert_eq!(top_n_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_n_indices(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_n_indices(&[5.0, 1.0, 9.0], 0), Vec::<usize>::new());
    }

    fn video(t: usize) -> FrameFeatureSequence {
        let frames = (0..t)
            .map(|i| TokenGrid::filled(12, 12, &[1.0, (i % 7) as f32 * 0.1]).unwrap())
            .collect();
        FrameFeatureSequence::at_one_fps(frames).unwrap()
    }

    #[test]
    fn under_budget_skips_scoring() {
        let seq = video(10);
        let q = QueryEmbedding::from_flat(50, 2, &vec![1.0; 100]).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let (mixed, plan) =
            select_and_pool(&seq, &idx, &q, &AdapterSpec::Identity, params(8192)).unwrap();
        assert!(plan.scores.is_empty());
        assert_eq!(plan.n_h, 10);
        assert_eq!(mixed.token_count(), 1440);
        assert!(mixed.levels.iter().all(|&l| l == ResolutionLevel::Full));
    }

    #[test]
    fn zero_nh_pools_everything() {
        let seq = video(200);
        let q = QueryEmbedding::from_flat(100, 2, &vec![1.0; 200]).unwrap();
        let idx: Vec<usize> = (0..200).collect();
        let (mixed, plan) =
            select_and_pool(&seq, &idx, &q, &AdapterSpec::Identity, params(8192)).unwrap();
        assert_eq!(plan.n_h, 0);
        assert!(plan.scores.is_empty());
        assert!(plan.full_res_indices.is_empty());
        assert_eq!(mixed.token_count(), 200 * 64);
    }

    #[test]
    fn min_full_res_forces_selection() {
        let seq = video(200);
        let q = QueryEmbedding::from_flat(100, 2, &vec![1.0; 200]).unwrap();
        let idx: Vec<usize> = (0..200).collect();
        let mut p = params(8192);
        p.min_full_res_frames = 3;
        let (mixed, plan) = select_and_pool(&seq, &idx, &q, &AdapterSpec::Identity, p).unwrap();
        assert_eq!(plan.n_h, 3);
        assert_eq!(plan.scores.len(), 200);
        assert_eq!(mixed.token_count(), 3 * 144 + 197 * 64);
    }

    #[test]
    fn rejects_low_resolution_input() {
        let frames = vec![TokenGrid::filled(8, 8, &[1.0]).unwrap()];
        let seq = FrameFeatureSequence::at_one_fps(frames).unwrap();
        let q = QueryEmbedding::from_flat(1, 1, &[1.0]).unwrap();
        assert!(select_and_pool(&seq, &[0], &q, &AdapterSpec::Identity, params(10)).is_err());
    }
}
