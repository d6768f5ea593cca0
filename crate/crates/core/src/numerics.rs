//! Dense kernels shared by every compression stage.
//!
//! Values are stored as `f32`; every reduction (dot products, norms, means)
//! accumulates in `f64` and rounds once on output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single token or summary vector. Entries are finite and the length is nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidGrid("feature vector must be nonempty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(
                "feature vector has non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f32]> for FeatureVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// One frame of `height x width` tokens, each of length `dim`, stored row-major `[h][w][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidGrid(format!(
                "grid dimensions must be positive, got {height}x{width}x{dim}"
            )));
        }
        if data.len() != height * width * dim {
            return Err(Error::InvalidGrid(format!(
                "expected {} values for {height}x{width}x{dim}, got {}",
                height * width * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("grid has non-finite entries".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    /// Grid where every token equals `token`.
    pub fn filled(height: usize, width: usize, token: &[f32]) -> Result<Self> {
        let data = token
            .iter()
            .copied()
            .cycle()
            .take(height * width * token.len())
            .collect();
        Self::new(height, width, token.len(), data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * dim);
        for h in 0..height {
            for w in 0..width {
                for d in 0..dim {
                    data.push(f(h, w, d));
                }
            }
        }
        Self::new(height, width, dim, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of spatial tokens, `height * width`.
    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn token(&self, h: usize, w: usize) -> &[f32] {
        let start = (h * self.width + w) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Iterates tokens in row-major order.
    pub fn tokens(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Visual-to-query-space adapter. Stands in for a trained projector.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum AdapterSpec {
    #[default]
    Identity,
    /// `weight` is row-major `out_dim x in_dim`.
    Linear {
        out_dim: usize,
        in_dim: usize,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    },
}

impl AdapterSpec {
    pub fn linear(
        out_dim: usize,
        in_dim: usize,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 || weight.len() != out_dim * in_dim {
            return Err(Error::AdapterShape(format!(
                "weight has {} entries, expected {out_dim}x{in_dim}",
                weight.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_dim {
                return Err(Error::AdapterShape(format!(
                    "bias has {} entries, expected {out_dim}",
                    b.len()
                )));
            }
        }
        Ok(Self::Linear {
            out_dim,
            in_dim,
            weight,
            bias,
        })
    }

    /// Output dimension when applied to tokens of dimension `in_dim`.
    pub fn output_dim(&self, in_dim: usize) -> Result<usize> {
        match self {
            Self::Identity => Ok(in_dim),
            Self::Linear {
                out_dim, in_dim: d, ..
            } => {
                if *d != in_dim {
                    return Err(Error::AdapterShape(format!(
                        "adapter expects dim {d}, tokens have dim {in_dim}"
                    )));
                }
                Ok(*out_dim)
            }
        }
    }

    /// Maps a single token into the output space.
    pub fn apply_token(&self, token: &[f32]) -> Result<Vec<f32>> {
        match self {
            Self::Identity => Ok(token.to_vec()),
            Self::Linear {
                out_dim,
                in_dim,
                weight,
                bias,
            } => {
                if token.len() != *in_dim {
                    return Err(Error::AdapterShape(format!(
                        "adapter expects dim {in_dim}, token has dim {}",
                        token.len()
                    )));
                }
                Ok((0..*out_dim)
                    .map(|r| {
                        let row = &weight[r * in_dim..(r + 1) * in_dim];
                        let b = bias.as_ref().map_or(0.0, |b| f64::from(b[r]));
                        (dot(row, token) + b) as f32
                    })
                    .collect())
            }
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch(u.len(), v.len()));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Row (or column) range `[start, end)` covered by output bin `bin` when
/// pooling `input` cells down to `output` bins.
pub fn pool_bin(bin: usize, input: usize, output: usize) -> (usize, usize) {
    let start = bin * input / output;
    let end = ((bin + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling over the spatial axes.
pub fn adaptive_avg_pool(grid: &TokenGrid, out_h: usize, out_w: usize) -> Result<TokenGrid> {
    let (in_h, in_w, dim) = grid.shape();
    if out_h == 0 || out_w == 0 || out_h > in_h || out_w > in_w {
        return Err(Error::InvalidPooling {
            in_h,
            in_w,
            out_h,
            out_w,
        });
    }
    if out_h == in_h && out_w == in_w {
        return Ok(grid.clone());
    }
    let mut data = Vec::with_capacity(out_h * out_w * dim);
    let mut acc = vec![0f64; dim];
    for p in 0..out_h {
        let (r0, r1) = pool_bin(p, in_h, out_h);
        for q in 0..out_w {
            let (c0, c1) = pool_bin(q, in_w, out_w);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for r in r0..r1 {
                for c in c0..c1 {
                    for (a, &x) in acc.iter_mut().zip(grid.token(r, c)) {
                        *a += f64::from(x);
                    }
                }
            }
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            data.extend(acc.iter().map(|a| (a / count) as f32));
        }
    }
    TokenGrid::new(out_h, out_w, dim, data)
}

/// Mean of all spatial tokens, L2-normalized.
pub fn frame_summary(grid: &TokenGrid) -> Result<FeatureVector> {
    let mut acc = vec![0f64; grid.dim()];
    for token in grid.tokens() {
        for (a, &x) in acc.iter_mut().zip(token) {
            *a += f64::from(x);
        }
    }
    let n = grid.num_tokens() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let len = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if len == 0.0 || !len.is_finite() {
        return Err(Error::ZeroVector);
    }
    FeatureVector::new(acc.iter().map(|a| (a / len) as f32).collect())
}

pub fn apply_adapter(adapter: &AdapterSpec, grid: &TokenGrid) -> Result<TokenGrid> {
    match adapter {
        AdapterSpec::Identity => Ok(grid.clone()),
        AdapterSpec::Linear { out_dim, .. } => {
            adapter.output_dim(grid.dim())?;
            let mut data = Vec::with_capacity(grid.num_tokens() * out_dim);
            for token in grid.tokens() {
                data.extend(adapter.apply_token(token)?);
            }
            TokenGrid::new(grid.height(), grid.width(), *out_dim, data)
        }
    }
}
