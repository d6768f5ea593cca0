//! Seeded synthetic feature videos.
//!
//! Every token is `scene_direction + PATTERN_STRENGTH * block_pattern + noise`,
//! with the pattern component kept orthogonal to the scene direction so token
//! norms stay at or above one before noise. Static scenes repeat the same grid;
//! drift scenes rotate their direction and move a subset of pattern blocks
//! every frame.
//!
//! All haystack content lives in the orthogonal complement of one reserved
//! basis direction, which is what needle frames are built from.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::TokenGrid;
use crate::temporal::FrameFeatureSequence;

const PATTERN_STRENGTH: f64 = 3.0;
/// Side of the square token blocks that share one pattern vector.
const BLOCK: usize = 4;
/// Per-frame rotation step of a drift scene's direction.
const DIRECTION_STEP: f64 = 0.6;
/// Per-frame step of a moving pattern block.
const BLOCK_STEP: f64 = 3.0;
/// Range of the fraction of moving blocks in a drift scene.
const MOVING_FRACTION: (f64, f64) = (0.5, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_frames: usize,
    pub n_scenes: usize,
    /// Per-entry Gaussian noise standard deviation.
    pub intra_scene_noise: f64,
    pub drift_scenes_fraction: f64,
    pub dim: usize,
    pub grid: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_frames: 256,
            n_scenes: 8,
            intra_scene_noise: 0.01,
            drift_scenes_fraction: 0.4,
            dim: 32,
            grid: (12, 12),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_frames == 0 || self.n_scenes == 0 {
            return bad("frames and scenes must be positive".into());
        }
        if self.n_scenes > self.n_frames {
            return bad(format!(
                "{} scenes cannot fit in {} frames",
                self.n_scenes, self.n_frames
            ));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if !(self.intra_scene_noise >= 0.0 && self.intra_scene_noise.is_finite()) {
            return bad(format!(
                "noise must be a finite value >= 0, got {}",
                self.intra_scene_noise
            ));
        }
        if !(0.0..=1.0).contains(&self.drift_scenes_fraction) {
            return bad(format!(
                "drift fraction must be in [0, 1], got {}",
                self.drift_scenes_fraction
            ));
        }
        Ok(())
    }
}

/// Seeded orthonormal basis of `R^dim` (Gram-Schmidt on Gaussian draws).
/// The last vector is the reserved needle direction.
pub fn orthonormal_basis(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Unit direction orthogonal to all haystack content of videos generated from `spec`.
pub fn reserved_direction(spec: &SynthSpec) -> Vec<f32> {
    orthonormal_basis(spec.dim, spec.seed)
        .pop()
        .expect("dim >= 2")
        .iter()
        .map(|&x| x as f32)
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn reject(v: &mut [f64], dir: &[f64]) {
    let p = dot(v, dir);
    v.iter_mut().zip(dir).for_each(|(x, y)| *x -= p * y);
}

struct Sampler {
    rng: ChaCha8Rng,
    reserved: Vec<f64>,
}

impl Sampler {
    /// Gaussian vector with the reserved component removed.
    fn gaussian(&mut self, dim: usize, scale: f64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim)
            .map(|_| scale * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        reject(&mut v, &self.reserved);
        v
    }

    fn unit(&mut self, dim: usize) -> Vec<f64> {
        let mut v = self.gaussian(dim, 1.0);
        normalize(&mut v);
        v
    }
}

/// Contiguous scene ranges with seeded cut points.
fn scene_ranges(rng: &mut ChaCha8Rng, n_frames: usize, n_scenes: usize) -> Vec<(usize, usize)> {
    let mut cuts: Vec<usize> = (1..n_frames).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(n_scenes - 1).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(n_frames);
    bounds.windows(2).map(|w| (w[0], w[1])).collect()
}

pub fn gen_video(spec: &SynthSpec) -> Result<FrameFeatureSequence> {
    spec.validate()?;
    let dim = spec.dim;
    let (gh, gw) = spec.grid;
    let basis = orthonormal_basis(dim, spec.seed);
    let scene_dirs = &basis[..dim - 1];
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        reserved: basis[dim - 1].clone(),
    };

    let ranges = scene_ranges(&mut sampler.rng, spec.n_frames, spec.n_scenes);
    let n_drift = (spec.drift_scenes_fraction * spec.n_scenes as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_scenes).collect();
    order.shuffle(&mut sampler.rng);
    let mut drifting = vec![false; spec.n_scenes];
    for &s in order.iter().take(n_drift) {
        drifting[s] = true;
    }

    let blocks_h = gh.div_ceil(BLOCK);
    let blocks_w = gw.div_ceil(BLOCK);
    let n_blocks = blocks_h * blocks_w;
    let mut frames = Vec::with_capacity(spec.n_frames);

    for (s, &(start, end)) in ranges.iter().enumerate() {
        let mut direction = scene_dirs[s % scene_dirs.len()].clone();
        let mut patterns: Vec<Vec<f64>> = (0..n_blocks).map(|_| sampler.unit(dim)).collect();
        // zero-mean patterns keep the frame mean on the scene direction
        let mean: Vec<f64> = (0..dim)
            .map(|d| patterns.iter().map(|p| p[d]).sum::<f64>() / n_blocks as f64)
            .collect();
        for p in &mut patterns {
            p.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
        }
        let moving: Vec<bool> = if drifting[s] {
            let frac = sampler
                .rng
                .random_range(MOVING_FRACTION.0..=MOVING_FRACTION.1);
            (0..n_blocks)
                .map(|_| sampler.rng.random_bool(frac))
                .collect()
        } else {
            vec![false; n_blocks]
        };

        for t in start..end {
            if drifting[s] && t > start {
                let step = sampler.gaussian(dim, DIRECTION_STEP / (dim as f64).sqrt());
                direction.iter_mut().zip(&step).for_each(|(x, y)| *x += y);
                normalize(&mut direction);
                for (b, p) in patterns.iter_mut().enumerate() {
                    if moving[b] {
                        let len = norm(p).max(1e-3);
                        let step = sampler.gaussian(dim, BLOCK_STEP * len / (dim as f64).sqrt());
                        p.iter_mut().zip(&step).for_each(|(x, y)| *x += y);
                        let n = norm(p);
                        if n > 0.0 {
                            p.iter_mut().for_each(|x| *x *= len / n);
                        }
                    }
                }
            }
            let tokens: Vec<Vec<f64>> = patterns
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    reject(&mut q, &direction);
                    direction
                        .iter()
                        .zip(&q)
                        .map(|(d, x)| d + PATTERN_STRENGTH * x)
                        .collect()
                })
                .collect();
            let mut data = Vec::with_capacity(gh * gw * dim);
            for h in 0..gh {
                for w in 0..gw {
                    let base = &tokens[(h / BLOCK) * blocks_w + w / BLOCK];
                    if spec.intra_scene_noise > 0.0 {
                        let noise = sampler.gaussian(dim, spec.intra_scene_noise);
                        data.extend(base.iter().zip(&noise).map(|(b, n)| (b + n) as f32));
                    } else {
                        data.extend(base.iter().map(|&b| b as f32));
                    }
                }
            }
            frames.push(TokenGrid::new(gh, gw, dim, data)?);
        }
    }
    FrameFeatureSequence::at_one_fps(frames)
}

/// The calibrated mixed corpus used for the reduction-rate analyses.
pub fn calibrated_corpus(size: usize, seed: u64) -> Vec<SynthSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let n_frames = rng.random_range(120..=360);
            let scene_len = rng.random_range(48..=120);
            SynthSpec {
                n_frames,
                n_scenes: (n_frames / scene_len).max(1),
                intra_scene_noise: rng.random_range(0.005..=0.03),
                drift_scenes_fraction: rng.random_range(0.2..=0.5),
                dim: 32,
                grid: (12, 12),
                seed: rng.random(),
            }
        })
        .collect()
}

/// Single static scene per video.
pub fn static_corpus(size: usize, seed: u64) -> Vec<SynthSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| SynthSpec {
            n_frames: rng.random_range(64..=256),
            n_scenes: 1,
            intra_scene_noise: 0.01,
            drift_scenes_fraction: 0.0,
            dim: 32,
            grid: (12, 12),
            seed: rng.random(),
        })
        .collect()
}

/// Every frame is its own scene with an orthogonal direction.
pub fn orthogonal_corpus(size: usize, seed: u64) -> Vec<SynthSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let n_frames = rng.random_range(32..=128);
            SynthSpec {
                n_frames,
                n_scenes: n_frames,
                intra_scene_noise: 0.0,
                drift_scenes_fraction: 0.0,
                dim: 32,
                grid: (12, 12),
                seed: rng.random(),
            }
        })
        .collect()
}
