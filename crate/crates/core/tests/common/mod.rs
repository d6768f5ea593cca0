#![allow(dead_code)]

use longvid::{FeatureVector, FrameFeatureSequence, QueryEmbedding, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Piecewise-constant scenes plus per-token noise, so the temporal stage has
/// something to drop and STC has repeated positions.
pub fn scene_video(
    seed: u64,
    t: usize,
    h: usize,
    w: usize,
    d: usize,
    noise: f32,
) -> FrameFeatureSequence {
    let mut r = rng(seed);
    let mut frames = Vec::with_capacity(t);
    let mut base: Vec<f32> = uniform_vec(&mut r, h * w * d);
    for _ in 0..t {
        if r.random_bool(0.12) {
            base = uniform_vec(&mut r, h * w * d);
        }
        let data = base
            .iter()
            .map(|&b| b + noise * r.random_range(-1.0f32..1.0))
            .collect();
        frames.push(TokenGrid::new(h, w, d, data).unwrap());
    }
    FrameFeatureSequence::at_one_fps(frames).unwrap()
}

/// Independent random tokens: nothing is redundant.
pub fn noise_video(seed: u64, t: usize, h: usize, w: usize, d: usize) -> FrameFeatureSequence {
    let mut r = rng(seed);
    let frames = (0..t)
        .map(|_| TokenGrid::new(h, w, d, uniform_vec(&mut r, h * w * d)).unwrap())
        .collect();
    FrameFeatureSequence::at_one_fps(frames).unwrap()
}

pub fn random_grid(r: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> TokenGrid {
    TokenGrid::new(h, w, d, uniform_vec(r, h * w * d)).unwrap()
}

pub fn random_query(seed: u64, l_q: usize, d: usize) -> QueryEmbedding {
    let mut r = rng(seed);
    let rows = (0..l_q)
        .map(|_| FeatureVector::new(uniform_vec(&mut r, d)).unwrap())
        .collect();
    QueryEmbedding::new(rows).unwrap()
}

/// Reference cosine in f64 with no shortcuts.
pub fn cos_ref(a: &[f32], b: &[f32]) -> Option<f64> {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// Largest n in [0, t] with n*hi + (t-n)*lo + l_q <= l_max, by scanning.
pub fn nh_brute(t: usize, l_max: usize, l_q: usize, hi: usize, lo: usize) -> usize {
    (0..=t)
        .rev()
        .find(|&n| n * hi + (t - n) * lo + l_q <= l_max)
        .unwrap_or(0)
}
