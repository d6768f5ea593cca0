//! Frame-level sinusoidal position encoding keyed to absolute timestep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::FeatureVector;
use crate::pipeline::CompressedTokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpeConfig {
    pub enabled: bool,
    /// Must equal the token dimension when enabled.
    pub dim: usize,
    pub base: f64,
}

impl Default for FpeConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            dim: 0,
            base: 10_000.0,
        }
    }
}

impl FpeConfig {
    pub fn enabled(dim: usize) -> Self {
        Self {
            enabled: true,
            dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "fpe dim must be >= 2, got {}",
                self.dim
            )));
        }
        if !(self.base > 1.0 && self.base.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fpe base must be > 1, got {}",
                self.base
            )));
        }
        Ok(())
    }
}

/// Entry `2i` is `sin(t / base^(2i/dim))`, entry `2i+1` the matching cosine.
pub fn fpe_vector(t: f64, dim: usize, base: f64) -> FeatureVector {
    let values = (0..dim.max(1))
        .map(|j| {
            let pair = (j / 2 * 2) as f64;
            let angle = t / base.powf(pair / dim as f64);
            if j % 2 == 0 {
                angle.sin() as f32
            } else {
                angle.cos() as f32
            }
        })
        .collect();
    FeatureVector::new(values).expect("sinusoids are finite")
}

/// Adds the frame's encoding to every token of that frame. Identity when disabled.
pub fn apply_fpe(
    mut seq: CompressedTokenSequence,
    cfg: &FpeConfig,
) -> Result<CompressedTokenSequence> {
    if !cfg.enabled {
        return Ok(seq);
    }
    cfg.validate()?;
    let mut cached: Option<(f64, FeatureVector)> = None;
    for token in &mut seq.tokens {
        if token.vector.len() != cfg.dim {
            return Err(Error::InvalidConfig(format!(
                "fpe dim {} does not match token dim {}",
                cfg.dim,
                token.vector.len()
            )));
        }
        let offset = match &cached {
            Some((t, v)) if *t == token.timestep => v,
            _ => {
                let v = fpe_vector(token.timestep, cfg.dim, cfg.base);
                &cached.insert((token.timestep, v)).1
            }
        };
        let shifted = token
            .vector
            .as_slice()
            .iter()
            .zip(offset.as_slice())
            .map(|(&x, &o)| x + o)
            .collect();
        token.vector = FeatureVector::new(shifted)?;
    }
    Ok(seq)
}
