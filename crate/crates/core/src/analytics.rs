//! Closed-form analytics: color-bit storage in the cache and the detection
//! probability of a single out-of-bounds or dangling access.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::layout::SimConfig;
use crate::scalar::Scalar;

/// Color storage required by a cache configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorBits {
    /// Total color bits `T = sets * ways * ts * (line / tg)`.
    pub bits: u64,
    /// Cache data capacity in bytes.
    pub data_bytes: u64,
}

impl ColorBits {
    /// `T / (8 * data_bytes)`.
    pub fn overhead_fraction<S: Scalar>(&self) -> S {
        S::from_count(self.bits) / S::from_count(8 * self.data_bytes)
    }

    pub fn overhead_percent<S: Scalar>(&self) -> S {
        self.overhead_fraction::<S>() * S::from_count(100)
    }
}

pub fn color_bits(cfg: &SimConfig) -> Result<ColorBits, ConfigError> {
    cfg.validate_geometry()?;
    let bits = (cfg.n_sets * cfg.m_ways) as u64 * u64::from(cfg.ts) * cfg.blocks_per_line() as u64;
    Ok(ColorBits {
        bits,
        data_bytes: cfg.cache_bytes() as u64,
    })
}

/// The four cache configurations of the reference 16 KiB, 4-way, 64-set cache
/// with 64-byte lines: `(ts, tg)` pairs.
pub const REFERENCE_COLOR_CONFIGS: [(u32, usize); 4] = [(8, 64), (8, 16), (25, 64), (25, 16)];

fn valid_colors(ts: u32) -> Result<u64, ConfigError> {
    if ts < 2 {
        return Err(ConfigError::NoValidColors(ts));
    }
    if ts > 63 {
        return Err(ConfigError::ColorSize(ts));
    }
    Ok((1u64 << ts) - 2)
}

/// Probability that two independently drawn valid colors collide:
/// `1 / (2^ts - 2)`.
pub fn collision_probability<S: Scalar>(ts: u32) -> Result<S, ConfigError> {
    Ok(S::one() / S::from_count(valid_colors(ts)?))
}

/// Probability that the first mismatching access is detected:
/// `1 - 1 / (2^ts - 2)`.
pub fn detection_probability<S: Scalar>(ts: u32) -> Result<S, ConfigError> {
    Ok(S::one() - collision_probability::<S>(ts)?)
}

/// `1 - 2^-ts`, the value obtained when the two reserved colors are ignored.
pub fn unreserved_detection_probability<S: Scalar>(ts: u32) -> S {
    S::one() - S::one() / S::from_count(1u64 << ts)
}

/// Probability that an attack needing `links` independent color collisions
/// goes unnoticed.
pub fn chain_success_probability<S: Scalar>(ts: u32, links: u32) -> Result<S, ConfigError> {
    let q = collision_probability::<S>(ts)?;
    Ok((0..links).fold(S::one(), |acc, _| acc * q.clone()))
}
