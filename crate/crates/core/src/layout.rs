//! Simulator configuration and the colored pointer format.
//!
//! A colored pointer reuses the SV39 layout: bits `[0, 38]` hold the virtual
//! address and bits `[39, 63]` (25 bits) hold the color field. A field of all
//! zeros or all ones is the ordinary sign extension of bit 38 and marks the
//! pointer as uncolored. With a color size below 25 bits the color occupies
//! the low bits of the field and the remaining field bits stay zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Number of virtual address bits (SV39).
pub const VA_BITS: u32 = 39;
/// Width of the color field above the virtual address.
pub const COLOR_FIELD_BITS: u32 = 64 - VA_BITS;
/// Largest supported color size.
pub const MAX_COLOR_BITS: u32 = COLOR_FIELD_BITS;

pub(crate) const VA_MASK: u64 = (1 << VA_BITS) - 1;
pub(crate) const FIELD_MASK: u64 = (1 << COLOR_FIELD_BITS) - 1;

/// Detection policy offered by the memory encryption engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Authenticated encryption; a color mismatch raises an exception.
    S1,
    /// Encryption only; a color mismatch yields pseudorandom plaintext.
    S2,
}

impl Policy {
    pub fn is_authenticated(self) -> bool {
        matches!(self, Policy::S1)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::S1 => f.write_str("s1"),
            Policy::S2 => f.write_str("s2"),
        }
    }
}

/// Global simulator configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Color size in bits.
    pub ts: u32,
    /// Tag granularity in bytes: the span covered by one color.
    pub tg: usize,
    /// Cache line size in bytes.
    pub line_size: usize,
    pub n_sets: usize,
    pub m_ways: usize,
    pub policy: Policy,
    /// Simulated physical memory in bytes.
    pub mem_size: u64,
    pub seed: u64,
    /// Re-color freed heap objects with a throwaway color.
    pub recolor_on_free: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            ts: 25,
            tg: 16,
            line_size: 64,
            n_sets: 64,
            m_ways: 4,
            policy: Policy::S1,
            mem_size: 64 * 1024,
            seed: 0,
            recolor_on_free: false,
        }
    }
}

impl SimConfig {
    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_ts(mut self, ts: u32) -> Self {
        self.ts = ts;
        self
    }

    pub fn with_tg(mut self, tg: usize) -> Self {
        self.tg = tg;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mem_size(mut self, mem_size: u64) -> Self {
        self.mem_size = mem_size;
        self
    }

    pub fn with_recolor_on_free(mut self, on: bool) -> Self {
        self.recolor_on_free = on;
        self
    }

    /// Checks the cache geometry alone (enough for the color-bit analytics).
    pub fn validate_geometry(&self) -> Result<(), ConfigError> {
        if self.ts == 0 || self.ts > MAX_COLOR_BITS {
            return Err(ConfigError::ColorSize(self.ts));
        }
        if self.tg < 2 || !self.tg.is_power_of_two() {
            return Err(ConfigError::TagGranularity(self.tg));
        }
        if self.line_size == 0 || !self.line_size.is_multiple_of(self.tg) {
            return Err(ConfigError::LineSize {
                line: self.line_size,
                tg: self.tg,
            });
        }
        if self.n_sets == 0 || self.m_ways == 0 {
            return Err(ConfigError::Geometry);
        }
        Ok(())
    }

    /// Checks every configuration invariant.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_geometry()?;
        let line = self.line_size as u64;
        if self.mem_size == 0 || !self.mem_size.is_multiple_of(line) || self.mem_size > (1 << VA_BITS) {
            return Err(ConfigError::MemorySize {
                mem: self.mem_size,
                line: self.line_size,
            });
        }
        Ok(())
    }

    /// Cache data capacity in bytes.
    pub fn cache_bytes(&self) -> usize {
        self.line_size * self.n_sets * self.m_ways
    }

    pub fn blocks_per_line(&self) -> usize {
        self.line_size / self.tg
    }

    /// Number of TG blocks in physical memory.
    pub fn memory_blocks(&self) -> usize {
        (self.mem_size / self.tg as u64) as usize
    }

    /// Number of valid colors: all `ts`-bit values except zero and all-ones.
    pub fn valid_colors(&self) -> u64 {
        (1u64 << self.ts).saturating_sub(2)
    }

    pub fn align_up(&self, n: u64) -> u64 {
        let tg = self.tg as u64;
        n.div_ceil(tg) * tg
    }
}

/// A valid (non-zero, non-all-ones) color field value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Color(u32);

impl Color {
    /// Builds a color of `ts` bits, rejecting the two reserved encodings.
    pub fn new(value: u32, ts: u32) -> Option<Self> {
        if ts == 0 || ts > MAX_COLOR_BITS {
            return None;
        }
        let all_ones = (1u64 << ts) - 1;
        let v = u64::from(value);
        (v != 0 && v < all_ones).then_some(Self(value))
    }

    /// Interprets a raw 25-bit color field.
    pub fn from_field(field: u32) -> Option<Self> {
        let field = u64::from(field) & FIELD_MASK;
        (field != 0 && field != FIELD_MASK).then_some(Self(field as u32))
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Tweak color value for an optional access color; uncolored maps to 0.
pub fn tweak_color(color: Option<Color>) -> u64 {
    color.map_or(0, |c| u64::from(c.value()))
}

/// 64-bit pointer carrying a color field above an SV39 virtual address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColoredPointer(u64);

impl fmt::Debug for ColoredPointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ColoredPointer({:#018x})", self.0)
    }
}

impl fmt::Display for ColoredPointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl ColoredPointer {
    pub const fn from_raw(raw: u64) -> Self {
        Self(raw)
    }

    /// Canonical uncolored pointer for a 39-bit virtual address.
    pub fn from_address(va: u64) -> Self {
        Self(va & VA_MASK).strip_color()
    }

    /// Places `color` into the field above `va`.
    pub fn compose(color: Color, va: u64) -> Self {
        Self((u64::from(color.value()) << VA_BITS) | (va & VA_MASK))
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    /// The low 39 bits; identical to the physical address in this model.
    pub const fn address(self) -> u64 {
        self.0 & VA_MASK
    }

    /// Raw bits `[39, 63]`.
    pub const fn color_field(self) -> u32 {
        (self.0 >> VA_BITS) as u32
    }

    pub fn color(self) -> Option<Color> {
        Color::from_field(self.color_field())
    }

    pub fn is_colored(self) -> bool {
        self.color().is_some()
    }

    /// Splits into `(color, va)`; a field of all zeros or all ones is uncolored.
    pub fn decompose(self) -> (Option<Color>, u64) {
        (self.color(), self.address())
    }

    /// Replaces the color field with the sign extension of bit 38.
    pub fn strip_color(self) -> Self {
        // shift left then arithmetic shift right
        Self((((self.0 << COLOR_FIELD_BITS) as i64) >> COLOR_FIELD_BITS) as u64)
    }

    /// Same address, different color.
    pub fn with_color(self, color: Color) -> Self {
        Self::compose(color, self.address())
    }

    /// Plain integer addition; leaves the color untouched while `va + offset`
    /// stays below 2^39.
    pub fn offset(self, delta: u64) -> Self {
        Self(self.0.wrapping_add(delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decompose_examples() {
        let (c, va) = ColoredPointer::from_raw(0x0000_0090_0000_1000).decompose();
        assert_eq!(c, Color::new(1, 25));
        assert_eq!(va, 0x10_0000_1000);

        let (c, va) = ColoredPointer::from_raw(0x0000_0010_0000_1000).decompose();
        assert_eq!(c, None);
        assert_eq!(va, 0x10_0000_1000);

        let (c, va) = ColoredPointer::from_raw(0xFFFF_FFC0_0000_0000).decompose();
        assert_eq!(c, None);
        assert_eq!(va, 0x40_0000_0000);
    }

    #[test]
    fn strip_examples() {
        let p = ColoredPointer::from_raw(0x0000_0090_0000_1000);
        assert_eq!(p.strip_color().raw(), 0x0000_0010_0000_1000);

        // color 1 over a va with bit 38 set
        let p = ColoredPointer::compose(Color::new(1, 25).unwrap(), 0x40_4000_0000);
        assert_eq!(p.raw(), 0x0000_00C0_4000_0000);
        assert_eq!(p.strip_color().raw(), 0xFFFF_FFC0_4000_0000);
    }

    #[test]
    fn reserved_colors_rejected() {
        assert_eq!(Color::new(0, 4), None);
        assert_eq!(Color::new(15, 4), None);
        assert!(Color::new(14, 4).is_some());
        assert!(Color::new(16, 4).is_none());
        assert_eq!(Color::from_field(0x1FF_FFFF), None);
    }

    #[test]
    fn small_ts_packs_into_low_field_bits() {
        let c = Color::new(5, 4).unwrap();
        let p = ColoredPointer::compose(c, 0x1234);
        assert_eq!(p.color_field(), 5);
        assert_eq!(p.raw() >> VA_BITS, 5);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        assert_eq!(SimConfig::default().cache_bytes(), 16 * 1024);
        assert_eq!(
            SimConfig::default().with_ts(26).validate(),
            Err(ConfigError::ColorSize(26))
        );
        assert_eq!(
            SimConfig::default().with_tg(24).validate(),
            Err(ConfigError::TagGranularity(24))
        );
        let c = SimConfig {
            tg: 128,
            ..SimConfig::default()
        };
        assert!(matches!(c.validate(), Err(ConfigError::LineSize { .. })));
        let c = SimConfig::default().with_mem_size(100);
        assert!(matches!(c.validate(), Err(ConfigError::MemorySize { .. })));
    }

    proptest! {
        #[test]
        fn compose_decompose_round_trip(ts in 2u32..=25, raw in any::<u32>(), va in 0u64..(1 << 39)) {
            let span = (1u64 << ts) - 2;
            let c = Color::new((u64::from(raw) % span + 1) as u32, ts).unwrap();
            let p = ColoredPointer::compose(c, va);
            prop_assert_eq!(p.decompose(), (Some(c), va));
        }

        #[test]
        fn strip_is_sign_extension(raw in any::<u64>()) {
            let s = ColoredPointer::from_raw(raw).strip_color();
            let field = s.color_field();
            prop_assert!(field == 0 || field == FIELD_MASK as u32);
            let bit38 = (raw >> 38) & 1;
            prop_assert_eq!(u64::from(field != 0), bit38);
            prop_assert_eq!(s.address(), raw & VA_MASK);
            prop_assert_eq!(s.strip_color(), s);
            prop_assert!(!s.is_colored());
        }

        #[test]
        fn offset_keeps_color(ts in 2u32..=25, va in 0u64..(1 << 38), off in 0u64..(1 << 20)) {
            let c = Color::new(1, ts).unwrap();
            let p = ColoredPointer::compose(c, va).offset(off);
            prop_assert_eq!(p.color(), Some(c));
        }
    }
}
