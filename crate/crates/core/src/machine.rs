//! Processor-side front end: the `mstp` coloring instruction, the load/store
//! path through the colored cache and the encryption engine, and the
//! authentication exception.
//!
//! Virtual addresses map to physical addresses one-to-one; the color field
//! bypasses translation and travels with the request.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{Cache, CacheStats};
use crate::crypto::CipherKey;
use crate::error::ConfigError;
use crate::layout::{tweak_color, Color, ColoredPointer, SimConfig};
use crate::mee::MemoryEncryptionEngine;
use crate::physmem::PhysicalMemory;

const COLOR_STREAM: u64 = 0;
const KEY_STREAM: u64 = 1;

/// Source of raw random words for color generation.
pub trait ColorSource: Send {
    fn next_word(&mut self) -> u32;
}

/// Seeded counter-based generator (ChaCha8).
pub struct SeededColors(ChaCha8Rng);

impl SeededColors {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(COLOR_STREAM);
        Self(rng)
    }
}

impl ColorSource for SeededColors {
    fn next_word(&mut self) -> u32 {
        self.0.next_u32()
    }
}

/// Why an access could not be carried out at all.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Fault {
    #[error("address range {addr:#x}+{len} outside physical memory")]
    OutOfRange { addr: u64, len: usize },
    #[error("empty access")]
    EmptyAccess,
    #[error("region {addr:#x}+{len} is not aligned to the tag granularity")]
    Misaligned { addr: u64, len: u64 },
}

/// Authentication failure reported to the processor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthFailure {
    /// The colored pointer used by the faulting access.
    pub pointer: ColoredPointer,
    /// Physical address of the block that failed verification.
    pub block_address: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("authentication failure at block {:#x} via {}", .0.block_address, .0.pointer)]
    Auth(AuthFailure),
    #[error(transparent)]
    Fault(#[from] Fault),
}

impl AccessError {
    pub fn is_auth(&self) -> bool {
        matches!(self, AccessError::Auth(_))
    }
}

/// Result of a load or store.
pub type AccessOutcome<T> = Result<T, AccessError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounters {
    pub loads: u64,
    pub stores: u64,
    pub mstp_count: u64,
    pub exceptions: u64,
    pub nullified_blocks: u64,
}

impl std::ops::AddAssign for EventCounters {
    fn add_assign(&mut self, o: Self) {
        self.loads += o.loads;
        self.stores += o.stores;
        self.mstp_count += o.mstp_count;
        self.exceptions += o.exceptions;
        self.nullified_blocks += o.nullified_blocks;
    }
}

/// Recorded authentication exceptions. The scenario decides whether an
/// exception aborts the program.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExceptionState {
    pub records: Vec<AuthFailure>,
}

impl ExceptionState {
    pub fn last(&self) -> Option<&AuthFailure> {
        self.records.last()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub struct Machine {
    cfg: SimConfig,
    colors: Box<dyn ColorSource>,
    cache: Cache,
    mee: MemoryEncryptionEngine,
    counters: EventCounters,
    exceptions: ExceptionState,
}

impl Machine {
    pub fn new(cfg: SimConfig) -> Result<Self, ConfigError> {
        let colors = Box::new(SeededColors::new(cfg.seed));
        Self::with_color_source(cfg, colors)
    }

    pub fn with_color_source(cfg: SimConfig, colors: Box<dyn ColorSource>) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if cfg.ts < 2 {
            return Err(ConfigError::NoValidColors(cfg.ts));
        }
        let mut key_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        key_rng.set_stream(KEY_STREAM);
        let key = CipherKey::generate(&mut key_rng);
        Ok(Self {
            cache: Cache::new(&cfg),
            mee: MemoryEncryptionEngine::new(&cfg, key),
            cfg,
            colors,
            counters: EventCounters::default(),
            exceptions: ExceptionState::default(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn counters(&self) -> EventCounters {
        self.counters
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn exceptions(&self) -> &ExceptionState {
        &self.exceptions
    }

    pub fn physmem(&self) -> &PhysicalMemory {
        self.mee.memory()
    }

    /// Direct access for a physical attacker; only between machine steps.
    pub fn physmem_mut(&mut self) -> &mut PhysicalMemory {
        self.mee.memory_mut()
    }

    /// Draws a fresh valid color by rejection sampling `ts`-bit words.
    pub fn fresh_color(&mut self) -> Color {
        let mask = ((1u64 << self.cfg.ts) - 1) as u32;
        loop {
            if let Some(c) = Color::new(self.colors.next_word() & mask, self.cfg.ts) {
                return c;
            }
        }
    }

    /// `mstp rd, rs`: keeps the low 39 bits and installs a fresh color.
    pub fn mstp(&mut self, p: ColoredPointer) -> ColoredPointer {
        self.counters.mstp_count += 1;
        let c = self.fresh_color();
        p.with_color(c)
    }

    fn check_range(&self, addr: u64, len: usize) -> Result<(), Fault> {
        if len == 0 {
            return Err(Fault::EmptyAccess);
        }
        match addr.checked_add(len as u64) {
            Some(end) if end <= self.cfg.mem_size => Ok(()),
            _ => Err(Fault::OutOfRange { addr, len }),
        }
    }

    /// Splits `[addr, addr + len)` at TG boundaries.
    fn chunks(&self, addr: u64, len: usize) -> impl Iterator<Item = (u64, usize)> {
        let tg = self.cfg.tg as u64;
        let end = addr + len as u64;
        let mut cur = addr;
        std::iter::from_fn(move || {
            (cur < end).then(|| {
                let stop = ((cur / tg + 1) * tg).min(end);
                let chunk = (cur, (stop - cur) as usize);
                cur = stop;
                chunk
            })
        })
    }

    fn raise(&mut self, pointer: ColoredPointer, block: usize) -> AccessError {
        let f = AuthFailure {
            pointer,
            block_address: block as u64 * self.cfg.tg as u64,
        };
        self.counters.exceptions += 1;
        self.exceptions.records.push(f);
        AccessError::Auth(f)
    }

    pub fn load(&mut self, p: ColoredPointer, len: usize) -> AccessOutcome<Vec<u8>> {
        let addr = p.address();
        self.check_range(addr, len)?;
        self.counters.loads += 1;
        let color = p.color();
        let mut out = Vec::with_capacity(len);
        let chunks: Vec<_> = self.chunks(addr, len).collect();
        for (pa, n) in chunks {
            match self.cache.read(pa, color, n, &mut self.mee) {
                Ok(bytes) => out.extend_from_slice(&bytes),
                Err(f) => return Err(self.raise(p, f.block)),
            }
        }
        Ok(out)
    }

    pub fn store(&mut self, p: ColoredPointer, bytes: &[u8]) -> AccessOutcome<()> {
        let addr = p.address();
        self.check_range(addr, bytes.len())?;
        self.counters.stores += 1;
        let color = p.color();
        let chunks: Vec<_> = self.chunks(addr, bytes.len()).collect();
        let mut consumed = 0;
        for (pa, n) in chunks {
            if let Err(f) = self
                .cache
                .write(pa, color, &bytes[consumed..consumed + n], &mut self.mee)
            {
                return Err(self.raise(p, f.block));
            }
            consumed += n;
        }
        Ok(())
    }

    pub fn load_u64(&mut self, p: ColoredPointer) -> AccessOutcome<u64> {
        let b = self.load(p, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn store_u64(&mut self, p: ColoredPointer, v: u64) -> AccessOutcome<()> {
        self.store(p, &v.to_le_bytes())
    }

    /// Re-keys `[p, p + len)` to p's color holding zeros without raising
    /// authentication errors. Overlapping cache lines are written back and
    /// dropped first.
    pub fn nullify_region(&mut self, p: ColoredPointer, len: u64) -> AccessOutcome<()> {
        let addr = p.address();
        let tg = self.cfg.tg as u64;
        if !addr.is_multiple_of(tg) || !len.is_multiple_of(tg) {
            return Err(Fault::Misaligned { addr, len }.into());
        }
        if len == 0 {
            return Ok(());
        }
        self.check_range(addr, len as usize)?;
        let tweak = tweak_color(p.color());
        let line = self.cfg.line_size as u64;
        let mut pa = addr - addr % line;
        while pa < addr + len {
            self.cache.evict_address(pa, &mut self.mee);
            pa += line;
        }
        for block in addr / tg..(addr + len) / tg {
            self.mee.nullify(block as usize, tweak);
        }
        self.counters.nullified_blocks += len / tg;
        Ok(())
    }

    /// Writes back every dirty line and empties the cache.
    pub fn flush(&mut self) {
        self.cache.flush_all(&mut self.mee);
    }

    /// Flushes, then returns the raw off-chip contents.
    pub fn cold_boot_dump(&mut self) -> Vec<u8> {
        self.flush();
        self.mee.memory().cold_boot_dump()
    }
}
