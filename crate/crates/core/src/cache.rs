//! Set-associative write-back data cache with one color entry per TG block.
//!
//! A hit needs both the line and a matching color entry. A color mismatch on
//! a resident line writes the line back and refetches it under the new color.
//! Fills decrypt every block of the line with the requesting color; under the
//! authenticated policy a prefetched block that fails verification is marked
//! [`ColorEntry::Invalid`] and is never written back.

use serde::{Deserialize, Serialize};

use crate::layout::{tweak_color, Color, SimConfig};
use crate::mee::MemoryEncryptionEngine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColorEntry {
    NoColor,
    Valid(Color),
    Invalid,
}

impl ColorEntry {
    pub fn for_access(color: Option<Color>) -> Self {
        color.map_or(ColorEntry::NoColor, ColorEntry::Valid)
    }

    pub fn matches(self, color: Option<Color>) -> bool {
        match (self, color) {
            (ColorEntry::NoColor, None) => true,
            (ColorEntry::Valid(c), Some(a)) => c == a,
            _ => false,
        }
    }

    fn tweak(self) -> Option<u64> {
        match self {
            ColorEntry::NoColor => Some(0),
            ColorEntry::Valid(c) => Some(u64::from(c.value())),
            ColorEntry::Invalid => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CacheLine {
    pub valid: bool,
    pub dirty: bool,
    pub tag: u64,
    pub data: Vec<u8>,
    pub colors: Vec<ColorEntry>,
}

impl CacheLine {
    fn empty(line_size: usize, blocks: usize) -> Self {
        Self {
            valid: false,
            dirty: false,
            tag: 0,
            data: vec![0; line_size],
            colors: vec![ColorEntry::NoColor; blocks],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub color_mismatch_misses: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub blocks_written_back: u64,
    pub blocks_suppressed: u64,
    pub fills: u64,
    pub auth_failures_on_fill: u64,
    pub prefetch_invalidations: u64,
}

impl std::ops::AddAssign for CacheStats {
    fn add_assign(&mut self, o: Self) {
        self.accesses += o.accesses;
        self.hits += o.hits;
        self.misses += o.misses;
        self.color_mismatch_misses += o.color_mismatch_misses;
        self.evictions += o.evictions;
        self.writebacks += o.writebacks;
        self.blocks_written_back += o.blocks_written_back;
        self.blocks_suppressed += o.blocks_suppressed;
        self.fills += o.fills;
        self.auth_failures_on_fill += o.auth_failures_on_fill;
        self.prefetch_invalidations += o.prefetch_invalidations;
    }
}

/// Result of a tag/color lookup, without side effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit {
        line: usize,
    },
    /// `resident` names the line holding the address under another color.
    Miss {
        resident: Option<usize>,
    },
}

/// The requested block failed verification during a fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FillFailure {
    /// Physical block index.
    pub block: usize,
}

pub struct Cache {
    line_size: usize,
    tg: usize,
    ts: u32,
    n_sets: usize,
    m_ways: usize,
    lines: Vec<CacheLine>,
    next_victim: Vec<usize>,
    stats: CacheStats,
}

impl Cache {
    pub fn new(cfg: &SimConfig) -> Self {
        let blocks = cfg.blocks_per_line();
        Self {
            line_size: cfg.line_size,
            tg: cfg.tg,
            ts: cfg.ts,
            n_sets: cfg.n_sets,
            m_ways: cfg.m_ways,
            lines: vec![CacheLine::empty(cfg.line_size, blocks); cfg.n_sets * cfg.m_ways],
            next_victim: vec![0; cfg.n_sets],
            stats: CacheStats::default(),
        }
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn lines(&self) -> &[CacheLine] {
        &self.lines
    }

    /// Bits of color storage held by the configured cache.
    pub fn color_bits_allocated(&self) -> u64 {
        self.lines.iter().map(|l| l.colors.len() as u64).sum::<u64>() * u64::from(self.ts)
    }

    fn set_and_tag(&self, pa: u64) -> (usize, u64) {
        let line_no = pa / self.line_size as u64;
        ((line_no % self.n_sets as u64) as usize, line_no / self.n_sets as u64)
    }

    fn line_base(&self, line: usize) -> u64 {
        let set = (line / self.m_ways) as u64;
        let l = &self.lines[line];
        (l.tag * self.n_sets as u64 + set) * self.line_size as u64
    }

    fn block_in_line(&self, pa: u64) -> usize {
        (pa % self.line_size as u64) as usize / self.tg
    }

    fn resident(&self, pa: u64) -> Option<usize> {
        let (set, tag) = self.set_and_tag(pa);
        (set * self.m_ways..(set + 1) * self.m_ways).find(|&i| self.lines[i].valid && self.lines[i].tag == tag)
    }

    /// Color entry currently cached for the block containing `pa`.
    pub fn entry(&self, pa: u64) -> Option<ColorEntry> {
        self.resident(pa).map(|i| self.lines[i].colors[self.block_in_line(pa)])
    }

    pub fn lookup(&self, pa: u64, color: Option<Color>) -> Lookup {
        match self.resident(pa) {
            Some(i) if self.lines[i].colors[self.block_in_line(pa)].matches(color) => Lookup::Hit { line: i },
            resident => Lookup::Miss { resident },
        }
    }

    fn check_single_block(&self, pa: u64, len: usize) {
        let off = (pa % self.tg as u64) as usize;
        assert!(
            len > 0 && off + len <= self.tg,
            "cache access must stay inside one TG block"
        );
    }

    fn access(
        &mut self,
        pa: u64,
        color: Option<Color>,
        mee: &mut MemoryEncryptionEngine,
    ) -> Result<usize, FillFailure> {
        self.stats.accesses += 1;
        match self.lookup(pa, color) {
            Lookup::Hit { line } => {
                self.stats.hits += 1;
                Ok(line)
            }
            Lookup::Miss { resident } => {
                self.stats.misses += 1;
                if resident.is_some() {
                    self.stats.color_mismatch_misses += 1;
                }
                self.fill(pa, color, mee)
            }
        }
    }

    /// Reads `len` bytes at `pa` (inside one TG block) under `color`.
    pub fn read(
        &mut self,
        pa: u64,
        color: Option<Color>,
        len: usize,
        mee: &mut MemoryEncryptionEngine,
    ) -> Result<Vec<u8>, FillFailure> {
        self.check_single_block(pa, len);
        let line = self.access(pa, color, mee)?;
        let off = (pa % self.line_size as u64) as usize;
        Ok(self.lines[line].data[off..off + len].to_vec())
    }

    /// Write-allocate store of `bytes` at `pa` (inside one TG block).
    pub fn write(
        &mut self,
        pa: u64,
        color: Option<Color>,
        bytes: &[u8],
        mee: &mut MemoryEncryptionEngine,
    ) -> Result<(), FillFailure> {
        self.check_single_block(pa, bytes.len());
        let line = self.access(pa, color, mee)?;
        let off = (pa % self.line_size as u64) as usize;
        let l = &mut self.lines[line];
        l.data[off..off + bytes.len()].copy_from_slice(bytes);
        l.dirty = true;
        Ok(())
    }

    /// Fetches the whole line containing `pa`, decrypting every block under
    /// the requesting color.
    ///
    /// A resident line under another color is written back first and stays
    /// resident (clean) if the fill fails. A failing requested block leaves
    /// the cache without the new line.
    pub fn fill(
        &mut self,
        pa: u64,
        color: Option<Color>,
        mee: &mut MemoryEncryptionEngine,
    ) -> Result<usize, FillFailure> {
        let resident = self.resident(pa);
        if let Some(line) = resident {
            self.write_back(line, mee);
        }

        let blocks = self.line_size / self.tg;
        let base = pa - pa % self.line_size as u64;
        let first_block = (base / self.tg as u64) as usize;
        let requested = self.block_in_line(pa);
        let tweak = tweak_color(color);
        let mut data = vec![0u8; self.line_size];
        let mut colors = vec![ColorEntry::for_access(color); blocks];
        let mut failure = None;
        let mut invalidated = 0;

        self.stats.fills += 1;
        for b in 0..blocks {
            match mee.read(first_block + b, tweak) {
                Ok(plain) => data[b * self.tg..(b + 1) * self.tg].copy_from_slice(&plain),
                Err(_) if b == requested => failure = Some(FillFailure { block: first_block + b }),
                Err(_) => {
                    colors[b] = ColorEntry::Invalid;
                    invalidated += 1;
                }
            }
        }
        if let Some(f) = failure {
            self.stats.auth_failures_on_fill += 1;
            return Err(f);
        }
        self.stats.prefetch_invalidations += invalidated;

        let (set, tag) = self.set_and_tag(pa);
        let line = match resident {
            Some(line) => line,
            None => {
                let victim = self.choose_victim(set);
                self.evict(victim, mee);
                victim
            }
        };
        self.lines[line] = CacheLine {
            valid: true,
            dirty: false,
            tag,
            data,
            colors,
        };
        Ok(line)
    }

    fn choose_victim(&mut self, set: usize) -> usize {
        let ways = set * self.m_ways..(set + 1) * self.m_ways;
        if let Some(free) = ways.clone().find(|&i| !self.lines[i].valid) {
            return free;
        }
        let way = self.next_victim[set];
        self.next_victim[set] = (way + 1) % self.m_ways;
        set * self.m_ways + way
    }

    /// Writes every non-invalid block of a dirty line back under its own
    /// color entry; the line stays resident and becomes clean.
    fn write_back(&mut self, line: usize, mee: &mut MemoryEncryptionEngine) {
        if !(self.lines[line].valid && self.lines[line].dirty) {
            return;
        }
        let first_block = (self.line_base(line) / self.tg as u64) as usize;
        self.stats.writebacks += 1;
        let l = &mut self.lines[line];
        for (b, entry) in l.colors.iter().enumerate() {
            match entry.tweak() {
                Some(tweak) => {
                    mee.write(first_block + b, tweak, &l.data[b * self.tg..(b + 1) * self.tg]);
                    self.stats.blocks_written_back += 1;
                }
                None => self.stats.blocks_suppressed += 1,
            }
        }
        l.dirty = false;
    }

    /// Writes back (if dirty) and drops a line.
    pub fn evict(&mut self, line: usize, mee: &mut MemoryEncryptionEngine) {
        if !self.lines[line].valid {
            return;
        }
        self.write_back(line, mee);
        self.lines[line].valid = false;
        self.stats.evictions += 1;
    }

    /// Evicts the line holding `pa`, if any.
    pub fn evict_address(&mut self, pa: u64, mee: &mut MemoryEncryptionEngine) {
        if let Some(line) = self.resident(pa) {
            self.evict(line, mee);
        }
    }

    pub fn flush_all(&mut self, mee: &mut MemoryEncryptionEngine) {
        for line in 0..self.lines.len() {
            self.evict(line, mee);
        }
    }
}
