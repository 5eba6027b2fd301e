//! Flat reference model of the plaintext address space and a randomized
//! access-trace driver that checks the machine against it.

#![allow(dead_code)]

use cryptolor_core::cache::CacheStats;
use cryptolor_core::machine::EventCounters;
use cryptolor_core::physmem::MemoryTraffic;
use cryptolor_core::{AccessError, Color, ColoredPointer, Machine, Policy, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small cache so that traces evict constantly.
pub fn trace_config(policy: Policy, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::default()
        .with_policy(policy)
        .with_seed(seed)
        .with_mem_size(16 * 1024);
    cfg.n_sets = 4;
    cfg.m_ways = 2;
    cfg
}

struct Region {
    base: u64,
    len: u64,
    color: Option<Color>,
}

impl Region {
    fn pointer(&self) -> ColoredPointer {
        let p = ColoredPointer::from_address(self.base);
        self.color.map_or(p, |c| p.with_color(c))
    }
}

#[derive(Debug, Default)]
pub struct TraceReport {
    pub accesses: u64,
    /// Loads whose bytes differed from the reference model.
    pub mismatches: u64,
    /// Correct-color accesses that failed.
    pub spurious_failures: u64,
    /// Wrong-color accesses under S1 that were not rejected.
    pub missed_violations: u64,
    pub stats: CacheStats,
    pub counters: EventCounters,
    pub traffic: MemoryTraffic,
}

fn other_color(m: &mut Machine, c: Option<Color>) -> Option<Color> {
    loop {
        let candidate = if m.config().ts > 2 || c.is_none() {
            Some(m.fresh_color())
        } else {
            None
        };
        if candidate != c {
            return candidate;
        }
    }
}

/// Runs `ops` random accesses over densely packed regions of mixed colors
/// (some uncolored) and compares every load with a flat plaintext model.
pub fn run_trace(policy: Policy, seed: u64, ops: usize) -> TraceReport {
    let cfg = trace_config(policy, seed);
    let tg = cfg.tg as u64;
    let mut m = Machine::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut reference = vec![0u8; 4096];
    let mut regions = Vec::new();
    let mut base = 0;
    while base < reference.len() as u64 {
        let len = (tg * rng.gen_range(1..=4)).min(reference.len() as u64 - base);
        let color = rng.gen_bool(0.75).then(|| m.fresh_color());
        regions.push(Region { base, len, color });
        base += len;
    }
    for r in &regions {
        m.nullify_region(r.pointer(), r.len).unwrap();
    }
    let mut rep = TraceReport::default();
    for _ in 0..ops {
        let ri = rng.gen_range(0..regions.len());
        let (rbase, rlen) = (regions[ri].base, regions[ri].len);
        let off = rng.gen_range(0..rlen);
        let len = rng.gen_range(1..=rlen - off);
        let p = regions[ri].pointer().offset(off);
        let span = (rbase + off) as usize..(rbase + off + len) as usize;
        rep.accesses += 1;
        match rng.gen_range(0..100) {
            0..=39 => {
                let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                match m.store(p, &bytes) {
                    Ok(()) => reference[span].copy_from_slice(&bytes),
                    Err(_) => rep.spurious_failures += 1,
                }
            }
            40..=79 => match m.load(p, len as usize) {
                Ok(bytes) => rep.mismatches += u64::from(bytes != reference[span]),
                Err(_) => rep.spurious_failures += 1,
            },
            80..=84 => {
                let color = rng.gen_bool(0.75).then(|| m.fresh_color());
                regions[ri].color = color;
                m.nullify_region(regions[ri].pointer(), rlen).unwrap();
                reference[rbase as usize..(rbase + rlen) as usize].fill(0);
            }
            85..=87 => m.flush(),
            _ => {
                let wrong = other_color(&mut m, regions[ri].color);
                let q = ColoredPointer::from_address(rbase + off);
                let q = wrong.map_or(q, |c| q.with_color(c));
                let write = policy == Policy::S1 && rng.gen_bool(0.5);
                let r = if write {
                    m.store(q, &vec![0xEE; len as usize])
                } else {
                    m.load(q, len as usize).map(|_| ())
                };
                if policy == Policy::S1 && !matches!(r, Err(AccessError::Auth(_))) {
                    rep.missed_violations += 1;
                }
            }
        }
    }
    m.flush();
    for r in &regions {
        match m.load(r.pointer(), r.len as usize) {
            Ok(bytes) => rep.mismatches += u64::from(bytes != reference[r.base as usize..(r.base + r.len) as usize]),
            Err(_) => rep.spurious_failures += 1,
        }
    }
    rep.stats = m.cache_stats();
    rep.counters = m.counters();
    rep.traffic = m.physmem().traffic();
    rep
}
