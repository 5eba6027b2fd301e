//! Attack scenarios and the Monte-Carlo engine.
//!
//! Each trial builds its own machine and runtime from a per-trial seed, so
//! trials are independent and can run on any thread in any order while the
//! aggregated output stays deterministic.

mod scenario;
mod trial;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use scenario::{
    AccessKind, Attack, Expectations, HeapLayout, Mechanism, Phase, Scenario, ScenarioFile, DEFAULT_CANARY,
};
pub use trial::{run_trial, TrialResult};

use crate::analytics;
use crate::cache::CacheStats;
use crate::layout::SimConfig;
use crate::machine::EventCounters;
use crate::runtime::{GlobalDef, Runtime, RuntimeError};
use crate::stats::DetectionStats;

/// Seed of trial `index` derived from `base` with the splitmix64 finalizer.
pub fn trial_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn tally<'a>(results: impl IntoIterator<Item = &'a TrialResult>) -> DetectionStats {
    let mut s = DetectionStats::default();
    for r in results {
        s.trials += 1;
        match r.mechanism {
            Mechanism::Exception => {
                s.detected += 1;
                s.exceptions += 1;
            }
            Mechanism::ConfidentialityPreserved => s.confidentiality_preserved += 1,
            Mechanism::IntegrityCorrupted => s.integrity_corrupted += 1,
            Mechanism::None => s.undetected += 1,
        }
        s.allocator_flagged += u64::from(r.allocator_flagged);
    }
    s
}

/// Outcome of a batch of trials of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub stats: DetectionStats,
    pub counters: EventCounters,
    pub cache: CacheStats,
    /// Per-trial results in trial order.
    pub results: Vec<TrialResult>,
}

impl MonteCarlo {
    /// Most frequent mechanism; ties resolve in declaration order.
    pub fn majority(&self) -> Mechanism {
        let s = &self.stats;
        [
            (s.exceptions, Mechanism::Exception),
            (s.confidentiality_preserved, Mechanism::ConfidentialityPreserved),
            (s.integrity_corrupted, Mechanism::IntegrityCorrupted),
            (s.undetected, Mechanism::None),
        ]
        .into_iter()
        .rev()
        .max_by_key(|(n, _)| *n)
        .map(|(_, m)| m)
        .expect("non-empty")
    }
}

/// Runs `trials` independent trials in parallel.
pub fn monte_carlo(cfg: &SimConfig, sc: &Scenario, trials: u64, base_seed: u64) -> Result<MonteCarlo, RuntimeError> {
    let results = (0..trials)
        .into_par_iter()
        .map(|i| run_trial(cfg, sc, trial_seed(base_seed, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut counters = EventCounters::default();
    let mut cache = CacheStats::default();
    for r in &results {
        counters += r.counters;
        cache += r.cache;
    }
    Ok(MonteCarlo {
        stats: tally(&results),
        counters,
        cache,
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub offset: u64,
    /// The offset lies inside the TG-rounded object.
    pub in_rounded: bool,
    pub stats: DetectionStats,
}

/// Detection of a linear overflow write ending at each offset in
/// `[0, 4 * tg)` past the base of a `cmalloc(object_size)`.
pub fn byte_sweep(
    cfg: &SimConfig,
    object_size: u64,
    trials: u64,
    base_seed: u64,
    layout: HeapLayout,
) -> Result<Vec<SweepPoint>, RuntimeError> {
    let rounded = cfg.align_up(object_size);
    (0..4 * cfg.tg as u64)
        .map(|offset| {
            let sc = Scenario::new(format!("sweep@{offset}"), Attack::LinearOverflowWrite { offset })
                .with_victim_size(object_size)
                .with_layout(layout);
            let seed = trial_seed(base_seed, offset << 32);
            Ok(SweepPoint {
                offset,
                in_rounded: offset < rounded,
                stats: monte_carlo(cfg, &sc, trials, seed)?.stats,
            })
        })
        .collect()
}

/// One row of a color-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsRow {
    pub ts: u32,
    pub stats: DetectionStats,
    /// Exclusion-corrected `1 - 1/(2^ts - 2)`.
    pub analytic: f64,
    /// `1 - 2^-ts`.
    pub unreserved: f64,
}

/// Monte-Carlo detection rate for each color size. Every row draws its
/// trial seeds from its own stream so rows are statistically independent.
pub fn ts_sweep(
    cfg: &SimConfig,
    sc: &Scenario,
    ts_list: &[u32],
    trials: u64,
    base_seed: u64,
) -> Result<Vec<TsRow>, RuntimeError> {
    ts_list
        .iter()
        .map(|&ts| {
            let row_cfg = cfg.clone().with_ts(ts);
            let analytic = analytics::detection_probability(ts)?;
            let mc = monte_carlo(&row_cfg, sc, trials, trial_seed(base_seed, u64::from(ts) << 40))?;
            Ok(TsRow {
                ts,
                stats: mc.stats,
                analytic,
                unreserved: analytics::unreserved_detection_probability(ts),
            })
        })
        .collect()
}

/// Runs a small workload that stores `canary` through a colored heap
/// object, an uncolored heap object and a protected global, then returns
/// the cold-boot dump of the flushed memory.
pub fn canary_dump(cfg: &SimConfig, canary: &[u8]) -> Result<Vec<u8>, RuntimeError> {
    let mut rt = Runtime::new(cfg.clone())?;
    rt.register_global(GlobalDef::new("canary", canary.to_vec()))?;
    rt.startup()?;
    let len = canary.len().max(1) as u64;
    let colored = rt.cmalloc(len)?;
    let plain = rt.malloc_plain(len)?;
    let m = rt.machine_mut();
    m.store(colored, canary)?;
    m.store(plain, canary)?;
    Ok(m.cold_boot_dump())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Policy;

    fn cfg(policy: Policy) -> SimConfig {
        SimConfig::default().with_policy(policy)
    }

    fn one(policy: Policy, sc: &Scenario) -> Mechanism {
        run_trial(&cfg(policy), sc, 11).unwrap().mechanism
    }

    #[test]
    fn trial_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..10_000).map(|i| trial_seed(3, i)).collect();
        assert_eq!(seeds.len(), 10_000);
        assert_ne!(trial_seed(3, 0), trial_seed(4, 0));
    }

    #[test]
    fn adjacent_overflow_by_policy() {
        let w = Scenario::new("w", Attack::LinearOverflowWrite { offset: 40 });
        assert_eq!(one(Policy::S1, &w), Mechanism::Exception);
        assert_eq!(one(Policy::S2, &w), Mechanism::IntegrityCorrupted);
        let r = Scenario::new("r", Attack::LinearOverflowRead { offset: 40 });
        assert_eq!(one(Policy::S1, &r), Mechanism::Exception);
        assert_eq!(one(Policy::S2, &r), Mechanism::ConfidentialityPreserved);
    }

    #[test]
    fn in_bounds_access_is_not_an_attack() {
        let sc = Scenario::new("in", Attack::LinearOverflowWrite { offset: 31 }).with_victim_size(30);
        assert_eq!(one(Policy::S1, &sc), Mechanism::None);
        assert_eq!(one(Policy::S2, &sc), Mechanism::None);
    }

    #[test]
    fn heartbleed_s2_leaks_only_ciphertext_garbage() {
        let sc = Scenario::new("hb", Attack::HeartbleedOverread { length: 96 });
        assert_eq!(one(Policy::S2, &sc), Mechanism::ConfidentialityPreserved);
        assert_eq!(one(Policy::S1, &sc), Mechanism::Exception);
    }

    #[test]
    fn nonlinear_access_skips_the_gap() {
        let sc = Scenario::new(
            "nl",
            Attack::NonlinearOob {
                delta: 48,
                access: AccessKind::Read,
            },
        );
        assert_eq!(one(Policy::S1, &sc), Mechanism::Exception);
        let w = Scenario::new(
            "nlw",
            Attack::NonlinearOob {
                delta: 48,
                access: AccessKind::Write,
            },
        );
        assert_eq!(one(Policy::S2, &w), Mechanism::IntegrityCorrupted);
    }

    #[test]
    fn temporal_scenarios() {
        use AccessKind::*;
        use Phase::*;
        let uaf = |access, phase| Scenario::new("uaf", Attack::UseAfterFree { access, phase });
        assert_eq!(one(Policy::S1, &uaf(Read, AfterReuse)), Mechanism::Exception);
        assert_eq!(one(Policy::S1, &uaf(Write, AfterReuse)), Mechanism::Exception);
        assert_eq!(one(Policy::S1, &uaf(Read, BeforeReuse)), Mechanism::None);
        assert_eq!(one(Policy::S1, &uaf(Write, BeforeReuse)), Mechanism::None);
        assert_eq!(
            one(Policy::S2, &uaf(Read, AfterReuse)),
            Mechanism::ConfidentialityPreserved
        );
        assert_eq!(one(Policy::S2, &uaf(Write, AfterReuse)), Mechanism::IntegrityCorrupted);
        let recolor = cfg(Policy::S1).with_recolor_on_free(true);
        let r = run_trial(&recolor, &uaf(Read, BeforeReuse), 1).unwrap();
        assert_eq!(r.mechanism, Mechanism::Exception);
    }

    #[test]
    fn double_free() {
        let plain = Scenario::new("df", Attack::DoubleFree { after_reuse: false });
        let r = run_trial(&cfg(Policy::S1), &plain, 1).unwrap();
        assert!(r.allocator_flagged);
        assert_eq!(r.mechanism, Mechanism::None);
        let reuse = Scenario::new("df2", Attack::DoubleFree { after_reuse: true });
        let r = run_trial(&cfg(Policy::S1), &reuse, 1).unwrap();
        assert!(!r.allocator_flagged);
        assert_eq!(r.mechanism, Mechanism::Exception);
        assert_eq!(one(Policy::S2, &reuse), Mechanism::IntegrityCorrupted);
    }

    #[test]
    fn intra_object_goes_unnoticed() {
        let sc = Scenario::new("io", Attack::IntraObjectOverflow { buffer_size: 32 });
        assert_eq!(one(Policy::S1, &sc), Mechanism::None);
        assert_eq!(one(Policy::S2, &sc), Mechanism::None);
    }

    #[test]
    fn physical_scenarios() {
        let t = Scenario::new("t", Attack::PhysicalTamper { bit: Some(77) });
        assert_eq!(one(Policy::S1, &t), Mechanism::Exception);
        assert_eq!(one(Policy::S2, &t), Mechanism::IntegrityCorrupted);
        let c = Scenario::new(
            "c",
            Attack::ColdBootSearch {
                canary: DEFAULT_CANARY.into(),
            },
        );
        for seed in 0..12 {
            for p in [Policy::S1, Policy::S2] {
                let r = run_trial(&cfg(p), &c, seed).unwrap();
                assert_eq!(r.mechanism, Mechanism::ConfidentialityPreserved);
            }
        }
    }

    #[test]
    fn stack_and_metadata() {
        let s = Scenario::new("s", Attack::StackSlotOverflow { offset: 32 });
        assert_eq!(one(Policy::S1, &s), Mechanism::Exception);
        assert_eq!(one(Policy::S2, &s), Mechanism::IntegrityCorrupted);
        let m = Scenario::new("m", Attack::HeapMetadataOverwrite);
        assert_eq!(one(Policy::S1, &m), Mechanism::Exception);
        assert_eq!(one(Policy::S2, &m), Mechanism::IntegrityCorrupted);
    }

    #[test]
    fn shared_granule_neighbors_share_a_color() {
        let c = cfg(Policy::S1).with_tg(64);
        let sc = Scenario::new("sg", Attack::LinearOverflowWrite { offset: 32 })
            .with_victim_size(30)
            .with_layout(HeapLayout::SharedGranule);
        let r = run_trial(&c, &sc, 2).unwrap();
        assert_eq!(r.mechanism, Mechanism::None);
        assert_eq!(r.colors[0], r.colors[1]);
    }

    #[test]
    fn s2_never_raises() {
        let all = [
            Attack::LinearOverflowRead { offset: 33 },
            Attack::LinearOverflowWrite { offset: 33 },
            Attack::HeartbleedOverread { length: 80 },
            Attack::DoubleFree { after_reuse: true },
            Attack::PhysicalTamper { bit: None },
            Attack::ChainedOverflow { links: 3 },
            Attack::StackSlotOverflow { offset: 40 },
            Attack::HeapMetadataOverwrite,
        ];
        for a in all {
            let mc = monte_carlo(&cfg(Policy::S2), &Scenario::new("x", a), 20, 9).unwrap();
            assert_eq!(mc.stats.exceptions, 0);
            assert_eq!(mc.counters.exceptions, 0);
        }
    }

    #[test]
    fn monte_carlo_is_order_independent() {
        let sc = Scenario::new("w", Attack::LinearOverflowWrite { offset: 32 });
        let c = cfg(Policy::S1).with_ts(3);
        let a = monte_carlo(&c, &sc, 200, 5).unwrap();
        let b = monte_carlo(&c, &sc, 200, 5).unwrap();
        assert_eq!(a, b);
        let serial: Vec<_> = (0..200)
            .map(|i| run_trial(&c, &sc, trial_seed(5, i)).unwrap())
            .collect();
        assert_eq!(a.results, serial);
        assert!(a.stats.detected > 0 && a.stats.undetected > 0);
    }

    #[test]
    fn byte_sweep_boundaries() {
        let c = cfg(Policy::S1);
        let pts = byte_sweep(&c, 30, 5, 1, HeapLayout::Rounded).unwrap();
        assert_eq!(pts.len(), 64);
        for p in &pts {
            if p.offset < 32 {
                assert_eq!(p.stats.detected, 0, "offset {}", p.offset);
            } else {
                assert_eq!(p.stats.detected, 5, "offset {}", p.offset);
            }
        }
        let exact = byte_sweep(&c, 16, 3, 1, HeapLayout::Rounded).unwrap();
        assert_eq!(exact[16].stats.detected, 3);
    }

    #[test]
    fn canary_dump_hides_the_canary() {
        for p in [Policy::S1, Policy::S2] {
            let dump = canary_dump(&cfg(p), DEFAULT_CANARY.as_bytes()).unwrap();
            assert!(!dump
                .windows(DEFAULT_CANARY.len())
                .any(|w| w == DEFAULT_CANARY.as_bytes()));
        }
    }

    #[test]
    fn majority_mechanism() {
        let sc = Scenario::new("w", Attack::LinearOverflowWrite { offset: 32 });
        let mc = monte_carlo(&cfg(Policy::S1), &sc, 10, 0).unwrap();
        assert_eq!(mc.majority(), Mechanism::Exception);
    }

    #[test]
    fn scenario_json_shape() {
        let text = r#"{"scenarios":[
            {"name":"a","attack":{"kind":"linear_overflow_write","offset":32},
             "expect":{"s1":"exception","s2":"integrity_corrupted"}},
            {"name":"b","victim_size":30,"attack":{"kind":"use_after_free","access":"read","phase":"after_reuse"}},
            {"name":"c","attack":{"kind":"cold_boot_search"}}
        ]}"#;
        let f: ScenarioFile = serde_json::from_str(text).unwrap();
        assert_eq!(f.scenarios.len(), 3);
        assert_eq!(
            f.scenarios[0].expect.for_policy(crate::Policy::S2),
            Some(Mechanism::IntegrityCorrupted)
        );
        assert_eq!(f.scenarios[1].victim_size, 30);
        assert_eq!(
            f.scenarios[2].attack,
            Attack::ColdBootSearch {
                canary: DEFAULT_CANARY.into()
            }
        );
    }
}
