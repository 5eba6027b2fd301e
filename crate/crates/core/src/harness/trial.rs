use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{AccessKind, Attack, HeapLayout, Mechanism, Phase, Scenario};
use crate::cache::CacheStats;
use crate::layout::{ColoredPointer, SimConfig};
use crate::machine::{AccessError, EventCounters};
use crate::runtime::{FreeOutcome, GlobalDef, Runtime, RuntimeError};

const DATA_STREAM: u64 = 2;
const ATTACK_BYTE: u8 = 0x41;
/// Spacing of packed objects in the shared-granule layout.
const PACKED_ALIGN: u64 = 16;
/// Room around the cold-boot canary for a random placement.
const CANARY_SLACK: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    /// The attack raised an authentication exception.
    pub detected: bool,
    pub mechanism: Mechanism,
    /// Colors of the pointers taking part, in allocation order (0 = none).
    pub colors: Vec<u32>,
    pub allocator_flagged: bool,
    pub counters: EventCounters,
    pub cache: CacheStats,
}

/// What the attack step produced, before classification.
enum Observation {
    Exception,
    /// Bytes the attacker obtained vs. what the victim holds there.
    Leak {
        leaked: Vec<u8>,
        truth: Vec<u8>,
    },
    /// What the defender reads back vs. what the attacker wanted there.
    Write {
        readback: Vec<u8>,
        intended: Vec<u8>,
    },
    Nothing,
}

impl Observation {
    fn classify(self) -> Mechanism {
        match self {
            Observation::Exception => Mechanism::Exception,
            Observation::Leak { leaked, truth } if leaked != truth => Mechanism::ConfidentialityPreserved,
            Observation::Write { readback, intended } if readback != intended => Mechanism::IntegrityCorrupted,
            _ => Mechanism::None,
        }
    }
}

/// Maps an authentication failure to `None`; other errors propagate.
fn auth_or<T>(r: Result<T, AccessError>) -> Result<Option<T>, RuntimeError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(AccessError::Auth(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Neighbor-relative indices of `[start, start + len)` (victim-relative)
/// that fall inside a neighbor at `gap` of `size` bytes.
fn overlap(start: u64, len: u64, gap: u64, size: u64) -> Range<usize> {
    let lo = start.max(gap);
    let hi = (start + len).min(gap + size);
    if lo >= hi {
        0..0
    } else {
        (lo - gap) as usize..(hi - gap) as usize
    }
}

/// Victim-relative `[min(size, offset), offset]` of a linear overflow.
fn linear_span(victim_size: u64, offset: u64) -> (u64, u64) {
    let start = victim_size.min(offset);
    (start, offset - start + 1)
}

struct Pair {
    victim: ColoredPointer,
    /// The defender's own pointer to the neighbor.
    neighbor: ColoredPointer,
    gap: u64,
    secret: Vec<u8>,
}

struct Trial {
    rt: Runtime,
    rng: ChaCha8Rng,
    colors: Vec<u32>,
    tg: u64,
}

impl Trial {
    fn note(&mut self, p: ColoredPointer) {
        self.colors.push(p.color().map_or(0, |c| c.value()));
    }

    fn secret(&mut self, len: u64) -> Vec<u8> {
        (0..len).map(|_| self.rng.gen()).collect()
    }

    fn rounded(&self, n: u64) -> u64 {
        n.div_ceil(self.tg) * self.tg
    }

    fn cmalloc(&mut self, size: u64) -> Result<ColoredPointer, RuntimeError> {
        let p = self.rt.cmalloc(size)?;
        self.note(p);
        Ok(p)
    }

    fn malloc_plain(&mut self, size: u64) -> Result<ColoredPointer, RuntimeError> {
        let p = self.rt.malloc_plain(size)?;
        self.note(p);
        Ok(p)
    }

    fn load(&mut self, p: ColoredPointer, len: u64) -> Result<Option<Vec<u8>>, RuntimeError> {
        auth_or(self.rt.machine_mut().load(p, len as usize))
    }

    fn store(&mut self, p: ColoredPointer, bytes: &[u8]) -> Result<Option<()>, RuntimeError> {
        auth_or(self.rt.machine_mut().store(p, bytes))
    }

    fn owner_store(&mut self, p: ColoredPointer, bytes: &[u8]) -> Result<(), RuntimeError> {
        self.store(p, bytes)?.expect("owner access through its own pointer");
        Ok(())
    }

    /// Defender reads back at `p` and compares with `intended`.
    fn readback(&mut self, p: ColoredPointer, intended: Vec<u8>) -> Result<Observation, RuntimeError> {
        Ok(match self.load(p, intended.len() as u64)? {
            None => Observation::Exception,
            Some(readback) => Observation::Write { readback, intended },
        })
    }

    /// Victim followed by a neighbor holding a secret. `reach` is the
    /// victim-relative end of the attack, used to size the neighbor.
    fn adjacent_pair(&mut self, sc: &Scenario, reach: u64) -> Result<Pair, RuntimeError> {
        match sc.layout {
            HeapLayout::Rounded => {
                let gap = self.rounded(sc.victim_size);
                let size = sc
                    .neighbor_size
                    .unwrap_or_else(|| (4 * self.tg).max(reach.saturating_sub(gap)));
                let victim = self.cmalloc(sc.victim_size)?;
                let neighbor = self.cmalloc(size)?;
                debug_assert_eq!(neighbor.address(), victim.address() + gap);
                let secret = self.secret(size);
                self.owner_store(neighbor, &secret)?;
                Ok(Pair {
                    victim,
                    neighbor,
                    gap,
                    secret,
                })
            }
            HeapLayout::SharedGranule => {
                let gap = sc.victim_size.div_ceil(PACKED_ALIGN) * PACKED_ALIGN;
                let size = sc.neighbor_size.unwrap_or_else(|| match self.rounded(gap) - gap {
                    0 => self.tg,
                    rest => rest,
                });
                let victim = self.cmalloc(gap + size)?;
                let neighbor = victim.offset(gap);
                self.note(neighbor);
                let secret = self.secret(size);
                self.owner_store(neighbor, &secret)?;
                Ok(Pair {
                    victim,
                    neighbor,
                    gap,
                    secret,
                })
            }
        }
    }

    fn overflow_read(&mut self, sc: &Scenario, start: u64, len: u64) -> Result<Observation, RuntimeError> {
        let pair = self.adjacent_pair(sc, start + len)?;
        let Some(bytes) = self.load(pair.victim.offset(start), len)? else {
            return Ok(Observation::Exception);
        };
        let hit = overlap(start, len, pair.gap, pair.secret.len() as u64);
        if hit.is_empty() {
            return Ok(Observation::Nothing);
        }
        let from = (hit.start as u64 + pair.gap - start) as usize;
        Ok(Observation::Leak {
            leaked: bytes[from..from + hit.len()].to_vec(),
            truth: pair.secret[hit].to_vec(),
        })
    }

    fn overflow_write(&mut self, sc: &Scenario, start: u64, len: u64) -> Result<Observation, RuntimeError> {
        let pair = self.adjacent_pair(sc, start + len)?;
        let payload = vec![ATTACK_BYTE; len as usize];
        if self.store(pair.victim.offset(start), &payload)?.is_none() {
            return Ok(Observation::Exception);
        }
        let hit = overlap(start, len, pair.gap, pair.secret.len() as u64);
        if hit.is_empty() {
            return Ok(Observation::Nothing);
        }
        let mut intended = pair.secret;
        intended[hit].fill(ATTACK_BYTE);
        self.readback(pair.neighbor, intended)
    }

    fn intra_object(&mut self, buffer_size: u64) -> Result<Observation, RuntimeError> {
        let field = self.tg;
        let object = self.cmalloc(buffer_size + field)?;
        let secret = self.secret(field);
        self.owner_store(object.offset(buffer_size), &secret)?;
        let payload = vec![ATTACK_BYTE; (buffer_size + field) as usize];
        if self.store(object, &payload)?.is_none() {
            return Ok(Observation::Exception);
        }
        self.readback(object.offset(buffer_size), vec![ATTACK_BYTE; field as usize])
    }

    fn use_after_free(&mut self, sc: &Scenario, access: AccessKind, phase: Phase) -> Result<Observation, RuntimeError> {
        let size = self.rounded(sc.victim_size);
        let dangling = self.cmalloc(sc.victim_size)?;
        let old = self.secret(size);
        self.owner_store(dangling, &old)?;
        self.rt.cfree(dangling)?;
        let owner = match phase {
            Phase::BeforeReuse => None,
            Phase::AfterReuse => {
                let q = self.cmalloc(sc.victim_size)?;
                debug_assert_eq!(q.address(), dangling.address());
                let fresh = self.secret(size);
                self.owner_store(q, &fresh)?;
                Some((q, fresh))
            }
        };
        match access {
            AccessKind::Read => {
                let Some(leaked) = self.load(dangling, size)? else {
                    return Ok(Observation::Exception);
                };
                let truth = owner.map_or(old, |(_, fresh)| fresh);
                Ok(Observation::Leak { leaked, truth })
            }
            AccessKind::Write => {
                let payload = vec![ATTACK_BYTE; size as usize];
                if self.store(dangling, &payload)?.is_none() {
                    return Ok(Observation::Exception);
                }
                match owner {
                    None => Ok(Observation::Nothing),
                    Some((q, _)) => self.readback(q, payload),
                }
            }
        }
    }

    /// Returns the observation and whether the allocator flagged the free.
    fn double_free(&mut self, sc: &Scenario, after_reuse: bool) -> Result<(Observation, bool), RuntimeError> {
        let size = self.rounded(sc.victim_size);
        let p = self.cmalloc(sc.victim_size)?;
        self.rt.cfree(p)?;
        if !after_reuse {
            let flagged = self.rt.cfree(p)? == FreeOutcome::DoubleFree;
            return Ok((Observation::Nothing, flagged));
        }
        // q legitimately owns the reused region
        let q = self.cmalloc(sc.victim_size)?;
        let mine = self.secret(size);
        self.owner_store(q, &mine)?;
        // the stale second free releases q's region, which the attacker gets next
        let flagged = self.rt.cfree(p)? == FreeOutcome::DoubleFree;
        let r = self.cmalloc(sc.victim_size)?;
        let payload = vec![ATTACK_BYTE; size as usize];
        self.owner_store(r, &payload)?;
        Ok((self.readback(q, payload)?, flagged))
    }

    fn physical_tamper(&mut self, sc: &Scenario, bit: Option<u64>) -> Result<Observation, RuntimeError> {
        let object = self.cmalloc(sc.victim_size)?;
        let size = self.rounded(sc.victim_size);
        let secret = self.secret(size);
        self.owner_store(object, &secret)?;
        self.rt.machine_mut().flush();
        let bits = size * 8;
        let bit = bit.map_or_else(|| self.rng.gen_range(0..bits), |b| b % bits);
        let byte_addr = object.address() + bit / 8;
        let block = (byte_addr / self.tg) as usize;
        let in_block = ((byte_addr % self.tg) * 8 + bit % 8) as usize;
        self.rt
            .machine_mut()
            .physmem_mut()
            .tamper(block, in_block)
            .expect("victim block lies inside memory");
        self.readback(object, secret)
    }

    fn cold_boot(&mut self, canary: &[u8]) -> Result<Observation, RuntimeError> {
        let len = canary.len() as u64;
        let at = self.rng.gen_range(0..CANARY_SLACK);
        match self.rng.gen_range(0..3) {
            0 => {
                let p = self.cmalloc(len + CANARY_SLACK)?;
                self.owner_store(p.offset(at), canary)?;
            }
            1 => {
                let p = self.malloc_plain(len + CANARY_SLACK)?;
                self.owner_store(p.offset(at), canary)?;
            }
            _ => {
                let mut init = vec![0u8; (len + CANARY_SLACK) as usize];
                init[at as usize..at as usize + canary.len()].copy_from_slice(canary);
                self.rt.register_global(GlobalDef::new("canary", init))?;
                self.rt.startup()?;
                let p = self.rt.global_pointer("canary")?;
                self.note(p);
            }
        }
        let dump = self.rt.machine_mut().cold_boot_dump();
        let found = !canary.is_empty() && dump.windows(canary.len()).any(|w| w == canary);
        Ok(if found {
            Observation::Nothing
        } else {
            Observation::Leak {
                leaked: Vec::new(),
                truth: canary.to_vec(),
            }
        })
    }

    fn chained(&mut self, sc: &Scenario, links: u32) -> Result<Mechanism, RuntimeError> {
        let mut corrupted = false;
        for _ in 0..links {
            let start = self.rounded(sc.victim_size);
            match self.overflow_write(sc, start, self.tg)?.classify() {
                Mechanism::Exception => return Ok(Mechanism::Exception),
                Mechanism::IntegrityCorrupted => corrupted = true,
                _ => {}
            }
        }
        Ok(if corrupted {
            Mechanism::IntegrityCorrupted
        } else {
            Mechanism::None
        })
    }

    fn stack_slot(&mut self, sc: &Scenario, offset: u64) -> Result<Observation, RuntimeError> {
        let frame = self.rt.push_frame();
        let target_size = self.tg;
        // allocated first, so it sits right above the victim slot
        let target = self.rt.stack_alloc(frame, target_size, true)?;
        self.note(target);
        let victim = self.rt.stack_alloc(frame, sc.victim_size, true)?;
        self.note(victim);
        let gap = target.address() - victim.address();
        let secret = self.secret(target_size);
        self.owner_store(target, &secret)?;
        let (start, len) = linear_span(sc.victim_size, offset);
        let payload = vec![ATTACK_BYTE; len as usize];
        if self.store(victim.offset(start), &payload)?.is_none() {
            return Ok(Observation::Exception);
        }
        let hit = overlap(start, len, gap, target_size);
        if hit.is_empty() {
            return Ok(Observation::Nothing);
        }
        let mut intended = secret;
        intended[hit].fill(ATTACK_BYTE);
        self.readback(target, intended)
    }

    fn heap_metadata(&mut self, sc: &Scenario) -> Result<Observation, RuntimeError> {
        let victim = self.cmalloc(sc.victim_size)?;
        let end = self.rounded(sc.victim_size);
        let header = self.malloc_plain(self.tg)?;
        debug_assert_eq!(header.address(), victim.address() + end);
        self.owner_store(header, &0x21u64.to_le_bytes())?;
        let forged = 0xdead_beef_u64.to_le_bytes();
        if self.store(victim.offset(end), &forged)?.is_none() {
            return Ok(Observation::Exception);
        }
        self.readback(header, forged.to_vec())
    }
}

/// Builds a fresh machine and runtime for `seed`, runs the scenario and
/// classifies what happened.
pub fn run_trial(cfg: &SimConfig, sc: &Scenario, seed: u64) -> Result<TrialResult, RuntimeError> {
    let cfg = cfg.clone().with_seed(seed);
    let tg = cfg.tg as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    let mut t = Trial {
        rt: Runtime::new(cfg)?,
        rng,
        colors: Vec::new(),
        tg,
    };
    let mut allocator_flagged = false;
    let mechanism = match &sc.attack {
        Attack::LinearOverflowRead { offset } => {
            let (start, len) = linear_span(sc.victim_size, *offset);
            t.overflow_read(sc, start, len)?.classify()
        }
        Attack::LinearOverflowWrite { offset } => {
            let (start, len) = linear_span(sc.victim_size, *offset);
            t.overflow_write(sc, start, len)?.classify()
        }
        Attack::NonlinearOob { delta, access } => match access {
            AccessKind::Read => t.overflow_read(sc, *delta, 8)?.classify(),
            AccessKind::Write => t.overflow_write(sc, *delta, 8)?.classify(),
        },
        Attack::HeartbleedOverread { length } => t.overflow_read(sc, 0, *length)?.classify(),
        Attack::UseAfterFree { access, phase } => t.use_after_free(sc, *access, *phase)?.classify(),
        Attack::DoubleFree { after_reuse } => {
            let (obs, flagged) = t.double_free(sc, *after_reuse)?;
            allocator_flagged = flagged;
            obs.classify()
        }
        Attack::IntraObjectOverflow { buffer_size } => t.intra_object(*buffer_size)?.classify(),
        Attack::PhysicalTamper { bit } => t.physical_tamper(sc, *bit)?.classify(),
        Attack::ColdBootSearch { canary } => t.cold_boot(canary.as_bytes())?.classify(),
        Attack::ChainedOverflow { links } => t.chained(sc, *links)?,
        Attack::StackSlotOverflow { offset } => t.stack_slot(sc, *offset)?.classify(),
        Attack::HeapMetadataOverwrite => t.heap_metadata(sc)?.classify(),
    };
    let machine = t.rt.machine();
    Ok(TrialResult {
        seed,
        detected: mechanism == Mechanism::Exception,
        mechanism,
        colors: t.colors,
        allocator_flagged,
        counters: machine.counters(),
        cache: machine.cache_stats(),
    })
}
