//! Off-chip memory. Every block holds ciphertext; the authenticated policy
//! keeps one tag per block in a parallel array.
//!
//! Boot-time content is the null pattern encrypted under the uncolored tweak.
//! Blocks are materialized lazily on first write or tamper, which is
//! observationally identical to encrypting the whole array up front.

use crate::crypto::{self, AuthTag, CipherKey, Tweak};
use crate::error::SimError;
use crate::layout::{Policy, SimConfig};

/// One TG block as stored off-chip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedBlock {
    pub ciphertext: Vec<u8>,
    /// Present only under the authenticated policy.
    pub tag: Option<AuthTag>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryTraffic {
    pub block_reads: u64,
    pub block_writes: u64,
}

pub struct PhysicalMemory {
    tg: usize,
    policy: Policy,
    boot_key: CipherKey,
    data: Vec<u8>,
    tags: Vec<u64>,
    materialized: Vec<bool>,
    traffic: MemoryTraffic,
}

impl PhysicalMemory {
    /// Fresh memory for `cfg`; `key` only determines the boot-time null blocks.
    pub fn new(cfg: &SimConfig, key: CipherKey) -> Self {
        let blocks = cfg.memory_blocks();
        Self {
            tg: cfg.tg,
            policy: cfg.policy,
            boot_key: key,
            data: vec![0; cfg.mem_size as usize],
            tags: if cfg.policy.is_authenticated() {
                vec![0; blocks]
            } else {
                Vec::new()
            },
            materialized: vec![false; blocks],
            traffic: MemoryTraffic::default(),
        }
    }

    pub fn block_count(&self) -> usize {
        self.materialized.len()
    }

    pub fn traffic(&self) -> MemoryTraffic {
        self.traffic
    }

    fn check(&self, index: usize) -> Result<(), SimError> {
        if index < self.block_count() {
            Ok(())
        } else {
            Err(SimError::BlockOutOfRange {
                index,
                blocks: self.block_count(),
            })
        }
    }

    fn boot_block(&self, index: usize) -> EncryptedBlock {
        let (ciphertext, tag) = crypto::nullify_block(&self.boot_key, &Tweak::uncolored(index as u64), self.tg);
        EncryptedBlock {
            ciphertext,
            tag: self.policy.is_authenticated().then_some(tag),
        }
    }

    fn peek(&self, index: usize) -> EncryptedBlock {
        if !self.materialized[index] {
            return self.boot_block(index);
        }
        let range = index * self.tg..(index + 1) * self.tg;
        EncryptedBlock {
            ciphertext: self.data[range].to_vec(),
            tag: self.policy.is_authenticated().then(|| AuthTag(self.tags[index])),
        }
    }

    fn materialize(&mut self, index: usize) {
        if !self.materialized[index] {
            let b = self.boot_block(index);
            self.store(index, &b);
        }
    }

    fn store(&mut self, index: usize, block: &EncryptedBlock) {
        let range = index * self.tg..(index + 1) * self.tg;
        self.data[range].copy_from_slice(&block.ciphertext);
        if let (Some(tag), true) = (block.tag, self.policy.is_authenticated()) {
            self.tags[index] = tag.0;
        }
        self.materialized[index] = true;
    }

    pub fn read_block(&mut self, index: usize) -> Result<EncryptedBlock, SimError> {
        self.check(index)?;
        self.traffic.block_reads += 1;
        Ok(self.peek(index))
    }

    pub fn write_block(&mut self, index: usize, block: EncryptedBlock) -> Result<(), SimError> {
        self.check(index)?;
        assert_eq!(block.ciphertext.len(), self.tg, "block length must equal tg");
        self.traffic.block_writes += 1;
        self.store(index, &block);
        Ok(())
    }

    /// Flips one ciphertext bit without touching the tag.
    pub fn tamper(&mut self, index: usize, bit: usize) -> Result<(), SimError> {
        self.check(index)?;
        if bit >= self.tg * 8 {
            return Err(SimError::BitOutOfRange { bit, tg: self.tg });
        }
        self.materialize(index);
        self.data[index * self.tg + bit / 8] ^= 1 << (bit % 8);
        Ok(())
    }

    /// Raw contents as a physical attacker would read them: all ciphertext,
    /// followed by the little-endian tags under the authenticated policy.
    pub fn cold_boot_dump(&self) -> Vec<u8> {
        let blocks = self.block_count();
        let tag_bytes = if self.policy.is_authenticated() { 8 * blocks } else { 0 };
        let mut out = Vec::with_capacity(self.data.len() + tag_bytes);
        let mut tags = Vec::with_capacity(tag_bytes);
        for i in 0..blocks {
            let b = self.peek(i);
            out.extend_from_slice(&b.ciphertext);
            if let Some(t) = b.tag {
                tags.extend_from_slice(&t.0.to_le_bytes());
            }
        }
        out.extend_from_slice(&tags);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(policy: Policy) -> (PhysicalMemory, CipherKey, SimConfig) {
        let cfg = SimConfig::default().with_policy(policy).with_mem_size(4096);
        let key = CipherKey::generate(&mut ChaCha8Rng::seed_from_u64(1));
        (PhysicalMemory::new(&cfg, key), key, cfg)
    }

    #[test]
    fn write_then_read() {
        let (mut m, k, _) = setup(Policy::S1);
        let (c, tag) = crypto::enc_s1(&k, &Tweak::new(3, 5), &[7; 16]);
        let b = EncryptedBlock {
            ciphertext: c,
            tag: Some(tag),
        };
        m.write_block(5, b.clone()).unwrap();
        assert_eq!(m.read_block(5).unwrap(), b);
    }

    #[test]
    fn fresh_memory_is_nullified_under_tweak_zero() {
        let (mut m, k, _) = setup(Policy::S1);
        let b = m.read_block(9).unwrap();
        let p = crypto::dec_s1(&k, &Tweak::uncolored(9), &b.ciphertext, b.tag.unwrap());
        assert_eq!(p, Some(vec![0; 16]));
    }

    #[test]
    fn bounds_fault() {
        let (mut m, _, _) = setup(Policy::S2);
        let n = m.block_count();
        assert_eq!(n, 256);
        assert!(matches!(m.read_block(n), Err(SimError::BlockOutOfRange { .. })));
        assert!(m.tamper(0, 128).is_err());
    }

    #[test]
    fn tamper_s1_breaks_tag_and_is_isolated() {
        let (mut m, k, _) = setup(Policy::S1);
        let (c, tag) = crypto::enc_s1(&k, &Tweak::new(3, 2), b"SECRET_CANARY_01");
        m.write_block(
            2,
            EncryptedBlock {
                ciphertext: c,
                tag: Some(tag),
            },
        )
        .unwrap();
        let before3 = m.read_block(3).unwrap();
        m.tamper(2, 77).unwrap();
        let b = m.read_block(2).unwrap();
        assert_eq!(
            crypto::dec_s1(&k, &Tweak::new(3, 2), &b.ciphertext, b.tag.unwrap()),
            None
        );
        assert_eq!(m.read_block(3).unwrap(), before3);
    }

    #[test]
    fn tamper_s2_corrupts_plaintext() {
        let (mut m, k, _) = setup(Policy::S2);
        let p = *b"SECRET_CANARY_01";
        let c = crypto::enc_s2(&k, &Tweak::new(3, 2), &p);
        m.write_block(
            2,
            EncryptedBlock {
                ciphertext: c,
                tag: None,
            },
        )
        .unwrap();
        m.tamper(2, 0).unwrap();
        let b = m.read_block(2).unwrap();
        assert_ne!(crypto::dec_s2(&k, &Tweak::new(3, 2), &b.ciphertext), p.to_vec());
    }

    #[test]
    fn dump_size_and_stability() {
        let (m, _, cfg) = setup(Policy::S1);
        let d = m.cold_boot_dump();
        assert_eq!(d.len() as u64, cfg.mem_size + 8 * cfg.memory_blocks() as u64);
        assert_eq!(d, m.cold_boot_dump());
        let (m, _, cfg) = setup(Policy::S2);
        assert_eq!(m.cold_boot_dump().len() as u64, cfg.mem_size);
    }
}
