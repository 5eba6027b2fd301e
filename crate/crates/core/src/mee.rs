//! Memory encryption engine: sits between the cache and off-chip memory and
//! applies the cipher contract with the color-derived tweak.

use crate::crypto::{self, CipherKey, Tweak};
use crate::layout::{Policy, SimConfig};
use crate::physmem::{EncryptedBlock, PhysicalMemory};

/// Tag verification failed for a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unauthentic;

pub struct MemoryEncryptionEngine {
    key: CipherKey,
    policy: Policy,
    tg: usize,
    memory: PhysicalMemory,
}

impl MemoryEncryptionEngine {
    pub fn new(cfg: &SimConfig, key: CipherKey) -> Self {
        Self {
            key,
            policy: cfg.policy,
            tg: cfg.tg,
            memory: PhysicalMemory::new(cfg, key),
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn memory(&self) -> &PhysicalMemory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut PhysicalMemory {
        &mut self.memory
    }

    /// Fetches and decrypts block `index` under `color`. Only the
    /// authenticated policy can fail.
    pub fn read(&mut self, index: usize, color: u64) -> Result<Vec<u8>, Unauthentic> {
        let block = self
            .memory
            .read_block(index)
            .expect("engine accesses stay inside validated memory");
        let tweak = Tweak::new(color, index as u64);
        match self.policy {
            Policy::S1 => {
                let tag = block.tag.expect("authenticated memory stores tags");
                crypto::dec_s1(&self.key, &tweak, &block.ciphertext, tag).ok_or(Unauthentic)
            }
            Policy::S2 => Ok(crypto::dec_s2(&self.key, &tweak, &block.ciphertext)),
        }
    }

    pub fn write(&mut self, index: usize, color: u64, plaintext: &[u8]) {
        debug_assert_eq!(plaintext.len(), self.tg);
        let tweak = Tweak::new(color, index as u64);
        let block = match self.policy {
            Policy::S1 => {
                let (ciphertext, tag) = crypto::enc_s1(&self.key, &tweak, plaintext);
                EncryptedBlock {
                    ciphertext,
                    tag: Some(tag),
                }
            }
            Policy::S2 => EncryptedBlock {
                ciphertext: crypto::enc_s2(&self.key, &tweak, plaintext),
                tag: None,
            },
        };
        self.memory
            .write_block(index, block)
            .expect("engine accesses stay inside validated memory");
    }

    /// Re-keys block `index` to `color` holding the null pattern, without
    /// verifying its previous content.
    pub fn nullify(&mut self, index: usize, color: u64) {
        let (ciphertext, tag) = crypto::nullify_block(&self.key, &Tweak::new(color, index as u64), self.tg);
        let block = EncryptedBlock {
            ciphertext,
            tag: self.policy.is_authenticated().then_some(tag),
        };
        self.memory
            .write_block(index, block)
            .expect("engine accesses stay inside validated memory");
    }
}
