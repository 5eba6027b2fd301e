//! Cipher contract of the memory encryption engine.
//!
//! The engine encrypts memory in blocks of `tg` bytes. Its tweak combines the
//! color of the accessing pointer with the physical block index, so the same
//! plaintext encrypts differently per color and per location.
//!
//! The reference construction is a four-round balanced Feistel network whose
//! round function is SipHash-2-4 (128-bit output) keyed with the machine key
//! and the tweak. Four Luby–Rackoff rounds over a PRF give a strong
//! pseudorandom permutation, so every plaintext bit diffuses over the whole
//! block. The authenticated variant appends a 64-bit tag computed as a
//! truncated PRF over `(tweak, ciphertext)`.

use std::hash::Hasher;

use rand::RngCore;
use siphasher::sip128::{Hasher128, SipHasher24};

const ROUNDS: u8 = 4;
const DOMAIN_ROUND: u8 = 0x52;
const DOMAIN_TAG: u8 = 0x54;

/// 128-bit memory encryption key, fixed for the lifetime of a machine.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct CipherKey {
    k0: u64,
    k1: u64,
}

impl std::fmt::Debug for CipherKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CipherKey(..)")
    }
}

impl CipherKey {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        let (lo, hi) = bytes.split_at(8);
        Self {
            k0: u64::from_le_bytes(lo.try_into().unwrap()),
            k1: u64::from_le_bytes(hi.try_into().unwrap()),
        }
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        Self::from_bytes(bytes)
    }

    fn hasher(&self) -> SipHasher24 {
        SipHasher24::new_with_keys(self.k0, self.k1)
    }
}

/// Cipher tweak: zero-extended color field plus physical block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tweak {
    pub color: u64,
    pub block: u64,
}

impl Tweak {
    pub fn new(color: u64, block: u64) -> Self {
        Self { color, block }
    }

    /// Tweak used by uncolored accesses.
    pub fn uncolored(block: u64) -> Self {
        Self { color: 0, block }
    }

    fn absorb(&self, h: &mut SipHasher24) {
        h.write(&self.color.to_le_bytes());
        h.write(&self.block.to_le_bytes());
    }
}

/// Authentication tag of one block (authenticated policy only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AuthTag(pub u64);

fn round_function(k: &CipherKey, t: &Tweak, round: u8, input: &[u8], out: &mut [u8]) {
    for (counter, chunk) in out.chunks_mut(16).enumerate() {
        let mut h = k.hasher();
        h.write(&[DOMAIN_ROUND, round]);
        t.absorb(&mut h);
        h.write(&(counter as u32).to_le_bytes());
        h.write(input);
        let digest = h.finish128().as_bytes();
        chunk.copy_from_slice(&digest[..chunk.len()]);
    }
}

fn xor_into(dst: &mut [u8], src: &[u8]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

fn check_len(len: usize) {
    assert!(
        len >= 2 && len.is_multiple_of(2),
        "cipher block must be an even number of bytes, got {len}"
    );
}

/// Tweakable block encryption (encryption-only policy).
pub fn enc_s2(k: &CipherKey, t: &Tweak, plaintext: &[u8]) -> Vec<u8> {
    check_len(plaintext.len());
    let half = plaintext.len() / 2;
    let mut left = plaintext[..half].to_vec();
    let mut right = plaintext[half..].to_vec();
    let mut f = vec![0u8; half];
    for round in 0..ROUNDS {
        round_function(k, t, round, &right, &mut f);
        xor_into(&mut left, &f);
        std::mem::swap(&mut left, &mut right);
    }
    left.extend_from_slice(&right);
    left
}

/// Inverse of [`enc_s2`].
pub fn dec_s2(k: &CipherKey, t: &Tweak, ciphertext: &[u8]) -> Vec<u8> {
    check_len(ciphertext.len());
    let half = ciphertext.len() / 2;
    let mut left = ciphertext[..half].to_vec();
    let mut right = ciphertext[half..].to_vec();
    let mut f = vec![0u8; half];
    for round in (0..ROUNDS).rev() {
        std::mem::swap(&mut left, &mut right);
        round_function(k, t, round, &right, &mut f);
        xor_into(&mut left, &f);
    }
    left.extend_from_slice(&right);
    left
}

fn tag(k: &CipherKey, t: &Tweak, ciphertext: &[u8]) -> AuthTag {
    let mut h = k.hasher();
    h.write(&[DOMAIN_TAG]);
    t.absorb(&mut h);
    h.write(ciphertext);
    AuthTag(h.finish128().h1)
}

/// Authenticated encryption: the ciphertext of [`enc_s2`] plus a tag binding
/// key, color, block address and ciphertext.
pub fn enc_s1(k: &CipherKey, t: &Tweak, plaintext: &[u8]) -> (Vec<u8>, AuthTag) {
    let c = enc_s2(k, t, plaintext);
    let tag = tag(k, t, &c);
    (c, tag)
}

/// Verifies and decrypts; `None` is the engine's error value.
pub fn dec_s1(k: &CipherKey, t: &Tweak, ciphertext: &[u8], auth: AuthTag) -> Option<Vec<u8>> {
    (tag(k, t, ciphertext) == auth).then(|| dec_s2(k, t, ciphertext))
}

/// Encryption of the all-zero null pattern under `t` with a valid tag.
///
/// Writing this block re-keys a location to a new tweak without ever
/// decrypting what was there before.
pub fn nullify_block(k: &CipherKey, t: &Tweak, tg: usize) -> (Vec<u8>, AuthTag) {
    enc_s1(k, t, &vec![0u8; tg])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key(seed: u64) -> CipherKey {
        CipherKey::generate(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn bit_flip(buf: &mut [u8], bit: usize) {
        buf[bit / 8] ^= 1 << (bit % 8);
    }

    proptest! {
        #[test]
        fn s2_round_trip(seed in any::<u64>(), color in any::<u64>(), block in any::<u64>(), p in proptest::collection::vec(any::<u8>(), 16)) {
            let k = key(seed);
            let t = Tweak::new(color, block);
            prop_assert_eq!(dec_s2(&k, &t, &enc_s2(&k, &t, &p)), p);
        }

        #[test]
        fn s1_round_trip(seed in any::<u64>(), color in any::<u64>(), block in any::<u64>(), p in proptest::collection::vec(any::<u8>(), 64)) {
            let k = key(seed);
            let t = Tweak::new(color, block);
            let (c, a) = enc_s1(&k, &t, &p);
            prop_assert_eq!(dec_s1(&k, &t, &c, a), Some(p));
        }

        #[test]
        fn any_ciphertext_bit_flip_fails_verification(seed in any::<u64>(), bit in 0usize..128) {
            let k = key(seed);
            let t = Tweak::new(7, 3);
            let (mut c, a) = enc_s1(&k, &t, &[0x5a; 16]);
            bit_flip(&mut c, bit);
            prop_assert_eq!(dec_s1(&k, &t, &c, a), None);
        }

        #[test]
        fn wrong_color_or_address_fails(seed in any::<u64>(), color in 1u64..1000, dc in 1u64..1000, block in 0u64..1000, db in 1u64..1000) {
            let k = key(seed);
            let t = Tweak::new(color, block);
            let (c, a) = enc_s1(&k, &t, b"0123456789abcdef");
            prop_assert_eq!(dec_s1(&k, &Tweak::new(color + dc, block), &c, a), None);
            prop_assert_eq!(dec_s1(&k, &Tweak::new(color, block + db), &c, a), None);
        }
    }

    #[test]
    fn zero_block_never_encrypts_to_itself() {
        let zero = [0u8; 16];
        for seed in 0..1000 {
            let k = key(seed);
            assert_ne!(enc_s2(&k, &Tweak::new(seed, seed), &zero), zero);
        }
    }

    #[test]
    fn wrong_tweak_decrypts_to_garbage() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let k = CipherKey::generate(&mut rng);
            let p: [u8; 16] = rng.gen();
            let t = Tweak::new(rng.gen_range(1..1 << 25), rng.gen_range(0..4096));
            let t2 = Tweak::new(t.color ^ rng.gen_range(1..1 << 25), t.block);
            assert_ne!(dec_s2(&k, &t2, &enc_s2(&k, &t, &p)), p);
        }
    }

    #[test]
    fn colors_five_and_six_differ() {
        let k = key(9);
        let p = [0x11u8; 16];
        let (c5, _) = enc_s1(&k, &Tweak::new(5, 0), &p);
        let (c6, _) = enc_s1(&k, &Tweak::new(6, 0), &p);
        assert_ne!(c5, c6);
    }

    #[test]
    fn deterministic() {
        let k = key(3);
        let t = Tweak::new(11, 12);
        assert_eq!(enc_s1(&k, &t, &[1; 32]), enc_s1(&k, &t, &[1; 32]));
    }

    #[test]
    fn nullified_block_contract() {
        let k = key(4);
        let t = Tweak::new(42, 17);
        let (c, a) = nullify_block(&k, &t, 16);
        assert_eq!(dec_s1(&k, &t, &c, a), Some(vec![0; 16]));
        assert_eq!(dec_s1(&k, &Tweak::new(43, 17), &c, a), None);
        assert_eq!(dec_s1(&k, &Tweak::new(42, 18), &c, a), None);
    }

    #[test]
    fn single_bit_plaintext_flips_diffuse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = CipherKey::generate(&mut rng);
        let mut differing = 0usize;
        let trials = 1000;
        for _ in 0..trials {
            let t = Tweak::new(rng.gen_range(1..1 << 25), rng.gen_range(0..4096));
            let p: [u8; 16] = rng.gen();
            let mut q = p;
            bit_flip(&mut q, rng.gen_range(0..128));
            let a = enc_s2(&k, &t, &p);
            let b = enc_s2(&k, &t, &q);
            differing += a.iter().zip(&b).filter(|(x, y)| x != y).count();
        }
        assert!(differing as f64 / trials as f64 >= 4.0);
    }

    #[test]
    fn s2_is_a_permutation_over_one_byte() {
        let k = key(6);
        let t = Tweak::new(3, 9);
        let mut seen = std::collections::HashSet::new();
        for b in 0..=255u8 {
            let mut p = [0xAAu8; 16];
            p[7] = b;
            seen.insert(enc_s2(&k, &t, &p));
        }
        assert_eq!(seen.len(), 256);
    }

    #[test]
    fn wide_blocks_round_trip() {
        let k = key(8);
        let t = Tweak::new(1, 2);
        let p: Vec<u8> = (0..64).collect();
        assert_eq!(dec_s2(&k, &t, &enc_s2(&k, &t, &p)), p);
        let p2: Vec<u8> = vec![9, 8];
        assert_eq!(dec_s2(&k, &t, &enc_s2(&k, &t, &p2)), p2);
    }
}
