//! Functional simulator of cryptographically colored memory.
//!
//! Pointers carry a random color in their upper bits. The color travels
//! alongside the physical address through a color-aware L1 data cache into a
//! memory encryption engine, where it is used as the cipher tweak. Accessing
//! memory with the wrong color either raises an authentication exception
//! ([`Policy::S1`]) or yields pseudorandom plaintext ([`Policy::S2`]).
//!
//! The crate is layered bottom-up:
//!
//! * [`layout`]: configuration, colors and the colored pointer format.
//! * [`analytics`]: closed-form color-bit overhead and detection
//!   probabilities, generic over the scalar type.
//! * [`crypto`]: the cipher contract used by the encryption engine.
//! * [`physmem`]: off-chip memory holding only ciphertext, with the
//!   physical attacker's interfaces.
//! * [`cache`]: set-associative write-back cache with per-granule colors.
//! * [`machine`]: `mstp`, load/store pipeline and the exception model.
//! * [`runtime`]: colored heap, stack and global-variable support.
//! * [`harness`]: attack scenarios and the Monte-Carlo engine.

pub mod analytics;
pub mod cache;
pub mod crypto;
pub mod error;
pub mod harness;
pub mod layout;
pub mod machine;
pub mod mee;
pub mod physmem;
pub mod runtime;
pub mod scalar;
pub mod stats;

pub use error::{ConfigError, SimError};
pub use layout::{Color, ColoredPointer, Policy, SimConfig};
pub use machine::{AccessError, AccessOutcome, Machine};
pub use runtime::Runtime;
pub use scalar::Scalar;

/// Floating-point scalar used for reported probabilities and rates.
pub type Real = f64;

/// Exact rational scalar used by the analytic oracles.
pub type Exact = num_rational::Ratio<i64>;
