use serde::{Deserialize, Serialize};

use crate::layout::Policy;

/// When a dangling pointer is used relative to re-allocation of its region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BeforeReuse,
    AfterReuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
}

/// How victim and neighbor are placed on the heap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeapLayout {
    /// Consecutive TG-rounded allocations, each with its own color.
    #[default]
    Rounded,
    /// Objects packed at 16-byte spacing without rounding, so objects in one
    /// tag granule share its color.
    SharedGranule,
}

/// The attacker's step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attack {
    /// Sequential read from the victim's end up to and including `offset`.
    LinearOverflowRead {
        offset: u64,
    },
    /// Sequential write from the victim's end up to and including `offset`.
    LinearOverflowWrite {
        offset: u64,
    },
    /// Single 8-byte access at `victim + delta`.
    NonlinearOob {
        delta: u64,
        #[serde(default = "read_kind")]
        access: AccessKind,
    },
    UseAfterFree {
        access: AccessKind,
        phase: Phase,
    },
    /// Free twice; with `after_reuse` the second free hits a region that was
    /// already handed out again.
    DoubleFree {
        #[serde(default = "yes")]
        after_reuse: bool,
    },
    /// Overflow from a buffer into a field of the same object.
    IntraObjectOverflow {
        buffer_size: u64,
    },
    /// Read `length` bytes starting at the victim base.
    HeartbleedOverread {
        length: u64,
    },
    /// Flip one ciphertext bit of the victim (random bit when absent).
    PhysicalTamper {
        #[serde(default)]
        bit: Option<u64>,
    },
    /// Store `canary` and search the raw memory dump for it.
    ColdBootSearch {
        #[serde(default = "default_canary")]
        canary: String,
    },
    /// `links` independent adjacent-object overflows, all of which must
    /// succeed for the attack to go unnoticed.
    ChainedOverflow {
        links: u32,
    },
    /// Overflow write from one colored stack slot into the slot above it.
    StackSlotOverflow {
        offset: u64,
    },
    /// Overwrite an in-band, plain allocator header after the victim.
    HeapMetadataOverwrite,
}

fn read_kind() -> AccessKind {
    AccessKind::Read
}

fn yes() -> bool {
    true
}

pub const DEFAULT_CANARY: &str = "SECRET_CANARY_0123";

fn default_canary() -> String {
    DEFAULT_CANARY.to_string()
}

fn default_victim_size() -> u64 {
    32
}

/// What a trial observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Authentication exception raised by the attack.
    Exception,
    /// Bytes obtained by the attacker differ from the victim's plaintext.
    ConfidentialityPreserved,
    /// The defender reads back something other than the attacker's value.
    IntegrityCorrupted,
    /// The attack had its intended effect.
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectations {
    #[serde(default)]
    pub s1: Option<Mechanism>,
    #[serde(default)]
    pub s2: Option<Mechanism>,
}

impl Expectations {
    pub fn for_policy(&self, policy: Policy) -> Option<Mechanism> {
        match policy {
            Policy::S1 => self.s1,
            Policy::S2 => self.s2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_victim_size")]
    pub victim_size: u64,
    /// Defaults to four tag granules (or enough to cover the attack).
    #[serde(default)]
    pub neighbor_size: Option<u64>,
    #[serde(default)]
    pub layout: HeapLayout,
    pub attack: Attack,
    #[serde(default)]
    pub expect: Expectations,
}

impl Scenario {
    pub fn new(name: impl Into<String>, attack: Attack) -> Self {
        Self {
            name: name.into(),
            victim_size: default_victim_size(),
            neighbor_size: None,
            layout: HeapLayout::Rounded,
            attack,
            expect: Expectations::default(),
        }
    }

    pub fn with_victim_size(mut self, size: u64) -> Self {
        self.victim_size = size;
        self
    }

    pub fn with_neighbor_size(mut self, size: u64) -> Self {
        self.neighbor_size = Some(size);
        self
    }

    pub fn with_layout(mut self, layout: HeapLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn expecting(mut self, s1: Option<Mechanism>, s2: Option<Mechanism>) -> Self {
        self.expect = Expectations { s1, s2 };
        self
    }
}

/// Top-level shape of a scenario file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub scenarios: Vec<Scenario>,
}
