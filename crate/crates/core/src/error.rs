use thiserror::Error;

/// Invalid simulator configuration.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("color size {0} out of range (expected 1..=25 bits)")]
    ColorSize(u32),
    #[error("color size {0} leaves no valid colors (need at least 2 bits)")]
    NoValidColors(u32),
    #[error("tag granularity {0} must be a power of two and at least 2 bytes")]
    TagGranularity(usize),
    #[error("line size {line} is not a positive multiple of tag granularity {tg}")]
    LineSize { line: usize, tg: usize },
    #[error("cache geometry needs at least one set and one way")]
    Geometry,
    #[error("memory size {mem} must be a positive multiple of the line size {line} and fit in 39 bits")]
    MemorySize { mem: u64, line: usize },
    #[error("memory too small for the runtime layout ({0} bytes)")]
    LayoutTooSmall(u64),
    #[error("global `{0}` overlaps an existing global or lies outside the globals segment")]
    GlobalOverlap(String),
    #[error("global `{0}` registered twice")]
    DuplicateGlobal(String),
    #[error("unknown global `{0}`")]
    UnknownGlobal(String),
    #[error("globals can only be registered before startup")]
    AfterStartup,
}

/// Errors raised by simulator components outside the access path.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("block index {index} out of range ({blocks} blocks)")]
    BlockOutOfRange { index: usize, blocks: usize },
    #[error("bit position {bit} out of range for a {tg}-byte block")]
    BitOutOfRange { bit: usize, tg: usize },
}
