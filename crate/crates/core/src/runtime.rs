//! Software support on top of the machine: a colored heap allocator, colored
//! stack slots and global variables reached through colored indirection
//! cells.
//!
//! Memory is split into fixed segments: a guard line at address zero, the
//! indirection cell table, the globals image, the heap arena and the stack
//! (growing down from the top of memory).

use std::collections::BTreeMap;
use std::ops::Range;

use thiserror::Error;

use crate::error::ConfigError;
use crate::layout::{Color, ColoredPointer, Policy, SimConfig};
use crate::machine::{AccessError, Machine};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("heap exhausted allocating {0} bytes")]
    OutOfMemory(u64),
    #[error("free of {0:#x}, which is not an allocation base")]
    InvalidFree(u64),
    #[error("stack overflow allocating {0} bytes")]
    StackOverflow(u64),
    #[error("frame {0} is not the innermost frame")]
    NotInnermostFrame(usize),
}

/// Segments of the simulated address space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryLayout {
    pub cells: Range<u64>,
    pub globals: Range<u64>,
    pub heap: Range<u64>,
    pub stack: Range<u64>,
}

impl MemoryLayout {
    pub fn for_config(cfg: &SimConfig) -> Result<Self, ConfigError> {
        let m = cfg.mem_size;
        let line = cfg.line_size as u64;
        let down = |x: u64| x - x % line;
        let guard = line;
        let cells = guard..down(guard + m / 32).max(guard);
        let globals = cells.end..down(m / 8);
        let heap = globals.end..down(m / 4 * 3);
        let stack = heap.end..m;
        let layout = Self {
            cells,
            globals,
            heap,
            stack,
        };
        let segments = [&layout.cells, &layout.globals, &layout.heap, &layout.stack];
        if segments.iter().any(|r| r.start >= r.end) {
            return Err(ConfigError::LayoutTooSmall(m));
        }
        Ok(layout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocState {
    Live(Option<Color>),
    Freed,
}

/// Out-of-band administration entry for one allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocRecord {
    pub requested: u64,
    /// Size rounded up to the tag granularity.
    pub size: u64,
    pub state: AllocState,
}

/// First-fit free list over the heap arena plus the administration map.
#[derive(Debug, Clone)]
pub struct HeapState {
    free: Vec<Range<u64>>,
    admin: BTreeMap<u64, AllocRecord>,
}

impl HeapState {
    fn new(arena: Range<u64>) -> Self {
        Self {
            free: vec![arena],
            admin: BTreeMap::new(),
        }
    }

    fn carve(&mut self, size: u64) -> Option<u64> {
        let i = self.free.iter().position(|r| r.end - r.start >= size)?;
        let base = self.free[i].start;
        self.free[i].start += size;
        if self.free[i].is_empty() {
            self.free.remove(i);
        }
        // stale records of earlier, differently carved allocations
        let stale: Vec<u64> = self.admin.range(base..base + size).map(|(b, _)| *b).collect();
        for b in stale {
            self.admin.remove(&b);
        }
        Some(base)
    }

    fn release(&mut self, region: Range<u64>) {
        let i = self.free.partition_point(|r| r.start < region.start);
        self.free.insert(i, region);
        // coalesce neighbours
        let mut merged: Vec<Range<u64>> = Vec::with_capacity(self.free.len());
        for r in self.free.drain(..) {
            match merged.last_mut() {
                Some(last) if last.end == r.start => last.end = r.end,
                _ => merged.push(r),
            }
        }
        self.free = merged;
    }

    pub fn record(&self, base: u64) -> Option<&AllocRecord> {
        self.admin.get(&base)
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.iter().map(|r| r.end - r.start).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeOutcome {
    Released,
    /// The base was already freed; the allocator ignored the call.
    DoubleFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuntimeEvent {
    DoubleFree { base: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FrameId(usize);

#[derive(Debug, Clone)]
struct Slot {
    addr: u64,
    size: u64,
    protected: bool,
}

#[derive(Debug, Clone)]
struct Frame {
    entry_sp: u64,
    slots: Vec<Slot>,
}

#[derive(Debug, Clone)]
struct StackState {
    segment: Range<u64>,
    sp: u64,
    frames: Vec<Frame>,
    color: Option<Color>,
}

impl StackState {
    fn base_pointer(&self, addr: u64) -> ColoredPointer {
        let p = ColoredPointer::from_address(addr);
        self.color.map_or(p, |c| p.with_color(c))
    }
}

/// A pointer-valued field inside a global's initializer that must point at
/// another global once colors are assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointerFixup {
    pub offset: usize,
    pub target: String,
    pub addend: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalDef {
    pub name: String,
    pub init: Vec<u8>,
    pub fixups: Vec<PointerFixup>,
    pub protect: bool,
}

impl GlobalDef {
    pub fn new(name: impl Into<String>, init: impl Into<Vec<u8>>) -> Self {
        Self {
            name: name.into(),
            init: init.into(),
            fixups: Vec::new(),
            protect: true,
        }
    }

    pub fn with_fixup(mut self, offset: usize, target: impl Into<String>, addend: u64) -> Self {
        self.fixups.push(PointerFixup {
            offset,
            target: target.into(),
            addend,
        });
        self
    }

    pub fn unprotected(mut self) -> Self {
        self.protect = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalRecord {
    pub def: GlobalDef,
    /// Plain address of the data.
    pub address: u64,
    /// Rounded size.
    pub size: u64,
    /// Address of the indirection cell holding the colored pointer.
    pub cell: u64,
}

pub struct Runtime {
    machine: Machine,
    layout: MemoryLayout,
    heap: HeapState,
    stack: StackState,
    globals: Vec<GlobalRecord>,
    next_global: u64,
    started: bool,
    events: Vec<RuntimeEvent>,
}

impl Runtime {
    pub fn new(cfg: SimConfig) -> Result<Self, RuntimeError> {
        Self::with_machine(Machine::new(cfg)?)
    }

    pub fn with_machine(machine: Machine) -> Result<Self, RuntimeError> {
        let layout = MemoryLayout::for_config(machine.config())?;
        Ok(Self {
            heap: HeapState::new(layout.heap.clone()),
            stack: StackState {
                segment: layout.stack.clone(),
                sp: layout.stack.end,
                frames: Vec::new(),
                color: None,
            },
            next_global: layout.globals.start,
            globals: Vec::new(),
            started: false,
            events: Vec::new(),
            layout,
            machine,
        })
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn machine_mut(&mut self) -> &mut Machine {
        &mut self.machine
    }

    pub fn into_machine(self) -> Machine {
        self.machine
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn heap(&self) -> &HeapState {
        &self.heap
    }

    pub fn events(&self) -> &[RuntimeEvent] {
        &self.events
    }

    fn policy(&self) -> Policy {
        self.machine.config().policy
    }

    fn rounded(&self, size: u64) -> u64 {
        self.machine.config().align_up(size)
    }

    fn reserve(&mut self, size: u64, color: Option<Color>) -> Result<(u64, u64), RuntimeError> {
        if size == 0 {
            return Err(RuntimeError::ZeroSize);
        }
        let rounded = self.rounded(size);
        let base = self.heap.carve(rounded).ok_or(RuntimeError::OutOfMemory(size))?;
        self.heap.admin.insert(
            base,
            AllocRecord {
                requested: size,
                size: rounded,
                state: AllocState::Live(color),
            },
        );
        Ok((base, rounded))
    }

    /// Colored `malloc`: rounds to the tag granularity, colors the pointer
    /// with `mstp` and, under the authenticated policy, nullifies the region
    /// under the new color.
    pub fn cmalloc(&mut self, size: u64) -> Result<ColoredPointer, RuntimeError> {
        let (base, rounded) = self.reserve(size, None)?;
        let p = self.machine.mstp(ColoredPointer::from_address(base));
        if let Some(r) = self.heap.admin.get_mut(&base) {
            r.state = AllocState::Live(p.color());
        }
        if self.policy() == Policy::S1 {
            self.machine.nullify_region(p, rounded)?;
        }
        Ok(p)
    }

    /// Allocation made by unprotected code: an uncolored pointer to memory
    /// readable through the uncolored tweak.
    pub fn malloc_plain(&mut self, size: u64) -> Result<ColoredPointer, RuntimeError> {
        let (base, rounded) = self.reserve(size, None)?;
        let p = ColoredPointer::from_address(base);
        if self.policy() == Policy::S1 {
            self.machine.nullify_region(p, rounded)?;
        }
        Ok(p)
    }

    /// Colored `free`: strips the color and returns the region to the free
    /// list. Memory contents stay as they are unless re-coloring on free is
    /// enabled.
    pub fn cfree(&mut self, p: ColoredPointer) -> Result<FreeOutcome, RuntimeError> {
        let base = p.strip_color().address();
        let record = *self.heap.admin.get(&base).ok_or(RuntimeError::InvalidFree(base))?;
        let current = match record.state {
            AllocState::Freed => {
                self.events.push(RuntimeEvent::DoubleFree { base });
                return Ok(FreeOutcome::DoubleFree);
            }
            AllocState::Live(c) => c,
        };
        if self.machine.config().recolor_on_free {
            let throwaway = loop {
                let c = self.machine.fresh_color();
                if Some(c) != current {
                    break c;
                }
            };
            self.machine
                .nullify_region(ColoredPointer::compose(throwaway, base), record.size)?;
        }
        self.heap.admin.insert(
            base,
            AllocRecord {
                state: AllocState::Freed,
                ..record
            },
        );
        self.heap.release(base..base + record.size);
        Ok(FreeOutcome::Released)
    }

    /// Colors the stack with one random color so that spills and unprotected
    /// slots are separated from null-colored memory.
    pub fn color_stack_pointer(&mut self) -> Result<ColoredPointer, RuntimeError> {
        let seg = self.stack.segment.clone();
        let p = self.machine.mstp(ColoredPointer::from_address(seg.start));
        self.stack.color = p.color();
        if self.policy() == Policy::S1 {
            self.machine.nullify_region(p, seg.end - seg.start)?;
        }
        Ok(self.stack_pointer())
    }

    /// Current stack pointer, carrying the stack color if one was assigned.
    pub fn stack_pointer(&self) -> ColoredPointer {
        self.stack.base_pointer(self.stack.sp)
    }

    pub fn push_frame(&mut self) -> FrameId {
        self.stack.frames.push(Frame {
            entry_sp: self.stack.sp,
            slots: Vec::new(),
        });
        FrameId(self.stack.frames.len() - 1)
    }

    fn check_innermost(&self, frame: FrameId) -> Result<(), RuntimeError> {
        if frame.0 + 1 == self.stack.frames.len() {
            Ok(())
        } else {
            Err(RuntimeError::NotInnermostFrame(frame.0))
        }
    }

    /// Allocates a TG-aligned stack slot. Protected slots get their own color;
    /// unprotected slots share the stack color (or none).
    pub fn stack_alloc(&mut self, frame: FrameId, size: u64, protect: bool) -> Result<ColoredPointer, RuntimeError> {
        self.check_innermost(frame)?;
        if size == 0 {
            return Err(RuntimeError::ZeroSize);
        }
        let rounded = self.rounded(size);
        let addr = self
            .stack
            .sp
            .checked_sub(rounded)
            .filter(|a| *a >= self.stack.segment.start)
            .ok_or(RuntimeError::StackOverflow(size))?;
        self.stack.sp = addr;
        self.stack.frames[frame.0].slots.push(Slot {
            addr,
            size: rounded,
            protected: protect,
        });
        if !protect {
            return Ok(self.stack.base_pointer(addr));
        }
        let p = self.machine.mstp(ColoredPointer::from_address(addr));
        if self.policy() == Policy::S1 {
            self.machine.nullify_region(p, rounded)?;
        }
        Ok(p)
    }

    /// Pops a frame. Under the authenticated policy protected slots are handed
    /// back to the stack color so later frames can reuse the space.
    pub fn frame_exit(&mut self, frame: FrameId) -> Result<(), RuntimeError> {
        self.check_innermost(frame)?;
        let f = self.stack.frames.pop().expect("checked innermost");
        if self.policy() == Policy::S1 {
            for s in f.slots.iter().filter(|s| s.protected) {
                let p = self.stack.base_pointer(s.addr);
                self.machine.nullify_region(p, s.size)?;
            }
        }
        self.stack.sp = f.entry_sp;
        Ok(())
    }

    /// Registers a global at the next free address of the globals image and
    /// writes its initializer there in plain.
    pub fn register_global(&mut self, def: GlobalDef) -> Result<u64, RuntimeError> {
        let addr = self.next_global;
        self.register_global_at(addr, def)
    }

    pub fn register_global_at(&mut self, address: u64, def: GlobalDef) -> Result<u64, RuntimeError> {
        if self.started {
            return Err(ConfigError::AfterStartup.into());
        }
        if self.globals.iter().any(|g| g.def.name == def.name) {
            return Err(ConfigError::DuplicateGlobal(def.name).into());
        }
        let tg = self.machine.config().tg as u64;
        let size = self.rounded(def.init.len().max(1) as u64);
        let end = address + size;
        let seg = &self.layout.globals;
        let overlaps = self
            .globals
            .iter()
            .any(|g| address < g.address + g.size && g.address < end);
        if !address.is_multiple_of(tg) || address < seg.start || end > seg.end || overlaps {
            return Err(ConfigError::GlobalOverlap(def.name).into());
        }
        let cell = self.layout.cells.start + 8 * self.globals.len() as u64;
        if cell + 8 > self.layout.cells.end {
            return Err(ConfigError::LayoutTooSmall(self.machine.config().mem_size).into());
        }
        let plain = ColoredPointer::from_address(address);
        if !def.init.is_empty() {
            self.machine.store(plain, &def.init)?;
        }
        self.machine
            .store_u64(ColoredPointer::from_address(cell), plain.raw())?;
        self.next_global = self.next_global.max(end);
        self.globals.push(GlobalRecord {
            def,
            address,
            size,
            cell,
        });
        Ok(address)
    }

    /// Program start: colors every protected global, re-encrypts its
    /// initializer under the new color and patches pointer fields.
    pub fn startup(&mut self) -> Result<(), RuntimeError> {
        if self.started {
            return Err(ConfigError::AfterStartup.into());
        }
        let mut colored = Vec::with_capacity(self.globals.len());
        for g in &self.globals {
            let plain = ColoredPointer::from_address(g.address);
            colored.push(if g.def.protect { self.machine.mstp(plain) } else { plain });
        }
        for (i, g) in self.globals.clone().iter().enumerate() {
            let plain = ColoredPointer::from_address(g.address);
            let mut data = if g.def.init.is_empty() {
                Vec::new()
            } else {
                self.machine.load(plain, g.def.init.len())?
            };
            for fx in &g.def.fixups {
                let target = self
                    .globals
                    .iter()
                    .position(|t| t.def.name == fx.target)
                    .ok_or_else(|| ConfigError::UnknownGlobal(fx.target.clone()))?;
                let value = colored[target].offset(fx.addend).raw();
                data[fx.offset..fx.offset + 8].copy_from_slice(&value.to_le_bytes());
            }
            let ptr = colored[i];
            if g.def.protect && self.policy() == Policy::S1 {
                self.machine.nullify_region(ptr, g.size)?;
            }
            if !data.is_empty() {
                self.machine.store(ptr, &data)?;
            }
            self.machine
                .store_u64(ColoredPointer::from_address(g.cell), ptr.raw())?;
        }
        self.started = true;
        Ok(())
    }

    pub fn global(&self, name: &str) -> Option<&GlobalRecord> {
        self.globals.iter().find(|g| g.def.name == name)
    }

    /// Reads the indirection cell of `name`: one load, as instrumented code
    /// would do on every reference.
    pub fn global_pointer(&mut self, name: &str) -> Result<ColoredPointer, RuntimeError> {
        let cell = self
            .global(name)
            .ok_or_else(|| ConfigError::UnknownGlobal(name.to_string()))?
            .cell;
        Ok(ColoredPointer::from_raw(
            self.machine.load_u64(ColoredPointer::from_address(cell))?,
        ))
    }
}
