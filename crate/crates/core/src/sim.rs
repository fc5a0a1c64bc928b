//! Deterministic cycle-stepped execution of one [`TaskProgram`] per core.
//!
//! Each cycle the engine first applies every remote write whose delivery
//! cycle has come, then steps cores in (row, col) order. Cycles in which
//! nothing can change are skipped, which does not alter any result.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{LocalMemory, MemoryError};
use crate::mesh::{resolve_address, write_delivery_cycle, CoreId, GlobalAddress, MeshConfig, MeshError};

pub const DEFAULT_WATCHDOG: u64 = 100_000_000;

/// Pure transform over the executing core's memory.
pub type ComputeAction = Arc<dyn Fn(&mut LocalMemory) -> Result<(), MemoryError> + Send + Sync>;

/// Output a Compute step writes into another core while it runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputStream {
    /// Local staging region holding the bytes after the action ran.
    pub src_offset: u32,
    pub len: u32,
    pub dst: GlobalAddress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    /// Immediate 32-bit word, typically a flag value.
    Word(i32),
    /// Copy of a region of the issuing core's memory.
    Local { offset: u32, len: u32 },
}

impl Payload {
    fn len(&self) -> u32 {
        match *self {
            Payload::Word(_) => 4,
            Payload::Local { len, .. } => len,
        }
    }
}

#[derive(Clone)]
pub enum Instr {
    /// Occupies the core for `cost` cycles. The action runs on entry; an
    /// attached stream delivers its region as the step produces it.
    Compute {
        cost: u64,
        action: Option<ComputeAction>,
        stream: Option<OutputStream>,
    },
    /// One issue cycle; the payload travels the write network.
    RemoteWrite { dst: GlobalAddress, payload: Payload },
    SetLocalFlag { offset: u32, value: i32 },
    /// Blocks until the word at `offset` equals `expected`, then rewrites it
    /// to `clear_to` and spends `detect_cycles` on the detect-and-clear path.
    WaitFlag {
        offset: u32,
        expected: i32,
        clear_to: i32,
        detect_cycles: u64,
    },
    Probe(String),
}

impl fmt::Debug for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instr::Compute { cost, action, stream } => f
                .debug_struct("Compute")
                .field("cost", cost)
                .field("action", &action.as_ref().map(|_| "<fn>"))
                .field("stream", stream)
                .finish(),
            Instr::RemoteWrite { dst, payload } => f
                .debug_struct("RemoteWrite")
                .field("dst", &format_args!("{dst}"))
                .field("payload", payload)
                .finish(),
            Instr::SetLocalFlag { offset, value } => f
                .debug_struct("SetLocalFlag")
                .field("offset", offset)
                .field("value", value)
                .finish(),
            Instr::WaitFlag {
                offset,
                expected,
                clear_to,
                detect_cycles,
            } => f
                .debug_struct("WaitFlag")
                .field("offset", offset)
                .field("expected", expected)
                .field("clear_to", clear_to)
                .field("detect_cycles", detect_cycles)
                .finish(),
            Instr::Probe(label) => f.debug_tuple("Probe").field(label).finish(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskProgram {
    pub core: CoreId,
    pub instrs: Vec<Instr>,
    /// Memory contents present before cycle 0.
    pub preload: Vec<(u32, Vec<u8>)>,
}

impl TaskProgram {
    pub fn new(core: CoreId) -> Self {
        Self {
            core,
            instrs: Vec::new(),
            preload: Vec::new(),
        }
    }

    pub fn push(&mut self, instr: Instr) -> &mut Self {
        self.instrs.push(instr);
        self
    }

    pub fn compute(&mut self, cost: u64) -> &mut Self {
        self.push(Instr::Compute {
            cost,
            action: None,
            stream: None,
        })
    }

    pub fn compute_with(
        &mut self,
        cost: u64,
        action: ComputeAction,
        stream: Option<OutputStream>,
    ) -> &mut Self {
        self.push(Instr::Compute {
            cost,
            action: Some(action),
            stream,
        })
    }

    pub fn probe(&mut self, label: impl Into<String>) -> &mut Self {
        self.push(Instr::Probe(label.into()))
    }

    pub fn preload(&mut self, offset: u32, bytes: Vec<u8>) -> &mut Self {
        self.preload.push((offset, bytes));
        self
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreStats {
    pub core: CoreId,
    pub finish: u64,
    /// Non-idle cycles; blocked waiting is excluded.
    pub busy: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRecord {
    pub src: CoreId,
    pub dst: CoreId,
    pub offset: u32,
    pub len: u32,
    pub issue: u64,
    pub delivery: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub label: String,
    pub core: CoreId,
    pub cycle: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub finish_cycle: u64,
    /// One entry per program, in core order.
    pub cores: Vec<CoreStats>,
    /// Remote writes in delivery order.
    pub writes: Vec<WriteRecord>,
    pub probes: Vec<ProbeRecord>,
}

impl Timeline {
    pub fn core(&self, core: CoreId) -> Option<&CoreStats> {
        self.cores.iter().find(|s| s.core == core)
    }

    pub fn probes_labelled<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a ProbeRecord> + 'a {
        self.probes.iter().filter(move |p| p.label == label)
    }
}

pub fn occupancy(t: &Timeline, core: CoreId) -> Result<u64, SimError> {
    t.core(core).map(|s| s.busy).ok_or(SimError::UnknownCore(core))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedWait {
    pub core: CoreId,
    pub offset: u32,
    pub expected: i32,
    pub current: i32,
}

impl fmt::Display for BlockedWait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "core {} waits for flag {:#x} == {} (holds {})",
            self.core, self.offset, self.expected, self.current
        )
    }
}

fn list(blocked: &[BlockedWait]) -> String {
    blocked.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("deadlock at cycle {cycle}: {}", list(.blocked))]
    Deadlock { cycle: u64, blocked: Vec<BlockedWait> },
    #[error("watchdog of {watchdog} cycles expired: {}", list(.blocked))]
    WatchdogExpired { watchdog: u64, blocked: Vec<BlockedWait> },
    #[error("flag overrun on core {core} at offset {offset:#x}, cycle {cycle}: set again before being cleared")]
    Overrun { core: CoreId, offset: u32, cycle: u64 },
    #[error("core {core}: {source}")]
    Memory { core: CoreId, source: MemoryError },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("more than one program for core {0}")]
    DuplicateProgram(CoreId),
    #[error("core {0} did not take part in the run")]
    UnknownCore(CoreId),
    #[error("watchdog must be positive")]
    ZeroWatchdog,
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub timeline: Timeline,
    pub memories: BTreeMap<CoreId, LocalMemory>,
}

struct Pending {
    src: CoreId,
    dst: usize,
    offset: u32,
    bytes: Vec<u8>,
    issue: u64,
}

struct CoreState<'a> {
    program: &'a TaskProgram,
    mem: LocalMemory,
    /// Flag offset -> value the core waits for.
    flags: BTreeMap<u32, i32>,
    pc: usize,
    ready_at: u64,
    busy: u64,
    blocked: bool,
    finish: Option<u64>,
}

struct Engine<'a> {
    cfg: &'a MeshConfig,
    cores: Vec<CoreState<'a>>,
    index: BTreeMap<CoreId, usize>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending: BTreeMap<u64, Pending>,
    last_on_pair: BTreeMap<(CoreId, CoreId), u64>,
    seq: u64,
    timeline: Timeline,
}

pub fn run(programs: &[TaskProgram], cfg: &MeshConfig, watchdog: u64) -> Result<SimResult, SimError> {
    cfg.validate()?;
    if watchdog == 0 {
        return Err(SimError::ZeroWatchdog);
    }
    let mut sorted: Vec<&TaskProgram> = programs.iter().collect();
    sorted.sort_by_key(|p| p.core);
    for pair in sorted.windows(2) {
        if pair[0].core == pair[1].core {
            return Err(SimError::DuplicateProgram(pair[0].core));
        }
    }
    let mut cores = Vec::with_capacity(sorted.len());
    let mut index = BTreeMap::new();
    for (i, p) in sorted.into_iter().enumerate() {
        cfg.check_core(p.core)?;
        let mut mem = LocalMemory::new(cfg.local_mem_bytes);
        for (offset, bytes) in &p.preload {
            mem.write(*offset, bytes)
                .map_err(|source| SimError::Memory { core: p.core, source })?;
        }
        let mut flags = BTreeMap::new();
        for instr in &p.instrs {
            if let Instr::WaitFlag { offset, expected, .. } = *instr {
                cfg.check_range(offset, 4)?;
                flags.insert(offset, expected);
            }
        }
        index.insert(p.core, i);
        cores.push(CoreState {
            program: p,
            mem,
            flags,
            pc: 0,
            ready_at: 0,
            busy: 0,
            blocked: false,
            finish: if p.instrs.is_empty() { Some(0) } else { None },
        });
    }
    let mut engine = Engine {
        cfg,
        cores,
        index,
        queue: BinaryHeap::new(),
        pending: BTreeMap::new(),
        last_on_pair: BTreeMap::new(),
        seq: 0,
        timeline: Timeline::default(),
    };
    engine.execute(watchdog)?;
    Ok(engine.finish())
}

impl<'a> Engine<'a> {
    fn execute(&mut self, watchdog: u64) -> Result<(), SimError> {
        let mut now = 0u64;
        loop {
            self.deliver_due(now)?;
            for i in 0..self.cores.len() {
                self.step(i, now)?;
            }
            let running = self.cores.iter().filter(|c| c.finish.is_none());
            let mut next = u64::MAX;
            let mut any_running = false;
            for c in running {
                any_running = true;
                if !c.blocked {
                    next = next.min(c.ready_at);
                }
            }
            if let Some(Reverse((delivery, _))) = self.queue.peek() {
                next = next.min(*delivery);
            }
            if !any_running && self.queue.is_empty() {
                return Ok(());
            }
            if next == u64::MAX {
                return Err(SimError::Deadlock {
                    cycle: now,
                    blocked: self.blocked_waits(),
                });
            }
            if any_running && next > watchdog {
                return Err(SimError::WatchdogExpired {
                    watchdog,
                    blocked: self.blocked_waits(),
                });
            }
            debug_assert!(next > now);
            now = next;
        }
    }

    fn blocked_waits(&self) -> Vec<BlockedWait> {
        self.cores
            .iter()
            .filter(|c| c.blocked)
            .filter_map(|c| match c.program.instrs.get(c.pc) {
                Some(Instr::WaitFlag { offset, expected, .. }) => Some(BlockedWait {
                    core: c.program.core,
                    offset: *offset,
                    expected: *expected,
                    current: c.mem.read_i32(*offset).unwrap_or_default(),
                }),
                _ => None,
            })
            .collect()
    }

    fn deliver_due(&mut self, now: u64) -> Result<(), SimError> {
        while let Some(&Reverse((delivery, seq))) = self.queue.peek() {
            if delivery > now {
                break;
            }
            self.queue.pop();
            let w = self.pending.remove(&seq).expect("queued write is pending");
            let dst_core = self.cores[w.dst].program.core;
            self.timeline.writes.push(WriteRecord {
                src: w.src,
                dst: dst_core,
                offset: w.offset,
                len: w.bytes.len() as u32,
                issue: w.issue,
                delivery,
            });
            self.apply(w.dst, w.offset, &w.bytes, delivery)?;
        }
        Ok(())
    }

    /// Stores bytes into a core's memory, rejecting a flag set that lands on
    /// a flag still holding the awaited value.
    fn apply(&mut self, dst: usize, offset: u32, bytes: &[u8], cycle: u64) -> Result<(), SimError> {
        let core = &mut self.cores[dst];
        let end = offset + bytes.len() as u32;
        for (&flag, &expected) in core.flags.range(offset.saturating_sub(3)..end) {
            if flag < offset || flag + 4 > end {
                continue;
            }
            let at = (flag - offset) as usize;
            let incoming = i32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
            let current = core.mem.read_i32(flag).map_err(|source| SimError::Memory {
                core: core.program.core,
                source,
            })?;
            if incoming == expected && current == expected {
                return Err(SimError::Overrun {
                    core: core.program.core,
                    offset: flag,
                    cycle,
                });
            }
        }
        core.mem.write(offset, bytes).map_err(|source| SimError::Memory {
            core: core.program.core,
            source,
        })
    }

    fn schedule(&mut self, src: CoreId, dst: GlobalAddress, bytes: Vec<u8>, issue: u64, nominal: u64) -> Result<(), SimError> {
        let (dst_core, offset) = resolve_address(dst, self.cfg)?;
        self.cfg.check_range(offset, bytes.len() as u32)?;
        let Some(&dst_idx) = self.index.get(&dst_core) else {
            // No program on the target core: the write lands in memory nobody observes.
            return Ok(());
        };
        let last = self.last_on_pair.entry((src, dst_core)).or_insert(0);
        let delivery = nominal.max(*last);
        *last = delivery;
        let seq = self.seq;
        self.seq += 1;
        self.pending.insert(
            seq,
            Pending {
                src,
                dst: dst_idx,
                offset,
                bytes,
                issue,
            },
        );
        self.queue.push(Reverse((delivery, seq)));
        Ok(())
    }

    fn step(&mut self, i: usize, now: u64) -> Result<(), SimError> {
        if self.cores[i].finish.is_some() || (!self.cores[i].blocked && self.cores[i].ready_at > now) {
            return Ok(());
        }
        let program: &'a TaskProgram = self.cores[i].program;
        let core_id = program.core;
        let mem_err = |source| SimError::Memory { core: core_id, source };
        loop {
            let state = &mut self.cores[i];
            let Some(instr) = program.instrs.get(state.pc) else {
                state.finish = Some(now);
                return Ok(());
            };
            let mut advance = 0u64;
            match instr {
                Instr::Probe(label) => {
                    self.timeline.probes.push(ProbeRecord {
                        label: label.clone(),
                        core: core_id,
                        cycle: now,
                    });
                }
                Instr::Compute { cost, action, stream } => {
                    if let Some(action) = action {
                        action(&mut state.mem).map_err(mem_err)?;
                    }
                    advance = *cost;
                    if let Some(s) = *stream {
                        let bytes = state.mem.read(s.src_offset, s.len).map_err(mem_err)?.to_vec();
                        let (dst_core, _) = resolve_address(s.dst, self.cfg)?;
                        let link = self.cfg.link_bytes_per_cycle;
                        let first = write_delivery_cycle(now, core_id, dst_core, s.len, self.cfg)?;
                        let last = write_delivery_cycle(now + cost, core_id, dst_core, s.len.min(link), self.cfg)?;
                        self.deliver_or_schedule(core_id, s.dst, bytes, now, first.max(last))?;
                    }
                }
                Instr::RemoteWrite { dst, payload } => {
                    let bytes = match *payload {
                        Payload::Word(v) => v.to_le_bytes().to_vec(),
                        Payload::Local { offset, len } => state.mem.read(offset, len).map_err(mem_err)?.to_vec(),
                    };
                    let (dst_core, _) = resolve_address(*dst, self.cfg)?;
                    let nominal = write_delivery_cycle(now, core_id, dst_core, payload.len(), self.cfg)?;
                    self.deliver_or_schedule(core_id, *dst, bytes, now, nominal)?;
                    advance = 1;
                }
                Instr::SetLocalFlag { offset, value } => {
                    let (offset, value) = (*offset, *value);
                    self.apply(i, offset, &value.to_le_bytes(), now)?;
                    advance = 1;
                }
                Instr::WaitFlag {
                    offset,
                    expected,
                    clear_to,
                    detect_cycles,
                } => {
                    if state.mem.read_i32(*offset).map_err(mem_err)? != *expected {
                        state.blocked = true;
                        return Ok(());
                    }
                    state.mem.write_i32(*offset, *clear_to).map_err(mem_err)?;
                    state.blocked = false;
                    advance = *detect_cycles;
                }
            }
            let state = &mut self.cores[i];
            state.pc += 1;
            state.busy += advance;
            state.ready_at = now + advance;
            if state.pc == program.instrs.len() {
                state.finish = Some(state.ready_at);
                return Ok(());
            }
            if advance > 0 {
                return Ok(());
            }
        }
    }

    fn deliver_or_schedule(&mut self, src: CoreId, dst: GlobalAddress, bytes: Vec<u8>, issue: u64, delivery: u64) -> Result<(), SimError> {
        if dst.core() == src {
            let (_, offset) = resolve_address(dst, self.cfg)?;
            let i = self.index[&src];
            if delivery == issue {
                return self.apply(i, offset, &bytes, issue);
            }
        }
        self.schedule(src, dst, bytes, issue, delivery)
    }

    fn finish(self) -> SimResult {
        let mut timeline = self.timeline;
        let mut memories = BTreeMap::new();
        for c in self.cores {
            let finish = c.finish.unwrap_or(c.ready_at);
            timeline.cores.push(CoreStats {
                core: c.program.core,
                finish,
                busy: c.busy,
            });
            timeline.finish_cycle = timeline.finish_cycle.max(finish);
            memories.insert(c.program.core, c.mem);
        }
        SimResult { timeline, memories }
    }
}
