//! Speculative executor.
//!
//! Timing model: one instruction per cycle. A load's value is forwarded
//! immediately but is only *resolved* `hit_latency` or `miss_latency` cycles
//! after issue; every register carries the cycle its value resolves at and
//! ALU results inherit the latest resolution time of their operands.
//!
//! A control-flow instruction whose operands are unresolved at issue opens a
//! speculation frame: it follows the predicted path (PHT, BTB or RSB) for up
//! to `min(window, resolve - open)` transient instructions, stopping early at
//! `FENCE` or `HALT`. A store whose address is unresolved opens an STL frame
//! when store bypass is allowed: younger loads read memory past it.
//!
//! At resolution the register checkpoint is restored, buffered transient
//! stores are dropped and execution continues on the architectural path.
//! Cache and predictor effects of the transient instructions are kept. Only
//! one frame is active at a time; branches inside a frame follow their
//! prediction without opening a new checkpoint and without training.

mod reference;

pub use reference::{reference_run, reference_run_limited};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cache::{Access, CacheConfig, CacheError, CacheState};
use crate::isa::{Instruction, MemoryImage, Operand, Program, Reg, LINK_REG, NUM_REGS, PAGE_SIZE};
use crate::predictors::{Btb, Direction, Pht, Rsb, StoreBypassPolicy};

pub const DEFAULT_MAX_STEPS: u64 = 1_000_000;
/// Inputs land in `r1..=r14`.
pub const MAX_INPUTS: usize = 14;

/// The four speculation sources, also used to name gadget variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Pht,
    Btb,
    Rsb,
    Stl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Pht, Variant::Btb, Variant::Rsb, Variant::Stl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pht => "pht",
            Variant::Btb => "btb",
            Variant::Rsb => "rsb",
            Variant::Stl => "stl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}` (expected pht, btb, rsb or stl)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSet {
    pub pht: bool,
    pub btb: bool,
    pub rsb: bool,
    pub stl: bool,
}

impl Default for VariantSet {
    fn default() -> Self {
        VariantSet { pht: true, btb: true, rsb: true, stl: true }
    }
}

impl VariantSet {
    pub fn contains(&self, v: Variant) -> bool {
        match v {
            Variant::Pht => self.pht,
            Variant::Btb => self.btb,
            Variant::Rsb => self.rsb,
            Variant::Stl => self.stl,
        }
    }

    pub fn set(&mut self, v: Variant, on: bool) {
        match v {
            Variant::Pht => self.pht = on,
            Variant::Btb => self.btb = on,
            Variant::Rsb => self.rsb = on,
            Variant::Stl => self.stl = on,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Maximum transient instructions per frame.
    pub window: usize,
    pub variants: VariantSet,
    pub store_bypass: StoreBypassPolicy,
    pub max_steps: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window: 64,
            variants: VariantSet::default(),
            store_bypass: StoreBypassPolicy::default(),
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchState {
    pub regs: [u64; NUM_REGS],
    pub memory: MemoryImage,
    pub pc: usize,
    pub halted: bool,
}

impl ArchState {
    pub fn new(memory: MemoryImage) -> ArchState {
        ArchState { regs: [0; NUM_REGS], memory, pc: 0, halted: false }
    }

    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    /// Prepares for a run: inputs go to `r1..`, pc to the entry point.
    pub(crate) fn start(&mut self, program: &Program, inputs: &[u64]) -> Result<(), ExecError> {
        if inputs.len() > MAX_INPUTS {
            return Err(ExecError::TooManyInputs(inputs.len()));
        }
        self.regs[1..=inputs.len()].copy_from_slice(inputs);
        self.pc = program.entry();
        self.halted = false;
        Ok(())
    }
}

/// Maps victim pages onto other physical pages for cache addressing only.
/// Memory contents are never redirected.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageAliases {
    map: HashMap<u64, u64>,
}

impl PageAliases {
    pub fn insert(&mut self, page: u64, phys_page: u64) {
        self.map.insert(page, phys_page);
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn translate(&self, addr: u64) -> u64 {
        let page = addr / PAGE_SIZE;
        match self.map.get(&page) {
            Some(&phys) => phys * PAGE_SIZE + addr % PAGE_SIZE,
            None => addr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroArchState {
    pub cache: CacheState,
    pub pht: Pht,
    pub btb: Btb,
    pub rsb: Rsb,
    pub cycle: u64,
    pub aliases: PageAliases,
}

impl MicroArchState {
    pub fn new(cache: CacheConfig, pht_size: usize, btb_entries: usize, rsb_depth: usize) -> Result<MicroArchState, CacheError> {
        Ok(MicroArchState {
            cache: CacheState::new(cache)?,
            pht: Pht::new(pht_size),
            btb: Btb::new(btb_entries),
            rsb: Rsb::new(rsb_depth),
            cycle: 0,
            aliases: PageAliases::default(),
        })
    }

    /// Cache access on behalf of the running program (goes through aliasing).
    pub fn access(&mut self, addr: u64) -> Access {
        let phys = self.aliases.translate(addr);
        self.cache.access(phys)
    }

    pub fn flush(&mut self, addr: u64) {
        let phys = self.aliases.translate(addr);
        self.cache.flush(phys);
    }

    /// Whether the line a program address maps to is resident.
    pub fn is_cached(&self, addr: u64) -> bool {
        self.cache.contains(self.aliases.translate(addr))
    }
}

impl Default for MicroArchState {
    fn default() -> Self {
        MicroArchState::new(CacheConfig::default(), 1024, 256, 16).expect("default cache config is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    OutOfBounds { addr: u64 },
    BadJumpTarget { target: u64 },
    PcOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("architectural fault at pc {pc}: {kind:?}")]
    Fault { pc: usize, kind: FaultKind },
    #[error("transient access at pc {pc} to {addr:#x} leaves the memory image")]
    Model { pc: usize, addr: u64 },
    #[error("step limit of {0} committed instructions exceeded")]
    StepLimit(u64),
    #[error("{0} inputs given, at most 14 supported")]
    TooManyInputs(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrameEvent {
    pub cause: Variant,
    /// Instruction that opened the frame.
    pub site: usize,
    pub predicted: usize,
    pub actual: usize,
    pub open_cycle: u64,
    pub resolve_cycle: u64,
    pub transient: Vec<usize>,
    pub squashed: bool,
}

impl FrameEvent {
    pub fn transient_count(&self) -> usize {
        self.transient.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExecutionTrace {
    pub committed: Vec<usize>,
    pub frames: Vec<FrameEvent>,
    pub cycles: u64,
}

impl ExecutionTrace {
    pub fn squashes(&self) -> impl Iterator<Item = &FrameEvent> {
        self.frames.iter().filter(|f| f.squashed)
    }

    pub fn transient_total(&self) -> usize {
        self.frames.iter().map(FrameEvent::transient_count).sum()
    }

    pub fn squashed_transient_total(&self) -> usize {
        self.squashes().map(FrameEvent::transient_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub arch: ArchState,
    pub trace: ExecutionTrace,
}

/// Cycle a load issued at `issue` resolves at.
pub fn resolve_timing(issue: u64, access: Access) -> u64 {
    issue + access.latency
}

fn effective(base: u64, offset: i64) -> u64 {
    base.wrapping_add(offset as u64)
}

struct Core<'a> {
    program: &'a Program,
    cfg: &'a PipelineConfig,
    uarch: &'a mut MicroArchState,
    arch: ArchState,
    ready: [u64; NUM_REGS],
    trace: ExecutionTrace,
}

struct Speculation {
    cause: Variant,
    site: usize,
    predicted: usize,
    actual: usize,
    resolve: u64,
    /// Address of an unresolved store younger loads bypass (STL frames).
    parked_store: Option<u64>,
}

impl Core<'_> {
    fn fault(&self, kind: FaultKind) -> ExecError {
        ExecError::Fault { pc: self.arch.pc, kind }
    }

    fn tick(&mut self) -> u64 {
        let now = self.uarch.cycle;
        self.uarch.cycle += 1;
        now
    }

    fn step(&mut self) -> Result<(), ExecError> {
        let pc = self.arch.pc;
        let ins = *self.program.get(pc).ok_or_else(|| self.fault(FaultKind::PcOutOfRange))?;
        self.trace.committed.push(pc);
        let now = self.uarch.cycle;
        let regs = self.arch.regs;
        let mut next = pc + 1;

        match ins {
            Instruction::LoadByte { dst, base, index, scale } => {
                let addr = regs[base.index()].wrapping_add(regs[index.index()].wrapping_mul(scale.bytes()));
                let value = self.arch.memory.read(addr).ok_or_else(|| self.fault(FaultKind::OutOfBounds { addr }))?;
                let issue = now.max(self.ready[base.index()]).max(self.ready[index.index()]);
                let acc = self.uarch.access(addr);
                self.arch.regs[dst.index()] = value as u64;
                self.ready[dst.index()] = resolve_timing(issue, acc);
                self.tick();
            }
            Instruction::Store { base, offset, src } => {
                let addr = effective(regs[base.index()], offset);
                let resolve = self.ready[base.index()];
                if resolve > now {
                    self.tick();
                    if self.cfg.variants.stl && self.cfg.store_bypass.enabled {
                        self.speculate(Speculation {
                            cause: Variant::Stl,
                            site: pc,
                            predicted: pc + 1,
                            actual: pc + 1,
                            resolve,
                            parked_store: Some(addr),
                        })?;
                    }
                    self.uarch.cycle = self.uarch.cycle.max(resolve);
                } else {
                    self.tick();
                }
                if !self.arch.memory.write(addr, regs[src.index()] as u8) {
                    return Err(self.fault(FaultKind::OutOfBounds { addr }));
                }
                self.uarch.access(addr);
            }
            Instruction::MovImm { dst, value } => {
                self.arch.regs[dst.index()] = value;
                self.ready[dst.index()] = now;
                self.tick();
            }
            Instruction::MovLabel { dst, target } => {
                self.arch.regs[dst.index()] = self.program.target(target) as u64;
                self.ready[dst.index()] = now;
                self.tick();
            }
            Instruction::Alu { op, dst, src } => {
                let (rhs, rhs_ready) = match src {
                    Operand::Reg(r) => (regs[r.index()], self.ready[r.index()]),
                    Operand::Imm(v) => (v, now),
                };
                self.arch.regs[dst.index()] = op.eval(regs[dst.index()], rhs);
                self.ready[dst.index()] = self.ready[dst.index()].max(rhs_ready);
                self.tick();
            }
            Instruction::SelectMask { dst, a, b } => {
                self.arch.regs[dst.index()] = if regs[a.index()] < regs[b.index()] { u64::MAX } else { 0 };
                self.ready[dst.index()] = self.ready[a.index()].max(self.ready[b.index()]);
                self.tick();
            }
            Instruction::CmpBranchLess { a, b, target } => {
                let taken = regs[a.index()] < regs[b.index()];
                let taken_pc = self.program.target(target);
                let actual = if taken { taken_pc } else { pc + 1 };
                let resolve = self.ready[a.index()].max(self.ready[b.index()]);
                self.tick();
                if resolve > now {
                    if self.cfg.variants.pht {
                        let predicted = if self.uarch.pht.predict(pc).is_taken() { taken_pc } else { pc + 1 };
                        self.speculate(Speculation { cause: Variant::Pht, site: pc, predicted, actual, resolve, parked_store: None })?;
                    }
                    self.uarch.cycle = self.uarch.cycle.max(resolve);
                }
                self.uarch.pht.update(pc, Direction::from_taken(taken));
                next = actual;
            }
            Instruction::JumpIndirect { target } => {
                let dest = regs[target.index()];
                let resolve = self.ready[target.index()];
                self.tick();
                if resolve > now {
                    if self.cfg.variants.btb {
                        if let Some(predicted) = self.uarch.btb.predict(pc) {
                            self.speculate(Speculation {
                                cause: Variant::Btb,
                                site: pc,
                                predicted,
                                actual: dest as usize,
                                resolve,
                                parked_store: None,
                            })?;
                        }
                    }
                    self.uarch.cycle = self.uarch.cycle.max(resolve);
                }
                if dest >= self.program.len() as u64 {
                    return Err(self.fault(FaultKind::BadJumpTarget { target: dest }));
                }
                self.uarch.btb.update(pc, dest as usize);
                next = dest as usize;
            }
            Instruction::Call { target } => {
                self.arch.regs[LINK_REG.index()] = (pc + 1) as u64;
                self.ready[LINK_REG.index()] = now;
                self.uarch.rsb.push(pc + 1);
                self.tick();
                next = self.program.target(target);
            }
            Instruction::Ret => {
                let dest = regs[LINK_REG.index()];
                let resolve = self.ready[LINK_REG.index()];
                let predicted = self.uarch.rsb.pop();
                self.tick();
                if resolve > now {
                    if let (true, Some(predicted)) = (self.cfg.variants.rsb, predicted) {
                        self.speculate(Speculation {
                            cause: Variant::Rsb,
                            site: pc,
                            predicted,
                            actual: dest as usize,
                            resolve,
                            parked_store: None,
                        })?;
                    }
                    self.uarch.cycle = self.uarch.cycle.max(resolve);
                }
                if dest >= self.program.len() as u64 {
                    return Err(self.fault(FaultKind::BadJumpTarget { target: dest }));
                }
                next = dest as usize;
            }
            Instruction::Flush { base, offset } => {
                let addr = effective(regs[base.index()], offset);
                if !self.arch.memory.contains(addr) {
                    return Err(self.fault(FaultKind::OutOfBounds { addr }));
                }
                self.uarch.flush(addr);
                self.tick();
            }
            Instruction::Fence => {
                self.tick();
            }
            Instruction::Halt => {
                self.tick();
                self.arch.halted = true;
                next = pc;
            }
        }
        self.arch.pc = next;
        Ok(())
    }

    /// Runs the transient path of one frame and records it. Architectural
    /// state is never written here; registers and stores live in local copies.
    fn speculate(&mut self, spec: Speculation) -> Result<(), ExecError> {
        let open = self.uarch.cycle;
        let limit = self.cfg.window.min(spec.resolve.saturating_sub(open) as usize);
        let mut regs = self.arch.regs;
        let mut ready = self.ready;
        let mut store_buffer: Vec<(u64, u8)> = Vec::new();
        let mut transient = Vec::new();
        let mut bypassed = false;
        let mut pc = spec.predicted;
        let len = self.program.len() as u64;

        while transient.len() < limit {
            let Some(&ins) = self.program.get(pc) else { break };
            if matches!(ins, Instruction::Fence | Instruction::Halt) {
                break;
            }
            let now = self.uarch.cycle;
            let mut next = pc + 1;
            match ins {
                Instruction::LoadByte { dst, base, index, scale } => {
                    let addr = regs[base.index()].wrapping_add(regs[index.index()].wrapping_mul(scale.bytes()));
                    if !self.arch.memory.contains(addr) {
                        return Err(ExecError::Model { pc, addr });
                    }
                    // a load aliasing the parked store reads stale memory
                    bypassed |= spec.parked_store == Some(addr);
                    let value = store_buffer
                        .iter()
                        .rev()
                        .find(|(a, _)| *a == addr)
                        .map(|&(_, v)| v)
                        .or_else(|| self.arch.memory.read(addr))
                        .unwrap_or(0);
                    let issue = now.max(ready[base.index()]).max(ready[index.index()]);
                    let acc = self.uarch.access(addr);
                    regs[dst.index()] = value as u64;
                    ready[dst.index()] = resolve_timing(issue, acc);
                }
                Instruction::Store { base, offset, src } => {
                    let addr = effective(regs[base.index()], offset);
                    if !self.arch.memory.contains(addr) {
                        return Err(ExecError::Model { pc, addr });
                    }
                    store_buffer.push((addr, regs[src.index()] as u8));
                }
                Instruction::MovImm { dst, value } => {
                    regs[dst.index()] = value;
                    ready[dst.index()] = now;
                }
                Instruction::MovLabel { dst, target } => {
                    regs[dst.index()] = self.program.target(target) as u64;
                    ready[dst.index()] = now;
                }
                Instruction::Alu { op, dst, src } => {
                    let (rhs, rhs_ready) = match src {
                        Operand::Reg(r) => (regs[r.index()], ready[r.index()]),
                        Operand::Imm(v) => (v, now),
                    };
                    regs[dst.index()] = op.eval(regs[dst.index()], rhs);
                    ready[dst.index()] = ready[dst.index()].max(rhs_ready);
                }
                Instruction::SelectMask { dst, a, b } => {
                    regs[dst.index()] = if regs[a.index()] < regs[b.index()] { u64::MAX } else { 0 };
                    ready[dst.index()] = ready[a.index()].max(ready[b.index()]);
                }
                Instruction::CmpBranchLess { a, b, target } => {
                    let taken_pc = self.program.target(target);
                    let taken = if ready[a.index()].max(ready[b.index()]) > now {
                        if !self.cfg.variants.pht {
                            break;
                        }
                        self.uarch.pht.predict(pc).is_taken()
                    } else {
                        regs[a.index()] < regs[b.index()]
                    };
                    next = if taken { taken_pc } else { pc + 1 };
                }
                Instruction::JumpIndirect { target } => {
                    let dest = if ready[target.index()] > now {
                        match (self.cfg.variants.btb, self.uarch.btb.predict(pc)) {
                            (true, Some(p)) => p as u64,
                            _ => break,
                        }
                    } else {
                        regs[target.index()]
                    };
                    if dest >= len {
                        break;
                    }
                    next = dest as usize;
                }
                Instruction::Call { target } => {
                    regs[LINK_REG.index()] = (pc + 1) as u64;
                    ready[LINK_REG.index()] = now;
                    self.uarch.rsb.push(pc + 1);
                    next = self.program.target(target);
                }
                Instruction::Ret => {
                    let predicted = self.uarch.rsb.pop();
                    let dest = if ready[LINK_REG.index()] > now {
                        match (self.cfg.variants.rsb, predicted) {
                            (true, Some(p)) => p as u64,
                            _ => break,
                        }
                    } else {
                        regs[LINK_REG.index()]
                    };
                    if dest >= len {
                        break;
                    }
                    next = dest as usize;
                }
                // transient flushes are dropped
                Instruction::Flush { .. } => {}
                Instruction::Fence | Instruction::Halt => unreachable!(),
            }
            transient.push(pc);
            self.uarch.cycle += 1;
            pc = next;
        }

        let squashed = match spec.cause {
            Variant::Stl => bypassed,
            _ => spec.predicted != spec.actual,
        };
        self.trace.frames.push(FrameEvent {
            cause: spec.cause,
            site: spec.site,
            predicted: spec.predicted,
            actual: spec.actual,
            open_cycle: open,
            resolve_cycle: spec.resolve,
            transient,
            squashed,
        });
        Ok(())
    }
}

/// Runs `program` speculatively. The returned architectural state always
/// matches [`reference_run`] on the same inputs; `uarch` accumulates the
/// cache and predictor effects of committed and transient instructions.
pub fn run(
    program: &Program,
    mut arch: ArchState,
    uarch: &mut MicroArchState,
    cfg: &PipelineConfig,
    inputs: &[u64],
) -> Result<RunOutput, ExecError> {
    arch.start(program, inputs)?;
    let start = uarch.cycle;
    let ready = [start; NUM_REGS];
    let mut core = Core { program, cfg, uarch, arch, ready, trace: ExecutionTrace::default() };
    let mut steps = 0u64;
    while !core.arch.halted {
        if steps >= cfg.max_steps {
            return Err(ExecError::StepLimit(cfg.max_steps));
        }
        steps += 1;
        core.step()?;
    }
    core.trace.cycles = core.uarch.cycle - start;
    Ok(RunOutput { arch: core.arch, trace: core.trace })
}
