//! Minimal register machine that every gadget and mitigation pass operates on.
//!
//! Sixteen 64-bit registers, byte-addressable flat memory and a handful of
//! instructions. Memory is always addressed as `register + offset` or
//! `register + register * scale`, never through an absolute address, so every
//! program is relocatable.
//!
//! Register conventions used by the rest of the crate:
//!
//! * `r1`..`r14` receive the input queue at the start of a run (first value in `r1`).
//! * `r13` is scratch reserved for mitigation passes.
//! * `r14` is the link register written by `CALL` and read by `RET`.
//! * `r15` holds the base address of the victim's memory region.

mod asm;

pub use asm::{assemble, disassemble, AsmError};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::gadgets::MemoryLayout;

pub const NUM_REGS: usize = 16;
pub const PAGE_SIZE: u64 = 4096;

/// Link register written by `CALL`.
pub const LINK_REG: Reg = Reg(14);
/// Scratch register owned by mitigation passes.
pub const SCRATCH_REG: Reg = Reg(13);
/// Region base register set up by the victim harness.
pub const BASE_REG: Reg = Reg(15);

/// General purpose register id in `0..16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub fn new(id: u8) -> Option<Reg> {
        ((id as usize) < NUM_REGS).then_some(Reg(id))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Handle into a program's label table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(pub(crate) u32);

impl Label {
    pub fn id(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Byte,
    Page,
}

impl Scale {
    pub fn bytes(self) -> u64 {
        match self {
            Scale::Byte => 1,
            Scale::Page => PAGE_SIZE,
        }
    }

    pub fn from_bytes(n: u64) -> Option<Scale> {
        match n {
            1 => Some(Scale::Byte),
            PAGE_SIZE => Some(Scale::Page),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    And,
    Shl,
}

impl AluOp {
    pub fn eval(self, lhs: u64, rhs: u64) -> u64 {
        match self {
            AluOp::Add => lhs.wrapping_add(rhs),
            AluOp::And => lhs & rhs,
            AluOp::Shl => lhs << (rhs & 63),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    /// `dst = mem[base + index * scale]`, zero-extended byte.
    LoadByte { dst: Reg, base: Reg, index: Reg, scale: Scale },
    /// `mem[base + offset] = low byte of src`.
    Store { base: Reg, offset: i64, src: Reg },
    MovImm { dst: Reg, value: u64 },
    /// `dst = instruction index of target`; the only way to materialize a code address.
    MovLabel { dst: Reg, target: Label },
    Alu { op: AluOp, dst: Reg, src: Operand },
    /// Taken (jump to `target`) iff `a < b`, unsigned.
    CmpBranchLess { a: Reg, b: Reg, target: Label },
    JumpIndirect { target: Reg },
    Call { target: Label },
    Ret,
    /// Evicts the cache line holding `base + offset`.
    Flush { base: Reg, offset: i64 },
    /// Speculation barrier.
    Fence,
    /// `dst = if a < b { !0 } else { 0 }`, computed without a branch.
    SelectMask { dst: Reg, a: Reg, b: Reg },
    Halt,
}

impl Instruction {
    /// Label referenced by this instruction, if any.
    pub fn label(&self) -> Option<Label> {
        match *self {
            Instruction::MovLabel { target, .. }
            | Instruction::CmpBranchLess { target, .. }
            | Instruction::Call { target } => Some(target),
            _ => None,
        }
    }

    pub(crate) fn label_mut(&mut self) -> Option<&mut Label> {
        match self {
            Instruction::MovLabel { target, .. }
            | Instruction::CmpBranchLess { target, .. }
            | Instruction::Call { target } => Some(target),
            _ => None,
        }
    }

    pub fn is_memory_access(&self) -> bool {
        matches!(self, Instruction::LoadByte { .. } | Instruction::Store { .. } | Instruction::Flush { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelDef {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("empty program")]
    Empty,
    #[error("label `{0}` defined more than once")]
    DuplicateLabel(String),
    #[error("label `{name}` points at index {index}, past the last instruction")]
    DanglingLabel { name: String, index: usize },
    #[error("instruction {index} references undefined label id {label}")]
    UnknownLabel { index: usize, label: usize },
    #[error("invalid label name `{0}`")]
    BadLabelName(String),
}

/// Assembled program. Immutable once built; label ids are canonical
/// (ordered by position, then by definition order), so structurally equal
/// programs compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    instructions: Vec<Instruction>,
    labels: Vec<LabelDef>,
    entry: usize,
}

pub(crate) fn valid_label_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl Program {
    /// Builds a program from raw parts. Label references in `instructions`
    /// are ids into `labels`.
    pub fn from_parts(
        mut instructions: Vec<Instruction>,
        labels: Vec<LabelDef>,
    ) -> Result<Program, ProgramError> {
        if instructions.is_empty() {
            return Err(ProgramError::Empty);
        }
        let mut seen = std::collections::HashSet::new();
        for def in &labels {
            if !valid_label_name(&def.name) {
                return Err(ProgramError::BadLabelName(def.name.clone()));
            }
            if !seen.insert(def.name.as_str()) {
                return Err(ProgramError::DuplicateLabel(def.name.clone()));
            }
            if def.index >= instructions.len() {
                return Err(ProgramError::DanglingLabel { name: def.name.clone(), index: def.index });
            }
        }
        for (index, ins) in instructions.iter().enumerate() {
            if let Some(l) = ins.label() {
                if l.id() >= labels.len() {
                    return Err(ProgramError::UnknownLabel { index, label: l.id() });
                }
            }
        }

        // canonical label order: by position, ties by original id
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by_key(|&id| (labels[id].index, id));
        let mut remap = vec![0u32; labels.len()];
        for (new_id, &old_id) in order.iter().enumerate() {
            remap[old_id] = new_id as u32;
        }
        for ins in &mut instructions {
            if let Some(l) = ins.label_mut() {
                *l = Label(remap[l.id()]);
            }
        }
        let labels = order.into_iter().map(|id| labels[id].clone()).collect();

        Ok(Program { instructions, labels, entry: 0 })
    }

    pub fn into_parts(self) -> (Vec<Instruction>, Vec<LabelDef>) {
        (self.instructions, self.labels)
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn entry(&self) -> usize {
        self.entry
    }

    pub fn labels(&self) -> &[LabelDef] {
        &self.labels
    }

    pub fn get(&self, pc: usize) -> Option<&Instruction> {
        self.instructions.get(pc)
    }

    /// Instruction index a label resolves to.
    pub fn target(&self, label: Label) -> usize {
        self.labels[label.id()].index
    }

    pub fn label_name(&self, label: Label) -> &str {
        &self.labels[label.id()].name
    }

    pub fn find_label(&self, name: &str) -> Option<Label> {
        self.labels.iter().position(|d| d.name == name).map(|i| Label(i as u32))
    }

    /// Labels defined at instruction index `pc`.
    pub fn labels_at(&self, pc: usize) -> impl Iterator<Item = &LabelDef> {
        self.labels.iter().filter(move |d| d.index == pc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MemoryError {
    #[error("memory size {0} is not a power of two of at least one page")]
    BadSize(u64),
}

/// Flat byte-addressable memory with 4096-byte pages.
#[derive(Clone, PartialEq, Eq)]
pub struct MemoryImage {
    bytes: Vec<u8>,
}

impl fmt::Debug for MemoryImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryImage").field("size", &self.bytes.len()).finish()
    }
}

impl MemoryImage {
    pub fn new(size: u64) -> Result<MemoryImage, MemoryError> {
        if size < PAGE_SIZE || !size.is_power_of_two() {
            return Err(MemoryError::BadSize(size));
        }
        Ok(MemoryImage { bytes: vec![0; size as usize] })
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn pages(&self) -> u64 {
        self.size() / PAGE_SIZE
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr < self.size()
    }

    pub fn read(&self, addr: u64) -> Option<u8> {
        self.bytes.get(usize::try_from(addr).ok()?).copied()
    }

    pub fn write(&mut self, addr: u64, value: u8) -> bool {
        match usize::try_from(addr).ok().and_then(|a| self.bytes.get_mut(a)) {
            Some(b) => {
                *b = value;
                true
            }
            None => false,
        }
    }

    /// Copies `data` to `addr`. Panics if the range leaves the image.
    pub fn write_slice(&mut self, addr: u64, data: &[u8]) {
        let start = addr as usize;
        self.bytes[start..start + data.len()].copy_from_slice(data);
    }

    pub fn slice(&self, addr: u64, len: usize) -> Option<&[u8]> {
        let start = usize::try_from(addr).ok()?;
        self.bytes.get(start..start.checked_add(len)?)
    }

    pub fn page(&self, page: u64) -> Option<&[u8]> {
        self.slice(page * PAGE_SIZE, PAGE_SIZE as usize)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutViolation {
    /// Region does not fit inside the image.
    Bounds { region: &'static str },
    Alignment { region: &'static str },
    Overlap { first: &'static str, second: &'static str },
    /// Secret is not placed directly after `data`.
    Adjacency,
}

impl fmt::Display for LayoutViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutViolation::Bounds { region } => write!(f, "bounds: {region} leaves the image"),
            LayoutViolation::Alignment { region } => write!(f, "alignment: {region} is not page-aligned"),
            LayoutViolation::Overlap { first, second } => write!(f, "overlap: {first} and {second}"),
            LayoutViolation::Adjacency => write!(f, "adjacency: secret does not follow data"),
        }
    }
}

/// Checks that every region of `layout` fits in `img`, that the page-table
/// regions are page-aligned, and that no two regions overlap. `data` and the
/// secret are required to be adjacent rather than disjoint-anywhere.
pub fn validate_layout(img: &MemoryImage, layout: &MemoryLayout) -> Result<(), Vec<LayoutViolation>> {
    let mut out = Vec::new();
    let regions = layout.regions();

    for r in &regions {
        let end = r.start.checked_add(r.len);
        if end.is_none_or(|e| e > img.size()) {
            out.push(LayoutViolation::Bounds { region: r.name });
        }
        if r.page_aligned && r.start % PAGE_SIZE != 0 {
            out.push(LayoutViolation::Alignment { region: r.name });
        }
    }
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[i + 1..] {
            if a.len == 0 || b.len == 0 {
                continue;
            }
            let overlap = a.start < b.start.saturating_add(b.len) && b.start < a.start.saturating_add(a.len);
            if overlap {
                out.push(LayoutViolation::Overlap { first: a.name, second: b.name });
            }
        }
    }
    if layout.secret_base != layout.data_base + layout.data_len {
        out.push(LayoutViolation::Adjacency);
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
