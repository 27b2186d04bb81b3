//! Textual assembly.
//!
//! ```text
//! # comment
//! name:                      label for the next instruction
//! LOADB  rd, rbase, ridx, 1|4096
//! STORE  rbase, offset, rsrc
//! MOVI   rd, imm
//! MOVL   rd, label
//! ADD|AND|SHL rd, rs|imm
//! CMPBLT ra, rb, label       taken iff ra < rb (unsigned)
//! JMPI   ra
//! CALL   label
//! RET
//! FLUSH  rbase, offset
//! FENCE
//! SELMASK rd, ra, rb
//! HALT
//! ```
//!
//! Immediates are decimal (optionally negative, wrapping to 64 bits) or
//! `0x` hex. Offsets are signed decimal. Mnemonics are case-insensitive;
//! [`disassemble`] emits the canonical upper-case form.

use std::collections::HashMap;
use std::fmt::Write;

use super::{valid_label_name, AluOp, Instruction, Label, LabelDef, Operand, Program, Reg, Scale};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("empty program")]
    Empty,
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: label `{name}` already defined")]
    DuplicateLabel { line: usize, name: String },
    #[error("line {line}: unresolved label `{name}`")]
    UnresolvedLabel { line: usize, name: String },
    #[error("line {line}: label `{name}` is not followed by an instruction")]
    TrailingLabel { line: usize, name: String },
    #[error("line {line}: {mnemonic} expects {expected} operand(s), found {found}")]
    OperandCount { line: usize, mnemonic: String, expected: usize, found: usize },
    #[error("line {line}: bad operand `{operand}`: {reason}")]
    BadOperand { line: usize, operand: String, reason: &'static str },
}

impl AsmError {
    pub fn line(&self) -> Option<usize> {
        match self {
            AsmError::Empty => None,
            AsmError::UnknownMnemonic { line, .. }
            | AsmError::DuplicateLabel { line, .. }
            | AsmError::UnresolvedLabel { line, .. }
            | AsmError::TrailingLabel { line, .. }
            | AsmError::OperandCount { line, .. }
            | AsmError::BadOperand { line, .. } => Some(*line),
        }
    }
}

struct Parser<'a> {
    line: usize,
    labels: &'a mut HashMap<String, u32>,
    names: &'a mut Vec<String>,
    // first line a label name was referenced on
    refs: &'a mut HashMap<String, usize>,
}

impl Parser<'_> {
    fn bad(&self, operand: &str, reason: &'static str) -> AsmError {
        AsmError::BadOperand { line: self.line, operand: operand.to_string(), reason }
    }

    fn reg(&self, s: &str) -> Result<Reg, AsmError> {
        let id = s
            .strip_prefix('r')
            .or_else(|| s.strip_prefix('R'))
            .ok_or_else(|| self.bad(s, "expected register"))?;
        let id: u8 = id.parse().map_err(|_| self.bad(s, "expected register"))?;
        Reg::new(id).ok_or_else(|| self.bad(s, "register id out of range"))
    }

    fn imm(&self, s: &str) -> Result<u64, AsmError> {
        let parsed = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            u64::from_str_radix(hex, 16).ok()
        } else if let Some(neg) = s.strip_prefix('-') {
            neg.parse::<u64>().ok().map(|v| v.wrapping_neg())
        } else {
            s.parse::<u64>().ok()
        };
        parsed.ok_or_else(|| self.bad(s, "expected immediate"))
    }

    fn offset(&self, s: &str) -> Result<i64, AsmError> {
        s.parse::<i64>().map_err(|_| self.bad(s, "expected signed offset"))
    }

    fn operand(&self, s: &str) -> Result<Operand, AsmError> {
        if s.starts_with(['r', 'R']) {
            self.reg(s).map(Operand::Reg)
        } else {
            self.imm(s).map(Operand::Imm)
        }
    }

    fn label(&mut self, s: &str) -> Result<Label, AsmError> {
        if !valid_label_name(s) {
            return Err(self.bad(s, "expected label"));
        }
        self.refs.entry(s.to_string()).or_insert(self.line);
        let next = self.names.len() as u32;
        let id = *self.labels.entry(s.to_string()).or_insert_with(|| {
            self.names.push(s.to_string());
            next
        });
        Ok(Label(id))
    }

    fn instruction(&mut self, mnemonic: &str, ops: &[&str]) -> Result<Instruction, AsmError> {
        let upper = mnemonic.to_ascii_uppercase();
        let expected = match upper.as_str() {
            "LOADB" => 4,
            "STORE" | "SELMASK" | "CMPBLT" => 3,
            "MOVI" | "MOVL" | "ADD" | "AND" | "SHL" | "FLUSH" => 2,
            "JMPI" | "CALL" => 1,
            "RET" | "FENCE" | "HALT" => 0,
            _ => {
                return Err(AsmError::UnknownMnemonic { line: self.line, mnemonic: mnemonic.to_string() })
            }
        };
        if ops.len() != expected {
            return Err(AsmError::OperandCount { line: self.line, mnemonic: upper, expected, found: ops.len() });
        }
        let ins = match upper.as_str() {
            "LOADB" => {
                let scale = self.imm(ops[3])?;
                Instruction::LoadByte {
                    dst: self.reg(ops[0])?,
                    base: self.reg(ops[1])?,
                    index: self.reg(ops[2])?,
                    scale: Scale::from_bytes(scale).ok_or_else(|| self.bad(ops[3], "scale must be 1 or 4096"))?,
                }
            }
            "STORE" => Instruction::Store { base: self.reg(ops[0])?, offset: self.offset(ops[1])?, src: self.reg(ops[2])? },
            "MOVI" => Instruction::MovImm { dst: self.reg(ops[0])?, value: self.imm(ops[1])? },
            "MOVL" => Instruction::MovLabel { dst: self.reg(ops[0])?, target: self.label(ops[1])? },
            "ADD" | "AND" | "SHL" => {
                let op = match upper.as_str() {
                    "ADD" => AluOp::Add,
                    "AND" => AluOp::And,
                    _ => AluOp::Shl,
                };
                Instruction::Alu { op, dst: self.reg(ops[0])?, src: self.operand(ops[1])? }
            }
            "CMPBLT" => Instruction::CmpBranchLess { a: self.reg(ops[0])?, b: self.reg(ops[1])?, target: self.label(ops[2])? },
            "JMPI" => Instruction::JumpIndirect { target: self.reg(ops[0])? },
            "CALL" => Instruction::Call { target: self.label(ops[0])? },
            "RET" => Instruction::Ret,
            "FLUSH" => Instruction::Flush { base: self.reg(ops[0])?, offset: self.offset(ops[1])? },
            "FENCE" => Instruction::Fence,
            "SELMASK" => Instruction::SelectMask { dst: self.reg(ops[0])?, a: self.reg(ops[1])?, b: self.reg(ops[2])? },
            _ => Instruction::Halt,
        };
        Ok(ins)
    }
}

/// Assembles source text into a [`Program`]. Errors carry 1-based line numbers.
pub fn assemble(text: &str) -> Result<Program, AsmError> {
    let mut label_ids: HashMap<String, u32> = HashMap::new();
    let mut names: Vec<String> = Vec::new();
    let mut refs: HashMap<String, usize> = HashMap::new();
    let mut defined: HashMap<u32, (usize, usize)> = HashMap::new(); // id -> (index, line)
    let mut instructions = Vec::new();
    let mut pending: Vec<(String, usize)> = Vec::new();

    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let code = raw.split('#').next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        let mut parser = Parser { line, labels: &mut label_ids, names: &mut names, refs: &mut refs };

        if let Some(name) = code.strip_suffix(':') {
            let name = name.trim();
            if !valid_label_name(name) {
                return Err(parser.bad(name, "invalid label name"));
            }
            let id = parser.label(name)?;
            // a definition is not a reference
            if refs.get(name) == Some(&line) {
                refs.remove(name);
            }
            if defined.insert(id.0, (instructions.len(), line)).is_some() {
                return Err(AsmError::DuplicateLabel { line, name: name.to_string() });
            }
            pending.push((name.to_string(), line));
            continue;
        }

        let (mnemonic, rest) = code.split_once(char::is_whitespace).unwrap_or((code, ""));
        let ops: Vec<&str> = if rest.trim().is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        let ins = parser.instruction(mnemonic, &ops)?;
        instructions.push(ins);
        pending.clear();
    }

    if let Some((name, line)) = pending.into_iter().next() {
        return Err(AsmError::TrailingLabel { line, name });
    }
    if instructions.is_empty() {
        return Err(AsmError::Empty);
    }

    let mut unresolved: Vec<(usize, &String)> = names
        .iter()
        .enumerate()
        .filter(|(id, _)| !defined.contains_key(&(*id as u32)))
        .map(|(_, name)| (refs.get(name).copied().unwrap_or(0), name))
        .collect();
    unresolved.sort();
    if let Some((line, name)) = unresolved.first() {
        return Err(AsmError::UnresolvedLabel { line: *line, name: (*name).clone() });
    }

    let labels = names
        .into_iter()
        .enumerate()
        .map(|(id, name)| LabelDef { name, index: defined[&(id as u32)].0 })
        .collect();
    Program::from_parts(instructions, labels).map_err(|e| match e {
        // assembler already rejected everything else
        super::ProgramError::Empty => AsmError::Empty,
        other => unreachable!("assembler produced invalid program: {other}"),
    })
}

fn fmt_operand(op: Operand) -> String {
    match op {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(v) => format!("{v:#x}"),
    }
}

pub(crate) fn fmt_instruction(p: &Program, ins: &Instruction) -> String {
    match *ins {
        Instruction::LoadByte { dst, base, index, scale } => {
            format!("LOADB {dst}, {base}, {index}, {}", scale.bytes())
        }
        Instruction::Store { base, offset, src } => format!("STORE {base}, {offset}, {src}"),
        Instruction::MovImm { dst, value } => format!("MOVI {dst}, {value:#x}"),
        Instruction::MovLabel { dst, target } => format!("MOVL {dst}, {}", p.label_name(target)),
        Instruction::Alu { op, dst, src } => {
            let m = match op {
                AluOp::Add => "ADD",
                AluOp::And => "AND",
                AluOp::Shl => "SHL",
            };
            format!("{m} {dst}, {}", fmt_operand(src))
        }
        Instruction::CmpBranchLess { a, b, target } => format!("CMPBLT {a}, {b}, {}", p.label_name(target)),
        Instruction::JumpIndirect { target } => format!("JMPI {target}"),
        Instruction::Call { target } => format!("CALL {}", p.label_name(target)),
        Instruction::Ret => "RET".to_string(),
        Instruction::Flush { base, offset } => format!("FLUSH {base}, {offset}"),
        Instruction::Fence => "FENCE".to_string(),
        Instruction::SelectMask { dst, a, b } => format!("SELMASK {dst}, {a}, {b}"),
        Instruction::Halt => "HALT".to_string(),
    }
}

/// Canonical source text: labels on their own line, instructions indented
/// by four spaces.
pub fn disassemble(p: &Program) -> String {
    let mut out = String::new();
    for (pc, ins) in p.instructions().iter().enumerate() {
        for def in p.labels_at(pc) {
            let _ = writeln!(out, "{}:", def.name);
        }
        let _ = writeln!(out, "    {}", fmt_instruction(p, ins));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fence_halt() {
        let p = assemble("FENCE\nHALT").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.entry(), 0);
        assert_eq!(p.instructions(), &[Instruction::Fence, Instruction::Halt]);
    }

    #[test]
    fn empty_source_is_an_error() {
        assert_eq!(assemble(""), Err(AsmError::Empty));
        assert_eq!(assemble("# only a comment\n\n"), Err(AsmError::Empty));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = assemble("HALT\nFROB r1").unwrap_err();
        assert_eq!(e, AsmError::UnknownMnemonic { line: 2, mnemonic: "FROB".into() });

        let e = assemble("a:\nHALT\na:\nHALT").unwrap_err();
        assert_eq!(e, AsmError::DuplicateLabel { line: 3, name: "a".into() });

        let e = assemble("FENCE\nCALL nowhere\nHALT").unwrap_err();
        assert_eq!(e, AsmError::UnresolvedLabel { line: 2, name: "nowhere".into() });

        let e = assemble("LOADB r1, r2, r3, 8").unwrap_err();
        assert_eq!(e.line(), Some(1));
        let e = assemble("MOVI r16, 1").unwrap_err();
        assert_eq!(e.line(), Some(1));
        let e = assemble("HALT\nend:").unwrap_err();
        assert!(matches!(e, AsmError::TrailingLabel { line: 2, .. }));
    }

    #[test]
    fn two_instruction_program_disassembles_to_two_lines() {
        let p = assemble("movi r0, 5\nhalt").unwrap();
        assert_eq!(disassemble(&p), "    MOVI r0, 0x5\n    HALT\n");
    }

    #[test]
    fn label_line_precedes_its_instruction() {
        let p = assemble("CMPBLT r1, r2, L0\nHALT\nL0:\nFENCE\nHALT").unwrap();
        let text = disassemble(&p);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[2], "L0:");
        assert_eq!(lines[3].trim(), "FENCE");
    }

    #[test]
    fn immediates_and_offsets() {
        let p = assemble("MOVI r1, -1\nADD r1, 0x10\nSTORE r15, -8, r1\nHALT").unwrap();
        assert_eq!(p.instructions()[0], Instruction::MovImm { dst: Reg(1), value: u64::MAX });
        assert_eq!(p.instructions()[2], Instruction::Store { base: Reg(15), offset: -8, src: Reg(1) });
        assert_eq!(assemble(&disassemble(&p)).unwrap(), p);
    }
}
