//! Strict in-order interpreter with no speculation, no cache and no
//! predictors. Used as the oracle for the speculative pipeline.

use crate::isa::{Instruction, Operand, Program, LINK_REG};

use super::{ArchState, ExecError, FaultKind, DEFAULT_MAX_STEPS};

pub fn reference_run(program: &Program, arch: ArchState, inputs: &[u64]) -> Result<ArchState, ExecError> {
    reference_run_limited(program, arch, inputs, DEFAULT_MAX_STEPS)
}

pub fn reference_run_limited(
    program: &Program,
    mut arch: ArchState,
    inputs: &[u64],
    max_steps: u64,
) -> Result<ArchState, ExecError> {
    arch.start(program, inputs)?;
    let mut steps = 0u64;
    while !arch.halted {
        if steps == max_steps {
            return Err(ExecError::StepLimit(max_steps));
        }
        steps += 1;

        let pc = arch.pc;
        let fault = |kind| ExecError::Fault { pc, kind };
        let ins = *program.get(pc).ok_or(fault(FaultKind::PcOutOfRange))?;
        let r = arch.regs;
        let mut next = pc + 1;
        match ins {
            Instruction::LoadByte { dst, base, index, scale } => {
                let addr = r[base.index()].wrapping_add(r[index.index()].wrapping_mul(scale.bytes()));
                let v = arch.memory.read(addr).ok_or(fault(FaultKind::OutOfBounds { addr }))?;
                arch.regs[dst.index()] = u64::from(v);
            }
            Instruction::Store { base, offset, src } => {
                let addr = r[base.index()].wrapping_add(offset as u64);
                if !arch.memory.write(addr, r[src.index()] as u8) {
                    return Err(fault(FaultKind::OutOfBounds { addr }));
                }
            }
            Instruction::MovImm { dst, value } => arch.regs[dst.index()] = value,
            Instruction::MovLabel { dst, target } => arch.regs[dst.index()] = program.target(target) as u64,
            Instruction::Alu { op, dst, src } => {
                let rhs = match src {
                    Operand::Reg(s) => r[s.index()],
                    Operand::Imm(v) => v,
                };
                arch.regs[dst.index()] = op.eval(r[dst.index()], rhs);
            }
            Instruction::SelectMask { dst, a, b } => {
                arch.regs[dst.index()] = if r[a.index()] < r[b.index()] { u64::MAX } else { 0 };
            }
            Instruction::CmpBranchLess { a, b, target } => {
                if r[a.index()] < r[b.index()] {
                    next = program.target(target);
                }
            }
            Instruction::JumpIndirect { target } => {
                let dest = r[target.index()];
                if dest >= program.len() as u64 {
                    return Err(fault(FaultKind::BadJumpTarget { target: dest }));
                }
                next = dest as usize;
            }
            Instruction::Call { target } => {
                arch.regs[LINK_REG.index()] = (pc + 1) as u64;
                next = program.target(target);
            }
            Instruction::Ret => {
                let dest = r[LINK_REG.index()];
                if dest >= program.len() as u64 {
                    return Err(fault(FaultKind::BadJumpTarget { target: dest }));
                }
                next = dest as usize;
            }
            Instruction::Flush { base, offset } => {
                let addr = r[base.index()].wrapping_add(offset as u64);
                if !arch.memory.contains(addr) {
                    return Err(fault(FaultKind::OutOfBounds { addr }));
                }
            }
            Instruction::Fence => {}
            Instruction::Halt => {
                arch.halted = true;
                next = pc;
            }
        }
        arch.pc = next;
    }
    Ok(arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{assemble, MemoryImage};

    #[test]
    fn movi_halt() {
        let p = assemble("MOVI r0, 5\nHALT").unwrap();
        let a = reference_run(&p, ArchState::new(MemoryImage::new(4096).unwrap()), &[]).unwrap();
        assert_eq!(a.regs[0], 5);
        assert!(a.halted);
    }

    #[test]
    fn call_ret_and_step_limit() {
        let p = assemble("CALL f\nHALT\nf:\nMOVI r2, 7\nRET").unwrap();
        let a = reference_run(&p, ArchState::new(MemoryImage::new(4096).unwrap()), &[]).unwrap();
        assert_eq!(a.regs[2], 7);
        assert_eq!(a.pc, 1);

        let looping = assemble("top:\nMOVI r0, 0\nCMPBLT r0, r1, top\nHALT").unwrap();
        let err = reference_run_limited(&looping, ArchState::new(MemoryImage::new(4096).unwrap()), &[1], 100);
        assert_eq!(err.unwrap_err(), ExecError::StepLimit(100));
    }
}
