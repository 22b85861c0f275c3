//! Gate programs: short micro-op sequences standing in for the assembly of
//! the Enter and Exit gates, plus the interpreter that runs them.
//!
//! A program occupies one address slot per micro-op starting at its load
//! address, so `rip - base` is the index of the next op.

use crate::machine::{page_of, Fault, MachineState, Reg, Ring};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MicroOp {
    /// Compare the ring in the saved CS at `rsp + offset` with `ring`; on
    /// mismatch continue at op `on_mismatch`.
    CheckSavedCsRing { offset: u64, ring: Ring, on_mismatch: usize },
    /// `pushq 24(%rsp)` four times: duplicates the callgate frame at RSP.
    DupFrame,
    SaveRegs(Vec<Reg>),
    /// Pops into the listed registers in reverse order of `SaveRegs`.
    RestoreRegs(Vec<Reg>),
    MovImm { dst: Reg, imm: u64 },
    SubImm { dst: Reg, imm: u64 },
    StoreImm32 { base: Reg, offset: u64, imm: u32 },
    Store64 { base: Reg, offset: u64, src: Reg },
    PushImm(u64),
    PushReg(Reg),
    Scrub(Vec<Reg>),
    Lret,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateProgram {
    pub name: String,
    pub ops: Vec<MicroOp>,
}

impl GateProgram {
    pub fn new(name: impl Into<String>, ops: Vec<MicroOp>) -> Self {
        GateProgram { name: name.into(), ops }
    }

    pub fn len(&self) -> u64 {
        self.ops.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

/// How a gate run ended. Every run ends in an `lret`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateRun {
    /// A saved-CS check failed and control went to its mismatch target.
    pub rejected: bool,
    pub ops_executed: usize,
}

const STEP_LIMIT: usize = 10_000;

/// Runs the gate program containing RIP until it returns.
pub fn run_gate(m: &mut MachineState) -> Result<GateRun, Fault> {
    m.ensure_running()?;
    let rip = m.regs.rip;
    let found = m
        .code
        .range(..=rip)
        .next_back()
        .filter(|(base, p)| rip < *base + p.len())
        .map(|(base, p)| (*base, p.clone()));
    let Some((base, program)) = found else {
        return Err(m.raise(Fault::gp(format!("no gate program at {rip:#x}"))));
    };
    if page_of(base) != page_of(base + program.len().saturating_sub(1)) {
        return Err(m.raise(Fault::gp(format!("gate program {} straddles a page", program.name))));
    }

    let mut pc = (rip - base) as usize;
    let mut rejected = false;
    let mut executed = 0;
    while executed < STEP_LIMIT {
        let op = program
            .ops
            .get(pc)
            .ok_or_else(|| Fault::gp(format!("{} ran off its end", program.name)));
        let op = m.trap(op)?;
        m.regs.rip = base + pc as u64;
        executed += 1;
        let mut next = pc + 1;
        match op {
            MicroOp::CheckSavedCsRing { offset, ring, on_mismatch } => {
                let cs = m.read_u64(m.regs.rsp().wrapping_add(*offset))?;
                if (cs & 0x3) as u8 != ring.value() {
                    rejected = true;
                    next = *on_mismatch;
                }
            }
            MicroOp::DupFrame => {
                for _ in 0..4 {
                    let v = m.read_u64(m.regs.rsp().wrapping_add(24))?;
                    m.push(v)?;
                }
                m.steps.context_saves += 1;
            }
            MicroOp::SaveRegs(regs) => {
                for r in regs {
                    let v = m.regs.get(*r);
                    m.push(v)?;
                }
                m.steps.context_saves += 1;
            }
            MicroOp::RestoreRegs(regs) => {
                for r in regs.iter().rev() {
                    let v = m.pop()?;
                    m.regs.set(*r, v);
                }
                m.steps.context_saves += 1;
            }
            MicroOp::MovImm { dst, imm } => m.regs.set(*dst, *imm),
            MicroOp::SubImm { dst, imm } => {
                let v = m.regs.get(*dst).wrapping_sub(*imm);
                m.regs.set(*dst, v);
            }
            MicroOp::StoreImm32 { base: b, offset, imm } => {
                let addr = m.regs.get(*b).wrapping_add(*offset);
                m.write_mem(addr, &imm.to_le_bytes())?;
            }
            MicroOp::Store64 { base: b, offset, src } => {
                let addr = m.regs.get(*b).wrapping_add(*offset);
                let v = m.regs.get(*src);
                m.write_u64(addr, v)?;
            }
            MicroOp::PushImm(v) => m.push(*v)?,
            MicroOp::PushReg(r) => {
                let v = m.regs.get(*r);
                m.push(v)?;
            }
            MicroOp::Scrub(regs) => {
                for r in regs {
                    m.regs.set(*r, 0);
                }
            }
            MicroOp::Lret => {
                m.long_return()?;
                return Ok(GateRun { rejected, ops_executed: executed });
            }
        }
        pc = next;
    }
    Err(m.raise(Fault::gp(format!("{} exceeded {STEP_LIMIT} steps", program.name))))
}
