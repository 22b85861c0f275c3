//! Inter-segment control transfers: callgate long call, long return, far
//! jump, and the one-step successor enumeration the verifier builds on.

use std::fmt;

use crate::machine::{
    page_base, Bitness, Descriptor, Fault, FaultKind, MachineState, PageClass, Ring, SegmentDescriptor,
    SegmentSelector, TableKind, X32_REACH,
};

/// Four values saved by a callgate and consumed by a long return. Nothing
/// authenticates them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SavedFrame {
    pub rip: u64,
    pub cs: SegmentSelector,
    pub rsp: u64,
    pub ss: SegmentSelector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferKind {
    CallGateCall(SegmentSelector),
    LongReturn(SavedFrame),
    FarJump(SegmentSelector, u64),
    NearTransfer(u64),
}

impl TransferKind {
    fn order(&self) -> u8 {
        match self {
            TransferKind::NearTransfer(_) => 0,
            TransferKind::CallGateCall(_) => 1,
            TransferKind::FarJump(..) => 2,
            TransferKind::LongReturn(_) => 3,
        }
    }

    pub fn is_controlled(&self) -> bool {
        matches!(self, TransferKind::CallGateCall(_))
    }
}

impl fmt::Display for TransferKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransferKind::CallGateCall(sel) => write!(f, "lcall {sel}"),
            TransferKind::LongReturn(fr) => write!(f, "lret {}:{:#x}", fr.cs, fr.rip),
            TransferKind::FarJump(sel, off) => write!(f, "ljmp {sel}:{off:#x}"),
            TransferKind::NearTransfer(off) => write!(f, "jmp {off:#x}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Control {
    Controlled,
    NonControlled,
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Control::Controlled => "controlled",
            Control::NonControlled => "non-controlled",
        })
    }
}

/// Execution mode reached by a transfer. `selector` is `None` for a near
/// transfer, which stays in whatever segment is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModeTarget {
    pub ring: Ring,
    pub bitness: Bitness,
    pub selector: Option<SegmentSelector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transfer {
    pub mechanism: TransferKind,
    pub control: Control,
    pub target: ModeTarget,
}

/// Callgate admission as a callgate long call decides it: the caller must be
/// at or above the gate's RMPL and strictly below the target ring.
pub fn callgate_admits(caller: Ring, target: Ring, rmpl: Ring) -> bool {
    !(caller > rmpl || caller <= target)
}

/// A long return only goes to equal or lower privilege.
pub fn long_return_admits(current: Ring, destination: Ring) -> bool {
    destination >= current
}

fn code_segment(state: &MachineState, sel: SegmentSelector) -> Result<(SegmentDescriptor, Bitness), Fault> {
    match state.resolve_selector(sel)? {
        Descriptor::Segment(seg) => match seg.bitness() {
            Some(b) => Ok((*seg, b)),
            None => Err(Fault::gp(format!("{sel} is a data segment"))),
        },
        Descriptor::Gate(_) => Err(Fault::gp(format!("{sel} is a gate"))),
    }
}

fn count_transition(state: &mut MachineState, from: Ring) {
    if state.cpl() != from {
        state.steps.ring_transitions += 1;
    }
}

impl MachineState {
    /// Long call through the callgate named by `sel`.
    pub fn long_call(&mut self, sel: SegmentSelector) -> Result<(), Fault> {
        self.ensure_running()?;
        let r = self.long_call_inner(sel);
        self.trap(r)
    }

    fn long_call_inner(&mut self, sel: SegmentSelector) -> Result<(), Fault> {
        let gate = match self.resolve_selector(sel)? {
            Descriptor::Gate(g) => *g,
            Descriptor::Segment(_) => {
                return Err(Fault::new(FaultKind::InvalidGate, format!("{sel} is not a callgate")));
            }
        };
        let (target, bitness) = code_segment(self, gate.target)
            .map_err(|f| Fault::new(FaultKind::InvalidGate, format!("gate {sel} target: {}", f.detail)))?;
        if bitness != Bitness::X64 {
            return Err(Fault::new(FaultKind::InvalidGate, format!("gate {sel} targets a 32-bit segment")));
        }
        let caller = self.cpl();
        let m = target.dpl;
        if !callgate_admits(caller, m, gate.rmpl) {
            return Err(Fault::gp(format!(
                "callgate {sel} denied: caller ring {caller}, target ring {m}, rmpl {}",
                gate.rmpl
            )));
        }
        let stack = self
            .tss
            .stack(m)
            .ok_or_else(|| Fault::gp(format!("no TSS stack for ring {m}")))?;
        let saved = SavedFrame { rip: self.regs.rip, cs: self.regs.cs, rsp: self.regs.rsp(), ss: self.regs.ss };

        self.regs.ss = stack.ss.with_rpl(m);
        self.regs.set_rsp(stack.rsp);
        self.regs.cs = gate.target.with_rpl(m);
        self.regs.rip = gate.offset;
        self.steps.descriptor_loads += 3;
        count_transition(self, caller);

        self.push(saved.ss.raw() as u64)?;
        self.push(saved.rsp)?;
        self.push(saved.cs.raw() as u64)?;
        self.push(saved.rip)?;
        self.fetch_check()
    }

    /// Reads the frame a long return would consume, without popping it.
    pub fn peek_frame(&mut self) -> Result<SavedFrame, Fault> {
        let rsp = self.regs.rsp();
        let rip = self.read_u64(rsp)?;
        let cs = self.read_u64(rsp.wrapping_add(8))?;
        let new_rsp = self.read_u64(rsp.wrapping_add(16))?;
        let ss = self.read_u64(rsp.wrapping_add(24))?;
        let cs = u16::try_from(cs).map_err(|_| self.raise(Fault::gp(format!("saved CS {cs:#x} is not a selector"))))?;
        let ss = u16::try_from(ss).map_err(|_| self.raise(Fault::gp(format!("saved SS {ss:#x} is not a selector"))))?;
        Ok(SavedFrame {
            rip,
            cs: SegmentSelector::from_raw(cs),
            rsp: new_rsp,
            ss: SegmentSelector::from_raw(ss),
        })
    }

    /// Long return through whatever frame sits at RSP.
    pub fn long_return(&mut self) -> Result<(), Fault> {
        self.ensure_running()?;
        let frame = self.peek_frame()?;
        let r = self.long_return_inner(frame);
        self.trap(r)
    }

    /// Long return consuming `frame` as if it had been popped; the stack is
    /// left alone. Used to replay forged returns without staging memory.
    pub fn long_return_with(&mut self, frame: SavedFrame) -> Result<(), Fault> {
        self.ensure_running()?;
        let r = self.long_return_inner(frame);
        self.trap(r)
    }

    fn long_return_inner(&mut self, frame: SavedFrame) -> Result<(), Fault> {
        let current = self.cpl();
        let dest = frame.cs.rpl;
        if !long_return_admits(current, dest) {
            return Err(Fault::gp(format!("lret denied: ring {current} -> ring {dest}")));
        }
        let (code, _) = code_segment(self, frame.cs)?;
        if code.dpl != dest {
            return Err(Fault::gp(format!("lret: {} has DPL {}, not RPL {dest}", frame.cs, code.dpl)));
        }
        let stack = self.resolve_segment(frame.ss).map_err(|f| Fault::new(FaultKind::InvalidSelector, f.detail))?;
        if stack.is_code() || stack.dpl != dest {
            return Err(Fault::new(
                FaultKind::InvalidSelector,
                format!("lret: {} is not a ring {dest} data segment", frame.ss),
            ));
        }
        self.regs.rip = frame.rip;
        self.regs.cs = frame.cs;
        self.regs.set_rsp(frame.rsp);
        self.regs.ss = frame.ss.with_rpl(dest);
        self.steps.descriptor_loads += 2;
        count_transition(self, current);
        self.fetch_check()
    }

    /// Non-gated far jump. Never raises privilege.
    pub fn far_jump(&mut self, sel: SegmentSelector, offset: u64) -> Result<(), Fault> {
        self.ensure_running()?;
        let r = self.far_jump_inner(sel, offset);
        self.trap(r)
    }

    fn far_jump_inner(&mut self, sel: SegmentSelector, offset: u64) -> Result<(), Fault> {
        let current = self.cpl();
        let (code, _) = code_segment(self, sel)?;
        if code.dpl < current {
            return Err(Fault::gp(format!("far jump from ring {current} to more privileged {sel}")));
        }
        self.regs.cs = sel.with_rpl(code.dpl);
        self.regs.rip = offset;
        self.steps.descriptor_loads += 1;
        count_transition(self, current);
        self.fetch_check()
    }

    pub fn near_transfer(&mut self, offset: u64) -> Result<(), Fault> {
        self.ensure_running()?;
        self.regs.rip = offset;
        self.fetch_check()
    }

    /// Every mode reachable in one step from a context running at `from`,
    /// with any selector and any forged return frame. Ordered by table, slot,
    /// then mechanism.
    pub fn enumerate_transfers(&self, from: (Ring, Bitness)) -> Vec<Transfer> {
        if !self.is_running() {
            return Vec::new();
        }
        let (ring, bitness) = from;
        let mut out = vec![Transfer {
            mechanism: TransferKind::NearTransfer(0),
            control: Control::NonControlled,
            target: ModeTarget { ring, bitness, selector: None },
        }];
        let mut rest = Vec::new();
        for table in [TableKind::Gdt, TableKind::Ldt] {
            for (slot, desc) in self.table(table).iter() {
                let sel = SegmentSelector::new(table, slot as u16, ring);
                match desc {
                    Descriptor::Gate(gate) => {
                        let Ok((target, tb)) = code_segment(self, gate.target) else { continue };
                        if tb != Bitness::X64 || !callgate_admits(ring, target.dpl, gate.rmpl) {
                            continue;
                        }
                        rest.push(Transfer {
                            mechanism: TransferKind::CallGateCall(sel),
                            control: Control::Controlled,
                            target: ModeTarget {
                                ring: target.dpl,
                                bitness: tb,
                                selector: Some(gate.target.with_rpl(target.dpl)),
                            },
                        });
                    }
                    Descriptor::Segment(seg) => {
                        let Some(tb) = seg.bitness() else { continue };
                        if seg.dpl < ring {
                            continue;
                        }
                        let dest = sel.with_rpl(seg.dpl);
                        let target = ModeTarget { ring: seg.dpl, bitness: tb, selector: Some(dest) };
                        let offset = landing_offset(self, seg);
                        rest.push(Transfer {
                            mechanism: TransferKind::FarJump(dest, offset),
                            control: Control::NonControlled,
                            target,
                        });
                        if let Some(ss) = stack_selector_for(self, seg.dpl) {
                            rest.push(Transfer {
                                mechanism: TransferKind::LongReturn(SavedFrame { rip: offset, cs: dest, rsp: 0, ss }),
                                control: Control::NonControlled,
                                target,
                            });
                        }
                    }
                }
            }
        }
        rest.sort_by_key(|t| {
            let key = match t.mechanism {
                TransferKind::CallGateCall(s) | TransferKind::FarJump(s, _) => s,
                TransferKind::LongReturn(f) => f.cs,
                TransferKind::NearTransfer(_) => SegmentSelector::NULL,
            };
            (key.table, key.index, t.mechanism.order())
        });
        out.extend(rest);
        out
    }
}

/// First data segment whose DPL equals `ring`, usable as a return SS.
pub fn stack_selector_for(state: &MachineState, ring: Ring) -> Option<SegmentSelector> {
    [TableKind::Gdt, TableKind::Ldt].into_iter().find_map(|t| {
        state.table(t).iter().find_map(|(slot, d)| match d {
            Descriptor::Segment(s) if !s.is_code() && s.dpl == ring => {
                Some(SegmentSelector::new(t, slot as u16, ring))
            }
            _ => None,
        })
    })
}

/// An offset inside `seg` whose page is executable at the segment's ring,
/// falling back to the segment base when none is mapped.
pub fn landing_offset(state: &MachineState, seg: &SegmentDescriptor) -> u64 {
    let reach = match seg.bitness() {
        Some(Bitness::X32) => X32_REACH,
        _ => u64::MAX,
    };
    state
        .pages
        .iter()
        .filter(|(_, e)| e.executable)
        .filter(|(_, e)| match e.class {
            PageClass::Supervisor => seg.dpl.is_supervisor(),
            PageClass::User => !(state.smep && seg.dpl.is_supervisor()),
        })
        .map(|(p, _)| page_base(p))
        .find(|&addr| addr < reach && seg.covers(addr, 1))
        .unwrap_or(seg.base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{GateDescriptor, Perms, PageClass};

    const CODE: u64 = 0x10_0000;
    const USER_CODE: u64 = 0x20_0000;

    fn sel(table: TableKind, index: u16, ring: Ring) -> SegmentSelector {
        SegmentSelector::new(table, index, ring)
    }

    /// GDT slots 1..=4: flat x64 code for rings 0..3; slots 5..=8 data for
    /// rings 0..3. Each supervisor ring has a TSS stack.
    fn rings_machine() -> MachineState {
        let mut m = MachineState::new();
        m.map(CODE..CODE + 0x1000, PageClass::Supervisor, Perms::RX, false);
        m.map(USER_CODE..USER_CODE + 0x1000, PageClass::User, Perms::RX, false);
        for r in Ring::ALL {
            let i = r.value() as u16;
            m.install_descriptor(TableKind::Gdt, 1 + i as usize, SegmentDescriptor::flat_code(r).into()).unwrap();
            m.install_descriptor(TableKind::Gdt, 5 + i as usize, SegmentDescriptor::flat_data(r).into()).unwrap();
            let stack = 0x40_0000 + 0x1_0000 * i as u64;
            let class = if r.is_supervisor() { PageClass::Supervisor } else { PageClass::User };
            m.map(stack..stack + 0x1000, class, Perms::RW, false);
            if r.is_supervisor() {
                m.set_ring_stack(r, sel(TableKind::Gdt, 5 + i, r), stack + 0x1000).unwrap();
            }
        }
        m
    }

    fn enter_ring(m: &mut MachineState, r: Ring) {
        let i = r.value() as u16;
        let rip = if r.is_supervisor() { CODE } else { USER_CODE };
        m.load_context(sel(TableKind::Gdt, 1 + i, r), sel(TableKind::Gdt, 5 + i, r), rip, 0x40_0f00 + 0x1_0000 * i as u64)
            .unwrap();
    }

    #[test]
    fn callgate_truth_table_all_triples() {
        // Independent transcription: deny iff n > rmpl or n <= m.
        let oracle = |n: u8, m: u8, rmpl: u8| !(n > rmpl || n <= m);
        let mut checked = 0;
        for n in Ring::ALL {
            for t in Ring::ALL {
                for rmpl in Ring::ALL {
                    let mut mach = rings_machine();
                    let gate = GateDescriptor {
                        target: sel(TableKind::Gdt, 1 + t.value() as u16, Ring::R0),
                        offset: CODE,
                        rmpl,
                    };
                    mach.install_descriptor(TableKind::Ldt, 1, gate.into()).unwrap();
                    enter_ring(&mut mach, n);
                    let before = (mach.regs.rip, mach.regs.cs, mach.regs.rsp(), mach.regs.ss);
                    let r = mach.long_call(sel(TableKind::Ldt, 1, n));
                    let expect = oracle(n.value(), t.value(), rmpl.value());
                    assert_eq!(r.is_ok(), expect, "n={n} m={t} rmpl={rmpl}: {r:?}");
                    if expect {
                        assert_eq!(mach.cpl(), t);
                        let stack_top = 0x40_1000 + 0x1_0000 * t.value() as u64;
                        assert_eq!(mach.regs.rsp(), stack_top - 32);
                        let f = mach.peek_frame().unwrap();
                        assert_eq!((f.rip, f.cs, f.rsp, f.ss), before);
                    } else {
                        assert_eq!(r.unwrap_err().kind, FaultKind::GeneralProtection);
                    }
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 64);
    }

    #[test]
    fn long_return_truth_table_all_pairs() {
        for cur in Ring::ALL {
            for dest in Ring::ALL {
                let mut m = rings_machine();
                enter_ring(&mut m, cur);
                let d = dest.value() as u16;
                let rip = if dest.is_supervisor() { CODE } else { USER_CODE };
                let rsp = m.regs.rsp() - 32;
                let frame = [rip, sel(TableKind::Gdt, 1 + d, dest).raw() as u64, 0x1234, sel(TableKind::Gdt, 5 + d, dest).raw() as u64];
                for (i, v) in frame.iter().enumerate() {
                    m.kernel_write(rsp + 8 * i as u64, &v.to_le_bytes()).unwrap();
                }
                m.regs.set_rsp(rsp);
                let r = m.long_return();
                assert_eq!(r.is_ok(), dest >= cur, "cur={cur} dest={dest}: {r:?}");
                if r.is_ok() {
                    assert_eq!(m.cpl(), dest);
                    assert_eq!(m.regs.rsp(), 0x1234);
                    assert_eq!(m.regs.rip, rip);
                }
            }
        }
    }

    #[test]
    fn forged_frame_with_mismatched_dpl_is_refused() {
        let mut m = rings_machine();
        enter_ring(&mut m, Ring::R3);
        // RPL says ring 3 but the descriptor is ring 0 code.
        let rsp = m.regs.rsp() - 32;
        let frame = [CODE, sel(TableKind::Gdt, 1, Ring::R3).raw() as u64, 0, sel(TableKind::Gdt, 8, Ring::R3).raw() as u64];
        for (i, v) in frame.iter().enumerate() {
            m.kernel_write(rsp + 8 * i as u64, &v.to_le_bytes()).unwrap();
        }
        m.regs.set_rsp(rsp);
        assert_eq!(m.long_return().unwrap_err().kind, FaultKind::GeneralProtection);
    }

    #[test]
    fn bogus_saved_ss_is_invalid_selector() {
        let mut m = rings_machine();
        enter_ring(&mut m, Ring::R1);
        let rsp = m.regs.rsp() - 32;
        let frame = [USER_CODE, sel(TableKind::Gdt, 4, Ring::R3).raw() as u64, 0, sel(TableKind::Ldt, 9, Ring::R3).raw() as u64];
        for (i, v) in frame.iter().enumerate() {
            m.kernel_write(rsp + 8 * i as u64, &v.to_le_bytes()).unwrap();
        }
        m.regs.set_rsp(rsp);
        assert_eq!(m.long_return().unwrap_err().kind, FaultKind::InvalidSelector);
    }

    #[test]
    fn far_jump_never_escalates() {
        let mut m = rings_machine();
        enter_ring(&mut m, Ring::R2);
        assert_eq!(m.far_jump(sel(TableKind::Gdt, 2, Ring::R2), CODE).unwrap_err().kind, FaultKind::GeneralProtection);
        let mut m = rings_machine();
        enter_ring(&mut m, Ring::R3);
        m.far_jump(sel(TableKind::Gdt, 4, Ring::R3), USER_CODE).unwrap();
        assert_eq!(m.cpl(), Ring::R3);
        let mut m = rings_machine();
        enter_ring(&mut m, Ring::R3);
        assert_eq!(m.far_jump(sel(TableKind::Gdt, 9, Ring::R3), 0).unwrap_err().kind, FaultKind::InvalidSelector);
    }

    #[test]
    fn jump_into_supervisor_page_faults_on_fetch() {
        let mut m = rings_machine();
        enter_ring(&mut m, Ring::R3);
        assert_eq!(m.far_jump(sel(TableKind::Gdt, 4, Ring::R3), CODE).unwrap_err().kind, FaultKind::PageFault);
    }

    #[test]
    fn gate_to_x32_rejected_at_call_time_too() {
        let mut m = rings_machine();
        m.install_descriptor(TableKind::Ldt, 1, SegmentDescriptor::code(Ring::R1, Bitness::X32, 0, X32_REACH).into())
            .unwrap();
        let gate = GateDescriptor { target: sel(TableKind::Ldt, 1, Ring::R0), offset: CODE, rmpl: Ring::R3 };
        m.ldt.inject_raw(2, gate.into()).unwrap();
        enter_ring(&mut m, Ring::R3);
        assert_eq!(m.long_call(sel(TableKind::Ldt, 2, Ring::R3)).unwrap_err().kind, FaultKind::InvalidGate);
    }

    #[test]
    fn empty_tables_only_near_self_loop() {
        let m = MachineState::new();
        let t = m.enumerate_transfers((Ring::R3, Bitness::X64));
        assert_eq!(t.len(), 1);
        assert!(matches!(t[0].mechanism, TransferKind::NearTransfer(_)));
    }

    #[test]
    fn faulted_machine_enumerates_nothing() {
        let mut m = rings_machine();
        m.raise(Fault::gp("test"));
        assert!(m.enumerate_transfers((Ring::R3, Bitness::X64)).is_empty());
    }
}
