//! Memory, paging, descriptor tables, and per-access privilege checks.
//!
//! The machine is a plain value. Privilege is never stored on its own: the
//! current privilege level is the RPL of the selector in `regs.cs`, and the
//! bitness is whatever the descriptor that selector names says it is.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::gate::GateProgram;
use crate::lotr::InitLock;

pub const PAGE_SIZE: u64 = 4096;

/// Number of slots in each descriptor table, slot 0 included.
pub const TABLE_CAPACITY: usize = 16;

/// First linear address of the kernel half of the address space.
pub const KERNEL_BASE: u64 = 0xFFFF_8000_0000_0000;

/// Exclusive upper bound of anything a 32-bit segment can name.
pub const X32_REACH: u64 = 1 << 32;

pub fn page_of(addr: u64) -> u64 {
    addr / PAGE_SIZE
}

pub fn page_base(page: u64) -> u64 {
    page * PAGE_SIZE
}

/// Page numbers touched by `[addr, addr + len)`.
pub fn pages_spanning(addr: u64, len: u64) -> Range<u64> {
    if len == 0 {
        return page_of(addr)..page_of(addr);
    }
    let last = addr.saturating_add(len - 1);
    page_of(addr)..page_of(last) + 1
}

/// A privilege ring. Lower numbers are more privileged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ring(u8);

impl Ring {
    pub const R0: Ring = Ring(0);
    pub const R1: Ring = Ring(1);
    pub const R2: Ring = Ring(2);
    pub const R3: Ring = Ring(3);
    pub const ALL: [Ring; 4] = [Ring::R0, Ring::R1, Ring::R2, Ring::R3];

    pub fn new(value: u8) -> Option<Ring> {
        (value <= 3).then_some(Ring(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Rings 0 through 2 may touch Supervisor pages.
    pub fn is_supervisor(self) -> bool {
        self.0 <= 2
    }
}

impl fmt::Display for Ring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bitness {
    X64,
    X32,
}

impl fmt::Display for Bitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bitness::X64 => "x64",
            Bitness::X32 => "x32",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TableKind {
    Gdt,
    Ldt,
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableKind::Gdt => "gdt",
            TableKind::Ldt => "ldt",
        })
    }
}

/// Index, table indicator and requested privilege level, as in the 16-bit
/// hardware encoding `index << 3 | ti << 2 | rpl`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentSelector {
    pub table: TableKind,
    pub index: u16,
    pub rpl: Ring,
}

impl SegmentSelector {
    pub const NULL: SegmentSelector = SegmentSelector { table: TableKind::Gdt, index: 0, rpl: Ring::R0 };

    pub const fn new(table: TableKind, index: u16, rpl: Ring) -> Self {
        SegmentSelector { table, index, rpl }
    }

    pub fn from_raw(raw: u16) -> Self {
        SegmentSelector {
            table: if raw & 0x4 != 0 { TableKind::Ldt } else { TableKind::Gdt },
            index: raw >> 3,
            rpl: Ring((raw & 0x3) as u8),
        }
    }

    pub fn raw(self) -> u16 {
        let ti = match self.table {
            TableKind::Gdt => 0,
            TableKind::Ldt => 0x4,
        };
        (self.index << 3) | ti | self.rpl.0 as u16
    }

    pub fn with_rpl(self, rpl: Ring) -> Self {
        SegmentSelector { rpl, ..self }
    }
}

impl fmt::Display for SegmentSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.table, self.index, self.rpl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Code { bitness: Bitness },
    Data,
}

/// A code or data segment. `limit` is a byte length, so the segment covers
/// `[base, base + limit)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentDescriptor {
    pub kind: SegmentKind,
    pub dpl: Ring,
    pub base: u64,
    pub limit: u64,
}

impl SegmentDescriptor {
    pub fn code(dpl: Ring, bitness: Bitness, base: u64, limit: u64) -> Self {
        SegmentDescriptor { kind: SegmentKind::Code { bitness }, dpl, base, limit }
    }

    pub fn data(dpl: Ring, base: u64, limit: u64) -> Self {
        SegmentDescriptor { kind: SegmentKind::Data, dpl, base, limit }
    }

    /// Flat 64-bit code segment spanning the whole address space.
    pub fn flat_code(dpl: Ring) -> Self {
        Self::code(dpl, Bitness::X64, 0, u64::MAX)
    }

    pub fn flat_data(dpl: Ring) -> Self {
        Self::data(dpl, 0, u64::MAX)
    }

    pub fn bitness(&self) -> Option<Bitness> {
        match self.kind {
            SegmentKind::Code { bitness } => Some(bitness),
            SegmentKind::Data => None,
        }
    }

    pub fn is_code(&self) -> bool {
        matches!(self.kind, SegmentKind::Code { .. })
    }

    /// Whether `[linear, linear + len)` lies inside the segment window.
    pub fn covers(&self, linear: u64, len: u64) -> bool {
        let start = linear as u128;
        let end = start + len as u128;
        let lo = self.base as u128;
        let hi = lo + self.limit as u128;
        start >= lo && end <= hi
    }
}

/// A 64-bit callgate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GateDescriptor {
    pub target: SegmentSelector,
    pub offset: u64,
    /// Numerically largest CPL allowed through the gate.
    pub rmpl: Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Descriptor {
    Segment(SegmentDescriptor),
    Gate(GateDescriptor),
}

impl Descriptor {
    pub fn as_segment(&self) -> Option<&SegmentDescriptor> {
        match self {
            Descriptor::Segment(s) => Some(s),
            Descriptor::Gate(_) => None,
        }
    }

    pub fn as_gate(&self) -> Option<&GateDescriptor> {
        match self {
            Descriptor::Gate(g) => Some(g),
            Descriptor::Segment(_) => None,
        }
    }
}

impl From<SegmentDescriptor> for Descriptor {
    fn from(s: SegmentDescriptor) -> Self {
        Descriptor::Segment(s)
    }
}

impl From<GateDescriptor> for Descriptor {
    fn from(g: GateDescriptor) -> Self {
        Descriptor::Gate(g)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorTable {
    kind: TableKind,
    slots: [Option<Descriptor>; TABLE_CAPACITY],
}

impl DescriptorTable {
    pub fn new(kind: TableKind) -> Self {
        DescriptorTable { kind, slots: [None; TABLE_CAPACITY] }
    }

    pub fn kind(&self) -> TableKind {
        self.kind
    }

    pub fn get(&self, index: usize) -> Option<&Descriptor> {
        self.slots.get(index).and_then(Option::as_ref)
    }

    /// Installed descriptors in slot order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Descriptor)> {
        self.slots.iter().enumerate().filter_map(|(i, d)| d.as_ref().map(|d| (i, d)))
    }

    /// Stores a descriptor without any validation. Slot 0 is still refused.
    ///
    /// Only the mutation harness and test generators should need this;
    /// everything else goes through [`MachineState::install_descriptor`].
    pub fn inject_raw(&mut self, index: usize, desc: Descriptor) -> Result<(), Fault> {
        check_slot(index)?;
        self.slots[index] = Some(desc);
        Ok(())
    }

    pub fn clear(&mut self, index: usize) {
        if let Some(slot) = self.slots.get_mut(index) {
            *slot = None;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }
}

fn check_slot(index: usize) -> Result<(), Fault> {
    if index == 0 {
        return Err(Fault::new(FaultKind::InvalidSelector, "slot 0 is the null selector"));
    }
    if index >= TABLE_CAPACITY {
        return Err(Fault::new(
            FaultKind::InvalidSelector,
            format!("slot {index} beyond table capacity {TABLE_CAPACITY}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingStack {
    pub ss: SegmentSelector,
    pub rsp: u64,
}

/// Only the per-ring stack fields of the TSS are modeled.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskStateSegment {
    stacks: [Option<RingStack>; 3],
}

impl TaskStateSegment {
    pub fn stack(&self, ring: Ring) -> Option<RingStack> {
        self.stacks.get(ring.0 as usize).copied().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PageClass {
    User,
    Supervisor,
}

impl fmt::Display for PageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PageClass::User => "user",
            PageClass::Supervisor => "supervisor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageEntry {
    pub class: PageClass,
    pub writable: bool,
    pub executable: bool,
    /// Belongs to the kernel's own memory. Used for accounting only; the
    /// hardware checks look at `class`.
    pub kernel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Perms {
    pub writable: bool,
    pub executable: bool,
}

impl Perms {
    pub const R: Perms = Perms { writable: false, executable: false };
    pub const RW: Perms = Perms { writable: true, executable: false };
    pub const RX: Perms = Perms { writable: false, executable: true };
    pub const RWX: Perms = Perms { writable: true, executable: true };
}

/// Present pages only; an absent entry is an unmapped page.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageMap {
    entries: BTreeMap<u64, PageEntry>,
    /// Pages demoted to Supervisor and their previous class, oldest first.
    revert: Vec<(u64, PageClass)>,
}

impl PageMap {
    pub fn get(&self, page: u64) -> Option<&PageEntry> {
        self.entries.get(&page)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &PageEntry)> {
        self.entries.iter().map(|(p, e)| (*p, e))
    }

    pub fn revert_list(&self) -> &[(u64, PageClass)] {
        &self.revert
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reg {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    Rbp,
    Rsp,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Reg {
    pub const ALL: [Reg; 16] = [
        Reg::Rax,
        Reg::Rbx,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rsi,
        Reg::Rdi,
        Reg::Rbp,
        Reg::Rsp,
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Reg::Rax => "rax",
            Reg::Rbx => "rbx",
            Reg::Rcx => "rcx",
            Reg::Rdx => "rdx",
            Reg::Rsi => "rsi",
            Reg::Rdi => "rdi",
            Reg::Rbp => "rbp",
            Reg::Rsp => "rsp",
            Reg::R8 => "r8",
            Reg::R9 => "r9",
            Reg::R10 => "r10",
            Reg::R11 => "r11",
            Reg::R12 => "r12",
            Reg::R13 => "r13",
            Reg::R14 => "r14",
            Reg::R15 => "r15",
        };
        f.write_str(s)
    }
}

/// General registers are 64 bits wide in every mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterFile {
    gpr: [u64; 16],
    pub rip: u64,
    pub cs: SegmentSelector,
    pub ss: SegmentSelector,
}

impl Default for RegisterFile {
    fn default() -> Self {
        RegisterFile { gpr: [0; 16], rip: 0, cs: SegmentSelector::NULL, ss: SegmentSelector::NULL }
    }
}

impl RegisterFile {
    pub fn get(&self, reg: Reg) -> u64 {
        self.gpr[reg.slot()]
    }

    pub fn set(&mut self, reg: Reg, value: u64) {
        self.gpr[reg.slot()] = value;
    }

    pub fn rsp(&self) -> u64 {
        self.get(Reg::Rsp)
    }

    pub fn set_rsp(&mut self, value: u64) {
        self.set(Reg::Rsp, value);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultKind {
    GeneralProtection,
    PageFault,
    InvalidGate,
    InvalidSelector,
    Unmapped,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [
        FaultKind::GeneralProtection,
        FaultKind::PageFault,
        FaultKind::InvalidGate,
        FaultKind::InvalidSelector,
        FaultKind::Unmapped,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::GeneralProtection => "GeneralProtection",
            FaultKind::PageFault => "PageFault",
            FaultKind::InvalidGate => "InvalidGate",
            FaultKind::InvalidSelector => "InvalidSelector",
            FaultKind::Unmapped => "Unmapped",
        }
    }

    pub fn from_name(name: &str) -> Option<FaultKind> {
        FaultKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}: {detail}")]
pub struct Fault {
    pub kind: FaultKind,
    pub detail: String,
}

impl Fault {
    pub fn new(kind: FaultKind, detail: impl Into<String>) -> Self {
        Fault { kind, detail: detail.into() }
    }

    pub fn gp(detail: impl Into<String>) -> Self {
        Fault::new(FaultKind::GeneralProtection, detail)
    }

    pub fn page(detail: impl Into<String>) -> Self {
        Fault::new(FaultKind::PageFault, detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Running,
    Faulted(Fault),
}

/// Event tallies consumed by the cost model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCounts {
    pub ring_transitions: u64,
    pub descriptor_loads: u64,
    pub context_saves: u64,
    pub page_flips: u64,
    pub messages: u64,
}

impl StepCounts {
    pub fn saturating_sub(self, rhs: StepCounts) -> StepCounts {
        StepCounts {
            ring_transitions: self.ring_transitions.saturating_sub(rhs.ring_transitions),
            descriptor_loads: self.descriptor_loads.saturating_sub(rhs.descriptor_loads),
            context_saves: self.context_saves.saturating_sub(rhs.context_saves),
            page_flips: self.page_flips.saturating_sub(rhs.page_flips),
            messages: self.messages.saturating_sub(rhs.messages),
        }
    }

    pub fn scaled(self, n: u64) -> StepCounts {
        StepCounts {
            ring_transitions: self.ring_transitions * n,
            descriptor_loads: self.descriptor_loads * n,
            context_saves: self.context_saves * n,
            page_flips: self.page_flips * n,
            messages: self.messages * n,
        }
    }
}

impl std::ops::Add for StepCounts {
    type Output = StepCounts;

    fn add(self, rhs: StepCounts) -> StepCounts {
        StepCounts {
            ring_transitions: self.ring_transitions + rhs.ring_transitions,
            descriptor_loads: self.descriptor_loads + rhs.descriptor_loads,
            context_saves: self.context_saves + rhs.context_saves,
            page_flips: self.page_flips + rhs.page_flips,
            messages: self.messages + rhs.messages,
        }
    }
}

impl std::ops::AddAssign for StepCounts {
    fn add_assign(&mut self, rhs: StepCounts) {
        *self = *self + rhs;
    }
}

/// Who is touching memory, and through which segment window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessContext {
    pub ring: Ring,
    pub bitness: Bitness,
    /// Segment that bounds 32-bit addressing; ignored in 64-bit mode.
    pub segment: SegmentDescriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
    Exec,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Exec => "exec",
        })
    }
}

/// Linear address produced by `addr` under `seg` in the given mode.
///
/// 64-bit mode is flat. In 32-bit mode the address is cut to its low 32
/// bits and then has to fall inside the segment window, so the result is
/// always below 4 GiB.
pub fn effective_address(bitness: Bitness, addr: u64, len: u64, seg: &SegmentDescriptor) -> Result<u64, Fault> {
    match bitness {
        Bitness::X64 => Ok(addr),
        Bitness::X32 => {
            let truncated = addr & 0xFFFF_FFFF;
            if truncated + len > X32_REACH {
                return Err(Fault::gp(format!("32-bit access at {truncated:#x}+{len} wraps 4 GiB")));
            }
            if !seg.covers(truncated, len) {
                return Err(Fault::gp(format!(
                    "address {truncated:#x}+{len} outside segment [{:#x}, +{:#x})",
                    seg.base, seg.limit
                )));
            }
            Ok(truncated)
        }
    }
}

/// Only ring 0 may execute privileged instructions.
pub fn privileged_instruction_check(ring: Ring) -> Result<(), Fault> {
    if ring == Ring::R0 {
        Ok(())
    } else {
        Err(Fault::gp(format!("privileged instruction at ring {ring}")))
    }
}

#[derive(Debug, Clone)]
pub struct MachineState {
    pub regs: RegisterFile,
    pub gdt: DescriptorTable,
    pub ldt: DescriptorTable,
    pub tss: TaskStateSegment,
    pub pages: PageMap,
    memory: BTreeMap<u64, Box<[u8]>>,
    pub smep: bool,
    pub smap: bool,
    status: Status,
    /// Gate programs by load address.
    pub code: BTreeMap<u64, GateProgram>,
    pub init_lock: InitLock,
    pub pid: u32,
    pub steps: StepCounts,
}

impl Default for MachineState {
    fn default() -> Self {
        Self::new()
    }
}

impl MachineState {
    pub fn new() -> Self {
        MachineState {
            regs: RegisterFile::default(),
            gdt: DescriptorTable::new(TableKind::Gdt),
            ldt: DescriptorTable::new(TableKind::Ldt),
            tss: TaskStateSegment::default(),
            pages: PageMap::default(),
            memory: BTreeMap::new(),
            smep: false,
            smap: false,
            status: Status::Running,
            code: BTreeMap::new(),
            init_lock: InitLock::default(),
            pid: 1,
            steps: StepCounts::default(),
        }
    }

    pub fn status(&self) -> &Status {
        &self.status
    }

    pub fn is_running(&self) -> bool {
        matches!(self.status, Status::Running)
    }

    /// Returns the stored fault if the machine has already faulted.
    pub fn ensure_running(&self) -> Result<(), Fault> {
        match &self.status {
            Status::Running => Ok(()),
            Status::Faulted(f) => Err(f.clone()),
        }
    }

    /// Moves the machine into the faulted state and hands the fault back.
    pub fn raise(&mut self, fault: Fault) -> Fault {
        if self.is_running() {
            self.status = Status::Faulted(fault.clone());
            fault
        } else {
            match &self.status {
                Status::Faulted(f) => f.clone(),
                Status::Running => unreachable!(),
            }
        }
    }

    /// Records `r`'s fault, if any, on the machine.
    pub fn trap<T>(&mut self, r: Result<T, Fault>) -> Result<T, Fault> {
        r.map_err(|f| self.raise(f))
    }

    pub fn reset(&mut self) {
        self.status = Status::Running;
    }

    pub fn cpl(&self) -> Ring {
        self.regs.cs.rpl
    }

    /// Bitness of the running code segment. An unresolvable CS reads as
    /// 64-bit; every transfer refuses to load one, so only hand-built states
    /// can get there.
    pub fn bitness(&self) -> Bitness {
        self.resolve_segment(self.regs.cs)
            .ok()
            .and_then(|s| s.bitness())
            .unwrap_or(Bitness::X64)
    }

    pub fn table(&self, kind: TableKind) -> &DescriptorTable {
        match kind {
            TableKind::Gdt => &self.gdt,
            TableKind::Ldt => &self.ldt,
        }
    }

    pub fn table_mut(&mut self, kind: TableKind) -> &mut DescriptorTable {
        match kind {
            TableKind::Gdt => &mut self.gdt,
            TableKind::Ldt => &mut self.ldt,
        }
    }

    /// Installs a descriptor. Callgates must target a 64-bit code segment
    /// that is already installed.
    pub fn install_descriptor(&mut self, table: TableKind, slot: usize, desc: Descriptor) -> Result<(), Fault> {
        check_slot(slot)?;
        match desc {
            Descriptor::Segment(seg) => {
                if (seg.base as u128) + (seg.limit as u128) > u64::MAX as u128 + 1 {
                    return Err(Fault::gp("segment base + limit overflows the address space"));
                }
            }
            Descriptor::Gate(gate) => {
                let target = self
                    .resolve_selector(gate.target)
                    .map_err(|f| Fault::new(FaultKind::InvalidGate, format!("gate target {}: {}", gate.target, f.detail)))?;
                match target {
                    Descriptor::Segment(SegmentDescriptor { kind: SegmentKind::Code { bitness: Bitness::X64 }, .. }) => {}
                    Descriptor::Segment(SegmentDescriptor { kind: SegmentKind::Code { bitness: Bitness::X32 }, .. }) => {
                        return Err(Fault::new(
                            FaultKind::InvalidGate,
                            format!("callgate cannot target 32-bit code segment {}", gate.target),
                        ));
                    }
                    _ => {
                        return Err(Fault::new(
                            FaultKind::InvalidGate,
                            format!("gate target {} is not a code segment", gate.target),
                        ));
                    }
                }
            }
        }
        self.table_mut(table).inject_raw(slot, desc)
    }

    pub fn resolve_selector(&self, sel: SegmentSelector) -> Result<&Descriptor, Fault> {
        if sel.index == 0 {
            return Err(Fault::new(FaultKind::InvalidSelector, format!("null selector {sel}")));
        }
        if sel.index as usize >= TABLE_CAPACITY {
            return Err(Fault::new(FaultKind::InvalidSelector, format!("selector {sel} beyond table capacity")));
        }
        self.table(sel.table)
            .get(sel.index as usize)
            .ok_or_else(|| Fault::new(FaultKind::InvalidSelector, format!("empty slot {sel}")))
    }

    pub fn resolve_segment(&self, sel: SegmentSelector) -> Result<SegmentDescriptor, Fault> {
        match self.resolve_selector(sel)? {
            Descriptor::Segment(s) => Ok(*s),
            Descriptor::Gate(_) => Err(Fault::gp(format!("{sel} is a gate, not a segment"))),
        }
    }

    pub fn set_ring_stack(&mut self, ring: Ring, ss: SegmentSelector, rsp: u64) -> Result<(), Fault> {
        if ring == Ring::R3 {
            return Err(Fault::gp("the TSS carries no ring 3 stack"));
        }
        let seg = self.resolve_segment(ss)?;
        if seg.is_code() || seg.dpl != ring {
            return Err(Fault::new(FaultKind::InvalidSelector, format!("{ss} is not a ring {ring} data segment")));
        }
        let top_page = page_of(rsp.wrapping_sub(1));
        self.check_data_access(ring, top_page, true)?;
        self.tss.stacks[ring.0 as usize] = Some(RingStack { ss, rsp });
        Ok(())
    }

    /// Kernel-side context install: used to start threads and to seed
    /// verifier probes. Checks the same CS/SS consistency a return would.
    pub fn load_context(&mut self, cs: SegmentSelector, ss: SegmentSelector, rip: u64, rsp: u64) -> Result<(), Fault> {
        let code = self.resolve_segment(cs)?;
        if !code.is_code() || code.dpl != cs.rpl {
            return Err(Fault::gp(format!("{cs} is not a ring {} code segment", cs.rpl)));
        }
        let stack = self.resolve_segment(ss)?;
        if stack.is_code() || stack.dpl != cs.rpl {
            return Err(Fault::new(FaultKind::InvalidSelector, format!("{ss} is not a ring {} data segment", cs.rpl)));
        }
        self.regs.cs = cs;
        self.regs.ss = ss.with_rpl(cs.rpl);
        self.regs.rip = rip;
        self.regs.set_rsp(rsp);
        Ok(())
    }

    // ---- paging ----

    pub fn map(&mut self, range: Range<u64>, class: PageClass, perms: Perms, kernel: bool) {
        for page in pages_spanning(range.start, range.end.saturating_sub(range.start)) {
            self.pages.entries.insert(
                page,
                PageEntry { class, writable: perms.writable, executable: perms.executable, kernel },
            );
        }
    }

    pub fn unmap(&mut self, range: Range<u64>) {
        for page in pages_spanning(range.start, range.end.saturating_sub(range.start)) {
            self.pages.entries.remove(&page);
            self.memory.remove(&page);
        }
    }

    pub fn page(&self, page: u64) -> Result<&PageEntry, Fault> {
        self.pages
            .entries
            .get(&page)
            .ok_or_else(|| Fault::new(FaultKind::Unmapped, format!("page {:#x} not mapped", page_base(page))))
    }

    /// Data access rule: Supervisor pages admit rings 0-2, User pages admit
    /// everyone except rings 0-2 under SMAP.
    pub fn check_data_access(&self, ring: Ring, page: u64, write: bool) -> Result<(), Fault> {
        let entry = self.page(page)?;
        let at = page_base(page);
        match entry.class {
            PageClass::Supervisor if !ring.is_supervisor() => {
                return Err(Fault::page(format!("U/S: ring {ring} touched supervisor page {at:#x}")));
            }
            PageClass::User if self.smap && ring.is_supervisor() => {
                return Err(Fault::page(format!("SMAP: ring {ring} touched user page {at:#x}")));
            }
            _ => {}
        }
        if write && !entry.writable {
            return Err(Fault::page(format!("R/W: write to read-only page {at:#x}")));
        }
        Ok(())
    }

    pub fn check_exec(&self, ring: Ring, page: u64) -> Result<(), Fault> {
        let entry = self.page(page)?;
        let at = page_base(page);
        if !entry.executable {
            return Err(Fault::page(format!("NX: page {at:#x} not executable")));
        }
        match entry.class {
            PageClass::Supervisor if !ring.is_supervisor() => {
                Err(Fault::page(format!("U/S: ring {ring} fetched from supervisor page {at:#x}")))
            }
            PageClass::User if self.smep && ring.is_supervisor() => {
                Err(Fault::page(format!("SMEP: ring {ring} fetched from user page {at:#x}")))
            }
            _ => Ok(()),
        }
    }

    /// Clears the User bit on every page of `range`, remembering each page
    /// that actually changed so [`revert_supervisor`](Self::revert_supervisor)
    /// can undo it.
    pub fn set_page_supervisor(&mut self, range: Range<u64>) -> Result<(), Fault> {
        let pages = pages_spanning(range.start, range.end.saturating_sub(range.start));
        for page in pages.clone() {
            self.page(page)?;
        }
        for page in pages {
            let entry = self.pages.entries.get_mut(&page).expect("checked above");
            if entry.class != PageClass::Supervisor {
                self.pages.revert.push((page, entry.class));
                entry.class = PageClass::Supervisor;
                self.steps.page_flips += 1;
            }
        }
        Ok(())
    }

    /// Replays the revert list newest-first.
    pub fn revert_supervisor(&mut self) {
        while let Some((page, class)) = self.pages.revert.pop() {
            if let Some(entry) = self.pages.entries.get_mut(&page) {
                entry.class = class;
                self.steps.page_flips += 1;
            }
        }
    }

    pub fn set_page_class(&mut self, page: u64, class: PageClass) -> Result<(), Fault> {
        let entry = self
            .pages
            .entries
            .get_mut(&page)
            .ok_or_else(|| Fault::new(FaultKind::Unmapped, format!("page {:#x} not mapped", page_base(page))))?;
        if entry.class != class {
            entry.class = class;
            self.steps.page_flips += 1;
        }
        Ok(())
    }

    pub fn set_page_perms(&mut self, page: u64, perms: Perms) -> Result<(), Fault> {
        let entry = self
            .pages
            .entries
            .get_mut(&page)
            .ok_or_else(|| Fault::new(FaultKind::Unmapped, format!("page {:#x} not mapped", page_base(page))))?;
        entry.writable = perms.writable;
        entry.executable = perms.executable;
        self.steps.page_flips += 1;
        Ok(())
    }

    // ---- memory ----

    /// Data-access context of the running code: CPL, bitness, and the stack
    /// segment, which 32-bit code also uses for its data.
    pub fn data_context(&self) -> Result<AccessContext, Fault> {
        Ok(AccessContext { ring: self.cpl(), bitness: self.bitness(), segment: self.resolve_segment(self.regs.ss)? })
    }

    pub fn code_context(&self) -> Result<AccessContext, Fault> {
        Ok(AccessContext { ring: self.cpl(), bitness: self.bitness(), segment: self.resolve_segment(self.regs.cs)? })
    }

    /// Checks an access without performing it and without touching status.
    /// Returns the linear start address on success.
    pub fn probe(&self, ctx: AccessContext, addr: u64, len: u64, kind: AccessKind) -> Result<u64, Fault> {
        let linear = effective_address(ctx.bitness, addr, len, &ctx.segment)?;
        for page in pages_spanning(linear, len.max(1)) {
            match kind {
                AccessKind::Read => self.check_data_access(ctx.ring, page, false)?,
                AccessKind::Write => self.check_data_access(ctx.ring, page, true)?,
                AccessKind::Exec => self.check_exec(ctx.ring, page)?,
            }
        }
        Ok(linear)
    }

    /// Reads at the current CPL and bitness. A fault on any touched page
    /// faults the machine and returns no bytes.
    pub fn read_mem(&mut self, addr: u64, len: u64) -> Result<Vec<u8>, Fault> {
        self.ensure_running()?;
        let checked = self.data_context().and_then(|ctx| self.probe(ctx, addr, len, AccessKind::Read));
        let linear = self.trap(checked)?;
        Ok(self.peek(linear, len))
    }

    pub fn write_mem(&mut self, addr: u64, bytes: &[u8]) -> Result<(), Fault> {
        self.ensure_running()?;
        let len = bytes.len() as u64;
        let checked = self.data_context().and_then(|ctx| self.probe(ctx, addr, len, AccessKind::Write));
        let linear = self.trap(checked)?;
        self.poke(linear, bytes);
        Ok(())
    }

    pub fn read_u64(&mut self, addr: u64) -> Result<u64, Fault> {
        let b = self.read_mem(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) -> Result<(), Fault> {
        self.write_mem(addr, &value.to_le_bytes())
    }

    /// Kernel-side write that only requires the pages to be mapped.
    pub fn kernel_write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), Fault> {
        for page in pages_spanning(addr, bytes.len() as u64) {
            self.page(page)?;
        }
        self.poke(addr, bytes);
        Ok(())
    }

    pub fn kernel_read(&self, addr: u64, len: u64) -> Result<Vec<u8>, Fault> {
        for page in pages_spanning(addr, len) {
            self.page(page)?;
        }
        Ok(self.peek(addr, len))
    }

    /// Backing bytes of a mapped page; untouched pages read as zero.
    pub fn page_bytes(&self, page: u64) -> Option<&[u8]> {
        self.memory.get(&page).map(|b| &b[..])
    }

    fn peek(&self, addr: u64, len: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(len as usize);
        let mut cur = addr;
        let end = addr + len;
        while cur < end {
            let page = page_of(cur);
            let off = (cur % PAGE_SIZE) as usize;
            let chunk = ((PAGE_SIZE as usize - off) as u64).min(end - cur) as usize;
            match self.memory.get(&page) {
                Some(buf) => out.extend_from_slice(&buf[off..off + chunk]),
                None => out.extend(std::iter::repeat_n(0, chunk)),
            }
            cur += chunk as u64;
        }
        out
    }

    fn poke(&mut self, addr: u64, bytes: &[u8]) {
        let mut cur = addr;
        let mut rest = bytes;
        while !rest.is_empty() {
            let page = page_of(cur);
            let off = (cur % PAGE_SIZE) as usize;
            let chunk = (PAGE_SIZE as usize - off).min(rest.len());
            let buf = self
                .memory
                .entry(page)
                .or_insert_with(|| vec![0u8; PAGE_SIZE as usize].into_boxed_slice());
            buf[off..off + chunk].copy_from_slice(&rest[..chunk]);
            rest = &rest[chunk..];
            cur += chunk as u64;
        }
    }

    // ---- stack ----

    pub fn push(&mut self, value: u64) -> Result<(), Fault> {
        let rsp = self.regs.rsp().wrapping_sub(8);
        self.write_u64(rsp, value)?;
        self.regs.set_rsp(rsp);
        Ok(())
    }

    pub fn pop(&mut self) -> Result<u64, Fault> {
        let rsp = self.regs.rsp();
        let v = self.read_u64(rsp)?;
        self.regs.set_rsp(rsp.wrapping_add(8));
        Ok(v)
    }

    /// Instruction-fetch check at the current RIP.
    pub fn fetch_check(&mut self) -> Result<(), Fault> {
        let rip = self.regs.rip;
        let checked = self.code_context().and_then(|ctx| self.probe(ctx, rip, 1, AccessKind::Exec));
        self.trap(checked).map(|_| ())
    }
}
