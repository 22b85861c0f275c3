//! The privileged-user layer: a ring 2, 32-bit, segment-bounded execution
//! mode whose memory is Supervisor-marked, entered only through a ring 1
//! gate mode reached by callgate.
//!
//! LDT layout installed by [`init_lotr`]:
//!
//! | slot | descriptor              | ring / bits | notes                  |
//! |------|-------------------------|-------------|------------------------|
//! | 1    | gate-mode code          | 1, x64      | flat                   |
//! | 2    | gate-mode data          | 1           | flat, gate stack SS    |
//! | 3    | privileged-user code    | 2, x32      | bounded window         |
//! | 4    | privileged-user data    | 2           | same window, also SS   |
//! | 5    | CG1, enter gate         | rmpl 3      | ring 3 -> ring 1       |
//! | 6    | CG2, exit gate          | rmpl 2      | ring 2 -> ring 1       |

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::gate::{run_gate, GateProgram, MicroOp};
use crate::layout;
use crate::machine::{
    page_base, pages_spanning, Bitness, Descriptor, DescriptorTable, Fault, GateDescriptor, MachineState,
    PageClass, Perms, Reg, Ring, SegmentDescriptor, SegmentSelector, TableKind, X32_REACH,
};

pub const PRIVUSER_RING: Ring = Ring::R2;
pub const GATE_RING: Ring = Ring::R1;

pub const GATE_CS: SegmentSelector = SegmentSelector::new(TableKind::Ldt, 1, Ring::R1);
pub const GATE_DS: SegmentSelector = SegmentSelector::new(TableKind::Ldt, 2, Ring::R1);
pub const PRIVUSER_CS: SegmentSelector = SegmentSelector::new(TableKind::Ldt, 3, Ring::R2);
pub const PRIVUSER_DS: SegmentSelector = SegmentSelector::new(TableKind::Ldt, 4, Ring::R2);
pub const CG1: SegmentSelector = SegmentSelector::new(TableKind::Ldt, 5, Ring::R3);
pub const CG2: SegmentSelector = SegmentSelector::new(TableKind::Ldt, 6, Ring::R2);

/// Argument registers after the call number in RAX.
pub const ARG_REGS: [Reg; 6] = [Reg::Rdi, Reg::Rsi, Reg::Rdx, Reg::R10, Reg::R8, Reg::R9];
pub const MAX_ARGS: usize = ARG_REGS.len();

/// Registers zeroed by the exit gate. RAX is left alone since it carries the
/// result.
pub const SCRUBBED_REGS: [Reg; 6] = [Reg::Rcx, Reg::Rdx, Reg::Rsi, Reg::Rdi, Reg::R10, Reg::R11];

/// Callee-saved registers the enter gate stashes after the caller frame.
pub const GATE_SAVED_REGS: [Reg; 2] = [Reg::Rbp, Reg::Rbx];

/// Privileged-user entry frame: a 4-byte dummy return address and seven
/// 8-byte slots (RAX then the six argument registers).
pub const ENTRY_FRAME_SIZE: u64 = 60;
pub const DUMMY_EIP: u32 = 0xDEAD_BEEF;

/// Distance the exit gate moves RSP down from the callgate frame to reach
/// the saved registers: the duplicated caller frame plus `GATE_SAVED_REGS`.
pub const GATE_CONTEXT_SIZE: u64 = 8 * (4 + GATE_SAVED_REGS.len() as u64);

/// Returned in RAX for an out-of-range call number.
pub const ENOSYS: u64 = (-38i64) as u64;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InitLock {
    pub locked_pid: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LotrConfig {
    pub privuser_code: Range<u64>,
    pub privuser_data: Range<u64>,
    pub privuser_stack: Range<u64>,
    pub privuser_heap: Range<u64>,
    pub entry_point: u64,
    pub arg_page: Range<u64>,
    pub gate_stack_top: u64,
}

impl LotrConfig {
    pub fn canonical() -> Self {
        LotrConfig {
            privuser_code: layout::PRIVUSER_CODE..layout::PRIVUSER_HEAP,
            privuser_data: layout::PRIVUSER_DATA..layout::PRIVUSER_CODE,
            privuser_stack: layout::PRIVUSER_STACK..layout::PRIVUSER_STACK_TOP,
            privuser_heap: layout::PRIVUSER_HEAP..layout::PRIVUSER_STACK,
            entry_point: layout::PRIVUSER_CODE,
            arg_page: layout::ARG_PAGE..layout::ARG_PAGE_END,
            gate_stack_top: layout::GATE_STACK_TOP,
        }
    }

    /// Ranges that become Supervisor. The argument page is not one of them.
    pub fn privuser_ranges(&self) -> [Range<u64>; 4] {
        [
            self.privuser_code.clone(),
            self.privuser_data.clone(),
            self.privuser_stack.clone(),
            self.privuser_heap.clone(),
        ]
    }

    /// `(base, limit)` of the privileged-user segments: the smallest window
    /// covering every privileged-user range and the argument page.
    pub fn segment_window(&self) -> (u64, u64) {
        let ranges = self.privuser_ranges();
        let all = ranges.iter().chain(std::iter::once(&self.arg_page)).filter(|r| !r.is_empty());
        let base = all.clone().map(|r| r.start).min().unwrap_or(0);
        let end = all.map(|r| r.end).max().unwrap_or(0);
        (base, end - base)
    }

    pub fn contains_privuser(&self, addr: u64) -> bool {
        self.privuser_ranges().iter().any(|r| r.contains(&addr))
    }

    fn validate(&self) -> Result<(), LotrError> {
        let named = [
            ("code", &self.privuser_code),
            ("data", &self.privuser_data),
            ("stack", &self.privuser_stack),
            ("heap", &self.privuser_heap),
            ("arg page", &self.arg_page),
        ];
        for (name, r) in named {
            if r.start > r.end {
                return Err(LotrError::InvalidConfig(format!("{name} range is reversed")));
            }
            if r.end > X32_REACH {
                return Err(LotrError::InvalidConfig(format!("{name} range ends at {:#x}, above 4 GiB", r.end)));
            }
            if r.start % crate::machine::PAGE_SIZE != 0 || r.end % crate::machine::PAGE_SIZE != 0 {
                return Err(LotrError::InvalidConfig(format!("{name} range is not page aligned")));
            }
        }
        if self.privuser_code.is_empty() || !self.privuser_code.contains(&self.entry_point) {
            return Err(LotrError::InvalidConfig(format!(
                "entry point {:#x} outside code range",
                self.entry_point
            )));
        }
        if self.privuser_stack.end - self.privuser_stack.start < ENTRY_FRAME_SIZE {
            return Err(LotrError::InvalidConfig("stack smaller than the entry frame".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LotrError {
    #[error("already initialized for pid {pid}; request ignored")]
    AlreadyInitialized { pid: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fault(#[from] Fault),
    #[error("privcall registry is closed")]
    RegistryClosed,
    #[error("privcall arity {arity} exceeds the {MAX_ARGS} argument registers")]
    TooManyArgs { arity: usize },
    #[error("privcall {0:?} already registered")]
    DuplicateName(String),
    #[error("privcall number {nr} out of range")]
    BadPrivcall { nr: u64 },
    #[error("request touches privileged-user page {page:#x}; refused")]
    Refused { page: u64 },
    #[error("operation requires ring {required}, caller is ring {cpl}")]
    WrongRing { required: Ring, cpl: Ring },
    #[error("privileged-user heap exhausted ({requested} bytes requested)")]
    OutOfMemory { requested: u64 },
    #[error("heap page {page:#x} is not Supervisor")]
    HeapNotSupervisor { page: u64 },
}

/// Width a routine declares for one argument; the wrapper narrows the
/// 64-bit register value to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgWidth {
    U8,
    U16,
    U32,
    U64,
}

impl ArgWidth {
    pub fn narrow(self, v: u64) -> u64 {
        match self {
            ArgWidth::U8 => v as u8 as u64,
            ArgWidth::U16 => v as u16 as u64,
            ArgWidth::U32 => v as u32 as u64,
            ArgWidth::U64 => v,
        }
    }
}

pub type Handler = Arc<dyn Fn(&mut HandlerCtx<'_>, &[u64]) -> Result<u64, LotrError> + Send + Sync>;

#[derive(Clone)]
pub struct PrivcallEntry {
    pub number: u64,
    pub name: String,
    pub widths: Vec<ArgWidth>,
    handler: Handler,
}

impl std::fmt::Debug for PrivcallEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PrivcallEntry")
            .field("number", &self.number)
            .field("name", &self.name)
            .field("widths", &self.widths)
            .finish_non_exhaustive()
    }
}

/// Call table indexed densely from 1.
#[derive(Debug, Clone, Default)]
pub struct PrivcallTable {
    entries: Vec<PrivcallEntry>,
}

impl PrivcallTable {
    pub fn max_privcall(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn get(&self, nr: u64) -> Option<&PrivcallEntry> {
        if nr == 0 || nr > self.max_privcall() {
            return None;
        }
        self.entries.get(nr as usize - 1)
    }

    pub fn lookup(&self, name: &str) -> Option<&PrivcallEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[PrivcallEntry] {
        &self.entries
    }
}

/// Bump allocator over the privileged-user heap.
#[derive(Debug, Clone)]
pub struct PrivUserHeap {
    range: Range<u64>,
    next: u64,
}

impl PrivUserHeap {
    fn new(range: Range<u64>) -> Self {
        PrivUserHeap { next: range.start, range }
    }

    fn alloc(&mut self, m: &MachineState, len: u64) -> Result<u64, LotrError> {
        if m.cpl() != PRIVUSER_RING {
            return Err(LotrError::WrongRing { required: PRIVUSER_RING, cpl: m.cpl() });
        }
        let start = self.next.next_multiple_of(16);
        let end = start.checked_add(len.max(1)).ok_or(LotrError::OutOfMemory { requested: len })?;
        if end > self.range.end {
            return Err(LotrError::OutOfMemory { requested: len });
        }
        for page in pages_spanning(start, end - start) {
            let class = m.page(page).map(|e| e.class)?;
            if class != PageClass::Supervisor {
                return Err(LotrError::HeapNotSupervisor { page: page_base(page) });
            }
        }
        self.next = end;
        Ok(start)
    }
}

/// What a routine sees while it runs in privileged-user mode. All memory
/// traffic goes through the machine at the current CPL.
pub struct HandlerCtx<'a> {
    machine: &'a mut MachineState,
    heap: &'a mut PrivUserHeap,
    pct: &'a PrivcallTable,
    config: &'a LotrConfig,
}

impl HandlerCtx<'_> {
    pub fn machine(&self) -> &MachineState {
        self.machine
    }

    pub fn config(&self) -> &LotrConfig {
        self.config
    }

    pub fn read(&mut self, addr: u64, len: u64) -> Result<Vec<u8>, LotrError> {
        Ok(self.machine.read_mem(addr, len)?)
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), LotrError> {
        Ok(self.machine.write_mem(addr, bytes)?)
    }

    pub fn read_u64(&mut self, addr: u64) -> Result<u64, LotrError> {
        Ok(self.machine.read_u64(addr)?)
    }

    pub fn alloc(&mut self, len: u64) -> Result<u64, LotrError> {
        self.heap.alloc(self.machine, len)
    }

    /// Issues a privcall from the running (privileged-user) context.
    pub fn privcall(&mut self, nr: u64, args: &[u64]) -> Result<u64, LotrError> {
        privcall_inner(self.machine, self.pct, self.heap, self.config, nr, args)
    }
}

#[derive(Debug, Clone)]
pub struct LotrHandle {
    config: LotrConfig,
    pct: PrivcallTable,
    heap: PrivUserHeap,
    registry_closed: bool,
}

impl LotrHandle {
    pub fn config(&self) -> &LotrConfig {
        &self.config
    }

    pub fn pct(&self) -> &PrivcallTable {
        &self.pct
    }

    pub fn registry_closed(&self) -> bool {
        self.registry_closed
    }

    /// Pages Supervisor-marked at init, in address order.
    pub fn privuser_pages(&self) -> Vec<u64> {
        let mut pages: Vec<u64> = self
            .config
            .privuser_ranges()
            .iter()
            .flat_map(|r| pages_spanning(r.start, r.end - r.start))
            .collect();
        pages.sort_unstable();
        pages.dedup();
        pages
    }

    /// Appends a routine and returns its call number.
    pub fn register_privcall(
        &mut self,
        name: &str,
        widths: &[ArgWidth],
        handler: Handler,
    ) -> Result<u64, LotrError> {
        if self.registry_closed {
            return Err(LotrError::RegistryClosed);
        }
        if widths.len() > MAX_ARGS {
            return Err(LotrError::TooManyArgs { arity: widths.len() });
        }
        if self.pct.lookup(name).is_some() {
            return Err(LotrError::DuplicateName(name.to_string()));
        }
        let number = self.pct.max_privcall() + 1;
        self.pct.entries.push(PrivcallEntry { number, name: name.to_string(), widths: widths.to_vec(), handler });
        Ok(number)
    }

    /// A copy sharing config and heap state whose registry holds a single
    /// no-op routine, for behavioral probes on cloned machines.
    pub(crate) fn probe_copy(&self) -> (LotrHandle, u64) {
        let mut h = LotrHandle {
            config: self.config.clone(),
            pct: PrivcallTable::default(),
            heap: self.heap.clone(),
            registry_closed: false,
        };
        let nr = h.register_privcall("probe", &[], Arc::new(|_, _| Ok(0))).expect("fresh registry");
        (h, nr)
    }

    pub fn close_registry(&mut self) {
        self.registry_closed = true;
    }

    /// Full privcall round trip from the running context.
    pub fn privcall(&mut self, m: &mut MachineState, nr: u64, args: &[u64]) -> Result<u64, LotrError> {
        privcall_inner(m, &self.pct, &mut self.heap, &self.config, nr, args)
    }

    /// Heap allocation on behalf of a routine. Must be called in
    /// privileged-user mode.
    pub fn privuser_alloc(&mut self, m: &MachineState, len: u64) -> Result<u64, LotrError> {
        self.heap.alloc(m, len)
    }

    pub fn guarded_mprotect(&self, m: &mut MachineState, range: Range<u64>, perms: Perms) -> Result<(), LotrError> {
        self.guarded_syscall(m, range, GuardedCall::Mprotect(perms))
    }

    /// Memory locking is not modeled; only the refusal rule is.
    pub fn guarded_munlock(&self, m: &mut MachineState, range: Range<u64>) -> Result<(), LotrError> {
        self.guarded_syscall(m, range, GuardedCall::Munlock)
    }

    fn guarded_syscall(&self, m: &mut MachineState, range: Range<u64>, call: GuardedCall) -> Result<(), LotrError> {
        m.ensure_running()?;
        if m.cpl() != Ring::R3 {
            return Err(LotrError::WrongRing { required: Ring::R3, cpl: m.cpl() });
        }
        let pages = pages_spanning(range.start, range.end.saturating_sub(range.start));
        for page in pages.clone() {
            m.page(page)?;
            if self.config.contains_privuser(page_base(page)) {
                return Err(LotrError::Refused { page: page_base(page) });
            }
        }
        if let GuardedCall::Mprotect(perms) = call {
            for page in pages {
                m.set_page_perms(page, perms)?;
            }
        }
        Ok(())
    }
}

enum GuardedCall {
    Mprotect(Perms),
    Munlock,
}

pub fn enter_gate_program(cfg: &LotrConfig) -> GateProgram {
    use MicroOp::*;
    let frame = Reg::R11;
    let mut ops = vec![
        // Only ring 3 may come in; the saved CS sits one slot above RIP.
        CheckSavedCsRing { offset: 8, ring: Ring::R3, on_mismatch: usize::MAX },
        DupFrame,
        SaveRegs(GATE_SAVED_REGS.to_vec()),
        MovImm { dst: frame, imm: cfg.privuser_stack.end },
        SubImm { dst: frame, imm: ENTRY_FRAME_SIZE },
        StoreImm32 { base: frame, offset: 0, imm: DUMMY_EIP },
        Store64 { base: frame, offset: 4, src: Reg::Rax },
    ];
    for (i, r) in ARG_REGS.iter().enumerate() {
        ops.push(Store64 { base: frame, offset: 12 + 8 * i as u64, src: *r });
    }
    ops.extend([
        MovImm { dst: Reg::Rcx, imm: cfg.entry_point },
        PushImm(PRIVUSER_DS.raw() as u64),
        PushReg(frame),
        PushImm(PRIVUSER_CS.raw() as u64),
        PushReg(Reg::Rcx),
        Lret,
    ]);
    let exit = ops.len();
    ops.push(Lret);
    if let CheckSavedCsRing { on_mismatch, .. } = &mut ops[0] {
        *on_mismatch = exit;
    }
    GateProgram::new("enter-gate", ops)
}

pub fn exit_gate_program() -> GateProgram {
    use MicroOp::*;
    GateProgram::new(
        "exit-gate",
        vec![
            SubImm { dst: Reg::Rsp, imm: GATE_CONTEXT_SIZE },
            Scrub(SCRUBBED_REGS.to_vec()),
            RestoreRegs(GATE_SAVED_REGS.to_vec()),
            Lret,
        ],
    )
}

/// Builds the privileged-user layer on `state`. Nothing is changed unless
/// every step succeeds.
pub fn init_lotr(state: &mut MachineState, cfg: &LotrConfig) -> Result<LotrHandle, LotrError> {
    if let Some(pid) = state.init_lock.locked_pid {
        return Err(LotrError::AlreadyInitialized { pid });
    }
    cfg.validate()?;
    let mut s = state.clone();
    for r in cfg.privuser_ranges().iter().chain(std::iter::once(&cfg.arg_page)) {
        for page in pages_spanning(r.start, r.end - r.start) {
            s.page(page)?;
        }
    }

    let (base, limit) = cfg.segment_window();
    let descriptors: [(SegmentSelector, Descriptor); 6] = [
        (GATE_CS, SegmentDescriptor::flat_code(GATE_RING).into()),
        (GATE_DS, SegmentDescriptor::flat_data(GATE_RING).into()),
        (PRIVUSER_CS, SegmentDescriptor::code(PRIVUSER_RING, Bitness::X32, base, limit).into()),
        (PRIVUSER_DS, SegmentDescriptor::data(PRIVUSER_RING, base, limit).into()),
        (CG1, GateDescriptor { target: GATE_CS, offset: layout::ENTER_GATE_ADDR, rmpl: Ring::R3 }.into()),
        (CG2, GateDescriptor { target: GATE_CS, offset: layout::EXIT_GATE_ADDR, rmpl: Ring::R2 }.into()),
    ];
    for (sel, desc) in descriptors {
        s.install_descriptor(sel.table, sel.index as usize, desc)?;
    }
    s.set_ring_stack(GATE_RING, GATE_DS, cfg.gate_stack_top)?;
    for r in cfg.privuser_ranges() {
        s.set_page_supervisor(r)?;
    }

    for (addr, program) in [(layout::ENTER_GATE_ADDR, enter_gate_program(cfg)), (layout::EXIT_GATE_ADDR, exit_gate_program())] {
        s.map(addr..addr + crate::machine::PAGE_SIZE, PageClass::Supervisor, Perms::RX, true);
        s.code.insert(addr, program);
    }
    s.init_lock.locked_pid = Some(s.pid);
    *state = s;

    Ok(LotrHandle {
        config: cfg.clone(),
        pct: PrivcallTable::default(),
        heap: PrivUserHeap::new(cfg.privuser_heap.clone()),
        registry_closed: false,
    })
}

/// Base machine plus the privileged-user layer on the canonical config.
pub fn canonical_system() -> (MachineState, LotrHandle) {
    let mut m = layout::base_machine();
    let h = init_lotr(&mut m, &LotrConfig::canonical()).expect("canonical config initializes");
    (m, h)
}

enum EntryOutcome {
    Dispatched(u64),
    OutOfRange,
}

fn privcall_inner(
    m: &mut MachineState,
    pct: &PrivcallTable,
    heap: &mut PrivUserHeap,
    cfg: &LotrConfig,
    nr: u64,
    args: &[u64],
) -> Result<u64, LotrError> {
    if args.len() > MAX_ARGS {
        return Err(LotrError::TooManyArgs { arity: args.len() });
    }
    m.ensure_running()?;
    m.regs.set(Reg::Rax, nr);
    for (i, r) in ARG_REGS.iter().enumerate() {
        m.regs.set(*r, args.get(i).copied().unwrap_or(0));
    }

    m.long_call(CG1)?;
    let run = run_gate(m)?;
    if run.rejected {
        let ring = m.cpl();
        return Err(m.raise(Fault::gp(format!("enter gate admits only ring 3; caller ring {ring}"))).into());
    }
    if m.cpl() != PRIVUSER_RING || m.bitness() != Bitness::X32 || m.regs.rip != cfg.entry_point {
        return Err(m.raise(Fault::gp("enter gate did not reach the privileged-user entry point")).into());
    }

    let outcome = privuser_entry(m, pct, heap, cfg)?;
    let rax = match outcome {
        EntryOutcome::Dispatched(v) => v,
        EntryOutcome::OutOfRange => ENOSYS,
    };
    m.regs.set(Reg::Rax, rax);

    m.long_call(CG2)?;
    run_gate(m)?;
    match outcome {
        EntryOutcome::Dispatched(_) => Ok(m.regs.get(Reg::Rax)),
        EntryOutcome::OutOfRange => Err(LotrError::BadPrivcall { nr }),
    }
}

/// The privileged-user entry point: unpack the frame the enter gate wrote,
/// bound-check the call number, run the routine through its wrapper.
fn privuser_entry(
    m: &mut MachineState,
    pct: &PrivcallTable,
    heap: &mut PrivUserHeap,
    cfg: &LotrConfig,
) -> Result<EntryOutcome, LotrError> {
    let rsp = m.regs.rsp();
    let frame = m.read_mem(rsp, ENTRY_FRAME_SIZE)?;
    let slot = |i: usize| u64::from_le_bytes(frame[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes"));
    let nr = slot(0);
    let Some(entry) = pct.get(nr) else {
        return Ok(EntryOutcome::OutOfRange);
    };
    let args: Vec<u64> = entry.widths.iter().enumerate().map(|(i, w)| w.narrow(slot(i + 1))).collect();
    let handler = Arc::clone(&entry.handler);
    let mut ctx = HandlerCtx { machine: m, heap, pct, config: cfg };
    match handler(&mut ctx, &args) {
        Ok(v) => Ok(EntryOutcome::Dispatched(v)),
        Err(LotrError::Fault(f)) => Err(m.raise(f).into()),
        Err(e) => Err(e),
    }
}

/// Reads the seven values the entry point would see, for inspection.
pub fn entry_frame_slots(m: &MachineState, cfg: &LotrConfig) -> Result<(u32, [u64; 7]), Fault> {
    let at = cfg.privuser_stack.end - ENTRY_FRAME_SIZE;
    let raw = m.kernel_read(at, ENTRY_FRAME_SIZE)?;
    let dummy = u32::from_le_bytes(raw[0..4].try_into().expect("4 bytes"));
    let mut slots = [0u64; 7];
    for (i, s) in slots.iter_mut().enumerate() {
        *s = u64::from_le_bytes(raw[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes"));
    }
    Ok((dummy, slots))
}

/// One line per slot: `slot kind ring bitness base limit | gate target rmpl`.
pub fn dump_table(table: &DescriptorTable) -> String {
    let mut out = String::new();
    for slot in 1..crate::machine::TABLE_CAPACITY {
        let _ = match table.get(slot) {
            None => writeln!(out, "{slot:>2} empty"),
            Some(Descriptor::Segment(s)) => {
                let (kind, bits) = match s.bitness() {
                    Some(b) => ("code", b.to_string()),
                    None => ("data", "-".to_string()),
                };
                writeln!(out, "{slot:>2} {kind} {} {bits:<3} {:#018x} {:#018x} | - - -", s.dpl, s.base, s.limit)
            }
            Some(Descriptor::Gate(g)) => {
                writeln!(out, "{slot:>2} gate - -   - - | gate {}+{:#x} {}", g.target, g.offset, g.rmpl)
            }
        };
    }
    out
}
