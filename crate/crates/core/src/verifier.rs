//! Static and behavioral checks of the privileged-user design on a
//! configured machine.
//!
//! Memory requirements (M-SR1, M-SR2) are checked by probing every relevant
//! page through the access checks. Control-transfer requirements are checked
//! on a mode graph built from [`MachineState::enumerate_transfers`]: CT-SR is
//! a reachability question over non-controlled edges, P1, P2 and C are
//! descriptor predicates.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use crate::layout;
use crate::lotr::{LotrHandle, GATE_CS, PRIVUSER_CS, PRIVUSER_DS, PRIVUSER_RING};
use crate::machine::{
    page_base, page_of, AccessContext, AccessKind, Bitness, Descriptor, GateDescriptor, MachineState, PageClass,
    Perms, Ring, SegmentDescriptor, SegmentSelector, TableKind, TABLE_CAPACITY, X32_REACH,
};
use crate::transfer::{Control, TransferKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Requirement {
    Msr1,
    Msr2,
    CtSr,
    P1,
    P2,
    C,
}

impl Requirement {
    pub const ALL: [Requirement; 6] =
        [Requirement::Msr1, Requirement::Msr2, Requirement::CtSr, Requirement::P1, Requirement::P2, Requirement::C];

    pub fn name(self) -> &'static str {
        match self {
            Requirement::Msr1 => "M-SR1",
            Requirement::Msr2 => "M-SR2",
            Requirement::CtSr => "CT-SR",
            Requirement::P1 => "P1",
            Requirement::P2 => "P2",
            Requirement::C => "C",
        }
    }
}

impl fmt::Display for Requirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    /// An installed code segment.
    Segment,
    /// The landing point of a callgate; `selector` names the gate.
    GateEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModeNode {
    pub ring: Ring,
    pub bitness: Bitness,
    pub selector: SegmentSelector,
    pub kind: NodeKind,
}

impl fmt::Display for ModeNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sel = self.selector;
        match self.kind {
            NodeKind::Segment => write!(f, "R{}_{}@{}:{}", self.ring, self.bitness, sel.table, sel.index),
            NodeKind::GateEntry => write!(f, "R{}_{}@gate:{}:{}", self.ring, self.bitness, sel.table, sel.index),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransferEdge {
    pub from: usize,
    pub to: usize,
    pub control: Control,
    pub mechanism: TransferKind,
}

#[derive(Debug, Clone, Default)]
pub struct TransferGraph {
    pub nodes: Vec<ModeNode>,
    pub edges: Vec<TransferEdge>,
}

impl TransferGraph {
    pub fn node(&self, ring: Ring, bitness: Bitness) -> Option<usize> {
        self.nodes.iter().position(|n| n.ring == ring && n.bitness == bitness)
    }

    pub fn outgoing(&self, from: usize) -> impl Iterator<Item = &TransferEdge> {
        self.edges.iter().filter(move |e| e.from == from)
    }

    pub fn describe_edge(&self, e: &TransferEdge) -> String {
        format!("{} -[{}]-> {}", self.nodes[e.from], e.mechanism, self.nodes[e.to])
    }
}

/// Nodes for every code descriptor and every gate whose target resolves to
/// code, with edges for every one-step transfer available to each.
pub fn build_transfer_graph(state: &MachineState) -> TransferGraph {
    let mut nodes = Vec::new();
    for table in [TableKind::Gdt, TableKind::Ldt] {
        for (slot, desc) in state.table(table).iter() {
            match desc {
                Descriptor::Segment(seg) => {
                    if let Some(bitness) = seg.bitness() {
                        nodes.push(ModeNode {
                            ring: seg.dpl,
                            bitness,
                            selector: SegmentSelector::new(table, slot as u16, seg.dpl),
                            kind: NodeKind::Segment,
                        });
                    }
                }
                Descriptor::Gate(gate) => {
                    if let Some((target, bitness)) = gate_target(state, gate) {
                        nodes.push(ModeNode {
                            ring: target.dpl,
                            bitness,
                            selector: SegmentSelector::new(table, slot as u16, target.dpl),
                            kind: NodeKind::GateEntry,
                        });
                    }
                }
            }
        }
    }

    let index: BTreeMap<(NodeKind, TableKind, u16), usize> =
        nodes.iter().enumerate().map(|(i, n)| ((n.kind, n.selector.table, n.selector.index), i)).collect();
    let mut edges = Vec::new();
    for (from, node) in nodes.iter().enumerate() {
        for t in state.enumerate_transfers((node.ring, node.bitness)) {
            let to = match t.mechanism {
                TransferKind::NearTransfer(_) => Some(from),
                TransferKind::CallGateCall(sel) => index.get(&(NodeKind::GateEntry, sel.table, sel.index)).copied(),
                TransferKind::FarJump(sel, _) => index.get(&(NodeKind::Segment, sel.table, sel.index)).copied(),
                TransferKind::LongReturn(fr) => index.get(&(NodeKind::Segment, fr.cs.table, fr.cs.index)).copied(),
            };
            if let Some(to) = to {
                edges.push(TransferEdge { from, to, control: t.control, mechanism: t.mechanism });
            }
        }
    }
    TransferGraph { nodes, edges }
}

fn gate_target(state: &MachineState, gate: &GateDescriptor) -> Option<(SegmentDescriptor, Bitness)> {
    let seg = state.resolve_segment(gate.target).ok()?;
    seg.bitness().map(|b| (seg, b))
}

/// One access attempt the verifier found to succeed where it must not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessAttempt {
    pub ring: Ring,
    pub bitness: Bitness,
    pub segment: SegmentDescriptor,
    pub addr: u64,
    pub kind: AccessKind,
    pub linear: u64,
}

impl AccessAttempt {
    fn context(&self) -> AccessContext {
        AccessContext { ring: self.ring, bitness: self.bitness, segment: self.segment }
    }
}

impl fmt::Display for AccessAttempt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ring {} {} {} {:#x}", self.ring, self.bitness, self.kind, self.addr)?;
        if self.linear != self.addr {
            write!(f, " (linear {:#x})", self.linear)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Witness {
    Path(Vec<(ModeNode, TransferKind, ModeNode)>),
    Access(Vec<AccessAttempt>),
    Descriptors(Vec<(SegmentSelector, String)>),
}

impl Witness {
    pub fn is_empty(&self) -> bool {
        match self {
            Witness::Path(p) => p.is_empty(),
            Witness::Access(a) => a.is_empty(),
            Witness::Descriptors(d) => d.is_empty(),
        }
    }

    /// Re-executes the witness on a copy of `state` and reports whether it
    /// reproduces the claimed violation.
    pub fn replay(&self, state: &MachineState) -> bool {
        match self {
            Witness::Path(steps) => replay_path(state, steps),
            Witness::Access(attempts) => attempts.iter().all(|a| {
                state.probe(a.context(), a.addr, 1, a.kind).is_ok_and(|linear| linear == a.linear)
            }),
            Witness::Descriptors(ds) => ds.iter().all(|(sel, _)| state.resolve_selector(*sel).is_ok()),
        }
    }
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Witness::Path(steps) => {
                for (i, (from, mech, to)) in steps.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{from} -[{mech}]-> {to}")?;
                }
                Ok(())
            }
            Witness::Access(attempts) => {
                for (i, a) in attempts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                Ok(())
            }
            Witness::Descriptors(ds) => {
                for (i, (sel, why)) in ds.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{}:{} {why}", sel.table, sel.index)?;
                }
                Ok(())
            }
        }
    }
}

/// Runs a path from a thread placed in the first node's segment. A step
/// counts as taken when CS ends up naming the target segment, even if the
/// instruction fetch that follows faults.
fn replay_path(state: &MachineState, steps: &[(ModeNode, TransferKind, ModeNode)]) -> bool {
    let Some((start, _, _)) = steps.first() else { return false };
    let mut m = state.clone();
    m.reset();
    // Place the thread directly; no transfer in a path reads SS or RSP.
    m.regs.cs = start.selector.with_rpl(start.ring);
    if start.kind != NodeKind::Segment || m.cpl() != start.ring || m.bitness() != start.bitness {
        return false;
    }
    for (_, mech, to) in steps {
        let _ = match *mech {
            TransferKind::FarJump(sel, off) => m.far_jump(sel, off),
            TransferKind::LongReturn(frame) => m.long_return_with(frame),
            TransferKind::NearTransfer(off) => m.near_transfer(off),
            TransferKind::CallGateCall(sel) => m.long_call(sel),
        };
        let landed = match to.kind {
            NodeKind::Segment => m.regs.cs == to.selector.with_rpl(to.ring),
            NodeKind::GateEntry => m.cpl() == to.ring && m.bitness() == to.bitness,
        };
        if !landed || m.cpl() != to.ring || m.bitness() != to.bitness {
            return false;
        }
        m.reset();
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub requirement: Requirement,
    pub holds: bool,
    pub witness: Option<Witness>,
}

impl Verdict {
    fn from_witness(requirement: Requirement, witness: Witness) -> Self {
        if witness.is_empty() {
            Verdict { requirement, holds: true, witness: None }
        } else {
            Verdict { requirement, holds: false, witness: Some(witness) }
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "REQ {} {}", self.requirement, if self.holds { "HOLDS" } else { "FAILS" })?;
        if let Some(w) = &self.witness {
            write!(f, " witness: {w}")?;
        }
        Ok(())
    }
}

/// Shortest non-controlled path from any ring-2 32-bit node to a 64-bit
/// node below ring 3.
pub fn check_ctsr(graph: &TransferGraph) -> Verdict {
    let starts: Vec<usize> = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.ring == PRIVUSER_RING && n.bitness == Bitness::X32)
        .map(|(i, _)| i)
        .collect();
    let mut parent: Vec<Option<Option<usize>>> = vec![None; graph.nodes.len()];
    let mut queue = VecDeque::new();
    for s in starts {
        parent[s] = Some(None);
        queue.push_back(s);
    }
    let violates = |n: &ModeNode| n.bitness == Bitness::X64 && n.ring < Ring::R3;
    while let Some(cur) = queue.pop_front() {
        if violates(&graph.nodes[cur]) {
            let mut path = Vec::new();
            let mut at = cur;
            while let Some(Some(edge)) = parent[at] {
                let e = &graph.edges[edge];
                path.push((graph.nodes[e.from], e.mechanism, graph.nodes[e.to]));
                at = e.from;
            }
            path.reverse();
            return Verdict::from_witness(Requirement::CtSr, Witness::Path(path));
        }
        for (i, e) in graph.edges.iter().enumerate() {
            if e.from == cur && e.control == Control::NonControlled && parent[e.to].is_none() {
                parent[e.to] = Some(Some(i));
                queue.push_back(e.to);
            }
        }
    }
    Verdict { requirement: Requirement::CtSr, holds: true, witness: None }
}

fn user_context() -> AccessContext {
    AccessContext { ring: Ring::R3, bitness: Bitness::X64, segment: SegmentDescriptor::flat_data(Ring::R3) }
}

/// Ring 3 read, write and fetch on every privileged-user page must fault.
pub fn check_msr1(state: &MachineState, handle: &LotrHandle) -> Verdict {
    let ctx = user_context();
    let mut hits = Vec::new();
    for page in handle.privuser_pages() {
        let addr = page_base(page);
        for kind in [AccessKind::Read, AccessKind::Write, AccessKind::Exec] {
            if let Ok(linear) = state.probe(ctx, addr, 1, kind) {
                hits.push(AccessAttempt { ring: ctx.ring, bitness: ctx.bitness, segment: ctx.segment, addr, kind, linear });
            }
        }
    }
    Verdict::from_witness(Requirement::Msr1, Witness::Access(hits))
}

/// Addresses privileged-user code could form to land on `page`: the page
/// itself, its low 32 bits, and the same low bits one 4 GiB step up.
fn aliases(page: u64) -> [u64; 3] {
    let addr = page_base(page);
    [addr, addr & (X32_REACH - 1), (addr & (X32_REACH - 1)).wrapping_add(X32_REACH)]
}

/// From the privileged-user context, every kernel page must be unreachable
/// or fault, through any addressing form.
pub fn check_msr2(state: &MachineState, _handle: &LotrHandle) -> Verdict {
    let segment = state
        .resolve_segment(PRIVUSER_DS)
        .ok()
        .filter(|s| !s.is_code())
        .unwrap_or_else(|| SegmentDescriptor::data(PRIVUSER_RING, 0, 0));
    let ctx = AccessContext { ring: PRIVUSER_RING, bitness: Bitness::X32, segment };
    let kernel_pages: Vec<u64> = state.pages.iter().filter(|(_, e)| e.kernel).map(|(p, _)| p).collect();

    let mut candidates: Vec<u64> = kernel_pages.iter().flat_map(|&p| aliases(p)).collect();
    let window_end = segment.base.wrapping_add(segment.limit);
    candidates.extend([window_end.wrapping_sub(1), window_end, segment.base]);
    candidates.sort_unstable();
    candidates.dedup();

    let mut hits = Vec::new();
    for addr in candidates {
        for kind in [AccessKind::Read, AccessKind::Write, AccessKind::Exec] {
            let Ok(linear) = state.probe(ctx, addr, 1, kind) else { continue };
            if state.pages.get(page_of(linear)).is_some_and(|e| e.kernel) {
                hits.push(AccessAttempt { ring: ctx.ring, bitness: ctx.bitness, segment, addr, kind, linear });
            }
        }
    }
    Verdict::from_witness(Requirement::Msr2, Witness::Access(hits))
}

/// P1 (gate targets run below the privileged-user ring), P2 (no 64-bit code
/// at the privileged-user ring) and C (gates only target 64-bit code).
pub fn check_p1_p2_c(state: &MachineState) -> [Verdict; 3] {
    let mut p1 = Vec::new();
    let mut p2 = Vec::new();
    let mut c = Vec::new();
    for table in [TableKind::Gdt, TableKind::Ldt] {
        for (slot, desc) in state.table(table).iter() {
            let sel = SegmentSelector::new(table, slot as u16, Ring::R0);
            match desc {
                Descriptor::Segment(seg) => {
                    if seg.dpl == PRIVUSER_RING && seg.bitness() == Some(Bitness::X64) {
                        p2.push((sel, "64-bit code at the privileged-user ring".to_string()));
                    }
                }
                Descriptor::Gate(gate) => {
                    match state.resolve_segment(gate.target).ok().and_then(|s| s.bitness().map(|b| (s, b))) {
                        Some((target, bitness)) => {
                            if target.dpl >= PRIVUSER_RING {
                                p1.push((sel, format!("gate enters ring {}", target.dpl)));
                            }
                            if bitness != Bitness::X64 {
                                c.push((sel, format!("gate targets {bitness} code {}", gate.target)));
                            }
                        }
                        None => c.push((sel, format!("gate target {} is not code", gate.target))),
                    }
                }
            }
        }
    }
    [
        Verdict::from_witness(Requirement::P1, Witness::Descriptors(p1)),
        Verdict::from_witness(Requirement::P2, Witness::Descriptors(p2)),
        Verdict::from_witness(Requirement::C, Witness::Descriptors(c)),
    ]
}

/// All six verdicts in [`Requirement::ALL`] order.
pub fn check_all(state: &MachineState, handle: &LotrHandle) -> Vec<Verdict> {
    let graph = build_transfer_graph(state);
    let [p1, p2, c] = check_p1_p2_c(state);
    vec![check_msr1(state, handle), check_msr2(state, handle), check_ctsr(&graph), p1, p2, c]
}

/// Configuration smells that do not break a requirement as stated.
pub fn warnings(state: &MachineState) -> Vec<String> {
    let mut out = Vec::new();
    for table in [TableKind::Gdt, TableKind::Ldt] {
        for (slot, desc) in state.table(table).iter() {
            if let Descriptor::Segment(seg) = desc {
                if seg.bitness() == Some(Bitness::X32) && seg.dpl < PRIVUSER_RING {
                    out.push(format!("{table}:{slot}: 32-bit code at ring {}", seg.dpl));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mutation {
    DropSupervisorMarking,
    AddPrivUserX64Segment,
    DemoteGateRing,
    WidenPrivUserLimit,
    InjectGateToX32,
    RemoveEnterGateCheck,
}

/// Linear address of the kernel alias the limit-widening mutation maps
/// below 4 GiB.
pub const KERNEL_ALIAS: u64 = 0xC000_0000;

impl Mutation {
    pub const ALL: [Mutation; 6] = [
        Mutation::DropSupervisorMarking,
        Mutation::AddPrivUserX64Segment,
        Mutation::DemoteGateRing,
        Mutation::WidenPrivUserLimit,
        Mutation::InjectGateToX32,
        Mutation::RemoveEnterGateCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::DropSupervisorMarking => "drop-supervisor-marking",
            Mutation::AddPrivUserX64Segment => "add-privuser-x64-segment",
            Mutation::DemoteGateRing => "demote-gate-ring",
            Mutation::WidenPrivUserLimit => "widen-privuser-limit",
            Mutation::InjectGateToX32 => "inject-gate-to-x32",
            Mutation::RemoveEnterGateCheck => "remove-enter-gate-check",
        }
    }

    /// Applies the mutation in place. Returns a description of what changed,
    /// or `None` when the machine has nothing to mutate.
    pub fn apply(self, m: &mut MachineState, handle: &LotrHandle) -> Option<String> {
        match self {
            Mutation::DropSupervisorMarking => {
                let page = *handle.privuser_pages().first()?;
                m.set_page_class(page, PageClass::User).ok()?;
                Some(format!("page {:#x} back to User", page_base(page)))
            }
            Mutation::AddPrivUserX64Segment => {
                let slot = free_slot(m, TableKind::Ldt)?;
                m.install_descriptor(TableKind::Ldt, slot, SegmentDescriptor::flat_code(PRIVUSER_RING).into()).ok()?;
                Some(format!("ldt:{slot} ring 2 x64 code"))
            }
            Mutation::DemoteGateRing => {
                let mut seg = m.resolve_segment(GATE_CS).ok()?;
                seg.dpl = PRIVUSER_RING;
                m.ldt.inject_raw(GATE_CS.index as usize, seg.into()).ok()?;
                Some(format!("{} now ring 2", GATE_CS))
            }
            Mutation::WidenPrivUserLimit => {
                for sel in [PRIVUSER_CS, PRIVUSER_DS] {
                    let mut seg = m.resolve_segment(sel).ok()?;
                    seg.base = 0;
                    seg.limit = u64::MAX;
                    m.ldt.inject_raw(sel.index as usize, seg.into()).ok()?;
                }
                m.map(KERNEL_ALIAS..KERNEL_ALIAS + crate::machine::PAGE_SIZE, PageClass::Supervisor, Perms::RW, true);
                Some(format!("privileged-user limit 2^64, kernel alias at {KERNEL_ALIAS:#x}"))
            }
            Mutation::InjectGateToX32 => {
                let slot = free_slot(m, TableKind::Ldt)?;
                let gate = GateDescriptor { target: PRIVUSER_CS, offset: handle.config().entry_point, rmpl: Ring::R3 };
                m.ldt.inject_raw(slot, gate.into()).ok()?;
                Some(format!("ldt:{slot} gate to {PRIVUSER_CS}"))
            }
            Mutation::RemoveEnterGateCheck => {
                let program = m.code.get_mut(&layout::ENTER_GATE_ADDR)?;
                let first = program.ops.first()?;
                if !matches!(first, crate::gate::MicroOp::CheckSavedCsRing { .. }) {
                    return None;
                }
                program.ops.remove(0);
                Some("enter gate no longer checks the caller ring".to_string())
            }
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn free_slot(m: &MachineState, table: TableKind) -> Option<usize> {
    (7..TABLE_CAPACITY).chain(1..7).find(|&s| m.table(table).get(s).is_none())
}

/// Behavioral checks run alongside the verdicts. Each returns a failure
/// description when the machine misbehaves.
pub fn behavioral_probes(state: &MachineState, handle: &LotrHandle) -> Vec<String> {
    let mut failed = Vec::new();
    let cfg = handle.config();
    let (mut probe, nr) = handle.probe_copy();
    let mut m = state.clone();
    m.reset();
    let rsp = cfg.privuser_stack.end.saturating_sub(0x100);
    match m.load_context(PRIVUSER_CS, PRIVUSER_DS, cfg.entry_point, rsp) {
        Err(_) => failed.push("cannot place a thread in privileged-user mode".to_string()),
        Ok(()) => match probe.privcall(&mut m, nr, &[]) {
            Err(crate::lotr::LotrError::Fault(f)) if f.kind == crate::machine::FaultKind::GeneralProtection => {}
            Ok(_) => failed.push("privcall from ring 2 was dispatched".to_string()),
            Err(e) => failed.push(format!("privcall from ring 2 ended in {e} instead of a GP fault")),
        },
    }
    failed
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutationOutcome {
    pub mutation: Mutation,
    pub applied: Option<String>,
    /// Requirements that held before the mutation and fail after it.
    pub flipped: Vec<Requirement>,
    pub failed_probes: Vec<String>,
}

impl MutationOutcome {
    pub fn detected(&self) -> bool {
        !self.flipped.is_empty() || !self.failed_probes.is_empty()
    }
}

impl fmt::Display for MutationOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MUTATION {} {}", self.mutation, if self.detected() { "DETECTED" } else { "UNDETECTED" })?;
        if !self.flipped.is_empty() {
            let names: Vec<_> = self.flipped.iter().map(|r| r.name()).collect();
            write!(f, " flipped: {}", names.join(","))?;
        }
        for p in &self.failed_probes {
            write!(f, " probe: {p}")?;
        }
        if self.applied.is_none() {
            f.write_str(" (not applicable)")?;
        }
        Ok(())
    }
}

/// Applies each mutation to its own copy of the machine and reports which
/// checks catch it. `state` is not modified.
pub fn run_mutation_suite(state: &MachineState, handle: &LotrHandle) -> Vec<MutationOutcome> {
    let baseline = check_all(state, handle);
    let baseline_probes = behavioral_probes(state, handle);
    Mutation::ALL
        .iter()
        .map(|&mutation| {
            let mut m = state.clone();
            let applied = mutation.apply(&mut m, handle);
            let after = check_all(&m, handle);
            let flipped = baseline
                .iter()
                .zip(&after)
                .filter(|(b, a)| b.holds && !a.holds)
                .map(|(b, _)| b.requirement)
                .collect();
            let failed_probes = behavioral_probes(&m, handle)
                .into_iter()
                .filter(|p| !baseline_probes.contains(p))
                .collect();
            MutationOutcome { mutation, applied, flipped, failed_probes }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReport {
    pub verdicts: Vec<Verdict>,
    pub warnings: Vec<String>,
    pub mutations: Vec<MutationOutcome>,
}

impl VerificationReport {
    pub fn all_hold(&self) -> bool {
        self.verdicts.iter().all(|v| v.holds)
    }

    pub fn all_detected(&self) -> bool {
        self.mutations.iter().all(|m| m.detected())
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.verdicts {
            writeln!(f, "{v}")?;
        }
        for w in &self.warnings {
            writeln!(f, "WARNING {w}")?;
        }
        for m in &self.mutations {
            writeln!(f, "{m}")?;
        }
        Ok(())
    }
}

pub fn verify(state: &MachineState, handle: &LotrHandle) -> VerificationReport {
    VerificationReport {
        verdicts: check_all(state, handle),
        warnings: warnings(state),
        mutations: run_mutation_suite(state, handle),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lotr::canonical_system;

    #[test]
    fn canonical_holds_everything() {
        let (m, h) = canonical_system();
        for v in check_all(&m, &h) {
            assert!(v.holds, "{v}");
        }
        assert!(warnings(&m).is_empty());
    }

    #[test]
    fn canonical_graph_shape() {
        let (m, _) = canonical_system();
        let g = build_transfer_graph(&m);
        let modes: std::collections::BTreeSet<_> = g.nodes.iter().map(|n| (n.ring, n.bitness)).collect();
        assert_eq!(
            modes,
            [(Ring::R0, Bitness::X64), (Ring::R1, Bitness::X64), (Ring::R2, Bitness::X32), (Ring::R3, Bitness::X64)]
                .into_iter()
                .collect()
        );
        let pu = g.node(Ring::R2, Bitness::X32).unwrap();
        for e in g.outgoing(pu) {
            let to = g.nodes[e.to];
            if e.control == Control::NonControlled {
                assert!(!(to.bitness == Bitness::X64 && to.ring < Ring::R3), "{}", g.describe_edge(e));
            }
        }
    }

    #[test]
    fn empty_ldt_single_node() {
        let mut m = MachineState::new();
        m.install_descriptor(TableKind::Gdt, 1, SegmentDescriptor::flat_code(Ring::R3).into()).unwrap();
        let g = build_transfer_graph(&m);
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.iter().all(|e| e.from == 0 && e.to == 0));
    }

    #[test]
    fn every_mutation_is_detected_and_state_untouched() {
        let (m, h) = canonical_system();
        let before = (m.ldt.clone(), m.pages.clone(), m.code.clone());
        let outcomes = run_mutation_suite(&m, &h);
        assert_eq!(outcomes.len(), 6);
        for o in &outcomes {
            assert!(o.applied.is_some(), "{o}");
            assert!(o.detected(), "{o}");
        }
        assert_eq!((m.ldt.clone(), m.pages.clone(), m.code.clone()), before);
        let find = |mu| outcomes.iter().find(|o| o.mutation == mu).unwrap();
        assert!(find(Mutation::AddPrivUserX64Segment).flipped.contains(&Requirement::CtSr));
        assert!(find(Mutation::DemoteGateRing).flipped.contains(&Requirement::P1));
        assert!(find(Mutation::InjectGateToX32).flipped.contains(&Requirement::C));
        assert!(find(Mutation::WidenPrivUserLimit).flipped.contains(&Requirement::Msr2));
        assert!(find(Mutation::DropSupervisorMarking).flipped.contains(&Requirement::Msr1));
        assert!(!find(Mutation::RemoveEnterGateCheck).failed_probes.is_empty());
    }

    #[test]
    fn failing_witnesses_replay() {
        let (m, h) = canonical_system();
        for mu in Mutation::ALL {
            let mut mm = m.clone();
            mu.apply(&mut mm, &h).unwrap();
            for v in check_all(&mm, &h) {
                if let Some(w) = &v.witness {
                    assert!(!v.holds);
                    assert!(w.replay(&mm), "{mu}: {v}");
                }
            }
        }
    }

    #[test]
    fn p2_witness_is_one_far_jump() {
        let (mut m, h) = canonical_system();
        Mutation::AddPrivUserX64Segment.apply(&mut m, &h).unwrap();
        let v = check_ctsr(&build_transfer_graph(&m));
        let Some(Witness::Path(p)) = v.witness else { panic!("{v}") };
        assert_eq!(p.len(), 1);
        assert!(matches!(p[0].1, TransferKind::FarJump(..)));
        assert_eq!((p[0].2.ring, p[0].2.bitness), (Ring::R2, Bitness::X64));
    }

    #[test]
    fn verdict_lines() {
        let (m, h) = canonical_system();
        let r = verify(&m, &h);
        let text = r.to_string();
        for req in Requirement::ALL {
            assert!(text.contains(&format!("REQ {req} HOLDS")), "{text}");
        }
        assert!(r.all_hold() && r.all_detected());
    }
}
