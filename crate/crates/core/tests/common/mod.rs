#![allow(dead_code)]

use ringsim::machine::{
    Bitness, Descriptor, GateDescriptor, MachineState, Ring, SegmentDescriptor, SegmentSelector, TableKind,
};

#[derive(Debug, Clone, Copy)]
pub enum SlotSpec {
    Empty,
    Code(u8, bool),
    Data(u8),
    Gate { ldt: bool, target: u16, rmpl: u8 },
}

/// Builds a machine whose tables hold exactly the given slots, starting at
/// slot 1. Gates are injected without validation.
pub fn machine_from(gdt: &[SlotSpec], ldt: &[SlotSpec]) -> MachineState {
    let mut m = MachineState::new();
    for (kind, slots) in [(TableKind::Gdt, gdt), (TableKind::Ldt, ldt)] {
        for (i, s) in slots.iter().enumerate() {
            let d: Descriptor = match *s {
                SlotSpec::Empty => continue,
                SlotSpec::Code(r, x64) => {
                    let b = if x64 { Bitness::X64 } else { Bitness::X32 };
                    let limit = if x64 { u64::MAX } else { 1 << 32 };
                    SegmentDescriptor::code(Ring::new(r).unwrap(), b, 0, limit).into()
                }
                SlotSpec::Data(r) => SegmentDescriptor::data(Ring::new(r).unwrap(), 0, 1 << 32).into(),
                SlotSpec::Gate { ldt, target, rmpl } => {
                    let table = if ldt { TableKind::Ldt } else { TableKind::Gdt };
                    GateDescriptor {
                        target: SegmentSelector::new(table, target, Ring::R0),
                        offset: 0,
                        rmpl: Ring::new(rmpl).unwrap(),
                    }
                    .into()
                }
            };
            m.table_mut(kind).inject_raw(i + 1, d).unwrap();
        }
    }
    m
}

/// Independent CT-SR oracle: breadth-first search over (ring, bitness)
/// states straight from the descriptor tables. A far jump reaches any code
/// segment at the current ring or a less privileged one; a long return
/// reaches a subset of those. Callgates are controlled and not followed.
pub fn ctsr_oracle(m: &MachineState) -> bool {
    let mut code = Vec::new();
    for t in [TableKind::Gdt, TableKind::Ldt] {
        for (_, d) in m.table(t).iter() {
            if let Descriptor::Segment(s) = d {
                if let Some(b) = s.bitness() {
                    code.push((s.dpl.value(), b == Bitness::X64));
                }
            }
        }
    }
    let mut seen: Vec<(u8, bool)> = code.iter().copied().filter(|&(r, x64)| r == 2 && !x64).collect();
    let mut queue = seen.clone();
    while let Some((ring, x64)) = queue.pop() {
        if x64 && ring < 3 {
            return false;
        }
        for &(r, b) in &code {
            if r >= ring && !seen.contains(&(r, b)) {
                seen.push((r, b));
                queue.push((r, b));
            }
        }
    }
    true
}
