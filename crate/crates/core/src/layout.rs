//! Address-space layout and GDT of the canonical machine.
//!
//! ```text
//! 0x0040_0000  user text            User  r-x
//! 0x0060_0000  user data            User  rw-
//! 0x1000_0000  privileged-user data       (Supervisor after init)
//! 0x1001_0000  privileged-user code       (entry point at its start)
//! 0x1002_0000  privileged-user heap
//! 0x1004_0000  privileged-user stack
//! 0x1005_0000  argument page        User  rw-  (stays User)
//! 0x6fff_0000  user stack           User  rw-
//! 0xffff_8000_0000_0000  kernel text/data/stack, gate code and gate stack
//! ```
//!
//! Everything the privileged-user segment may touch sits below 4 GiB; the
//! kernel sits far above it.

use crate::machine::{
    Bitness, MachineState, PageClass, Perms, Ring, SegmentDescriptor, SegmentSelector, TableKind, KERNEL_BASE,
};

pub const USER_TEXT: u64 = 0x0040_0000;
pub const USER_TEXT_END: u64 = 0x0040_4000;
pub const USER_DATA: u64 = 0x0060_0000;
pub const USER_DATA_END: u64 = 0x0061_0000;
pub const USER_STACK: u64 = 0x6FFF_0000;
pub const USER_STACK_TOP: u64 = 0x7000_0000;
/// Initial user RSP; leaves room above it for planted frames.
pub const USER_RSP: u64 = USER_STACK_TOP - 0x100;

pub const PRIVUSER_DATA: u64 = 0x1000_0000;
pub const PRIVUSER_CODE: u64 = 0x1001_0000;
pub const PRIVUSER_HEAP: u64 = 0x1002_0000;
pub const PRIVUSER_STACK: u64 = 0x1004_0000;
pub const PRIVUSER_STACK_TOP: u64 = 0x1005_0000;
pub const ARG_PAGE: u64 = 0x1005_0000;
pub const ARG_PAGE_END: u64 = 0x1005_1000;

pub const KERNEL_TEXT: u64 = KERNEL_BASE;
pub const KERNEL_DATA: u64 = KERNEL_BASE + 0x1_0000;
pub const KERNEL_STACK: u64 = KERNEL_BASE + 0x2_0000;
pub const KERNEL_STACK_TOP: u64 = KERNEL_BASE + 0x2_4000;
pub const ENTER_GATE_ADDR: u64 = KERNEL_BASE + 0x10_0000;
pub const EXIT_GATE_ADDR: u64 = KERNEL_BASE + 0x10_1000;
pub const GATE_STACK: u64 = KERNEL_BASE + 0x20_0000;
pub const GATE_STACK_TOP: u64 = KERNEL_BASE + 0x20_4000;

pub const KERNEL_CS: SegmentSelector = SegmentSelector::new(TableKind::Gdt, 1, Ring::R0);
pub const KERNEL_DS: SegmentSelector = SegmentSelector::new(TableKind::Gdt, 2, Ring::R0);
pub const USER_DS: SegmentSelector = SegmentSelector::new(TableKind::Gdt, 3, Ring::R3);
pub const USER_CS: SegmentSelector = SegmentSelector::new(TableKind::Gdt, 4, Ring::R3);

/// A machine with the kernel and a normal user process, but no
/// privileged-user layer yet. The thread runs in ring 3 at `USER_TEXT`.
pub fn base_machine() -> MachineState {
    let mut m = MachineState::new();
    m.map(KERNEL_TEXT..KERNEL_TEXT + 0x4000, PageClass::Supervisor, Perms::RX, true);
    m.map(KERNEL_DATA..KERNEL_DATA + 0x4000, PageClass::Supervisor, Perms::RW, true);
    m.map(KERNEL_STACK..KERNEL_STACK_TOP, PageClass::Supervisor, Perms::RW, true);
    m.map(GATE_STACK..GATE_STACK_TOP, PageClass::Supervisor, Perms::RW, true);

    m.map(USER_TEXT..USER_TEXT_END, PageClass::User, Perms::RX, false);
    m.map(USER_DATA..USER_DATA_END, PageClass::User, Perms::RW, false);
    m.map(USER_STACK..USER_STACK_TOP, PageClass::User, Perms::RW, false);

    // The host process allocates the privileged-user image as ordinary
    // user memory; initialization is what demotes it.
    m.map(PRIVUSER_DATA..PRIVUSER_CODE, PageClass::User, Perms::RW, false);
    m.map(PRIVUSER_CODE..PRIVUSER_HEAP, PageClass::User, Perms::RX, false);
    m.map(PRIVUSER_HEAP..PRIVUSER_STACK, PageClass::User, Perms::RW, false);
    m.map(PRIVUSER_STACK..PRIVUSER_STACK_TOP, PageClass::User, Perms::RW, false);
    m.map(ARG_PAGE..ARG_PAGE_END, PageClass::User, Perms::RW, false);

    let install = |m: &mut MachineState, sel: SegmentSelector, d: SegmentDescriptor| {
        m.install_descriptor(sel.table, sel.index as usize, d.into()).expect("static GDT");
    };
    install(&mut m, KERNEL_CS, SegmentDescriptor::code(Ring::R0, Bitness::X64, 0, u64::MAX));
    install(&mut m, KERNEL_DS, SegmentDescriptor::flat_data(Ring::R0));
    install(&mut m, USER_DS, SegmentDescriptor::flat_data(Ring::R3));
    install(&mut m, USER_CS, SegmentDescriptor::flat_code(Ring::R3));
    m.set_ring_stack(Ring::R0, KERNEL_DS, KERNEL_STACK_TOP).expect("kernel stack");
    m.load_context(USER_CS, USER_DS, USER_TEXT, USER_RSP).expect("user context");
    m
}
