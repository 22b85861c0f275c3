//! Scenario scripts: parse, run against the canonical machine, and watch for
//! secret bytes reaching anything ring 3 can observe.

mod builtins;
mod cost;
mod parse;

use std::collections::HashSet;
use std::fmt;

pub use builtins::{builtin, BUILTINS, DIGEST_LEN, PASSWORD_DIGEST_OFFSET, SIGNING_KEY_OFFSET};
pub use cost::{
    compare_mechanisms, mprotect_pair_steps, rpc_steps, syscall_steps, CostModel, CostModelError, CostRow,
    CostTable, Mechanism, WEIGHT_KEYS,
};
pub use parse::{
    parse_number, parse_scenario, parse_selector, Arg, CallTarget, Directive, Expectation, Flag, Line, MapClass,
    ParseError, Scenario, NAMED_SELECTORS,
};

use crate::layout;
use crate::lotr::{self, canonical_system, ArgWidth, LotrError, LotrHandle};
use crate::machine::{
    page_base, Descriptor, Fault, GateDescriptor, MachineState, PageClass, Reg, Ring, SegmentDescriptor,
    SegmentSelector, StepCounts, PAGE_SIZE,
};
use crate::transfer::SavedFrame;

/// What a directive did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Observed {
    Done,
    Rax(u64),
    Fault(Fault),
    Rejected(String),
}

impl Observed {
    pub fn matches(&self, e: &Expectation) -> bool {
        match (e, self) {
            (Expectation::Ok, Observed::Done | Observed::Rax(_)) => true,
            (Expectation::Rax(v), Observed::Rax(got)) => v == got,
            (Expectation::Fault(k), Observed::Fault(f)) => *k == f.kind,
            (Expectation::Rejected, Observed::Rejected(_)) => true,
            _ => false,
        }
    }

    fn key(&self) -> String {
        match self {
            Observed::Done => "ok".into(),
            Observed::Rax(v) => format!("rax:{v:#x}"),
            Observed::Fault(f) => format!("fault:{}", f.kind),
            Observed::Rejected(_) => "rejected".into(),
        }
    }
}

impl fmt::Display for Observed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observed::Done => f.write_str("OK"),
            Observed::Rax(v) => write!(f, "RAX {v:#x}"),
            Observed::Fault(fault) => write!(f, "FAULT {} ({})", fault.kind, fault.detail),
            Observed::Rejected(why) => write!(f, "REJECTED ({why})"),
        }
    }
}

/// A window of a secret found somewhere ring 3 can read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leak {
    pub secret_addr: u64,
    pub location: String,
}

impl fmt::Display for Leak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "secret at {:#x} visible in {}", self.secret_addr, self.location)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectiveReport {
    pub line: usize,
    pub source: String,
    pub keyword: &'static str,
    pub outcome: Observed,
    pub expected: Option<Expectation>,
    pub passed: Option<bool>,
    pub leaks: Vec<Leak>,
    pub steps: StepCounts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub line: usize,
    pub expected: Expectation,
    pub observed: Observed,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunReport {
    pub entries: Vec<DirectiveReport>,
    pub mismatch: Option<Mismatch>,
    /// Number of PRIVCALL directives executed and the steps they took.
    pub privcalls: u64,
    pub privcall_steps: StepCounts,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }

    pub fn leaks(&self) -> impl Iterator<Item = &Leak> {
        self.entries.iter().flat_map(|e| &e.leaks)
    }

    pub fn leak_count(&self) -> usize {
        self.leaks().count()
    }

    pub fn expectations(&self) -> (usize, usize) {
        let checked = self.entries.iter().filter(|e| e.passed.is_some()).count();
        let passed = self.entries.iter().filter(|e| e.passed == Some(true)).count();
        (checked, passed)
    }
}

fn steps_kv(s: &StepCounts) -> String {
    format!(
        "ring_transitions={} descriptor_loads={} context_saves={} page_flips={} messages={}",
        s.ring_transitions, s.descriptor_loads, s.context_saves, s.page_flips, s.messages
    )
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            write!(f, "line {}: {} => {}", e.line, e.source, e.outcome)?;
            match (e.expected, e.passed) {
                (Some(x), Some(true)) => write!(f, " [expect {x}: pass]")?,
                (Some(x), Some(false)) => write!(f, " [expect {x}: FAIL]")?,
                _ => {}
            }
            writeln!(f)?;
            for l in &e.leaks {
                writeln!(f, "  LEAK {l}")?;
            }
            let expect = e.expected.map(|x| x.to_string().replace(' ', ":")).unwrap_or_else(|| "-".into());
            let result = match e.passed {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "-",
            };
            writeln!(
                f,
                "  line={} directive={} outcome={} expect={expect} result={result} leaks={} {}",
                e.line,
                e.keyword,
                e.outcome.key(),
                e.leaks.len(),
                steps_kv(&e.steps)
            )?;
        }
        if let Some(m) = &self.mismatch {
            writeln!(f, "MISMATCH line {}:", m.line)?;
            writeln!(f, "  - expected {}", m.expected)?;
            writeln!(f, "  + observed {}", m.observed)?;
        }
        let (checked, passed) = self.expectations();
        writeln!(
            f,
            "summary: directives={} expectations={checked} passed={passed} failed={} leaks={} result={}",
            self.entries.len(),
            checked - passed,
            self.leak_count(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Runs a scenario on a fresh canonical machine.
pub fn run_scenario(scn: &Scenario) -> RunReport {
    let (m, h) = canonical_system();
    run_scenario_on(m, h, scn).0
}

/// Runs a scenario on the given system and hands the final state back.
/// A directive that faults is reported and then rolled back, so the next
/// directive starts from a running machine.
pub fn run_scenario_on(
    machine: MachineState,
    handle: LotrHandle,
    scn: &Scenario,
) -> (RunReport, MachineState, LotrHandle) {
    let mut r = Runner { m: machine, h: handle, secrets: Vec::new() };
    let mut report = RunReport::default();
    for line in &scn.lines {
        if let Directive::Expect(x) = &line.directive {
            let Some(last) = report.entries.last_mut() else { continue };
            let ok = last.outcome.matches(x);
            last.expected = Some(*x);
            last.passed = Some(ok);
            if !ok {
                report.mismatch = Some(Mismatch { line: line.number, expected: *x, observed: last.outcome.clone() });
                break;
            }
            continue;
        }
        let snapshot = (r.m.clone(), r.h.clone());
        let before = r.m.steps;
        let mut observed = Vec::new();
        let outcome = r.exec(&line.directive, &mut observed);
        let steps = r.m.steps.saturating_sub(before);
        if let Directive::Privcall { .. } = line.directive {
            report.privcalls += 1;
            report.privcall_steps += steps;
        }
        if matches!(outcome, Observed::Fault(_)) || !r.m.is_running() {
            (r.m, r.h) = snapshot;
        }
        let leaks = detect_leaks(&r.m, &r.secrets, &observed);
        report.entries.push(DirectiveReport {
            line: line.number,
            source: line.source.clone(),
            keyword: line.directive.keyword(),
            outcome,
            expected: None,
            passed: None,
            leaks,
            steps,
        });
    }
    (report, r.m, r.h)
}

struct Runner {
    m: MachineState,
    h: LotrHandle,
    secrets: Vec<(u64, Vec<u8>)>,
}

fn from_lotr(r: Result<u64, LotrError>) -> Observed {
    match r {
        Ok(v) => Observed::Rax(v),
        Err(LotrError::Fault(f)) => Observed::Fault(f),
        Err(e) => Observed::Rejected(e.to_string()),
    }
}

fn from_fault(r: Result<(), Fault>) -> Observed {
    match r {
        Ok(()) => Observed::Done,
        Err(f) => Observed::Fault(f),
    }
}

/// Code selector, stack selector and an entry address for each ring in
/// the canonical layout.
fn ring_home(ring: Ring, h: &LotrHandle) -> (SegmentSelector, SegmentSelector, u64) {
    match ring.value() {
        0 => (layout::KERNEL_CS, layout::KERNEL_DS, layout::KERNEL_TEXT),
        1 => (lotr::GATE_CS, lotr::GATE_DS, layout::ENTER_GATE_ADDR),
        2 => (lotr::PRIVUSER_CS, lotr::PRIVUSER_DS, h.config().entry_point),
        _ => (layout::USER_CS, layout::USER_DS, layout::USER_TEXT),
    }
}

impl Runner {
    fn exec(&mut self, d: &Directive, observed: &mut Vec<u8>) -> Observed {
        let m = &mut self.m;
        match d {
            Directive::Map { addr, len, class, perms } => {
                m.map(*addr..addr.saturating_add(*len), class.page_class(), *perms, *class == MapClass::Kernel);
                Observed::Done
            }
            Directive::Secret { addr, bytes } => {
                let r = m.kernel_write(*addr, bytes);
                if r.is_ok() {
                    self.secrets.push((*addr, bytes.clone()));
                }
                from_fault(r)
            }
            Directive::Register { name, arity } => match builtin(name) {
                None => Observed::Rejected(format!("no built-in routine `{name}`")),
                Some(handler) => from_lotr(self.h.register_privcall(name, &vec![ArgWidth::U64; *arity], handler)),
            },
            Directive::CloseRegistry => {
                self.h.close_registry();
                Observed::Done
            }
            Directive::Privcall { target, args } => {
                let nr = match target {
                    CallTarget::Number(n) => *n,
                    CallTarget::Name(name) => match self.h.pct().lookup(name) {
                        Some(e) => e.number,
                        None => return Observed::Rejected(format!("no privcall named `{name}`")),
                    },
                };
                let mut regs = Vec::new();
                let page = self.h.config().arg_page.clone();
                let mut cursor = page.start;
                for a in args {
                    match a {
                        Arg::Num(v) => regs.push(*v),
                        Arg::Str(s) => {
                            let len = s.len() as u64;
                            if cursor + len > page.end {
                                return Observed::Rejected("string arguments overflow the argument page".into());
                            }
                            if let Err(f) = m.kernel_write(cursor, s) {
                                return Observed::Fault(f);
                            }
                            regs.extend([cursor, len]);
                            cursor = (cursor + len).next_multiple_of(8);
                        }
                    }
                }
                from_lotr(self.h.privcall(m, nr, &regs))
            }
            Directive::AttackRead { addr, len } => match m.read_mem(*addr, *len) {
                Ok(bytes) => {
                    *observed = bytes;
                    Observed::Done
                }
                Err(f) => Observed::Fault(f),
            },
            Directive::AttackJump { selector, offset } => from_fault(m.far_jump(*selector, *offset)),
            Directive::AttackLret { ring, rip } => {
                let (cs, ss, home) = ring_home(*ring, &self.h);
                let frame = SavedFrame {
                    rip: rip.unwrap_or(home),
                    cs: cs.with_rpl(*ring),
                    rsp: m.regs.rsp(),
                    ss: ss.with_rpl(*ring),
                };
                let at = m.regs.rsp().wrapping_sub(32);
                let words = [frame.rip, frame.cs.raw() as u64, frame.rsp, frame.ss.raw() as u64];
                let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
                if let Err(f) = m.write_mem(at, &bytes) {
                    return Observed::Fault(f);
                }
                m.regs.set_rsp(at);
                from_fault(m.long_return())
            }
            Directive::Mprotect { addr, len, perms } => {
                match self.h.guarded_mprotect(m, *addr..addr.saturating_add(*len), *perms) {
                    Ok(()) => Observed::Done,
                    Err(e) => from_lotr(Err(e)),
                }
            }
            Directive::SetFlag { flag, value } => {
                match flag {
                    Flag::Smep => m.smep = *value,
                    Flag::Smap => m.smap = *value,
                }
                Observed::Done
            }
            Directive::Segment { table, slot, code, ring, base, limit } => {
                let seg = match code {
                    Some(b) => SegmentDescriptor::code(*ring, *b, *base, *limit),
                    None => SegmentDescriptor::data(*ring, *base, *limit),
                };
                from_fault(m.install_descriptor(*table, *slot, seg.into()))
            }
            Directive::Gate { table, slot, target, offset, rmpl, raw } => {
                let gate: Descriptor = GateDescriptor { target: *target, offset: *offset, rmpl: *rmpl }.into();
                if *raw {
                    from_fault(m.table_mut(*table).inject_raw(*slot, gate))
                } else {
                    from_fault(m.install_descriptor(*table, *slot, gate))
                }
            }
            Directive::Expect(_) => Observed::Done,
        }
    }
}

const WINDOW: usize = 4;

/// Searches every byte ring 3 can observe for any window of any secret:
/// User pages, bytes returned by attack reads, and registers other than
/// RAX (which carries the declared return value).
pub fn detect_leaks(m: &MachineState, secrets: &[(u64, Vec<u8>)], observed: &[u8]) -> Vec<Leak> {
    let mut leaks = Vec::new();
    if secrets.is_empty() {
        return leaks;
    }
    let mut haystacks: Vec<(String, Vec<u8>)> = Vec::new();
    let mut run: Option<(u64, u64, Vec<u8>)> = None;
    for (page, e) in m.pages.iter() {
        if e.class != PageClass::User {
            continue;
        }
        let bytes = m.page_bytes(page);
        match (&mut run, bytes) {
            (Some((_, next, buf)), Some(b)) if *next == page => {
                buf.extend_from_slice(b);
                *next = page + 1;
            }
            (_, Some(b)) => {
                if let Some((start, _, buf)) = run.take() {
                    haystacks.push((format!("user memory at {:#x}", page_base(start)), buf));
                }
                run = Some((page, page + 1, b.to_vec()));
            }
            (_, None) => {
                if let Some((start, _, buf)) = run.take() {
                    haystacks.push((format!("user memory at {:#x}", page_base(start)), buf));
                }
            }
        }
    }
    if let Some((start, _, buf)) = run {
        haystacks.push((format!("user memory at {:#x}", page_base(start)), buf));
    }
    if !observed.is_empty() {
        haystacks.push(("attack read".to_string(), observed.to_vec()));
    }
    for r in Reg::ALL {
        if r != Reg::Rax {
            haystacks.push((format!("register {r}"), m.regs.get(r).to_le_bytes().to_vec()));
        }
    }

    for (addr, secret) in secrets {
        let needles: HashSet<&[u8]> = if secret.len() <= WINDOW {
            std::iter::once(&secret[..]).filter(|w| w.iter().any(|&b| b != 0)).collect()
        } else {
            secret.windows(WINDOW).filter(|w| w.iter().any(|&b| b != 0)).collect()
        };
        let Some(width) = needles.iter().next().map(|n| n.len()) else { continue };
        for (name, hay) in &haystacks {
            if let Some(pos) = hay.windows(width).position(|w| needles.contains(w)) {
                let location = if name.starts_with("user memory") {
                    let base = name.rsplit(' ').next().and_then(parse_number).unwrap_or(0);
                    format!("user memory at {:#x}", base + pos as u64)
                } else {
                    name.clone()
                };
                leaks.push(Leak { secret_addr: *addr, location });
            }
        }
    }
    leaks
}

/// Applies a configuration script (same grammar as scenarios) to the
/// canonical system. Directives that fail are reported and skipped.
pub fn apply_config(scn: &Scenario) -> (RunReport, MachineState, LotrHandle) {
    let (m, h) = canonical_system();
    run_scenario_on(m, h, scn)
}

/// Number of distinct pages covered by the SECRET directives of `scn`.
pub fn secret_pages(scn: &Scenario) -> u64 {
    let mut pages = std::collections::BTreeSet::new();
    for d in scn.directives() {
        if let Directive::Secret { addr, bytes } = d {
            let len = bytes.len().max(1) as u64;
            pages.extend((addr / PAGE_SIZE)..=((addr + len - 1) / PAGE_SIZE));
        }
    }
    pages.len() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::FaultKind;

    fn run(text: &str) -> RunReport {
        run_scenario(&parse_scenario(text).unwrap())
    }

    #[test]
    fn key_server_flow() {
        let digest: String = {
            use sha2::{Digest, Sha256};
            Sha256::digest(b"right").iter().map(|b| format!("{b:02x}")).collect()
        };
        let text = format!(
            "SECRET 0x10000000 hex:{digest}\nREGISTER check_password 2\nPRIVCALL check_password \"right\"\nEXPECT RAX 1\nPRIVCALL check_password \"wrong\"\nEXPECT RAX 0\nATTACK-READ 0x10000000 32\nEXPECT FAULT PageFault\n"
        );
        let r = run(&text);
        assert!(r.passed(), "{r}");
        assert_eq!(r.leak_count(), 0, "{r}");
        assert_eq!(r.privcalls, 2);
    }

    #[test]
    fn mismatch_halts() {
        let r = run("REGISTER echo 1\nPRIVCALL echo 5\nEXPECT RAX 6\nPRIVCALL echo 7\nEXPECT RAX 7");
        assert!(!r.passed());
        assert_eq!(r.entries.len(), 2);
        let m = r.mismatch.unwrap();
        assert_eq!((m.line, m.observed), (3, Observed::Rax(5)));
    }

    #[test]
    fn fault_rolls_back() {
        let r = run("ATTACK-LRET 0\nEXPECT FAULT GeneralProtection\nREGISTER add 2\nPRIVCALL add 1 2\nEXPECT RAX 3");
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn secret_in_user_memory_is_reported() {
        let r = run("SECRET 0x600000 \"hunter2!\"\nATTACK-READ 0x600000 8\nEXPECT OK");
        assert!(r.passed());
        assert!(r.leak_count() >= 2, "{r}");
        assert!(r.leaks().any(|l| l.location == "attack read"));
        assert!(r.leaks().any(|l| l.location == "user memory at 0x600000"));
    }

    #[test]
    fn leak_through_register_is_reported() {
        let r = run("SECRET 0x10000000 hex:0badc0de11223344\nREGISTER peek 1\nREGISTER echo 1\nPRIVCALL echo 0xdec0ad0b\nEXPECT OK");
        // The echoed value comes back only in RAX, and RDI is scrubbed.
        assert!(r.entries[3].leaks.is_empty(), "{r}");
        // R9 is an argument register the exit gate leaves alone.
        let r = run("SECRET 0x10000000 hex:0badc0de11223344\nREGISTER add 2\nPRIVCALL add 0 0 0 0 0 0x44332211\nEXPECT OK");
        assert!(r.leaks().any(|l| l.location == "register r9"), "{r}");
    }

    #[test]
    fn rejected_outcomes() {
        let r = run("REGISTER nope 1\nEXPECT REJECTED\nPRIVCALL missing\nEXPECT REJECTED\nPRIVCALL 9\nEXPECT REJECTED\nMPROTECT 0x10000000 0x1000 rwx\nEXPECT REJECTED");
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn smap_blocks_argument_page() {
        let r = run("SET-FLAG smap true\nREGISTER read_arg 1\nPRIVCALL read_arg 0x10050000\nEXPECT FAULT PageFault");
        assert!(r.passed(), "{r}");
        let r = run("REGISTER read_arg 1\nPRIVCALL read_arg 0x10050000\nEXPECT OK");
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn report_is_deterministic() {
        let text = "REGISTER sign 3\nSECRET 0x10000100 hex:000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f\nPRIVCALL sign \"msg\" 0x10050800\nEXPECT RAX 32";
        let a = run(text).to_string();
        assert_eq!(a, run(text).to_string());
        assert!(a.contains("result=PASS"), "{a}");
    }

    #[test]
    fn fault_kinds_from_directives() {
        let r = run("GATE ldt 9 PRIVUSER_CS 0 3\nEXPECT FAULT InvalidGate\nRAW-GATE ldt 9 PRIVUSER_CS 0 3\nEXPECT OK\nATTACK-JUMP ldt:9:3 0\nEXPECT FAULT GeneralProtection");
        assert!(r.passed(), "{r}");
        assert!(matches!(&r.entries[0].outcome, Observed::Fault(f) if f.kind == FaultKind::InvalidGate));
    }
}
