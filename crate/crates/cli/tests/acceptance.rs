//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ringsim::lotr::{canonical_system, ArgWidth, LotrError, PRIVUSER_CS, PRIVUSER_DS, SCRUBBED_REGS};
use ringsim::machine::{
    privileged_instruction_check, Bitness, Descriptor, FaultKind, GateDescriptor, MachineState, PageClass, Perms,
    Reg, Ring, SegmentDescriptor, SegmentSelector, TableKind,
};
use ringsim::scenario::{builtin, compare_mechanisms, parse_scenario, run_scenario, CostModel, Scenario, WEIGHT_KEYS};
use ringsim::transfer::SavedFrame;
use ringsim::verifier::{build_transfer_graph, check_ctsr};

const SEED: u64 = 0x5EED_2024;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn load(rel: &str) -> Result<Scenario, String> {
    let text = fs::read_to_string(repo_file(rel)).map_err(|e| format!("{rel}: {e}"))?;
    parse_scenario(&text).map_err(|e| format!("{rel}: {e}"))
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    if took > limit {
        Err(format!("took {took:?}, limit {limit:?}"))
    } else {
        Ok(took)
    }
}

fn ring(r: u8) -> Ring {
    Ring::new(r).unwrap()
}

/// Allowed operations per (ring, page class, SMAP, SMEP), written out by
/// hand: R read, W write, X execute, P privileged instruction.
const ACCESS_TABLE: &str = "
0 U 0 0 RWXP
0 U 1 0 --XP
0 U 0 1 RW-P
0 U 1 1 ---P
0 S 0 0 RWXP
0 S 1 0 RWXP
0 S 0 1 RWXP
0 S 1 1 RWXP
1 U 0 0 RWX-
1 U 1 0 --X-
1 U 0 1 RW--
1 U 1 1 ----
1 S 0 0 RWX-
1 S 1 0 RWX-
1 S 0 1 RWX-
1 S 1 1 RWX-
2 U 0 0 RWX-
2 U 1 0 --X-
2 U 0 1 RW--
2 U 1 1 ----
2 S 0 0 RWX-
2 S 1 0 RWX-
2 S 0 1 RWX-
2 S 1 1 RWX-
3 U 0 0 RWX-
3 U 1 0 RWX-
3 U 0 1 RWX-
3 U 1 1 RWX-
3 S 0 0 ----
3 S 1 0 ----
3 S 0 1 ----
3 S 1 1 ----
";

fn access_matrix() -> Outcome {
    let start = Instant::now();
    let mut cells = 0;
    for line in ACCESS_TABLE.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let r = ring(f[0].parse().unwrap());
        let class = if f[1] == "U" { PageClass::User } else { PageClass::Supervisor };
        let mut m = MachineState::new();
        m.smap = f[2] == "1";
        m.smep = f[3] == "1";
        m.map(0..0x1000, class, Perms::RWX, false);
        let got = [
            m.check_data_access(r, 0, false),
            m.check_data_access(r, 0, true),
            m.check_exec(r, 0),
            privileged_instruction_check(r),
        ];
        for ((res, want), op) in got.iter().zip(f[4].chars()).zip(["read", "write", "exec", "priv"]) {
            let allowed = want != '-';
            if res.is_ok() != allowed {
                return Err(format!("{line}: {op} gave {res:?}"));
            }
            if let Err(fault) = res {
                let kind = if op == "priv" { FaultKind::GeneralProtection } else { FaultKind::PageFault };
                if fault.kind != kind {
                    return Err(format!("{line}: {op} raised {}", fault.kind.name()));
                }
            }
            cells += 1;
        }
    }
    let took = within(Duration::from_secs(1), start)?;
    Ok(format!("{cells} cells in {took:?}"))
}

const CODE: [u16; 4] = [1, 2, 3, 4];
const DATA: [u16; 4] = [5, 6, 7, 8];
const GATE: u16 = 9;
const STACK_TOP: [u64; 4] = [0x1_0000, 0x2_0000, 0x3_0000, 0x4_0000];

fn sel(table: TableKind, index: u16, r: u8) -> SegmentSelector {
    SegmentSelector::new(table, index, ring(r))
}

/// Flat 64-bit code and data at every ring, all memory user-accessible.
fn transfer_machine() -> MachineState {
    let mut m = MachineState::new();
    m.map(0..0x5_0000, PageClass::User, Perms::RWX, false);
    for r in 0..4u8 {
        m.install_descriptor(TableKind::Gdt, CODE[r as usize] as usize, SegmentDescriptor::flat_code(ring(r)).into())
            .unwrap();
        m.install_descriptor(TableKind::Gdt, DATA[r as usize] as usize, SegmentDescriptor::flat_data(ring(r)).into())
            .unwrap();
    }
    for r in 0..3u8 {
        m.set_ring_stack(ring(r), sel(TableKind::Gdt, DATA[r as usize], r), STACK_TOP[r as usize]).unwrap();
    }
    m
}

fn at_ring(m: &mut MachineState, r: u8) {
    let i = r as usize;
    m.load_context(sel(TableKind::Gdt, CODE[i], r), sel(TableKind::Gdt, DATA[i], r), 0x100, STACK_TOP[i] - 0x800)
        .unwrap();
}

fn transfer_rules() -> Outcome {
    let start = Instant::now();
    let mut calls = 0;
    for caller in 0..4u8 {
        for target in 0..4u8 {
            for rmpl in 0..4u8 {
                let expect = !(caller > rmpl || caller <= target);
                let mut m = transfer_machine();
                let gate = GateDescriptor {
                    target: sel(TableKind::Gdt, CODE[target as usize], target),
                    offset: 0x200,
                    rmpl: ring(rmpl),
                };
                m.install_descriptor(TableKind::Gdt, GATE as usize, Descriptor::Gate(gate)).unwrap();
                at_ring(&mut m, caller);
                let before = SavedFrame { rip: m.regs.rip, cs: m.regs.cs, rsp: m.regs.rsp(), ss: m.regs.ss };
                let res = m.long_call(sel(TableKind::Gdt, GATE, 3));
                let case = format!("call caller={caller} target={target} rmpl={rmpl}");
                if res.is_ok() != expect {
                    return Err(format!("{case}: expected allowed={expect}, got {res:?}"));
                }
                if expect {
                    if m.cpl() != ring(target) || m.regs.rip != 0x200 {
                        return Err(format!("{case}: landed at ring {} rip {:#x}", m.cpl(), m.regs.rip));
                    }
                    if m.regs.rsp() != STACK_TOP[target as usize] - 32 {
                        return Err(format!("{case}: stack not switched to the TSS entry"));
                    }
                    let pushed = m.peek_frame().map_err(|f| format!("{case}: {f}"))?;
                    if pushed != before {
                        return Err(format!("{case}: pushed {pushed:?}, caller was {before:?}"));
                    }
                } else if m.cpl() != ring(caller) {
                    return Err(format!("{case}: ring changed on a denied call"));
                }
                calls += 1;
            }
        }
    }
    let mut returns = 0;
    for current in 0..4u8 {
        for dest in 0..4u8 {
            let expect = dest >= current;
            let mut m = transfer_machine();
            at_ring(&mut m, current);
            let frame = SavedFrame {
                rip: 0x300,
                cs: sel(TableKind::Gdt, CODE[dest as usize], dest),
                rsp: STACK_TOP[dest as usize] - 0x400,
                ss: sel(TableKind::Gdt, DATA[dest as usize], dest),
            };
            let rsp = m.regs.rsp() - 32;
            let mut bytes = Vec::new();
            for v in [frame.rip, frame.cs.raw() as u64, frame.rsp, frame.ss.raw() as u64] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            m.write_mem(rsp, &bytes).unwrap();
            m.regs.set_rsp(rsp);
            let res = m.long_return();
            let case = format!("lret ring {current} -> {dest}");
            if res.is_ok() != expect {
                return Err(format!("{case}: expected allowed={expect}, got {res:?}"));
            }
            let (want_ring, want_rip) = if expect { (dest, 0x300) } else { (current, 0x100) };
            if m.cpl() != ring(want_ring) || m.regs.rip != want_rip {
                return Err(format!("{case}: ended at ring {} rip {:#x}", m.cpl(), m.regs.rip));
            }
            if let Err(f) = res {
                if f.kind != FaultKind::GeneralProtection {
                    return Err(format!("{case}: raised {}", f.kind.name()));
                }
            }
            returns += 1;
        }
    }
    let took = within(Duration::from_secs(1), start)?;
    Ok(format!("{calls} callgate triples, {returns} return pairs in {took:?}"))
}

fn verifier_cli() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_ringsim")).arg("verify").output().map_err(|e| e.to_string())?;
    let took = within(Duration::from_secs(10), start)?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let holds = stdout.lines().filter(|l| l.starts_with("REQ ") && l.contains(" HOLDS")).count();
    let detected = stdout.lines().filter(|l| l.starts_with("MUTATION ") && l.contains(" DETECTED")).count();
    if !out.status.success() || holds != 6 || detected != 6 {
        return Err(format!("exit {:?}, {holds} HOLDS, {detected} DETECTED\n{stdout}", out.status.code()));
    }
    Ok(format!("6 HOLDS, 6 DETECTED, exit 0 in {took:?}"))
}

const WIDTHS: [ArgWidth; 4] = [ArgWidth::U8, ArgWidth::U16, ArgWidth::U32, ArgWidth::U64];
const PRESERVED: [Reg; 6] = [Reg::Rbx, Reg::Rbp, Reg::R12, Reg::R13, Reg::R14, Reg::R15];

fn marshaling() -> Outcome {
    let start = Instant::now();
    let (mut m, mut h) = canonical_system();
    // Handler k of width w returns its k-th argument as it arrived.
    let mut table = Vec::new();
    for w in WIDTHS {
        for k in 0..6 {
            let nr = h
                .register_privcall(&format!("echo{k}_{w:?}"), &[w; 6], Arc::new(move |_, a| Ok(a[k])))
                .map_err(|e| e.to_string())?;
            table.push((nr, k, w));
        }
    }
    h.close_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for i in 0..1000 {
        let (nr, k, w) = table[rng.gen_range(0..table.len())];
        let args: Vec<u64> = (0..6).map(|_| rng.gen()).collect();
        for r in PRESERVED {
            m.regs.set(r, rng.gen());
        }
        let before = m.regs.clone();
        let rax = h.privcall(&mut m, nr, &args).map_err(|e| format!("vector {i}: {e}"))?;
        let want = w.narrow(args[k]);
        let case = format!("vector {i} (echo{k}, {w:?})");
        if rax != want || m.regs.get(Reg::Rax) != want {
            return Err(format!("{case}: got {rax:#x}, want {want:#x}"));
        }
        if m.cpl() != Ring::R3 || m.regs.rsp() != before.rsp() || m.regs.cs != before.cs || m.regs.ss != before.ss
        {
            return Err(format!("{case}: caller context not restored"));
        }
        if let Some(r) = SCRUBBED_REGS.iter().find(|r| m.regs.get(**r) != 0) {
            return Err(format!("{case}: {r} not scrubbed"));
        }
        if let Some(r) = PRESERVED.iter().find(|r| m.regs.get(**r) != before.get(**r)) {
            return Err(format!("{case}: {r} clobbered"));
        }
    }
    let took = within(Duration::from_secs(5), start)?;
    Ok(format!("1000 vectors in {took:?}"))
}

fn is_gp(r: &Result<(), ringsim::machine::Fault>) -> bool {
    matches!(r, Err(f) if f.kind == FaultKind::GeneralProtection)
}

fn attacks() -> Outcome {
    // Over-read past a user buffer into privileged-user data.
    let (mut m, _) = canonical_system();
    m.map(0x0FFF_F000..0x1000_0000, PageClass::User, Perms::RW, false);
    match m.read_mem(0x0FFF_FFE0, 64) {
        Err(f) if f.kind == FaultKind::PageFault => {}
        other => return Err(format!("over-read: {other:?}")),
    }

    let (mut m, h) = canonical_system();
    let entry = h.config().entry_point;
    if !is_gp(&m.far_jump(PRIVUSER_CS, entry)) {
        return Err("far jump into privileged-user code was not a GP fault".into());
    }
    m.reset();
    let forged = SavedFrame { rip: entry, cs: PRIVUSER_CS, rsp: h.config().privuser_stack.end - 8, ss: PRIVUSER_DS };
    if !is_gp(&m.long_return_with(forged)) {
        return Err("forged return into ring 2 was not a GP fault".into());
    }
    m.reset();

    let (mut m, mut h) = canonical_system();
    let echo = h.register_privcall("echo", &[ArgWidth::U64], builtin("echo").unwrap()).unwrap();
    let reenter = h.register_privcall("reenter", &[ArgWidth::U64; 2], builtin("reenter").unwrap()).unwrap();
    match h.privcall(&mut m, reenter, &[echo, 7]) {
        Err(LotrError::Fault(f)) if f.kind == FaultKind::GeneralProtection => {}
        other => return Err(format!("re-entry from ring 2: {other:?}")),
    }

    let mut names: Vec<_> = fs::read_dir(repo_file("scenarios"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".scn"))
        .collect();
    names.sort();
    let mut leaks = 0;
    for name in &names {
        let report = run_scenario(&load(&format!("scenarios/{name}"))?);
        if !report.passed() {
            return Err(format!("{name} failed:\n{report}"));
        }
        leaks += report.leak_count();
    }
    if leaks != 0 {
        return Err(format!("{leaks} leaks across shipped scenarios"));
    }
    Ok(format!("4 attacks faulted, {} scenarios, 0 leaks", names.len()))
}

fn cost_ordering() -> Outcome {
    let scn = load("scenarios/check_password.scn")?;
    let base = CostModel::default();
    let t = compare_mechanisms(&scn, &base);
    if !t.ordering_holds() {
        return Err(format!("default model:\n{t}"));
    }
    let mut models = 1;
    for key in WEIGHT_KEYS {
        for factor in [0.1, 1.0, 10.0] {
            let mut model = base;
            model.set(key, base.get(key).unwrap() * factor).unwrap();
            let t = compare_mechanisms(&scn, &model);
            if !t.ordering_holds() {
                return Err(format!("{key} x{factor}:\n{t}"));
            }
            models += 1;
        }
    }
    Ok(format!("ordering holds under {models} models"))
}

#[derive(Clone, Copy)]
enum Slot {
    Code(u8, bool),
    Data(u8),
    Gate(u16, u8),
}

/// CT-SR by search over (ring, 64-bit) pairs: from any ring-2 32-bit code
/// segment, far jumps reach every code segment at the same or a less
/// privileged ring. Violated iff a 64-bit segment below ring 3 is reached.
fn ctsr_by_search(slots: &[Option<Slot>]) -> bool {
    let code: Vec<(u8, bool)> =
        slots.iter().flatten().filter_map(|s| if let Slot::Code(r, x) = *s { Some((r, x)) } else { None }).collect();
    let mut seen: Vec<(u8, bool)> = code.iter().copied().filter(|c| *c == (2, false)).collect();
    let mut stack = seen.clone();
    while let Some((r, x64)) = stack.pop() {
        if x64 && r < 3 {
            return false;
        }
        for &c in &code {
            if c.0 >= r && !seen.contains(&c) {
                seen.push(c);
                stack.push(c);
            }
        }
    }
    true
}

fn random_tables() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xC7);
    let mut violations = 0;
    const TABLES: usize = 500;
    for i in 0..TABLES {
        let n = rng.gen_range(1..=8);
        let slots: Vec<Option<Slot>> = (0..n)
            .map(|_| match rng.gen_range(0..4) {
                0 => None,
                1 => Some(Slot::Code(rng.gen_range(0..4), rng.gen())),
                2 => Some(Slot::Data(rng.gen_range(0..4))),
                _ => Some(Slot::Gate(rng.gen_range(1..=8), rng.gen_range(0..4))),
            })
            .collect();
        let mut m = MachineState::new();
        for (j, s) in slots.iter().enumerate() {
            let d: Descriptor = match *s {
                None => continue,
                Some(Slot::Code(r, x64)) => {
                    let b = if x64 { Bitness::X64 } else { Bitness::X32 };
                    SegmentDescriptor::code(ring(r), b, 0, 1 << 32).into()
                }
                Some(Slot::Data(r)) => SegmentDescriptor::data(ring(r), 0, 1 << 32).into(),
                Some(Slot::Gate(t, rmpl)) => Descriptor::Gate(GateDescriptor {
                    target: sel(TableKind::Ldt, t, 0),
                    offset: 0,
                    rmpl: ring(rmpl),
                }),
            };
            m.ldt.inject_raw(j + 1, d).map_err(|f| f.to_string())?;
        }
        let verdict = check_ctsr(&build_transfer_graph(&m));
        let oracle = ctsr_by_search(&slots);
        if verdict.holds != oracle {
            return Err(format!("table {i}: checker says {}, search says {oracle}", verdict.holds));
        }
        if !oracle {
            violations += 1;
            if !verdict.witness.as_ref().is_some_and(|w| w.replay(&m)) {
                return Err(format!("table {i}: witness does not replay: {verdict}"));
            }
        }
    }
    let took = within(Duration::from_secs(30), start)?;
    Ok(format!("{TABLES} tables agree ({violations} violating) in {took:?}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("access-matrix", access_matrix),
        ("transfer-rules", transfer_rules),
        ("verifier-cli", verifier_cli),
        ("privcall-marshaling", marshaling),
        ("attacks-and-leaks", attacks),
        ("cost-ordering", cost_ordering),
        ("random-table-ctsr", random_tables),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
