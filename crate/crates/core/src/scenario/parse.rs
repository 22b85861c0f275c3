//! Line-oriented scenario grammar.
//!
//! ```text
//! # comment                          (also allowed after a directive)
//! MAP addr len user|supervisor|kernel [r|rw|rx|rwx]
//! SECRET addr bytes                  bytes: "quoted" or hex:0011aabb
//! REGISTER name arity
//! CLOSE-REGISTRY
//! PRIVCALL nr|name args...           string args expand to (ptr, len)
//! ATTACK-READ addr len
//! ATTACK-JUMP selector offset
//! ATTACK-LRET ring [rip]
//! MPROTECT addr len perms
//! SET-FLAG smep|smap true|false
//! SEGMENT gdt|ldt slot code|data ring [x64|x32] base limit
//! GATE gdt|ldt slot target-selector offset rmpl
//! RAW-GATE gdt|ldt slot target-selector offset rmpl
//! EXPECT OK | RAX n | FAULT kind | REJECTED
//! ```
//!
//! Numbers are decimal or `0x` hex, `_` separators allowed. Selectors are a
//! symbolic name (`USER_CS`, `PRIVUSER_CS`, `CG1`, ...), `ldt:N[:rpl]`,
//! `gdt:N[:rpl]`, or a raw 16-bit value.

use std::fmt;

use thiserror::Error;

use crate::layout;
use crate::lotr;
use crate::machine::{Bitness, FaultKind, PageClass, Perms, Ring, SegmentSelector, TableKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arg {
    Num(u64),
    Str(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallTarget {
    Number(u64),
    Name(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapClass {
    User,
    Supervisor,
    /// Supervisor and tagged as kernel memory.
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Smep,
    Smap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    Ok,
    Rax(u64),
    Fault(FaultKind),
    Rejected,
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::Ok => f.write_str("OK"),
            Expectation::Rax(v) => write!(f, "RAX {v:#x}"),
            Expectation::Fault(k) => write!(f, "FAULT {k}"),
            Expectation::Rejected => f.write_str("REJECTED"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Map { addr: u64, len: u64, class: MapClass, perms: Perms },
    Secret { addr: u64, bytes: Vec<u8> },
    Register { name: String, arity: usize },
    CloseRegistry,
    Privcall { target: CallTarget, args: Vec<Arg> },
    AttackRead { addr: u64, len: u64 },
    AttackJump { selector: SegmentSelector, offset: u64 },
    AttackLret { ring: Ring, rip: Option<u64> },
    Mprotect { addr: u64, len: u64, perms: Perms },
    SetFlag { flag: Flag, value: bool },
    Segment { table: TableKind, slot: usize, code: Option<Bitness>, ring: Ring, base: u64, limit: u64 },
    Gate { table: TableKind, slot: usize, target: SegmentSelector, offset: u64, rmpl: Ring, raw: bool },
    Expect(Expectation),
}

impl Directive {
    pub fn keyword(&self) -> &'static str {
        match self {
            Directive::Map { .. } => "MAP",
            Directive::Secret { .. } => "SECRET",
            Directive::Register { .. } => "REGISTER",
            Directive::CloseRegistry => "CLOSE-REGISTRY",
            Directive::Privcall { .. } => "PRIVCALL",
            Directive::AttackRead { .. } => "ATTACK-READ",
            Directive::AttackJump { .. } => "ATTACK-JUMP",
            Directive::AttackLret { .. } => "ATTACK-LRET",
            Directive::Mprotect { .. } => "MPROTECT",
            Directive::SetFlag { .. } => "SET-FLAG",
            Directive::Segment { .. } => "SEGMENT",
            Directive::Gate { raw: false, .. } => "GATE",
            Directive::Gate { raw: true, .. } => "RAW-GATE",
            Directive::Expect(_) => "EXPECT",
        }
    }

    /// Directives whose outcome must be pinned by an `EXPECT`.
    pub fn needs_expect(&self) -> bool {
        matches!(
            self,
            Directive::Privcall { .. }
                | Directive::AttackRead { .. }
                | Directive::AttackJump { .. }
                | Directive::AttackLret { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Line {
    pub number: usize,
    pub source: String,
    pub directive: Directive,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scenario {
    pub lines: Vec<Line>,
}

impl Scenario {
    pub fn directives(&self) -> impl Iterator<Item = &Directive> {
        self.lines.iter().map(|l| &l.directive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    Str(Vec<u8>),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    column: usize,
}

fn tokenize(line: &str, number: usize) -> Result<Vec<Token>, ParseError> {
    let err = |column: usize, message: String| ParseError { line: number, column, message };
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '#' {
            break;
        } else if c == '"' {
            let start = i;
            i += 1;
            let mut s = String::new();
            loop {
                match chars.get(i) {
                    None => return Err(err(start + 1, "unterminated string".into())),
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        let esc = chars.get(i + 1).copied();
                        match esc {
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            Some('0') => s.push('\0'),
                            Some('\\') => s.push('\\'),
                            Some('"') => s.push('"'),
                            _ => return Err(err(i + 1, format!("unknown escape `\\{}`", esc.unwrap_or(' ')))),
                        }
                        i += 2;
                    }
                    Some(&ch) => {
                        s.push(ch);
                        i += 1;
                    }
                }
            }
            out.push(Token { tok: Tok::Str(s.into_bytes()), column: start + 1 });
        } else {
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() && chars[i] != '#' {
                i += 1;
            }
            out.push(Token { tok: Tok::Word(chars[start..i].iter().collect()), column: start + 1 });
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    line: usize,
    end_column: usize,
    tokens: &'a [Token],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err_at(&self, column: usize, message: impl Into<String>) -> ParseError {
        ParseError { line: self.line, column, message: message.into() }
    }

    fn next(&mut self, what: &str) -> Result<&'a Token, ParseError> {
        let t = self
            .tokens
            .get(self.pos)
            .ok_or_else(|| self.err_at(self.end_column, format!("expected {what}")))?;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn word(&mut self, what: &str) -> Result<(&'a str, usize), ParseError> {
        let t = self.next(what)?;
        match &t.tok {
            Tok::Word(w) => Ok((w.as_str(), t.column)),
            Tok::Str(_) => Err(self.err_at(t.column, format!("expected {what}, found a string"))),
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, ParseError> {
        let (w, col) = self.word(what)?;
        parse_number(w).ok_or_else(|| self.err_at(col, format!("expected {what}, found `{w}`")))
    }

    fn ring(&mut self, what: &str) -> Result<Ring, ParseError> {
        let (w, col) = self.word(what)?;
        parse_number(w)
            .and_then(|v| u8::try_from(v).ok())
            .and_then(Ring::new)
            .ok_or_else(|| self.err_at(col, format!("expected {what} (0-3), found `{w}`")))
    }

    fn choice<T: Copy>(&mut self, what: &str, options: &[(&str, T)]) -> Result<T, ParseError> {
        let (w, col) = self.word(what)?;
        options
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(w))
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
                self.err_at(col, format!("expected {what} ({}), found `{w}`", names.join("|")))
            })
    }

    fn selector(&mut self) -> Result<SegmentSelector, ParseError> {
        let (w, col) = self.word("selector")?;
        parse_selector(w).ok_or_else(|| self.err_at(col, format!("unknown selector `{w}`")))
    }

    fn table(&mut self) -> Result<TableKind, ParseError> {
        self.choice("table", &[("gdt", TableKind::Gdt), ("ldt", TableKind::Ldt)])
    }

    fn slot(&mut self) -> Result<usize, ParseError> {
        let (w, col) = self.word("slot")?;
        parse_number(w)
            .filter(|&v| v < crate::machine::TABLE_CAPACITY as u64)
            .map(|v| v as usize)
            .ok_or_else(|| self.err_at(col, format!("slot `{w}` out of range")))
    }

    fn perms(&mut self) -> Result<Perms, ParseError> {
        self.choice("permissions", &PERMS)
    }

    fn bytes(&mut self) -> Result<Vec<u8>, ParseError> {
        let t = self.next("bytes")?;
        match &t.tok {
            Tok::Str(s) => Ok(s.clone()),
            Tok::Word(w) => {
                let hex = w
                    .strip_prefix("hex:")
                    .ok_or_else(|| self.err_at(t.column, format!("expected bytes, found `{w}`")))?;
                parse_hex(hex).ok_or_else(|| self.err_at(t.column, format!("bad hex bytes `{w}`")))
            }
        }
    }

    fn done(&self) -> Result<(), ParseError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(self.err_at(t.column, "unexpected trailing token")),
        }
    }
}

const PERMS: [(&str, Perms); 4] = [("r", Perms::R), ("rw", Perms::RW), ("rx", Perms::RX), ("rwx", Perms::RWX)];

pub fn parse_number(w: &str) -> Option<u64> {
    let clean: String = w.chars().filter(|&c| c != '_').collect();
    if clean.is_empty() {
        return None;
    }
    match clean.strip_prefix("0x").or_else(|| clean.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => clean.parse().ok(),
    }
}

fn parse_hex(s: &str) -> Option<Vec<u8>> {
    if s.is_empty() || !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

pub const NAMED_SELECTORS: [(&str, SegmentSelector); 10] = [
    ("KERNEL_CS", layout::KERNEL_CS),
    ("KERNEL_DS", layout::KERNEL_DS),
    ("USER_CS", layout::USER_CS),
    ("USER_DS", layout::USER_DS),
    ("GATE_CS", lotr::GATE_CS),
    ("GATE_DS", lotr::GATE_DS),
    ("PRIVUSER_CS", lotr::PRIVUSER_CS),
    ("PRIVUSER_DS", lotr::PRIVUSER_DS),
    ("CG1", lotr::CG1),
    ("CG2", lotr::CG2),
];

pub fn parse_selector(w: &str) -> Option<SegmentSelector> {
    if let Some((_, sel)) = NAMED_SELECTORS.iter().find(|(n, _)| n.eq_ignore_ascii_case(w)) {
        return Some(*sel);
    }
    let parts: Vec<&str> = w.split(':').collect();
    if parts.len() == 2 || parts.len() == 3 {
        let table = match parts[0].to_ascii_lowercase().as_str() {
            "gdt" => TableKind::Gdt,
            "ldt" => TableKind::Ldt,
            _ => return None,
        };
        let index = u16::try_from(parse_number(parts[1])?).ok().filter(|&i| i < 8192)?;
        let rpl = match parts.get(2) {
            Some(r) => Ring::new(u8::try_from(parse_number(r)?).ok()?)?,
            None => Ring::R0,
        };
        return Some(SegmentSelector::new(table, index, rpl));
    }
    parse_number(w).and_then(|v| u16::try_from(v).ok()).map(SegmentSelector::from_raw)
}

fn parse_line(tokens: &[Token], number: usize, end_column: usize) -> Result<Directive, ParseError> {
    let mut c = Cursor { line: number, end_column, tokens, pos: 0 };
    let (kw, col) = c.word("directive")?;
    let d = match kw {
        "MAP" => {
            let addr = c.number("address")?;
            let len = c.number("length")?;
            let class = c.choice(
                "page class",
                &[("user", MapClass::User), ("supervisor", MapClass::Supervisor), ("kernel", MapClass::Kernel)],
            )?;
            let perms = if c.peek().is_some() { c.perms()? } else { Perms::RW };
            Directive::Map { addr, len, class, perms }
        }
        "SECRET" => Directive::Secret { addr: c.number("address")?, bytes: c.bytes()? },
        "REGISTER" => {
            let (name, _) = c.word("routine name")?;
            let name = name.to_string();
            let arity = c.number("arity")? as usize;
            Directive::Register { name, arity }
        }
        "CLOSE-REGISTRY" => Directive::CloseRegistry,
        "PRIVCALL" => {
            let (w, _) = c.word("privcall number or name")?;
            let target = match parse_number(w) {
                Some(n) => CallTarget::Number(n),
                None => CallTarget::Name(w.to_string()),
            };
            let mut args = Vec::new();
            while let Some(t) = c.peek() {
                c.pos += 1;
                args.push(match &t.tok {
                    Tok::Str(s) => Arg::Str(s.clone()),
                    Tok::Word(w) => Arg::Num(
                        parse_number(w).ok_or_else(|| c.err_at(t.column, format!("bad argument `{w}`")))?,
                    ),
                });
            }
            Directive::Privcall { target, args }
        }
        "ATTACK-READ" => Directive::AttackRead { addr: c.number("address")?, len: c.number("length")? },
        "ATTACK-JUMP" => Directive::AttackJump { selector: c.selector()?, offset: c.number("offset")? },
        "ATTACK-LRET" => {
            let ring = c.ring("ring")?;
            let rip = if c.peek().is_some() { Some(c.number("rip")?) } else { None };
            Directive::AttackLret { ring, rip }
        }
        "MPROTECT" => Directive::Mprotect { addr: c.number("address")?, len: c.number("length")?, perms: c.perms()? },
        "SET-FLAG" => {
            let flag = c.choice("flag", &[("smep", Flag::Smep), ("smap", Flag::Smap)])?;
            let value = c.choice("boolean", &[("true", true), ("false", false), ("on", true), ("off", false)])?;
            Directive::SetFlag { flag, value }
        }
        "SEGMENT" => {
            let table = c.table()?;
            let slot = c.slot()?;
            let is_code = c.choice("segment kind", &[("code", true), ("data", false)])?;
            let ring = c.ring("ring")?;
            let code = if is_code {
                Some(c.choice("bitness", &[("x64", Bitness::X64), ("x32", Bitness::X32)])?)
            } else {
                None
            };
            Directive::Segment { table, slot, code, ring, base: c.number("base")?, limit: c.number("limit")? }
        }
        "GATE" | "RAW-GATE" => Directive::Gate {
            table: c.table()?,
            slot: c.slot()?,
            target: c.selector()?,
            offset: c.number("offset")?,
            rmpl: c.ring("rmpl")?,
            raw: kw == "RAW-GATE",
        },
        "EXPECT" => {
            let (w, col) = c.word("outcome")?;
            Directive::Expect(match w {
                "OK" => Expectation::Ok,
                "REJECTED" => Expectation::Rejected,
                "RAX" => Expectation::Rax(c.number("value")?),
                "FAULT" => {
                    let (k, kcol) = c.word("fault kind")?;
                    Expectation::Fault(
                        FaultKind::from_name(k).ok_or_else(|| c.err_at(kcol, format!("unknown fault kind `{k}`")))?,
                    )
                }
                _ => return Err(c.err_at(col, format!("unknown outcome `{w}`"))),
            })
        }
        _ => return Err(c.err_at(col, format!("unknown directive `{kw}`"))),
    };
    c.done()?;
    Ok(d)
}

/// Parses scenario text. Every PRIVCALL and ATTACK directive must be
/// followed by exactly one EXPECT; other directives may have one.
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let mut lines: Vec<Line> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let number = i + 1;
        let tokens = tokenize(raw, number)?;
        if tokens.is_empty() {
            continue;
        }
        let directive = parse_line(&tokens, number, raw.chars().count() + 1)?;
        let prev = lines.last().map(|l| &l.directive);
        if let Directive::Expect(_) = directive {
            match prev {
                None | Some(Directive::Expect(_)) => {
                    return Err(ParseError {
                        line: number,
                        column: tokens[0].column,
                        message: "EXPECT must follow a directive".into(),
                    });
                }
                _ => {}
            }
        } else if let Some(p) = prev.filter(|p| p.needs_expect()) {
            let l = lines.last().expect("prev exists");
            return Err(ParseError {
                line: l.number,
                column: 1,
                message: format!("{} must be followed by EXPECT", p.keyword()),
            });
        }
        lines.push(Line { number, source: raw.trim().to_string(), directive });
    }
    if let Some(l) = lines.last().filter(|l| l.directive.needs_expect()) {
        return Err(ParseError {
            line: l.number,
            column: 1,
            message: format!("{} must be followed by EXPECT", l.directive.keyword()),
        });
    }
    Ok(Scenario { lines })
}

impl MapClass {
    pub fn page_class(self) -> PageClass {
        match self {
            MapClass::User => PageClass::User,
            MapClass::Supervisor | MapClass::Kernel => PageClass::Supervisor,
        }
    }
}
