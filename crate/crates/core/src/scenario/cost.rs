//! Abstract step-cost comparison of three ways to protect a routine: a
//! privcall, an mprotect pair around the call, and an RPC to a separate
//! process. Privcall steps are measured on the machine; the other two are
//! modeled per call from the same step vocabulary.

use std::fmt;

use thiserror::Error;

use super::{run_scenario, secret_pages, Scenario};
use crate::lotr::canonical_system;
use crate::machine::StepCounts;

pub const WEIGHT_KEYS: [&str; 5] = ["ring-transition", "descriptor-load", "context-save", "page-flip", "message"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostModelError {
    #[error("unknown weight `{0}` (expected one of {keys})", keys = WEIGHT_KEYS.join(", "))]
    UnknownKey(String),
    #[error("weight `{key}` must be a positive finite number, got {value}")]
    NotPositive { key: String, value: f64 },
}

/// Weights per step. Units are arbitrary; only comparisons mean anything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub ring_transition: f64,
    pub descriptor_load: f64,
    pub context_save: f64,
    /// Per page: walk to the PTE, flip a flag, invalidate the TLB entry.
    pub page_flip: f64,
    pub message: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { ring_transition: 30.0, descriptor_load: 10.0, context_save: 10.0, page_flip: 150.0, message: 800.0 }
    }
}

impl CostModel {
    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        match key {
            "ring-transition" => Some(&mut self.ring_transition),
            "descriptor-load" => Some(&mut self.descriptor_load),
            "context-save" => Some(&mut self.context_save),
            "page-flip" => Some(&mut self.page_flip),
            "message" => Some(&mut self.message),
            _ => None,
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        let mut copy = *self;
        copy.slot(key).map(|v| *v)
    }

    pub fn set(&mut self, key: &str, value: f64) -> Result<(), CostModelError> {
        if !(value.is_finite() && value > 0.0) {
            return Err(CostModelError::NotPositive { key: key.to_string(), value });
        }
        let slot = self.slot(key).ok_or_else(|| CostModelError::UnknownKey(key.to_string()))?;
        *slot = value;
        Ok(())
    }

    pub fn cost(&self, s: &StepCounts) -> f64 {
        s.ring_transitions as f64 * self.ring_transition
            + s.descriptor_loads as f64 * self.descriptor_load
            + s.context_saves as f64 * self.context_save
            + s.page_flips as f64 * self.page_flip
            + s.messages as f64 * self.message
    }
}

/// One system call: enter and leave the kernel, swapping CS/SS each way and
/// saving and restoring the caller's registers.
pub fn syscall_steps() -> StepCounts {
    StepCounts { ring_transitions: 2, descriptor_loads: 4, context_saves: 2, page_flips: 0, messages: 0 }
}

/// One call under mprotect protection: unprotect, call, reprotect. Each
/// mprotect is a system call that flips every protected page.
pub fn mprotect_pair_steps(protected_pages: u64) -> StepCounts {
    let flips = StepCounts { page_flips: 2 * protected_pages, ..StepCounts::default() };
    syscall_steps().scaled(2) + flips
}

/// One call as an RPC: send and receive on each side (four system calls),
/// serialize and deserialize both ways, two process switches (each a
/// context save/restore and an address-space switch), two messages.
pub fn rpc_steps() -> StepCounts {
    let marshal = StepCounts { context_saves: 4, ..StepCounts::default() };
    let switch = StepCounts { context_saves: 2, page_flips: 1, ..StepCounts::default() };
    let messages = StepCounts { messages: 2, ..StepCounts::default() };
    syscall_steps().scaled(4) + marshal + switch.scaled(2) + messages
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Privcall,
    MprotectPair,
    Rpc,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Privcall => "privcall",
            Mechanism::MprotectPair => "mprotect-pair",
            Mechanism::Rpc => "rpc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub mechanism: Mechanism,
    pub calls: u64,
    pub steps: StepCounts,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub rows: [CostRow; 3],
}

impl CostTable {
    pub fn row(&self, m: Mechanism) -> &CostRow {
        self.rows.iter().find(|r| r.mechanism == m).expect("all mechanisms present")
    }

    /// privcall < mprotect-pair < rpc.
    pub fn ordering_holds(&self) -> bool {
        let [p, m, r] = &self.rows;
        p.cost < m.cost && m.cost < r.cost
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>12}",
            "mechanism", "calls", "ring", "desc", "ctx", "flips", "msgs", "cost"
        )?;
        for r in &self.rows {
            let s = &r.steps;
            writeln!(
                f,
                "{:<14} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>12.1}",
                r.mechanism.name(),
                r.calls,
                s.ring_transitions,
                s.descriptor_loads,
                s.context_saves,
                s.page_flips,
                s.messages,
                r.cost
            )?;
        }
        Ok(())
    }
}

/// Steps of one round trip through a routine that does nothing.
fn null_call_steps() -> StepCounts {
    let (mut m, mut h) = canonical_system();
    let nr = h
        .register_privcall("null", &[], super::builtin("null").expect("null routine"))
        .expect("fresh registry");
    let before = m.steps;
    h.privcall(&mut m, nr, &[]).expect("null round trip");
    m.steps.saturating_sub(before)
}

/// Runs the workload's privcalls on the machine and models the same calls
/// under the two alternatives. Setup directives are not charged. A
/// workload without privcalls is costed as a single null call, i.e. pure
/// mechanism overhead.
pub fn compare_mechanisms(workload: &Scenario, model: &CostModel) -> CostTable {
    let report = run_scenario(workload);
    let (calls, privcall) = if report.privcalls == 0 {
        (0, null_call_steps())
    } else {
        (report.privcalls, report.privcall_steps)
    };
    let per_call_scale = calls.max(1);
    let pages = secret_pages(workload).max(1);
    let row = |mechanism, steps: StepCounts| CostRow { mechanism, calls, steps, cost: model.cost(&steps) };
    CostTable {
        rows: [
            row(Mechanism::Privcall, privcall),
            row(Mechanism::MprotectPair, mprotect_pair_steps(pages).scaled(per_call_scale)),
            row(Mechanism::Rpc, rpc_steps().scaled(per_call_scale)),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    #[test]
    fn privcall_anatomy() {
        let s = null_call_steps();
        assert_eq!(
            s,
            StepCounts { ring_transitions: 4, descriptor_loads: 10, context_saves: 3, page_flips: 0, messages: 0 }
        );
    }

    #[test]
    fn weights_validate() {
        let mut m = CostModel::default();
        assert!(m.set("message", 0.0).is_err());
        assert!(m.set("message", f64::NAN).is_err());
        assert!(matches!(m.set("bogus", 1.0), Err(CostModelError::UnknownKey(_))));
        m.set("page-flip", 15.0).unwrap();
        assert_eq!(m.get("page-flip"), Some(15.0));
    }

    #[test]
    fn empty_workload_is_one_null_call() {
        let t = compare_mechanisms(&Scenario::default(), &CostModel::default());
        assert!(t.ordering_holds(), "{t}");
        assert_eq!(t.row(Mechanism::Privcall).steps, null_call_steps());
        assert_eq!(t.row(Mechanism::Rpc).steps, rpc_steps());
    }

    #[test]
    fn table_has_three_rows() {
        let w = parse_scenario("REGISTER add 2\nPRIVCALL add 1 2\nEXPECT RAX 3").unwrap();
        let text = compare_mechanisms(&w, &CostModel::default()).to_string();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().starts_with("privcall"));
    }
}
