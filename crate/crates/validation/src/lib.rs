//! Support code for the acceptance target: verdict lines, a second
//! simulator written without a stack, and operation frequency counts.

use std::fmt;

use flipflop_core::lang::{Bit, Operation};

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(id: u8, name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self { id, name, passed, detail: detail.into() }
    }

    pub fn failed(id: u8, name: &'static str, err: impl fmt::Display) -> Self {
        Self::new(id, name, false, format!("error: {err}"))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "criterion {:>2} [{tag}] {}: {}", self.id, self.name, self.detail)
    }
}

/// Answers at each read, computed by walking backwards from the read and
/// skipping one write for every undo met on the way. Undos that the stack
/// would refuse cannot occur in valid lists, so none are special-cased here.
pub fn backward_answers(ops: &[Operation]) -> Vec<Bit> {
    let mut out = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        if *op != Operation::Read {
            continue;
        }
        let mut skip = 0usize;
        let mut answer = None;
        for prev in ops[..i].iter().rev() {
            match prev {
                Operation::Undo => skip += 1,
                Operation::Write(b) if skip == 0 => {
                    answer = Some(*b);
                    break;
                }
                Operation::Write(_) => skip -= 1,
                _ => {}
            }
        }
        out.push(answer.expect("valid lists always have a write before each read"));
    }
    out
}

/// Every operation list of length `1..=max_len` over the five symbols
/// `W0, W1, I, R, U`.
pub fn all_op_lists(max_len: usize) -> Vec<Vec<Operation>> {
    const SYMBOLS: [Operation; 5] = [
        Operation::Write(Bit::Zero),
        Operation::Write(Bit::One),
        Operation::Ignore,
        Operation::Read,
        Operation::Undo,
    ];
    let mut all = Vec::new();
    let mut layer: Vec<Vec<Operation>> = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|p| {
                SYMBOLS.iter().map(move |s| {
                    let mut q = p.clone();
                    q.push(*s);
                    q
                })
            })
            .collect();
        all.extend(layer.iter().cloned());
    }
    all
}

/// Counts of (ignore, read, write, undo), in that order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts(pub [u64; 4]);

impl OpCounts {
    pub fn add(&mut self, op: Operation) {
        let k = match op {
            Operation::Ignore => 0,
            Operation::Read => 1,
            Operation::Write(_) => 2,
            Operation::Undo => 3,
        };
        self.0[k] += 1;
    }

    /// Operations strictly between the opening write and the final read.
    pub fn add_interior(&mut self, ops: &[Operation]) {
        if ops.len() > 2 {
            for op in &ops[1..ops.len() - 1] {
                self.add(*op);
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn frequencies(&self) -> [f64; 4] {
        let t = self.total().max(1) as f64;
        self.0.map(|c| c as f64 / t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flipflop_core::lang::{oracle_answers, validate_ops};

    #[test]
    fn backward_answers_matches_oracle_on_small_lists() {
        let mut checked = 0;
        for ops in all_op_lists(5) {
            if validate_ops(&ops).is_ok() {
                assert_eq!(backward_answers(&ops), oracle_answers(&ops).unwrap(), "{ops:?}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn enumeration_size() {
        assert_eq!(all_op_lists(3).len(), 5 + 25 + 125);
    }

    #[test]
    fn interior_counts_skip_the_ends() {
        let ops = [Operation::Write(Bit::One), Operation::Undo, Operation::Ignore, Operation::Read];
        let mut c = OpCounts::default();
        c.add_interior(&ops);
        assert_eq!(c.0, [1, 0, 0, 1]);
        assert_eq!(c.frequencies(), [0.5, 0.0, 0.0, 0.5]);
    }
}
