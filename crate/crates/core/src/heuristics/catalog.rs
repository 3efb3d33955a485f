// SPDX-License-Identifier: MIT OR Apache-2.0

//! Heuristic types and their parameter grids.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{valid_grid, Prompt};
use crate::error::{invalid, Result};
use crate::vocab::{Operator, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Op1,
    Op2,
    Result,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Op1, Target::Op2, Target::Result];

    pub fn name(self) -> &'static str {
        match self {
            Target::Op1 => "op1",
            Target::Op2 => "op2",
            Target::Result => "result",
        }
    }

    fn pick(self, p: &Prompt) -> usize {
        match self {
            Target::Op1 => p.op1,
            Target::Op2 => p.op2,
            Target::Result => p.result,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Directness {
    /// Value vectors promote result tokens.
    Direct,
    /// Value vectors carry operand features for later layers.
    Indirect,
}

/// One parameterized heuristic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Heuristic {
    /// `lo ≤ value ≤ hi`.
    Range { target: Target, lo: usize, hi: usize },
    /// `value ≡ m (mod n)`.
    Modulo { target: Target, n: usize, m: usize },
    /// Three-character template over the zero-padded value; `.` matches any
    /// digit.
    Pattern { target: Target, pattern: String },
    IdenticalOperands,
    /// Result is one of a few unrelated values (division only).
    MultiResult { values: Vec<usize> },
}

pub const RANGE_LENGTHS: [usize; 4] = [10, 30, 50, 100];
pub const DIV_RANGE_LENGTHS: [usize; 3] = [2, 10, 100];
pub const MODULI: [usize; 11] = [2, 3, 4, 5, 6, 7, 8, 9, 11, 13, 15];

impl Heuristic {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Heuristic::Range { .. } => "range",
            Heuristic::Modulo { .. } => "modulo",
            Heuristic::Pattern { .. } => "pattern",
            Heuristic::IdenticalOperands => "identical_operands",
            Heuristic::MultiResult { .. } => "multi_result",
        }
    }

    pub fn target(&self) -> Option<Target> {
        match self {
            Heuristic::Range { target, .. } | Heuristic::Modulo { target, .. } | Heuristic::Pattern { target, .. } => {
                Some(*target)
            }
            Heuristic::IdenticalOperands => None,
            Heuristic::MultiResult { .. } => Some(Target::Result),
        }
    }

    pub fn directness(&self) -> Directness {
        match self.target() {
            Some(Target::Op1 | Target::Op2) => Directness::Indirect,
            _ => Directness::Direct,
        }
    }

    pub fn is_direct(&self) -> bool {
        self.directness() == Directness::Direct
    }

    /// Compact parameter string, e.g. `150..=180`, `0 mod 2`, `1.8`, `{3,7}`.
    pub fn params(&self) -> String {
        match self {
            Heuristic::Range { lo, hi, .. } => format!("{lo}..={hi}"),
            Heuristic::Modulo { n, m, .. } => format!("{m} mod {n}"),
            Heuristic::Pattern { pattern, .. } => pattern.clone(),
            Heuristic::IdenticalOperands => String::new(),
            Heuristic::MultiResult { values } => {
                let v: Vec<String> = values.iter().map(usize::to_string).collect();
                format!("{{{}}}", v.join(","))
            }
        }
    }

    pub fn validate(&self, operator: Operator) -> Result<()> {
        let ok = match self {
            Heuristic::Range { lo, hi, .. } => lo < hi,
            Heuristic::Modulo { n, m, .. } => *n >= 1 && m < n,
            Heuristic::Pattern { pattern, .. } => {
                pattern.len() == 3 && pattern.chars().all(|c| c == '.' || c.is_ascii_digit())
            }
            Heuristic::IdenticalOperands => true,
            Heuristic::MultiResult { values } => {
                operator == Operator::Div && (2..=4).contains(&values.len())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid heuristic {self} for {}", operator.name())))
        }
    }

    pub fn matches_value(&self, value: usize) -> bool {
        match self {
            Heuristic::Range { lo, hi, .. } => (*lo..=*hi).contains(&value),
            Heuristic::Modulo { n, m, .. } => value % n == *m,
            Heuristic::Pattern { pattern, .. } => {
                let digits = format!("{value:03}");
                digits.len() == 3 && pattern.bytes().zip(digits.bytes()).all(|(p, d)| p == b'.' || p == d)
            }
            Heuristic::MultiResult { values } => values.contains(&value),
            Heuristic::IdenticalOperands => false,
        }
    }

    /// Whether a prompt satisfies the heuristic's condition.
    pub fn satisfied_by(&self, p: &Prompt) -> bool {
        match (self, self.target()) {
            (Heuristic::IdenticalOperands, _) => p.op1 == p.op2,
            (_, Some(t)) => self.matches_value(t.pick(p)),
            (_, None) => false,
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.target() {
            Some(t) if !matches!(self, Heuristic::MultiResult { .. }) => {
                write!(f, "{}:{}:{}", self.kind_name(), t.name(), self.params())
            }
            _ if self.params().is_empty() => f.write_str(self.kind_name()),
            _ => write!(f, "{}:{}", self.kind_name(), self.params()),
        }
    }
}

/// Largest value a target takes over the operator's valid prompts.
pub fn target_max(target: Target, operator: Operator, operand_max: usize, tokenizer: &Tokenizer) -> usize {
    match target {
        Target::Op1 | Target::Op2 => operand_max,
        Target::Result => valid_grid(operator, operand_max, tokenizer)
            .iter()
            .map(|p| p.result)
            .max()
            .unwrap_or(0),
    }
}

/// The catalog for one operator, in a fixed order: ranges, moduli and
/// patterns for each target, then identical operands. Multi-result sets are
/// found per neuron and are not listed here.
pub fn enumerate_heuristics(operator: Operator, operand_max: usize, tokenizer: &Tokenizer) -> Vec<Heuristic> {
    let mut out = Vec::new();
    let lengths: &[usize] = if operator == Operator::Div {
        &DIV_RANGE_LENGTHS
    } else {
        &RANGE_LENGTHS
    };
    for target in Target::ALL {
        let max = target_max(target, operator, operand_max, tokenizer);
        for &len in lengths {
            let stride = (len / 3).max(10);
            let mut lo = 0;
            while lo < max {
                out.push(Heuristic::Range { target, lo, hi: lo + len });
                lo += stride;
            }
        }
        for n in MODULI {
            out.extend((0..n).map(|m| Heuristic::Modulo { target, n, m }));
        }
        out.extend(patterns(max).into_iter().map(|pattern| Heuristic::Pattern { target, pattern }));
    }
    out.push(Heuristic::IdenticalOperands);
    out
}

/// Templates with one or two wildcards that match some value in `0..=max`.
fn patterns(max: usize) -> Vec<String> {
    let values: Vec<String> = (0..=max).map(|v| format!("{v:03}")).collect();
    let mut out = Vec::new();
    for wild in [[true, false, false], [false, true, false], [false, false, true], [true, true, false], [true, false, true], [false, true, true]] {
        let fixed = wild.iter().filter(|w| !**w).count();
        for code in 0..10usize.pow(fixed as u32) {
            let mut digits = format!("{code:0width$}", width = fixed).into_bytes().into_iter();
            let pattern: String = wild
                .iter()
                .map(|&w| if w { '.' } else { digits.next().expect("one digit per fixed slot") as char })
                .collect();
            let hit = values
                .iter()
                .any(|v| pattern.bytes().zip(v.bytes()).all(|(p, d)| p == b'.' || p == d));
            if hit {
                out.push(pattern);
            }
        }
    }
    out
}

/// Valid prompts of the operator satisfying the heuristic, in `(op1, op2)`
/// order.
pub fn associated_prompts(h: &Heuristic, operator: Operator, operand_max: usize, tokenizer: &Tokenizer) -> Result<Vec<Prompt>> {
    h.validate(operator)?;
    Ok(valid_grid(operator, operand_max, tokenizer)
        .into_iter()
        .filter(|p| h.satisfied_by(p))
        .collect())
}
