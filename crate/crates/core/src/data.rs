// SPDX-License-Identifier: MIT OR Apache-2.0

//! Arithmetic prompts `op1 operator op2 =` with single-token operands and
//! results.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, ForgeError, Result};
use crate::model::{final_logits, InterventionSet, ModelBundle, PROMPT_LEN};
use crate::numerics::argmax;
use crate::seed;
use crate::vocab::{Operator, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub op1: usize,
    pub op2: usize,
    pub operator: Operator,
    pub result: usize,
    pub tokens: [usize; PROMPT_LEN],
}

impl Prompt {
    /// The prompt for `op1 operator op2`, or `None` when it is excluded.
    pub fn new(op1: usize, operator: Operator, op2: usize, tokenizer: &Tokenizer) -> Option<Self> {
        let max = tokenizer.number_token_max();
        if op1 > max || op2 > max {
            return None;
        }
        let result = ground_truth(op1, op2, operator, max)?;
        Some(Self {
            op1,
            op2,
            operator,
            result,
            tokens: [op1, tokenizer.operator(operator), op2, tokenizer.equals()],
        })
    }

    /// Token id of the correct answer.
    pub fn answer_token(&self) -> usize {
        self.result
    }
}

impl std::fmt::Display for Prompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}{}=", self.op1, self.operator, self.op2)
    }
}

/// Exact result, with division as floor division. `None` for negative
/// results, results above `number_token_max`, and division by zero.
pub fn ground_truth(op1: usize, op2: usize, operator: Operator, number_token_max: usize) -> Option<usize> {
    let r = match operator {
        Operator::Add => op1.checked_add(op2)?,
        Operator::Sub => op1.checked_sub(op2)?,
        Operator::Mul => op1.checked_mul(op2)?,
        Operator::Div => op1.checked_div(op2)?,
    };
    (r <= number_token_max).then_some(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub operand_max: usize,
    pub number_token_max: usize,
    pub per_operator_counts: BTreeMap<Operator, usize>,
    /// Share of each operator's grid kept out of training.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            operand_max: 100,
            number_token_max: 200,
            per_operator_counts: Operator::ALL.iter().map(|&o| (o, 100)).collect(),
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.operand_max > self.number_token_max {
            return Err(invalid("operand_max exceeds number_token_max"));
        }
        if self.per_operator_counts.is_empty() || self.per_operator_counts.values().any(|&c| c == 0) {
            return Err(invalid("per-operator counts must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(invalid("holdout fraction must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::arithmetic(self.number_token_max)
    }
}

/// All valid prompts of one operator in `(op1, op2)` order.
pub fn valid_grid(operator: Operator, operand_max: usize, tokenizer: &Tokenizer) -> Vec<Prompt> {
    let mut out = Vec::new();
    for op1 in 0..=operand_max {
        for op2 in 0..=operand_max {
            if let Some(p) = Prompt::new(op1, operator, op2, tokenizer) {
                out.push(p);
            }
        }
    }
    out
}

/// Prompt lists for one operator. Discovery and evaluation are disjoint
/// samples of the whole grid; train and holdout partition the grid.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub discovery: Vec<Prompt>,
    pub evaluation: Vec<Prompt>,
    pub train: Vec<Prompt>,
    pub holdout: Vec<Prompt>,
}

impl Split {
    fn lists(&self) -> [(&'static str, &Vec<Prompt>); 4] {
        [
            ("discovery", &self.discovery),
            ("evaluation", &self.evaluation),
            ("train", &self.train),
            ("holdout", &self.holdout),
        ]
    }
}

/// Training prompts of every operator in a dataset, sorted.
pub fn training_set(data: &BTreeMap<Operator, Split>) -> Vec<Prompt> {
    let mut out: Vec<Prompt> = data.values().flat_map(|s| s.train.iter().copied()).collect();
    out.sort();
    out
}

/// Held-out prompts of every operator in a dataset, sorted.
pub fn holdout_set(data: &BTreeMap<Operator, Split>) -> Vec<Prompt> {
    let mut out: Vec<Prompt> = data.values().flat_map(|s| s.holdout.iter().copied()).collect();
    out.sort();
    out
}

/// Sample `count` discovery and `count` evaluation prompts per operator,
/// without replacement from the valid grid, and split the grid into train
/// and holdout.
pub fn generate_prompts(cfg: &DatasetConfig) -> Result<BTreeMap<Operator, Split>> {
    cfg.validate()?;
    let tok = cfg.tokenizer();
    let mut out = BTreeMap::new();
    for (&op, &count) in &cfg.per_operator_counts {
        let grid = valid_grid(op, cfg.operand_max, &tok);
        if 2 * count > grid.len() {
            return Err(invalid(format!(
                "{} needs {} prompts but only {} are valid",
                op.name(),
                2 * count,
                grid.len()
            )));
        }
        let mut rng = seed::rng(seed::derive(cfg.seed, op.index() as u64));
        let picked: Vec<Prompt> = grid.choose_multiple(&mut rng, 2 * count).copied().collect();
        let (train, holdout) = train_holdout_split(&[op], cfg.operand_max, &tok, cfg.holdout_fraction, seed::derive(cfg.seed, 4))?;
        out.insert(
            op,
            Split {
                discovery: picked[..count].to_vec(),
                evaluation: picked[count..].to_vec(),
                train,
                holdout,
            },
        );
    }
    Ok(out)
}

/// Random prompt from `pool` whose result differs from `p`'s.
pub fn sample_counterfactual(p: &Prompt, pool: &[Prompt], seed: u64) -> Result<Prompt> {
    let eligible: Vec<&Prompt> = pool.iter().filter(|q| q.result != p.result).collect();
    if eligible.is_empty() {
        return Err(invalid(format!("no counterfactual with a result other than {}", p.result)));
    }
    let i = seed::rng(seed).gen_range(0..eligible.len());
    Ok(*eligible[i])
}

/// One counterfactual per prompt; sample `i` uses stream `i` of `seed`.
pub fn counterfactual_pairs(
    prompts: &[Prompt],
    pool: &[Prompt],
    same_operator: bool,
    seed: u64,
) -> Result<Vec<(Prompt, Prompt)>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = seed::derive(seed, i as u64);
            let cf = if same_operator {
                let own: Vec<Prompt> = pool.iter().filter(|q| q.operator == p.operator).copied().collect();
                sample_counterfactual(p, &own, s)?
            } else {
                sample_counterfactual(p, pool, s)?
            };
            Ok((*p, cf))
        })
        .collect()
}

/// Whether the model's top final-position logit is each prompt's answer.
pub fn correctness(model: &ModelBundle, prompts: &[Prompt]) -> Result<Vec<bool>> {
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    let seqs: Vec<[usize; PROMPT_LEN]> = prompts.iter().map(|p| p.tokens).collect();
    let logits = final_logits(model, &seqs, &InterventionSet::empty())?;
    Ok(prompts
        .iter()
        .enumerate()
        .map(|(i, p)| argmax(logits.row(i)) == p.answer_token())
        .collect())
}

/// Prompts the model completes correctly, in input order.
pub fn filter_correct(model: &ModelBundle, prompts: &[Prompt]) -> Result<Vec<Prompt>> {
    let ok = correctness(model, prompts)?;
    Ok(prompts.iter().zip(ok).filter(|(_, c)| *c).map(|(p, _)| *p).collect())
}

/// Shuffle every valid prompt of the given operators and hold out a fraction.
/// Returns `(train, holdout)`, each sorted.
pub fn train_holdout_split(
    operators: &[Operator],
    operand_max: usize,
    tokenizer: &Tokenizer,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<Prompt>, Vec<Prompt>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(invalid("holdout fraction must be in [0, 1)"));
    }
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for &op in operators {
        let mut grid = valid_grid(op, operand_max, tokenizer);
        grid.shuffle(&mut seed::rng(seed::derive(seed, op.index() as u64)));
        let n_hold = (grid.len() as f64 * holdout_fraction).round() as usize;
        holdout.extend_from_slice(&grid[..n_hold]);
        train.extend_from_slice(&grid[n_hold..]);
    }
    train.sort();
    holdout.sort();
    Ok((train, holdout))
}

#[derive(Serialize, Deserialize)]
struct Row {
    op1: usize,
    operator: String,
    op2: usize,
    result: usize,
    split: String,
}

/// Write one `<name>.csv` per operator with columns
/// `op1,operator,op2,result,split`.
pub fn write_dataset(dir: &Path, data: &BTreeMap<Operator, Split>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (op, split) in data {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", op.name())))?;
        for (name, prompts) in split.lists() {
            for p in prompts {
                w.serialize(Row {
                    op1: p.op1,
                    operator: op.symbol().to_string(),
                    op2: p.op2,
                    result: p.result,
                    split: name.to_string(),
                })?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Read every operator CSV present in `dir`, checking each row's result.
pub fn read_dataset(dir: &Path, tokenizer: &Tokenizer) -> Result<BTreeMap<Operator, Split>> {
    let mut out = BTreeMap::new();
    for op in Operator::ALL {
        let path = dir.join(format!("{}.csv", op.name()));
        if !path.exists() {
            continue;
        }
        let source_name = path.display().to_string();
        let mut split = Split::default();
        let mut reader = csv::Reader::from_path(&path)?;
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let bad = |detail: String| ForgeError::Parse {
                source_name: source_name.clone(),
                detail: format!("row {}: {detail}", i + 1),
            };
            let row = row.map_err(|e| bad(e.to_string()))?;
            if Operator::from_symbol(&row.operator) != Some(op) {
                return Err(bad(format!("operator '{}' in {} file", row.operator, op.name())));
            }
            let p = Prompt::new(row.op1, op, row.op2, tokenizer)
                .filter(|p| p.result == row.result)
                .ok_or_else(|| bad("result does not match ground truth".into()))?;
            match row.split.as_str() {
                "discovery" => split.discovery.push(p),
                "evaluation" => split.evaluation.push(p),
                "train" => split.train.push(p),
                "holdout" => split.holdout.push(p),
                other => return Err(bad(format!("unknown split '{other}'"))),
            }
        }
        out.insert(op, split);
    }
    if out.is_empty() {
        return Err(invalid(format!("no dataset files in {}", dir.display())));
    }
    Ok(out)
}
