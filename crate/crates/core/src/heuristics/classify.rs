// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron-to-heuristic classification by top-k overlap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::catalog::{enumerate_heuristics, Heuristic};
use crate::data::ground_truth;
use crate::error::{invalid, Result};
use crate::interp::{activation_patterns, logit_pattern, ActivationPattern2D, Grid, LogitPattern2D, NeuronWhitelist};
use crate::model::ModelBundle;
use crate::vocab::Operator;

/// Default acceptance threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.6;
/// Cells of the direct pattern inspected when looking for a multi-result set.
pub const MULTI_RESULT_TOP: usize = 100;
/// Share of those cells a multi-result set must cover.
pub const MULTI_RESULT_COVERAGE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub layer: usize,
    pub neuron: usize,
    pub operator: Operator,
    pub heuristic: Heuristic,
    pub score: f64,
    pub accepted: bool,
    /// No prompt satisfies the heuristic.
    pub flagged: bool,
}

/// Valid cells ordered by descending value, ties by ascending `(op1, op2)`.
pub fn ranked_cells(grid: &Grid) -> Vec<usize> {
    let mut cells: Vec<usize> = (0..grid.values.len()).filter(|&i| grid.mask[i]).collect();
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie.
    cells.sort_by(|&a, &b| (grid.values[b] + 0.0).total_cmp(&(grid.values[a] + 0.0)).then(a.cmp(&b)));
    cells
}

/// Rank of every cell in a ranking; masked cells get `usize::MAX`.
fn ranks(order: &[usize], len: usize) -> Vec<usize> {
    let mut r = vec![usize::MAX; len];
    for (i, &c) in order.iter().enumerate() {
        r[c] = i;
    }
    r
}

/// Elementwise activation × logit pattern.
pub fn direct_pattern(act: &ActivationPattern2D, logit: &LogitPattern2D) -> Grid {
    let values = act
        .grid
        .values
        .iter()
        .zip(&logit.grid.values)
        .map(|(a, l)| a * l)
        .collect();
    Grid {
        values,
        ..act.grid.clone()
    }
}

/// Cells of the grid whose prompts satisfy `h`.
pub fn associated_cells(h: &Heuristic, grid: &Grid, number_token_max: usize) -> Vec<usize> {
    let side = grid.side();
    (0..grid.values.len())
        .filter(|&i| grid.mask[i])
        .filter(|&i| {
            let (op1, op2) = (i / side, i % side);
            match ground_truth(op1, op2, grid.operator, number_token_max) {
                Some(result) => h.satisfied_by(&crate::data::Prompt {
                    op1,
                    op2,
                    operator: grid.operator,
                    result,
                    tokens: [0; 4],
                }),
                None => false,
            }
        })
        .collect()
}

/// Ranked cells of both patterns of one neuron.
struct Ranked {
    indirect: Vec<usize>,
    direct: Vec<usize>,
    direct_order: Vec<usize>,
}

impl Ranked {
    fn new(act: &ActivationPattern2D, logit: &LogitPattern2D) -> Self {
        let len = act.grid.values.len();
        let indirect_order = ranked_cells(&act.grid);
        let direct_order = ranked_cells(&direct_pattern(act, logit));
        Self {
            indirect: ranks(&indirect_order, len),
            direct: ranks(&direct_order, len),
            direct_order,
        }
    }

    fn score(&self, h: &Heuristic, cells: &[usize]) -> (f64, bool) {
        let k = cells.len();
        if k == 0 {
            return (0.0, true);
        }
        let rank = if h.is_direct() { &self.direct } else { &self.indirect };
        let hits = cells.iter().filter(|&&c| rank[c] < k).count();
        (hits as f64 / k as f64, false)
    }
}

/// Smallest set of 2 to 4 results covering at least the required share of
/// the top cells of the direct pattern, or `None`.
fn multi_result_set(direct_order: &[usize], grid: &Grid, number_token_max: usize) -> Option<Vec<usize>> {
    let top = &direct_order[..direct_order.len().min(MULTI_RESULT_TOP)];
    if top.is_empty() {
        return None;
    }
    let side = grid.side();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in top {
        let r = ground_truth(c / side, c % side, grid.operator, number_token_max)?;
        *counts.entry(r).or_insert(0) += 1;
    }
    let mut freq: Vec<(usize, usize)> = counts.into_iter().collect();
    freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let need = MULTI_RESULT_COVERAGE * top.len() as f64;
    if freq[0].1 as f64 >= need {
        return None;
    }
    let mut covered = freq[0].1;
    for size in 2..=4.min(freq.len()) {
        covered += freq[size - 1].1;
        if covered as f64 >= need {
            let mut values: Vec<usize> = freq[..size].iter().map(|f| f.0).collect();
            values.sort_unstable();
            return Some(values);
        }
    }
    None
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(invalid(format!("threshold must be positive, got {t}")));
    }
    Ok(())
}

/// Score every heuristic against one neuron's patterns.
pub fn classify_patterns(
    act: &ActivationPattern2D,
    logit: &LogitPattern2D,
    heuristics: &[(Heuristic, Vec<usize>)],
    number_token_max: usize,
    t: f64,
) -> Vec<ClassificationRecord> {
    let ranked = Ranked::new(act, logit);
    let record = |h: &Heuristic, cells: &[usize]| {
        let (score, flagged) = ranked.score(h, cells);
        ClassificationRecord {
            layer: act.layer,
            neuron: act.neuron,
            operator: act.grid.operator,
            heuristic: h.clone(),
            score,
            accepted: score >= t,
            flagged,
        }
    };
    let mut out: Vec<ClassificationRecord> = heuristics.iter().map(|(h, cells)| record(h, cells)).collect();
    if act.grid.operator == Operator::Div {
        if let Some(values) = multi_result_set(&ranked.direct_order, &act.grid, number_token_max) {
            let h = Heuristic::MultiResult { values };
            let cells = associated_cells(&h, &act.grid, number_token_max);
            out.push(record(&h, &cells));
        }
    }
    out
}

/// Score one neuron against one heuristic.
pub fn classify_neuron(
    model: &ModelBundle,
    layer: usize,
    neuron: usize,
    operator: Operator,
    h: &Heuristic,
    t: f64,
    operand_max: usize,
) -> Result<ClassificationRecord> {
    check_threshold(t)?;
    h.validate(operator)?;
    let act = activation_patterns(model, operator, operand_max, &[(layer, neuron)])?.remove(0);
    let logit = logit_pattern(model, layer, neuron, operator, operand_max)?;
    let max = model.tokenizer.number_token_max();
    let cells = associated_cells(h, &act.grid, max);
    let ranked = Ranked::new(&act, &logit);
    let (score, flagged) = ranked.score(h, &cells);
    Ok(ClassificationRecord {
        layer,
        neuron,
        operator,
        heuristic: h.clone(),
        score,
        accepted: score >= t,
        flagged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub operator: Operator,
    pub threshold: f64,
    pub records: Vec<ClassificationRecord>,
    /// Share of whitelisted neurons with at least one accepted heuristic.
    pub coverage: f64,
    pub neuron_count: usize,
}

impl Classification {
    pub fn accepted(&self) -> impl Iterator<Item = &ClassificationRecord> {
        self.records.iter().filter(|r| r.accepted)
    }
}

/// Classify every whitelisted neuron against the operator's catalog.
/// Records are ordered by layer, neuron, then catalog order.
///
/// Heuristics satisfied by at least a fraction `t` of the valid grid are left
/// out: any activation pattern reaches score `t` on them.
pub fn classify_all(
    model: &ModelBundle,
    whitelist: &NeuronWhitelist,
    operator: Operator,
    t: f64,
    operand_max: usize,
) -> Result<Classification> {
    check_threshold(t)?;
    let neurons: Vec<(usize, usize)> = whitelist
        .iter()
        .flat_map(|(&l, ns)| ns.iter().map(move |&n| (l, n)))
        .collect();
    let catalog = enumerate_heuristics(operator, operand_max, &model.tokenizer);
    let max = model.tokenizer.number_token_max();
    let acts = activation_patterns(model, operator, operand_max, &neurons)?;
    let Some(first) = acts.first() else {
        return Ok(Classification {
            operator,
            threshold: t,
            records: Vec::new(),
            coverage: 0.0,
            neuron_count: 0,
        });
    };
    let valid = first.grid.mask.iter().filter(|m| **m).count();
    let with_cells: Vec<(Heuristic, Vec<usize>)> = catalog
        .into_iter()
        .map(|h| {
            let cells = associated_cells(&h, &first.grid, max);
            (h, cells)
        })
        .filter(|(_, cells)| (cells.len() as f64) < t * valid as f64)
        .collect();
    let mut records = Vec::new();
    let mut covered = 0;
    for act in &acts {
        let logit = logit_pattern(model, act.layer, act.neuron, operator, operand_max)?;
        let recs = classify_patterns(act, &logit, &with_cells, max, t);
        covered += usize::from(recs.iter().any(|r| r.accepted));
        records.extend(recs);
    }
    Ok(Classification {
        operator,
        threshold: t,
        coverage: covered as f64 / acts.len() as f64,
        neuron_count: acts.len(),
        records,
    })
}
