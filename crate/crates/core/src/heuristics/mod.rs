// SPDX-License-Identifier: MIT OR Apache-2.0

//! Heuristic catalog, neuron classification, knockouts and the training
//! timeline.

mod catalog;
mod classify;
mod knockout;
mod timeline;

pub use catalog::{
    associated_prompts, enumerate_heuristics, target_max, Directness, Heuristic, Target, DIV_RANGE_LENGTHS, MODULI,
    RANGE_LENGTHS,
};
pub use classify::{
    associated_cells, classify_all, classify_neuron, classify_patterns, direct_pattern, ranked_cells, Classification,
    ClassificationRecord, DEFAULT_THRESHOLD, MULTI_RESULT_COVERAGE, MULTI_RESULT_TOP,
};
pub use knockout::{
    accepted_neurons, accuracy_with_zeroed, contribution_sum, failure_analysis, knockout_by_heuristic, knockout_by_prompt,
    prompt_knockout_accuracy, select_knockout_neurons, FailureClass, FailureReport, KnockoutMode, KnockoutResult,
    PromptKnockout, PromptKnockoutSummary, KNOCKOUT_KS,
};
pub use timeline::{
    accepted_pairs, heuristic_timeline, persistence, CheckpointEntry, HeuristicPairs, TimelineConfig, TimelineReport,
};
