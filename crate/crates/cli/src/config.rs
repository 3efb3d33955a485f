// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one JSON document with a section per stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use heuristic_forge::data::DatasetConfig;
use heuristic_forge::heuristics::{TimelineConfig, DEFAULT_THRESHOLD, KNOCKOUT_KS};
use heuristic_forge::interp::EffectSpace;
use heuristic_forge::model::{MlpVariant, ModelConfig, NormVariant, PositionEncoding, PROMPT_LEN};
use heuristic_forge::seed;
use heuristic_forge::trainer::{ProbeConfig, TrainConfig};
use heuristic_forge::vocab::{Operator, Tokenizer};
use heuristic_forge::{ForgeError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Seed stream of each subcommand under the root seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Data = 0,
    Init = 1,
    Train = 2,
    Scan = 3,
    Faithfulness = 4,
    Probe = 5,
    Knockout = 6,
    Failure = 7,
    Timeline = 8,
    Eval = 9,
    Patterns = 10,
    Classify = 11,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub operand_max: usize,
    pub number_token_max: usize,
    pub prompts_per_operator: usize,
    pub holdout_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            operand_max: 100,
            number_token_max: 200,
            prompts_per_operator: 100,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub mlp_variant: MlpVariant,
    pub norm_variant: NormVariant,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        Self {
            n_layers: desk.n_layers,
            d_model: desk.d_model,
            n_heads: desk.n_heads,
            d_mlp: desk.d_mlp,
            mlp_variant: desk.mlp_variant,
            norm_variant: desk.norm_variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_every: usize,
    pub operator_mix: BTreeMap<Operator, f64>,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub lr_floor: f64,
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            checkpoint_every: d.checkpoint_every,
            operator_mix: d.operator_mix,
            weight_decay: d.weight_decay,
            warmup_steps: d.warmup_steps,
            lr_floor: d.lr_floor,
            grad_clip: d.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub operators: Vec<Operator>,
    /// Correct discovery prompts used by the scans.
    pub scan_prompts: usize,
    /// Correct evaluation prompts used by faithfulness.
    pub faithfulness_prompts: usize,
    pub effect_space: EffectSpace,
    /// Counterfactuals come from the prompt's own operator only.
    pub same_operator_counterfactuals: bool,
    /// Neurons kept per layer, as a percentage of the layer width.
    pub top_percent: f64,
    pub threshold: f64,
    /// Neurons per layer whose patterns are exported.
    pub pattern_neurons_per_layer: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            operators: Operator::ALL.to_vec(),
            scan_prompts: 100,
            faithfulness_prompts: 100,
            effect_space: EffectSpace::Probability,
            same_operator_counterfactuals: false,
            top_percent: 5.0,
            threshold: DEFAULT_THRESHOLD,
            pattern_neurons_per_layer: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub prompts: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    pub onset_threshold: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        Self {
            prompts: 2000,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            train_fraction: d.train_fraction,
            onset_threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnockoutSection {
    pub associated_prompts: usize,
    pub control_prompts: usize,
    /// Heuristics with fewer accepted neurons are not knocked out.
    pub min_neurons: usize,
    pub ks: Vec<usize>,
    pub prompts: usize,
    pub seeds: usize,
}

impl Default for KnockoutSection {
    fn default() -> Self {
        Self {
            associated_prompts: 100,
            control_prompts: 100,
            min_neurons: 5,
            ks: KNOCKOUT_KS.to_vec(),
            prompts: 50,
            seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureSection {
    pub per_class: usize,
}

impl Default for FailureSection {
    fn default() -> Self {
        Self { per_class: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimelineSection {
    pub operator: Operator,
    pub min_accuracy: f64,
    pub scan_pairs: usize,
    pub top_k: usize,
    pub faithfulness_prompts: usize,
    pub knockout_prompts: usize,
}

impl Default for TimelineSection {
    fn default() -> Self {
        let d = TimelineConfig::default();
        Self {
            operator: d.operator,
            min_accuracy: d.min_accuracy,
            scan_pairs: d.scan_pairs,
            top_k: d.top_k,
            faithfulness_prompts: d.faithfulness_prompts,
            knockout_prompts: d.knockout_prompts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
    pub probe: ProbeSection,
    pub knockout: KnockoutSection,
    pub failure: FailureSection,
    pub timeline: TimelineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            analysis: AnalysisSection::default(),
            probe: ProbeSection::default(),
            knockout: KnockoutSection::default(),
            failure: FailureSection::default(),
            timeline: TimelineSection::default(),
        }
    }
}

impl RunConfig {
    /// Read a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ForgeError::Parse {
            source_name: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// JSON with object keys in sorted order and no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stream_seed(&self, stream: Stream) -> u64 {
        seed::derive(self.seed, stream as u64)
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::arithmetic(self.data.number_token_max)
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            operand_max: self.data.operand_max,
            number_token_max: self.data.number_token_max,
            per_operator_counts: Operator::ALL
                .iter()
                .map(|&o| (o, self.data.prompts_per_operator))
                .collect(),
            holdout_fraction: self.data.holdout_fraction,
            seed: self.stream_seed(Stream::Data),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_mlp: m.d_mlp,
            mlp_variant: m.mlp_variant,
            vocab_size: self.tokenizer().vocab_size(),
            max_positions: PROMPT_LEN,
            norm_variant: m.norm_variant,
            position_encoding: PositionEncoding::LearnedAbsolute,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            checkpoint_every: t.checkpoint_every,
            seed: self.stream_seed(Stream::Train),
            operator_mix: t.operator_mix.clone(),
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            lr_floor: t.lr_floor,
            grad_clip: t.grad_clip,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            epochs: p.epochs,
            train_fraction: p.train_fraction,
            seed: self.stream_seed(Stream::Probe),
        }
    }

    pub fn timeline_config(&self) -> TimelineConfig {
        let t = &self.timeline;
        TimelineConfig {
            operator: t.operator,
            operand_max: self.data.operand_max,
            threshold: self.analysis.threshold,
            min_accuracy: t.min_accuracy,
            scan_pairs: t.scan_pairs,
            top_k: t.top_k,
            faithfulness_prompts: t.faithfulness_prompts,
            knockout_prompts: t.knockout_prompts,
            knockout_ks: self.knockout.ks.clone(),
            seed: self.stream_seed(Stream::Timeline),
        }
    }

    /// Neurons kept per layer for `top_percent`, at least one.
    pub fn top_k_per_layer(&self) -> usize {
        ((self.model.d_mlp as f64 * self.analysis.top_percent / 100.0).round() as usize).clamp(1, self.model.d_mlp)
    }
}
