// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand implementations. Every command reads the run directory laid
//! out below and writes its own subdirectory.
//!
//! ```text
//! data/                      prompt CSVs
//! checkpoints/step_NNNNNN.ckpt
//! train/  eval/  scan/  faithfulness/  probe/  patterns/
//! classify/  knockout/  failure/  timeline/
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use heuristic_forge::data::{
    counterfactual_pairs, filter_correct, generate_prompts, holdout_set, read_dataset, training_set, valid_grid,
    write_dataset, Prompt, Split,
};
use heuristic_forge::heuristics::{
    accepted_neurons, classify_all, failure_analysis, heuristic_timeline, knockout_by_heuristic,
    prompt_knockout_accuracy, Classification, Heuristic, KnockoutMode, KnockoutResult, PromptKnockoutSummary,
};
use heuristic_forge::interp::{
    activation_pattern, component_scan, faithfulness_from, logit_pattern, neuron_scan, normalized_logits,
    top_k_neurons, Circuit, EffectReport, Granularity, Grid, NeuronWhitelist,
};
use heuristic_forge::model::{load_checkpoint, mean_activations, save_checkpoint, ComponentRef, ModelBundle};
use heuristic_forge::seed;
use heuristic_forge::trainer::{evaluate_accuracy, probe_grid, train, AccuracyReport, ProbeGrid};
use heuristic_forge::vocab::Operator;
use heuristic_forge::{ForgeError, Result};
use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stream};
use crate::render::{render_file, PatternRow};
use crate::report::Stamp;

/// Paths and config shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

fn missing(path: &Path, hint: &str) -> ForgeError {
    ForgeError::InvalidArgument(format!("{} not found; {hint}", path.display()))
}

impl Context {
    fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.dir("data"))
    }

    fn load_data(&self) -> Result<BTreeMap<Operator, Split>> {
        let dir = self.data_dir();
        if !dir.is_dir() {
            return Err(missing(&dir, "run gen-data first"));
        }
        read_dataset(&dir, &self.cfg.tokenizer())
    }

    fn model_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.model {
            return Ok(p.clone());
        }
        checkpoints(&self.dir("checkpoints"))?
            .pop()
            .map(|(_, p)| p)
            .ok_or_else(|| missing(&self.dir("checkpoints"), "run train first"))
    }

    fn load_model(&self) -> Result<ModelBundle> {
        let path = self.model_path()?;
        if !path.is_file() {
            return Err(missing(&path, "run train first"));
        }
        load_checkpoint(&path)
    }

    fn operators(&self) -> &[Operator] {
        &self.cfg.analysis.operators
    }

    fn grid(&self, op: Operator) -> Vec<Prompt> {
        valid_grid(op, self.cfg.data.operand_max, &self.cfg.tokenizer())
    }

    /// Envelope `report` field of a JSON file written by an earlier command.
    fn read_report<T: DeserializeOwned>(&self, path: &Path, hint: &str) -> Result<T> {
        if !path.is_file() {
            return Err(missing(path, hint));
        }
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(serde_json::from_value(v["report"].take())?)
    }

    fn whitelist(&self, op: Operator) -> Result<WhitelistReport> {
        let path = self.dir("scan").join(format!("whitelist_{}.json", op.name()));
        self.read_report(&path, "run scan-neurons first")
    }

    fn classification(&self, op: Operator) -> Result<Classification> {
        let path = self.dir("classify").join(format!("{}.json", op.name()));
        Ok(self.read_report::<ClassifyReport>(&path, "run classify first")?.classification)
    }
}

/// Checkpoints in `dir` ordered by step.
pub fn checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.ckpt")
}

/// Up to `n` prompts drawn from `pool`, sorted.
fn sample(pool: &[Prompt], n: usize, seed: u64) -> Vec<Prompt> {
    let mut v: Vec<Prompt> = pool
        .choose_multiple(&mut seed::rng(seed), n.min(pool.len()))
        .copied()
        .collect();
    v.sort();
    v
}

fn op_seed(stream_seed: u64, op: Operator) -> u64 {
    seed::derive(stream_seed, op.index() as u64)
}

// ---- gen-data -------------------------------------------------------------

#[derive(Serialize)]
struct SplitCounts {
    discovery: usize,
    evaluation: usize,
    train: usize,
    holdout: usize,
}

pub fn gen_data(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("gen-data", &ctx.cfg, Stream::Data);
    let data = generate_prompts(&ctx.cfg.dataset())?;
    let dir = ctx.dir("data");
    fs::create_dir_all(&dir)?;
    write_dataset(&dir, &data)?;
    let counts: BTreeMap<Operator, SplitCounts> = data
        .iter()
        .map(|(op, s)| {
            let c = SplitCounts {
                discovery: s.discovery.len(),
                evaluation: s.evaluation.len(),
                train: s.train.len(),
                holdout: s.holdout.len(),
            };
            (*op, c)
        })
        .collect();
    stamp.write_json(&dir.join("report.json"), counts)?;
    println!("wrote {} operators to {}", data.len(), dir.display());
    Ok(())
}

// ---- train ----------------------------------------------------------------

#[derive(Serialize)]
struct TrainReport {
    steps: usize,
    final_loss: f64,
    checkpoint_steps: Vec<usize>,
    train_accuracy: AccuracyReport,
    holdout_accuracy: Option<AccuracyReport>,
}

pub fn train_cmd(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("train", &ctx.cfg, Stream::Train);
    let data = ctx.load_data()?;
    let train_set = training_set(&data);
    let model = ModelBundle::init(ctx.cfg.model_config(), ctx.cfg.tokenizer(), ctx.cfg.stream_seed(Stream::Init))?;
    let ckpt_dir = ctx.dir("checkpoints");
    if ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir)?;
    }
    fs::create_dir_all(&ckpt_dir)?;
    let outcome = train(model, &train_set, &ctx.cfg.train_config(), |step, m| {
        save_checkpoint(m, &ckpt_dir.join(checkpoint_name(step)))
    })?;
    stamp.write_csv(&ctx.dir("train").join("loss.csv"), &outcome.log)?;
    let holdout = holdout_set(&data);
    let report = TrainReport {
        steps: outcome.log.len(),
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.loss),
        checkpoint_steps: outcome.checkpoint_steps.clone(),
        train_accuracy: evaluate_accuracy(&outcome.model, &train_set)?,
        holdout_accuracy: if holdout.is_empty() {
            None
        } else {
            Some(evaluate_accuracy(&outcome.model, &holdout)?)
        },
    };
    if let Some(h) = &report.holdout_accuracy {
        for (op, a) in &h.per_operator {
            println!("holdout {} {:.4}", op.symbol(), a.accuracy);
        }
    }
    stamp.write_json(&ctx.dir("train").join("report.json"), report)
}

// ---- eval -----------------------------------------------------------------

pub fn eval(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("eval", &ctx.cfg, Stream::Eval);
    let model = ctx.load_model()?;
    let data = ctx.load_data()?;
    let mut report: BTreeMap<&str, AccuracyReport> = BTreeMap::new();
    let splits: [(&str, fn(&Split) -> &Vec<Prompt>); 4] = [
        ("discovery", |s| &s.discovery),
        ("evaluation", |s| &s.evaluation),
        ("train", |s| &s.train),
        ("holdout", |s| &s.holdout),
    ];
    for (name, pick) in splits {
        let prompts: Vec<Prompt> = data.values().flat_map(|s| pick(s).iter().copied()).collect();
        if prompts.is_empty() {
            continue;
        }
        let acc = evaluate_accuracy(&model, &prompts)?;
        for (op, a) in &acc.per_operator {
            println!("{name} {} {:.4}", op.symbol(), a.accuracy);
        }
        report.insert(name, acc);
    }
    if report.is_empty() {
        return Err(ForgeError::InvalidArgument("dataset holds no prompts".into()));
    }
    stamp.write_json(&ctx.dir("eval").join("report.json"), report)
}

// ---- scans ----------------------------------------------------------------

/// Scan prompts of `op` with their counterfactuals.
fn scan_pairs(ctx: &Context, model: &ModelBundle, data: &BTreeMap<Operator, Split>, op: Operator) -> Result<Vec<(Prompt, Prompt)>> {
    let a = &ctx.cfg.analysis;
    let discovery = |o: Operator| data.get(&o).map(|s| s.discovery.clone()).unwrap_or_default();
    let correct = filter_correct(model, &discovery(op))?;
    if correct.len() < 2 {
        return Err(ForgeError::InvalidArgument(format!(
            "fewer than two correct discovery prompts for {}",
            op.name()
        )));
    }
    let s = op_seed(ctx.cfg.stream_seed(Stream::Scan), op);
    let scan = sample(&correct, a.scan_prompts, seed::derive(s, 0));
    let pool = if a.same_operator_counterfactuals {
        correct
    } else {
        let mut all = Vec::new();
        for &o in ctx.operators() {
            all.extend(filter_correct(model, &discovery(o))?);
        }
        all
    };
    counterfactual_pairs(&scan, &pool, a.same_operator_counterfactuals, seed::derive(s, 1))
}

#[derive(Serialize)]
struct ComponentRow {
    kind: &'static str,
    layer: usize,
    head: Option<usize>,
    position: usize,
    mean: f64,
    flagged: usize,
}

fn component_rows(report: &EffectReport) -> Vec<ComponentRow> {
    report
        .entries
        .iter()
        .filter_map(|e| {
            let flagged = e.flagged.iter().filter(|f| **f).count();
            let (kind, layer, head, position) = match e.component {
                ComponentRef::AttnHead { layer, head, position } => ("attn_head", layer, Some(head), position),
                ComponentRef::MlpLayer { layer, position } => ("mlp", layer, None, position),
                _ => return None,
            };
            Some(ComponentRow {
                kind,
                layer,
                head,
                position,
                mean: e.mean,
                flagged,
            })
        })
        .collect()
}

pub fn scan_components(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("scan-components", &ctx.cfg, Stream::Scan);
    let model = ctx.load_model()?;
    let data = ctx.load_data()?;
    for &op in ctx.operators() {
        let pairs = scan_pairs(ctx, &model, &data, op)?;
        let space = ctx.cfg.analysis.effect_space;
        let mut rows = component_rows(&component_scan(&model, &pairs, Granularity::AttnHead, space)?);
        rows.extend(component_rows(&component_scan(&model, &pairs, Granularity::MlpLayer, space)?));
        stamp.write_csv(&ctx.dir("scan").join(format!("components_{}.csv", op.name())), rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct NeuronRow {
    layer: usize,
    neuron: usize,
    mean: f64,
    flagged: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhitelistReport {
    pub operator: Operator,
    pub k: usize,
    pub prompt_count: usize,
    pub whitelist: NeuronWhitelist,
    /// Kept neurons of each layer by descending mean effect.
    pub ranked: BTreeMap<usize, Vec<(usize, f64)>>,
}

pub fn scan_neurons(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("scan-neurons", &ctx.cfg, Stream::Scan);
    let model = ctx.load_model()?;
    let data = ctx.load_data()?;
    let k = ctx.cfg.top_k_per_layer();
    for &op in ctx.operators() {
        let pairs = scan_pairs(ctx, &model, &data, op)?;
        let report = neuron_scan(&model, &pairs, 0..model.config.n_layers, ctx.cfg.analysis.effect_space)?;
        let mut rows = Vec::with_capacity(report.entries.len());
        let mut means: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for e in &report.entries {
            if let ComponentRef::MlpNeuron { layer, neuron, .. } = e.component {
                rows.push(NeuronRow {
                    layer,
                    neuron,
                    mean: e.mean,
                    flagged: e.flagged.iter().filter(|f| **f).count(),
                });
                means.insert((layer, neuron), e.mean);
            }
        }
        let whitelist = top_k_neurons(&report, k, model.config.d_mlp)?;
        let ranked = whitelist
            .iter()
            .map(|(&l, ns)| {
                let mut v: Vec<(usize, f64)> = ns.iter().map(|&n| (n, means[&(l, n)])).collect();
                v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                (l, v)
            })
            .collect();
        let name = op.name();
        stamp.write_csv(&ctx.dir("scan").join(format!("neurons_{name}.csv")), rows)?;
        let wl = WhitelistReport {
            operator: op,
            k,
            prompt_count: pairs.len(),
            whitelist,
            ranked,
        };
        stamp.write_json(&ctx.dir("scan").join(format!("whitelist_{name}.json")), wl)?;
    }
    Ok(())
}

// ---- faithfulness ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaithfulnessSummary {
    pub operator: Operator,
    pub prompt_count: usize,
    pub neurons_per_layer: usize,
    /// First layer whose neurons are ablated: the probe onset layer, or 0
    /// when no layer reached the onset threshold.
    pub window_start: usize,
    pub full: f64,
    pub empty: f64,
    pub circuit: f64,
    pub circuit_clamped: f64,
    pub degenerate_prompts: usize,
}

pub fn faithfulness_cmd(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("faithfulness", &ctx.cfg, Stream::Faithfulness);
    let model = ctx.load_model()?;
    let data = ctx.load_data()?;
    let probe: ProbeGrid = ctx.read_report(&ctx.dir("probe").join("grid.json"), "run probe-grid first")?;
    let window_start = probe.onset_layer.unwrap_or(0);
    for &op in ctx.operators() {
        let wl = ctx.whitelist(op)?;
        let eval = data.get(&op).map(|s| s.evaluation.clone()).unwrap_or_default();
        let correct = filter_correct(&model, &eval)?;
        let s = op_seed(ctx.cfg.stream_seed(Stream::Faithfulness), op);
        let prompts = sample(&correct, ctx.cfg.analysis.faithfulness_prompts, s);
        if prompts.is_empty() {
            return Err(ForgeError::InvalidArgument(format!(
                "no correct evaluation prompts for {}",
                op.name()
            )));
        }
        let seqs: Vec<_> = ctx.grid(op).iter().map(|p| p.tokens).collect();
        let means = mean_activations(&model, &seqs)?;
        let nl_full = normalized_logits(&model, &prompts, &Circuit::full(&model), &means)?;
        let nl_empty = normalized_logits(&model, &prompts, &Circuit::empty(), &means)?;
        let window: NeuronWhitelist = wl.whitelist.range(window_start..).map(|(&l, ns)| (l, ns.clone())).collect();
        let circuit = Circuit::full_with_neurons(&model, window);
        let nl_circuit = normalized_logits(&model, &prompts, &circuit, &means)?;
        let full = faithfulness_from(nl_full.clone(), nl_full.clone(), nl_empty.clone())?;
        let empty = faithfulness_from(nl_empty.clone(), nl_full.clone(), nl_empty.clone())?;
        let f = faithfulness_from(nl_circuit, nl_full, nl_empty)?;
        let summary = FaithfulnessSummary {
            operator: op,
            prompt_count: prompts.len(),
            neurons_per_layer: wl.k,
            window_start,
            full: full.raw,
            empty: empty.raw,
            circuit: f.raw,
            circuit_clamped: f.clamped,
            degenerate_prompts: f.degenerate.iter().filter(|d| **d).count(),
        };
        println!("{} faithfulness {:.4}", op.symbol(), summary.circuit);
        stamp.write_json(&ctx.dir("faithfulness").join(format!("{}.json", op.name())), summary)?;
    }
    Ok(())
}

// ---- probe-grid -----------------------------------------------------------

pub fn probe_grid_cmd(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("probe-grid", &ctx.cfg, Stream::Probe);
    let model = ctx.load_model()?;
    let mut correct = Vec::new();
    for &op in ctx.operators() {
        correct.extend(filter_correct(&model, &ctx.grid(op))?);
    }
    let prompts = sample(&correct, ctx.cfg.probe.prompts, seed::derive(ctx.cfg.stream_seed(Stream::Probe), 99));
    let grid = probe_grid(&model, &prompts, &ctx.cfg.probe_config(), ctx.cfg.probe.onset_threshold)?;
    match grid.onset_layer {
        Some(l) => println!("probe onset layer {l}"),
        None => println!("probe onset layer none"),
    }
    stamp.write_json(&ctx.dir("probe").join("grid.json"), grid)
}

// ---- patterns -------------------------------------------------------------

fn pattern_rows(layer: usize, neuron: usize, op: Operator, grid: &Grid) -> Vec<PatternRow> {
    grid.cells()
        .map(|(op1, op2, value)| PatternRow {
            layer,
            neuron,
            operator: op.symbol().to_string(),
            op1,
            op2,
            value,
        })
        .collect()
}

pub fn patterns(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("patterns", &ctx.cfg, Stream::Patterns);
    let model = ctx.load_model()?;
    let max = ctx.cfg.data.operand_max;
    for &op in ctx.operators() {
        let wl = ctx.whitelist(op)?;
        let dir = ctx.dir("patterns").join(op.name());
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        for (&layer, ranked) in &wl.ranked {
            for &(neuron, _) in ranked.iter().take(ctx.cfg.analysis.pattern_neurons_per_layer) {
                let act = activation_pattern(&model, layer, neuron, op, max)?;
                let logit = logit_pattern(&model, layer, neuron, op, max)?;
                let base = format!("L{layer}_N{neuron}");
                stamp.write_csv(&dir.join(format!("{base}_activation.csv")), pattern_rows(layer, neuron, op, &act.grid))?;
                stamp.write_csv(&dir.join(format!("{base}_logit.csv")), pattern_rows(layer, neuron, op, &logit.grid))?;
            }
        }
    }
    Ok(())
}

// ---- classify -------------------------------------------------------------

#[derive(Serialize)]
struct RecordRow {
    layer: usize,
    neuron: usize,
    operator: String,
    kind: &'static str,
    target: &'static str,
    params: String,
    score: f64,
    accepted: bool,
    flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub accepted_by_kind: BTreeMap<String, usize>,
    pub classification: Classification,
}

pub fn classify(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("classify", &ctx.cfg, Stream::Classify);
    let model = ctx.load_model()?;
    let a = &ctx.cfg.analysis;
    for &op in ctx.operators() {
        let wl = ctx.whitelist(op)?;
        let c = classify_all(&model, &wl.whitelist, op, a.threshold, ctx.cfg.data.operand_max)?;
        let rows = c.records.iter().map(|r| RecordRow {
            layer: r.layer,
            neuron: r.neuron,
            operator: r.operator.symbol().to_string(),
            kind: r.heuristic.kind_name(),
            target: r.heuristic.target().map_or("", |t| t.name()),
            params: r.heuristic.params(),
            score: r.score,
            accepted: r.accepted,
            flagged: r.flagged,
        });
        stamp.write_csv(&ctx.dir("classify").join(format!("{}.csv", op.name())), rows)?;
        let mut accepted_by_kind = BTreeMap::new();
        for r in c.accepted() {
            *accepted_by_kind.entry(r.heuristic.kind_name().to_string()).or_insert(0) += 1;
        }
        println!(
            "{} coverage {:.4} accepted {}",
            op.symbol(),
            c.coverage,
            c.accepted().count()
        );
        let report = ClassifyReport {
            accepted_by_kind,
            classification: c,
        };
        stamp.write_json(&ctx.dir("classify").join(format!("{}.json", op.name())), report)?;
    }
    Ok(())
}

// ---- knockouts ------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeuristicKnockoutSummary {
    pub heuristic: Heuristic,
    pub neuron_count: usize,
    pub mean_associated_drop: f64,
    pub mean_control_drop: f64,
    pub runs: Vec<KnockoutResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeuristicKnockoutReport {
    pub operator: Operator,
    /// Heuristics with at least `min_neurons` accepted neurons and prompts on
    /// both sides.
    pub eligible: usize,
    /// Heuristics whose associated drop exceeds their control drop.
    pub associated_larger: usize,
    pub heuristics: Vec<HeuristicKnockoutSummary>,
}

pub fn knockout_heuristic(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("knockout-heuristic", &ctx.cfg, Stream::Knockout);
    let model = ctx.load_model()?;
    let k = &ctx.cfg.knockout;
    for &op in ctx.operators() {
        let c = ctx.classification(op)?;
        let correct = filter_correct(&model, &ctx.grid(op))?;
        let heuristics: BTreeSet<Heuristic> = c.accepted().map(|r| r.heuristic.clone()).collect();
        let s = op_seed(seed::derive(ctx.cfg.stream_seed(Stream::Knockout), 0), op);
        let mut summaries = Vec::new();
        for h in heuristics {
            let neurons = accepted_neurons(&c.records, &h);
            if neurons.len() < k.min_neurons {
                continue;
            }
            let runs = (0..k.seeds)
                .map(|i| {
                    let run_seed = seed::derive(s, i as u64);
                    knockout_by_heuristic(&model, op, &h, &c.records, &correct, k.associated_prompts, k.control_prompts, run_seed)
                })
                .collect::<Result<Vec<_>>>()?;
            if runs.iter().any(|r| r.associated_count == 0 || r.control_count == 0) {
                continue;
            }
            let mean = |f: fn(&KnockoutResult) -> f64| runs.iter().map(f).sum::<f64>() / runs.len().max(1) as f64;
            summaries.push(HeuristicKnockoutSummary {
                heuristic: h,
                neuron_count: neurons.len(),
                mean_associated_drop: mean(KnockoutResult::associated_drop),
                mean_control_drop: mean(KnockoutResult::control_drop),
                runs,
            });
        }
        let report = HeuristicKnockoutReport {
            operator: op,
            eligible: summaries.len(),
            associated_larger: summaries
                .iter()
                .filter(|s| s.mean_associated_drop > s.mean_control_drop)
                .count(),
            heuristics: summaries,
        };
        println!(
            "{} heuristic knockout {}/{} associated-larger",
            op.symbol(),
            report.associated_larger,
            report.eligible
        );
        stamp.write_json(&ctx.dir("knockout").join(format!("heuristic_{}.json", op.name())), report)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptKnockoutCell {
    pub k: usize,
    pub mode: KnockoutMode,
    pub mean_baseline: f64,
    pub mean_accuracy: f64,
    /// `mean_accuracy / mean_baseline`.
    pub ratio: f64,
    pub runs: Vec<PromptKnockoutSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptKnockoutReport {
    pub operator: Operator,
    pub cells: Vec<PromptKnockoutCell>,
}

pub fn knockout_prompt(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("knockout-prompt", &ctx.cfg, Stream::Knockout);
    let model = ctx.load_model()?;
    let k = &ctx.cfg.knockout;
    for &op in ctx.operators() {
        let c = ctx.classification(op)?;
        let correct = filter_correct(&model, &ctx.grid(op))?;
        let s = op_seed(seed::derive(ctx.cfg.stream_seed(Stream::Knockout), 1), op);
        let mut cells = Vec::new();
        for &kk in &k.ks {
            for mode in [KnockoutMode::Associated, KnockoutMode::RandomUnassociated] {
                let runs = (0..k.seeds)
                    .map(|i| {
                        let run_seed = seed::derive(s, i as u64);
                        let prompts = sample(&correct, k.prompts, seed::derive(run_seed, 0));
                        prompt_knockout_accuracy(&model, &prompts, &c.records, kk, mode, seed::derive(run_seed, 1))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let n = runs.len().max(1) as f64;
                let mean_baseline = runs.iter().map(|r| r.baseline).sum::<f64>() / n;
                let mean_accuracy = runs.iter().map(|r| r.accuracy).sum::<f64>() / n;
                println!(
                    "{} k={kk} {:?} accuracy {:.4} baseline {:.4}",
                    op.symbol(),
                    mode,
                    mean_accuracy,
                    mean_baseline
                );
                cells.push(PromptKnockoutCell {
                    k: kk,
                    mode,
                    mean_baseline,
                    mean_accuracy,
                    ratio: mean_accuracy / mean_baseline,
                    runs,
                });
            }
        }
        let report = PromptKnockoutReport { operator: op, cells };
        stamp.write_json(&ctx.dir("knockout").join(format!("prompt_{}.json", op.name())), report)?;
    }
    Ok(())
}

// ---- failure-analysis -----------------------------------------------------

pub fn failure(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("failure-analysis", &ctx.cfg, Stream::Failure);
    let model = ctx.load_model()?;
    for &op in ctx.operators() {
        let c = ctx.classification(op)?;
        let s = op_seed(ctx.cfg.stream_seed(Stream::Failure), op);
        let report = failure_analysis(&model, op, &c.records, &ctx.grid(op), ctx.cfg.failure.per_class, s)?;
        stamp.write_json(&ctx.dir("failure").join(format!("{}.json", op.name())), report)?;
    }
    Ok(())
}

// ---- timeline -------------------------------------------------------------

pub fn timeline(ctx: &Context) -> Result<()> {
    let stamp = Stamp::new("timeline", &ctx.cfg, Stream::Timeline);
    let list = checkpoints(&ctx.dir("checkpoints"))?;
    if list.is_empty() {
        return Err(missing(&ctx.dir("checkpoints"), "run train first"));
    }
    let models = list
        .iter()
        .map(|(step, path)| Ok((*step, load_checkpoint(path)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = heuristic_timeline(&models, &ctx.cfg.timeline_config())?;
    for e in &report.entries {
        match e.persistence {
            Some(p) => println!("step {} accuracy {:.4} persistence {p:.4}", e.step, e.accuracy),
            None => println!("step {} accuracy {:.4} skipped", e.step, e.accuracy),
        }
    }
    stamp.write_json(&ctx.dir("timeline").join("report.json"), report)
}

// ---- render ---------------------------------------------------------------

/// Render each input next to itself, or into `out` when given.
pub fn render(inputs: &[PathBuf], out: Option<&Path>) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(ForgeError::InvalidArgument("render needs at least one pattern file".into()));
    }
    let mut written = Vec::with_capacity(inputs.len());
    for input in inputs {
        let name = input.with_extension("svg");
        let target = match out {
            Some(dir) => dir.join(name.file_name().expect("input has a file name")),
            None => name,
        };
        render_file(input, &target)?;
        written.push(target);
    }
    Ok(written)
}
