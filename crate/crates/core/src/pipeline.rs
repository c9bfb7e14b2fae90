//! End-to-end orchestration shared by the CLI and the bindings.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{detect, ScoreReport};
use crate::embed::{attribute_graph, AttributedGraph, EmbedderSpec};
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::graph::{AttackKind, DialogueGraph};
use crate::metrics::auroc;
use crate::simulator::{asr_at, item_seed, generate_corpus, inject_attack, propagate, random_scenario, CorpusConfig, PropagationConfig, INJECTED_TOKENS_KEY};
use crate::trainer::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestSplitConfig {
    pub n_graphs: usize,
    pub attackers_per_graph: usize,
    pub seed: u64,
}

impl Default for TestSplitConfig {
    fn default() -> Self {
        Self {
            n_graphs: 50,
            attackers_per_graph: 2,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub embedder: EmbedderSpec,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub test_split: TestSplitConfig,
    pub propagation: PropagationConfig,
    pub budget: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            embedder: EmbedderSpec::hashing(64, 0),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            test_split: TestSplitConfig::default(),
            propagation: PropagationConfig::default(),
            budget: 3,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        serde_path_to_error::deserialize(value).map_err(|e| Error::schema(e.path().to_string(), e.inner().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Unattacked training graphs and a labelled trigger-attacked test split.
/// The test corpus reuses the corpus settings with its own seed.
pub fn simulate_split(cfg: &PipelineConfig) -> Result<(Vec<DialogueGraph>, Vec<DialogueGraph>)> {
    let train_cfg = CorpusConfig {
        id_prefix: "train-".into(),
        ..cfg.corpus.clone()
    };
    let train = generate_corpus(&train_cfg)?;
    let test_cfg = CorpusConfig {
        n_graphs: cfg.test_split.n_graphs,
        seed: cfg.test_split.seed,
        id_prefix: "test-".into(),
        ..cfg.corpus.clone()
    };
    let test = generate_corpus(&test_cfg)?
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let scenario = random_scenario(
                AttackKind::TriggerPhrase,
                g.len(),
                cfg.test_split.attackers_per_graph,
                None,
                item_seed(cfg.test_split.seed, i),
            )?;
            inject_attack(g, &scenario)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

/// Reads every `*.json` file of `dir` as a graph, ordered by file name.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<DialogueGraph>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|ext| ext == "json") && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(DialogueGraph::load).collect()
}

/// Writes `{graph_id}.json` per graph, creating `dir` if needed.
pub fn save_corpus(dir: impl AsRef<Path>, graphs: &[DialogueGraph]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for g in graphs {
        g.save(dir.join(format!("{}.json", g.graph_id)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSidecar {
    pub train_config: TrainConfig,
    pub embedder: EmbedderSpec,
    pub epoch_losses: Vec<f64>,
    pub grad_check: Option<f64>,
}

pub fn train_corpus(graphs: &[DialogueGraph], cfg: &PipelineConfig) -> Result<(ModelParams, TrainReport, TrainSidecar)> {
    let (params, report) = train(graphs, &cfg.embedder, &cfg.train)?;
    let sidecar = TrainSidecar {
        train_config: cfg.train.clone(),
        embedder: cfg.embedder.clone(),
        epoch_losses: report.epoch_losses.clone(),
        grad_check: report.grad_check,
    };
    Ok((params, report, sidecar))
}

pub fn attribute_all(graphs: &[DialogueGraph], spec: &EmbedderSpec) -> Result<Vec<AttributedGraph>> {
    let embedder = spec.build()?;
    graphs.iter().map(|g| attribute_graph(g, embedder.as_ref())).collect()
}

pub fn detect_all(graphs: &[DialogueGraph], spec: &EmbedderSpec, params: &ModelParams, budget: usize) -> Result<Vec<ScoreReport>> {
    if params.dim() != spec.dim {
        return Err(Error::DimMismatch {
            expected: params.dim(),
            found: spec.dim,
        });
    }
    attribute_all(graphs, spec)?.iter().map(|a| detect(a, params, budget)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrByRound {
    pub no_defense: BTreeMap<usize, f64>,
    pub defense: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub corpus: u64,
    pub test_split: u64,
    pub train: u64,
    pub embedder: u64,
    pub propagation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Pooled over all agents of all graphs.
    pub auroc: Option<f64>,
    pub auroc_reason: Option<String>,
    pub per_graph_auroc: Vec<Option<f64>>,
    pub asr_by_round: AsrByRound,
    pub explanation_hit_rate: Option<f64>,
    pub budget: usize,
    pub reports: Vec<ScoreReport>,
    pub seeds: Seeds,
    pub checkpoint_hash: String,
    pub config_hash: String,
}

impl EvalSummary {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialises")
    }
}

fn labels_of(graph: &DialogueGraph) -> Result<&[bool]> {
    graph
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidGraph(format!("graph `{}` has no labels", graph.graph_id)))
}

/// Pooled AUROC of fused scores, with the reason when it is undefined.
pub fn pooled_auroc(graphs: &[DialogueGraph], reports: &[ScoreReport]) -> Result<(Option<f64>, Option<String>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (g, r) in graphs.iter().zip(reports) {
        scores.extend_from_slice(&r.fused);
        labels.extend_from_slice(labels_of(g)?);
    }
    match auroc(&scores, &labels) {
        Ok(v) => Ok((Some(v), None)),
        Err(Error::UndefinedMetric(reason)) => Ok((None, Some(reason))),
        Err(e) => Err(e),
    }
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Among agents both attacked and flagged, the fraction with an injected
/// token among their `k` highest explanation scores. `None` if no agent
/// qualifies.
pub fn explanation_hit_rate(graphs: &[DialogueGraph], reports: &[ScoreReport], k: usize) -> Result<Option<f64>> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (g, r) in graphs.iter().zip(reports) {
        let labels = labels_of(g)?;
        for &agent in &r.flagged {
            if !labels[agent] {
                continue;
            }
            total += 1;
            let injected: usize = g.agents[agent]
                .metadata
                .get(INJECTED_TOKENS_KEY)
                .and_then(|v| v.parse().ok())
                .unwrap_or(0);
            let n_tokens = r.tokens[agent].len();
            let first_injected = n_tokens.saturating_sub(injected);
            if top_k(&r.token_expl[agent], k).iter().any(|&j| j >= first_injected) {
                hits += 1;
            }
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Paired ASR simulation: every graph is propagated once without and once
/// with the detector's flags pruned, sharing the draws of `item_seed(seed, i)`.
pub fn paired_asr(graphs: &[DialogueGraph], reports: &[ScoreReport], prop: &PropagationConfig) -> Result<AsrByRound> {
    let mut no_defense = BTreeMap::new();
    let mut defense = BTreeMap::new();
    for (i, (g, r)) in graphs.iter().zip(reports).enumerate() {
        let cfg = PropagationConfig {
            seed: item_seed(prop.seed, i),
            ..prop.clone()
        };
        let open = propagate(g, &BTreeSet::new(), &cfg)?;
        let flagged: BTreeSet<usize> = r.flagged.iter().copied().collect();
        let guarded = propagate(g, &flagged, &cfg)?;
        for round in 0..=prop.rounds {
            *no_defense.entry(round).or_insert(0.0) += asr_at(&open, round, g.len())?;
            *defense.entry(round).or_insert(0.0) += asr_at(&guarded, round, g.len())?;
        }
    }
    let n = graphs.len().max(1) as f64;
    no_defense.values_mut().for_each(|v| *v /= n);
    defense.values_mut().for_each(|v| *v /= n);
    Ok(AsrByRound { no_defense, defense })
}

pub fn evaluate(graphs: &[DialogueGraph], params: &ModelParams, cfg: &PipelineConfig) -> Result<EvalSummary> {
    if graphs.is_empty() {
        return Err(Error::InsufficientData("no test graphs".into()));
    }
    let reports = detect_all(graphs, &cfg.embedder, params, cfg.budget)?;
    let (pooled, reason) = pooled_auroc(graphs, &reports)?;
    let per_graph_auroc = graphs
        .iter()
        .zip(&reports)
        .map(|(g, r)| Ok(auroc(&r.fused, labels_of(g)?).ok()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary {
        auroc: pooled,
        auroc_reason: reason,
        per_graph_auroc,
        asr_by_round: paired_asr(graphs, &reports, &cfg.propagation)?,
        explanation_hit_rate: explanation_hit_rate(graphs, &reports, 5)?,
        budget: cfg.budget,
        reports,
        seeds: Seeds {
            corpus: cfg.corpus.seed,
            test_split: cfg.test_split.seed,
            train: cfg.train.seed,
            embedder: cfg.embedder.seed,
            propagation: cfg.propagation.seed,
        },
        checkpoint_hash: sha256_hex(params.to_json_string().as_bytes()),
        config_hash: cfg.hash(),
    })
}
