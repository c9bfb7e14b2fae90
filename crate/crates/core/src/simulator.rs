//! Synthetic corpora, attack injection and misinformation propagation.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::{tokenize, AttributedGraph};
use crate::error::{Error, Result};
use crate::graph::{generate_topology, prune_agents, Agent, AttackKind, AttackScenario, DialogueGraph, TopologyKind};

const THEMES_ASSET: &str = include_str!("../assets/themes.txt");
const PHRASES_ASSET: &str = include_str!("../assets/trigger_phrases.txt");

/// Metadata key recording how many trailing tokens of a response were injected.
pub const INJECTED_TOKENS_KEY: &str = "injected_token_count";

const MIN_THEME_TOKENS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub name: String,
    pub tokens: Vec<String>,
}

fn asset_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Built-in theme bank.
pub fn builtin_themes() -> Vec<Theme> {
    asset_lines(THEMES_ASSET)
        .map(|line| {
            let (name, tokens) = line.split_once(':').expect("theme asset line has a name");
            Theme {
                name: name.trim().to_string(),
                tokens: tokens.split_whitespace().map(str::to_string).collect(),
            }
        })
        .collect()
}

/// Built-in trigger phrases used as attack payloads.
pub fn trigger_phrases() -> Vec<&'static str> {
    asset_lines(PHRASES_ASSET).collect()
}

fn default_topologies() -> Vec<TopologyKind> {
    vec![TopologyKind::Chain, TopologyKind::Tree, TopologyKind::Star, TopologyKind::Random]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_graphs: usize,
    pub n_agents: usize,
    /// Each graph picks one of these at random.
    pub topologies: Vec<TopologyKind>,
    /// Edge probability for random topologies.
    pub p: f64,
    /// `None` selects the built-in bank.
    pub theme_bank: Option<Vec<Theme>>,
    /// Inclusive bounds on response length.
    pub tokens_per_response: (usize, usize),
    /// Token `k` of a theme is drawn with weight `1 / (k + 1)^s`; 0 is uniform.
    pub zipf_exponent: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_graphs: 200,
            n_agents: 10,
            topologies: default_topologies(),
            p: 0.3,
            theme_bank: None,
            tokens_per_response: (8, 12),
            zipf_exponent: 0.0,
            seed: 0,
            id_prefix: "g".into(),
        }
    }
}

impl CorpusConfig {
    pub fn themes(&self) -> Vec<Theme> {
        self.theme_bank.clone().unwrap_or_else(builtin_themes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::InvalidSize(format!("{} agents per graph", self.n_agents)));
        }
        if self.topologies.is_empty() {
            return Err(Error::InvalidParam("no topology kinds given".into()));
        }
        let (lo, hi) = self.tokens_per_response;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidParam(format!("tokens per response range {lo}..={hi}")));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::InvalidParam(format!("zipf exponent {}", self.zipf_exponent)));
        }
        let themes = self.themes();
        if themes.is_empty() {
            return Err(Error::InvalidParam("empty theme bank".into()));
        }
        if let Some(t) = themes.iter().find(|t| t.tokens.len() < MIN_THEME_TOKENS) {
            return Err(Error::InvalidParam(format!(
                "theme `{}` has {} tokens, need at least {MIN_THEME_TOKENS}",
                t.name,
                t.tokens.len()
            )));
        }
        Ok(())
    }
}

/// Seed of item `index` under base `seed`: the base is scrambled once, then
/// XORed with the index. Plain `seed ^ index` would make bases `s` and
/// `s ^ 1` produce the same items in swapped order.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    ChaCha8Rng::seed_from_u64(seed).next_u64() ^ index as u64
}

/// Index of the theme drawn for graph `index`, without building the graph.
pub fn graph_theme(cfg: &CorpusConfig, index: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, index));
    rng.random_range(0..cfg.themes().len())
}

fn generate_one(cfg: &CorpusConfig, themes: &[Theme], index: usize) -> Result<DialogueGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, index));
    let theme = &themes[rng.random_range(0..themes.len())];
    let kind = *cfg.topologies.choose(&mut rng).expect("validated non-empty");
    let adjacency = generate_topology(kind, cfg.n_agents, cfg.p, rng.random())?;
    let (lo, hi) = cfg.tokens_per_response;
    let weights = (0..theme.tokens.len()).map(|k| (k as f64 + 1.0).powf(-cfg.zipf_exponent));
    let pick = WeightedIndex::new(weights).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let agents = (0..cfg.n_agents)
        .map(|id| {
            let len = rng.random_range(lo..=hi);
            let words: Vec<&str> = (0..len).map(|_| theme.tokens[pick.sample(&mut rng)].as_str()).collect();
            Agent::new(id, "agent", words.join(" "))
        })
        .collect();
    DialogueGraph::new(
        format!("{}{:04}", cfg.id_prefix, index),
        Some(theme.name.clone()),
        agents,
        adjacency,
        None,
    )
}

/// Unlabelled graphs; graph `i` is generated from `item_seed(seed, i)`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<DialogueGraph>> {
    cfg.validate()?;
    let themes = cfg.themes();
    (0..cfg.n_graphs).map(|i| generate_one(cfg, &themes, i)).collect()
}

fn set_labels(graph: &mut DialogueGraph, attacked: &[usize]) {
    let mut labels = graph.labels.clone().unwrap_or_else(|| vec![false; graph.len()]);
    for &id in attacked {
        labels[id] = true;
    }
    graph.labels = Some(labels);
}

/// Applies a scenario to the graph text and sets labels. Trigger attacks
/// append a payload phrase; shift attacks only label here and act on the
/// attributes through [`shift_attributes`].
pub fn inject_attack(graph: &DialogueGraph, scenario: &AttackScenario) -> Result<DialogueGraph> {
    scenario.validate(graph.len())?;
    let mut out = graph.clone();
    if scenario.kind == AttackKind::TriggerPhrase {
        let bank = trigger_phrases();
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        for (k, &id) in scenario.attacked_ids.iter().enumerate() {
            let phrase_id = match &scenario.phrase_ids {
                Some(ids) => ids[k],
                None => rng.random_range(0..bank.len()),
            };
            let phrase = bank
                .get(phrase_id)
                .ok_or_else(|| Error::InvalidParam(format!("phrase id {phrase_id} outside the bank")))?;
            let agent = &mut out.agents[id];
            agent.response = if agent.response.is_empty() {
                phrase.to_string()
            } else {
                format!("{} {}", agent.response, phrase)
            };
            let previous: usize = agent.metadata.get(INJECTED_TOKENS_KEY).and_then(|v| v.parse().ok()).unwrap_or(0);
            agent
                .metadata
                .insert(INJECTED_TOKENS_KEY.into(), (previous + tokenize(phrase).len()).to_string());
        }
    }
    set_labels(&mut out, &scenario.attacked_ids);
    out.validate()?;
    Ok(out)
}

/// Adds `magnitude * u` (one seeded unit direction `u`) to the sentence and
/// token attributes of every attacked agent, and labels them.
pub fn shift_attributes(attr: &AttributedGraph, scenario: &AttackScenario) -> Result<AttributedGraph> {
    if scenario.kind != AttackKind::EmbeddingShift {
        return Err(Error::InvalidParam("shift_attributes needs a shift scenario".into()));
    }
    scenario.validate(attr.len())?;
    let magnitude = scenario.magnitude.expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let dir: Array1<f64> = (0..attr.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let shift = &dir * (magnitude / dir.dot(&dir).sqrt());
    let mut out = attr.clone();
    for &id in &scenario.attacked_ids {
        let mut row = out.sentence_attrs.row_mut(id);
        row += &shift;
        for mut tok in out.token_attrs[id].rows_mut() {
            tok += &shift;
        }
    }
    set_labels(&mut out.graph, &scenario.attacked_ids);
    out.graph.validate()?;
    Ok(out)
}

/// Random scenario attacking `count` distinct agents.
pub fn random_scenario(kind: AttackKind, n_agents: usize, count: usize, magnitude: Option<f64>, seed: u64) -> Result<AttackScenario> {
    if count >= n_agents {
        return Err(Error::InvalidParam(format!("{count} attackers among {n_agents} agents")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = rand::seq::index::sample(&mut rng, n_agents, count).into_vec();
    ids.sort_unstable();
    Ok(AttackScenario {
        kind,
        attacked_ids: ids,
        magnitude,
        phrase_ids: None,
        seed: rng.random(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub rounds: usize,
    pub p_infect: f64,
    pub seed: u64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            p_infect: 0.5,
            seed: 0,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidParam("at least one propagation round".into()));
        }
        if !(0.0..=1.0).contains(&self.p_infect) {
            return Err(Error::InvalidParam(format!("infection probability {}", self.p_infect)));
        }
        Ok(())
    }
}

/// Compromised sets after rounds `0..=rounds` (entry 0 holds the attackers).
///
/// Defended agents are pruned first. In every round each agent consumes one
/// uniform draw, in id order, whether or not it can be infected, so runs
/// with different defenses share randomness.
pub fn propagate(graph: &DialogueGraph, defense_flagged: &BTreeSet<usize>, prop: &PropagationConfig) -> Result<Vec<BTreeSet<usize>>> {
    prop.validate()?;
    let labels = graph
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidGraph(format!("graph `{}` has no labels", graph.graph_id)))?;
    let pruned = prune_agents(graph, defense_flagged)?;
    let n = graph.len();
    let mut compromised: Vec<bool> = labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(prop.seed);
    let mut sets = vec![to_set(&compromised)];
    for _ in 0..prop.rounds {
        let draws: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let next: Vec<bool> = (0..n)
            .map(|i| {
                if compromised[i] {
                    return true;
                }
                let k = pruned.adjacency.in_neighbors(i).iter().filter(|&&j| compromised[j]).count();
                k > 0 && draws[i] < 1.0 - (1.0 - prop.p_infect).powi(k as i32)
            })
            .collect();
        compromised = next;
        sets.push(to_set(&compromised));
    }
    Ok(sets)
}

fn to_set(flags: &[bool]) -> BTreeSet<usize> {
    flags.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i).collect()
}

/// Fraction of the `n` agents compromised after round `r`.
pub fn asr_at(sets: &[BTreeSet<usize>], r: usize, n: usize) -> Result<f64> {
    let set = sets
        .get(r)
        .ok_or_else(|| Error::InvalidParam(format!("round {r} beyond the {} simulated", sets.len().saturating_sub(1))))?;
    if n == 0 {
        return Err(Error::InvalidSize("zero agents".into()));
    }
    Ok(set.len() as f64 / n as f64)
}
