//! Dialogue graphs of a multi-agent system: agents, directed message edges,
//! optional attack labels, topology generators and edge pruning.
//!
//! Edge convention: `A[i][j] = 1` means agent `j` sends its message to agent
//! `i`. Edges are stored sparsely as the sorted in-neighbour list of every
//! receiver so message passing costs O(N + M).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RANDOM_TOPOLOGY_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub id: usize,
    pub role: String,
    pub response: String,
    /// Opaque annotations (role, state, memory, plugins). Never read by the detector.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Agent {
    pub fn new(id: usize, role: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            id,
            role: role.into(),
            response: response.into(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Sparse binary adjacency with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    in_nbrs: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            in_nbrs: vec![Vec::new(); n],
        }
    }

    /// Builds from `(receiver, sender)` pairs. Duplicates collapse to one edge.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adj = Self::empty(n);
        for (receiver, sender) in edges {
            adj.insert(receiver, sender)?;
        }
        Ok(adj)
    }

    pub fn from_dense(dense: &[Vec<u8>]) -> Result<Self> {
        let n = dense.len();
        let mut adj = Self::empty(n);
        for (i, row) in dense.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "adjacency row {i} has length {}, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => adj.insert(i, j)?,
                    other => {
                        return Err(Error::InvalidParam(format!(
                            "adjacency entry [{i}][{j}] = {other} is not binary"
                        )))
                    }
                }
            }
        }
        Ok(adj)
    }

    fn insert(&mut self, receiver: usize, sender: usize) -> Result<()> {
        let n = self.len();
        if receiver >= n || sender >= n {
            return Err(Error::UnknownAgent(receiver.max(sender)));
        }
        if receiver == sender {
            return Err(Error::InvalidParam(format!("self-loop on agent {receiver}")));
        }
        let row = &mut self.in_nbrs[receiver];
        if let Err(pos) = row.binary_search(&sender) {
            row.insert(pos, sender);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.in_nbrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_nbrs.is_empty()
    }

    /// `A[receiver][sender]`.
    pub fn has_edge(&self, receiver: usize, sender: usize) -> bool {
        self.in_nbrs
            .get(receiver)
            .is_some_and(|row| row.binary_search(&sender).is_ok())
    }

    /// Agents that send to `receiver`, ascending.
    pub fn in_neighbors(&self, receiver: usize) -> &[usize] {
        &self.in_nbrs[receiver]
    }

    pub fn in_degree(&self, receiver: usize) -> usize {
        self.in_nbrs[receiver].len()
    }

    pub fn edge_count(&self) -> usize {
        self.in_nbrs.iter().map(Vec::len).sum()
    }

    /// `(receiver, sender)` pairs in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.in_nbrs
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        let n = self.len();
        let mut dense = vec![vec![0u8; n]; n];
        for (i, j) in self.edges() {
            dense[i][j] = 1;
        }
        dense
    }

    /// Zeroes row and column of every isolated agent.
    fn isolate(&mut self, ids: &BTreeSet<usize>) {
        for (i, row) in self.in_nbrs.iter_mut().enumerate() {
            if ids.contains(&i) {
                row.clear();
            } else {
                row.retain(|j| !ids.contains(j));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueGraph {
    pub graph_id: String,
    pub query: Option<String>,
    pub agents: Vec<Agent>,
    pub adjacency: Adjacency,
    /// `true` marks an attacked agent.
    pub labels: Option<Vec<bool>>,
    /// Vector-only graph: responses may be empty and attributes are supplied externally.
    pub synthetic: bool,
}

impl DialogueGraph {
    pub fn new(
        graph_id: impl Into<String>,
        query: Option<String>,
        agents: Vec<Agent>,
        adjacency: Adjacency,
        labels: Option<Vec<bool>>,
    ) -> Result<Self> {
        let graph = Self {
            graph_id: graph_id.into(),
            query,
            agents,
            adjacency,
            labels,
            synthetic: false,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn attacked_ids(&self) -> Vec<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
            .unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.agents.len();
        for (idx, agent) in self.agents.iter().enumerate() {
            if agent.id != idx {
                return Err(Error::schema(
                    format!("agents[{idx}].id"),
                    format!("expected dense id {idx}, found {}", agent.id),
                ));
            }
            if agent.response.is_empty() && !self.synthetic {
                return Err(Error::schema(
                    format!("agents[{idx}].response"),
                    "empty response outside synthetic-vector mode",
                ));
            }
        }
        if self.adjacency.len() != n {
            return Err(Error::schema(
                "edges",
                format!("adjacency covers {} agents, graph has {n}", self.adjacency.len()),
            ));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::schema(
                    "labels",
                    format!("{} labels for {n} agents", labels.len()),
                ));
            }
            if n > 0 && labels.iter().all(|&b| b) {
                return Err(Error::schema("labels", "every agent is labelled attacked"));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let raw: RawGraph = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::schema(path, e.into_inner().to_string())
        })?;
        raw.into_graph()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&RawGraph::from(self)).expect("graph serialization")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

/// On-disk form. Edges are `[receiver, sender]`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    graph_id: String,
    #[serde(default)]
    query: Option<String>,
    agents: Vec<Agent>,
    edges: Vec<[usize; 2]>,
    #[serde(default)]
    labels: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    synthetic: bool,
}

impl RawGraph {
    fn into_graph(self) -> Result<DialogueGraph> {
        let n = self.agents.len();
        let mut adjacency = Adjacency::empty(n);
        for (k, &[receiver, sender]) in self.edges.iter().enumerate() {
            adjacency
                .insert(receiver, sender)
                .map_err(|e| Error::schema(format!("edges[{k}]"), e.to_string()))?;
        }
        let graph = DialogueGraph {
            graph_id: self.graph_id,
            query: self.query,
            agents: self.agents,
            adjacency,
            labels: self.labels,
            synthetic: self.synthetic,
        };
        graph.validate()?;
        Ok(graph)
    }
}

impl From<&DialogueGraph> for RawGraph {
    fn from(g: &DialogueGraph) -> Self {
        Self {
            graph_id: g.graph_id.clone(),
            query: g.query.clone(),
            agents: g.agents.clone(),
            edges: g.adjacency.edges().map(|(i, j)| [i, j]).collect(),
            labels: g.labels.clone(),
            synthetic: g.synthetic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Chain,
    Tree,
    Star,
    Random,
}

impl std::str::FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chain" => Ok(Self::Chain),
            "tree" => Ok(Self::Tree),
            "star" => Ok(Self::Star),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidParam(format!("unknown topology `{other}`"))),
        }
    }
}

/// Generates a communication topology.
///
/// * `Chain`: `i -> i+1`.
/// * `Tree`: balanced binary tree, parent to child (`parent(i) = (i-1)/2`).
/// * `Star`: hub `0` talks both ways with every spoke.
/// * `Random`: every ordered pair independently with probability `p`,
///   resampled until each agent has an in-neighbour; after 100 failed
///   draws a chain backbone is added to the last draw.
pub fn generate_topology(kind: TopologyKind, n: usize, p: f64, seed: u64) -> Result<Adjacency> {
    if n < 2 {
        return Err(Error::InvalidSize(format!("topology needs at least 2 agents, got {n}")));
    }
    let mut adj = Adjacency::empty(n);
    match kind {
        TopologyKind::Chain => {
            for i in 0..n - 1 {
                adj.insert(i + 1, i)?;
            }
        }
        TopologyKind::Tree => {
            for child in 1..n {
                adj.insert(child, (child - 1) / 2)?;
            }
        }
        TopologyKind::Star => {
            for spoke in 1..n {
                adj.insert(spoke, 0)?;
                adj.insert(0, spoke)?;
            }
        }
        TopologyKind::Random => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidParam(format!("edge probability {p} outside (0, 1]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..RANDOM_TOPOLOGY_ATTEMPTS {
                adj = Adjacency::empty(n);
                for i in 0..n {
                    for j in 0..n {
                        if i != j && rng.random::<f64>() < p {
                            adj.insert(i, j)?;
                        }
                    }
                }
                if (0..n).all(|i| adj.in_degree(i) > 0) {
                    return Ok(adj);
                }
            }
            for i in 0..n - 1 {
                adj.insert(i + 1, i)?;
            }
        }
    }
    Ok(adj)
}

/// Removes every inward and outward edge of the flagged agents. Agents stay
/// in place (isolated) so ids and labels remain stable.
pub fn prune_agents(graph: &DialogueGraph, flagged: &BTreeSet<usize>) -> Result<DialogueGraph> {
    if let Some(&bad) = flagged.iter().find(|&&id| id >= graph.len()) {
        return Err(Error::UnknownAgent(bad));
    }
    let mut pruned = graph.clone();
    pruned.adjacency.isolate(flagged);
    Ok(pruned)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "trigger")]
    TriggerPhrase,
    #[serde(rename = "shift")]
    EmbeddingShift,
}

/// Attack description, stored as the scenario JSON file.
///
/// Trigger attacks take their payload text from the built-in phrase bank by
/// index (`phrase_ids`, one per attacked agent, or drawn from `seed` when
/// absent). Shift attacks add a random direction of length `magnitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub kind: AttackKind,
    pub attacked_ids: Vec<usize>,
    #[serde(default)]
    pub magnitude: Option<f64>,
    #[serde(default)]
    pub phrase_ids: Option<Vec<usize>>,
    pub seed: u64,
}

impl AttackScenario {
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &id in &self.attacked_ids {
            if id >= n_agents {
                return Err(Error::UnknownAgent(id));
            }
            if !seen.insert(id) {
                return Err(Error::InvalidParam(format!("agent {id} attacked twice")));
            }
        }
        match self.kind {
            AttackKind::TriggerPhrase => {
                if let Some(ids) = &self.phrase_ids {
                    if ids.len() != self.attacked_ids.len() {
                        return Err(Error::schema(
                            "phrase_ids",
                            "need exactly one phrase per attacked agent",
                        ));
                    }
                }
            }
            AttackKind::EmbeddingShift => match self.magnitude {
                Some(m) if m.is_finite() && m >= 0.0 => {}
                _ => {
                    return Err(Error::schema(
                        "magnitude",
                        "shift attacks need a finite non-negative magnitude",
                    ))
                }
            },
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::schema(path, e.into_inner().to_string())
        })
    }
}
