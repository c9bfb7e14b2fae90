//! Bi-level node attributes: one sentence vector per agent response and one
//! vector per token of that response.
//!
//! Two backends sit behind [`Embedder`]: a deterministic hashing embedder
//! (unit-norm Gaussian direction per token) for offline use, and a client for
//! a remote embedding service speaking `POST {endpoint}/embed`.

use std::time::Duration;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DialogueGraph;

pub const EMPTY_TOKEN: &str = "<empty>";
pub const DEFAULT_DIM: usize = 384;

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2026}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{00A1}'
        )
}

/// Splits on whitespace, then peels leading and trailing punctuation off each
/// chunk, one token per punctuation character. Case is preserved. Empty input
/// yields `["<empty>"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        while start < chars.len() && is_punct(chars[start]) {
            start += 1;
        }
        if start == chars.len() {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let mut end = chars.len();
        while end > start && is_punct(chars[end - 1]) {
            end -= 1;
        }
        tokens.extend(chars[..start].iter().map(|c| c.to_string()));
        tokens.push(chars[start..end].iter().collect());
        tokens.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    if tokens.is_empty() {
        tokens.push(EMPTY_TOKEN.to_string());
    }
    tokens
}

/// FNV-1a, 64 bit.
fn hash64(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hashing,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    pub endpoint: Option<String>,
    pub batch_size: usize,
    pub timeout_secs: f64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hashing,
            dim: DEFAULT_DIM,
            seed: 0,
            endpoint: None,
            batch_size: 64,
            timeout_secs: 30.0,
        }
    }
}

impl EmbedderSpec {
    pub fn hashing(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            ..Self::default()
        }
    }

    pub fn remote(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            kind: EmbedderKind::Remote,
            dim,
            endpoint: Some(endpoint.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidParam(format!("embedding dim {} < 2", self.dim)));
        }
        let has_endpoint = self.endpoint.as_deref().is_some_and(|e| !e.is_empty());
        match self.kind {
            EmbedderKind::Hashing if has_endpoint => Err(Error::InvalidParam(
                "hashing embedder takes no endpoint".into(),
            )),
            EmbedderKind::Remote if !has_endpoint => {
                Err(Error::InvalidParam("remote embedder needs an endpoint".into()))
            }
            EmbedderKind::Remote if self.batch_size == 0 => {
                Err(Error::InvalidParam("batch_size must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::Hashing => Box::new(HashingEmbedder::new(self.dim, self.seed)),
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(
                self.endpoint.clone().unwrap_or_default(),
                self.dim,
                self.batch_size,
                Duration::from_secs_f64(self.timeout_secs.max(0.001)),
            )),
        })
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_sentence(&self, text: &str) -> Result<Vec<f64>>;

    /// One vector per token, in input order.
    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed_token(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(token) ^ self.seed);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(v)
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Normalised mean of the token vectors. Tokens are summed in sorted
    /// order so the result is bitwise independent of word order.
    fn embed_sentence(&self, text: &str) -> Result<Vec<f64>> {
        let mut tokens = tokenize(text);
        if tokens.len() == 1 {
            return Ok(self.embed_token(&tokens[0]));
        }
        tokens.sort_unstable();
        let mut sum = vec![0.0; self.dim];
        for token in &tokens {
            for (s, x) in sum.iter_mut().zip(self.embed_token(token)) {
                *s += x;
            }
        }
        let n = tokens.len() as f64;
        Ok(normalize(sum.into_iter().map(|s| s / n).collect()))
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(tokens.iter().map(|t| self.embed_token(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for `POST {endpoint}/embed` with body `{"texts": [...]}` answering
/// `{"vectors": [[...], ...]}`.
pub struct RemoteEmbedder {
    url: String,
    dim: usize,
    batch_size: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize, batch_size: usize, timeout: Duration) -> Self {
        let endpoint = endpoint.into();
        let url = format!("{}/embed", endpoint.trim_end_matches('/'));
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url,
            dim,
            batch_size: batch_size.max(1),
            agent,
        }
    }

    fn call(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| Error::EmbedService(format!("{}: {e}", self.url)))?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(Error::EmbedService(format!("{} returned status {status}", self.url)));
        }
        let body: EmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::EmbedService(format!("bad response body: {e}")))?;
        if body.vectors.len() != texts.len() {
            return Err(Error::EmbedService(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                body.vectors.len()
            )));
        }
        for v in &body.vectors {
            if v.len() != self.dim {
                return Err(Error::EmbedService(format!(
                    "vector of length {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::EmbedService("non-finite vector component".into()));
            }
        }
        Ok(body.vectors)
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_sentence(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.call(&[text])?.remove(0))
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(self.batch_size) {
            let texts: Vec<&str> = chunk.iter().map(String::as_str).collect();
            out.extend(self.call(&texts)?);
        }
        Ok(out)
    }
}

/// Externally supplied attributes for synthetic-vector graphs.
#[derive(Debug, Clone)]
pub struct VectorAttributes {
    pub sentence: Array2<f64>,
    pub tokens: Vec<Array2<f64>>,
    pub token_text: Vec<Vec<String>>,
}

/// A dialogue graph with sentence-level and token-level node attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    pub graph: DialogueGraph,
    /// N x d.
    pub sentence_attrs: Array2<f64>,
    /// Per agent, T_i x d.
    pub token_attrs: Vec<Array2<f64>>,
    pub tokens: Vec<Vec<String>>,
}

impl AttributedGraph {
    pub fn from_parts(
        graph: DialogueGraph,
        sentence_attrs: Array2<f64>,
        token_attrs: Vec<Array2<f64>>,
        tokens: Vec<Vec<String>>,
    ) -> Result<Self> {
        let attr = Self {
            graph,
            sentence_attrs,
            token_attrs,
            tokens,
        };
        attr.validate()?;
        Ok(attr)
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sentence_attrs.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.len();
        let d = self.sentence_attrs.ncols();
        if self.sentence_attrs.nrows() != n {
            return Err(Error::Shape(format!(
                "{} sentence rows for {n} agents",
                self.sentence_attrs.nrows()
            )));
        }
        if self.token_attrs.len() != n || self.tokens.len() != n {
            return Err(Error::Shape("token attributes do not cover every agent".into()));
        }
        for (i, (attrs, toks)) in self.token_attrs.iter().zip(&self.tokens).enumerate() {
            if attrs.nrows() == 0 || attrs.nrows() != toks.len() {
                return Err(Error::Shape(format!(
                    "agent {i}: {} token rows for {} tokens",
                    attrs.nrows(),
                    toks.len()
                )));
            }
            if attrs.ncols() != d {
                return Err(Error::Shape(format!("agent {i}: token dim {} != {d}", attrs.ncols())));
            }
            if attrs.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidGraph(format!("agent {i}: non-finite token attribute")));
            }
        }
        if self.sentence_attrs.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidGraph("non-finite sentence attribute".into()));
        }
        Ok(())
    }
}

fn rows_to_array(rows: Vec<Vec<f64>>, dim: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, dim), flat).map_err(|e| Error::Shape(e.to_string()))
}

pub fn attribute_graph(graph: &DialogueGraph, embedder: &dyn Embedder) -> Result<AttributedGraph> {
    attribute_graph_with(graph, embedder, None)
}

/// Embeds every response, or passes `supplied` attributes through untouched
/// (no embedder calls) for synthetic-vector graphs.
pub fn attribute_graph_with(
    graph: &DialogueGraph,
    embedder: &dyn Embedder,
    supplied: Option<VectorAttributes>,
) -> Result<AttributedGraph> {
    if graph.is_empty() {
        return Err(Error::InvalidGraph("graph has no agents".into()));
    }
    if let Some(v) = supplied {
        return AttributedGraph::from_parts(graph.clone(), v.sentence, v.tokens, v.token_text);
    }
    if graph.synthetic {
        return Err(Error::InvalidGraph(format!(
            "graph `{}` is vector-only and needs supplied attributes",
            graph.graph_id
        )));
    }
    let dim = embedder.dim();
    let mut sentence_rows = Vec::with_capacity(graph.len());
    let mut token_attrs = Vec::with_capacity(graph.len());
    let mut tokens = Vec::with_capacity(graph.len());
    for agent in &graph.agents {
        let s = embedder.embed_sentence(&agent.response)?;
        if s.len() != dim {
            return Err(Error::EmbedService(format!("sentence vector of length {}, expected {dim}", s.len())));
        }
        sentence_rows.push(s);
        let toks = tokenize(&agent.response);
        let vecs = embedder.embed_tokens(&toks)?;
        if vecs.len() != toks.len() {
            return Err(Error::EmbedService("token vector count mismatch".into()));
        }
        token_attrs.push(rows_to_array(vecs, dim)?);
        tokens.push(toks);
    }
    AttributedGraph::from_parts(graph.clone(), rows_to_array(sentence_rows, dim)?, token_attrs, tokens)
}

#[cfg(test)]
pub(crate) fn cosine(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}
