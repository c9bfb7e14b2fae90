//! Theme-prototype anomaly scoring with covariance-weighted fusion of the
//! sentence-level and token-level scores, plus per-token explanations.
//!
//! Similarity is `logistic(<h, p>)`; the anomaly of a representation is
//! `1 - similarity`, so higher scores mean more suspicious agents.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::embed::AttributedGraph;
use crate::encoder::{encode, EncodedGraph, ModelParams};
use crate::error::{Error, Result};

const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub p_s: Array1<f64>,
    pub p_t: Array1<f64>,
}

/// Mean sentence representation, and the mean over agents of each agent's
/// mean token representation (agents weigh equally whatever their length).
pub fn theme_prototypes(enc: &EncodedGraph) -> Prototypes {
    let p_s = enc.h_s.mean_axis(Axis(0)).expect("at least one agent");
    let mut p_t = Array1::zeros(enc.h_s.ncols());
    for toks in &enc.h_t {
        p_t += &toks.mean_axis(Axis(0)).expect("at least one token");
    }
    p_t /= enc.h_t.len() as f64;
    Prototypes { p_s, p_t }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn pair_similarity(h: &[f64], p: &[f64]) -> f64 {
    logistic(h.iter().zip(p).map(|(a, b)| a * b).sum())
}

fn anomaly(h: ndarray::ArrayView1<'_, f64>, p: &Array1<f64>) -> f64 {
    1.0 - logistic(h.dot(p))
}

/// Per-agent `(raw_s, raw_t)`; `raw_t` averages the per-token anomaly terms.
pub fn level_scores(enc: &EncodedGraph, protos: &Prototypes) -> (Vec<f64>, Vec<f64>) {
    let raw_s = enc.h_s.rows().into_iter().map(|h| anomaly(h, &protos.p_s)).collect();
    let raw_t = enc
        .h_t
        .iter()
        .map(|toks| {
            let total: f64 = toks.rows().into_iter().map(|h| anomaly(h, &protos.p_t)).sum();
            total / toks.nrows() as f64
        })
        .collect();
    (raw_s, raw_t)
}

/// Population z-score. Constant input (or a single agent) maps to zeros.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let n = raw.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let mean = raw.iter().sum::<f64>() / n as f64;
    let var = raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < DEGENERATE_STD || !std.is_finite() {
        return vec![0.0; n];
    }
    raw.iter().map(|x| (x - mean) / std).collect()
}

/// Returns `(cov, fused)` with `fused = norm_s + cov * norm_t` and `cov` the
/// population covariance of the two standardized vectors.
pub fn fuse_scores(norm_s: &[f64], norm_t: &[f64]) -> Result<(f64, Vec<f64>)> {
    if norm_s.len() != norm_t.len() {
        return Err(Error::Shape(format!(
            "sentence scores for {} agents, token scores for {}",
            norm_s.len(),
            norm_t.len()
        )));
    }
    let degenerate = |v: &[f64]| v.iter().all(|&x| x == 0.0);
    if norm_s.is_empty() || degenerate(norm_s) || degenerate(norm_t) {
        return Ok((0.0, norm_s.to_vec()));
    }
    let n = norm_s.len() as f64;
    let cov = (norm_s.iter().zip(norm_t).map(|(a, b)| a * b).sum::<f64>() / n).clamp(-1.0, 1.0);
    let fused = norm_s.iter().zip(norm_t).map(|(s, t)| s + cov * t).collect();
    Ok((cov, fused))
}

pub fn token_explanations(enc: &EncodedGraph, protos: &Prototypes, cov_weight: f64) -> Vec<Vec<f64>> {
    enc.h_t
        .iter()
        .map(|toks| toks.rows().into_iter().map(|h| cov_weight * anomaly(h, &protos.p_t)).collect())
        .collect()
}

/// Agent ids ordered by descending score, ties to the lower id.
pub fn rank_agents(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub graph_id: String,
    pub fused: Vec<f64>,
    pub raw_s: Vec<f64>,
    pub raw_t: Vec<f64>,
    pub norm_s: Vec<f64>,
    pub norm_t: Vec<f64>,
    pub cov_weight: f64,
    pub flagged: Vec<usize>,
    pub tokens: Vec<Vec<String>>,
    pub token_expl: Vec<Vec<f64>>,
    /// Set when the budget exceeded the number of agents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl ScoreReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

/// Scores one encoded graph and flags the `budget` highest fused scores.
pub fn score_encoded(graph_id: &str, tokens: &[Vec<String>], enc: &EncodedGraph, budget: usize) -> Result<ScoreReport> {
    let n = enc.h_s.nrows();
    let protos = theme_prototypes(enc);
    let (raw_s, raw_t) = level_scores(enc, &protos);
    let norm_s = normalize_scores(&raw_s);
    let norm_t = normalize_scores(&raw_t);
    let (cov_weight, fused) = fuse_scores(&norm_s, &norm_t)?;
    let token_expl = token_explanations(enc, &protos, cov_weight);
    let warning = (budget > n).then(|| format!("budget {budget} exceeds {n} agents; flagging all"));
    let flagged = rank_agents(&fused).into_iter().take(budget.min(n)).collect();
    Ok(ScoreReport {
        graph_id: graph_id.to_string(),
        fused,
        raw_s,
        raw_t,
        norm_s,
        norm_t,
        cov_weight,
        flagged,
        tokens: tokens.to_vec(),
        token_expl,
        warning,
    })
}

/// Encode, build prototypes, score both levels, fuse, explain and flag.
pub fn detect(attr: &AttributedGraph, params: &ModelParams, budget: usize) -> Result<ScoreReport> {
    if attr.is_empty() {
        return Err(Error::InvalidGraph("graph has no agents".into()));
    }
    let enc = encode(attr, params)?;
    score_encoded(&attr.graph.graph_id, &attr.tokens, &enc, budget)
}
