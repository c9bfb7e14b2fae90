//! Topology-aware bi-level encoding.
//!
//! One message-passing layer per level: mean over in-neighbours, a `d x d`
//! linear map plus bias, then ReLU. The caller adds the ego input back
//! (skip connection), so the layer never aggregates a node with itself.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::AttributedGraph;
use crate::error::{Error, Result};
use crate::graph::Adjacency;

pub const PARAMS_VERSION: u32 = 1;

/// Weights of the sentence-level and token-level message-passing layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_s: Array2<f64>,
    pub b_s: Array1<f64>,
    pub w_t: Array2<f64>,
    pub b_t: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_s: Array2::zeros((dim, dim)),
            b_s: Array1::zeros(dim),
            w_t: Array2::zeros((dim, dim)),
            b_t: Array1::zeros(dim),
        }
    }

    /// Weights uniform in `(-1/sqrt(d), 1/sqrt(d))`, biases zero.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut draw = |_: (usize, usize)| rng.random_range(-bound..bound);
        let w_s = Array2::from_shape_fn((dim, dim), &mut draw);
        let w_t = Array2::from_shape_fn((dim, dim), &mut draw);
        Self {
            w_s,
            b_s: Array1::zeros(dim),
            w_t,
            b_t: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.b_s.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.w_s.dim() != (d, d) || self.w_t.dim() != (d, d) || self.b_t.len() != d {
            return Err(Error::Shape(format!("parameters are not consistently {d}-dimensional")));
        }
        let finite = self.w_s.iter().chain(&self.b_s).chain(&self.w_t).chain(&self.b_t).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidParam("non-finite model parameter".into()));
        }
        Ok(())
    }

    /// Flat views in the order `W_s, b_s, W_t, b_t`.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_s.as_slice().expect("standard layout"),
            self.b_s.as_slice().expect("standard layout"),
            self.w_t.as_slice().expect("standard layout"),
            self.b_t.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_s.as_slice_mut().expect("standard layout"),
            self.b_s.as_slice_mut().expect("standard layout"),
            self.w_t.as_slice_mut().expect("standard layout"),
            self.b_t.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ParamsFile::from(self)).expect("params serialization")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let file: ParamsFile = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Schema {
                field: path,
                message: e.into_inner().to_string(),
            }
        })?;
        file.into_params()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Loads and rejects a dimension that differs from the embedder's.
    pub fn load_for_dim(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let params = Self::load(path)?;
        if params.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: params.dim(),
            });
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ParamsFile {
    dim: usize,
    W_s: Vec<Vec<f64>>,
    b_s: Vec<f64>,
    W_t: Vec<Vec<f64>>,
    b_t: Vec<f64>,
    version: u32,
}

impl From<&ModelParams> for ParamsFile {
    fn from(p: &ModelParams) -> Self {
        let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect();
        Self {
            dim: p.dim(),
            W_s: rows(&p.w_s),
            b_s: p.b_s.to_vec(),
            W_t: rows(&p.w_t),
            b_t: p.b_t.to_vec(),
            version: PARAMS_VERSION,
        }
    }
}

impl ParamsFile {
    fn into_params(self) -> Result<ModelParams> {
        if self.version != PARAMS_VERSION {
            return Err(Error::Schema {
                field: "version".into(),
                message: format!("unsupported version {}", self.version),
            });
        }
        let d = self.dim;
        let matrix = |rows: Vec<Vec<f64>>, field: &str| -> Result<Array2<f64>> {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Schema {
                    field: field.into(),
                    message: format!("expected a {d}x{d} matrix"),
                });
            }
            Ok(Array2::from_shape_vec((d, d), rows.into_iter().flatten().collect()).expect("checked shape"))
        };
        let vector = |v: Vec<f64>, field: &str| -> Result<Array1<f64>> {
            if v.len() != d {
                return Err(Error::Schema {
                    field: field.into(),
                    message: format!("expected length {d}"),
                });
            }
            Ok(Array1::from(v))
        };
        let params = ModelParams {
            w_s: matrix(self.W_s, "W_s")?,
            b_s: vector(self.b_s, "b_s")?,
            w_t: matrix(self.W_t, "W_t")?,
            b_t: vector(self.b_t, "b_t")?,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Mean of in-neighbour rows; zero for agents without in-neighbours.
pub fn mean_aggregate(x: ArrayView2<'_, f64>, adj: &Adjacency) -> Array2<f64> {
    let mut agg = Array2::zeros(x.raw_dim());
    for (i, mut row) in agg.axis_iter_mut(Axis(0)).enumerate() {
        let nbrs = adj.in_neighbors(i);
        if nbrs.is_empty() {
            continue;
        }
        for &j in nbrs {
            row += &x.row(j);
        }
        row /= nbrs.len() as f64;
    }
    agg
}

/// Aggregation, pre-activation and output of one message-passing layer.
pub(crate) struct LayerTrace {
    pub agg: Array2<f64>,
    pub pre: Array2<f64>,
    pub out: Array2<f64>,
}

fn check_layer(x: ArrayView2<'_, f64>, adj: &Adjacency, w: &Array2<f64>, b: &Array1<f64>) -> Result<()> {
    let (n, d) = x.dim();
    if adj.len() != n {
        return Err(Error::Shape(format!("{n} feature rows for {} agents", adj.len())));
    }
    if w.dim() != (d, d) || b.len() != d {
        return Err(Error::Shape(format!(
            "layer weights {:?}/{} do not match feature dim {d}",
            w.dim(),
            b.len()
        )));
    }
    Ok(())
}

pub(crate) fn message_pass_trace(
    x: ArrayView2<'_, f64>,
    adj: &Adjacency,
    w: &Array2<f64>,
    b: &Array1<f64>,
) -> Result<LayerTrace> {
    check_layer(x, adj, w, b)?;
    let agg = mean_aggregate(x, adj);
    let pre = agg.dot(&w.t()) + b;
    let out = pre.mapv(|v| v.max(0.0));
    Ok(LayerTrace { agg, pre, out })
}

/// `out[i] = relu(W * mean_{j -> i} x[j] + b)`.
pub fn message_pass(x: ArrayView2<'_, f64>, adj: &Adjacency, w: &Array2<f64>, b: &Array1<f64>) -> Result<Array2<f64>> {
    Ok(message_pass_trace(x, adj, w, b)?.out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGraph {
    /// N x d sentence representations.
    pub h_s: Array2<f64>,
    /// Per agent, T_i x d token representations.
    pub h_t: Vec<Array2<f64>>,
    /// N x d mean of the augmented tokens of each agent.
    pub pooled_t: Array2<f64>,
    /// Per agent, token attributes plus the agent's sentence attribute.
    pub aug_t: Vec<Array2<f64>>,
}

fn check_params(attr: &AttributedGraph, params: &ModelParams) -> Result<()> {
    if params.dim() != attr.dim() {
        return Err(Error::DimMismatch {
            expected: attr.dim(),
            found: params.dim(),
        });
    }
    Ok(())
}

pub fn encode_sentence(attr: &AttributedGraph, params: &ModelParams) -> Result<Array2<f64>> {
    check_params(attr, params)?;
    let m = message_pass(attr.sentence_attrs.view(), &attr.graph.adjacency, &params.w_s, &params.b_s)?;
    Ok(m + &attr.sentence_attrs)
}

pub fn augment_tokens(attr: &AttributedGraph) -> Vec<Array2<f64>> {
    attr.token_attrs
        .iter()
        .enumerate()
        .map(|(i, toks)| toks + &attr.sentence_attrs.row(i))
        .collect()
}

fn pool(aug: &[Array2<f64>], dim: usize) -> Array2<f64> {
    let mut pooled = Array2::zeros((aug.len(), dim));
    for (mut row, toks) in pooled.axis_iter_mut(Axis(0)).zip(aug) {
        row.assign(&toks.mean_axis(Axis(0)).expect("agents have at least one token"));
    }
    pooled
}

/// Returns `(pooled_t, H_t)`. The layer output of agent `i` is broadcast
/// over all of its tokens.
pub fn encode_tokens(attr: &AttributedGraph, params: &ModelParams) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    check_params(attr, params)?;
    let aug = augment_tokens(attr);
    let pooled = pool(&aug, attr.dim());
    let m = message_pass(pooled.view(), &attr.graph.adjacency, &params.w_t, &params.b_t)?;
    let h_t = aug.iter().enumerate().map(|(i, toks)| toks + &m.row(i)).collect();
    Ok((pooled, h_t))
}

/// Full encoding plus the intermediates needed for backpropagation.
pub(crate) struct EncodeTrace {
    pub encoded: EncodedGraph,
    pub sentence: LayerTrace,
    pub token: LayerTrace,
}

pub(crate) fn encode_trace(attr: &AttributedGraph, params: &ModelParams) -> Result<EncodeTrace> {
    check_params(attr, params)?;
    let adj = &attr.graph.adjacency;
    let sentence = message_pass_trace(attr.sentence_attrs.view(), adj, &params.w_s, &params.b_s)?;
    let h_s = &sentence.out + &attr.sentence_attrs;
    let aug_t = augment_tokens(attr);
    let pooled_t = pool(&aug_t, attr.dim());
    let token = message_pass_trace(pooled_t.view(), adj, &params.w_t, &params.b_t)?;
    let h_t = aug_t.iter().enumerate().map(|(i, toks)| toks + &token.out.row(i)).collect();
    Ok(EncodeTrace {
        encoded: EncodedGraph {
            h_s,
            h_t,
            pooled_t,
            aug_t,
        },
        sentence,
        token,
    })
}

pub fn encode(attr: &AttributedGraph, params: &ModelParams) -> Result<EncodedGraph> {
    Ok(encode_trace(attr, params)?.encoded)
}
