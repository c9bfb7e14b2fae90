//! Contrastive training on unattacked dialogue graphs.
//!
//! Each agent is pulled toward its own graph's theme prototypes and pushed
//! away from the prototypes of another graph drawn from the same batch:
//!
//! ```text
//! score_i(p)  = 1/2 * [ sim(h_s_i, p_s) + mean_j sim(h_t_ij, p_t) ]
//! loss(graph) = -mean_i [ log pos_i + alpha * log(1 - neg_i) ]
//! ```
//!
//! Gradients are derived by hand and checked against central differences by
//! [`gradient_check`].

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detector::{logistic, theme_prototypes, Prototypes};
use crate::embed::{attribute_graph, AttributedGraph, EmbedderSpec};
use crate::encoder::{encode, encode_trace, EncodeTrace, ModelParams};
use crate::error::{Error, Result};
use crate::graph::DialogueGraph;

const LOG_CLAMP: f64 = 1e-7;
const KINK_MARGIN: f64 = 1e-4;
const MAX_JITTER_ROUNDS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Parameter coordinates sampled for the gradient check in the report; 0 skips it.
    pub grad_check_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 2e-4,
            alpha: 1e-4,
            seed: 0,
            optimizer: Optimizer::default(),
            grad_check_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParam("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidParam("batch size must be at least 2".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParam(format!("learning rate {}", self.lr)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParam(format!("alpha {}", self.alpha)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParam(format!("weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub params: ModelParams,
    /// Max relative error of the sampled gradient check at initialisation.
    pub grad_check: Option<f64>,
    pub wall_seconds: f64,
}

fn level_terms(trace: &EncodeTrace, protos: &Prototypes) -> (Vec<f64>, Vec<Vec<f64>>) {
    let enc = &trace.encoded;
    let zs = enc.h_s.rows().into_iter().map(|h| h.dot(&protos.p_s)).collect();
    let zt = enc
        .h_t
        .iter()
        .map(|toks| toks.rows().into_iter().map(|h| h.dot(&protos.p_t)).collect())
        .collect();
    (zs, zt)
}

fn combine(zs: &[f64], zt: &[Vec<f64>]) -> Vec<f64> {
    zs.iter()
        .zip(zt)
        .map(|(&s, toks)| {
            let tok = toks.iter().map(|&z| logistic(z)).sum::<f64>() / toks.len() as f64;
            0.5 * (logistic(s) + tok)
        })
        .collect()
}

/// Per-agent training similarity of `attr` against arbitrary prototypes.
pub fn scores_against(attr: &AttributedGraph, params: &ModelParams, protos: &Prototypes) -> Result<Vec<f64>> {
    let trace = encode_trace(attr, params)?;
    let (zs, zt) = level_terms(&trace, protos);
    Ok(combine(&zs, &zt))
}

/// Similarity of every agent to its own graph's prototypes.
pub fn positive_scores(attr: &AttributedGraph, params: &ModelParams) -> Result<Vec<f64>> {
    let enc = encode(attr, params)?;
    let protos = theme_prototypes(&enc);
    scores_against(attr, params, &protos)
}

/// Similarity of the agents of `batch[k]` to the prototypes of `batch[l]`.
pub fn negative_scores(batch: &[AttributedGraph], k: usize, l: usize, params: &ModelParams) -> Result<Vec<f64>> {
    if k == l {
        return Err(Error::InvalidNegative(k));
    }
    let (anchor, other) = match (batch.get(k), batch.get(l)) {
        (Some(a), Some(o)) => (a, o),
        _ => return Err(Error::InvalidParam(format!("graph index {} out of range", k.max(l)))),
    };
    let protos = theme_prototypes(&encode(other, params)?);
    scores_against(anchor, params, &protos)
}

fn clamp_prob(x: f64) -> f64 {
    x.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

/// `-mean_i [ log pos_i + alpha * log(1 - neg_i) ]` for one graph.
pub fn contrastive_loss(pos: &[f64], neg: &[f64], alpha: f64) -> f64 {
    let n = pos.len() as f64;
    -pos.iter()
        .zip(neg)
        .map(|(&p, &q)| clamp_prob(p).ln() + alpha * (1.0 - clamp_prob(q)).ln())
        .sum::<f64>()
        / n
}

fn inside_clamp(x: f64) -> bool {
    x > LOG_CLAMP && x < 1.0 - LOG_CLAMP
}

struct Forward {
    trace: EncodeTrace,
    protos: Prototypes,
}

/// Upstream gradients of one graph, before the prototype fold.
struct GraphGrad {
    h_s: Array2<f64>,
    m_t: Array2<f64>,
    p_s: Array1<f64>,
    p_t: Array1<f64>,
}

impl GraphGrad {
    fn zeros(n: usize, d: usize) -> Self {
        Self {
            h_s: Array2::zeros((n, d)),
            m_t: Array2::zeros((n, d)),
            p_s: Array1::zeros(d),
            p_t: Array1::zeros(d),
        }
    }
}

/// Backpropagates `upstream_i * d score_i` into the encodings of the anchor
/// graph and into the prototypes it was compared against.
fn score_backward(
    fwd: &Forward,
    protos: &Prototypes,
    zs: &[f64],
    zt: &[Vec<f64>],
    upstream: &[f64],
    anchor: &mut GraphGrad,
    proto_p_s: &mut Array1<f64>,
    proto_p_t: &mut Array1<f64>,
) {
    let enc = &fwd.trace.encoded;
    for (i, &g) in upstream.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let sig = logistic(zs[i]);
        let cs = g * 0.5 * sig * (1.0 - sig);
        anchor.h_s.row_mut(i).scaled_add(cs, &protos.p_s);
        proto_p_s.scaled_add(cs, &enc.h_s.row(i));

        let t = zt[i].len() as f64;
        let mut ct_total = 0.0;
        for (j, &z) in zt[i].iter().enumerate() {
            let sig = logistic(z);
            let ct = g * 0.5 / t * sig * (1.0 - sig);
            ct_total += ct;
            proto_p_t.scaled_add(ct, &enc.h_t[i].row(j));
        }
        anchor.m_t.row_mut(i).scaled_add(ct_total, &protos.p_t);
    }
}

fn forward(attr: &AttributedGraph, params: &ModelParams) -> Result<Forward> {
    let trace = encode_trace(attr, params)?;
    let protos = theme_prototypes(&trace.encoded);
    Ok(Forward { trace, protos })
}

fn check_batch(batch: &[&AttributedGraph], negatives: &[usize]) -> Result<()> {
    if batch.len() != negatives.len() {
        return Err(Error::Shape(format!(
            "{} graphs but {} negative assignments",
            batch.len(),
            negatives.len()
        )));
    }
    if let Some(&bad) = negatives.iter().find(|&&l| l >= batch.len()) {
        return Err(Error::InvalidParam(format!("negative index {bad} outside the batch")));
    }
    Ok(())
}

/// Sum of per-graph losses. `negatives[k]` is the graph whose prototypes act
/// as the negative for graph `k`; it may equal `k` here (test use only).
pub fn batch_loss(batch: &[&AttributedGraph], negatives: &[usize], params: &ModelParams, alpha: f64) -> Result<f64> {
    check_batch(batch, negatives)?;
    let fwds = batch.iter().map(|a| forward(a, params)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (k, fwd) in fwds.iter().enumerate() {
        let (zs, zt) = level_terms(&fwd.trace, &fwd.protos);
        let pos = combine(&zs, &zt);
        let (zs, zt) = level_terms(&fwd.trace, &fwds[negatives[k]].protos);
        let neg = combine(&zs, &zt);
        total += contrastive_loss(&pos, &neg, alpha);
    }
    Ok(total)
}

/// Batch loss and its gradient with respect to every parameter.
pub fn batch_loss_and_grad(
    batch: &[&AttributedGraph],
    negatives: &[usize],
    params: &ModelParams,
    alpha: f64,
) -> Result<(f64, ModelParams)> {
    check_batch(batch, negatives)?;
    let d = params.dim();
    let fwds = batch.iter().map(|a| forward(a, params)).collect::<Result<Vec<_>>>()?;
    let mut grads: Vec<GraphGrad> = batch.iter().map(|a| GraphGrad::zeros(a.len(), d)).collect();
    let mut total = 0.0;

    for (k, fwd) in fwds.iter().enumerate() {
        let n = batch[k].len() as f64;
        let (zs_pos, zt_pos) = level_terms(&fwd.trace, &fwd.protos);
        let pos = combine(&zs_pos, &zt_pos);
        let neg_protos = &fwds[negatives[k]].protos;
        let (zs_neg, zt_neg) = level_terms(&fwd.trace, neg_protos);
        let neg = combine(&zs_neg, &zt_neg);
        total += contrastive_loss(&pos, &neg, alpha);

        let up_pos: Vec<f64> = pos.iter().map(|&p| if inside_clamp(p) { -1.0 / (n * p) } else { 0.0 }).collect();
        let up_neg: Vec<f64> = neg
            .iter()
            .map(|&q| if inside_clamp(q) { alpha / (n * (1.0 - q)) } else { 0.0 })
            .collect();

        let mut anchor = GraphGrad::zeros(batch[k].len(), d);
        let mut own_p_s = Array1::zeros(d);
        let mut own_p_t = Array1::zeros(d);
        score_backward(fwd, &fwd.protos, &zs_pos, &zt_pos, &up_pos, &mut anchor, &mut own_p_s, &mut own_p_t);
        let mut neg_p_s = Array1::zeros(d);
        let mut neg_p_t = Array1::zeros(d);
        score_backward(fwd, neg_protos, &zs_neg, &zt_neg, &up_neg, &mut anchor, &mut neg_p_s, &mut neg_p_t);

        grads[k].h_s += &anchor.h_s;
        grads[k].m_t += &anchor.m_t;
        grads[k].p_s += &own_p_s;
        grads[k].p_t += &own_p_t;
        let l = negatives[k];
        grads[l].p_s += &neg_p_s;
        grads[l].p_t += &neg_p_t;
    }

    let mut out = ModelParams::zeros(d);
    for (fwd, mut g) in fwds.iter().zip(grads) {
        let n = g.h_s.nrows() as f64;
        // p_s = mean_i h_s_i and p_t = mean_i (m_t_i + pooled_i)
        for mut row in g.h_s.axis_iter_mut(Axis(0)) {
            row.scaled_add(1.0 / n, &g.p_s);
        }
        for mut row in g.m_t.axis_iter_mut(Axis(0)) {
            row.scaled_add(1.0 / n, &g.p_t);
        }
        let s = &fwd.trace.sentence;
        let dpre_s = &g.h_s * &s.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        out.w_s += &dpre_s.t().dot(&s.agg);
        out.b_s += &dpre_s.sum_axis(Axis(0));
        let t = &fwd.trace.token;
        let dpre_t = &g.m_t * &t.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        out.w_t += &dpre_t.t().dot(&t.agg);
        out.b_t += &dpre_t.sum_axis(Axis(0));
    }
    Ok((total, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Jitter rounds needed to move pre-activations off the ReLU kink.
    pub jitter_rounds: usize,
}

fn kinks(batch: &[AttributedGraph], params: &ModelParams) -> Result<Vec<(usize, bool, usize, usize)>> {
    let mut found = Vec::new();
    for (g, attr) in batch.iter().enumerate() {
        let trace = encode_trace(attr, params)?;
        for (token_level, layer) in [(false, &trace.sentence), (true, &trace.token)] {
            for ((i, r), &v) in layer.pre.indexed_iter() {
                if v.abs() < KINK_MARGIN {
                    found.push((g, token_level, i, r));
                }
            }
        }
    }
    Ok(found)
}

/// Perturbs the inputs (and, where the pre-activation equals a bias because
/// the node has no in-neighbours or the weight row is zero, that bias) until
/// every pre-activation sits at least `KINK_MARGIN` away from zero.
fn dekink(batch: &mut [AttributedGraph], params: &mut ModelParams, rng: &mut ChaCha8Rng) -> Result<usize> {
    for round in 0..MAX_JITTER_ROUNDS {
        let found = kinks(batch, params)?;
        if found.is_empty() {
            return Ok(round);
        }
        for attr in batch.iter_mut() {
            attr.sentence_attrs.mapv_inplace(|x| x + 1e-3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
            for toks in attr.token_attrs.iter_mut() {
                toks.mapv_inplace(|x| x + 1e-3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
            }
        }
        for (g, token_level, i, r) in found {
            let (w, b) = if token_level {
                (&params.w_t, &mut params.b_t)
            } else {
                (&params.w_s, &mut params.b_s)
            };
            let isolated = batch[g].graph.adjacency.in_degree(i) == 0;
            if isolated || w.row(r).iter().all(|&x| x == 0.0) {
                let step = rng.random_range(2.0 * KINK_MARGIN..1e-3);
                b[r] += if rng.random::<bool>() { step } else { -step };
            }
        }
    }
    Ok(MAX_JITTER_ROUNDS)
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn check_coords(
    batch: &[AttributedGraph],
    negatives: &[usize],
    params: &ModelParams,
    alpha: f64,
    epsilon: f64,
    coords: &[(usize, usize)],
) -> Result<f64> {
    let refs: Vec<&AttributedGraph> = batch.iter().collect();
    let (_, grad) = batch_loss_and_grad(&refs, negatives, params, alpha)?;
    let analytic = grad.tensors();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for &(tensor, idx) in coords {
        let original = probe.tensors()[tensor][idx];
        probe.tensors_mut()[tensor][idx] = original + epsilon;
        let up = batch_loss(&refs, negatives, &probe, alpha)?;
        probe.tensors_mut()[tensor][idx] = original - epsilon;
        let down = batch_loss(&refs, negatives, &probe, alpha)?;
        probe.tensors_mut()[tensor][idx] = original;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(rel_error(analytic[tensor][idx], numeric));
    }
    Ok(worst)
}

fn all_coords(params: &ModelParams) -> Vec<(usize, usize)> {
    params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(t, s)| (0..s.len()).map(move |i| (t, i)))
        .collect()
}

/// Compares the analytic gradient of the batch loss against central finite
/// differences on every parameter entry. Returns the maximum of
/// `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn gradient_check(
    batch: &[AttributedGraph],
    negatives: &[usize],
    params: &ModelParams,
    alpha: f64,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheck> {
    let mut batch = batch.to_vec();
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter_rounds = dekink(&mut batch, &mut params, &mut rng)?;
    let coords = all_coords(&params);
    let max_rel_error = check_coords(&batch, negatives, &params, alpha, epsilon, &coords)?;
    Ok(GradCheck {
        max_rel_error,
        checked: coords.len(),
        jitter_rounds,
    })
}

/// Two graphs acting as each other's negative.
pub fn gradient_check_pair(
    a: &AttributedGraph,
    b: &AttributedGraph,
    params: &ModelParams,
    alpha: f64,
    epsilon: f64,
) -> Result<GradCheck> {
    gradient_check(&[a.clone(), b.clone()], &[1, 0], params, alpha, epsilon, 0)
}

fn sampled_gradient_check(
    a: &AttributedGraph,
    b: &AttributedGraph,
    params: &ModelParams,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut batch = vec![a.clone(), b.clone()];
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dekink(&mut batch, &mut params, &mut rng)?;
    let mut coords = all_coords(&params);
    coords.shuffle(&mut rng);
    coords.truncate(samples);
    check_coords(&batch, &[1, 0], &params, alpha, 1e-5, &coords)
}

struct OptimizerState {
    kind: Optimizer,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl OptimizerState {
    fn new(kind: Optimizer, dim: usize) -> Self {
        Self {
            kind,
            step: 0,
            m: ModelParams::zeros(dim),
            v: ModelParams::zeros(dim),
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        self.step += 1;
        let grads = grad.tensors();
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                let ps = params.tensors_mut();
                let ms = self.m.tensors_mut();
                let vs = self.v.tensors_mut();
                for (((p, g), m), v) in ps.into_iter().zip(grads).zip(ms).zip(vs) {
                    for k in 0..p.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Splits a shuffled order into batches of `size`; a trailing singleton
/// joins the previous batch since it has no in-batch negative.
fn make_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Attributes the corpus with the given embedder and trains.
pub fn train(graphs: &[DialogueGraph], spec: &EmbedderSpec, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if graphs.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} graphs for batch size {}",
            graphs.len(),
            cfg.batch_size
        )));
    }
    if let Some(g) = graphs.iter().find(|g| !g.attacked_ids().is_empty()) {
        return Err(Error::InvalidGraph(format!(
            "training graph `{}` has attacked agents",
            g.graph_id
        )));
    }
    let embedder = spec.build()?;
    let attrs = graphs
        .iter()
        .map(|g| attribute_graph(g, embedder.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    train_attributed(&attrs, cfg)
}

pub fn train_attributed(attrs: &[AttributedGraph], cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if attrs.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} graphs for batch size {}",
            attrs.len(),
            cfg.batch_size
        )));
    }
    let started = Instant::now();
    let dim = attrs[0].dim();
    if let Some(bad) = attrs.iter().find(|a| a.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let mut params = ModelParams::init(dim, cfg.seed);
    let grad_check = if cfg.grad_check_samples > 0 {
        Some(sampled_gradient_check(
            &attrs[0],
            &attrs[1],
            &params,
            cfg.alpha,
            cfg.grad_check_samples,
            cfg.seed,
        )?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut optimizer = OptimizerState::new(cfg.optimizer, dim);
    let mut order: Vec<usize> = (0..attrs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches = make_batches(&order, cfg.batch_size);
        let mut loss_sum = 0.0;
        for batch_ids in &batches {
            let batch: Vec<&AttributedGraph> = batch_ids.iter().map(|&i| &attrs[i]).collect();
            let negatives: Vec<usize> = (0..batch.len())
                .map(|k| {
                    let l = rng.random_range(0..batch.len() - 1);
                    if l >= k {
                        l + 1
                    } else {
                        l
                    }
                })
                .collect();
            let (loss, mut grad) = batch_loss_and_grad(&batch, &negatives, &params, cfg.alpha)?;
            if cfg.weight_decay > 0.0 {
                grad.w_s.scaled_add(cfg.weight_decay, &params.w_s);
                grad.w_t.scaled_add(cfg.weight_decay, &params.w_t);
            }
            optimizer.apply(&mut params, &grad, cfg.lr);
            loss_sum += loss;
        }
        epoch_losses.push(loss_sum / batches.len() as f64);
    }
    params.validate()?;

    let report = TrainReport {
        epoch_losses,
        params: params.clone(),
        grad_check,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
