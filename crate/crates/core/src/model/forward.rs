//! Forward pass: neighbourhood aggregation, concatenate-and-transform
//! layers, graph readout and the sigmoid classifier head.

use crate::error::{Error, Result};
use crate::graph::SegmentGraph;
use crate::numerics::{axpy, dot, relu, sigmoid, softmax, DenseMatrix};

use super::params::{AggregatorKind, Fnv, LayerWeights, ModelParams, ReadoutKind};

/// One application of the gated update for message `e_ij h_j`.
#[derive(Debug, Clone)]
pub struct GateStep {
    pub neighbor: usize,
    pub weight: f64,
    /// State before the step.
    pub state: Vec<f64>,
    pub message: Vec<f64>,
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
    pub candidate: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: DenseMatrix,
    pub messages: DenseMatrix,
    /// Gated aggregator: the unrolled recurrence of each node.
    pub gate_steps: Vec<Vec<GateStep>>,
    /// Maxpool aggregator: winning neighbour per node and dimension.
    pub max_source: Vec<Vec<Option<usize>>>,
    pub pre_activation: DenseMatrix,
    pub output: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct ReadoutCache {
    /// `tanh(W_a h_i)` per node (attention readout only).
    pub attention_hidden: DenseMatrix,
    pub scores: Vec<f64>,
    /// Node weights: attention softmax, or `1/n` for the other readouts.
    pub alpha: Vec<f64>,
    /// Maxpool readout: winning node per dimension.
    pub max_source: Vec<usize>,
    pub graph_embedding: Vec<f64>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub readout: ReadoutCache,
    pub logit: f64,
    pub prediction: f64,
    fingerprint: u64,
}

impl ForwardCache {
    /// Final-layer node embeddings.
    pub fn node_embeddings(&self) -> &DenseMatrix {
        &self.layers.last().expect("at least one layer").output
    }

    pub(crate) fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

pub(crate) fn fingerprint(g: &SegmentGraph, params: &ModelParams) -> u64 {
    let mut h = Fnv::new();
    h.write_u64(params.weights.fingerprint());
    for v in g
        .node_features()
        .as_slice()
        .iter()
        .chain(g.edge_weights().as_slice())
    {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

fn gate_input(state: &[f64], message: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.len() + message.len());
    v.extend_from_slice(state);
    v.extend_from_slice(message);
    v
}

/// Gated recurrence for one node: starts from `h_i` and folds in each
/// positive-weight neighbour in ascending frame order.
fn gated_node(
    g: &SegmentGraph,
    h: &DenseMatrix,
    i: usize,
    w: &LayerWeights,
) -> (Vec<f64>, Vec<GateStep>) {
    let mut state = h.row(i).to_vec();
    let mut steps = Vec::new();
    for (j, e) in g.neighbors(i) {
        let message: Vec<f64> = h.row(j).iter().map(|v| e * v).collect();
        let a = gate_input(&state, &message);
        let update: Vec<f64> = w.gate_update.matvec(&a).into_iter().map(sigmoid).collect();
        let reset: Vec<f64> = w.gate_reset.matvec(&a).into_iter().map(sigmoid).collect();
        let gated: Vec<f64> = reset.iter().zip(&state).map(|(r, s)| r * s).collect();
        let candidate: Vec<f64> = w
            .gate_candidate
            .matvec(&gate_input(&gated, &message))
            .into_iter()
            .map(f64::tanh)
            .collect();
        let next: Vec<f64> = (0..state.len())
            .map(|k| (1.0 - update[k]) * state[k] + update[k] * candidate[k])
            .collect();
        steps.push(GateStep {
            neighbor: j,
            weight: e,
            state: std::mem::replace(&mut state, next),
            message,
            update,
            reset,
            candidate,
        });
    }
    (state, steps)
}

/// Messages, gated-recurrence steps and maxpool argmax sources.
type Aggregation = (DenseMatrix, Vec<Vec<GateStep>>, Vec<Vec<Option<usize>>>);

/// Neighbour messages `h_N(i)` with their backward bookkeeping.
pub(crate) fn aggregate_with_cache(
    g: &SegmentGraph,
    h: &DenseMatrix,
    w: &LayerWeights,
    kind: AggregatorKind,
) -> Result<Aggregation> {
    let n = g.node_count();
    if h.rows() != n {
        return Err(Error::Shape(format!(
            "{} embedding rows for {n} nodes",
            h.rows()
        )));
    }
    let p = h.cols();
    if w.gate_update.rows() != p {
        return Err(Error::Shape(format!(
            "layer expects {}-dimensional input, got {p}",
            w.gate_update.rows()
        )));
    }
    let mut messages = DenseMatrix::zeros(n, p);
    let mut gate_steps = Vec::new();
    let mut max_source = Vec::new();
    match kind {
        AggregatorKind::Mean => {
            for i in 0..n {
                let total: f64 = g.neighbors(i).map(|(_, e)| e).sum();
                if total > 0.0 {
                    let out = messages.row_mut(i);
                    for (j, e) in g.neighbors(i) {
                        axpy(e / total, h.row(j), out);
                    }
                }
            }
        }
        AggregatorKind::Maxpool => {
            for i in 0..n {
                let mut src = vec![None; p];
                let out = messages.row_mut(i);
                for (j, e) in g.neighbors(i) {
                    for k in 0..p {
                        let v = e * h[(j, k)];
                        if src[k].is_none() || v > out[k] {
                            out[k] = v;
                            src[k] = Some(j);
                        }
                    }
                }
                max_source.push(src);
            }
        }
        AggregatorKind::Gated => {
            for i in 0..n {
                let (state, steps) = gated_node(g, h, i, w);
                messages.row_mut(i).copy_from_slice(&state);
                gate_steps.push(steps);
            }
        }
    }
    Ok((messages, gate_steps, max_source))
}

/// Per-node neighbour messages `h_N(i)`.
pub fn aggregate_neighbors(
    g: &SegmentGraph,
    h: &DenseMatrix,
    w: &LayerWeights,
    kind: AggregatorKind,
) -> Result<DenseMatrix> {
    aggregate_with_cache(g, h, w, kind).map(|r| r.0)
}

fn layer_with_cache(
    g: &SegmentGraph,
    h: &DenseMatrix,
    w: &LayerWeights,
    kind: AggregatorKind,
) -> Result<LayerCache> {
    let (messages, gate_steps, max_source) = aggregate_with_cache(g, h, w, kind)?;
    let n = h.rows();
    let q = w.transform.rows();
    let mut pre = DenseMatrix::zeros(n, q);
    let mut out = DenseMatrix::zeros(n, q);
    for i in 0..n {
        let z = w.transform.matvec(&gate_input(h.row(i), messages.row(i)));
        for (k, zk) in z.into_iter().enumerate() {
            pre[(i, k)] = zk;
            out[(i, k)] = relu(zk);
        }
    }
    Ok(LayerCache {
        input: h.clone(),
        messages,
        gate_steps,
        max_source,
        pre_activation: pre,
        output: out,
    })
}

/// `h_i' = ReLU(W · [h_i, h_N(i)])` for every node.
pub fn layer_forward(
    g: &SegmentGraph,
    h: &DenseMatrix,
    w: &LayerWeights,
    kind: AggregatorKind,
) -> Result<DenseMatrix> {
    layer_with_cache(g, h, w, kind).map(|c| c.output)
}

pub(crate) fn readout_with_cache(h: &DenseMatrix, params: &ModelParams) -> Result<ReadoutCache> {
    let n = h.rows();
    if n == 0 {
        return Err(Error::Shape("readout over zero nodes".into()));
    }
    let w = &params.weights;
    let dim = h.cols();
    if dim != w.classifier.len() {
        return Err(Error::Shape(format!(
            "{dim}-dimensional embeddings for a {}-dimensional head",
            w.classifier.len()
        )));
    }
    let uniform = vec![1.0 / n as f64; n];
    let mut cache = ReadoutCache {
        attention_hidden: DenseMatrix::zeros(0, 0),
        scores: Vec::new(),
        alpha: uniform,
        max_source: Vec::new(),
        graph_embedding: vec![0.0; dim],
    };
    match params.config.readout_kind {
        ReadoutKind::Attention => {
            let a = w.attention.rows();
            let mut hidden = DenseMatrix::zeros(n, a);
            let mut scores = Vec::with_capacity(n);
            for i in 0..n {
                let t: Vec<f64> = w
                    .attention
                    .matvec(h.row(i))
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                scores.push(dot(&w.attention_vector, &t));
                hidden.row_mut(i).copy_from_slice(&t);
            }
            let alpha = softmax(&scores)?;
            let scale = if params.config.attention_divide_by_n {
                1.0 / n as f64
            } else {
                1.0
            };
            for (i, &ai) in alpha.iter().enumerate() {
                axpy(scale * ai, h.row(i), &mut cache.graph_embedding);
            }
            cache.attention_hidden = hidden;
            cache.scores = scores;
            cache.alpha = alpha;
        }
        ReadoutKind::Mean | ReadoutKind::Sum => {
            let scale = if params.config.readout_kind == ReadoutKind::Mean {
                1.0 / n as f64
            } else {
                1.0
            };
            for r in h.row_iter() {
                axpy(scale, r, &mut cache.graph_embedding);
            }
        }
        ReadoutKind::Maxpool => {
            cache.max_source = vec![0; dim];
            cache.graph_embedding.copy_from_slice(h.row(0));
            for i in 1..n {
                for k in 0..dim {
                    if h[(i, k)] > cache.graph_embedding[k] {
                        cache.graph_embedding[k] = h[(i, k)];
                        cache.max_source[k] = i;
                    }
                }
            }
        }
    }
    Ok(cache)
}

/// Attention readout: `α = softmax(uᵀ tanh(W_a h_i))` and
/// `h_g = (1/n) Σ α_i h_i` (the `1/n` is configurable).
///
/// For the other readout kinds `α` is uniform.
pub fn attention_readout(h: &DenseMatrix, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = readout_with_cache(h, params)?;
    Ok((c.graph_embedding, c.alpha))
}

/// `ŷ = sigmoid(w_cᵀ h_g + b_c)`.
pub fn classify(graph_embedding: &[f64], params: &ModelParams) -> f64 {
    sigmoid(logit(graph_embedding, params))
}

pub(crate) fn logit(graph_embedding: &[f64], params: &ModelParams) -> f64 {
    dot(&params.weights.classifier, graph_embedding) + params.weights.classifier_bias
}

pub fn forward(g: &SegmentGraph, params: &ModelParams) -> Result<ForwardCache> {
    if g.feature_dim() != params.config.input_dim() {
        return Err(Error::Shape(format!(
            "graph features are {}-dimensional but the model expects {}",
            g.feature_dim(),
            params.config.input_dim()
        )));
    }
    let mut layers: Vec<LayerCache> = Vec::with_capacity(params.weights.layers.len());
    for w in &params.weights.layers {
        let input = layers
            .last()
            .map_or_else(|| g.node_features(), |c| &c.output);
        let cache = layer_with_cache(g, input, w, params.config.aggregator_kind)?;
        layers.push(cache);
    }
    let readout = readout_with_cache(&layers.last().expect("validated config").output, params)?;
    let z = logit(&readout.graph_embedding, params);
    Ok(ForwardCache {
        layers,
        readout,
        logit: z,
        prediction: sigmoid(z),
        fingerprint: fingerprint(g, params),
    })
}

pub const PROB_CLAMP: f64 = 1e-12;

/// Binary cross-entropy with the prediction clamped to `[1e-12, 1 − 1e-12]`.
pub fn loss(prediction: f64, label: u8) -> f64 {
    let p = prediction.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}
