//! Reverse-mode gradients of the cross-entropy loss, derived by hand.

use crate::error::{Error, Result};
use crate::graph::SegmentGraph;
use crate::numerics::{axpy, dot, DenseMatrix};

use super::forward::{fingerprint, ForwardCache, LayerCache};
use super::params::{AggregatorKind, LayerWeights, ModelParams, ReadoutKind, Weights};

/// Exact gradient of `loss(ŷ, y)` with respect to every weight.
pub fn backward(
    cache: &ForwardCache,
    g: &SegmentGraph,
    params: &ModelParams,
    label: u8,
) -> Result<Weights> {
    backward_scaled(cache, g, params, label, 1.0)
}

/// Gradient of `scale · loss(ŷ, y)`.
pub fn backward_scaled(
    cache: &ForwardCache,
    g: &SegmentGraph,
    params: &ModelParams,
    label: u8,
    scale: f64,
) -> Result<Weights> {
    if cache.fingerprint() != fingerprint(g, params) {
        return Err(Error::Usage(
            "forward cache was computed for a different graph or parameter set".into(),
        ));
    }
    let w = &params.weights;
    let mut grads = Weights::zeros(&params.config);

    // sigmoid + cross-entropy: ∂loss/∂logit = ŷ − y
    let d_logit = scale * (cache.prediction - f64::from(label));
    let rc = &cache.readout;
    axpy(d_logit, &rc.graph_embedding, &mut grads.classifier);
    grads.classifier_bias = d_logit;
    let d_graph: Vec<f64> = w.classifier.iter().map(|c| d_logit * c).collect();

    let h = cache.node_embeddings();
    let n = h.rows();
    let mut d_h = DenseMatrix::zeros(n, h.cols());
    match params.config.readout_kind {
        ReadoutKind::Attention => {
            let c = if params.config.attention_divide_by_n {
                1.0 / n as f64
            } else {
                1.0
            };
            let d_alpha: Vec<f64> = (0..n).map(|i| c * dot(h.row(i), &d_graph)).collect();
            let mean_d_alpha = dot(&rc.alpha, &d_alpha);
            for (i, &alpha_i) in rc.alpha.iter().enumerate() {
                axpy(c * alpha_i, &d_graph, d_h.row_mut(i));
                let d_score = alpha_i * (d_alpha[i] - mean_d_alpha);
                let t = rc.attention_hidden.row(i);
                axpy(d_score, t, &mut grads.attention_vector);
                let d_pre: Vec<f64> = t
                    .iter()
                    .zip(&w.attention_vector)
                    .map(|(tk, uk)| d_score * uk * (1.0 - tk * tk))
                    .collect();
                grads.attention.add_outer(1.0, &d_pre, h.row(i));
                axpy(1.0, &w.attention.matvec_t(&d_pre), d_h.row_mut(i));
            }
        }
        ReadoutKind::Mean | ReadoutKind::Sum => {
            let s = if params.config.readout_kind == ReadoutKind::Mean {
                1.0 / n as f64
            } else {
                1.0
            };
            for i in 0..n {
                axpy(s, &d_graph, d_h.row_mut(i));
            }
        }
        ReadoutKind::Maxpool => {
            for (k, &i) in rc.max_source.iter().enumerate() {
                d_h[(i, k)] += d_graph[k];
            }
        }
    }

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let need_input = l > 0;
        d_h = layer_backward(
            g,
            lc,
            &w.layers[l],
            &mut grads.layers[l],
            &d_h,
            params.config.aggregator_kind,
            need_input,
        );
    }
    Ok(grads)
}

/// Back-propagates through one layer, returning the gradient w.r.t. its input.
fn layer_backward(
    g: &SegmentGraph,
    lc: &LayerCache,
    w: &LayerWeights,
    grad: &mut LayerWeights,
    d_out: &DenseMatrix,
    kind: AggregatorKind,
    need_input: bool,
) -> DenseMatrix {
    let n = lc.input.rows();
    let p = lc.input.cols();
    let mut d_in = DenseMatrix::zeros(n, p);
    let mut d_msg = DenseMatrix::zeros(n, p);
    for i in 0..n {
        let d_pre: Vec<f64> = d_out
            .row(i)
            .iter()
            .zip(lc.pre_activation.row(i))
            .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
            .collect();
        if d_pre.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut concat = Vec::with_capacity(2 * p);
        concat.extend_from_slice(lc.input.row(i));
        concat.extend_from_slice(lc.messages.row(i));
        grad.transform.add_outer(1.0, &d_pre, &concat);
        let d_concat = w.transform.matvec_t(&d_pre);
        axpy(1.0, &d_concat[..p], d_in.row_mut(i));
        d_msg.row_mut(i).copy_from_slice(&d_concat[p..]);
    }

    match kind {
        AggregatorKind::Mean => {
            for i in 0..n {
                let total: f64 = g.neighbors(i).map(|(_, e)| e).sum();
                if total > 0.0 {
                    let dm = d_msg.row(i).to_vec();
                    for (j, e) in g.neighbors(i) {
                        axpy(e / total, &dm, d_in.row_mut(j));
                    }
                }
            }
        }
        AggregatorKind::Maxpool => {
            for (i, src) in lc.max_source.iter().enumerate() {
                for (k, s) in src.iter().enumerate() {
                    if let Some(j) = *s {
                        d_in[(j, k)] += g.weight(i, j) * d_msg[(i, k)];
                    }
                }
            }
        }
        AggregatorKind::Gated => {
            for (i, steps) in lc.gate_steps.iter().enumerate() {
                let mut d_state = d_msg.row(i).to_vec();
                for step in steps.iter().rev() {
                    let d_message = gate_step_backward(step, w, grad, &mut d_state);
                    axpy(step.weight, &d_message, d_in.row_mut(step.neighbor));
                }
                axpy(1.0, &d_state, d_in.row_mut(i));
            }
        }
    }
    if !need_input {
        return DenseMatrix::zeros(0, 0);
    }
    d_in
}

/// Reverses one gated update. On entry `d_state` is the gradient w.r.t. the
/// state after the step; on exit, w.r.t. the state before it. Returns the
/// gradient w.r.t. the step's message.
fn gate_step_backward(
    step: &super::forward::GateStep,
    w: &LayerWeights,
    grad: &mut LayerWeights,
    d_state: &mut [f64],
) -> Vec<f64> {
    let p = step.state.len();
    let s = &step.state;
    let (z, r, c) = (&step.update, &step.reset, &step.candidate);

    let mut d_prev = vec![0.0; p];
    let mut d_message = vec![0.0; p];
    let mut d_z_pre = vec![0.0; p];
    let mut d_c_pre = vec![0.0; p];
    for k in 0..p {
        let ds = d_state[k];
        d_prev[k] = ds * (1.0 - z[k]);
        d_z_pre[k] = ds * (c[k] - s[k]) * z[k] * (1.0 - z[k]);
        d_c_pre[k] = ds * z[k] * (1.0 - c[k] * c[k]);
    }

    // candidate = tanh(W · [r ∘ s, m])
    let mut cand_in = Vec::with_capacity(2 * p);
    cand_in.extend(r.iter().zip(s).map(|(a, b)| a * b));
    cand_in.extend_from_slice(&step.message);
    grad.gate_candidate.add_outer(1.0, &d_c_pre, &cand_in);
    let d_cand_in = w.gate_candidate.matvec_t(&d_c_pre);
    let mut d_r_pre = vec![0.0; p];
    for k in 0..p {
        let d_rs = d_cand_in[k];
        d_prev[k] += d_rs * r[k];
        d_r_pre[k] = d_rs * s[k] * r[k] * (1.0 - r[k]);
        d_message[k] += d_cand_in[p + k];
    }

    // update and reset gates act on [s, m]
    let mut gate_in = Vec::with_capacity(2 * p);
    gate_in.extend_from_slice(s);
    gate_in.extend_from_slice(&step.message);
    grad.gate_update.add_outer(1.0, &d_z_pre, &gate_in);
    grad.gate_reset.add_outer(1.0, &d_r_pre, &gate_in);
    let d_a_z = w.gate_update.matvec_t(&d_z_pre);
    let d_a_r = w.gate_reset.matvec_t(&d_r_pre);
    for k in 0..p {
        d_prev[k] += d_a_z[k] + d_a_r[k];
        d_message[k] += d_a_z[p + k] + d_a_r[p + k];
    }
    d_state.copy_from_slice(&d_prev);
    d_message
}
