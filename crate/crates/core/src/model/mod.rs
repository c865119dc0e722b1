//! Two-layer message-passing classifier trained on segment-level labels.
//!
//! Each layer aggregates edge-weighted neighbour embeddings (mean, maxpool
//! or a gated recurrence), concatenates the result with the node's own
//! embedding and applies a linear map followed by ReLU. The final node
//! embeddings are read out into one graph embedding and scored by a
//! sigmoid head. Gradients are computed by hand in [`backward`].

mod backward;
mod checkpoint;
mod forward;
mod params;
mod train;

pub use backward::{backward, backward_scaled};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CEGM_MAGIC,
    CEGM_VERSION,
};
pub use forward::{
    aggregate_neighbors, attention_readout, classify, forward, layer_forward, loss, ForwardCache,
    GateStep, LayerCache, ReadoutCache, PROB_CLAMP,
};
pub use params::{
    init_params, AggregatorKind, LayerWeights, ModelConfig, ModelParams, ReadoutKind, TensorSpec,
    Weights, AGGREGATOR_KINDS, READOUT_KINDS,
};
pub use train::{sgd_step, train, train_from, TrainConfig, TrainOutcome};
