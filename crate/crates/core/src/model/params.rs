use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, SeededRng};

/// How a node combines its neighbours' weighted embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    Maxpool,
    /// Sequential gated recurrence over neighbours in temporal order.
    #[default]
    Gated,
}

/// How node embeddings collapse into one graph embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutKind {
    #[default]
    Attention,
    Mean,
    Sum,
    Maxpool,
}

pub const AGGREGATOR_KINDS: [AggregatorKind; 3] = [
    AggregatorKind::Mean,
    AggregatorKind::Maxpool,
    AggregatorKind::Gated,
];
pub const READOUT_KINDS: [ReadoutKind; 4] = [
    ReadoutKind::Attention,
    ReadoutKind::Mean,
    ReadoutKind::Sum,
    ReadoutKind::Maxpool,
];

/// Architecture of the network; everything needed to allocate weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[d_in, h_1, …, h_L]`.
    pub layer_dims: Vec<usize>,
    pub aggregator_kind: AggregatorKind,
    pub readout_kind: ReadoutKind,
    pub a_dim: usize,
    /// Attention readout divides `Σ α_i h_i` by the node count.
    pub attention_divide_by_n: bool,
}

impl ModelConfig {
    pub fn new(
        layer_dims: Vec<usize>,
        aggregator_kind: AggregatorKind,
        readout_kind: ReadoutKind,
    ) -> Self {
        let a_dim = layer_dims.last().copied().unwrap_or(1);
        Self {
            layer_dims,
            aggregator_kind,
            readout_kind,
            a_dim,
            attention_divide_by_n: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "layer_dims needs an input and at least one layer, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) || self.a_dim == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive: layer_dims {:?}, a_dim {}",
                self.layer_dims, self.a_dim
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

/// Weights of one message-passing layer mapping `p → q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `q × 2p`, applied to `[h_i, h_N(i)]`.
    pub transform: DenseMatrix,
    /// Gated aggregator: `p × 2p` each, applied to `[state, message]`.
    pub gate_update: DenseMatrix,
    pub gate_reset: DenseMatrix,
    pub gate_candidate: DenseMatrix,
}

/// Every learnable tensor. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
    /// `a_dim × h_L`.
    pub attention: DenseMatrix,
    /// `a_dim`.
    pub attention_vector: Vec<f64>,
    /// `h_L`.
    pub classifier: Vec<f64>,
    pub classifier_bias: f64,
}

/// A named weight tensor with its shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layers = cfg
            .layer_dims
            .windows(2)
            .map(|w| {
                let (p, q) = (w[0], w[1]);
                LayerWeights {
                    transform: DenseMatrix::zeros(q, 2 * p),
                    gate_update: DenseMatrix::zeros(p, 2 * p),
                    gate_reset: DenseMatrix::zeros(p, 2 * p),
                    gate_candidate: DenseMatrix::zeros(p, 2 * p),
                }
            })
            .collect();
        let h = cfg.output_dim();
        Self {
            layers,
            attention: DenseMatrix::zeros(cfg.a_dim, h),
            attention_vector: vec![0.0; cfg.a_dim],
            classifier: vec![0.0; h],
            classifier_bias: 0.0,
        }
    }

    /// Tensor names and shapes in serialization order.
    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        let spec = |name: String, m: &DenseMatrix| TensorSpec {
            name,
            shape: vec![m.rows(), m.cols()],
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let l = l + 1;
            out.push(spec(format!("layer{l}.transform"), &layer.transform));
            out.push(spec(format!("layer{l}.gate_update"), &layer.gate_update));
            out.push(spec(format!("layer{l}.gate_reset"), &layer.gate_reset));
            out.push(spec(
                format!("layer{l}.gate_candidate"),
                &layer.gate_candidate,
            ));
        }
        out.push(spec("attention.transform".into(), &self.attention));
        out.push(TensorSpec {
            name: "attention.vector".into(),
            shape: vec![self.attention_vector.len()],
        });
        out.push(TensorSpec {
            name: "classifier.weight".into(),
            shape: vec![self.classifier.len()],
        });
        out.push(TensorSpec {
            name: "classifier.bias".into(),
            shape: vec![1],
        });
        out
    }

    /// Flat views in `layout` order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            out.push(layer.transform.as_slice());
            out.push(layer.gate_update.as_slice());
            out.push(layer.gate_reset.as_slice());
            out.push(layer.gate_candidate.as_slice());
        }
        out.push(self.attention.as_slice());
        out.push(&self.attention_vector);
        out.push(&self.classifier);
        out.push(std::slice::from_ref(&self.classifier_bias));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.transform.as_mut_slice());
            out.push(layer.gate_update.as_mut_slice());
            out.push(layer.gate_reset.as_mut_slice());
            out.push(layer.gate_candidate.as_mut_slice());
        }
        out.push(self.attention.as_mut_slice());
        out.push(&mut self.attention_vector);
        out.push(&mut self.classifier);
        out.push(std::slice::from_mut(&mut self.classifier_bias));
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    /// Name of the tensor holding flat coordinate `index`, with the offset inside it.
    pub fn locate(&self, index: usize) -> Option<(String, usize)> {
        let mut offset = 0;
        for spec in self.layout() {
            let n: usize = spec.shape.iter().product();
            if index < offset + n {
                return Some((spec.name, index - offset));
            }
            offset += n;
        }
        None
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Weights) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            crate::numerics::axpy(alpha, src, dst);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for s in self.slices() {
            for v in s {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

/// FNV-1a, used for cache staleness checks.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Architecture plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::zeros(&config);
        Ok(Self { config, weights })
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.weights.set_flat(flat)?;
        Ok(p)
    }
}

/// Weights uniform in `(−s, s)` with `s = init_scale / √fan_in`; the
/// classifier bias starts at zero.
pub fn init_params(config: ModelConfig, init_scale: f64, seed: u64) -> Result<ModelParams> {
    if !(init_scale >= 0.0 && init_scale.is_finite()) {
        return Err(Error::Config(format!(
            "init_scale must be >= 0, got {init_scale}"
        )));
    }
    let mut params = ModelParams::zeros(config)?;
    let mut rng = SeededRng::new(seed);
    let fill = |m: &mut [f64], fan_in: usize, rng: &mut SeededRng| {
        let s = init_scale / (fan_in as f64).sqrt();
        for v in m {
            *v = rng.uniform(-s, s);
        }
    };
    let w = &mut params.weights;
    for layer in &mut w.layers {
        let fan_in = layer.transform.cols();
        fill(layer.transform.as_mut_slice(), fan_in, &mut rng);
        fill(layer.gate_update.as_mut_slice(), fan_in, &mut rng);
        fill(layer.gate_reset.as_mut_slice(), fan_in, &mut rng);
        fill(layer.gate_candidate.as_mut_slice(), fan_in, &mut rng);
    }
    let h = w.attention.cols();
    fill(w.attention.as_mut_slice(), h, &mut rng);
    let a = w.attention_vector.len();
    fill(&mut w.attention_vector, a, &mut rng);
    fill(&mut w.classifier, h, &mut rng);
    Ok(params)
}
