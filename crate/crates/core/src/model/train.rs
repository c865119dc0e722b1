use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SegmentGraph;
use crate::numerics::SeededRng;

use super::backward::backward_scaled;
use super::forward::{forward, loss};
use super::params::{init_params, ModelConfig, ModelParams, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub shuffle: bool,
    /// Weight each example's loss by inverse class frequency.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            init_scale: 1.0,
            shuffle: true,
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Plain SGD: `θ ← θ − lr·∇θ`. Non-finite gradients abort the step.
pub fn sgd_step(params: &ModelParams, grads: &Weights, lr: f64) -> Result<ModelParams> {
    if grads.len() != params.weights.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.weights.len()
        )));
    }
    if let Some(index) = grads.to_flat().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            index,
            detail: "non-finite gradient".into(),
        });
    }
    let mut next = params.clone();
    next.weights.add_scaled(-lr, grads);
    Ok(next)
}

/// Loss history and final parameters of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean example loss per epoch, measured during the epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch SGD on segment-level labels starting from a fresh
/// initialisation seeded by `cfg.seed`.
pub fn train(
    graphs: &[(SegmentGraph, u8)],
    model: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = init_params(model, cfg.init_scale, cfg.seed)?;
    train_from(params, graphs, cfg)
}

/// Continues training from existing parameters.
///
/// Within a batch, per-example gradients may be computed in parallel but are
/// summed in batch order, so results do not depend on thread scheduling.
pub fn train_from(
    mut params: ModelParams,
    graphs: &[(SegmentGraph, u8)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graphs.is_empty() {
        return Err(Error::Usage("no training graphs".into()));
    }
    let d_in = params.config.input_dim();
    if let Some((i, _)) = graphs
        .iter()
        .enumerate()
        .find(|(_, (g, _))| g.feature_dim() != d_in)
    {
        return Err(Error::Config(format!(
            "graph {i} has {}-dimensional features, model expects {d_in}",
            graphs[i].0.feature_dim()
        )));
    }
    if graphs.iter().any(|(_, y)| *y > 1) {
        return Err(Error::Usage("labels must be 0 or 1".into()));
    }
    let positives = graphs.iter().filter(|(_, y)| *y == 1).count();
    let negatives = graphs.len() - positives;
    if positives == 0 || negatives == 0 {
        log::warn!("training set has {positives} abnormal and {negatives} normal segments");
    }
    let class_weight = |y: u8| -> f64 {
        if !cfg.class_weighting {
            return 1.0;
        }
        let count = if y == 1 { positives } else { negatives };
        graphs.len() as f64 / (2.0 * count.max(1) as f64)
    };

    let mut rng = SeededRng::derived(cfg.seed, 0x5348_5546);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let current = &params;
            let results: Vec<Result<(f64, Weights)>> = batch
                .par_iter()
                .map(|&idx| {
                    let (g, y) = &graphs[idx];
                    let cache = forward(g, current)?;
                    let w = class_weight(*y);
                    let grads = backward_scaled(&cache, g, current, *y, w)?;
                    Ok((w * loss(cache.prediction, *y), grads))
                })
                .collect();
            let mut total = Weights::zeros(&params.config);
            for r in results {
                let (l, g) = r?;
                epoch_loss += l;
                total.add_scaled(1.0, &g);
            }
            let scale = 1.0 / batch.len() as f64;
            for s in total.slices_mut() {
                s.iter_mut().for_each(|v| *v *= scale);
            }
            params = sgd_step(&params, &total, cfg.learning_rate)?;
        }
        let mean = epoch_loss / graphs.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}
