//! Training loop: decoupled-weight-decay adaptive-moment optimization over
//! the combined distance + confidence loss, with per-epoch logging of the
//! loss and the close-range decoded error.
//!
//! Per-sample gradients within a batch are computed in parallel over
//! fixed-size chunks and reduced in chunk order, so results are identical
//! regardless of worker count.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use super::{backward, forward, forward_with_cache, ModelConfig, ModelError, NetworkParams};
use crate::dataset::{encode_targets, Sample};
use crate::mph::{mph_loss, mph_loss_grad, select_and_decode, EncodedTarget, HeadBank, LossConfig};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Samples with ‖d_r‖ below this norm feed the close-range error metric.
    pub close_range: f64,
    /// Samples per parallel gradient chunk; fixed so reductions are
    /// order-stable across machines.
    pub grad_chunk: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            close_range: 0.016,
            grad_chunk: 4,
            loss: LossConfig::default(),
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean combined loss over the epoch's samples.
    pub loss: f64,
    /// Mean decoded error (meters) over samples with ‖d_r‖ < close_range;
    /// NaN when the dataset has no such samples.
    pub close_range_error: f64,
}

struct AdamW {
    m: NetworkParams,
    v: NetworkParams,
    t: u64,
}

impl AdamW {
    fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Self {
            m: NetworkParams::zeros(cfg)?,
            v: NetworkParams::zeros(cfg)?,
            t: 0,
        })
    }

    fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let g_all = grads.tensors();
        let mut m_all = self.m.tensors_mut();
        let mut v_all = self.v.tensors_mut();
        for (((_, p), (_, _, g)), ((_, m), (_, v))) in params
            .tensors_mut()
            .into_iter()
            .zip(g_all)
            .zip(m_all.iter_mut().zip(v_all.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.learning_rate
                    * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
            }
        }
    }
}

fn batch_gradient(
    samples: &[Sample],
    targets: &[(EncodedTarget, f64)],
    batch: &[usize],
    params: &NetworkParams,
    model_cfg: &ModelConfig,
    bank: &HeadBank,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, f64), ModelError> {
    let chunks: Vec<&[usize]> = batch.chunks(cfg.grad_chunk.max(1)).collect();
    let partials: Vec<Result<(NetworkParams, f64), ModelError>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut grads = NetworkParams::zeros(model_cfg)?;
            let mut loss_sum = 0.0;
            for &idx in *chunk {
                let sample = &samples[idx];
                let (target, d_r_norm) = &targets[idx];
                let pass = forward_with_cache(&sample.observation, params, model_cfg)?;
                let loss = mph_loss(&pass.prediction, target, *d_r_norm, bank, &cfg.loss)
                    .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
                loss_sum += loss;
                let (d_dist, d_logits) =
                    mph_loss_grad(&pass.prediction, target, *d_r_norm, bank, &cfg.loss)
                        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
                backward(&pass, params, model_cfg, &d_dist, &d_logits, &mut grads);
            }
            Ok((grads, loss_sum))
        })
        .collect();

    let mut total = NetworkParams::zeros(model_cfg)?;
    let mut loss_sum = 0.0;
    for partial in partials {
        let (g, l) = partial?;
        total.add_scaled(&g, 1.0);
        loss_sum += l;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((total, loss_sum / n))
}

/// Mean decoded error over the close-range subset (or NaN if empty).
pub fn close_range_error(
    samples: &[Sample],
    params: &NetworkParams,
    model_cfg: &ModelConfig,
    bank: &HeadBank,
    close_range: f64,
) -> Result<f64, ModelError> {
    let close: Vec<&Sample> = samples
        .iter()
        .filter(|s| s.d_r.norm() < close_range)
        .collect();
    if close.is_empty() {
        return Ok(f64::NAN);
    }
    let errors: Vec<Result<f64, ModelError>> = close
        .par_iter()
        .map(|s| {
            let pred = forward(&s.observation, params, model_cfg)?;
            let (_, decoded) = select_and_decode(&pred, bank);
            Ok((decoded - s.d_r).norm())
        })
        .collect();
    let mut sum = 0.0;
    for e in errors {
        sum += e?;
    }
    Ok(sum / close.len() as f64)
}

/// Trains `params` on `samples` for the configured number of epochs.
/// Deterministic for a given rng state and inputs.
pub fn train(
    samples: &[Sample],
    bank: &HeadBank,
    mut params: NetworkParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(NetworkParams, Vec<EpochStats>), ModelError> {
    model_cfg.validate()?;
    if bank.len() != model_cfg.n_heads {
        return Err(ModelError::InvalidConfig(format!(
            "bank has {} heads but model has {}",
            bank.len(),
            model_cfg.n_heads
        )));
    }
    let targets: Vec<(EncodedTarget, f64)> = samples
        .iter()
        .map(|s| {
            encode_targets(&s.d_r, bank)
                .map(|t| (t, s.d_r.norm()))
                .map_err(|e| ModelError::InvalidConfig(format!("sample out of range: {e}")))
        })
        .collect::<Result<_, _>>()?;

    let mut optimizer = AdamW::new(model_cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        indices.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in indices.chunks(cfg.batch_size.max(1)) {
            let (grads, batch_loss) =
                batch_gradient(samples, &targets, batch, &params, model_cfg, bank, cfg)?;
            if !batch_loss.is_finite() {
                return Err(ModelError::Diverged { epoch });
            }
            optimizer.step(&mut params, &grads, cfg);
            epoch_loss += batch_loss * batch.len() as f64;
            seen += batch.len();
        }
        let loss = epoch_loss / seen.max(1) as f64;
        let cre = close_range_error(samples, &params, model_cfg, bank, cfg.close_range)?;
        history.push(EpochStats {
            epoch,
            loss,
            close_range_error: cre,
        });
    }
    Ok((params, history))
}
