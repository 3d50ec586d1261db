//! Client-side round execution for FedAvg, FedProx, SCAFFOLD and Fed-EF.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{loss_and_grad_rows, sgd_step_in_place, Dataset, LayeredParams, ModelSpec};
use crate::partitioning::Group;
use crate::quantization::{dequantize_model, quantize_model, QuantSpec, QuantizedModel};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    Scaffold,
    FedEf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    pub algorithm: Algorithm,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub prox_mu: f32,
    /// Codec for inferior uploads; `None` sends full precision.
    pub quant: Option<QuantSpec>,
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("local.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("local.batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("local.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("local.momentum must be in [0, 1)"));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::config("local.prox_mu must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub group: Group,
    pub data: Dataset,
    /// SCAFFOLD client control `c_k`; absent means zero.
    pub control_variate: Option<LayeredParams>,
    /// Fed-EF carried quantization residual; absent means zero.
    pub error_residual: Option<LayeredParams>,
    pub rng_seed: u64,
}

impl ClientState {
    pub fn new(id: usize, group: Group, data: Dataset, rng_seed: u64) -> Self {
        Self {
            id,
            group,
            data,
            control_variate: None,
            error_residual: None,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Full(LayeredParams),
    Quantized(QuantizedModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    pub payload: Payload,
    /// SCAFFOLD `c_k' - c_k`, always full precision.
    pub control_delta: Option<LayeredParams>,
    pub num_samples: usize,
}

/// FedProx gradient: `grad + mu * (w - w_global)`.
pub fn grad_fedprox(
    grad: &LayeredParams,
    w: &LayeredParams,
    w_global: &LayeredParams,
    mu: f32,
) -> Result<LayeredParams> {
    let pull = w.zip_with(w_global, |a, b| a - b)?;
    grad.zip_with(&pull, |g, d| g + mu * d)
}

/// SCAFFOLD corrected gradient: `grad - c_k + c`.
pub fn grad_scaffold(
    grad: &LayeredParams,
    c_k: &LayeredParams,
    c: &LayeredParams,
) -> Result<LayeredParams> {
    let correction = c.zip_with(c_k, |c, ck| c - ck)?;
    grad.zip_with(&correction, |g, d| g + d)
}

/// Error-feedback quantization: `v = w + residual`, send `Q(v)`, keep
/// `v - DeQ(Q(v))` for the next round.
pub fn fold_error_feedback(
    w: &LayeredParams,
    residual: &LayeredParams,
    quant: &QuantSpec,
) -> Result<(QuantizedModel, LayeredParams)> {
    let v = w.zip_with(residual, |a, b| a + b)?;
    let q = quantize_model(&v, quant)?;
    let next = v.zip_with(&dequantize_model(&q)?, |a, b| a - b)?;
    Ok((q, next))
}

/// Mini-batch steps per epoch for `n` samples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// One client round: start from `global`, train `epochs` of shuffled
/// mini-batch SGD with momentum, then package the upload for the client's
/// group. Persistent state (control variate, residual) is updated in place.
pub fn local_round(
    state: &mut ClientState,
    global: &LayeredParams,
    spec: &ModelSpec,
    cfg: &LocalConfig,
    server_control: Option<&LayeredParams>,
    round: u64,
) -> Result<ClientUpload> {
    let is_scaffold = cfg.algorithm == Algorithm::Scaffold;
    if is_scaffold != server_control.is_some() {
        return Err(Error::config(
            "server control must be supplied exactly when running SCAFFOLD",
        ));
    }
    if state.data.is_empty() {
        return Err(Error::config(format!("client {} has no data", state.id)));
    }
    let zeros = global.zeros_like();
    let client_control = state.control_variate.as_ref().unwrap_or(&zeros);
    if let Some(c) = server_control {
        global.check_layout(c)?;
        global.check_layout(client_control)?;
    }

    let mut w = global.clone();
    // Momentum restarts every round.
    let mut velocity = zeros.clone();
    let mut rng = seed::derived_rng(state.rng_seed, &[round]);
    let mut order: Vec<usize> = (0..state.data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = loss_and_grad_rows(&w, spec, &state.data, batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    client: state.id,
                    round,
                    epoch,
                    loss,
                });
            }
            let grad = match cfg.algorithm {
                Algorithm::FedProx => grad_fedprox(&grad, &w, global, cfg.prox_mu)?,
                Algorithm::Scaffold => {
                    grad_scaffold(&grad, client_control, server_control.expect("checked"))?
                }
                Algorithm::FedAvg | Algorithm::FedEf => grad,
            };
            sgd_step_in_place(&mut w, &grad, &mut velocity, cfg.lr, cfg.momentum);
        }
        if !w.is_finite() {
            return Err(Error::Divergence {
                client: state.id,
                round,
                epoch,
                loss: f64::NAN,
            });
        }
    }

    let control_delta = match server_control {
        Some(c) => {
            // Option II: c_k' = c_k - c + (w_global - w_k) / (steps * lr).
            let steps = (cfg.epochs * steps_per_epoch(state.data.len(), cfg.batch_size)) as f64;
            let inv = 1.0 / (steps * cfg.lr as f64);
            let drift = global.zip_with(&w, |g, l| ((g as f64 - l as f64) * inv) as f32)?;
            let updated = client_control
                .zip_with(c, |ck, c| ck - c)?
                .zip_with(&drift, |a, d| a + d)?;
            let delta = updated.zip_with(client_control, |a, b| a - b)?;
            state.control_variate = Some(updated);
            Some(delta)
        }
        None => None,
    };

    let payload = match (state.group, cfg.quant.as_ref()) {
        (Group::Inferior, Some(quant)) if cfg.algorithm == Algorithm::FedEf => {
            let residual = state.error_residual.take().unwrap_or_else(|| zeros.clone());
            let (q, next) = fold_error_feedback(&w, &residual, quant)?;
            state.error_residual = Some(next);
            Payload::Quantized(q)
        }
        (Group::Inferior, Some(quant)) => Payload::Quantized(quantize_model(&w, quant)?),
        _ => Payload::Full(w),
    };

    Ok(ClientUpload {
        client_id: state.id,
        payload,
        control_delta,
        num_samples: state.data.len(),
    })
}
