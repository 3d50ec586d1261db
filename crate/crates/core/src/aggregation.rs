//! Server round logic: selection, dequantization, mean aggregation and the
//! per-layer mean shift.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_training::{ClientUpload, Payload};
use crate::params::{compensated_sum, mean_f64, Layer, LayeredParams};
use crate::partitioning::Group;
use crate::quantization::dequantize_model;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Model distributed at the start of the next round.
    pub global: LayeredParams,
    pub round: u64,
    pub server_control: Option<LayeredParams>,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundSelection {
    pub selected: Vec<usize>,
    pub inferior_selected: Vec<usize>,
    pub superior_selected: Vec<usize>,
}

impl RoundSelection {
    pub fn k(&self) -> usize {
        self.selected.len()
    }

    pub fn i(&self) -> usize {
        self.inferior_selected.len()
    }

    pub fn s(&self) -> usize {
        self.superior_selected.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftScope {
    #[default]
    PerLayer,
    Global,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeights {
    #[default]
    Uniform,
    BySamples,
}

/// Number of clients drawn per round: `ceil(C * N)`, at least one.
pub fn selection_size(num_clients: usize, participation: f64) -> usize {
    let k = (participation * num_clients as f64 - 1e-9).ceil() as usize;
    k.clamp(1, num_clients)
}

/// Uniform sample without replacement of `ceil(C * N)` client ids, sorted.
/// `groups[i]` is the group of client `i`.
pub fn select_clients(
    groups: &[Group],
    participation: f64,
    seed_for_round: u64,
) -> Result<RoundSelection> {
    if !(participation > 0.0 && participation <= 1.0) {
        return Err(Error::config(format!(
            "participation must be in (0, 1], got {participation}"
        )));
    }
    if groups.is_empty() {
        return Err(Error::config("cannot select from zero clients"));
    }
    let n = groups.len();
    let k = selection_size(n, participation);
    let mut selected = if k == n {
        (0..n).collect()
    } else {
        let mut rng = seed::rng(seed_for_round);
        index::sample(&mut rng, n, k).into_vec()
    };
    selected.sort_unstable();
    let (inferior_selected, superior_selected) = selected
        .iter()
        .partition(|&&c| groups[c] == Group::Inferior);
    Ok(RoundSelection {
        selected,
        inferior_selected,
        superior_selected,
    })
}

/// Full-precision images of the uploads, in input order.
pub fn dequantize_uploads(uploads: &[ClientUpload]) -> Result<Vec<LayeredParams>> {
    uploads
        .iter()
        .map(|u| match &u.payload {
            Payload::Full(p) => Ok(p.clone()),
            Payload::Quantized(q) => dequantize_model(q).map_err(|e| Error::Client {
                client: u.client_id,
                source: Box::new(e),
            }),
        })
        .collect()
}

/// Uniform `1/K` mean, accumulated in f64 in input order.
pub fn aggregate_mean(models: &[LayeredParams]) -> Result<LayeredParams> {
    let w = vec![1.0; models.len()];
    aggregate_weighted(models, &w)
}

/// Weighted mean with weights normalised to sum to one.
pub fn aggregate_weighted(models: &[LayeredParams], weights: &[f64]) -> Result<LayeredParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::config("cannot aggregate zero models"))?;
    if weights.len() != models.len() {
        return Err(Error::config("one weight per model required"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config(
            "aggregation weights must be finite and non-negative",
        ));
    }
    let total = compensated_sum(weights.iter().copied());
    if total <= 0.0 {
        return Err(Error::config("aggregation weights sum to zero"));
    }
    for m in &models[1..] {
        first.check_layout(m)?;
    }
    let layers = first
        .layers()
        .iter()
        .enumerate()
        .map(|(li, layer)| {
            let mut acc = vec![0.0f64; layer.values.len()];
            for (m, w) in models.iter().zip(weights) {
                let p = w / total;
                for (a, v) in acc.iter_mut().zip(&m.layers()[li].values) {
                    *a += p * *v as f64;
                }
            }
            Layer {
                name: layer.name.clone(),
                values: acc.into_iter().map(|v| v as f32).collect(),
            }
        })
        .collect();
    LayeredParams::new(layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOutcome {
    pub shifted: LayeredParams,
    /// Per-layer mean `m` of the aggregated model (the shared mean under global scope).
    pub means: Vec<f64>,
    /// Per-layer amount subtracted from every element, `(I/K) * m`.
    pub shifts: Vec<f64>,
}

/// Subtract `(I/K) * m` from every element, `m` being the layer mean
/// (or the mean over all parameters under global scope).
pub fn shift_global(
    aggregated: &LayeredParams,
    inferior: usize,
    k: usize,
    scope: ShiftScope,
) -> Result<ShiftOutcome> {
    if k == 0 || inferior > k {
        return Err(Error::config(format!(
            "shift needs 0 <= I <= K and K >= 1, got I={inferior}, K={k}"
        )));
    }
    let frac = inferior as f64 / k as f64;
    let means: Vec<f64> = match scope {
        ShiftScope::PerLayer => aggregated
            .layers()
            .iter()
            .map(|l| mean_f64(&l.values))
            .collect(),
        ShiftScope::Global => {
            let n = aggregated.total_len();
            let m = if n == 0 {
                0.0
            } else {
                compensated_sum(aggregated.values().map(f64::from)) / n as f64
            };
            vec![m; aggregated.num_layers()]
        }
    };
    let shifts: Vec<f64> = means.iter().map(|m| frac * m).collect();
    let mut shifted = aggregated.clone();
    if inferior > 0 {
        for (layer, s) in shifted.layers_mut().iter_mut().zip(&shifts) {
            for v in &mut layer.values {
                *v = (*v as f64 - s) as f32;
            }
        }
    }
    Ok(ShiftOutcome {
        shifted,
        means,
        shifts,
    })
}

/// The per-upload formulation: shift every inferior upload by the aggregated
/// layer mean, then average. Agrees with `shift_global` on the mean.
pub fn aggregate_with_shifted_inferiors(
    models: &[LayeredParams],
    inferior: &[bool],
) -> Result<LayeredParams> {
    if models.len() != inferior.len() {
        return Err(Error::config("one group flag per model required"));
    }
    let agg = aggregate_mean(models)?;
    let means: Vec<f64> = agg.layers().iter().map(|l| mean_f64(&l.values)).collect();
    let moved: Vec<LayeredParams> = models
        .iter()
        .zip(inferior)
        .map(|(m, &inf)| {
            let mut m = m.clone();
            if inf {
                for (layer, mu) in m.layers_mut().iter_mut().zip(&means) {
                    for v in &mut layer.values {
                        *v = (*v as f64 - mu) as f32;
                    }
                }
            }
            m
        })
        .collect();
    aggregate_mean(&moved)
}

/// `c' = c + (1/N) * sum(deltas)`.
pub fn scaffold_server_update(
    c: &LayeredParams,
    control_deltas: &[LayeredParams],
    num_clients: usize,
) -> Result<LayeredParams> {
    if control_deltas.is_empty() {
        return Ok(c.clone());
    }
    if num_clients == 0 {
        return Err(Error::config("scaffold update needs N >= 1"));
    }
    let mut acc: Vec<Vec<f64>> = c
        .layers()
        .iter()
        .map(|l| vec![0.0; l.values.len()])
        .collect();
    for d in control_deltas {
        c.check_layout(d)?;
        for (a, l) in acc.iter_mut().zip(d.layers()) {
            for (x, v) in a.iter_mut().zip(&l.values) {
                *x += *v as f64;
            }
        }
    }
    let inv = 1.0 / num_clients as f64;
    let mut out = c.clone();
    for (l, a) in out.layers_mut().iter_mut().zip(acc) {
        for (v, s) in l.values.iter_mut().zip(a) {
            *v = (*v as f64 + s * inv) as f32;
        }
    }
    Ok(out)
}
