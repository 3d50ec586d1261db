//! Evaluation and round diagnostics: divergence, the shift identity,
//! weight-mean trace, prediction bias and weight histograms.

use crate::error::{Error, Result};
use crate::params::{
    compensated_sum, predict_logits, softmax_xent, Dataset, LayeredParams, ModelSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub d_fa_sq: f64,
    pub d_fs_sq: f64,
    pub theorem2_residual: f64,
    pub m_prev: f64,
    pub m_curr: f64,
    /// Amount subtracted from every element of this layer (zero when no shift applies).
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub seed: u64,
    pub round: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Mean loss of the distributed model over the union of client data.
    pub train_loss: f64,
    pub layers: Vec<LayerRecord>,
    pub client_drift: f64,
    pub payload_bytes_total: u64,
    pub prediction_counts: Vec<u64>,
    pub num_selected: usize,
    pub num_inferior: usize,
}

impl RoundRecord {
    pub fn total_d_fa_sq(&self) -> f64 {
        compensated_sum(self.layers.iter().map(|l| l.d_fa_sq))
    }

    pub fn total_d_fs_sq(&self) -> f64 {
        compensated_sum(self.layers.iter().map(|l| l.d_fs_sq))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub prediction_counts: Vec<u64>,
}

/// Top-1 accuracy (ties go to the lowest class), mean cross-entropy and
/// predicted-label counts.
pub fn evaluate(global: &LayeredParams, spec: &ModelSpec, test: &Dataset) -> Result<Evaluation> {
    let logits = predict_logits(global, spec, test)?;
    let mut counts = vec![0u64; spec.num_classes];
    let mut correct = 0usize;
    let mut losses = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(&test.labels) {
        let pred = argmax(z);
        counts[pred] += 1;
        if pred == y {
            correct += 1;
        }
        losses.push(softmax_xent(z, y).0);
    }
    let n = test.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: compensated_sum(losses) / n,
        prediction_counts: counts,
    })
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Per-layer `(||w_agg - w_prev||^2, ||w_shifted - w_prev||^2)`.
pub fn round_divergence(
    w_prev: &LayeredParams,
    w_agg: &LayeredParams,
    w_shifted: &LayeredParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        w_agg.layer_sq_distances(w_prev)?,
        w_shifted.layer_sq_distances(w_prev)?,
    ))
}

/// As [`round_divergence`], with the shifted model given implicitly as
/// `w_agg - shifts[layer]` and evaluated in `f64` without rounding to `f32`.
pub fn round_divergence_exact(
    w_prev: &LayeredParams,
    w_agg: &LayeredParams,
    shifts: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    w_prev.check_layout(w_agg)?;
    if shifts.len() != w_agg.num_layers() {
        return Err(Error::config("one shift per layer required"));
    }
    let mut fa = Vec::with_capacity(shifts.len());
    let mut fs = Vec::with_capacity(shifts.len());
    for ((p, a), &s) in w_prev.layers().iter().zip(w_agg.layers()).zip(shifts) {
        let diffs = || {
            p.values
                .iter()
                .zip(&a.values)
                .map(|(&x, &y)| y as f64 - x as f64)
        };
        fa.push(compensated_sum(diffs().map(|d| d * d)));
        fs.push(compensated_sum(diffs().map(|d| (d - s) * (d - s))));
    }
    Ok((fa, fs))
}

/// `(d_fa - d_fs) - (I*P/K) * ((2 - I/K) * m_curr^2 - 2 * m_curr * m_prev)`.
pub fn theorem2_check(
    d_fa_sq: f64,
    d_fs_sq: f64,
    m_prev: f64,
    m_curr: f64,
    inferior: usize,
    k: usize,
    p: usize,
) -> f64 {
    (d_fa_sq - d_fs_sq) - theorem2_predicted(m_prev, m_curr, inferior, k, p)
}

/// Closed-form `d_fa - d_fs` for a per-layer shift by `(I/K) * m_curr`.
pub fn theorem2_predicted(m_prev: f64, m_curr: f64, inferior: usize, k: usize, p: usize) -> f64 {
    if inferior == 0 || k == 0 {
        return 0.0;
    }
    let frac = inferior as f64 / k as f64;
    frac * p as f64 * ((2.0 - frac) * m_curr * m_curr - 2.0 * m_curr * m_prev)
}

/// Residual of the same identity for an arbitrary constant shift `c` of a
/// `P`-element layer: `d_fa - d_fs = P * (2c(m_curr - m_prev) - c^2)`.
/// Equals [`theorem2_check`] when `c = (I/K) * m_curr`.
pub fn shift_identity_residual(
    d_fa_sq: f64,
    d_fs_sq: f64,
    m_prev: f64,
    m_curr: f64,
    shift: f64,
    p: usize,
) -> f64 {
    (d_fa_sq - d_fs_sq) - p as f64 * (2.0 * shift * (m_curr - m_prev) - shift * shift)
}

/// Admissible residual magnitude for a layer with FedAvg divergence `d_fa_sq`.
pub fn theorem2_tolerance(d_fa_sq: f64) -> f64 {
    1e-8 * (1.0 + d_fa_sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceCondition {
    FedshiftSmaller,
    FedshiftGreater,
    Equal,
}

/// Compare `(K+S)/(2K)` with `m_prev / m_curr`.
pub fn divergence_condition(m_prev: f64, m_curr: f64, s: usize, k: usize) -> DivergenceCondition {
    if m_curr == 0.0 || s >= k || k == 0 {
        return DivergenceCondition::Equal;
    }
    let threshold = (k + s) as f64 / (2 * k) as f64;
    let ratio = m_prev / m_curr;
    if (threshold - ratio).abs() <= 1e-12 {
        DivergenceCondition::Equal
    } else if threshold > ratio {
        DivergenceCondition::FedshiftSmaller
    } else {
        DivergenceCondition::FedshiftGreater
    }
}

/// Mean over clients of the total L2 distance to the previous global model.
pub fn client_drift(w_prev_global: &LayeredParams, locals: &[LayeredParams]) -> Result<f64> {
    if locals.is_empty() {
        return Ok(0.0);
    }
    let mut dists = Vec::with_capacity(locals.len());
    for l in locals {
        dists.push(compensated_sum(w_prev_global.layer_sq_distances(l)?).sqrt());
    }
    Ok(compensated_sum(dists) / locals.len() as f64)
}

/// `(max over rounds and layers of |m_curr|, per-round max over layers)`.
pub fn mean_trace(records: &[RoundRecord]) -> (f64, Vec<f64>) {
    let per_round: Vec<f64> = records
        .iter()
        .map(|r| r.layers.iter().map(|l| l.m_curr.abs()).fold(0.0, f64::max))
        .collect();
    (per_round.iter().copied().fold(0.0, f64::max), per_round)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub name: String,
    /// `bins + 1` equally spaced edges over `[min, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Equal-width histogram of every layer over its own value range.
pub fn weight_histogram(p: &LayeredParams, bins: usize) -> Result<Vec<Histogram>> {
    if bins < 2 {
        return Err(Error::config("histogram needs at least 2 bins"));
    }
    Ok(p.layers()
        .iter()
        .map(|l| {
            let (lo, hi) = l
                .values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v as f64), hi.max(v as f64))
                });
            let (lo, hi) = if l.values.is_empty() {
                (0.0, 0.0)
            } else {
                (lo, hi)
            };
            let width = (hi - lo) / bins as f64;
            let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
            let mut counts = vec![0u64; bins];
            for &v in &l.values {
                let b = if width > 0.0 {
                    (((v as f64 - lo) / width) as usize).min(bins - 1)
                } else {
                    0
                };
                counts[b] += 1;
            }
            Histogram {
                name: l.name.clone(),
                edges,
                counts,
            }
        })
        .collect())
}

/// Share of predictions that land on odd labels (the inferior group under
/// the shard partition).
pub fn odd_label_share(prediction_counts: &[u64]) -> f64 {
    let total: u64 = prediction_counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let odd: u64 = prediction_counts.iter().skip(1).step_by(2).sum();
    odd as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Layer;
    use crate::quantization::{dequantize_model, quantize_model, QuantSpec, Scheme};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one(v: &[f32]) -> LayeredParams {
        LayeredParams::new(vec![Layer {
            name: "w".into(),
            values: v.to_vec(),
        }])
        .unwrap()
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let spec = ModelSpec::linear(2, 4);
        let mut p = spec.zeros();
        p.layers_mut()[1].values = vec![1.0, 0.0, 0.0, 0.0];
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let data = Dataset::new(vec![0.5; 40], labels, 2, 4).unwrap();
        let e = evaluate(&p, &spec, &data).unwrap();
        assert_eq!(e.accuracy, 0.25);
        assert_eq!(e.prediction_counts, vec![20, 0, 0, 0]);
    }

    #[test]
    fn planted_separator_is_perfect() {
        // Nearest-mean classifier written as a linear model: W = means, b = -|mu|^2 / 2.
        let k = 5;
        let dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let means: Vec<Vec<f32>> = (0..k)
            .map(|c| (0..dim).map(|d| if d == c { 3.0 } else { 0.0 }).collect())
            .collect();
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let c = i % k;
            for m in &means[c] {
                feats.push(m + rng.random_range(-0.5f32..0.5));
            }
            labels.push(c);
        }
        let data = Dataset::new(feats, labels, dim, k).unwrap();
        let spec = ModelSpec::linear(dim, k);
        let mut p = spec.zeros();
        p.layers_mut()[0].values = means.concat();
        p.layers_mut()[1].values = means
            .iter()
            .map(|m| -m.iter().map(|v| v * v).sum::<f32>() / 2.0)
            .collect();
        let e = evaluate(&p, &spec, &data).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.prediction_counts.iter().sum::<u64>(), 200);
    }

    #[test]
    fn divergence_examples() {
        let prev = one(&[0.0, 0.0]);
        let agg = one(&[0.2, 0.4]);
        let shifted = one(&[0.05, 0.25]);
        let (fa, fs) = round_divergence(&prev, &agg, &shifted).unwrap();
        assert!((fa[0] - 0.2).abs() < 1e-7);
        assert!((fs[0] - 0.065).abs() < 1e-7);
        let (fa0, _) = round_divergence(&agg, &agg, &agg).unwrap();
        assert_eq!(fa0, vec![0.0]);
        let (a, b) = round_divergence(&prev, &agg, &agg).unwrap();
        assert_eq!(a, b);

        let (efa, efs) = round_divergence_exact(&prev, &agg, &[0.15]).unwrap();
        assert!((efa[0] - fa[0]).abs() < 1e-12);
        assert!((efs[0] - 0.065).abs() < 1e-7);
    }

    #[test]
    fn theorem2_examples() {
        // Exact decimal inputs: 0.2 - 0.065 = 0.135 = 1 * 1.5 * 0.09.
        let r = theorem2_check(0.2, 0.065, 0.0, 0.3, 1, 2, 2);
        assert!(r.abs() < 1e-15, "{r}");
        assert_eq!(theorem2_predicted(0.4, 0.7, 0, 5, 100), 0.0);
        assert_eq!(theorem2_predicted(0.4, 0.0, 3, 5, 100), 0.0);
        assert_eq!(theorem2_check(1.5, 1.5, 0.4, 0.7, 0, 5, 100), 0.0);
        let via_general = shift_identity_residual(0.2, 0.065, 0.0, 0.3, 0.15, 2);
        assert!(via_general.abs() < 1e-15);
    }

    #[test]
    fn condition_examples() {
        assert_eq!(
            divergence_condition(0.1, 0.5, 4, 4),
            DivergenceCondition::Equal
        );
        assert_eq!(
            divergence_condition(0.3, 0.0, 2, 4),
            DivergenceCondition::Equal
        );
        // Half inferior: threshold 3/4, smaller whenever m_curr > 4/3 m_prev > 0.
        assert_eq!(
            divergence_condition(0.3, 0.41, 5, 10),
            DivergenceCondition::FedshiftSmaller
        );
        assert_eq!(
            divergence_condition(0.3, 0.39, 5, 10),
            DivergenceCondition::FedshiftGreater
        );
        assert_eq!(
            divergence_condition(0.3, 0.4, 5, 10),
            DivergenceCondition::Equal
        );
    }

    /// Brute-force distances over random layers versus the closed form, and
    /// the classifier versus the measured sign.
    #[test]
    fn identity_and_condition_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let p = rng.random_range(1..40);
            let k = rng.random_range(1..12);
            let i = rng.random_range(0..=k);
            let offset_prev: f64 = rng.random_range(-0.5..0.5);
            let offset_curr: f64 = rng.random_range(-0.5..0.5);
            let prev: Vec<f64> = (0..p)
                .map(|_| offset_prev + rng.random_range(-1.0..1.0))
                .collect();
            let agg: Vec<f64> = (0..p)
                .map(|_| offset_curr + rng.random_range(-1.0..1.0))
                .collect();
            let m_prev = prev.iter().sum::<f64>() / p as f64;
            let m_curr = agg.iter().sum::<f64>() / p as f64;
            let c = i as f64 / k as f64 * m_curr;
            let fa: f64 = prev.iter().zip(&agg).map(|(a, b)| (b - a).powi(2)).sum();
            let fs: f64 = prev
                .iter()
                .zip(&agg)
                .map(|(a, b)| (b - c - a).powi(2))
                .sum();
            let r = theorem2_check(fa, fs, m_prev, m_curr, i, k, p);
            assert!(r.abs() <= theorem2_tolerance(fa), "{r}");
            let diff = fa - fs;
            if diff.abs() > 1e-10 {
                let expect = if diff > 0.0 {
                    DivergenceCondition::FedshiftSmaller
                } else {
                    DivergenceCondition::FedshiftGreater
                };
                assert_eq!(divergence_condition(m_prev, m_curr, k - i, k), expect);
            }
        }
    }

    #[test]
    fn drift_examples() {
        let g = one(&[0.0]);
        assert_eq!(client_drift(&g, &[g.clone(), g.clone()]).unwrap(), 0.0);
        assert_eq!(client_drift(&g, &[one(&[1.0]), one(&[-1.0])]).unwrap(), 1.0);
        let far = one(&[2.5]);
        assert_eq!(client_drift(&g, &[far]).unwrap(), 2.5);
    }

    fn record(ms: &[f64]) -> RoundRecord {
        RoundRecord {
            seed: 0,
            round: 0,
            test_accuracy: 0.0,
            test_loss: 0.0,
            train_loss: 0.0,
            layers: ms
                .iter()
                .map(|&m| LayerRecord {
                    name: "w".into(),
                    d_fa_sq: 0.0,
                    d_fs_sq: 0.0,
                    theorem2_residual: 0.0,
                    m_prev: 0.0,
                    m_curr: m,
                    shift: 0.0,
                })
                .collect(),
            client_drift: 0.0,
            payload_bytes_total: 0,
            prediction_counts: vec![],
            num_selected: 0,
            num_inferior: 0,
        }
    }

    #[test]
    fn mean_trace_examples() {
        assert_eq!(mean_trace(&[record(&[0.0]), record(&[0.0])]).0, 0.0);
        let rs = [record(&[0.1]), record(&[-0.3]), record(&[0.2])];
        let (max, per) = mean_trace(&rs);
        assert_eq!(max, 0.3);
        assert_eq!(per, vec![0.1, 0.3, 0.2]);
    }

    #[test]
    fn histogram_examples() {
        let h = weight_histogram(&one(&[0.7; 9]), 4).unwrap();
        assert_eq!(h[0].counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h[0].counts.iter().sum::<u64>(), 9);
        assert!(weight_histogram(&one(&[0.0]), 1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = quantize_model(&one(&vals), &QuantSpec::new(Scheme::Uniform, 4)).unwrap();
        let back = dequantize_model(&q).unwrap();
        let mut distinct: Vec<f32> = back.values().collect();
        distinct.sort_by(f32::total_cmp);
        distinct.dedup();
        assert!(distinct.len() <= 16);
        let h = weight_histogram(&back, 64).unwrap();
        assert!(h[0].counts.iter().filter(|&&c| c > 0).count() <= 16);
        assert_eq!(h[0].counts.iter().sum::<u64>(), 1000);
    }

    #[test]
    fn odd_share_examples() {
        assert_eq!(odd_label_share(&[5, 5, 5, 5]), 0.5);
        assert_eq!(odd_label_share(&[10, 0, 0, 0]), 0.0);
        assert_eq!(odd_label_share(&[0, 3, 0, 1]), 1.0);
        assert_eq!(odd_label_share(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn histogram_conserves_mass(vals in prop::collection::vec(-1e3f32..1e3, 0..200), bins in 2usize..50) {
            let h = weight_histogram(&one(&vals), bins).unwrap();
            prop_assert_eq!(h[0].counts.iter().sum::<u64>(), vals.len() as u64);
            prop_assert_eq!(h[0].edges.len(), bins + 1);
        }

        #[test]
        fn divergences_are_non_negative(a in prop::collection::vec(-5.0f32..5.0, 4), b in prop::collection::vec(-5.0f32..5.0, 4), s in -2.0f64..2.0) {
            let (fa, fs) = round_divergence_exact(&one(&a), &one(&b), &[s]).unwrap();
            prop_assert!(fa[0] >= 0.0 && fs[0] >= 0.0);
        }
    }
}
