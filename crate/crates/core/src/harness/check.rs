//! Identity checks shared by the `check` subcommand and the test suites.

use rand::Rng;

use crate::aggregation::{shift_global, ShiftScope};
use crate::error::Result;
use crate::metrics::{divergence_condition, DivergenceCondition, RoundRecord};
use crate::params::{mean_f64, Layer, LayeredParams};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftMeanReport {
    pub cases: usize,
    pub failures: usize,
    /// Largest `|error| / (1 + |mean|)` seen.
    pub worst: f64,
}

/// Randomized check that the shifted layer mean is `(S/K)` times the
/// aggregated one, to `1e-6 * (1 + |mean|)`.
pub fn shift_mean_cases(cases: usize, master: u64) -> Result<ShiftMeanReport> {
    let mut rng = seed::rng(master);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let len = rng.random_range(1..=512);
        let offset: f32 = rng.random_range(-2.0..2.0);
        let scale: f32 = 10f32.powf(rng.random_range(-3.0..1.0));
        let values: Vec<f32> = (0..len)
            .map(|_| offset + scale * rng.random_range(-1.0f32..1.0))
            .collect();
        let k = rng.random_range(1..=100);
        let i = rng.random_range(0..=k);
        let layer = LayeredParams::new(vec![Layer {
            name: "w".into(),
            values,
        }])?;
        let out = shift_global(&layer, i, k, ShiftScope::PerLayer)?;
        let m = mean_f64(&layer.layers()[0].values);
        let got = mean_f64(&out.shifted.layers()[0].values);
        let err = (got - (k - i) as f64 / k as f64 * m).abs() / (1.0 + m.abs());
        worst = worst.max(err);
        if err > 1e-6 {
            failures += 1;
        }
    }
    Ok(ShiftMeanReport {
        cases,
        failures,
        worst,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdentityReport {
    pub layer_rounds: usize,
    pub worst_residual_ratio: f64,
    pub sign_checked: usize,
    pub sign_mismatches: usize,
}

/// Residual-to-tolerance ratio and sign/condition agreement over records.
pub fn divergence_identity_report(records: &[RoundRecord]) -> IdentityReport {
    let mut rep = IdentityReport::default();
    for r in records {
        let s = r.num_selected - r.num_inferior;
        for l in &r.layers {
            rep.layer_rounds += 1;
            let ratio = l.theorem2_residual.abs() / (1e-8 * (1.0 + l.d_fa_sq));
            rep.worst_residual_ratio = rep.worst_residual_ratio.max(ratio);
            let diff = l.d_fa_sq - l.d_fs_sq;
            if diff.abs() > 1e-10 {
                rep.sign_checked += 1;
                let expect = if diff > 0.0 {
                    DivergenceCondition::FedshiftSmaller
                } else {
                    DivergenceCondition::FedshiftGreater
                };
                if divergence_condition(l.m_prev, l.m_curr, s, r.num_selected) != expect {
                    rep.sign_mismatches += 1;
                }
            }
        }
    }
    rep
}
