//! Synthetic data, CSV ingestion, and the two non-IID client splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Dataset;
use crate::seed;

/// Upload precision class of a client, fixed for the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Superior,
    Inferior,
}

/// Per-client sample indices into a master dataset, plus group membership.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub group_of: Vec<Group>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_inferior(&self) -> usize {
        self.group_of
            .iter()
            .filter(|&&g| g == Group::Inferior)
            .count()
    }

    /// Disjoint, non-empty assignments with one group per client.
    pub fn validate(&self, data_len: usize) -> Result<()> {
        if self.assignments.len() != self.group_of.len() {
            return Err(Error::config("assignments and groups differ in length"));
        }
        let mut seen = vec![false; data_len];
        for (c, idx) in self.assignments.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::config(format!("client {c} has no samples")));
            }
            for &i in idx {
                if i >= data_len || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::config(format!(
                        "sample {i} assigned twice or out of range"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Class means for the synthetic Gaussian-blob task.
///
/// With `input_dim >= num_classes` the means sit on scaled coordinate axes, so
/// every pair is exactly `separation` apart. Otherwise random directions are
/// rescaled until the closest pair is `separation` apart.
pub fn class_means(
    num_classes: usize,
    input_dim: usize,
    separation: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed);
    if input_dim >= num_classes {
        let mut axes: Vec<usize> = (0..input_dim).collect();
        axes.shuffle(&mut rng);
        let scale = separation / std::f64::consts::SQRT_2;
        return (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; input_dim];
                m[axes[c]] = scale;
                m
            })
            .collect();
    }
    let mut means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut closest = f64::INFINITY;
    for i in 0..num_classes {
        for j in i + 1..num_classes {
            let d: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            closest = closest.min(d.sqrt());
        }
    }
    let scale = if closest > 0.0 && closest.is_finite() {
        separation / closest
    } else {
        0.0
    };
    for m in &mut means {
        m.iter_mut().for_each(|v| *v *= scale);
    }
    means
}

/// Draw `samples_per_class` unit-variance points around each mean, shuffled.
pub fn sample_blobs(means: &[Vec<f64>], samples_per_class: usize, seed: u64) -> Dataset {
    let mut rng = seed::rng(seed);
    let num_classes = means.len();
    let input_dim = means.first().map_or(0, Vec::len);
    let mut order: Vec<usize> = (0..num_classes * samples_per_class)
        .map(|i| i / samples_per_class)
        .collect();
    order.shuffle(&mut rng);
    let mut features = Vec::with_capacity(order.len() * input_dim);
    for &c in &order {
        for &mu in &means[c] {
            features.push((mu + rng.sample::<f64, _>(StandardNormal)) as f32);
        }
    }
    Dataset {
        features,
        labels: order,
        input_dim,
        num_classes,
    }
}

pub fn synth_dataset(
    num_classes: usize,
    samples_per_class: usize,
    input_dim: usize,
    class_separation: f64,
    seed: u64,
) -> Dataset {
    let means = class_means(num_classes, input_dim, class_separation, seed);
    sample_blobs(
        &means,
        samples_per_class,
        seed::derive(seed, &[seed::TAG_DATA]),
    )
}

/// Label-group shard split.
///
/// Clients `0..N/2` are superior and receive shards of even labels; clients
/// `N/2..N` are inferior and receive shards of odd labels. Shards are
/// label-pure, so no client holds more than `labels_per_client` labels.
pub fn shard_partition(
    data: &Dataset,
    num_clients: usize,
    labels_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 || !num_clients.is_multiple_of(2) {
        return Err(Error::config(format!(
            "shard partition needs an even, positive client count, got {num_clients}"
        )));
    }
    if data.num_classes < 2 {
        return Err(Error::config("shard partition needs at least two classes"));
    }
    if labels_per_client == 0 {
        return Err(Error::config("labels_per_client must be positive"));
    }
    let mut rng = seed::rng(seed);
    let half = num_clients / 2;
    let mut assignments = vec![Vec::new(); num_clients];
    let mut group_of = vec![Group::Superior; num_clients];
    group_of[half..].fill(Group::Inferior);

    for (parity, first_client) in [(0usize, 0usize), (1, half)] {
        let mut by_label: Vec<(usize, Vec<usize>)> = (parity..data.num_classes)
            .step_by(2)
            .map(|l| {
                let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == l).collect();
                (l, idx)
            })
            .filter(|(_, idx)| !idx.is_empty())
            .collect();
        let shards_needed = half * labels_per_client;
        if by_label.is_empty() {
            return Err(Error::config(format!(
                "no samples with {} labels",
                if parity == 0 { "even" } else { "odd" }
            )));
        }
        if shards_needed < by_label.len() {
            // Fewer shards than labels: a random subset of labels is used.
            by_label.shuffle(&mut rng);
            by_label.truncate(shards_needed);
            by_label.sort_by_key(|(l, _)| *l);
        }
        let counts: Vec<usize> = by_label.iter().map(|(_, idx)| idx.len()).collect();
        let per_label = apportion(shards_needed, &counts);

        let mut shards: Vec<Vec<usize>> = Vec::with_capacity(shards_needed);
        for ((label, mut idx), n_shards) in by_label.into_iter().zip(per_label) {
            if idx.len() < n_shards {
                return Err(Error::config(format!(
                    "label {label} has {} samples, too few for {n_shards} shards",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            let base = idx.len() / n_shards;
            let extra = idx.len() % n_shards;
            let mut start = 0;
            for s in 0..n_shards {
                let len = base + usize::from(s < extra);
                shards.push(idx[start..start + len].to_vec());
                start += len;
            }
        }
        shards.shuffle(&mut rng);
        for (k, shard) in shards.into_iter().enumerate() {
            assignments[first_client + k / labels_per_client].extend(shard);
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    let plan = PartitionPlan {
        assignments,
        group_of,
    };
    plan.validate(data.len())?;
    Ok(plan)
}

/// Largest-remainder split of `total` slots proportional to `weights`,
/// with every entry getting at least one slot.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let n = weights.len();
    debug_assert!(total >= n);
    let sum: usize = weights.iter().sum();
    let spare = total - n;
    let mut out: Vec<usize> = vec![1; n];
    let mut rema: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut given = 0;
    for (i, &w) in weights.iter().enumerate() {
        let exact = spare as f64 * w as f64 / sum as f64;
        let floor = exact.floor() as usize;
        out[i] += floor;
        given += floor;
        rema.push((exact - floor as f64, i));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(spare - given) {
        out[i] += 1;
    }
    out
}

/// Dirichlet(alpha) split: each class's samples are spread over clients by an
/// independent Dirichlet draw. Inferior membership is a random subset of
/// `round(inferior_fraction * N)` clients.
pub fn dirichlet_partition(
    data: &Dataset,
    num_clients: usize,
    alpha: f64,
    inferior_fraction: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if !(0.0..=1.0).contains(&inferior_fraction) {
        return Err(Error::config(format!(
            "inferior_fraction must be in [0, 1], got {inferior_fraction}"
        )));
    }
    if num_clients == 0 || data.len() < num_clients {
        return Err(Error::config(format!(
            "{} samples cannot fill {num_clients} clients",
            data.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];

    for class in 0..data.num_classes {
        let mut idx: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels[i] == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // Every gamma draw underflowed: the whole class goes to one client.
            props.fill(0.0);
            props[rng.random_range(0..num_clients)] = 1.0;
        }
        let n = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (client, p) in props.iter().enumerate() {
            cum += p;
            let end = if client + 1 == num_clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            assignments[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }

    // Empty clients take one sample from the current largest client.
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let donor = (0..num_clients)
            .max_by(|&a, &b| {
                assignments[a]
                    .len()
                    .cmp(&assignments[b].len())
                    .then(b.cmp(&a))
            })
            .expect("at least one client");
        let moved = assignments[donor].pop().expect("donor has samples");
        assignments[empty].push(moved);
    }
    for a in &mut assignments {
        a.sort_unstable();
    }

    let num_inferior = (inferior_fraction * num_clients as f64).round() as usize;
    let mut ids: Vec<usize> = (0..num_clients).collect();
    ids.shuffle(&mut rng);
    let mut group_of = vec![Group::Superior; num_clients];
    for &c in &ids[..num_inferior] {
        group_of[c] = Group::Inferior;
    }

    let plan = PartitionPlan {
        assignments,
        group_of,
    };
    plan.validate(data.len())?;
    Ok(plan)
}

/// Load a headed CSV of numeric features plus one integer label column.
/// Features are standardized per column; constant columns become zeros.
pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::data(format!("no column named `{label_column}`")))?;
    let input_dim = headers.len() - 1;
    if input_dim == 0 {
        return Err(Error::data("no feature columns"));
    }

    let mut raw: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == label_at {
                let label = field.parse::<usize>().map_err(|_| {
                    Error::data(format!(
                        "line {line}: label `{field}` is not a non-negative integer"
                    ))
                })?;
                labels.push(label);
            } else {
                let v = field.parse::<f64>().map_err(|_| {
                    Error::data(format!(
                        "line {line}: column `{}` value `{field}` is not numeric",
                        &headers[col]
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::data(format!("line {line}: non-finite value")));
                }
                raw.push(v);
            }
        }
    }

    let rows = labels.len();
    let mut features = vec![0.0f32; raw.len()];
    for col in 0..input_dim {
        let column = (0..rows).map(|r| raw[r * input_dim + col]);
        let mean = column.clone().sum::<f64>() / rows.max(1) as f64;
        let var = column.map(|v| (v - mean).powi(2)).sum::<f64>() / rows.max(1) as f64;
        let std = var.sqrt();
        for r in 0..rows {
            features[r * input_dim + col] = if std > 1e-12 {
                ((raw[r * input_dim + col] - mean) / std) as f32
            } else {
                0.0
            };
        }
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, input_dim, num_classes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(match line {
            Some(l) => format!("{}: line {l}: {other:?}", path.display()),
            None => format!("{}: {other:?}", path.display()),
        }),
    }
}
