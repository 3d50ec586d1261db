//! The outer federated loop: build data, then select, train, aggregate,
//! shift and measure every round.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{DatasetConfig, ExperimentConfig, PartitionConfig};
use crate::aggregation::{
    aggregate_mean, aggregate_weighted, dequantize_uploads, scaffold_server_update, select_clients,
    shift_global, AggregationWeights, ServerState, ShiftScope,
};
use crate::error::{Error, Result};
use crate::local_training::{local_round, Algorithm, ClientState, ClientUpload, Payload};
use crate::metrics::{
    client_drift, evaluate, round_divergence_exact, shift_identity_residual, theorem2_check,
    theorem2_tolerance, LayerRecord, RoundRecord,
};
use crate::params::{init_params, mean_f64, mean_loss, Dataset};
use crate::partitioning::{
    class_means, dirichlet_partition, load_csv_dataset, sample_blobs, shard_partition, Group,
    PartitionPlan,
};
use crate::quantization::{
    deserialize_payload, full_precision_bytes, serialize_payload, write_fsq,
};
use crate::seed;

/// Train and test sets for one seed.
pub fn build_datasets(cfg: &ExperimentConfig, run_seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = &cfg.model;
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Synthetic {
            samples_per_class,
            test_samples_per_class,
            separation,
        } => {
            let means = class_means(
                spec.num_classes,
                spec.input_dim,
                *separation,
                seed::derive(run_seed, &[seed::TAG_DATA]),
            );
            (
                sample_blobs(
                    &means,
                    *samples_per_class,
                    seed::derive(run_seed, &[seed::TAG_DATA, 1]),
                ),
                sample_blobs(
                    &means,
                    *test_samples_per_class,
                    seed::derive(run_seed, &[seed::TAG_TEST_DATA]),
                ),
            )
        }
        DatasetConfig::Csv {
            path,
            label_column,
            test_fraction,
        } => {
            let all = load_csv_dataset(path, label_column)?;
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(&mut seed::derived_rng(run_seed, &[seed::TAG_TEST_DATA]));
            let n_test = ((all.len() as f64 * test_fraction).round() as usize)
                .clamp(1, all.len().saturating_sub(1));
            let (test_idx, train_idx) = idx.split_at(n_test);
            let mut train_idx = train_idx.to_vec();
            let mut test_idx = test_idx.to_vec();
            train_idx.sort_unstable();
            test_idx.sort_unstable();
            (all.subset(&train_idx), all.subset(&test_idx))
        }
    };
    if train.input_dim != spec.input_dim || train.num_classes > spec.num_classes {
        return Err(Error::config(format!(
            "dataset has {} features and {} classes but model expects {} and {}",
            train.input_dim, train.num_classes, spec.input_dim, spec.num_classes
        )));
    }
    Ok((train, test))
}

pub fn build_partition(
    cfg: &ExperimentConfig,
    train: &Dataset,
    run_seed: u64,
) -> Result<PartitionPlan> {
    let n = cfg.federation.num_clients;
    let s = seed::derive(run_seed, &[seed::TAG_PARTITION]);
    match &cfg.partition {
        PartitionConfig::Shard { labels_per_client } => {
            shard_partition(train, n, *labels_per_client, s)
        }
        PartitionConfig::Dirichlet {
            alpha,
            inferior_fraction,
        } => dirichlet_partition(train, n, *alpha, *inferior_fraction, s),
    }
}

/// Everything a finished (or aborted) seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_server: Option<ServerState>,
}

/// Run every configured seed. On failure the records completed so far are
/// returned alongside the error.
pub fn run_experiment(
    cfg: &ExperimentConfig,
) -> std::result::Result<Vec<SeedRun>, (Vec<SeedRun>, Error)> {
    run_experiment_with(cfg, None)
}

/// As [`run_experiment`], optionally dumping inferior payloads under `dump_dir`.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    dump_dir: Option<&Path>,
) -> std::result::Result<Vec<SeedRun>, (Vec<SeedRun>, Error)> {
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.parallelism)
        .build()
    {
        Ok(p) => p,
        Err(e) => return Err((Vec::new(), Error::config(format!("thread pool: {e}")))),
    };
    let mut done = Vec::new();
    for &s in &cfg.run.seeds {
        let mut records = Vec::new();
        match pool.install(|| run_seed(cfg, s, dump_dir, &mut records)) {
            Ok(server) => done.push(SeedRun {
                seed: s,
                records,
                final_server: Some(server),
            }),
            Err(e) => {
                done.push(SeedRun {
                    seed: s,
                    records,
                    final_server: None,
                });
                return Err((done, e));
            }
        }
    }
    Ok(done)
}

/// One seed of the federated loop; records are appended as rounds finish.
pub fn run_seed(
    cfg: &ExperimentConfig,
    run_seed: u64,
    dump_dir: Option<&Path>,
    records: &mut Vec<RoundRecord>,
) -> Result<ServerState> {
    let wrap = |round: u64| {
        move |e: Error| Error::Run {
            seed: run_seed,
            round,
            source: Box::new(e),
        }
    };
    let spec = &cfg.model;
    let local_cfg = cfg.local_config();
    let (train, test) = build_datasets(cfg, run_seed).map_err(wrap(0))?;
    let plan = build_partition(cfg, &train, run_seed).map_err(wrap(0))?;
    plan.validate(train.len()).map_err(wrap(0))?;

    let mut clients: Vec<ClientState> = plan
        .assignments
        .iter()
        .zip(&plan.group_of)
        .enumerate()
        .map(|(id, (idx, &g))| {
            ClientState::new(
                id,
                g,
                train.subset(idx),
                seed::derive(run_seed, &[seed::TAG_CLIENT, id as u64]),
            )
        })
        .collect();
    // Loss is tracked on the data actually held by clients.
    let mut held: Vec<usize> = plan.assignments.concat();
    held.sort_unstable();
    let client_union = train.subset(&held);

    let scaffold = local_cfg.algorithm == Algorithm::Scaffold;
    let init = init_params(spec, seed::derive(run_seed, &[seed::TAG_INIT]));
    let mut server = ServerState {
        server_control: scaffold.then(|| init.zeros_like()),
        global: init,
        round: 0,
        rng_seed: run_seed,
    };

    for t in 1..=cfg.federation.rounds {
        let record = run_round(
            cfg,
            &local_cfg,
            &mut server,
            &mut clients,
            &plan.group_of,
            &client_union,
            &test,
            t,
            dump_dir,
        )
        .map_err(wrap(t))?;
        records.push(record);
    }
    Ok(server)
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    cfg: &ExperimentConfig,
    local_cfg: &crate::local_training::LocalConfig,
    server: &mut ServerState,
    clients: &mut [ClientState],
    groups: &[Group],
    client_union: &Dataset,
    test: &Dataset,
    t: u64,
    dump_dir: Option<&Path>,
) -> Result<RoundRecord> {
    let spec = &cfg.model;
    let fed = &cfg.federation;
    let sel = select_clients(
        groups,
        fed.participation,
        seed::derive(server.rng_seed, &[seed::TAG_SELECT, t]),
    )?;
    let mut chosen = vec![false; clients.len()];
    for &c in &sel.selected {
        chosen[c] = true;
    }

    let global = &server.global;
    let control = server.server_control.as_ref();
    let uploads: Vec<Result<ClientUpload>> = clients
        .par_iter_mut()
        .filter(|c| chosen[c.id])
        .map(|c| {
            local_round(c, global, spec, local_cfg, control, t).map_err(|e| Error::Client {
                client: c.id,
                source: Box::new(e),
            })
        })
        .collect();
    let mut uploads = uploads.into_iter().collect::<Result<Vec<_>>>()?;

    // Quantized uploads travel through the wire format.
    let mut payload_bytes = 0u64;
    for u in &mut uploads {
        match &mut u.payload {
            Payload::Full(p) => payload_bytes += full_precision_bytes(p) as u64,
            Payload::Quantized(q) => {
                let bytes = serialize_payload(q)?;
                payload_bytes += bytes.len() as u64;
                if let Some(dir) = dump_dir {
                    write_fsq(&dump_path(dir, server.rng_seed, t, u.client_id), q)?;
                }
                *q = deserialize_payload(&bytes).map_err(|e| Error::Client {
                    client: u.client_id,
                    source: Box::new(e),
                })?;
            }
        }
    }

    let locals = dequantize_uploads(&uploads)?;
    let drift = client_drift(global, &locals)?;
    let aggregated = match fed.aggregation_weights {
        AggregationWeights::Uniform => aggregate_mean(&locals)?,
        AggregationWeights::BySamples => {
            let w: Vec<f64> = uploads.iter().map(|u| u.num_samples as f64).collect();
            aggregate_weighted(&locals, &w)?
        }
    };
    let (i, k) = (sel.i(), sel.k());
    let shift = shift_global(&aggregated, i, k, fed.shift_scope)?;

    // The shifted model is measured in f64 before it is rounded for storage;
    // without shift enabled these are the divergences FedShift would give.
    let (d_fa, d_fs) = round_divergence_exact(global, &aggregated, &shift.shifts)?;
    let mut layers = Vec::with_capacity(d_fa.len());
    for (li, (prev, curr)) in global.layers().iter().zip(aggregated.layers()).enumerate() {
        let m_prev = mean_f64(&prev.values);
        let m_curr = mean_f64(&curr.values);
        let p = curr.values.len();
        let residual = match fed.shift_scope {
            ShiftScope::PerLayer => theorem2_check(d_fa[li], d_fs[li], m_prev, m_curr, i, k, p),
            ShiftScope::Global => {
                shift_identity_residual(d_fa[li], d_fs[li], m_prev, m_curr, shift.shifts[li], p)
            }
        };
        // NaN residuals fail too.
        if residual.is_nan() || residual.abs() > theorem2_tolerance(d_fa[li]) {
            return Err(Error::Identity(format!(
                "layer {}: divergence residual {residual:e} exceeds {:e}",
                curr.name,
                theorem2_tolerance(d_fa[li])
            )));
        }
        layers.push(LayerRecord {
            name: curr.name.clone(),
            d_fa_sq: d_fa[li],
            d_fs_sq: d_fs[li],
            theorem2_residual: residual,
            m_prev,
            m_curr,
            shift: shift.shifts[li],
        });
    }

    if let Some(c) = &server.server_control {
        if !fed.freeze_controls {
            let deltas: Vec<_> = uploads
                .iter()
                .filter_map(|u| u.control_delta.clone())
                .collect();
            server.server_control = Some(scaffold_server_update(c, &deltas, clients.len())?);
        } else {
            for cl in clients.iter_mut() {
                cl.control_variate = None;
            }
        }
    }

    server.global = if fed.shift_enabled {
        shift.shifted
    } else {
        aggregated
    };
    server.round = t;

    let eval = evaluate(&server.global, spec, test)?;
    let train_loss = mean_loss(&server.global, spec, client_union)?;
    Ok(RoundRecord {
        seed: server.rng_seed,
        round: t,
        test_accuracy: eval.accuracy,
        test_loss: eval.loss,
        train_loss,
        layers,
        client_drift: drift,
        payload_bytes_total: payload_bytes,
        prediction_counts: eval.prediction_counts,
        num_selected: k,
        num_inferior: i,
    })
}

pub fn dump_path(dir: &Path, run_seed: u64, round: u64, client: usize) -> PathBuf {
    dir.join(format!(
        "seed{run_seed}_round{round:04}_client{client:03}.fsq"
    ))
}
