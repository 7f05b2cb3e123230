//! Batch experiment runner: build the dataset, run the communication
//! rounds, stream reports to disk.
//!
//! Every run directory receives rounds.csv (one row per round),
//! rounds.jsonl (the same reports as JSON lines), divergence.jsonl,
//! summary.json, the resolved config and final checkpoints. Fixed seeds
//! replay byte-identically.

use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use fedsim_core::data::{
    partition_by_participant, pool_test_sets, read_participant_csv, synth_noniid, ClientPartition,
    GlobalTestSet, SensorRecording,
};
use fedsim_core::engine::{
    run_round, ClientState, RoundConfig, RoundReport, ServerState, Strategy,
};
use fedsim_core::metrics::LayerDivergence;
use fedsim_core::nn::{init_weights, InputShape, TrainConfig};
use fedsim_core::wire::save_checkpoint;
use fedsim_core::seed;

use crate::config::{arch_to_string, parse_arch, ExperimentConfig};

/// Environment variable naming the root below which relative output
/// directories are created.
pub const OUTPUT_ROOT_ENV: &str = "FEDSIM_OUTPUT_ROOT";

pub fn resolve_output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let dir = &cfg.experiment.output_dir;
    if dir.is_absolute() {
        return dir.clone();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.clone(),
    }
}

struct BuiltDataset {
    partitions: Vec<ClientPartition>,
    global_test: GlobalTestSet,
    classes: usize,
    input: InputShape,
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<BuiltDataset> {
    match cfg.dataset.kind.as_str() {
        "synthetic" => {
            let spec = cfg.synthetic_spec()?;
            let partitions = synth_noniid(&spec)?;
            let global_test = pool_test_sets(&partitions)?;
            Ok(BuiltDataset {
                partitions,
                global_test,
                classes: spec.classes,
                input: InputShape { window: spec.window_len, channels: spec.channels },
            })
        }
        "har_csv" => {
            let har = cfg.dataset.har_csv.as_ref().expect("validated");
            let recordings = load_har_directory(&har.dir)?;
            let outcome =
                partition_by_participant(&recordings, har.split_ratio, har.window, har.overlap)?;
            for id in &outcome.excluded {
                eprintln!("warning: participant {id} excluded (fewer than 5 windows)");
            }
            let inferred = outcome
                .clients
                .iter()
                .flat_map(|c| c.train.labels.iter().chain(c.test.labels.iter()))
                .map(|&l| l as usize + 1)
                .max()
                .unwrap_or(0);
            let classes = har.classes.unwrap_or(inferred);
            if classes < inferred {
                bail!("configured class count {classes} below observed labels ({inferred})");
            }
            Ok(BuiltDataset {
                partitions: outcome.clients,
                global_test: outcome.global_test,
                classes,
                input: InputShape { window: har.window, channels: 6 },
            })
        }
        other => bail!("unknown dataset kind {other:?}"),
    }
}

/// Scans a directory for `<participant>_accelerometer.csv` +
/// `<participant>_gyroscope.csv` pairs, sorted by participant id.
fn load_har_directory(dir: &Path) -> Result<Vec<SensorRecording>> {
    const ACCEL_SUFFIX: &str = "_accelerometer.csv";
    const GYRO_SUFFIX: &str = "_gyroscope.csv";
    let mut participants = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(ACCEL_SUFFIX) {
            participants.push(stem.to_string());
        }
    }
    participants.sort();
    if participants.is_empty() {
        bail!(
            "no participant files found in {} (expected <id>{} / <id>{})",
            dir.display(),
            ACCEL_SUFFIX,
            GYRO_SUFFIX
        );
    }
    let mut recordings = Vec::with_capacity(participants.len());
    for id in &participants {
        let accel = dir.join(format!("{id}{ACCEL_SUFFIX}"));
        let gyro = dir.join(format!("{id}{GYRO_SUFFIX}"));
        if !gyro.exists() {
            bail!("participant {id}: missing {}", gyro.display());
        }
        recordings.push(read_participant_csv(id, &accel, &gyro)?);
    }
    Ok(recordings)
}

const CSV_HEADER: &[&str] = &[
    "round",
    "global_accuracy",
    "global_macro_f1",
    "global_micro_f1",
    "pers_macro_f1_mean",
    "pers_macro_f1_std",
    "pers_micro_f1_mean",
    "pers_micro_f1_std",
    "gen_macro_f1_mean",
    "gen_macro_f1_std",
    "gen_micro_f1_mean",
    "gen_micro_f1_std",
    "units_added",
    "uplink_bytes",
    "downlink_bytes",
    "cum_uplink_bytes",
    "cum_downlink_bytes",
];

fn report_row(report: &RoundReport) -> Vec<String> {
    let opt = |v: Option<f64>| match v {
        Some(x) => x.to_string(),
        None => "NA".to_string(),
    };
    vec![
        report.round.to_string(),
        opt(report.global.map(|g| g.accuracy)),
        opt(report.global.map(|g| g.macro_f1)),
        opt(report.global.map(|g| g.micro_f1)),
        report.personalization.macro_f1.mean.to_string(),
        report.personalization.macro_f1.std.to_string(),
        report.personalization.micro_f1.mean.to_string(),
        report.personalization.micro_f1.std.to_string(),
        report.generalization.macro_f1.mean.to_string(),
        report.generalization.macro_f1.std.to_string(),
        report.generalization.micro_f1.mean.to_string(),
        report.generalization.micro_f1.std.to_string(),
        report
            .units_added
            .iter()
            .map(|u| u.to_string())
            .collect::<Vec<_>>()
            .join(";"),
        report.comm.uplink_bytes.to_string(),
        report.comm.downlink_bytes.to_string(),
        report.comm.cumulative_uplink_bytes.to_string(),
        report.comm.cumulative_downlink_bytes.to_string(),
    ]
}

#[derive(Serialize)]
struct BestRound {
    round: u64,
    value: f64,
}

#[derive(Serialize)]
struct Summary {
    strategy: String,
    rounds: u64,
    clients: usize,
    classes: usize,
    initial_arch: String,
    final_arch: String,
    units_added_total: Vec<usize>,
    /// Best round of the server model on the global test set (absent for
    /// strategies without a global model).
    server_best: Option<BestRound>,
    /// Best round of the mean client personalization score.
    client_best: Option<BestRound>,
    best_generalization: Option<BestRound>,
    final_round: RoundReport,
    total_uplink_bytes: u64,
    total_downlink_bytes: u64,
}

fn best_by<F: Fn(&RoundReport) -> Option<f64>>(
    history: &[RoundReport],
    key: F,
) -> Option<BestRound> {
    let mut best: Option<BestRound> = None;
    for report in history {
        if let Some(value) = key(report) {
            let better = best.as_ref().is_none_or(|b| value > b.value);
            if better {
                best = Some(BestRound { round: report.round, value });
            }
        }
    }
    best
}

#[derive(Serialize)]
struct DivergenceLine<'a> {
    round: u64,
    layers: &'a [LayerDivergence],
}

/// Runs the configured experiment, writing all artifacts into the resolved
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let strategy = cfg.strategy()?;
    let out_dir = resolve_output_dir(cfg);
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    fs::create_dir_all(out_dir.join("checkpoints"))?;

    let data = build_dataset(cfg)?;
    if data.classes < 2 {
        bail!("need at least two classes, found {}", data.classes);
    }
    let arch = parse_arch(&cfg.model.arch, data.input, data.classes)?;
    let initial_arch = arch_to_string(&arch);
    let weights = init_weights(&arch, seed::derive(cfg.experiment.seed, &[0x1417]))?;

    let clients: Vec<ClientState> = data
        .partitions
        .into_iter()
        .map(|p| ClientState::from_partition(p, weights.clone()))
        .collect();
    let client_count = clients.len();
    if matches!(strategy, Strategy::FedPer { base_layers } if base_layers >= arch.layer_count()) {
        bail!("fedper base_layers must stay below the layer count");
    }
    let server = ServerState::new(arch, weights)?;

    let round_cfg = RoundConfig {
        train: TrainConfig {
            local_epochs: cfg.train.local_epochs,
            batch_size: cfg.train.batch_size,
            learning_rate: cfg.train.learning_rate,
            dropout_rate: cfg.train.dropout,
            rng_seed: 0,
        },
        base_seed: cfg.experiment.seed,
        parallel: cfg.experiment.parallel_clients > 1,
    };
    round_cfg.train.validate().map_err(|e| anyhow!("train config: {e}"))?;

    let mut rounds_csv = csv::Writer::from_path(out_dir.join("rounds.csv"))?;
    rounds_csv.write_record(CSV_HEADER)?;
    let mut rounds_jsonl = BufWriter::new(File::create(out_dir.join("rounds.jsonl"))?);
    let mut divergence_jsonl = BufWriter::new(File::create(out_dir.join("divergence.jsonl"))?);
    fs::write(
        out_dir.join("config.resolved.toml"),
        toml::to_string_pretty(cfg).context("serializing resolved config")?,
    )?;

    let mut server = server;
    let mut clients = clients;
    let interval = cfg.experiment.checkpoint_interval;
    for t in 1..=cfg.experiment.rounds {
        let outcome = run_round(&server, &clients, &strategy, &round_cfg, &data.global_test)
            .with_context(|| format!("round {t} failed"))?;
        server = outcome.server;
        clients = outcome.clients;

        rounds_csv.write_record(report_row(&outcome.report))?;
        serde_json::to_writer(&mut rounds_jsonl, &outcome.report)?;
        rounds_jsonl.write_all(b"\n")?;
        let line = DivergenceLine { round: t, layers: &outcome.divergence };
        serde_json::to_writer(&mut divergence_jsonl, &line)?;
        divergence_jsonl.write_all(b"\n")?;

        if interval > 0 && t % interval == 0 && t != cfg.experiment.rounds {
            let path = out_dir.join(format!("checkpoints/server_round_{t:05}.flck"));
            save_checkpoint(&path, &server.arch, &server.weights)?;
            for (idx, client) in clients.iter().enumerate() {
                let path =
                    out_dir.join(format!("checkpoints/client_{idx:02}_round_{t:05}.flck"));
                save_checkpoint(&path, &server.arch, &client.weights)?;
            }
        }
    }
    rounds_csv.flush()?;
    rounds_jsonl.flush()?;
    divergence_jsonl.flush()?;

    save_checkpoint(
        &out_dir.join("checkpoints/server_final.flck"),
        &server.arch,
        &server.weights,
    )?;
    for (idx, client) in clients.iter().enumerate() {
        save_checkpoint(
            &out_dir.join(format!("checkpoints/client_{idx:02}_final.flck")),
            &server.arch,
            &client.weights,
        )?;
    }

    let mut units_total = vec![0usize; server.arch.layer_count()];
    for report in &server.history {
        for (total, added) in units_total.iter_mut().zip(&report.units_added) {
            *total += added;
        }
    }
    let summary = Summary {
        strategy: strategy.name().to_string(),
        rounds: cfg.experiment.rounds,
        clients: client_count,
        classes: data.classes,
        initial_arch,
        final_arch: arch_to_string(&server.arch),
        units_added_total: units_total,
        server_best: best_by(&server.history, |r| r.global.map(|g| g.macro_f1)),
        client_best: best_by(&server.history, |r| Some(r.personalization.macro_f1.mean)),
        best_generalization: best_by(&server.history, |r| Some(r.generalization.macro_f1.mean)),
        final_round: server.history.last().expect("at least one round").clone(),
        total_uplink_bytes: server.ledger.cumulative_uplink_bytes,
        total_downlink_bytes: server.ledger.cumulative_downlink_bytes,
    };
    let mut summary_file = File::create(out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut summary_file, &summary)?;
    summary_file.write_all(b"\n")?;

    Ok(out_dir)
}
