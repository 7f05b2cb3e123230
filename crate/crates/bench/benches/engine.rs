use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fedsim_core::aggregate::{FedDistConfig, GrowthTrigger, PenaltyPolicy};
use fedsim_core::data::{
    pool_test_sets, synth_noniid, window, SensorRecording, SkewMode, SyntheticSpec,
};
use fedsim_core::engine::{run_round, ClientState, RoundConfig, ServerState, Strategy};
use fedsim_core::nn::{init_weights, InputShape, LayerKind, ModelArchitecture, TrainConfig};

fn setup(clients: usize) -> (ServerState, Vec<ClientState>, fedsim_core::data::GlobalTestSet) {
    let arch = ModelArchitecture::new(
        InputShape { window: 16, channels: 3 },
        vec![
            LayerKind::Conv1D { filters: 8, kernel: 5 },
            LayerKind::MaxPool1D { pool: 2 },
            LayerKind::Dense { units: 16 },
            LayerKind::Softmax { classes: 4 },
        ],
    )
    .unwrap();
    let spec = SyntheticSpec {
        clients,
        classes: 4,
        samples_per_client: 80,
        window_len: 16,
        channels: 3,
        mode: SkewMode::Iid,
        noise_std: 0.25,
        train_ratio: 0.8,
        seed: 1,
    };
    let weights = init_weights(&arch, 0).unwrap();
    let parts = synth_noniid(&spec).unwrap();
    let global = pool_test_sets(&parts).unwrap();
    let clients = parts
        .into_iter()
        .map(|p| ClientState::from_partition(p, weights.clone()))
        .collect();
    (ServerState::new(arch, weights).unwrap(), clients, global)
}

fn round_cfg() -> RoundConfig {
    RoundConfig {
        train: TrainConfig {
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.01,
            dropout_rate: 0.5,
            rng_seed: 0,
        },
        base_seed: 2,
        parallel: false,
    }
}

fn bench_rounds(c: &mut Criterion) {
    let mut group = c.benchmark_group("communication_round");
    group.sample_size(10);
    let (server, clients, global) = setup(5);
    let cfg = round_cfg();
    group.bench_function("fedavg_5_clients", |b| {
        b.iter(|| black_box(run_round(&server, &clients, &Strategy::FedAvg, &cfg, &global).unwrap()))
    });
    let strategy = Strategy::FedDist {
        config: FedDistConfig {
            penalty: PenaltyPolicy::none(),
            trigger: GrowthTrigger::IndividualDistance,
            append_all_offenders: false,
        },
    };
    group.bench_function("feddist_5_clients", |b| {
        b.iter(|| black_box(run_round(&server, &clients, &strategy, &cfg, &global).unwrap()))
    });
    group.finish();
}

fn bench_windowing(c: &mut Criterion) {
    let rec = SensorRecording {
        participant_id: "p".into(),
        samples: (0..60_000).map(|i| (i as f64 * 0.01).sin()).collect(),
        channels: 6,
        labels: vec![1; 10_000],
        sampling_rate_hz: 50.0,
    };
    c.bench_function("window_10k_timesteps", |b| {
        b.iter(|| black_box(window(&rec, 128, 64).unwrap()))
    });
}

criterion_group!(benches, bench_rounds, bench_windowing);
criterion_main!(benches);
