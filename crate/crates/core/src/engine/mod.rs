//! Round-based federated simulation: broadcast server weights, train every
//! client locally, aggregate with the chosen strategy, account the traffic
//! and emit one report per communication round.
//!
//! Rounds are functional: `run_round` consumes nothing and returns fresh
//! server/client states, so a failed aggregation leaves everything as it
//! was. Client evaluation happens on the end-of-round local models (after
//! any layer-wise sub-rounds), global evaluation on the new server model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    fedavg, feddist, fedma_lite, fedper, AggregatorDirective, FedDistConfig, FedMaConfig,
    SubRoundTrainer,
};
use crate::data::{ClientPartition, GlobalTestSet, WindowedDataset};
use crate::metrics::{divergence_snapshot, mean_std, LayerDivergence};
use crate::nn::{evaluate, train_local, ModelArchitecture, TrainConfig, WeightSet};
use crate::wire::payload_size;
use crate::{seed, Error, Result};

/// One simulated participant and its current local model.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: String,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub weights: WeightSet,
    pub n_k: usize,
}

impl ClientState {
    pub fn from_partition(p: ClientPartition, weights: WeightSet) -> Self {
        ClientState {
            id: p.client_id,
            train: p.train,
            test: p.test,
            weights,
            n_k: p.n_k,
        }
    }
}

/// Aggregation strategy selected for a run.
#[derive(Debug, Clone)]
pub enum Strategy {
    FedAvg,
    FedPer { base_layers: usize },
    FedMa { config: FedMaConfig },
    FedDist { config: FedDistConfig },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedPer { .. } => "fedper",
            Strategy::FedMa { .. } => "fedma",
            Strategy::FedDist { .. } => "feddist",
        }
    }

    /// Layers exchanged at broadcast and collection.
    fn exchange_mask(&self, layer_count: usize) -> Vec<bool> {
        match self {
            Strategy::FedPer { base_layers } => {
                (0..layer_count).map(|i| i < *base_layers).collect()
            }
            _ => vec![true; layer_count],
        }
    }

    /// Whether the server holds a usable full model.
    pub fn has_global_model(&self) -> bool {
        !matches!(self, Strategy::FedPer { .. })
    }
}

/// Cumulative communication totals, payload bytes only.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CommLedger {
    pub cumulative_uplink_bytes: u64,
    pub cumulative_downlink_bytes: u64,
}

/// Per-round traffic slice with the cumulative totals after the round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommSlice {
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub cumulative_uplink_bytes: u64,
    pub cumulative_downlink_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GlobalScores {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClientScores {
    pub macro_f1: MeanStd,
    pub micro_f1: MeanStd,
}

/// Everything measured in one communication round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    /// `None` when the strategy has no usable global model.
    pub global: Option<GlobalScores>,
    pub personalization: ClientScores,
    pub generalization: ClientScores,
    /// Units appended per architecture layer this round.
    pub units_added: Vec<usize>,
    pub comm: CommSlice,
}

/// Server-side simulation state.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub arch: ModelArchitecture,
    pub weights: WeightSet,
    /// Completed communication rounds.
    pub round: u64,
    pub ledger: CommLedger,
    pub history: Vec<RoundReport>,
}

impl ServerState {
    pub fn new(arch: ModelArchitecture, weights: WeightSet) -> Result<Self> {
        weights.matches(&arch)?;
        Ok(ServerState {
            arch,
            weights,
            round: 0,
            ledger: CommLedger::default(),
            history: Vec::new(),
        })
    }
}

/// Engine-level configuration for a round.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub train: TrainConfig,
    /// Experiment seed; per-client, per-round, per-phase seeds derive from
    /// it.
    pub base_seed: u64,
    /// Train clients on the rayon pool instead of sequentially. Results
    /// are identical either way.
    pub parallel: bool,
}

pub struct RoundOutcome {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub report: RoundReport,
    pub divergence: Vec<LayerDivergence>,
}

fn train_clients(
    arch: &ModelArchitecture,
    jobs: Vec<(usize, WeightSet)>,
    clients: &[ClientState],
    cfg: &RoundConfig,
    round: u64,
    phase: u64,
) -> Result<Vec<WeightSet>> {
    let run = |(idx, weights): &(usize, WeightSet)| -> Result<WeightSet> {
        let client = &clients[*idx];
        let train_cfg = TrainConfig {
            rng_seed: seed::derive(cfg.base_seed, &[round, *idx as u64, phase]),
            ..cfg.train.clone()
        };
        train_local(arch, weights, &client.train, &train_cfg)
    };
    if cfg.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

/// Client retraining service for layer-wise sub-rounds, backed by real
/// local training on each client's own data.
pub struct LocalSubRoundTrainer<'a> {
    clients: &'a [ClientState],
    cfg: &'a RoundConfig,
    round: u64,
    phase: u64,
}

impl<'a> LocalSubRoundTrainer<'a> {
    pub fn new(clients: &'a [ClientState], cfg: &'a RoundConfig, round: u64) -> Self {
        LocalSubRoundTrainer { clients, cfg, round, phase: 0 }
    }
}

impl SubRoundTrainer for LocalSubRoundTrainer<'_> {
    fn retrain(
        &mut self,
        arch: &ModelArchitecture,
        weights: Vec<WeightSet>,
        frozen: &[bool],
    ) -> Result<Vec<WeightSet>> {
        self.phase += 1;
        let mut frozen_arch = arch.clone();
        for (spec, &f) in frozen_arch.layers.iter_mut().zip(frozen) {
            spec.frozen = f;
        }
        let jobs: Vec<(usize, WeightSet)> = weights.into_iter().enumerate().collect();
        train_clients(&frozen_arch, jobs, self.clients, self.cfg, self.round, self.phase)
    }
}

/// The three-way metric triple over an evaluation round.
#[derive(Debug, Clone)]
pub struct EvalTriple {
    pub global: Option<GlobalScores>,
    pub personalization: ClientScores,
    pub generalization: ClientScores,
}

/// Evaluates the server model on the global test set and every client
/// model on its own and the global test set. `server` is `None` for
/// strategies without a usable global model.
pub fn evaluate_round(
    arch: &ModelArchitecture,
    server: Option<&WeightSet>,
    clients: &[(WeightSet, &WindowedDataset)],
    global_test: &GlobalTestSet,
) -> Result<EvalTriple> {
    if global_test.data.is_empty() {
        return Err(Error::EmptyDataset("global test set".into()));
    }
    let global = match server {
        Some(w) => {
            let cm = evaluate(arch, w, &global_test.data)?;
            Some(GlobalScores {
                accuracy: cm.accuracy(),
                macro_f1: cm.macro_f1(),
                micro_f1: cm.micro_f1(),
            })
        }
        None => None,
    };
    let mut own_macro = Vec::with_capacity(clients.len());
    let mut own_micro = Vec::with_capacity(clients.len());
    let mut gen_macro = Vec::with_capacity(clients.len());
    let mut gen_micro = Vec::with_capacity(clients.len());
    for (weights, own_test) in clients {
        let cm = evaluate(arch, weights, own_test)?;
        own_macro.push(cm.macro_f1());
        own_micro.push(cm.micro_f1());
        let cm = evaluate(arch, weights, &global_test.data)?;
        gen_macro.push(cm.macro_f1());
        gen_micro.push(cm.micro_f1());
    }
    let stats = |values: &[f64]| {
        let (mean, std) = mean_std(values);
        MeanStd { mean, std }
    };
    Ok(EvalTriple {
        global,
        personalization: ClientScores {
            macro_f1: stats(&own_macro),
            micro_f1: stats(&own_micro),
        },
        generalization: ClientScores {
            macro_f1: stats(&gen_macro),
            micro_f1: stats(&gen_micro),
        },
    })
}

/// Runs one communication round and returns the successor states plus the
/// round report. On error nothing is committed.
pub fn run_round(
    server: &ServerState,
    clients: &[ClientState],
    strategy: &Strategy,
    cfg: &RoundConfig,
    global_test: &GlobalTestSet,
) -> Result<RoundOutcome> {
    if clients.is_empty() {
        return Err(Error::InvalidConfig("no clients".into()));
    }
    cfg.train.validate()?;
    let round = server.round + 1;
    let layer_count = server.arch.layer_count();
    let exchange = strategy.exchange_mask(layer_count);
    let k = clients.len() as u64;

    // Broadcast: clients overwrite the exchanged layers with server copies.
    let mut downlink = k * payload_size(&server.weights, &exchange);
    let broadcast: Vec<(usize, WeightSet)> = clients
        .iter()
        .enumerate()
        .map(|(idx, client)| {
            let mut w = client.weights.clone();
            for (i, &shared) in exchange.iter().enumerate() {
                if shared {
                    w.layers[i] = server.weights.layers[i].clone();
                }
            }
            w.matches(&server.arch).map_err(|e| {
                Error::Aggregation(format!("client {idx} out of sync at broadcast: {e}"))
            })?;
            Ok((idx, w))
        })
        .collect::<Result<_>>()?;

    // Local training.
    let trained = train_clients(&server.arch, broadcast, clients, cfg, round, 0)?;

    // Collection: clients send back the exchanged layers.
    let mut uplink: u64 = trained
        .iter()
        .map(|w| payload_size(w, &exchange))
        .sum();

    // Aggregation.
    let n: Vec<usize> = clients.iter().map(|c| c.n_k).collect();
    let (directive, end_states): (AggregatorDirective, Vec<WeightSet>) = match strategy {
        Strategy::FedAvg => {
            let refs: Vec<&WeightSet> = trained.iter().collect();
            let averaged = fedavg(&refs, &n)?;
            let directive = AggregatorDirective::simple(
                server.arch.clone(),
                averaged,
                (0..layer_count).collect(),
            );
            (directive, trained)
        }
        Strategy::FedPer { base_layers } => {
            let refs: Vec<&WeightSet> = trained.iter().collect();
            let directive = fedper(&server.arch, &server.weights, &refs, &n, *base_layers)?;
            (directive, trained)
        }
        Strategy::FedMa { config } => {
            let mut trainer = LocalSubRoundTrainer { clients, cfg, round, phase: 0 };
            let outcome = fedma_lite(&server.arch, trained, &n, config, &mut trainer)?;
            (outcome.directive, outcome.client_weights)
        }
        Strategy::FedDist { config } => {
            let mut trainer = LocalSubRoundTrainer { clients, cfg, round, phase: 0 };
            let outcome = feddist(&server.arch, trained, &n, config, round, &mut trainer)?;
            (outcome.directive, outcome.client_weights)
        }
    };
    directive.validate()?;
    for record in &directive.freeze_plan {
        downlink += record.downlink_bytes;
        uplink += record.uplink_bytes;
    }

    // Evaluation: clients on their end-of-round models, server on the new
    // aggregate.
    let eval_clients: Vec<(WeightSet, &WindowedDataset)> = end_states
        .iter()
        .cloned()
        .zip(clients.iter().map(|c| &c.test))
        .collect();
    let server_eval = strategy
        .has_global_model()
        .then_some(&directive.server_weights);
    let triple = evaluate_round(&directive.arch, server_eval, &eval_clients, global_test)?;

    let end_refs: Vec<&WeightSet> = end_states.iter().collect();
    let divergence = divergence_snapshot(&directive.arch, &directive.server_weights, &end_refs)?;

    let ledger = CommLedger {
        cumulative_uplink_bytes: server.ledger.cumulative_uplink_bytes + uplink,
        cumulative_downlink_bytes: server.ledger.cumulative_downlink_bytes + downlink,
    };
    let report = RoundReport {
        round,
        global: triple.global,
        personalization: triple.personalization,
        generalization: triple.generalization,
        units_added: directive.units_added.clone(),
        comm: CommSlice {
            uplink_bytes: uplink,
            downlink_bytes: downlink,
            cumulative_uplink_bytes: ledger.cumulative_uplink_bytes,
            cumulative_downlink_bytes: ledger.cumulative_downlink_bytes,
        },
    };

    let mut history = server.history.clone();
    history.push(report.clone());
    let next_server = ServerState {
        arch: directive.arch,
        weights: directive.server_weights,
        round,
        ledger,
        history,
    };
    let next_clients: Vec<ClientState> = clients
        .iter()
        .zip(end_states)
        .map(|(c, weights)| ClientState { weights, ..c.clone() })
        .collect();
    Ok(RoundOutcome {
        server: next_server,
        clients: next_clients,
        report,
        divergence,
    })
}
