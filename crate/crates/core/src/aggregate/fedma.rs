//! Layer-wise matched averaging.
//!
//! Hidden layers are treated as permutation invariant: a running global
//! layer is matched against every client's units with the Hungarian
//! algorithm on a Euclidean cost matrix, matched units are fused by
//! weighted averaging, and units whose best match costs more than epsilon
//! become new global units. After each matched layer, clients adopt it and
//! retrain the layers above before matching continues. The softmax layer
//! is aggregated by plain weighted averaging.

use serde::{Deserialize, Serialize};

use super::{
    fedavg_layers, pairwise_distance, solve_assignment, AggregatorDirective, SubRoundRecord,
    SubRoundTrainer,
};
use crate::nn::{LayerKind, LayerParams, ModelArchitecture, WeightSet};
use crate::wire::payload_size;
use crate::{Error, Result};

/// New-unit acceptance threshold for match costs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchEpsilon {
    /// Per matching step, `mu + 3*sigma` of that step's match costs.
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FedMaConfig {
    pub epsilon: MatchEpsilon,
}

impl Default for FedMaConfig {
    fn default() -> Self {
        FedMaConfig { epsilon: MatchEpsilon::Adaptive }
    }
}

#[derive(Debug)]
pub struct FedMaOutcome {
    pub directive: AggregatorDirective,
    /// Client weights at the end of the round (adopted hidden layers plus
    /// their own retrained upper layers).
    pub client_weights: Vec<WeightSet>,
}

fn append_unit(layer: &mut LayerParams, vec: &[f64]) {
    let (bias, incoming) = vec.split_last().expect("unit vector carries a bias");
    match layer {
        LayerParams::Conv { filters, weights, biases, .. } => {
            weights.extend_from_slice(incoming);
            biases.push(*bias);
            *filters += 1;
        }
        LayerParams::Dense { units, weights, biases, .. } => {
            weights.extend_from_slice(incoming);
            biases.push(*bias);
            *units += 1;
        }
        LayerParams::Pool => unreachable!("pool layers are never matched"),
    }
}

fn blend_unit(layer: &mut LayerParams, unit: usize, client_vec: &[f64], acc: f64, n_k: f64) {
    let total = acc + n_k;
    match layer {
        LayerParams::Conv { weights, biases, kernel, in_channels, .. } => {
            let w = *kernel * *in_channels;
            for j in 0..w {
                let g = &mut weights[unit * w + j];
                *g = (acc * *g + n_k * client_vec[j]) / total;
            }
            biases[unit] = (acc * biases[unit] + n_k * client_vec[w]) / total;
        }
        LayerParams::Dense { weights, biases, in_dim, .. } => {
            let w = *in_dim;
            for j in 0..w {
                let g = &mut weights[unit * w + j];
                *g = (acc * *g + n_k * client_vec[j]) / total;
            }
            biases[unit] = (acc * biases[unit] + n_k * client_vec[w]) / total;
        }
        LayerParams::Pool => unreachable!(),
    }
}

/// Rebuilds a layer whose input features were renumbered. `map[slot]`
/// names the old feature that now feeds input slot `slot` (or `None` for a
/// zero-initialized slot); `positions` is the number of flattened
/// positions each feature occupies at this layer's input.
fn remap_inputs(layer: &LayerParams, map: &[Option<usize>], positions: usize) -> LayerParams {
    match layer {
        LayerParams::Dense { units, weights, biases, in_dim } => {
            let new_in = map.len() * positions;
            let mut new_w = vec![0.0; units * new_in];
            for u in 0..*units {
                for (slot, src) in map.iter().enumerate() {
                    if let Some(d) = src {
                        for p in 0..positions {
                            new_w[u * new_in + slot * positions + p] =
                                weights[u * in_dim + d * positions + p];
                        }
                    }
                }
            }
            LayerParams::Dense { units: *units, in_dim: new_in, weights: new_w, biases: biases.clone() }
        }
        LayerParams::Conv { filters, kernel, weights, biases, in_channels } => {
            let new_ch = map.len();
            let mut new_w = vec![0.0; filters * kernel * new_ch];
            for f in 0..*filters {
                for dt in 0..*kernel {
                    for (slot, src) in map.iter().enumerate() {
                        if let Some(d) = src {
                            new_w[(f * kernel + dt) * new_ch + slot] =
                                weights[(f * kernel + dt) * in_channels + d];
                        }
                    }
                }
            }
            LayerParams::Conv {
                filters: *filters,
                kernel: *kernel,
                in_channels: new_ch,
                weights: new_w,
                biases: biases.clone(),
            }
        }
        LayerParams::Pool => LayerParams::Pool,
    }
}

fn epsilon_threshold(cfg: &FedMaConfig, match_costs: &[f64]) -> f64 {
    match cfg.epsilon {
        MatchEpsilon::Fixed(e) => e,
        MatchEpsilon::Adaptive => {
            let n = match_costs.len() as f64;
            let mu = match_costs.iter().sum::<f64>() / n;
            let var = match_costs.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / n;
            mu + 3.0 * var.sqrt()
        }
    }
}

/// Runs one FedMA round over locally trained client weights.
pub fn fedma_lite(
    arch: &ModelArchitecture,
    client_weights: Vec<WeightSet>,
    n: &[usize],
    cfg: &FedMaConfig,
    trainer: &mut dyn SubRoundTrainer,
) -> Result<FedMaOutcome> {
    if client_weights.len() < 2 {
        return Err(Error::Aggregation("fedma needs at least two clients".into()));
    }
    if client_weights.len() != n.len() {
        return Err(Error::Aggregation("sample counts do not match clients".into()));
    }

    let mut arch = arch.clone();
    let mut clients = client_weights;
    let mut units_added = vec![0usize; arch.layer_count()];
    let mut freeze_plan = Vec::new();
    let hidden = arch.growable_indices();
    // Hidden global layers assembled so far, by layer index.
    let mut global_layers: Vec<(usize, LayerParams)> = Vec::new();

    for &layer in &hidden {
        let before_units = clients[0].layers[layer].unit_count();
        for (k, cw) in clients.iter().enumerate() {
            if cw.layers[layer].unit_count() != before_units {
                return Err(Error::ShapeMismatch {
                    layer,
                    detail: format!("client {k} disagrees on unit count"),
                });
            }
        }

        // Running global layer seeded from client 0.
        let mut global = clients[0].layers[layer].clone();
        let mut acc: Vec<f64> = vec![n[0] as f64; global.unit_count()];
        let mut maps: Vec<Vec<usize>> = Vec::with_capacity(clients.len());
        maps.push((0..before_units).collect());

        for k in 1..clients.len() {
            let client_layer = &clients[k].layers[layer];
            let rows = client_layer.unit_count();
            let cols = global.unit_count();
            let mut cost = vec![0.0; rows * cols];
            for d in 0..rows {
                let cv = client_layer.unit_vector(d);
                for g in 0..cols {
                    cost[d * cols + g] = pairwise_distance(&cv, &global.unit_vector(g))?;
                }
            }
            let (assignment, _) = solve_assignment(&cost, rows, cols)?;
            let match_costs: Vec<f64> = assignment
                .iter()
                .enumerate()
                .map(|(d, &g)| cost[d * cols + g])
                .collect();
            let eps = epsilon_threshold(cfg, &match_costs);

            let mut map = vec![0usize; rows];
            for d in 0..rows {
                let cv = client_layer.unit_vector(d);
                if match_costs[d] > eps {
                    append_unit(&mut global, &cv);
                    acc.push(n[k] as f64);
                    map[d] = global.unit_count() - 1;
                } else {
                    let g = assignment[d];
                    blend_unit(&mut global, g, &cv, acc[g], n[k] as f64);
                    acc[g] += n[k] as f64;
                    map[d] = g;
                }
            }
            maps.push(map);
        }

        let grown_units = global.unit_count();
        units_added[layer] = grown_units - before_units;
        match &mut arch.layers[layer].kind {
            LayerKind::Conv1D { filters, .. } => *filters = grown_units,
            LayerKind::Dense { units } => *units = grown_units,
            _ => unreachable!("hidden layers are conv or dense"),
        }
        arch.validate()?;

        // Every client adopts the matched layer; its next layer's input
        // features are renumbered client-specifically.
        let next = (layer + 1..arch.layer_count())
            .find(|&i| arch.layers[i].kind.is_trainable())
            .expect("softmax closes the network");
        let positions = arch.shape_chain()?[next].len;
        for (k, cw) in clients.iter_mut().enumerate() {
            let mut map: Vec<Option<usize>> = vec![None; grown_units];
            for (d, &g) in maps[k].iter().enumerate() {
                map[g] = Some(d);
            }
            cw.layers[next] = remap_inputs(&cw.layers[next], &map, positions);
            cw.layers[layer] = global.clone();
            cw.matches(&arch).map_err(|e| {
                Error::Aggregation(format!("client {k} bad shape after adoption: {e}"))
            })?;
        }
        global_layers.push((layer, global));

        // Layer-wise sub-round: frozen up to the matched layer, retrain
        // above, send back the unfrozen layers.
        let frozen_mask: Vec<bool> = (0..arch.layer_count()).map(|i| i <= layer).collect();
        let unfrozen_mask: Vec<bool> = frozen_mask.iter().map(|f| !f).collect();
        let adopt_mask: Vec<bool> = (0..arch.layer_count()).map(|i| i == layer).collect();
        let k_count = clients.len() as u64;
        let downlink_bytes = k_count * payload_size(&clients[0], &adopt_mask);
        let uplink_bytes = k_count * payload_size(&clients[0], &unfrozen_mask);
        clients = trainer.retrain(&arch, clients, &frozen_mask)?;
        for (ci, cw) in clients.iter().enumerate() {
            cw.matches(&arch).map_err(|e| {
                Error::Aggregation(format!("client {ci} returned bad shapes: {e}"))
            })?;
        }
        freeze_plan.push(SubRoundRecord {
            frozen_layers: (0..=layer).collect(),
            retrain: true,
            downlink_bytes,
            uplink_bytes,
        });
    }

    // Assemble the server model: matched hidden layers, pool passthrough,
    // weighted-average softmax.
    let mut server = clients[0].clone();
    for (layer, params) in &global_layers {
        server.layers[*layer] = params.clone();
    }
    let softmax_idx = arch.layer_count() - 1;
    let softmax_mask: Vec<bool> = (0..arch.layer_count()).map(|i| i == softmax_idx).collect();
    let refs: Vec<&WeightSet> = clients.iter().collect();
    server = fedavg_layers(&server, &refs, n, &softmax_mask)?;
    server.matches(&arch)?;

    let directive = AggregatorDirective {
        server_weights: server,
        overwrite_layers: (0..arch.layer_count()).collect(),
        arch,
        freeze_plan,
        units_added,
    };
    directive.validate()?;
    Ok(FedMaOutcome { directive, client_weights: clients })
}
