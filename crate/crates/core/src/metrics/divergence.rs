//! Pair-wise dissimilarity monitor: how far each client's units have
//! drifted from the server's, layer by layer.

use serde::{Deserialize, Serialize};

use crate::aggregate::distance_matrix;
use crate::nn::{ModelArchitecture, WeightSet};
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientDivergence {
    pub client: usize,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDivergence {
    pub layer: usize,
    pub clients: Vec<ClientDivergence>,
}

/// Reduces each scannable layer's client-to-server distance matrix to a
/// per-client mean and max.
pub fn divergence_snapshot(
    arch: &ModelArchitecture,
    server: &WeightSet,
    clients: &[&WeightSet],
) -> Result<Vec<LayerDivergence>> {
    let mut out = Vec::new();
    for layer in arch.growable_indices() {
        let dm = distance_matrix(arch, server, clients, layer)?;
        let mut per_client = Vec::with_capacity(clients.len());
        for k in 0..clients.len() {
            let row = dm.client_row(k);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let max = row.iter().cloned().fold(0.0, f64::max);
            per_client.push(ClientDivergence { client: k, mean, max });
        }
        out.push(LayerDivergence { layer, clients: per_client });
    }
    Ok(out)
}
