//! Base-layer sharing: clients exchange only the network's lower
//! (representation) layers; upper layers stay personal and never leave the
//! device. The server model is partial, so it cannot be evaluated.

use super::{fedavg_layers, AggregatorDirective};
use crate::nn::{ModelArchitecture, WeightSet};
use crate::{Error, Result};

/// Averages the first `base_layer_count` layers across clients, leaving
/// everything above untouched on both server and clients.
pub fn fedper(
    arch: &ModelArchitecture,
    server: &WeightSet,
    clients: &[&WeightSet],
    n: &[usize],
    base_layer_count: usize,
) -> Result<AggregatorDirective> {
    let l = arch.layer_count();
    if base_layer_count >= l {
        return Err(Error::Aggregation(format!(
            "base layer count {base_layer_count} must stay below the layer count {l}"
        )));
    }
    if base_layer_count == 0 {
        return Err(Error::Aggregation("base layer count must be positive".into()));
    }
    let mask: Vec<bool> = (0..l).map(|i| i < base_layer_count).collect();
    let averaged = fedavg_layers(server, clients, n, &mask)?;
    let directive = AggregatorDirective::simple(
        arch.clone(),
        averaged,
        (0..base_layer_count).collect(),
    );
    directive.validate()?;
    Ok(directive)
}
