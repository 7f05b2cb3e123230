//! Server-side aggregation strategies behind one directive-based surface:
//! coordinate-wise weighted averaging (FedAvg), base-layer sharing
//! (FedPer), Hungarian neuron matching (FedMA-lite) and distance-driven
//! architecture growth (FedDist).

mod distance;
mod fedavg;
mod feddist;
mod fedma;
mod fedper;
mod hungarian;

pub use distance::{distance_matrix, pairwise_distance, DistanceMatrix};
pub use fedavg::{fedavg, fedavg_layers};
pub use feddist::{
    feddist, feddist_scan_layer, FedDistConfig, FedDistOutcome, GrowthTrigger, LayerScan,
    Offender, PenaltyKind, PenaltyPolicy, DEFAULT_PENALTY_COEFFICIENT,
};
pub use fedma::{fedma_lite, FedMaConfig, FedMaOutcome, MatchEpsilon};
pub use fedper::fedper;
pub use hungarian::solve_assignment;

use serde::{Deserialize, Serialize};

use crate::nn::{ModelArchitecture, WeightSet};
use crate::Result;

/// What a strategy decided for one communication round: the next server
/// model, which layers clients must overwrite, and the layer-wise
/// sub-rounds that were executed along the way.
#[derive(Debug, Clone)]
pub struct AggregatorDirective {
    pub server_weights: WeightSet,
    pub arch: ModelArchitecture,
    /// Layers clients overwrite with the server copy at the next broadcast.
    pub overwrite_layers: Vec<usize>,
    /// Executed layer-wise sub-rounds, in order. Frozen sets only grow
    /// within a round.
    pub freeze_plan: Vec<SubRoundRecord>,
    /// Units appended per architecture layer during this round.
    pub units_added: Vec<usize>,
}

impl AggregatorDirective {
    /// Plain directive with no growth and no sub-rounds.
    pub fn simple(arch: ModelArchitecture, server_weights: WeightSet, overwrite: Vec<usize>) -> Self {
        let units_added = vec![0; arch.layer_count()];
        AggregatorDirective {
            server_weights,
            arch,
            overwrite_layers: overwrite,
            freeze_plan: Vec::new(),
            units_added,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.arch.layer_count();
        for &i in &self.overwrite_layers {
            if i >= l {
                return Err(crate::Error::Aggregation(format!(
                    "overwrite mask references layer {i} of {l}"
                )));
            }
        }
        let mut prev: &[usize] = &[];
        for record in &self.freeze_plan {
            for &i in &record.frozen_layers {
                if i >= l {
                    return Err(crate::Error::Aggregation(format!(
                        "freeze plan references layer {i} of {l}"
                    )));
                }
            }
            if !prev.iter().all(|i| record.frozen_layers.contains(i)) {
                return Err(crate::Error::Aggregation(
                    "freeze plan is not monotone".into(),
                ));
            }
            prev = &record.frozen_layers;
        }
        Ok(())
    }
}

/// One layer-wise sub-round: which layers were frozen, whether clients
/// retrained, and the payload bytes that moved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubRoundRecord {
    pub frozen_layers: Vec<usize>,
    pub retrain: bool,
    pub downlink_bytes: u64,
    pub uplink_bytes: u64,
}

/// Client-side retraining service used by strategies that run layer-wise
/// sub-rounds. The engine backs this with real local training; tests may
/// substitute scripted behavior.
pub trait SubRoundTrainer {
    /// Retrains every client's unfrozen layers. `clients[k]` holds client
    /// `k`'s current weights (already matching `arch`); `frozen[i]` marks
    /// architecture layers that must not change. Returns the post-training
    /// weight sets, in the same client order.
    fn retrain(
        &mut self,
        arch: &ModelArchitecture,
        clients: Vec<WeightSet>,
        frozen: &[bool],
    ) -> Result<Vec<WeightSet>>;
}

/// A trainer that returns the weights unchanged. Used in tests and as the
/// degenerate retraining service.
pub struct IdentityTrainer;

impl SubRoundTrainer for IdentityTrainer {
    fn retrain(
        &mut self,
        _arch: &ModelArchitecture,
        clients: Vec<WeightSet>,
        _frozen: &[bool],
    ) -> Result<Vec<WeightSet>> {
        Ok(clients)
    }
}
