//! Architecture growth: appending units to a conv or dense layer.
//!
//! Appended units carry caller-supplied incoming weights; their outgoing
//! connections into the next trainable layer are zero-initialized, so the
//! network function is unchanged at the instant of growth. Dense layers
//! read a channel-major flattening, which keeps the new units' fan-out
//! columns contiguous at the tail of the weight rows.

use super::{LayerKind, LayerParams, ModelArchitecture, WeightSet};
use crate::{Error, Result};

/// Incoming weights and bias of one appended unit.
#[derive(Debug, Clone)]
pub struct NewUnit {
    pub incoming: Vec<f64>,
    pub bias: f64,
}

/// Appends `new_units` to the conv or dense layer at `layer_index` and
/// extends the next trainable layer with zero fan-out. Returns the grown
/// architecture and weights; all pre-existing values are unchanged.
pub fn grow_layer(
    arch: &ModelArchitecture,
    w: &WeightSet,
    layer_index: usize,
    new_units: &[NewUnit],
) -> Result<(ModelArchitecture, WeightSet)> {
    w.matches(arch)?;
    let spec = arch.layers.get(layer_index).ok_or(Error::InvalidGrowth {
        layer: layer_index,
        reason: "no such layer".into(),
    })?;
    match spec.kind {
        LayerKind::Conv1D { .. } | LayerKind::Dense { .. } => {}
        LayerKind::Softmax { .. } => {
            return Err(Error::InvalidGrowth {
                layer: layer_index,
                reason: "softmax layer cannot grow".into(),
            })
        }
        LayerKind::MaxPool1D { .. } => {
            return Err(Error::InvalidGrowth {
                layer: layer_index,
                reason: "pooling layer has no units".into(),
            })
        }
    }
    if new_units.is_empty() {
        return Ok((arch.clone(), w.clone()));
    }

    let fan_in = w.layers[layer_index].fan_in();
    for (i, unit) in new_units.iter().enumerate() {
        if unit.incoming.len() != fan_in {
            return Err(Error::InvalidGrowth {
                layer: layer_index,
                reason: format!(
                    "unit {i} has {} incoming weights, layer expects {fan_in}",
                    unit.incoming.len()
                ),
            });
        }
    }

    let shapes = arch.shape_chain()?;
    let mut arch = arch.clone();
    let mut w = w.clone();
    let added = new_units.len();

    // Extend the grown layer itself.
    match (&mut arch.layers[layer_index].kind, &mut w.layers[layer_index]) {
        (LayerKind::Conv1D { filters, .. }, LayerParams::Conv { filters: pf, weights, biases, .. }) => {
            *filters += added;
            *pf += added;
            for unit in new_units {
                weights.extend_from_slice(&unit.incoming);
                biases.push(unit.bias);
            }
        }
        (LayerKind::Dense { units }, LayerParams::Dense { units: pu, weights, biases, .. }) => {
            *units += added;
            *pu += added;
            for unit in new_units {
                weights.extend_from_slice(&unit.incoming);
                biases.push(unit.bias);
            }
        }
        _ => unreachable!("kind checked above"),
    }

    // Extend the next trainable layer's incoming width with zeros.
    let next = (layer_index + 1..arch.layers.len())
        .find(|&i| arch.layers[i].kind.is_trainable())
        .ok_or(Error::InvalidGrowth {
            layer: layer_index,
            reason: "no trainable layer downstream".into(),
        })?;

    match &mut w.layers[next] {
        LayerParams::Dense { in_dim, weights, units, .. } => {
            // Positions each feature channel occupies in the flattened
            // input of the dense layer (1 for a dense predecessor).
            let positions = shapes[next].len;
            let extra = added * positions;
            let old_in = *in_dim;
            let mut grown = Vec::with_capacity(*units * (old_in + extra));
            for u in 0..*units {
                grown.extend_from_slice(&weights[u * old_in..(u + 1) * old_in]);
                grown.extend(std::iter::repeat_n(0.0, extra));
            }
            *weights = grown;
            *in_dim = old_in + extra;
        }
        LayerParams::Conv { in_channels, weights, filters, kernel, .. } => {
            // New input channels interleave at the tail of each tap block.
            let old_ch = *in_channels;
            let new_ch = old_ch + added;
            let mut grown = vec![0.0; *filters * *kernel * new_ch];
            for f in 0..*filters {
                for dt in 0..*kernel {
                    for c in 0..old_ch {
                        grown[(f * *kernel + dt) * new_ch + c] =
                            weights[(f * *kernel + dt) * old_ch + c];
                    }
                }
            }
            *weights = grown;
            *in_channels = new_ch;
        }
        LayerParams::Pool => unreachable!("next is trainable"),
    }

    arch.validate()?;
    w.matches(&arch)?;
    Ok((arch, w))
}

#[cfg(test)]
mod tests {
    use super::super::{forward, init_weights, InputShape, LayerKind, ModelArchitecture};
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dense_chain() -> (ModelArchitecture, WeightSet) {
        let arch = ModelArchitecture::new(
            InputShape { window: 3, channels: 1 },
            vec![
                LayerKind::Dense { units: 4 },
                LayerKind::Dense { units: 3 },
                LayerKind::Softmax { classes: 2 },
            ],
        )
        .unwrap();
        let w = init_weights(&arch, 11).unwrap();
        (arch, w)
    }

    #[test]
    fn growing_by_zero_units_is_identity() {
        let (arch, w) = dense_chain();
        let (a2, w2) = grow_layer(&arch, &w, 0, &[]).unwrap();
        assert_eq!(arch, a2);
        assert_eq!(w, w2);
    }

    #[test]
    fn dense_growth_updates_shapes() {
        let (arch, w) = dense_chain();
        let units = vec![
            NewUnit { incoming: vec![0.1, 0.2, 0.3], bias: 0.0 },
            NewUnit { incoming: vec![-0.1, 0.0, 0.5], bias: 1.0 },
        ];
        let (a2, w2) = grow_layer(&arch, &w, 0, &units).unwrap();
        assert_eq!(a2.layers[0].kind, LayerKind::Dense { units: 6 });
        match &w2.layers[1] {
            LayerParams::Dense { in_dim, .. } => assert_eq!(*in_dim, 6),
            _ => panic!(),
        }
        // Pre-existing weights kept in place.
        match (&w.layers[1], &w2.layers[1]) {
            (
                LayerParams::Dense { weights: old, in_dim: old_in, .. },
                LayerParams::Dense { weights: new, in_dim: new_in, .. },
            ) => {
                for u in 0..3 {
                    assert_eq!(
                        &old[u * old_in..u * old_in + old_in],
                        &new[u * new_in..u * new_in + old_in]
                    );
                    assert!(new[u * new_in + old_in..(u + 1) * new_in]
                        .iter()
                        .all(|v| *v == 0.0));
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn softmax_growth_is_rejected() {
        let (arch, w) = dense_chain();
        assert!(grow_layer(&arch, &w, 2, &[NewUnit { incoming: vec![0.0; 3], bias: 0.0 }]).is_err());
    }

    #[test]
    fn zero_fan_out_preserves_function() {
        let arch = super::super::tests::toy_arch();
        let w = init_weights(&arch, 5).unwrap();
        let mut rng = StdRng::seed_from_u64(99);
        let frames: Vec<f64> = (0..4 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let before = forward(&arch, &w, &frames, 4).unwrap();

        // Grow the conv layer (through the pool) and the dense layer.
        let conv_unit = NewUnit {
            incoming: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: 0.3,
        };
        let (arch, w) = grow_layer(&arch, &w, 0, &[conv_unit]).unwrap();
        let dense_fan_in = w.layers[2].fan_in();
        let dense_unit = NewUnit {
            incoming: (0..dense_fan_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: -0.2,
        };
        let (arch, w) = grow_layer(&arch, &w, 2, &[dense_unit]).unwrap();

        let after = forward(&arch, &w, &frames, 4).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!((b - a).abs() < 1e-15, "{b} vs {a}");
        }
    }
}
