//! Coordinate-wise weighted averaging. Clients with more samples pull the
//! aggregate harder: every coordinate becomes `sum_k (n_k / n) * w_k`.

use crate::nn::{LayerParams, WeightSet};
use crate::{Error, Result};

fn check_inputs(clients: &[&WeightSet], n: &[usize]) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::Aggregation("no client weights to average".into()));
    }
    if clients.len() != n.len() {
        return Err(Error::Aggregation(format!(
            "{} weight sets but {} sample counts",
            clients.len(),
            n.len()
        )));
    }
    let total: usize = n.iter().sum();
    if total == 0 {
        return Err(Error::Aggregation("total sample count is zero".into()));
    }
    let reference = &clients[0];
    for (k, c) in clients.iter().enumerate().skip(1) {
        if c.layers.len() != reference.layers.len() {
            return Err(Error::Aggregation(format!(
                "client {k} has {} layers, expected {}",
                c.layers.len(),
                reference.layers.len()
            )));
        }
    }
    Ok(total as f64)
}

fn average_layer(clients: &[&WeightSet], coeffs: &[f64], layer: usize) -> Result<LayerParams> {
    let first = &clients[0].layers[layer];
    match first {
        LayerParams::Pool => {
            for c in clients.iter().skip(1) {
                if !matches!(c.layers[layer], LayerParams::Pool) {
                    return Err(Error::ShapeMismatch {
                        layer,
                        detail: "clients disagree on layer kind".into(),
                    });
                }
            }
            Ok(LayerParams::Pool)
        }
        LayerParams::Conv { filters, kernel, in_channels, weights, biases } => {
            let mut w_acc = vec![0.0; weights.len()];
            let mut b_acc = vec![0.0; biases.len()];
            for (client, &coef) in clients.iter().zip(coeffs) {
                match &client.layers[layer] {
                    LayerParams::Conv {
                        filters: f, kernel: k, in_channels: c,
                        weights: w, biases: b,
                    } if f == filters && k == kernel && c == in_channels => {
                        for (acc, v) in w_acc.iter_mut().zip(w) {
                            *acc += coef * v;
                        }
                        for (acc, v) in b_acc.iter_mut().zip(b) {
                            *acc += coef * v;
                        }
                    }
                    _ => {
                        return Err(Error::ShapeMismatch {
                            layer,
                            detail: "conv layer shapes differ across clients".into(),
                        })
                    }
                }
            }
            Ok(LayerParams::Conv {
                filters: *filters,
                kernel: *kernel,
                in_channels: *in_channels,
                weights: w_acc,
                biases: b_acc,
            })
        }
        LayerParams::Dense { units, in_dim, weights, biases } => {
            let mut w_acc = vec![0.0; weights.len()];
            let mut b_acc = vec![0.0; biases.len()];
            for (client, &coef) in clients.iter().zip(coeffs) {
                match &client.layers[layer] {
                    LayerParams::Dense { units: u, in_dim: i, weights: w, biases: b }
                        if u == units && i == in_dim =>
                    {
                        for (acc, v) in w_acc.iter_mut().zip(w) {
                            *acc += coef * v;
                        }
                        for (acc, v) in b_acc.iter_mut().zip(b) {
                            *acc += coef * v;
                        }
                    }
                    _ => {
                        return Err(Error::ShapeMismatch {
                            layer,
                            detail: "dense layer shapes differ across clients".into(),
                        })
                    }
                }
            }
            Ok(LayerParams::Dense {
                units: *units,
                in_dim: *in_dim,
                weights: w_acc,
                biases: b_acc,
            })
        }
    }
}

/// Weighted average of full weight sets. Summation runs in client order,
/// so a fixed input order is bit-deterministic.
pub fn fedavg(clients: &[&WeightSet], n: &[usize]) -> Result<WeightSet> {
    let total = check_inputs(clients, n)?;
    let coeffs: Vec<f64> = n.iter().map(|&nk| nk as f64 / total).collect();
    let mut layers = Vec::with_capacity(clients[0].layers.len());
    for layer in 0..clients[0].layers.len() {
        layers.push(average_layer(clients, &coeffs, layer)?);
    }
    Ok(WeightSet { layers })
}

/// Weighted average restricted to `selected` layers; the others are taken
/// from `base`.
pub fn fedavg_layers(
    base: &WeightSet,
    clients: &[&WeightSet],
    n: &[usize],
    selected: &[bool],
) -> Result<WeightSet> {
    let total = check_inputs(clients, n)?;
    if selected.len() != base.layers.len() {
        return Err(Error::Aggregation("layer mask length mismatch".into()));
    }
    let coeffs: Vec<f64> = n.iter().map(|&nk| nk as f64 / total).collect();
    let mut layers = Vec::with_capacity(base.layers.len());
    for layer in 0..base.layers.len() {
        if selected[layer] {
            layers.push(average_layer(clients, &coeffs, layer)?);
        } else {
            layers.push(base.layers[layer].clone());
        }
    }
    Ok(WeightSet { layers })
}
