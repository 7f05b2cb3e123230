//! Euclidean distances between units of the same coordinate across models.
//!
//! A unit's vector is its incoming weights concatenated with its bias; for
//! conv layers a unit is one filter (flattened kernel plus bias).

use crate::nn::{ModelArchitecture, WeightSet};
use crate::{Error, Result};

/// Euclidean distance between two unit vectors of equal length.
pub fn pairwise_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Aggregation(format!(
            "unit vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Client-by-unit distance table for one layer, with per-unit mean and
/// population standard deviation over clients.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub layer: usize,
    pub clients: usize,
    pub units: usize,
    /// Row-major `clients x units`.
    pub entries: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DistanceMatrix {
    pub fn entry(&self, client: usize, unit: usize) -> f64 {
        self.entries[client * self.units + unit]
    }

    pub fn client_row(&self, client: usize) -> &[f64] {
        &self.entries[client * self.units..(client + 1) * self.units]
    }

    /// Mean distance of unit `d` over clients (the pseudo-code's
    /// `mean(d)`): identical to `mu[d]`, recomputed here from entries.
    pub fn unit_mean(&self, unit: usize) -> f64 {
        (0..self.clients).map(|k| self.entry(k, unit)).sum::<f64>() / self.clients as f64
    }
}

/// Distances between the server's units and every client's units at the
/// same coordinates of `layer`.
pub fn distance_matrix(
    arch: &ModelArchitecture,
    server: &WeightSet,
    clients: &[&WeightSet],
    layer: usize,
) -> Result<DistanceMatrix> {
    server.matches(arch)?;
    let server_layer = &server.layers[layer];
    let units = server_layer.unit_count();
    if units == 0 {
        return Err(Error::Aggregation(format!(
            "layer {layer} has no comparable units"
        )));
    }
    let mut entries = Vec::with_capacity(clients.len() * units);
    for (k, client) in clients.iter().enumerate() {
        let client_layer = client
            .layers
            .get(layer)
            .ok_or_else(|| Error::Aggregation(format!("client {k} lacks layer {layer}")))?;
        if client_layer.unit_count() != units || client_layer.fan_in() != server_layer.fan_in() {
            return Err(Error::ShapeMismatch {
                layer,
                detail: format!("client {k} disagrees with the server on layer geometry"),
            });
        }
        for d in 0..units {
            entries.push(pairwise_distance(
                &server_layer.unit_vector(d),
                &client_layer.unit_vector(d),
            )?);
        }
    }
    let k = clients.len();
    let mut mu = vec![0.0; units];
    let mut sigma = vec![0.0; units];
    for d in 0..units {
        let mut sum = 0.0;
        for c in 0..k {
            sum += entries[c * units + d];
        }
        let m = sum / k as f64;
        let mut var = 0.0;
        for c in 0..k {
            let dev = entries[c * units + d] - m;
            var += dev * dev;
        }
        mu[d] = m;
        sigma[d] = (var / k as f64).sqrt();
    }
    Ok(DistanceMatrix {
        layer,
        clients: k,
        units,
        entries,
        mu,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, InputShape, LayerKind, LayerParams};

    #[test]
    fn identical_vectors_have_zero_distance() {
        let v = vec![1.0, -2.0, 3.5];
        assert_eq!(pairwise_distance(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five_triangle() {
        assert_eq!(pairwise_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
    }

    #[test]
    fn matches_naive_loop_on_random_pairs() {
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a: Vec<f64> = (0..100).map(|_| next()).collect();
        let b: Vec<f64> = (0..100).map(|_| next()).collect();
        let mut acc = 0.0;
        for i in 0..100 {
            acc += (a[i] - b[i]).powi(2);
        }
        let naive = acc.sqrt();
        assert!((pairwise_distance(&a, &b).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(pairwise_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matrix_stats_are_recomputable() {
        let arch = ModelArchitecture::new(
            InputShape { window: 3, channels: 1 },
            vec![LayerKind::Dense { units: 2 }, LayerKind::Softmax { classes: 2 }],
        )
        .unwrap();
        let server = init_weights(&arch, 1).unwrap();
        let mut c1 = server.clone();
        let mut c2 = server.clone();
        if let LayerParams::Dense { weights, .. } = &mut c1.layers[0] {
            weights[0] += 2.0;
        }
        if let LayerParams::Dense { biases, .. } = &mut c2.layers[0] {
            biases[1] -= 1.0;
        }
        let dm = distance_matrix(&arch, &server, &[&c1, &c2], 0).unwrap();
        assert_eq!(dm.entry(0, 0), 2.0);
        assert_eq!(dm.entry(1, 1), 1.0);
        assert_eq!(dm.entry(1, 0), 0.0);
        for d in 0..2 {
            let vals = [dm.entry(0, d), dm.entry(1, d)];
            let mean = (vals[0] + vals[1]) / 2.0;
            let var = ((vals[0] - mean).powi(2) + (vals[1] - mean).powi(2)) / 2.0;
            assert!((dm.mu[d] - mean).abs() < 1e-15);
            assert!((dm.sigma[d] - var.sqrt()).abs() < 1e-15);
            assert!((dm.unit_mean(d) - mean).abs() < 1e-15);
        }
    }
}
