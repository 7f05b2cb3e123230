//! Seeded synthetic Gaussian-cluster tasks for desk-scale federated runs.
//!
//! Each class gets a fixed mean pattern; every sample is that pattern plus
//! isotropic noise. Client heterogeneity comes in three flavors: none
//! (IID), Dirichlet label skew, or one client whose features are shifted
//! by a constant offset (the planted outlier).

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma, Normal};

use super::{ClientPartition, GlobalTestSet, WindowedDataset};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum SkewMode {
    /// Identical class allocation on every client.
    Iid,
    /// Per-client class proportions drawn from Dirichlet(alpha).
    LabelSkew { alpha: f64 },
    /// IID allocation, but one client's features are shifted by `offset`.
    PlantedOutlier { offset: f64, client: usize },
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub clients: usize,
    pub classes: usize,
    pub samples_per_client: usize,
    pub window_len: usize,
    pub channels: usize,
    pub mode: SkewMode,
    pub noise_std: f64,
    pub train_ratio: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(Error::InvalidConfig("need at least 2 clients".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.samples_per_client < 2 * self.classes {
            return Err(Error::InvalidConfig(
                "need at least two samples per class per client".into(),
            ));
        }
        if self.window_len == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("empty frame shape".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "degenerate covariance: noise std {} must be finite and positive",
                self.noise_std
            )));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::InvalidConfig("train ratio must lie in (0, 1)".into()));
        }
        match self.mode {
            SkewMode::LabelSkew { alpha } => {
                if !alpha.is_finite() || alpha <= 0.0 {
                    return Err(Error::InvalidConfig("dirichlet alpha must be positive".into()));
                }
            }
            SkewMode::PlantedOutlier { offset, client } => {
                if !offset.is_finite() {
                    return Err(Error::InvalidConfig("outlier offset must be finite".into()));
                }
                if client >= self.clients {
                    return Err(Error::InvalidConfig(format!(
                        "outlier client {client} out of range"
                    )));
                }
            }
            SkewMode::Iid => {}
        }
        Ok(())
    }
}

/// Equal allocation: `total` split over `classes`, remainder to the lowest
/// class ids.
fn equal_allocation(total: usize, classes: usize) -> Vec<usize> {
    let base = total / classes;
    let rem = total % classes;
    (0..classes).map(|c| base + usize::from(c < rem)).collect()
}

/// Largest-remainder rounding of proportions to integer counts summing to
/// `total`.
fn proportional_allocation(props: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * total as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = props
        .iter()
        .enumerate()
        .map(|(c, p)| (c, p * total as f64 - counts[c] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for i in 0..total - assigned {
        counts[remainders[i % props.len()].0] += 1;
    }
    counts
}

/// Generates one client partition per simulated participant. Deterministic
/// for a fixed `spec.seed`.
pub fn synth_noniid(spec: &SyntheticSpec) -> Result<Vec<ClientPartition>> {
    spec.validate()?;
    let dim = spec.window_len * spec.channels;

    // Class mean patterns, shared by all clients.
    let mut mean_rng = StdRng::seed_from_u64(seed::derive(spec.seed, &[0xc1a5]));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let class_means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..dim).map(|_| unit.sample(&mut mean_rng)).collect())
        .collect();

    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let mut clients = Vec::with_capacity(spec.clients);
    for k in 0..spec.clients {
        let mut rng = StdRng::seed_from_u64(seed::derive(spec.seed, &[0xc11e, k as u64]));
        let counts = match spec.mode {
            SkewMode::Iid | SkewMode::PlantedOutlier { .. } => {
                equal_allocation(spec.samples_per_client, spec.classes)
            }
            SkewMode::LabelSkew { alpha } => {
                let gamma = Gamma::new(alpha, 1.0).expect("validated alpha");
                let draws: Vec<f64> = (0..spec.classes).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = draws.iter().sum();
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::InvalidConfig(
                        "dirichlet draw degenerated; increase alpha".into(),
                    ));
                }
                let props: Vec<f64> = draws.iter().map(|d| d / sum).collect();
                proportional_allocation(&props, spec.samples_per_client)
            }
        };

        let mut labels: Vec<u32> = Vec::with_capacity(spec.samples_per_client);
        for (c, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c as u32, n));
        }
        labels.shuffle(&mut rng);

        let offset = match spec.mode {
            SkewMode::PlantedOutlier { offset, client } if client == k => offset,
            _ => 0.0,
        };
        let mut frames = Vec::with_capacity(labels.len() * dim);
        for &label in &labels {
            let mean = &class_means[label as usize];
            for &m in mean.iter() {
                let mut v = m + noise.sample(&mut rng);
                if offset != 0.0 {
                    v += offset;
                }
                frames.push(v);
            }
        }

        let ds = WindowedDataset {
            frames,
            labels,
            window_len: spec.window_len,
            channels: spec.channels,
            truncated: false,
        };
        let n_train = ((ds.len() as f64) * spec.train_ratio).round() as usize;
        let n_train = n_train.clamp(1, ds.len() - 1);
        clients.push(ClientPartition {
            client_id: format!("client_{k:02}"),
            train: ds.take(n_train),
            test: ds.skip(n_train),
            n_k: n_train,
        });
    }
    Ok(clients)
}

/// Pools every client's test frames into the global test set.
pub fn pool_test_sets(clients: &[ClientPartition]) -> Result<GlobalTestSet> {
    let first = clients
        .first()
        .ok_or_else(|| Error::EmptyDataset("no clients".into()))?;
    let mut data = WindowedDataset::empty(first.test.window_len, first.test.channels);
    for client in clients {
        data.extend(&client.test)?;
    }
    Ok(GlobalTestSet { data })
}
