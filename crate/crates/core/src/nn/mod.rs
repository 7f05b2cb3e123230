//! Minimal feed-forward engine: 1-D convolution, max pooling, dense and
//! softmax layers with SGD training, dropout and per-layer freezing.
//!
//! Everything is computed in `f64`; tensors only narrow to `f32` when they
//! cross the wire (see [`crate::wire`]). Hidden conv/dense layers use ReLU;
//! the final layer is a dense transform followed by softmax, trained with
//! cross-entropy.

mod forward;
mod grow;
mod train;

pub use forward::{forward, forward_sample};
pub use grow::{grow_layer, NewUnit};
pub use train::{evaluate, loss_gradients, train_local, training_loss};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// What a layer computes; unit counts live here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Valid (no padding) cross-correlation over the time axis, stride 1.
    Conv1D { filters: usize, kernel: usize },
    /// Max over non-overlapping windows of `pool` timesteps (stride = pool).
    MaxPool1D { pool: usize },
    Dense { units: usize },
    /// Dense transform into class logits followed by softmax.
    Softmax { classes: usize },
}

impl LayerKind {
    pub fn units(&self) -> usize {
        match *self {
            LayerKind::Conv1D { filters, .. } => filters,
            LayerKind::MaxPool1D { .. } => 0,
            LayerKind::Dense { units } => units,
            LayerKind::Softmax { classes } => classes,
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, LayerKind::MaxPool1D { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub frozen: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec { kind, frozen: false }
    }
}

/// (timesteps, channels) entering the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub window: usize,
    pub channels: usize,
}

/// Feature shape flowing between layers. Dense outputs collapse to
/// `(1, units)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureShape {
    pub len: usize,
    pub channels: usize,
}

impl FeatureShape {
    pub fn flat(&self) -> usize {
        self.len * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArchitecture {
    pub layers: Vec<LayerSpec>,
    pub input_shape: InputShape,
}

impl ModelArchitecture {
    pub fn new(input_shape: InputShape, kinds: Vec<LayerKind>) -> Result<Self> {
        let arch = ModelArchitecture {
            layers: kinds.into_iter().map(LayerSpec::new).collect(),
            input_shape,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn class_count(&self) -> usize {
        match self.layers.last().map(|l| l.kind) {
            Some(LayerKind::Softmax { classes }) => classes,
            _ => 0,
        }
    }

    /// Shape entering each layer, plus the final output shape.
    pub fn shape_chain(&self) -> Result<Vec<FeatureShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = FeatureShape {
            len: self.input_shape.window,
            channels: self.input_shape.channels,
        };
        shapes.push(cur);
        for (i, spec) in self.layers.iter().enumerate() {
            cur = match spec.kind {
                LayerKind::Conv1D { filters, kernel } => {
                    if kernel == 0 || kernel > cur.len {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: format!(
                                "conv kernel {} does not fit input length {}",
                                kernel, cur.len
                            ),
                        });
                    }
                    FeatureShape { len: cur.len - kernel + 1, channels: filters }
                }
                LayerKind::MaxPool1D { pool } => {
                    if pool == 0 || pool > cur.len {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: format!(
                                "pool length {} does not fit input length {}",
                                pool, cur.len
                            ),
                        });
                    }
                    FeatureShape { len: cur.len / pool, channels: cur.channels }
                }
                LayerKind::Dense { units } => FeatureShape { len: 1, channels: units },
                LayerKind::Softmax { classes } => FeatureShape { len: 1, channels: classes },
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidArchitecture(
                "at least two layers required".into(),
            ));
        }
        if self.input_shape.window == 0 || self.input_shape.channels == 0 {
            return Err(Error::InvalidArchitecture("empty input shape".into()));
        }
        let softmax_positions: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Softmax { .. }))
            .map(|(i, _)| i)
            .collect();
        if softmax_positions != [self.layers.len() - 1] {
            return Err(Error::InvalidArchitecture(
                "softmax must appear exactly once, as the final layer".into(),
            ));
        }
        for (i, spec) in self.layers.iter().enumerate() {
            let units_ok = match spec.kind {
                LayerKind::Conv1D { filters, kernel } => filters >= 1 && kernel >= 1,
                LayerKind::MaxPool1D { pool } => pool >= 1,
                LayerKind::Dense { units } => units >= 1,
                LayerKind::Softmax { classes } => classes >= 1,
            };
            if !units_ok {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i} has a zero unit/kernel count"
                )));
            }
        }
        self.shape_chain().map(|_| ())
    }

    /// Indices of layers that carry parameters.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_trainable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Layers eligible for distance scans and growth: every trainable layer
    /// except the final softmax.
    pub fn growable_indices(&self) -> Vec<usize> {
        let mut idx = self.trainable_indices();
        idx.pop();
        idx
    }
}

/// Parameters of one layer. Conv weights are laid out `[filter][tap][channel]`,
/// dense weights `[unit][input]`, both row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Conv {
        filters: usize,
        kernel: usize,
        in_channels: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    },
    Pool,
    Dense {
        units: usize,
        in_dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    },
}

impl LayerParams {
    pub fn parameter_count(&self) -> usize {
        match self {
            LayerParams::Conv { weights, biases, .. }
            | LayerParams::Dense { weights, biases, .. } => weights.len() + biases.len(),
            LayerParams::Pool => 0,
        }
    }

    /// Number of units (filters or neurons) in this layer.
    pub fn unit_count(&self) -> usize {
        match self {
            LayerParams::Conv { filters, .. } => *filters,
            LayerParams::Dense { units, .. } => *units,
            LayerParams::Pool => 0,
        }
    }

    /// Incoming-weight width of one unit, excluding the bias.
    pub fn fan_in(&self) -> usize {
        match self {
            LayerParams::Conv { kernel, in_channels, .. } => kernel * in_channels,
            LayerParams::Dense { in_dim, .. } => *in_dim,
            LayerParams::Pool => 0,
        }
    }

    /// One unit's incoming weights concatenated with its bias.
    pub fn unit_vector(&self, unit: usize) -> Vec<f64> {
        match self {
            LayerParams::Conv { weights, biases, kernel, in_channels, .. } => {
                let w = kernel * in_channels;
                let mut v = weights[unit * w..(unit + 1) * w].to_vec();
                v.push(biases[unit]);
                v
            }
            LayerParams::Dense { weights, biases, in_dim, .. } => {
                let mut v = weights[unit * in_dim..(unit + 1) * in_dim].to_vec();
                v.push(biases[unit]);
                v
            }
            LayerParams::Pool => Vec::new(),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            LayerParams::Conv { weights, biases, .. }
            | LayerParams::Dense { weights, biases, .. } => {
                weights.iter().all(|v| v.is_finite()) && biases.iter().all(|v| v.is_finite())
            }
            LayerParams::Pool => true,
        }
    }
}

/// One model snapshot: per-layer weight and bias tensors. This is the unit
/// exchanged between clients and server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub layers: Vec<LayerParams>,
}

impl WeightSet {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.all_finite())
    }

    /// Checks that every tensor matches the owning architecture.
    pub fn matches(&self, arch: &ModelArchitecture) -> Result<()> {
        if self.layers.len() != arch.layers.len() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "weight set has {} layers, architecture has {}",
                    self.layers.len(),
                    arch.layers.len()
                ),
            });
        }
        let shapes = arch.shape_chain()?;
        for (i, (params, spec)) in self.layers.iter().zip(&arch.layers).enumerate() {
            let input = shapes[i];
            match (params, spec.kind) {
                (
                    LayerParams::Conv { filters, kernel, in_channels, weights, biases },
                    LayerKind::Conv1D { filters: f, kernel: k },
                ) => {
                    if *filters != f
                        || *kernel != k
                        || *in_channels != input.channels
                        || weights.len() != f * k * input.channels
                        || biases.len() != f
                    {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: "conv tensor does not match spec".into(),
                        });
                    }
                }
                (LayerParams::Pool, LayerKind::MaxPool1D { .. }) => {}
                (
                    LayerParams::Dense { units, in_dim, weights, biases },
                    LayerKind::Dense { units: u },
                )
                | (
                    LayerParams::Dense { units, in_dim, weights, biases },
                    LayerKind::Softmax { classes: u },
                ) => {
                    if *units != u
                        || *in_dim != input.flat()
                        || weights.len() != u * input.flat()
                        || biases.len() != u
                    {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: "dense tensor does not match spec".into(),
                        });
                    }
                }
                _ => {
                    return Err(Error::ShapeMismatch {
                        layer: i,
                        detail: "layer kind does not match parameters".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Hyperparameters for one local training call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs < 1 {
            return Err(Error::InvalidConfig("local_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(
                "dropout_rate must lie in [0, 1)".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            local_epochs: 5,
            batch_size: 32,
            learning_rate: 0.01,
            dropout_rate: 0.5,
            rng_seed: 0,
        }
    }
}

/// Seeded Glorot-uniform initialization; biases start at zero.
pub fn init_weights(arch: &ModelArchitecture, seed: u64) -> Result<WeightSet> {
    arch.validate()?;
    let shapes = arch.shape_chain()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (i, spec) in arch.layers.iter().enumerate() {
        let input = shapes[i];
        let params = match spec.kind {
            LayerKind::Conv1D { filters, kernel } => {
                let fan_in = (kernel * input.channels) as f64;
                let fan_out = (kernel * filters) as f64;
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                let n = filters * kernel * input.channels;
                let weights = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                LayerParams::Conv {
                    filters,
                    kernel,
                    in_channels: input.channels,
                    weights,
                    biases: vec![0.0; filters],
                }
            }
            LayerKind::MaxPool1D { .. } => LayerParams::Pool,
            LayerKind::Dense { units } | LayerKind::Softmax { classes: units } => {
                let in_dim = input.flat();
                let limit = (6.0 / (in_dim as f64 + units as f64)).sqrt();
                let weights = (0..units * in_dim)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                LayerParams::Dense {
                    units,
                    in_dim,
                    weights,
                    biases: vec![0.0; units],
                }
            }
        };
        layers.push(params);
    }
    Ok(WeightSet { layers })
}
