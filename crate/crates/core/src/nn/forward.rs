//! Forward pass. Buffers between conv/pool layers are time-major
//! (`[t][c]`); dense layers consume a channel-major flattening so that
//! appending a filter to the previous layer extends the tail of the
//! flattened vector instead of interleaving (see [`super::grow`]).

use rand::rngs::StdRng;
use rand::Rng;

use super::{FeatureShape, LayerKind, LayerParams, ModelArchitecture, WeightSet};
use crate::{Error, Result};

/// Per-sample intermediate state kept for backpropagation.
pub(crate) struct SampleTrace {
    /// Post-activation output each layer fed to the next one.
    pub outputs: Vec<Vec<f64>>,
    /// Hidden dense layers: post-ReLU output before dropout.
    pub relu_outs: Vec<Option<Vec<f64>>>,
    /// Pooling layers: flat input index of each maximum.
    pub pool_argmax: Vec<Option<Vec<usize>>>,
    /// Hidden dense layers: per-unit dropout factor (0 or 1/(1-p)).
    pub dropout_scales: Vec<Option<Vec<f64>>>,
    /// Dense/softmax layers: the flattened input vector they consumed.
    pub flat_inputs: Vec<Option<Vec<f64>>>,
}

pub(crate) enum Mode<'r> {
    Eval,
    Train { rng: &'r mut StdRng, dropout: f64 },
}

/// Channel-major flattening of a time-major buffer.
fn flatten(buf: &[f64], shape: FeatureShape) -> Vec<f64> {
    let mut out = Vec::with_capacity(shape.flat());
    for c in 0..shape.channels {
        for t in 0..shape.len {
            out.push(buf[t * shape.channels + c]);
        }
    }
    out
}

fn conv_forward(
    input: &[f64],
    shape: FeatureShape,
    filters: usize,
    kernel: usize,
    weights: &[f64],
    biases: &[f64],
) -> Vec<f64> {
    let out_len = shape.len - kernel + 1;
    let ch = shape.channels;
    let mut out = vec![0.0; out_len * filters];
    for t in 0..out_len {
        for f in 0..filters {
            let mut acc = biases[f];
            let w_base = f * kernel * ch;
            for dt in 0..kernel {
                let in_base = (t + dt) * ch;
                let wk = w_base + dt * ch;
                for c in 0..ch {
                    acc += weights[wk + c] * input[in_base + c];
                }
            }
            out[t * filters + f] = acc.max(0.0);
        }
    }
    out
}

fn pool_forward(input: &[f64], shape: FeatureShape, pool: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = shape.len / pool;
    let ch = shape.channels;
    let mut out = vec![0.0; out_len * ch];
    let mut argmax = vec![0usize; out_len * ch];
    for t in 0..out_len {
        for c in 0..ch {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for i in 0..pool {
                let idx = (t * pool + i) * ch + c;
                if input[idx] > best {
                    best = input[idx];
                    best_idx = idx;
                }
            }
            out[t * ch + c] = best;
            argmax[t * ch + c] = best_idx;
        }
    }
    (out, argmax)
}

fn dense_forward(input: &[f64], units: usize, weights: &[f64], biases: &[f64]) -> Vec<f64> {
    let in_dim = input.len();
    let mut out = vec![0.0; units];
    for u in 0..units {
        let mut acc = biases[u];
        let row = u * in_dim;
        for i in 0..in_dim {
            acc += weights[row + i] * input[i];
        }
        out[u] = acc;
    }
    out
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Runs one sample through the network. Returns class probabilities and,
/// when `trace` is requested, the per-layer state backprop needs.
pub(crate) fn run_sample(
    arch: &ModelArchitecture,
    w: &WeightSet,
    frame: &[f64],
    mode: &mut Mode<'_>,
    trace: bool,
) -> Result<(Vec<f64>, Option<SampleTrace>)> {
    let shapes = arch.shape_chain()?;
    if frame.len() != shapes[0].flat() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            detail: format!(
                "input frame has {} values, architecture expects {}",
                frame.len(),
                shapes[0].flat()
            ),
        });
    }

    let n = arch.layers.len();
    let mut tr = SampleTrace {
        outputs: Vec::with_capacity(n),
        relu_outs: vec![None; n],
        pool_argmax: vec![None; n],
        dropout_scales: vec![None; n],
        flat_inputs: vec![None; n],
    };

    let mut cur: Vec<f64> = frame.to_vec();
    for (i, spec) in arch.layers.iter().enumerate() {
        let in_shape = shapes[i];
        cur = match (&spec.kind, &w.layers[i]) {
            (
                LayerKind::Conv1D { filters, kernel },
                LayerParams::Conv { weights, biases, .. },
            ) => conv_forward(&cur, in_shape, *filters, *kernel, weights, biases),
            (LayerKind::MaxPool1D { pool }, LayerParams::Pool) => {
                let (out, argmax) = pool_forward(&cur, in_shape, *pool);
                if trace {
                    tr.pool_argmax[i] = Some(argmax);
                }
                out
            }
            (LayerKind::Dense { units }, LayerParams::Dense { weights, biases, .. }) => {
                let flat = flatten(&cur, in_shape);
                let mut out = dense_forward(&flat, *units, weights, biases);
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
                if trace {
                    tr.flat_inputs[i] = Some(flat);
                    tr.relu_outs[i] = Some(out.clone());
                }
                if let Mode::Train { rng, dropout } = mode {
                    if *dropout > 0.0 {
                        let keep = 1.0 - *dropout;
                        let mut scales = vec![0.0; out.len()];
                        for (v, s) in out.iter_mut().zip(scales.iter_mut()) {
                            if rng.random::<f64>() < keep {
                                *s = 1.0 / keep;
                                *v *= *s;
                            } else {
                                *v = 0.0;
                            }
                        }
                        if trace {
                            tr.dropout_scales[i] = Some(scales);
                        }
                    }
                }
                out
            }
            (LayerKind::Softmax { classes }, LayerParams::Dense { weights, biases, .. }) => {
                let flat = flatten(&cur, in_shape);
                let mut out = dense_forward(&flat, *classes, weights, biases);
                if trace {
                    tr.flat_inputs[i] = Some(flat);
                }
                softmax_in_place(&mut out);
                out
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    detail: "layer parameters do not match layer kind".into(),
                })
            }
        };
        if trace {
            tr.outputs.push(cur.clone());
        }
    }

    let probs = cur;
    Ok((probs, trace.then_some(tr)))
}

/// Evaluation-mode forward pass for a single frame; returns class
/// probabilities.
pub fn forward_sample(arch: &ModelArchitecture, w: &WeightSet, frame: &[f64]) -> Result<Vec<f64>> {
    w.matches(arch)?;
    let (probs, _) = run_sample(arch, w, frame, &mut Mode::Eval, false)?;
    Ok(probs)
}

/// Evaluation-mode forward pass over a batch of frames (concatenated,
/// frame-major). Returns an `n_samples x classes` row-major probability
/// matrix; every row sums to one.
pub fn forward(
    arch: &ModelArchitecture,
    w: &WeightSet,
    frames: &[f64],
    n_samples: usize,
) -> Result<Vec<f64>> {
    w.matches(arch)?;
    let frame_len = arch.input_shape.window * arch.input_shape.channels;
    if frames.len() != n_samples * frame_len {
        return Err(Error::ShapeMismatch {
            layer: 0,
            detail: format!(
                "batch of {} values does not hold {} frames of {} values",
                frames.len(),
                n_samples,
                frame_len
            ),
        });
    }
    let classes = arch.class_count();
    let mut out = Vec::with_capacity(n_samples * classes);
    for s in 0..n_samples {
        let frame = &frames[s * frame_len..(s + 1) * frame_len];
        let (probs, _) = run_sample(arch, w, frame, &mut Mode::Eval, false)?;
        out.extend_from_slice(&probs);
    }
    Ok(out)
}
