//! Mini-batch SGD with cross-entropy loss, dropout and layer freezing.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::forward::{run_sample, Mode, SampleTrace};
use super::{LayerKind, LayerParams, ModelArchitecture, TrainConfig, WeightSet};
use crate::data::WindowedDataset;
use crate::metrics::ConfusionMatrix;
use crate::{Error, Result};

/// Per-layer gradient buffers, same shapes as the weight set.
struct GradBuffers {
    layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl GradBuffers {
    fn zeros_like(w: &WeightSet) -> Self {
        let layers = w
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Conv { weights, biases, .. }
                | LayerParams::Dense { weights, biases, .. } => {
                    Some((vec![0.0; weights.len()], vec![0.0; biases.len()]))
                }
                LayerParams::Pool => None,
            })
            .collect();
        GradBuffers { layers }
    }

    fn reset(&mut self) {
        for buf in self.layers.iter_mut().flatten() {
            buf.0.iter_mut().for_each(|v| *v = 0.0);
            buf.1.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Restores a channel-major flat gradient to a time-major buffer.
fn unflatten_grad(flat: &[f64], len: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; flat.len()];
    for c in 0..channels {
        for t in 0..len {
            out[t * channels + c] = flat[c * len + t];
        }
    }
    out
}

/// Backpropagates one sample, accumulating parameter gradients into `grads`.
/// Returns the sample's cross-entropy loss.
fn backward_sample(
    arch: &ModelArchitecture,
    w: &WeightSet,
    frame: &[f64],
    label: usize,
    trace: &SampleTrace,
    probs: &[f64],
    grads: &mut GradBuffers,
) -> f64 {
    let shapes = arch.shape_chain().expect("validated architecture");
    let loss = -probs[label].max(1e-300).ln();

    // dL/dlogits for softmax + cross-entropy.
    let mut delta: Vec<f64> = probs.to_vec();
    delta[label] -= 1.0;

    for i in (0..arch.layers.len()).rev() {
        let in_shape = shapes[i];
        let layer_input: &[f64] = if i == 0 { frame } else { &trace.outputs[i - 1] };
        match (&arch.layers[i].kind, &w.layers[i]) {
            (LayerKind::Softmax { .. }, LayerParams::Dense { weights, in_dim, .. })
            | (LayerKind::Dense { .. }, LayerParams::Dense { weights, in_dim, .. }) => {
                let is_hidden = matches!(arch.layers[i].kind, LayerKind::Dense { .. });
                if is_hidden {
                    if let Some(scales) = &trace.dropout_scales[i] {
                        for (d, s) in delta.iter_mut().zip(scales) {
                            *d *= *s;
                        }
                    }
                    let relu = trace.relu_outs[i].as_ref().expect("dense trace");
                    for (d, r) in delta.iter_mut().zip(relu) {
                        if *r <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                let x = trace.flat_inputs[i].as_ref().expect("dense trace");
                let units = delta.len();
                if let Some((gw, gb)) = grads.layers[i].as_mut() {
                    for u in 0..units {
                        let row = u * in_dim;
                        let du = delta[u];
                        gb[u] += du;
                        for j in 0..*in_dim {
                            gw[row + j] += du * x[j];
                        }
                    }
                }
                // Gradient w.r.t. the flattened input, then unflatten.
                let mut dx = vec![0.0; *in_dim];
                for u in 0..units {
                    let row = u * in_dim;
                    let du = delta[u];
                    for j in 0..*in_dim {
                        dx[j] += weights[row + j] * du;
                    }
                }
                delta = unflatten_grad(&dx, in_shape.len, in_shape.channels);
            }
            (LayerKind::MaxPool1D { .. }, LayerParams::Pool) => {
                let argmax = trace.pool_argmax[i].as_ref().expect("pool trace");
                let mut dx = vec![0.0; in_shape.flat()];
                for (out_idx, &src) in argmax.iter().enumerate() {
                    dx[src] += delta[out_idx];
                }
                delta = dx;
            }
            (
                LayerKind::Conv1D { filters, kernel },
                LayerParams::Conv { weights, .. },
            ) => {
                let out = &trace.outputs[i];
                let ch = in_shape.channels;
                let out_len = in_shape.len - kernel + 1;
                // ReLU mask from the stored post-activation output.
                for (d, o) in delta.iter_mut().zip(out) {
                    if *o <= 0.0 {
                        *d = 0.0;
                    }
                }
                if let Some((gw, gb)) = grads.layers[i].as_mut() {
                    for t in 0..out_len {
                        for f in 0..*filters {
                            let du = delta[t * filters + f];
                            if du == 0.0 {
                                continue;
                            }
                            gb[f] += du;
                            let w_base = f * kernel * ch;
                            for dt in 0..*kernel {
                                let in_base = (t + dt) * ch;
                                let wk = w_base + dt * ch;
                                for c in 0..ch {
                                    gw[wk + c] += du * layer_input[in_base + c];
                                }
                            }
                        }
                    }
                }
                if i > 0 {
                    let mut dx = vec![0.0; in_shape.flat()];
                    for t in 0..out_len {
                        for f in 0..*filters {
                            let du = delta[t * filters + f];
                            if du == 0.0 {
                                continue;
                            }
                            let w_base = f * kernel * ch;
                            for dt in 0..*kernel {
                                let in_base = (t + dt) * ch;
                                let wk = w_base + dt * ch;
                                for c in 0..ch {
                                    dx[in_base + c] += weights[wk + c] * du;
                                }
                            }
                        }
                    }
                    delta = dx;
                } else {
                    delta = Vec::new();
                }
            }
            _ => unreachable!("weight set was validated against the architecture"),
        }
        if i == 0 {
            break;
        }
    }
    loss
}

/// Per-layer weight and bias gradients; `None` for parameterless layers.
pub type LayerGradients = Vec<Option<(Vec<f64>, Vec<f64>)>>;

/// Per-layer gradients of the mean cross-entropy over `data`, computed
/// without dropout.
pub fn loss_gradients(
    arch: &ModelArchitecture,
    w: &WeightSet,
    data: &WindowedDataset,
) -> Result<(f64, LayerGradients)> {
    w.matches(arch)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("loss_gradients".into()));
    }
    let mut grads = GradBuffers::zeros_like(w);
    let frame_len = data.frame_len();
    let mut total = 0.0;
    for s in 0..data.len() {
        let frame = &data.frames[s * frame_len..(s + 1) * frame_len];
        let (probs, trace) = run_sample(arch, w, frame, &mut Mode::Eval, true)?;
        total += backward_sample(
            arch,
            w,
            frame,
            data.labels[s] as usize,
            &trace.expect("trace requested"),
            &probs,
            &mut grads,
        );
    }
    let scale = 1.0 / data.len() as f64;
    let mean_grads = grads
        .layers
        .into_iter()
        .map(|layer| {
            layer.map(|(gw, gb)| {
                (
                    gw.into_iter().map(|g| g * scale).collect(),
                    gb.into_iter().map(|g| g * scale).collect(),
                )
            })
        })
        .collect();
    Ok((total * scale, mean_grads))
}

/// Mean cross-entropy of the model on a labeled dataset (evaluation mode).
pub fn training_loss(arch: &ModelArchitecture, w: &WeightSet, data: &WindowedDataset) -> Result<f64> {
    w.matches(arch)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("loss on empty dataset".into()));
    }
    let frame_len = data.frame_len();
    let mut total = 0.0;
    for s in 0..data.len() {
        let frame = &data.frames[s * frame_len..(s + 1) * frame_len];
        let (probs, _) = run_sample(arch, w, frame, &mut Mode::Eval, false)?;
        total += -probs[data.labels[s] as usize].max(1e-300).ln();
    }
    Ok(total / data.len() as f64)
}

/// Runs `cfg.local_epochs` epochs of mini-batch SGD and returns the updated
/// weights. Frozen layers come back bit-identical. Deterministic for a
/// fixed `cfg.rng_seed`.
pub fn train_local(
    arch: &ModelArchitecture,
    w: &WeightSet,
    data: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<WeightSet> {
    cfg.validate()?;
    w.matches(arch)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("train_local requires data".into()));
    }
    let classes = arch.class_count();
    if let Some(&bad) = data.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} outside class count {classes}"
        )));
    }

    let mut weights = w.clone();
    let mut rng = StdRng::seed_from_u64(cfg.rng_seed);
    let mut grads = GradBuffers::zeros_like(&weights);
    let frame_len = data.frame_len();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.reset();
            let mut batch_loss = 0.0;
            for &s in batch {
                let frame = &data.frames[s * frame_len..(s + 1) * frame_len];
                let mut mode = Mode::Train { rng: &mut rng, dropout: cfg.dropout_rate };
                let (probs, trace) = run_sample(arch, &weights, frame, &mut mode, true)?;
                let trace = trace.expect("trace requested");
                batch_loss += backward_sample(
                    arch,
                    &weights,
                    frame,
                    data.labels[s] as usize,
                    &trace,
                    &probs,
                    &mut grads,
                );
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail: format!("batch loss {batch_loss} over {} samples", batch.len()),
                });
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (i, layer) in weights.layers.iter_mut().enumerate() {
                if arch.layers[i].frozen {
                    continue;
                }
                if let (
                    LayerParams::Conv { weights: lw, biases: lb, .. }
                    | LayerParams::Dense { weights: lw, biases: lb, .. },
                    Some((gw, gb)),
                ) = (layer, grads.layers[i].as_ref())
                {
                    for (v, g) in lw.iter_mut().zip(gw) {
                        *v -= scale * g;
                    }
                    for (v, g) in lb.iter_mut().zip(gb) {
                        *v -= scale * g;
                    }
                }
            }
        }
    }

    if !weights.all_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: cfg.local_epochs,
            batch: 0,
            detail: "weights diverged to non-finite values".into(),
        });
    }
    Ok(weights)
}

/// Argmax classification of a labeled dataset into a confusion matrix.
pub fn evaluate(
    arch: &ModelArchitecture,
    w: &WeightSet,
    data: &WindowedDataset,
) -> Result<ConfusionMatrix> {
    w.matches(arch)?;
    let classes = arch.class_count();
    if let Some(&bad) = data.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} outside class count {classes}"
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    let frame_len = data.frame_len();
    for s in 0..data.len() {
        let frame = &data.frames[s * frame_len..(s + 1) * frame_len];
        let (probs, _) = run_sample(arch, w, frame, &mut Mode::Eval, false)?;
        let mut pred = 0;
        for (c, p) in probs.iter().enumerate() {
            if *p > probs[pred] {
                pred = c;
            }
        }
        cm.record(data.labels[s] as usize, pred);
    }
    Ok(cm)
}
