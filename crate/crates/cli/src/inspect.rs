//! Checkpoint inspection: architecture, parameter counts and weight
//! statistics.

use std::path::Path;

use anyhow::{Context, Result};

use fedsim_core::nn::LayerParams;
use fedsim_core::wire::{load_checkpoint, payload_size};

use crate::config::arch_to_string;

pub fn inspect_checkpoint(path: &Path, out: &mut dyn std::io::Write) -> Result<()> {
    let (arch, weights) =
        load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    writeln!(out, "checkpoint: {}", path.display())?;
    writeln!(
        out,
        "arch: {} (+softmax {} classes), input {}x{}",
        arch_to_string(&arch),
        arch.class_count(),
        arch.input_shape.window,
        arch.input_shape.channels
    )?;
    writeln!(out, "layers:")?;
    for (i, (spec, params)) in arch.layers.iter().zip(&weights.layers).enumerate() {
        let stats = match params {
            LayerParams::Conv { weights, biases, .. }
            | LayerParams::Dense { weights, biases, .. } => {
                let all = weights.iter().chain(biases.iter());
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                let mut sum = 0.0;
                let mut count = 0usize;
                for &v in all {
                    min = min.min(v);
                    max = max.max(v);
                    sum += v;
                    count += 1;
                }
                format!(
                    "params {count}, min {min:.6}, mean {:.6}, max {max:.6}",
                    sum / count as f64
                )
            }
            LayerParams::Pool => "no parameters".to_string(),
        };
        let frozen = if spec.frozen { " [frozen]" } else { "" };
        writeln!(out, "  {i}: {:?}{frozen} -- {stats}", spec.kind)?;
    }
    writeln!(out, "total parameters: {}", weights.parameter_count())?;
    writeln!(
        out,
        "payload bytes (full): {}",
        payload_size(&weights, &vec![true; weights.layer_count()])
    )?;
    Ok(())
}
