//! Binary exchange formats.
//!
//! Weight payloads are little-endian with float32 tensors: a header
//! (magic, version, layer count, one inclusion byte per layer) followed by
//! one self-describing record per included layer. The communication ledger
//! counts these payload bytes and nothing else.
//!
//! Checkpoints wrap a full payload with the architecture description.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::nn::{InputShape, LayerKind, LayerParams, LayerSpec, ModelArchitecture, WeightSet};
use crate::{Error, Result};

const WEIGHTS_MAGIC: &[u8; 4] = b"FLWS";
const WEIGHTS_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
const CHECKPOINT_VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_POOL: u8 = 1;
const KIND_DENSE: u8 = 2;
const KIND_SOFTMAX: u8 = 3;

/// Serialized size in bytes of one layer record.
fn record_size(params: &LayerParams) -> u64 {
    match params {
        LayerParams::Conv { weights, biases, .. } => 1 + 12 + 4 * (weights.len() + biases.len()) as u64,
        LayerParams::Pool => 1,
        LayerParams::Dense { weights, biases, .. } => 1 + 8 + 4 * (weights.len() + biases.len()) as u64,
    }
}

/// Header size for a payload covering `layer_count` layers.
pub fn header_size(layer_count: usize) -> u64 {
    4 + 4 + 4 + layer_count as u64
}

/// Exact byte size of `serialize_weights(w, mask)` without serializing.
pub fn payload_size(w: &WeightSet, mask: &[bool]) -> u64 {
    let mut total = header_size(w.layer_count());
    for (params, &included) in w.layers.iter().zip(mask) {
        if included {
            total += record_size(params);
        }
    }
    total
}

fn write_record(out: &mut Vec<u8>, params: &LayerParams) {
    match params {
        LayerParams::Conv { filters, kernel, in_channels, weights, biases } => {
            out.push(KIND_CONV);
            out.extend_from_slice(&(*filters as u32).to_le_bytes());
            out.extend_from_slice(&(*kernel as u32).to_le_bytes());
            out.extend_from_slice(&(*in_channels as u32).to_le_bytes());
            for v in weights {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in biases {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        LayerParams::Pool => out.push(KIND_POOL),
        LayerParams::Dense { units, in_dim, weights, biases } => {
            out.push(KIND_DENSE);
            out.extend_from_slice(&(*units as u32).to_le_bytes());
            out.extend_from_slice(&(*in_dim as u32).to_le_bytes());
            for v in weights {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in biases {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
}

/// Serializes the layers selected by `mask` (one flag per layer).
pub fn serialize_weights(w: &WeightSet, mask: &[bool]) -> Vec<u8> {
    assert_eq!(mask.len(), w.layer_count(), "mask must cover every layer");
    let mut out = Vec::with_capacity(payload_size(w, mask) as usize);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.layer_count() as u32).to_le_bytes());
    for &included in mask {
        out.push(u8::from(included));
    }
    for (params, &included) in w.layers.iter().zip(mask) {
        if included {
            write_record(&mut out, params);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptPayload(format!(
                "payload truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// A decoded payload: one entry per layer, `None` where the mask excluded
/// the layer.
pub type PartialWeights = Vec<Option<LayerParams>>;

/// Inverse of [`serialize_weights`].
pub fn deserialize_weights(bytes: &[u8]) -> Result<PartialWeights> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::CorruptPayload("bad weight payload magic".into()));
    }
    let version = cur.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::CorruptPayload(format!(
            "unsupported weight payload version {version}"
        )));
    }
    let layer_count = cur.u32()? as usize;
    let mut mask = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        mask.push(cur.u8()? != 0);
    }
    let mut layers = Vec::with_capacity(layer_count);
    for &included in &mask {
        if !included {
            layers.push(None);
            continue;
        }
        let kind = cur.u8()?;
        let params = match kind {
            KIND_CONV => {
                let filters = cur.u32()? as usize;
                let kernel = cur.u32()? as usize;
                let in_channels = cur.u32()? as usize;
                let weights = cur.f32s(filters * kernel * in_channels)?;
                let biases = cur.f32s(filters)?;
                LayerParams::Conv { filters, kernel, in_channels, weights, biases }
            }
            KIND_POOL => LayerParams::Pool,
            KIND_DENSE => {
                let units = cur.u32()? as usize;
                let in_dim = cur.u32()? as usize;
                let weights = cur.f32s(units * in_dim)?;
                let biases = cur.f32s(units)?;
                LayerParams::Dense { units, in_dim, weights, biases }
            }
            other => {
                return Err(Error::CorruptPayload(format!(
                    "unknown layer record kind {other}"
                )))
            }
        };
        layers.push(Some(params));
    }
    if cur.pos != bytes.len() {
        return Err(Error::CorruptPayload(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    Ok(layers)
}

fn kind_tag(kind: &LayerKind) -> (u8, u32, u32) {
    match *kind {
        LayerKind::Conv1D { filters, kernel } => (KIND_CONV, filters as u32, kernel as u32),
        LayerKind::MaxPool1D { pool } => (KIND_POOL, pool as u32, 0),
        LayerKind::Dense { units } => (KIND_DENSE, units as u32, 0),
        LayerKind::Softmax { classes } => (KIND_SOFTMAX, classes as u32, 0),
    }
}

/// Writes architecture plus full weights as a versioned checkpoint file.
pub fn save_checkpoint(path: &Path, arch: &ModelArchitecture, w: &WeightSet) -> Result<()> {
    w.matches(arch)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(arch.input_shape.window as u32).to_le_bytes())?;
    out.write_all(&(arch.input_shape.channels as u32).to_le_bytes())?;
    out.write_all(&(arch.layer_count() as u32).to_le_bytes())?;
    for spec in &arch.layers {
        let (kind, a, b) = kind_tag(&spec.kind);
        out.write_all(&[kind])?;
        out.write_all(&a.to_le_bytes())?;
        out.write_all(&b.to_le_bytes())?;
        out.write_all(&[u8::from(spec.frozen)])?;
    }
    let payload = serialize_weights(w, &vec![true; w.layer_count()]);
    out.write_all(&(payload.len() as u64).to_le_bytes())?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back into an architecture and full weight set.
///
/// Checkpoints store float32 tensors, so weights round-trip at wire
/// precision.
pub fn load_checkpoint(path: &Path) -> Result<(ModelArchitecture, WeightSet)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptPayload("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptPayload(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let window = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    let layer_count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = cur.u8()?;
        let a = cur.u32()? as usize;
        let b = cur.u32()? as usize;
        let frozen = cur.u8()? != 0;
        let kind = match kind {
            KIND_CONV => LayerKind::Conv1D { filters: a, kernel: b },
            KIND_POOL => LayerKind::MaxPool1D { pool: a },
            KIND_DENSE => LayerKind::Dense { units: a },
            KIND_SOFTMAX => LayerKind::Softmax { classes: a },
            other => {
                return Err(Error::CorruptPayload(format!(
                    "unknown checkpoint layer kind {other}"
                )))
            }
        };
        layers.push(LayerSpec { kind, frozen });
    }
    let payload_len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let payload = cur.take(payload_len)?;
    let partial = deserialize_weights(payload)?;
    let weights = WeightSet {
        layers: partial
            .into_iter()
            .map(|p| p.ok_or_else(|| Error::CorruptPayload("checkpoint payload has holes".into())))
            .collect::<Result<Vec<_>>>()?,
    };
    let arch = ModelArchitecture {
        layers,
        input_shape: InputShape { window, channels },
    };
    arch.validate()?;
    weights.matches(&arch)?;
    Ok((arch, weights))
}

/// Narrows a weight set to wire precision (float32) without serializing.
/// Useful when a test needs in-memory weights that round-trip bit-exactly.
pub fn quantize_to_wire(w: &WeightSet) -> WeightSet {
    let mut out = w.clone();
    for layer in out.layers.iter_mut() {
        if let LayerParams::Conv { weights, biases, .. }
        | LayerParams::Dense { weights, biases, .. } = layer
        {
            for v in weights.iter_mut() {
                *v = *v as f32 as f64;
            }
            for v in biases.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
    out
}
