//! Dataset ingestion and preparation: sliding-window framing, channel-wise
//! z-normalization and per-participant client partitioning.

mod io;
mod synthetic;

pub use io::{load_windowed, read_participant_csv, save_windowed};
pub use synthetic::{pool_test_sets, synth_noniid, SkewMode, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A raw multi-channel sensor stream for one participant, labeled per
/// timestep.
#[derive(Debug, Clone)]
pub struct SensorRecording {
    pub participant_id: String,
    /// Time-major samples, `timesteps x channels`.
    pub samples: Vec<f64>,
    pub channels: usize,
    pub labels: Vec<u32>,
    pub sampling_rate_hz: f64,
}

impl SensorRecording {
    pub fn timesteps(&self) -> usize {
        self.samples.len().checked_div(self.channels).unwrap_or(0)
    }
}

/// Fixed-length frames cut from a recording, one label per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    /// Frame-major values, `frames x window_len x channels`.
    pub frames: Vec<f64>,
    pub labels: Vec<u32>,
    pub window_len: usize,
    pub channels: usize,
    /// Set when the source was shorter than one window.
    pub truncated: bool,
}

impl WindowedDataset {
    pub fn empty(window_len: usize, channels: usize) -> Self {
        WindowedDataset {
            frames: Vec::new(),
            labels: Vec::new(),
            window_len,
            channels,
            truncated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.window_len * self.channels
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Appends every frame of `other`; window geometry must agree.
    pub fn extend(&mut self, other: &WindowedDataset) -> Result<()> {
        if other.window_len != self.window_len || other.channels != self.channels {
            return Err(Error::InvalidConfig(format!(
                "window geometry mismatch: {}x{} vs {}x{}",
                self.window_len, self.channels, other.window_len, other.channels
            )));
        }
        self.frames.extend_from_slice(&other.frames);
        self.labels.extend_from_slice(&other.labels);
        self.truncated |= other.truncated;
        Ok(())
    }

    /// First `n` frames.
    pub fn take(&self, n: usize) -> WindowedDataset {
        let fl = self.frame_len();
        WindowedDataset {
            frames: self.frames[..n * fl].to_vec(),
            labels: self.labels[..n].to_vec(),
            window_len: self.window_len,
            channels: self.channels,
            truncated: self.truncated,
        }
    }

    /// Frames from `n` onward.
    pub fn skip(&self, n: usize) -> WindowedDataset {
        let fl = self.frame_len();
        WindowedDataset {
            frames: self.frames[n * fl..].to_vec(),
            labels: self.labels[n..].to_vec(),
            window_len: self.window_len,
            channels: self.channels,
            truncated: self.truncated,
        }
    }
}

/// One simulated participant: chronological train/test split of its frames.
#[derive(Debug, Clone)]
pub struct ClientPartition {
    pub client_id: String,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    /// Training sample count, the aggregation weight.
    pub n_k: usize,
}

/// Concatenation of every client's test set.
#[derive(Debug, Clone)]
pub struct GlobalTestSet {
    pub data: WindowedDataset,
}

/// Majority label of a label slice: the modal label if it covers a strict
/// majority of timesteps, otherwise `None`.
fn majority_label(labels: &[u32]) -> Option<u32> {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for &l in labels {
        match counts.iter_mut().find(|(v, _)| *v == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    let (label, count) = counts.into_iter().max_by_key(|&(_, c)| c)?;
    (count * 2 > labels.len()).then_some(label)
}

/// Cuts `rec` into frames of `length` timesteps; consecutive frames share
/// exactly `overlap` timesteps. Each frame takes the strict-majority label
/// of its timesteps; frames without one are dropped. A recording shorter
/// than one window yields an empty dataset with the `truncated` flag set.
pub fn window(rec: &SensorRecording, length: usize, overlap: usize) -> Result<WindowedDataset> {
    if length == 0 || overlap >= length {
        return Err(Error::InvalidConfig(format!(
            "window length {length} must exceed overlap {overlap}"
        )));
    }
    let t = rec.timesteps();
    let mut out = WindowedDataset::empty(length, rec.channels);
    if t < length {
        out.truncated = true;
        return Ok(out);
    }
    let step = length - overlap;
    let n = (t - length) / step + 1;
    for i in 0..n {
        let start = i * step;
        let Some(label) = majority_label(&rec.labels[start..start + length]) else {
            continue;
        };
        out.frames
            .extend_from_slice(&rec.samples[start * rec.channels..(start + length) * rec.channels]);
        out.labels.push(label);
    }
    Ok(out)
}

/// Per-channel normalization constants, computed on training data only.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was zero; they are centered and left at
    /// scale 1.
    pub zero_variance: Vec<bool>,
}

/// Computes per-channel mean and population standard deviation.
pub fn channel_stats(ds: &WindowedDataset) -> Result<ChannelStats> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("channel_stats".into()));
    }
    let ch = ds.channels;
    let mut mean = vec![0.0; ch];
    let mut count = 0usize;
    for frame in ds.frames.chunks(ch) {
        for (m, v) in mean.iter_mut().zip(frame) {
            *m += v;
        }
        count += 1;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; ch];
    for frame in ds.frames.chunks(ch) {
        for ((s, v), m) in var.iter_mut().zip(frame).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let mut std = vec![0.0; ch];
    let mut zero_variance = vec![false; ch];
    for c in 0..ch {
        var[c] /= count as f64;
        if var[c] > 0.0 {
            std[c] = var[c].sqrt();
        } else {
            std[c] = 1.0;
            zero_variance[c] = true;
        }
    }
    Ok(ChannelStats { mean, std, zero_variance })
}

/// Applies `(x - mean) / std` channel-wise with the supplied constants.
pub fn apply_znorm(ds: &WindowedDataset, stats: &ChannelStats) -> WindowedDataset {
    let ch = ds.channels;
    let mut out = ds.clone();
    for frame in out.frames.chunks_mut(ch) {
        for ((v, m), s) in frame.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Z-normalizes a dataset with its own statistics. Callers holding a
/// train/test split should compute [`channel_stats`] on the training set
/// and [`apply_znorm`] to both instead.
pub fn znormalize(ds: &WindowedDataset) -> Result<(WindowedDataset, ChannelStats)> {
    let stats = channel_stats(ds)?;
    Ok((apply_znorm(ds, &stats), stats))
}

/// Outcome of partitioning: clients, the pooled test set and the ids of
/// participants excluded for having too few windows.
pub struct PartitionOutcome {
    pub clients: Vec<ClientPartition>,
    pub global_test: GlobalTestSet,
    pub excluded: Vec<String>,
}

const MIN_WINDOWS_PER_CLIENT: usize = 5;

/// One client per participant. Frames are split chronologically
/// (train = first `split_ratio`), z-normalized with constants from the
/// client's own training frames, and the test remainders are pooled into
/// the global test set.
pub fn partition_by_participant(
    recordings: &[SensorRecording],
    split_ratio: f64,
    window_len: usize,
    overlap: usize,
) -> Result<PartitionOutcome> {
    if !(0.0..1.0).contains(&split_ratio) || split_ratio <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "split ratio {split_ratio} must lie in (0, 1)"
        )));
    }
    if recordings.is_empty() {
        return Err(Error::EmptyDataset("no recordings to partition".into()));
    }
    let channels = recordings[0].channels;
    let mut per_participant: Vec<(String, WindowedDataset)> = Vec::new();
    for rec in recordings {
        if rec.channels != channels {
            return Err(Error::InvalidConfig(
                "recordings disagree on channel count".into(),
            ));
        }
        let ds = window(rec, window_len, overlap)?;
        match per_participant.iter_mut().find(|(id, _)| *id == rec.participant_id) {
            Some((_, existing)) => existing.extend(&ds)?,
            None => per_participant.push((rec.participant_id.clone(), ds)),
        }
    }

    let mut clients = Vec::new();
    let mut excluded = Vec::new();
    let mut global_test = WindowedDataset::empty(window_len, channels);
    for (id, ds) in per_participant {
        if ds.len() < MIN_WINDOWS_PER_CLIENT {
            excluded.push(id);
            continue;
        }
        let n_train = ((ds.len() as f64) * split_ratio).round() as usize;
        let n_train = n_train.clamp(1, ds.len() - 1);
        let stats = channel_stats(&ds.take(n_train))?;
        let train = apply_znorm(&ds.take(n_train), &stats);
        let test = apply_znorm(&ds.skip(n_train), &stats);
        global_test.extend(&test)?;
        clients.push(ClientPartition {
            client_id: id,
            n_k: train.len(),
            train,
            test,
        });
    }
    if clients.is_empty() {
        return Err(Error::EmptyDataset(
            "every participant was excluded during partitioning".into(),
        ));
    }
    Ok(PartitionOutcome {
        clients,
        global_test: GlobalTestSet { data: global_test },
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_recording(t: usize, channels: usize, label: u32) -> SensorRecording {
        SensorRecording {
            participant_id: "p0".into(),
            samples: (0..t * channels).map(|i| i as f64).collect(),
            channels,
            labels: vec![label; t],
            sampling_rate_hz: 50.0,
        }
    }

    #[test]
    fn window_counts_match_arithmetic() {
        let rec = flat_recording(128, 2, 0);
        assert_eq!(window(&rec, 128, 64).unwrap().len(), 1);
        let rec = flat_recording(256, 2, 0);
        assert_eq!(window(&rec, 128, 64).unwrap().len(), 3);
    }

    #[test]
    fn short_recording_yields_truncated_empty() {
        let rec = flat_recording(100, 2, 0);
        let ds = window(&rec, 128, 64).unwrap();
        assert!(ds.is_empty());
        assert!(ds.truncated);
    }

    #[test]
    fn majority_label_matches_naive_count() {
        let mut rec = flat_recording(8, 1, 0);
        rec.labels = vec![1, 1, 2, 1, 2, 1, 2, 1];
        let ds = window(&rec, 8, 0).unwrap();
        // Naive count: label 1 appears 5 times of 8, a strict majority.
        assert_eq!(ds.labels, vec![1]);

        rec.labels = vec![1, 1, 1, 1, 2, 2, 2, 2];
        let ds = window(&rec, 8, 0).unwrap();
        // Tie: no strict majority, frame dropped.
        assert!(ds.is_empty());
    }

    #[test]
    fn windows_reconstruct_the_series_prefix() {
        let rec = flat_recording(100, 3, 0);
        let length = 16;
        let overlap = 4;
        let ds = window(&rec, length, overlap).unwrap();
        let step = length - overlap;
        let mut rebuilt: Vec<f64> = ds.frame(0).to_vec();
        for i in 1..ds.len() {
            rebuilt.extend_from_slice(&ds.frame(i)[overlap * 3..]);
        }
        let covered = (length + (ds.len() - 1) * step) * 3;
        assert_eq!(rebuilt, rec.samples[..covered]);
    }

    #[test]
    fn znormalize_centers_and_scales() {
        let mut rec = flat_recording(64, 2, 0);
        for (i, v) in rec.samples.iter_mut().enumerate() {
            *v = ((i * 7 + 3) % 23) as f64 * 0.5 - 4.0;
        }
        let ds = window(&rec, 8, 0).unwrap();
        let (normed, _) = znormalize(&ds).unwrap();
        // Independent recomputation pass.
        for c in 0..2 {
            let vals: Vec<f64> = normed.frames.chunks(2).map(|f| f[c]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_centers_to_zero() {
        let mut rec = flat_recording(32, 2, 0);
        for frame in rec.samples.chunks_mut(2) {
            frame[0] = 5.0;
        }
        let ds = window(&rec, 8, 0).unwrap();
        let (normed, stats) = znormalize(&ds).unwrap();
        assert!(stats.zero_variance[0]);
        assert!(!stats.zero_variance[1]);
        assert!(normed.frames.chunks(2).all(|f| f[0] == 0.0));
    }

    #[test]
    fn unit_std_channel_is_untouched() {
        let mut rec = flat_recording(32, 1, 0);
        for (i, v) in rec.samples.iter_mut().enumerate() {
            *v = if i % 2 == 0 { -1.0 } else { 1.0 };
        }
        let ds = window(&rec, 8, 0).unwrap();
        let (normed, _) = znormalize(&ds).unwrap();
        assert_eq!(normed.frames, ds.frames);
    }

    #[test]
    fn partition_splits_eighty_twenty() {
        let mut recs = Vec::new();
        for p in 0..3 {
            let mut rec = flat_recording(80, 1, 0);
            rec.participant_id = format!("p{p}");
            recs.push(rec);
        }
        let out = partition_by_participant(&recs, 0.8, 8, 0).unwrap();
        assert_eq!(out.clients.len(), 3);
        for client in &out.clients {
            assert_eq!(client.train.len(), 8);
            assert_eq!(client.test.len(), 2);
            assert_eq!(client.n_k, 8);
            // No leakage: train and test tile the chronological frame
            // sequence without overlap, normalized with train-only stats.
            let rec = flat_recording(80, 1, 0);
            let all = window(&rec, 8, 0).unwrap();
            assert_eq!(client.train.len() + client.test.len(), all.len());
            let stats = channel_stats(&all.take(8)).unwrap();
            let expected = apply_znorm(&all, &stats);
            let got: Vec<f64> = client
                .train
                .frames
                .iter()
                .chain(client.test.frames.iter())
                .cloned()
                .collect();
            for (a, b) in got.iter().zip(&expected.frames) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let total_test: usize = out.clients.iter().map(|c| c.test.len()).sum();
        assert_eq!(out.global_test.data.len(), total_test);
    }

    #[test]
    fn tiny_participants_are_excluded() {
        let mut small = flat_recording(16, 1, 0); // two 8-windows only
        small.participant_id = "tiny".into();
        let big = {
            let mut r = flat_recording(80, 1, 0);
            r.participant_id = "big".into();
            r
        };
        let out = partition_by_participant(&[small, big], 0.8, 8, 0).unwrap();
        assert_eq!(out.excluded, vec!["tiny".to_string()]);
        assert_eq!(out.clients.len(), 1);
    }
}
