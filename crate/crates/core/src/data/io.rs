//! Dataset persistence and CSV ingestion.
//!
//! The binary container is little-endian: a header with the dimensions,
//! then row-major float32 frames, then int32 labels.
//!
//! CSV ingestion expects one file per participant per sensor with header
//! `timestamp,x,y,z` (the accelerometer file carries an extra `label`
//! column); gyroscope rows are joined onto accelerometer timestamps by
//! nearest match.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{SensorRecording, WindowedDataset};
use crate::{Error, Result};

const DATASET_MAGIC: &[u8; 4] = b"FLDS";
const DATASET_VERSION: u32 = 1;

pub fn save_windowed(path: &Path, ds: &WindowedDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.window_len as u32).to_le_bytes())?;
    w.write_all(&(ds.channels as u32).to_le_bytes())?;
    w.write_all(&[u8::from(ds.truncated)])?;
    for v in &ds.frames {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    for l in &ds.labels {
        w.write_all(&(*l as i32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_windowed(path: &Path) -> Result<WindowedDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::CorruptPayload("bad dataset magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::CorruptPayload(format!(
            "unsupported dataset version {version}"
        )));
    }
    let n = read_u32(&mut r)? as usize;
    let window_len = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let mut frames = Vec::with_capacity(n * window_len * channels);
    let mut fbuf = [0u8; 4];
    for _ in 0..n * window_len * channels {
        r.read_exact(&mut fbuf)?;
        frames.push(f32::from_le_bytes(fbuf) as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut fbuf)?;
        let l = i32::from_le_bytes(fbuf);
        if l < 0 {
            return Err(Error::CorruptPayload(format!("negative label {l}")));
        }
        labels.push(l as u32);
    }
    Ok(WindowedDataset {
        frames,
        labels,
        window_len,
        channels,
        truncated: flag[0] != 0,
    })
}

struct SensorRows {
    timestamps: Vec<f64>,
    xyz: Vec<[f64; 3]>,
    labels: Vec<Option<u32>>,
}

fn parse_sensor_csv(path: &Path) -> Result<SensorRows> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::CorruptPayload(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_label = cols.len() == 5 && cols[4].eq_ignore_ascii_case("label");
    if !(cols.len() == 4 || has_label)
        || !cols[0].eq_ignore_ascii_case("timestamp")
        || !cols[1].eq_ignore_ascii_case("x")
    {
        return Err(Error::CorruptPayload(format!(
            "{}: expected header timestamp,x,y,z[,label]",
            path.display()
        )));
    }
    let mut rows = SensorRows {
        timestamps: Vec::new(),
        xyz: Vec::new(),
        labels: Vec::new(),
    };
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::CorruptPayload(format!(
                "{}:{}: expected {} fields",
                path.display(),
                lineno + 1,
                cols.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| {
                Error::CorruptPayload(format!(
                    "{}:{}: bad number {s:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::CorruptPayload(format!(
                    "{}:{}: non-finite sample {s:?}",
                    path.display(),
                    lineno + 1
                )));
            }
            Ok(v)
        };
        rows.timestamps.push(parse(fields[0])?);
        rows.xyz.push([parse(fields[1])?, parse(fields[2])?, parse(fields[3])?]);
        rows.labels.push(if has_label {
            Some(fields[4].parse::<u32>().map_err(|_| {
                Error::CorruptPayload(format!(
                    "{}:{}: bad label {:?}",
                    path.display(),
                    lineno + 1,
                    fields[4]
                ))
            })?)
        } else {
            None
        });
    }
    if rows.timestamps.is_empty() {
        return Err(Error::EmptyDataset(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

/// Index of the timestamp in `sorted` nearest to `t`.
fn nearest(sorted: &[f64], t: f64) -> usize {
    match sorted.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
        Ok(i) => i,
        Err(i) => {
            if i == 0 {
                0
            } else if i >= sorted.len() {
                sorted.len() - 1
            } else if (sorted[i] - t).abs() < (t - sorted[i - 1]).abs() {
                i
            } else {
                i - 1
            }
        }
    }
}

/// Reads one participant's accelerometer and gyroscope CSVs into a
/// six-channel recording (ax, ay, az, gx, gy, gz). Labels come from the
/// accelerometer file.
pub fn read_participant_csv(
    participant_id: &str,
    accel_path: &Path,
    gyro_path: &Path,
) -> Result<SensorRecording> {
    let accel = parse_sensor_csv(accel_path)?;
    let gyro = parse_sensor_csv(gyro_path)?;
    if accel.labels.iter().any(|l| l.is_none()) {
        return Err(Error::CorruptPayload(format!(
            "{}: accelerometer file must carry a label column",
            accel_path.display()
        )));
    }
    let mut samples = Vec::with_capacity(accel.timestamps.len() * 6);
    let mut labels = Vec::with_capacity(accel.timestamps.len());
    for (i, &t) in accel.timestamps.iter().enumerate() {
        let g = gyro.xyz[nearest(&gyro.timestamps, t)];
        samples.extend_from_slice(&accel.xyz[i]);
        samples.extend_from_slice(&g);
        labels.push(accel.labels[i].expect("checked above"));
    }
    let sampling_rate_hz = if accel.timestamps.len() > 1 {
        let span = accel.timestamps.last().unwrap() - accel.timestamps[0];
        if span > 0.0 {
            (accel.timestamps.len() - 1) as f64 / span
        } else {
            0.0
        }
    } else {
        0.0
    };
    Ok(SensorRecording {
        participant_id: participant_id.to_string(),
        samples,
        channels: 6,
        labels,
        sampling_rate_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrips() {
        let ds = WindowedDataset {
            frames: vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125],
            labels: vec![1, 0],
            window_len: 3,
            channels: 1,
            truncated: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.flds");
        save_windowed(&path, &ds).unwrap();
        let back = load_windowed(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.flds");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load_windowed(&path), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn csv_join_on_nearest_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let accel = dir.path().join("p1_accel.csv");
        let gyro = dir.path().join("p1_gyro.csv");
        std::fs::write(
            &accel,
            "timestamp,x,y,z,label\n0.00,1,2,3,0\n0.02,4,5,6,0\n0.04,7,8,9,1\n",
        )
        .unwrap();
        std::fs::write(&gyro, "timestamp,x,y,z\n0.001,10,11,12\n0.021,13,14,15\n").unwrap();
        let rec = read_participant_csv("p1", &accel, &gyro).unwrap();
        assert_eq!(rec.timesteps(), 3);
        assert_eq!(rec.channels, 6);
        assert_eq!(&rec.samples[0..6], &[1.0, 2.0, 3.0, 10.0, 11.0, 12.0]);
        assert_eq!(&rec.samples[6..12], &[4.0, 5.0, 6.0, 13.0, 14.0, 15.0]);
        assert_eq!(rec.labels, vec![0, 0, 1]);
        assert!((rec.sampling_rate_hz - 50.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_samples_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let accel = dir.path().join("a.csv");
        let gyro = dir.path().join("g.csv");
        std::fs::write(&accel, "timestamp,x,y,z,label\n0,1,NaN,3,0\n").unwrap();
        std::fs::write(&gyro, "timestamp,x,y,z\n0,1,2,3\n").unwrap();
        let err = read_participant_csv("p", &accel, &gyro).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn missing_label_column_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let accel = dir.path().join("a.csv");
        let gyro = dir.path().join("g.csv");
        std::fs::write(&accel, "timestamp,x,y,z\n0,1,2,3\n").unwrap();
        std::fs::write(&gyro, "timestamp,x,y,z\n0,1,2,3\n").unwrap();
        assert!(read_participant_csv("p", &accel, &gyro).is_err());
    }
}
