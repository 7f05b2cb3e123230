//! Side-by-side comparison of finished runs from their rounds.csv files.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Aligned comparison table. The first column tells the row kind: one
/// `round` row per communication round with every run's metric columns
/// side by side, then one `best_*` row per tracked metric.
pub fn compare_runs(dirs: &[&Path], out: &mut dyn std::io::Write) -> Result<()> {
    if dirs.len() < 2 {
        bail!("compare needs at least two run directories");
    }
    let mut runs = Vec::new();
    for dir in dirs {
        let path = dir.join("rounds.csv");
        let mut reader = csv::Reader::from_path(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let header: Vec<String> =
            reader.headers()?.iter().map(|s| s.to_string()).collect();
        let mut rows: BTreeMap<u64, Vec<String>> = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let round: u64 = record
                .get(0)
                .and_then(|r| r.parse().ok())
                .context("rounds.csv row without a round number")?;
            rows.insert(round, record.iter().map(|s| s.to_string()).collect());
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        runs.push((name, header, rows));
    }

    let schema = &runs[0].1;
    for (name, header, _) in &runs {
        if header != schema {
            bail!("run {name} has a different rounds.csv schema");
        }
    }

    // Metric columns worth aligning (everything except the round number).
    let metric_cols: Vec<(usize, &String)> =
        schema.iter().enumerate().skip(1).collect();

    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["kind".to_string(), "round".to_string()];
    for (name, _, _) in &runs {
        for (_, col) in &metric_cols {
            header.push(format!("{name}:{col}"));
        }
    }
    writer.write_record(&header)?;

    let mut all_rounds: Vec<u64> = runs
        .iter()
        .flat_map(|(_, _, rows)| rows.keys().cloned())
        .collect();
    all_rounds.sort_unstable();
    all_rounds.dedup();

    for round in &all_rounds {
        let mut record = vec!["round".to_string(), round.to_string()];
        for (_, _, rows) in &runs {
            match rows.get(round) {
                Some(row) => {
                    for (idx, _) in &metric_cols {
                        record.push(row[*idx].clone());
                    }
                }
                None => record.extend(std::iter::repeat_n(String::new(), metric_cols.len())),
            }
        }
        writer.write_record(&record)?;
    }

    // Best-round summary per run, the naive way: a max scan per column.
    for metric in ["global_macro_f1", "pers_macro_f1_mean", "gen_macro_f1_mean"] {
        let Some(col) = schema.iter().position(|c| c == metric) else {
            continue;
        };
        let mut record = vec![format!("best_{metric}"), String::new()];
        for (_, _, rows) in &runs {
            let mut best: Option<(u64, f64)> = None;
            for (round, row) in rows {
                if let Ok(value) = row[col].parse::<f64>() {
                    if best.is_none_or(|(_, b)| value > b) {
                        best = Some((*round, value));
                    }
                }
            }
            for (idx, _) in &metric_cols {
                if *idx == col {
                    record.push(match best {
                        Some((round, value)) => format!("{value}@{round}"),
                        None => "NA".to_string(),
                    });
                } else {
                    record.push(String::new());
                }
            }
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
