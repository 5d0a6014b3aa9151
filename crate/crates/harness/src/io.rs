//! File formats: datasets (`a,x,x_next`, 1-based), JSONL replication
//! records and the summary CSVs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ddc_core::dgp::{Dataset, Observation};

use crate::error::{HarnessError, Result};
use crate::mc::{KGap, ReplicationRecord, SummaryRow};

pub const DATASET_HEADER: [&str; 3] = ["a", "x", "x_next"];

pub const SUMMARY_HEADER: [&str; 13] = [
    "design",
    "delta",
    "estimator",
    "W",
    "K",
    "n",
    "coord",
    "scaled_bias",
    "scaled_sd",
    "scaled_mse",
    "mcse_bias",
    "S_valid",
    "S_flagged",
];

pub fn read_dataset(path: &Path, n_actions: usize, n_states: usize) -> Result<Dataset> {
    let data_err = |message: String| HarnessError::Data {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(e.to_string()))?;
    let header = reader.headers().map_err(|e| data_err(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != DATASET_HEADER {
        return Err(data_err(format!("header must be a,x,x_next, found {:?}", header.as_slice())));
    }
    let mut obs = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| data_err(format!("line {line}: {e}")))?;
        let code = |j: usize, upper: usize| -> Result<usize> {
            let v: usize = row[j]
                .parse()
                .map_err(|_| data_err(format!("line {line}: {:?} is not a code", &row[j])))?;
            if v == 0 || v > upper {
                return Err(data_err(format!(
                    "line {line}: {} = {v} outside 1..={upper}",
                    DATASET_HEADER[j]
                )));
            }
            Ok(v - 1)
        };
        obs.push(Observation {
            a: code(0, n_actions)?,
            x: code(1, n_states)?,
            x_next: code(2, n_states)?,
        });
    }
    if obs.is_empty() {
        return Err(data_err("no observations".into()));
    }
    Dataset::new(n_actions, n_states, 0, obs).map_err(|e| data_err(e.to_string()))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(DATASET_HEADER).map_err(|e| csv_err(path, e))?;
    for o in &data.obs {
        w.write_record([o.a + 1, o.x + 1, o.x_next + 1].map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::io(path, std::io::Error::other(e))
}

/// Append-only writer of one JSON record per line.
pub struct RecordWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn write_batch(&mut self, batch: &[ReplicationRecord]) -> Result<()> {
        for r in batch {
            let line = serde_json::to_string(r).map_err(|e| HarnessError::io(&self.path, e.into()))?;
            writeln!(self.out, "{line}").map_err(|e| HarnessError::io(&self.path, e))?;
        }
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// Reads records until the first line that does not parse (a write cut
/// short by an interruption). Returns the records and the byte length of
/// the intact prefix.
pub fn read_records(path: &Path) -> Result<(Vec<ReplicationRecord>, u64)> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut records = Vec::new();
    let mut good = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(|e| HarnessError::io(path, e))?;
        if read == 0 || !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str(line.trim_end()) {
            Ok(r) => records.push(r),
            Err(_) => break,
        }
        good += read as u64;
    }
    Ok((records, good))
}

fn delta_label(delta: Option<f64>) -> String {
    delta.map_or_else(|| "none".to_string(), |d| d.to_string())
}

pub fn coord_label(coord: usize) -> String {
    format!("theta_u_{coord}")
}

/// Full precision; NaN marks cells with fewer than two usable estimates.
pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(SUMMARY_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let (est, weight) = r.estimator.labels();
        w.write_record([
            r.design.clone(),
            delta_label(r.delta),
            est.to_string(),
            weight.to_string(),
            r.k.to_string(),
            r.n.to_string(),
            coord_label(r.coord),
            r.scaled_bias.to_string(),
            r.scaled_sd.to_string(),
            r.scaled_mse.to_string(),
            r.mcse_bias.to_string(),
            r.s_valid.to_string(),
            r.s_flagged.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_k_report(path: &Path, gaps: &[KGap]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["design", "delta", "estimator", "W", "n", "coord", "K_a", "K_b", "bias_gap", "sd_gap"])
        .map_err(|e| csv_err(path, e))?;
    for g in gaps {
        let (est, weight) = g.estimator.labels();
        w.write_record([
            g.design.clone(),
            delta_label(g.delta),
            est.to_string(),
            weight.to_string(),
            g.n.to_string(),
            coord_label(g.coord),
            g.k_a.to_string(),
            g.k_b.to_string(),
            g.bias_gap.to_string(),
            g.sd_gap.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_is_one_based() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let d = Dataset::new(
            2,
            3,
            0,
            vec![
                Observation { a: 0, x: 2, x_next: 2 },
                Observation { a: 1, x: 0, x_next: 0 },
            ],
        )
        .unwrap();
        write_dataset(&p, &d).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,x,x_next\n1,3,3\n2,1,1\n");
        assert_eq!(read_dataset(&p, 2, 3).unwrap().obs, d.obs);
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        for bad in ["a,x\n1,1\n", "a,x,x_next\n0,1,1\n", "a,x,x_next\n1,4,1\n", "a,x,x_next\n1,z,1\n", "a,x,x_next\n"] {
            std::fs::write(&p, bad).unwrap();
            assert!(matches!(read_dataset(&p, 2, 3), Err(HarnessError::Data { .. })), "{bad}");
        }
        assert!(read_dataset(&dir.path().join("missing.csv"), 2, 3).is_err());
    }
}
