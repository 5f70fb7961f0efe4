use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA: &str = "prune-opd-metrics/1";

/// Fixed number of position bands reported per step.
pub const NUM_BANDS: usize = 8;

/// Per-step training metrics.
///
/// `mean_loss_weight_by_band` splits `[0, max_length)` into [`NUM_BANDS`]
/// equal bands; a band with no generated tokens reports 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step_index: u64,
    pub mean_overlap: f64,
    pub mean_effective_length: f64,
    pub m_current: usize,
    pub hit_ratio: f64,
    pub tokens_generated: u64,
    pub tokens_scored: u64,
    /// Sum of applied loss weights over valid positions.
    pub weight_mass: f64,
    pub mean_loss_weight_by_band: [f64; NUM_BANDS],
}

fn columns() -> Vec<String> {
    let mut cols: Vec<String> = [
        "schema",
        "step_index",
        "mean_overlap",
        "mean_effective_length",
        "m_current",
        "hit_ratio",
        "tokens_generated",
        "tokens_scored",
        "weight_mass",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..NUM_BANDS).map(|b| format!("w_band_{b}")));
    cols
}

impl MetricsRow {
    pub fn validate(&self) -> Result<()> {
        let floats = [
            ("mean_overlap", self.mean_overlap),
            ("mean_effective_length", self.mean_effective_length),
            ("hit_ratio", self.hit_ratio),
            ("weight_mass", self.weight_mass),
        ];
        for (name, v) in floats {
            if !v.is_finite() {
                return Err(Error::validation(name, format!("non-finite value {v}")));
            }
        }
        for (b, v) in self.mean_loss_weight_by_band.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::validation(format!("w_band_{b}"), format!("non-finite value {v}")));
            }
        }
        for (name, v) in [("mean_overlap", self.mean_overlap), ("hit_ratio", self.hit_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(name, format!("{v} not in [0, 1]")));
            }
        }
        if self.tokens_scored > self.tokens_generated {
            return Err(Error::validation(
                "tokens_scored",
                format!("{} exceeds tokens_generated {}", self.tokens_scored, self.tokens_generated),
            ));
        }
        Ok(())
    }

    fn to_record(&self) -> Vec<String> {
        let mut rec = vec![
            METRICS_SCHEMA.to_string(),
            self.step_index.to_string(),
            self.mean_overlap.to_string(),
            self.mean_effective_length.to_string(),
            self.m_current.to_string(),
            self.hit_ratio.to_string(),
            self.tokens_generated.to_string(),
            self.tokens_scored.to_string(),
            self.weight_mass.to_string(),
        ];
        rec.extend(self.mean_loss_weight_by_band.iter().map(f64::to_string));
        rec
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        let cols = columns();
        if rec.len() != cols.len() {
            let missing = cols.get(rec.len()).map_or("<extra>", String::as_str);
            return Err(Error::validation(
                missing,
                format!("row has {} fields, expected {}", rec.len(), cols.len()),
            ));
        }
        if &rec[0] != METRICS_SCHEMA {
            return Err(Error::validation("schema", format!("unsupported `{}`", &rec[0])));
        }
        fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            rec[i]
                .parse()
                .map_err(|e| Error::validation(name, format!("`{}`: {e}", &rec[i])))
        }
        let mut bands = [0.0; NUM_BANDS];
        for (b, slot) in bands.iter_mut().enumerate() {
            *slot = num(rec, 9 + b, &cols[9 + b])?;
        }
        let row = Self {
            step_index: num(rec, 1, "step_index")?,
            mean_overlap: num(rec, 2, "mean_overlap")?,
            mean_effective_length: num(rec, 3, "mean_effective_length")?,
            m_current: num(rec, 4, "m_current")?,
            hit_ratio: num(rec, 5, "hit_ratio")?,
            tokens_generated: num(rec, 6, "tokens_generated")?,
            tokens_scored: num(rec, 7, "tokens_scored")?,
            weight_mass: num(rec, 8, "weight_mass")?,
            mean_loss_weight_by_band: bands,
        };
        row.validate()?;
        Ok(row)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::validation("record", format!("{other:?}")),
    }
}

/// Writes a fresh metrics file: header line plus one line per row.
pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    for row in rows {
        row.validate()?;
    }
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(columns()).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.to_record()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Appends one row, writing the header first only when the file is new or empty.
pub fn append_metrics(row: &MetricsRow, path: &Path) -> Result<()> {
    row.validate()?;
    let has_header = match File::open(path) {
        Ok(f) => {
            let mut first = String::new();
            BufReader::new(f)
                .read_line(&mut first)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if !first.is_empty() && first.trim_end() != columns().join(",") {
                return Err(Error::validation(
                    "header",
                    format!("{} has a different column layout", path.display()),
                ));
            }
            !first.is_empty()
        }
        Err(_) => false,
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    if !has_header {
        w.write_record(columns()).map_err(|e| csv_err(path, e))?;
    }
    w.write_record(row.to_record()).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// JSON-lines mirror of the metrics stream.
pub fn append_metrics_jsonl(row: &MetricsRow, path: &Path) -> Result<()> {
    row.validate()?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut line = serde_json::to_vec(row).map_err(|e| Error::validation("record", e.to_string()))?;
    line.push(b'\n');
    file.write_all(&line)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header = r
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.iter().ne(columns().iter().map(String::as_str)) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("header does not match {METRICS_SCHEMA}"),
        });
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })?;
            MetricsRow::from_record(&rec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step_index: step,
            mean_overlap: 0.9375,
            mean_effective_length: 163.25,
            m_current: 168,
            hit_ratio: 0.125,
            tokens_generated: 2688,
            tokens_scored: 2688,
            weight_mass: 1234.5,
            mean_loss_weight_by_band: [1.5, 1.5, 1.34, 1.02, 0.7, 0.51, 0.0, 0.0],
        }
    }

    #[test]
    fn single_row_is_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&[row(0)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("schema,step_index,"));
        assert!(text.lines().nth(1).unwrap().starts_with(METRICS_SCHEMA));
        assert_eq!(read_metrics(&path).unwrap(), vec![row(0)]);
    }

    #[test]
    fn append_skips_header_on_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        append_metrics(&row(0), &path).unwrap();
        append_metrics(&row(1), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_metrics(&path).unwrap(), vec![row(0), row(1)]);
    }

    #[test]
    fn nan_rejected() {
        let mut r = row(0);
        r.mean_effective_length = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_metrics(&[r.clone()], &dir.path().join("m.csv")),
            Err(Error::Validation { .. })
        ));
        assert!(append_metrics(&r, &dir.path().join("m2.csv")).is_err());
    }

    #[test]
    fn scored_exceeding_generated_rejected() {
        let mut r = row(0);
        r.tokens_scored = r.tokens_generated + 1;
        assert!(r.validate().is_err());
    }

    #[test]
    fn partial_row_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&[row(0)], &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("prune-opd-metrics/1,1,0.5,10\n");
        std::fs::write(&path, text).unwrap();
        match read_metrics(&path) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "m_current"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_mirror() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        append_metrics_jsonl(&row(0), &path).unwrap();
        append_metrics_jsonl(&row(1), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: Vec<MetricsRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, vec![row(0), row(1)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metrics_round_trip(
            step in any::<u64>(),
            ratios in (0.0f64..=1.0, 0.0f64..=1.0),
            reals in (-1e12f64..1e12, -1e12f64..1e12),
            counts in (any::<u32>(), any::<u32>()),
            bands in prop::array::uniform8(-1e6f64..1e6),
        ) {
            let (scored, generated) = if counts.0 <= counts.1 { counts } else { (counts.1, counts.0) };
            let r = MetricsRow {
                step_index: step,
                mean_overlap: ratios.0,
                mean_effective_length: reals.0,
                m_current: counts.0 as usize,
                hit_ratio: ratios.1,
                tokens_generated: generated as u64,
                tokens_scored: scored as u64,
                weight_mass: reals.1,
                mean_loss_weight_by_band: bands,
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.csv");
            write_metrics(std::slice::from_ref(&r), &path).unwrap();
            prop_assert_eq!(read_metrics(&path).unwrap(), vec![r]);
        }
    }
}
