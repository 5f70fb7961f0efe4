use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compat::{TokenId, TopKSlice};
use crate::error::{Error, Result};
use crate::trace::{PositionRecord, RewardTensor, RolloutTrace};

pub const TRACE_SCHEMA: &str = "prune-opd-trace/1";

/// First line of every trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub schema: String,
    /// `raw_rewards` hold reliability-scaled rewards.
    #[serde(default)]
    pub scaled: bool,
    /// Every line carries `hex_bits`.
    #[serde(default)]
    pub strict: bool,
}

impl Default for TraceHeader {
    fn default() -> Self {
        Self {
            schema: TRACE_SCHEMA.to_string(),
            scaled: false,
            strict: false,
        }
    }
}

/// IEEE-754 bit patterns of a line's floats, as `0x`-prefixed hex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HexBits {
    pub student_probs: Vec<String>,
    pub teacher_probs: Vec<String>,
    pub raw_rewards: Vec<String>,
}

/// One position of one rollout; the flattened form of a `[B, T, k]` batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecordLine {
    pub rollout_id: u64,
    pub position: usize,
    /// Present on position 0 only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt: Vec<TokenId>,
    pub student_ids: Vec<TokenId>,
    pub student_probs: Vec<f64>,
    pub teacher_ids: Vec<TokenId>,
    pub teacher_probs: Vec<f64>,
    pub sampled_token: TokenId,
    pub valid: bool,
    pub raw_rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hex_bits: Option<HexBits>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub traces: Vec<RolloutTrace>,
}

fn to_hex(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| format!("{:#018x}", v.to_bits())).collect()
}

fn from_hex(field: &str, hex: &[String], decimal: &[f64]) -> Result<Vec<f64>> {
    if hex.len() != decimal.len() {
        return Err(Error::validation(field, "hex and decimal lengths differ"));
    }
    hex.iter()
        .zip(decimal)
        .map(|(h, &d)| {
            let bits = u64::from_str_radix(h.trim_start_matches("0x"), 16)
                .map_err(|e| Error::validation(field, format!("bad hex `{h}`: {e}")))?;
            let v = f64::from_bits(bits);
            if v.to_bits() != d.to_bits() {
                return Err(Error::validation(field, format!("hex {h} disagrees with decimal {d}")));
            }
            Ok(v)
        })
        .collect()
}

fn to_lines(rollout_id: u64, trace: &RolloutTrace, strict: bool) -> Vec<TraceRecordLine> {
    trace
        .records
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let raw_rewards = trace.rewards.row(t).to_vec();
            let hex_bits = strict.then(|| HexBits {
                student_probs: to_hex(r.student.probs()),
                teacher_probs: to_hex(r.teacher.probs()),
                raw_rewards: to_hex(&raw_rewards),
            });
            TraceRecordLine {
                rollout_id,
                position: t,
                prompt: if t == 0 { trace.prompt.clone() } else { Vec::new() },
                student_ids: r.student.ids().to_vec(),
                student_probs: r.student.probs().to_vec(),
                teacher_ids: r.teacher.ids().to_vec(),
                teacher_probs: r.teacher.probs().to_vec(),
                sampled_token: r.sampled_token,
                valid: r.valid,
                raw_rewards,
                hex_bits,
            }
        })
        .collect()
}

/// Writes traces with rollout ids `0..traces.len()`; returns the bytes written.
pub fn write_traces(traces: &[RolloutTrace], path: &Path) -> Result<u64> {
    write_traces_with(traces, path, &TraceHeader::default())
}

pub fn write_traces_with(traces: &[RolloutTrace], path: &Path, header: &TraceHeader) -> Result<u64> {
    for (b, trace) in traces.iter().enumerate() {
        trace
            .validate()
            .map_err(|e| Error::validation(format!("rollout {b}"), e.to_string()))?;
    }
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    let mut bytes = 0u64;
    let mut emit = |buf: Vec<u8>, out: &mut BufWriter<File>| -> Result<()> {
        out.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
        out.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
        bytes += buf.len() as u64 + 1;
        Ok(())
    };
    emit(encode(header)?, &mut out)?;
    for (b, trace) in traces.iter().enumerate() {
        for line in to_lines(b as u64, trace, header.strict) {
            emit(encode(&line)?, &mut out)?;
        }
    }
    out.flush().map_err(|e| Error::io(ctx(), e))?;
    Ok(bytes)
}

fn encode<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(value).map_err(|e| Error::validation("record", e.to_string()))
}

fn slice_from(ids_field: &str, probs_field: &str, ids: Vec<TokenId>, probs: Vec<f64>) -> Result<TopKSlice> {
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation(ids_field, "duplicate token id"));
    }
    if ids.len() != probs.len() {
        return Err(Error::validation(probs_field, "length differs from ids"));
    }
    TopKSlice::new(ids, probs).map_err(|e| Error::validation(probs_field, e.to_string()))
}

/// position -> (record, reward row)
type Positions = BTreeMap<usize, (PositionRecord, Vec<f64>)>;

pub fn read_traces(path: &Path) -> Result<Vec<RolloutTrace>> {
    Ok(read_trace_file(path)?.traces)
}

pub fn read_trace_file(path: &Path) -> Result<TraceFile> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: TraceHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            serde_json::from_str(&line).map_err(|e| parse_err(1, format!("bad header: {e}")))?
        }
        None => return Err(parse_err(1, "missing header".into())),
    };
    if header.schema != TRACE_SCHEMA {
        return Err(parse_err(1, format!("unsupported schema `{}`", header.schema)));
    }

    let mut rollouts: BTreeMap<u64, (Vec<TokenId>, Positions)> = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecordLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let at = |e: Error| match e {
            Error::Validation { field, message } => Error::Validation {
                field,
                message: format!("line {lineno}: {message}"),
            },
            other => other,
        };
        let (student_probs, teacher_probs, raw_rewards) = match &rec.hex_bits {
            Some(h) => (
                from_hex("student_probs", &h.student_probs, &rec.student_probs).map_err(at)?,
                from_hex("teacher_probs", &h.teacher_probs, &rec.teacher_probs).map_err(at)?,
                from_hex("raw_rewards", &h.raw_rewards, &rec.raw_rewards).map_err(at)?,
            ),
            None if header.strict => {
                return Err(at(Error::validation("hex_bits", "missing in strict file")))
            }
            None => (rec.student_probs, rec.teacher_probs, rec.raw_rewards),
        };
        if let Some(v) = raw_rewards.iter().find(|v| !v.is_finite()) {
            return Err(at(Error::validation("raw_rewards", format!("non-finite value {v}"))));
        }
        let record = PositionRecord {
            student: slice_from("student_ids", "student_probs", rec.student_ids, student_probs)
                .map_err(at)?,
            teacher: slice_from("teacher_ids", "teacher_probs", rec.teacher_ids, teacher_probs)
                .map_err(at)?,
            sampled_token: rec.sampled_token,
            valid: rec.valid,
        };
        let entry = rollouts.entry(rec.rollout_id).or_default();
        if !rec.prompt.is_empty() {
            if rec.position != 0 {
                return Err(at(Error::validation("prompt", "only allowed at position 0")));
            }
            entry.0 = rec.prompt;
        }
        if entry.1.insert(rec.position, (record, raw_rewards)).is_some() {
            return Err(at(Error::validation(
                "position",
                format!("duplicate (rollout_id {}, position {})", rec.rollout_id, rec.position),
            )));
        }
    }

    let mut traces = Vec::with_capacity(rollouts.len());
    for (expected_id, (id, (prompt, positions))) in rollouts.into_iter().enumerate() {
        if id != expected_id as u64 {
            return Err(Error::validation(
                "rollout_id",
                format!("rollout ids must be contiguous from 0; found {id} at index {expected_id}"),
            ));
        }
        let k = positions.values().next().map_or(0, |(_, row)| row.len());
        let mut records = Vec::with_capacity(positions.len());
        let mut rows = Vec::with_capacity(positions.len());
        for (expected_pos, (pos, (record, row))) in positions.into_iter().enumerate() {
            if pos != expected_pos {
                return Err(Error::validation(
                    "position",
                    format!("rollout {id}: positions must be contiguous from 0, missing {expected_pos}"),
                ));
            }
            records.push(record);
            rows.push(row);
        }
        let rewards = RewardTensor::from_rows(&rows, k)
            .map_err(|e| Error::validation("raw_rewards", format!("rollout {id}: {e}")))?;
        let trace = RolloutTrace {
            prompt,
            records,
            rewards,
        };
        trace
            .validate()
            .map_err(|e| Error::validation("student_ids", format!("rollout {id}: {e}")))?;
        traces.push(trace);
    }
    Ok(TraceFile { header, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_trace(seed: f64) -> RolloutTrace {
        let s = TopKSlice::new(vec![3, 1], vec![0.6, 0.1 + seed / 10.0]).unwrap();
        let t = TopKSlice::new(vec![1, 7], vec![0.5, 0.3]).unwrap();
        RolloutTrace {
            prompt: vec![9, 8],
            records: vec![
                PositionRecord {
                    student: s.clone(),
                    teacher: t.clone(),
                    sampled_token: 3,
                    valid: true,
                },
                PositionRecord {
                    student: s,
                    teacher: t,
                    sampled_token: 1,
                    valid: true,
                },
            ],
            rewards: RewardTensor::from_rows(&[vec![0.1, -seed], vec![1e-300, 3.0]], 2).unwrap(),
        }
    }

    #[test]
    fn empty_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_traces(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_traces(&path).unwrap().is_empty());
    }

    #[test]
    fn small_round_trip_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let traces = vec![small_trace(0.3)];
        let n = write_traces(&traces, &path).unwrap();
        assert_eq!(n, std::fs::metadata(&path).unwrap().len());
        assert_eq!(read_traces(&path).unwrap(), traces);
    }

    #[test]
    fn strict_mode_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let header = TraceHeader {
            strict: true,
            ..TraceHeader::default()
        };
        let traces = vec![small_trace(0.1), small_trace(0.2)];
        write_traces_with(&traces, &path, &header).unwrap();
        let back = read_trace_file(&path).unwrap();
        assert!(back.header.strict);
        assert_eq!(back.traces, traces);
    }

    fn write_raw(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    const HEADER: &str = r#"{"schema":"prune-opd-trace/1"}"#;
    const LINE0: &str = r#"{"rollout_id":0,"position":0,"student_ids":[1],"student_probs":[0.5],"teacher_ids":[1],"teacher_probs":[0.5],"sampled_token":1,"valid":true,"raw_rewards":[0.0]}"#;

    #[test]
    fn duplicate_position_rejected() {
        let (_d, path) = write_raw(&[HEADER, LINE0, LINE0]);
        match read_traces(&path) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "position"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let (_d, path) = write_raw(&[HEADER, LINE0, "{not json"]);
        match read_traces(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violations_name_fields() {
        let dup = LINE0.replace(r#""student_ids":[1],"student_probs":[0.5]"#, r#""student_ids":[1,1],"student_probs":[0.5,0.4]"#);
        let gap = LINE0.replace(r#""position":0"#, r#""position":1"#);
        let unsorted = LINE0.replace(r#""teacher_ids":[1],"teacher_probs":[0.5]"#, r#""teacher_ids":[1,2],"teacher_probs":[0.1,0.5]"#);
        for (line, want) in [(dup, "student_ids"), (gap, "position"), (unsorted, "teacher_probs")] {
            let (_d, path) = write_raw(&[HEADER, &line]);
            match read_traces(&path) {
                Err(Error::Validation { field, .. }) => assert_eq!(field, want),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_schema_and_missing_header() {
        let (_d, path) = write_raw(&[r#"{"schema":"other/9"}"#]);
        assert!(matches!(read_traces(&path), Err(Error::Parse { line: 1, .. })));
        let (_d, path) = write_raw(&[]);
        assert!(matches!(read_traces(&path), Err(Error::Parse { line: 1, .. })));
    }

    fn arb_slice() -> impl Strategy<Value = TopKSlice> {
        prop::collection::vec(0.001f64..1.0, 1..5).prop_map(|mut w| {
            let total: f64 = w.iter().sum::<f64>() * 1.01;
            w.iter_mut().for_each(|x| *x /= total);
            w.sort_by(|a, b| b.total_cmp(a));
            let ids = (0..w.len() as TokenId).map(|i| i * 3 + 1).collect();
            TopKSlice::new(ids, w).unwrap()
        })
    }

    fn arb_trace() -> impl Strategy<Value = RolloutTrace> {
        (1usize..5, 1usize..6).prop_flat_map(|(k, t)| {
            let rec = (arb_slice(), arb_slice(), 0u32..100, prop::bool::weighted(0.9));
            (
                prop::collection::vec(0u32..50, 0..4),
                prop::collection::vec(rec, t),
                prop::collection::vec(prop::collection::vec(-1e3f64..1e3, k), t),
            )
                .prop_map(move |(prompt, recs, rows)| {
                    let records = recs
                        .into_iter()
                        .map(|(s, tch, tok, valid)| {
                            let fit = |x: TopKSlice| {
                                let n = x.len().min(k);
                                let mut ids = x.ids()[..n].to_vec();
                                let mut probs = x.probs()[..n].to_vec();
                                while ids.len() < k {
                                    ids.push(1000 + ids.len() as TokenId);
                                    probs.push(1e-9);
                                }
                                TopKSlice::new(ids, probs).unwrap()
                            };
                            if valid {
                                PositionRecord {
                                    student: fit(s),
                                    teacher: fit(tch),
                                    sampled_token: tok,
                                    valid,
                                }
                            } else {
                                PositionRecord::padding()
                            }
                        })
                        .collect();
                    RolloutTrace {
                        prompt,
                        records,
                        rewards: RewardTensor::from_rows(&rows, k).unwrap(),
                    }
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn traces_round_trip_bit_exact(traces in prop::collection::vec(arb_trace(), 0..3)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.jsonl");
            write_traces(&traces, &path).unwrap();
            let back = read_traces(&path).unwrap();
            prop_assert_eq!(back.len(), traces.len());
            for (a, b) in back.iter().zip(&traces) {
                let bits = |t: &RolloutTrace| t.rewards.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
                prop_assert_eq!(a, b);
            }
        }
    }
}
