//! Structured run logs: one self-describing JSON record per line.
//!
//! Records carry no wall-clock fields except the meta header's `ts`, and the
//! comparison mode strips every `ts` key before diffing, so two runs from
//! the same config compare byte-equal.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Meta {
        schema: u32,
        ts: String,
        config: Value,
    },
    WarmupRounding {
        requested: f64,
        used: f64,
    },
    Iter {
        iter: u64,
        train_loss: f64,
        lr: f64,
        forward_flops: u64,
        backward_flops: u64,
        cached_bytes: u64,
        block_cached_bytes: u64,
        rates: Vec<f64>,
    },
    Val {
        iter: u64,
        loss: f64,
        ppl: f64,
    },
    Allocator {
        iteration: u64,
        sensitivities: Vec<f64>,
        layer_flops: Vec<f64>,
        p_avg: f64,
        rates: Vec<f64>,
        added_expected_sensitivity: f64,
        batch_id: u64,
        probe_flops: u64,
    },
    Diagnostic {
        iter: u64,
        message: String,
    },
    Summary {
        iters_run: u64,
        forward_flops: u64,
        backward_flops: u64,
        probe_flops: u64,
        final_train_loss: Option<f64>,
        final_val_loss: Option<f64>,
        diverged: bool,
    },
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn strip_ts(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.remove("ts");
            for v in map.values_mut() {
                strip_ts(v);
            }
        }
        Value::Array(items) => {
            for v in items.iter_mut() {
                strip_ts(v);
            }
        }
        _ => {}
    }
}

/// Outcome of a log comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogDiff {
    Identical,
    /// 1-based line number and a short description.
    Differs(usize, String),
}

/// Compare two logs line by line, ignoring timestamp fields.
pub fn compare_logs(a: &Path, b: &Path) -> Result<LogDiff> {
    let read = |p: &Path| -> Result<Vec<Value>> {
        let r = BufReader::new(File::open(p)?);
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut v: Value = serde_json::from_str(&line).map_err(|e| {
                Error::State(format!("{}:{}: invalid record: {e}", p.display(), i + 1))
            })?;
            strip_ts(&mut v);
            out.push(v);
        }
        Ok(out)
    };
    let left = read(a)?;
    let right = read(b)?;
    for (i, (l, r)) in left.iter().zip(right.iter()).enumerate() {
        if l != r {
            return Ok(LogDiff::Differs(i + 1, format!("{l} != {r}")));
        }
    }
    if left.len() != right.len() {
        return Ok(LogDiff::Differs(
            left.len().min(right.len()) + 1,
            format!("{} vs {} records", left.len(), right.len()),
        ));
    }
    Ok(LogDiff::Identical)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_ignores_timestamps() {
        let dir = std::env::temp_dir();
        let a = dir.join("dropbp_log_a.jsonl");
        let b = dir.join("dropbp_log_b.jsonl");
        let mk = |ts: &str| {
            vec![
                LogRecord::Meta {
                    schema: LOG_SCHEMA_VERSION,
                    ts: ts.to_string(),
                    config: serde_json::json!({"seed": 1}),
                },
                LogRecord::Iter {
                    iter: 0,
                    train_loss: 1.5,
                    lr: 3e-4,
                    forward_flops: 10,
                    backward_flops: 20,
                    cached_bytes: 100,
                    block_cached_bytes: 80,
                    rates: vec![0.0, 0.5],
                },
            ]
        };
        write_log(&a, &mk("2024-01-01T00:00:00Z")).unwrap();
        write_log(&b, &mk("2031-12-31T23:59:59Z")).unwrap();
        assert_eq!(compare_logs(&a, &b).unwrap(), LogDiff::Identical);

        let mut other = mk("x");
        if let LogRecord::Iter { train_loss, .. } = &mut other[1] {
            *train_loss = 9.0;
        }
        write_log(&b, &other).unwrap();
        assert!(matches!(compare_logs(&a, &b).unwrap(), LogDiff::Differs(2, _)));
        let _ = std::fs::remove_file(a);
        let _ = std::fs::remove_file(b);
    }
}
