//! CSV and JSON record codecs. CSV bodies are deterministic: floats print in
//! Rust's shortest round-trip form, wall-clock data never enters these files.

use serde::{Deserialize, Serialize};

pub const ROUNDS_HEADER_COMMENT: &str = "# fracfed-rounds v1";
pub const ROUNDS_COLUMNS: &str =
    "round,algorithm,seed,alpha,train_loss,test_accuracy,global_grad_norm,bytes_cumulative,clipped_steps";
pub const SWEEP_HEADER_COMMENT: &str = "# fracfed-sweep v1";
pub const SWEEP_COLUMNS: &str = "alpha,runs,final_accuracy_mean,final_accuracy_std";
pub const PARTITION_HEADER_COMMENT: &str = "# fracfed-partition v1";

/// One row of rounds.csv: a round of one run, identified by algorithm/seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: u64,
    pub algorithm: String,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub global_grad_norm: f64,
    pub bytes_cumulative: u64,
    pub clipped_steps: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RoundRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.algorithm,
            self.seed,
            fmt_opt(self.alpha),
            self.train_loss,
            self.test_accuracy,
            self.global_grad_norm,
            self.bytes_cumulative,
            self.clipped_steps
        )
    }

    fn from_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(format!("expected 9 fields, got {}: `{line}`", fields.len()));
        }
        let num = |i: usize| -> Result<f64, String> {
            fields[i]
                .parse()
                .map_err(|e| format!("field {i} `{}`: {e}", fields[i]))
        };
        let int = |i: usize| -> Result<u64, String> {
            fields[i]
                .parse()
                .map_err(|e| format!("field {i} `{}`: {e}", fields[i]))
        };
        Ok(RoundRow {
            round: int(0)?,
            algorithm: fields[1].to_string(),
            seed: int(2)?,
            alpha: if fields[3].is_empty() {
                None
            } else {
                Some(num(3)?)
            },
            train_loss: num(4)?,
            test_accuracy: num(5)?,
            global_grad_norm: num(6)?,
            bytes_cumulative: int(7)?,
            clipped_steps: int(8)?,
        })
    }
}

pub fn emit_rounds_csv(rows: &[RoundRow]) -> String {
    let mut out = String::new();
    out.push_str(ROUNDS_HEADER_COMMENT);
    out.push('\n');
    out.push_str(ROUNDS_COLUMNS);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_rounds_csv(text: &str) -> Result<Vec<RoundRow>, String> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.is_empty() || line.starts_with('#') || line == ROUNDS_COLUMNS {
            continue;
        }
        rows.push(RoundRow::from_line(line)?);
    }
    Ok(rows)
}

/// One aggregate row of sweep.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub runs: usize,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
}

pub fn emit_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    out.push_str(SWEEP_HEADER_COMMENT);
    out.push('\n');
    out.push_str(SWEEP_COLUMNS);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.alpha, r.runs, r.final_accuracy_mean, r.final_accuracy_std
        ));
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>, String> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.is_empty() || line.starts_with('#') || line == SWEEP_COLUMNS {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(format!("expected 4 fields: `{line}`"));
        }
        rows.push(SweepRow {
            alpha: f[0].parse().map_err(|e| format!("alpha: {e}"))?,
            runs: f[1].parse().map_err(|e| format!("runs: {e}"))?,
            final_accuracy_mean: f[2].parse().map_err(|e| format!("mean: {e}"))?,
            final_accuracy_std: f[3].parse().map_err(|e| format!("std: {e}"))?,
        });
    }
    Ok(rows)
}

/// Per-run summary entries for summary.json. `rounds_to_target` is the count
/// of completed rounds at the first crossing; absent (null) when the target
/// was never reached or never set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    pub rounds: u64,
    pub final_test_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_accuracy: Option<f64>,
    pub rounds_to_target: Option<u64>,
    /// steady-state per-round megabytes (decimal MB)
    pub mb_per_round: f64,
    pub mb_to_target: Option<f64>,
    pub mb_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<RoundRow> {
        vec![
            RoundRow {
                round: 0,
                algorithm: "fofedavg".into(),
                seed: 1,
                alpha: Some(0.97),
                train_loss: 2.317435871,
                test_accuracy: 0.112,
                global_grad_norm: 1.7320508075688772,
                bytes_cumulative: 16000,
                clipped_steps: 0,
            },
            RoundRow {
                round: 1,
                algorithm: "fedavg".into(),
                seed: 2,
                alpha: None,
                train_loss: 0.5,
                test_accuracy: 0.9,
                global_grad_norm: 1e-7,
                bytes_cumulative: 32000,
                clipped_steps: 3,
            },
        ]
    }

    #[test]
    fn rounds_csv_roundtrip_is_exact() {
        let rows = sample_rows();
        let text = emit_rounds_csv(&rows);
        assert!(text.starts_with(ROUNDS_HEADER_COMMENT));
        let back = parse_rounds_csv(&text).unwrap();
        assert_eq!(back, rows);
        // emit is deterministic
        assert_eq!(text, emit_rounds_csv(&rows));
    }

    #[test]
    fn sweep_csv_roundtrip() {
        let rows = vec![
            SweepRow {
                alpha: 0.5,
                runs: 3,
                final_accuracy_mean: 0.6433333333333333,
                final_accuracy_std: 0.011897712198383164,
            },
            SweepRow {
                alpha: 0.97,
                runs: 3,
                final_accuracy_mean: 0.65,
                final_accuracy_std: 0.0,
            },
        ];
        let text = emit_sweep_csv(&rows);
        assert_eq!(parse_sweep_csv(&text).unwrap(), rows);
    }

    #[test]
    fn summary_serializes_null_for_unreached_target() {
        let s = Summary {
            runs: vec![RunSummary {
                algorithm: "fedavg".into(),
                seed: 1,
                alpha: None,
                rounds: 3,
                final_test_accuracy: 0.4,
                target_accuracy: Some(0.9),
                rounds_to_target: None,
                mb_per_round: 0.016,
                mb_to_target: None,
                mb_total: 0.048,
            }],
        };
        let json = serde_json::to_string_pretty(&s).unwrap();
        assert!(json.contains("\"rounds_to_target\": null"));
        assert!(json.contains("\"mb_to_target\": null"));
        let back: Summary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
