use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the metrics CSV. Append new columns at the end only.
pub const METRICS_COLUMNS: [&str; 7] = [
    "round",
    "mean_train_loss",
    "mean_val_loss",
    "fed_avg_acc",
    "mean_local_acc",
    "expected_latency_ms",
    "wall_clock_s",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub mean_train_loss: f64,
    pub mean_val_loss: f64,
    pub fed_avg_acc: f64,
    pub mean_local_acc: f64,
    pub expected_latency_ms: f64,
    /// Seconds since the run started; 0 unless wall-clock recording is on.
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.mean_train_loss,
            self.mean_val_loss,
            self.fed_avg_acc,
            self.mean_local_acc,
            self.expected_latency_ms,
            self.wall_clock_s
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRecord], mut out: W) -> Result<()> {
    let io = |e| Error::io("writing metrics", e);
    writeln!(out, "{}", METRICS_COLUMNS.join(",")).map_err(io)?;
    for r in rows {
        writeln!(out, "{}", r.csv_row()).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows() {
        let mut buf = Vec::new();
        let row = MetricsRecord {
            round: 3,
            mean_train_loss: 0.5,
            fed_avg_acc: 1.0,
            ..Default::default()
        };
        write_metrics_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "round,mean_train_loss,mean_val_loss,fed_avg_acc,mean_local_acc,expected_latency_ms,wall_clock_s\n3,0.5,0,1,0,0,0\n"
        );
    }
}
