//! Per-round metrics records and their CSV / JSON-lines serializations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Everything measured in one round. Cumulative fields never decrease
/// across a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    /// Mean training loss after the round's model update.
    pub loss: f64,
    /// Top-1 accuracy on the held-out test set.
    pub accuracy: f64,
    pub n_scheduled: usize,
    /// Slots the round consumed (analog plus digital phases).
    pub u_round: u64,
    /// Cumulative resource blocks: sum of U_tau * M.
    pub blocks_cum: u64,
    /// Largest cumulative per-device energy spent so far (mW-slots).
    pub power_spent_max: f64,
    /// Energy each device spent this round (mW-slots).
    pub power_round: Vec<f64>,
    /// Compression quality constant of the run's settings.
    pub gamma: f64,
    pub error_norm_mean: f64,
    pub error_norm_max: f64,
    /// True when no device passed the scheduling gate and the model
    /// stayed put.
    pub skipped: bool,
}

pub const CSV_HEADER: &str = "round,loss,accuracy,n_scheduled,u_round,blocks_cum,power_spent_max";

impl RoundReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.loss,
            self.accuracy,
            self.n_scheduled,
            self.u_round,
            self.blocks_cum,
            self.power_spent_max
        )
    }
}

/// Write the pinned CSV layout, prefixed with the config hash so a
/// metrics file can be tied back to the exact configuration.
pub fn write_csv<W: Write>(mut w: W, config_hash: &str, reports: &[RoundReport]) -> Result<()> {
    writeln!(w, "# config_hash={config_hash}")?;
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// JSON-lines alternative carrying the full per-round record.
pub fn write_jsonl<W: Write>(mut w: W, config_hash: &str, reports: &[RoundReport]) -> Result<()> {
    writeln!(w, "{{\"config_hash\":\"{config_hash}\"}}")?;
    for r in reports {
        let line =
            serde_json::to_string(r).map_err(|e| crate::error::SimError::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(round: u64) -> RoundReport {
        RoundReport {
            round,
            loss: 2.25,
            accuracy: 0.1,
            n_scheduled: 13,
            u_round: 41,
            blocks_cum: 41 * 25 * round,
            power_spent_max: 12.5,
            power_round: vec![1.0, 2.0],
            gamma: 0.25,
            error_norm_mean: 0.01,
            error_norm_max: 0.05,
            skipped: false,
        }
    }

    #[test]
    fn csv_layout_is_pinned() {
        let mut buf = Vec::new();
        write_csv(&mut buf, "abc123", &[report(1), report(2)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# config_hash=abc123"));
        assert_eq!(
            lines.next(),
            Some("round,loss,accuracy,n_scheduled,u_round,blocks_cum,power_spent_max")
        );
        assert_eq!(lines.next(), Some("1,2.25,0.1,13,41,1025,12.5"));
    }

    #[test]
    fn jsonl_round_trips() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, "abc", &[report(1)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let second = text.lines().nth(1).unwrap();
        let back: RoundReport = serde_json::from_str(second).unwrap();
        assert_eq!(back, report(1));
    }
}
