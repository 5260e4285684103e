use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CSV_HEADER: &str = "method,accuracy,time_s,stealth,pass_rate,delta_exp,balance,seed,config_hash";

/// Aggregates for one attack method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    /// Accuracy under attack.
    pub accuracy: f64,
    pub time_s: f64,
    /// Mean cosine similarity between clean and adversarial explanations.
    pub stealth: f64,
    pub pass_rate: f64,
    pub delta_exp: f64,
    pub balance: f64,
    pub seed: u64,
    pub config_hash: String,
    pub misclassified: usize,
    pub speed: f64,
    pub speed_normalized: f64,
    pub gradient_evals: usize,
    /// Per-sample stealth scores, in dataset order.
    #[serde(skip)]
    pub stealth_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<MethodRow>,
    pub samples: usize,
    pub clean_accuracy: f64,
    pub tau: f64,
    pub timing: String,
}

impl BenchmarkReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// One line per method; numbers use fixed precision so reruns with the
    /// same configuration produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                csv_field(&r.method),
                r.accuracy,
                r.time_s,
                r.stealth,
                r.pass_rate,
                r.delta_exp,
                r.balance,
                r.seed,
                r.config_hash
            );
        }
        out
    }

    /// Plain-text table in the layout of the usual attack comparison tables.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "samples {}  clean accuracy {:.1}%  tau {:.4}  timing {}",
            self.samples,
            100.0 * self.clean_accuracy,
            self.tau,
            self.timing
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>8}  {:>9}  {:>9}  {:>8}",
            "method", "accuracy", "time_s", "stealth", "pass", "delta_exp", "balance"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.1}%  {:>9.3}  {:>7.1}%  {:>8.1}%  {:>9.3}  {:>8.3}",
                r.method,
                100.0 * r.accuracy,
                r.time_s,
                100.0 * r.stealth,
                100.0 * r.pass_rate,
                r.delta_exp,
                r.balance
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
