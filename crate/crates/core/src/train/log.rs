use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const TRAIN_LOG_HEADER: &str = "epoch,total,term1,term2,term3,accuracy,val_stealth,val_delta_acc";

/// One epoch of training. Classifier runs log cross-entropy as `total` and
/// `term1` and fill `accuracy`; X-UNet runs fill the three loss terms and
/// the validation columns.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    pub accuracy: f64,
    pub val_stealth: f64,
    pub val_delta_acc: f64,
}

impl EpochLog {
    fn values(&self) -> [f64; 7] {
        [
            self.total,
            self.term1,
            self.term2,
            self.term3,
            self.accuracy,
            self.val_stealth,
            self.val_delta_acc,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Appends a row; non-finite values are rejected.
    pub fn push(&mut self, row: EpochLog) -> Result<()> {
        if row.values().iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("epoch {} produced a non-finite value: {row:?}", row.epoch)));
        }
        self.epochs.push(row);
        Ok(())
    }

    pub fn first(&self) -> Option<&EpochLog> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for row in &self.epochs {
            let _ = write!(out, "{}", row.epoch);
            for v in row.values() {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
