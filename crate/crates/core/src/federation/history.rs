use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Metrics of one client after one global epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub client: usize,
    /// Mean over every local step of the epoch.
    pub train_loss: f64,
    pub ce: f64,
    pub ld: f64,
    pub reg: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
}

/// One communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub epoch: usize,
    /// `eta[t][i]`: weight of client `i` in client `t`'s shared prompt
    /// (0 on the diagonal).
    pub eta: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
}

impl RunHistory {
    pub fn last_epoch(&self) -> Option<usize> {
        self.records.iter().map(|r| r.epoch).max()
    }

    /// Records of the final epoch, in client order.
    pub fn final_records(&self) -> Vec<EpochRecord> {
        let Some(last) = self.last_epoch() else { return Vec::new() };
        let mut out: Vec<EpochRecord> = self.records.iter().filter(|r| r.epoch == last).copied().collect();
        out.sort_by_key(|r| r.client);
        out
    }

    pub fn mean_final_test_acc(&self) -> f64 {
        let f = self.final_records();
        if f.is_empty() {
            return 0.0;
        }
        f.iter().map(|r| r.test_acc).sum::<f64>() / f.len() as f64
    }
}
