use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ss_prob: f64,
    pub train_loss: f64,
    pub val_cider: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// Everything except wall time, which differs between identical runs.
    pub fn same_trajectory(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.lr == other.lr
            && self.ss_prob == other.ss_prob
            && self.train_loss == other.train_loss
            && self.val_cider == other.val_cider
    }
}

/// Append-only per-epoch log, written as tab-separated text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    records: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch\tlr\tss_prob\ttrain_loss\tval_cider\twall_secs";

impl TrainingLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::invalid(format!(
                    "log epochs must increase: {} after {}",
                    record.epoch, last.epoch
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn line(r: &EpochRecord) -> String {
        format!(
            "{}\t{:e}\t{}\t{:.6}\t{:.6}\t{:.3}",
            r.epoch, r.lr, r.ss_prob, r.train_loss, r.val_cider, r.wall_secs
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{LOG_HEADER}");
        for r in &self.records {
            let _ = writeln!(out, "{}", Self::line(r));
        }
        out
    }

    pub fn same_trajectory(&self, other: &TrainingLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_trajectory(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: 5e-4,
            ss_prob: 0.0,
            train_loss: 1.5,
            val_cider: 0.25,
            wall_secs: 0.5,
        }
    }

    #[test]
    fn epochs_strictly_increase() {
        let mut log = TrainingLog::new();
        log.push(rec(0)).unwrap();
        log.push(rec(1)).unwrap();
        assert!(log.push(rec(1)).is_err());
        let text = log.to_tsv();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().nth(1).unwrap(), "0\t5e-4\t0\t1.500000\t0.250000\t0.500");
    }
}
