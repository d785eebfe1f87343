use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: u8,
    pub epoch: usize,
    pub ce: f64,
    pub mse: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    pub stage: u8,
    pub epoch: usize,
    pub hr20: f64,
    pub ndcg20: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRow>,
    pub validations: Vec<ValRow>,
}

pub const EPOCH_HEADER: &str = "stage,epoch,ce,mse,lr,seconds";
pub const VAL_HEADER: &str = "stage,epoch,hr20,ndcg20,is_best";

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.epochs.extend(other.epochs);
        self.validations.extend(other.validations);
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = format!("{EPOCH_HEADER}\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{},{:.3}", r.stage, r.epoch, r.ce, r.mse, r.lr, r.seconds);
        }
        s
    }

    pub fn validations_csv(&self) -> String {
        let mut s = format!("{VAL_HEADER}\n");
        for r in &self.validations {
            let _ = writeln!(s, "{},{},{},{},{}", r.stage, r.epoch, r.hr20, r.ndcg20, r.is_best as u8);
        }
        s
    }

    pub fn write(&self, epochs: &Path, validations: &Path) -> Result<()> {
        for (p, body) in [(epochs, self.epochs_csv()), (validations, self.validations_csv())] {
            std::fs::write(p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        }
        Ok(())
    }

    /// Parse the two CSVs written by [`write`](Self::write).
    pub fn read(epochs: &Path, validations: &Path) -> Result<TrainLog> {
        let text = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e));
        let bad = |p: &Path, line: usize| Error::Parse {
            path: p.to_path_buf(),
            line,
            msg: "malformed log row".into(),
        };
        let mut log = TrainLog::default();
        for (i, line) in text(epochs)?.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let num = |j: usize| f.get(j).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(epochs, i + 1));
            log.epochs.push(EpochRow {
                stage: num(0)? as u8,
                epoch: num(1)? as usize,
                ce: num(2)?,
                mse: num(3)?,
                lr: num(4)?,
                seconds: num(5)?,
            });
        }
        for (i, line) in text(validations)?.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let num = |j: usize| f.get(j).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(validations, i + 1));
            log.validations.push(ValRow {
                stage: num(0)? as u8,
                epoch: num(1)? as usize,
                hr20: num(2)?,
                ndcg20: num(3)?,
                is_best: num(4)? != 0.0,
            });
        }
        Ok(log)
    }
}
