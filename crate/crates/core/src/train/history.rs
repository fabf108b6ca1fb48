use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Global optimizer step, 1-based and continuing across resumes.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Loss trace of a run. Only the step records go to the CSV; wall-clock
/// times stay in memory so the file is reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "epoch", "lr", "loss"]).expect("in-memory write");
        for s in &self.steps {
            w.write_record([s.step.to_string(), s.epoch.to_string(), format!("{:e}", s.lr), format!("{:e}", s.loss)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
    }

    pub fn steps_from_csv(text: &str, path: &Path) -> Result<Vec<StepRecord>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != ["step", "epoch", "lr", "loss"] {
            return Err(Error::format(path, "history header must be step,epoch,lr,loss"));
        }
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or_default().to_string();
            let bad = |i: usize| Error::format(path, format!("bad value `{}` in history", field(i)));
            out.push(StepRecord {
                step: field(0).parse().map_err(|_| bad(0))?,
                epoch: field(1).parse().map_err(|_| bad(1))?,
                lr: field(2).parse().map_err(|_| bad(2))?,
                loss: field(3).parse().map_err(|_| bad(3))?,
            });
        }
        Ok(out)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let h = TrainHistory {
            steps: vec![
                StepRecord { step: 1, epoch: 1, lr: 1e-3, loss: 0.123456789 },
                StepRecord { step: 2, epoch: 1, lr: 1e-3, loss: 1.5e-7 },
            ],
            epochs: vec![],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("step,epoch,lr,loss\n"));
        assert_eq!(TrainHistory::steps_from_csv(&csv, Path::new("h.csv")).unwrap(), h.steps);
    }
}
