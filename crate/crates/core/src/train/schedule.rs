use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Piecewise-constant learning rate over 1-based epochs. Segment `i` covers
/// epochs `end_{i-1}+1 ..= end_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    segments: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { segments: vec![(30, 1e-3), (60, 1e-4), (100, 1e-5)] }
    }
}

impl LrSchedule {
    /// Segments as `(last_epoch, lr)` with strictly increasing ends.
    pub fn new(segments: Vec<(usize, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::config("learning-rate schedule needs at least one segment"));
        }
        let mut prev = 0;
        for &(end, lr) in &segments {
            if end <= prev {
                return Err(Error::config(format!("schedule segment ends must increase, got {end} after {prev}")));
            }
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("learning rate {lr} must be finite and non-negative")));
            }
            prev = end;
        }
        Ok(LrSchedule { segments })
    }

    pub fn constant(lr: f64, epochs: usize) -> Result<Self> {
        Self::new(vec![(epochs, lr)])
    }

    pub fn segments(&self) -> &[(usize, f64)] {
        &self.segments
    }

    pub fn last_epoch(&self) -> usize {
        self.segments.last().map_or(0, |s| s.0)
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch == 0 {
            return Err(Error::usage("epochs are 1-based; epoch 0 has no learning rate"));
        }
        self.segments
            .iter()
            .find(|&&(end, _)| epoch <= end)
            .map(|&(_, lr)| lr)
            .ok_or_else(|| Error::usage(format!("epoch {epoch} beyond schedule end {}", self.last_epoch())))
    }
}

pub fn lr_schedule(epoch: usize) -> Result<f64> {
    LrSchedule::default().lr(epoch)
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.segments.iter().map(|(e, lr)| format!("{e}:{lr:e}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    /// `end:lr` pairs, comma separated, e.g. `30:1e-3,60:1e-4,100:1e-5`.
    fn from_str(s: &str) -> Result<Self> {
        let segments = s
            .split(',')
            .map(|part| {
                let (e, lr) = part
                    .split_once(':')
                    .ok_or_else(|| Error::config(format!("schedule segment `{part}` is not end:lr")))?;
                let e = e.trim().parse().map_err(|_| Error::config(format!("bad epoch in `{part}`")))?;
                let lr = lr.trim().parse().map_err(|_| Error::config(format!("bad rate in `{part}`")))?;
                Ok((e, lr))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(segments)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_segments() {
        assert_eq!(lr_schedule(10).unwrap(), 1e-3);
        assert_eq!(lr_schedule(45).unwrap(), 1e-4);
        assert_eq!(lr_schedule(75).unwrap(), 1e-5);
        assert!(matches!(lr_schedule(0), Err(Error::Usage(_))));
        assert!(matches!(lr_schedule(101), Err(Error::Usage(_))));
    }

    #[test]
    fn segments_cover_without_gap() {
        let s = LrSchedule::default();
        let mut counts = [0usize; 3];
        for e in 1..=100 {
            let lr = s.lr(e).unwrap();
            let i = [1e-3, 1e-4, 1e-5].iter().position(|&x| x == lr).unwrap();
            counts[i] += 1;
        }
        assert_eq!(counts, [30, 30, 40]);
    }

    #[test]
    fn parse_round_trip() {
        let s = LrSchedule::default();
        assert_eq!(s.to_string().parse::<LrSchedule>().unwrap(), s);
        assert!("10:1e-3,5:1e-4".parse::<LrSchedule>().is_err());
        assert!("10".parse::<LrSchedule>().is_err());
    }
}
