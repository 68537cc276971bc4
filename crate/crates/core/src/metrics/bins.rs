use super::image::MetricRecord;
use crate::error::{Error, Result};

/// Foreground-ratio interval `(lower, upper]`; `closed_lower` also admits `lower`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioBin {
    pub label: &'static str,
    pub lower: f64,
    pub upper: f64,
    pub closed_lower: bool,
}

impl RatioBin {
    pub fn contains(&self, ratio: f64) -> bool {
        let above = if self.closed_lower { ratio >= self.lower } else { ratio > self.lower };
        above && ratio <= self.upper
    }
}

pub const RATIO_BINS: [RatioBin; 4] = [
    RatioBin { label: "0-5%", lower: 0.0, upper: 0.05, closed_lower: true },
    RatioBin { label: "5-15%", lower: 0.05, upper: 0.15, closed_lower: false },
    RatioBin { label: "15-100%", lower: 0.15, upper: 1.0, closed_lower: false },
    RatioBin { label: "0-100%", lower: 0.0, upper: 1.0, closed_lower: true },
];

#[derive(Debug, Clone, PartialEq)]
pub struct BinSummary {
    pub bin: RatioBin,
    pub count: usize,
    /// `None` for an empty bin.
    pub mse: Option<f64>,
    pub fmse: Option<f64>,
}

pub fn bin_by_fg_ratio(records: &[MetricRecord]) -> Result<Vec<BinSummary>> {
    if records.is_empty() {
        return Err(Error::Invalid("cannot bin an empty record list".into()));
    }
    Ok(RATIO_BINS
        .iter()
        .map(|bin| {
            let members: Vec<&MetricRecord> = records.iter().filter(|r| bin.contains(r.fg_ratio)).collect();
            let mean = |f: fn(&MetricRecord) -> f64| {
                if members.is_empty() {
                    None
                } else {
                    let vals: Vec<f64> = members.iter().map(|r| f(r)).collect();
                    Some(super::pairwise_sum(&vals) / vals.len() as f64)
                }
            };
            BinSummary { bin: *bin, count: members.len(), mse: mean(|r| r.mse), fmse: mean(|r| r.fmse) }
        })
        .collect())
}
