//! Evaluation metrics and analysis tools for trained models.

mod bins;
mod bradley_terry;
mod image;
mod inharmony;
mod report;
mod requirements;

pub use bins::{bin_by_fg_ratio, BinSummary, RatioBin, RATIO_BINS};
pub use bradley_terry::{bt_fit, BtConfig, BtFit, PairwiseVote};
pub use image::{compute_metrics, pairwise_sum, psnr_from_mse, MetricRecord, PSNR_CAP};
pub use inharmony::inharmony_score;
pub use report::{parse_votes, write_bin_summary, write_metric_records};
pub use requirements::{requirement_checks, requirement_ratios, RequirementReport, REQUIREMENT_LABELS};
