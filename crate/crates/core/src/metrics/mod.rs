//! Quantile binning, naive baselines and error metrics.

mod baselines;
mod quantile;
mod scores;

pub use baselines::{lab_values, minutes_since_prev, naive_mean_predict, naive_predict, values_by_item, TrainingMeans};
pub use quantile::{quantile_expected, quantile_fit, ItemBins, QuantileBinning, ALLOWED_K};
pub use scores::{
    evaluate, metric_scales, nmae, percentile_nearest_rank, smape, smape_term, stratified_report, within_24h, EvalTable, ItemRow,
    ItemwiseMetric, MetricScale, ScoredPoint, StratifiedReport, CSV_HEADER,
};
