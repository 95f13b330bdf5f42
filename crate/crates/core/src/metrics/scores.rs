use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// One scored prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPoint {
    pub item: String,
    pub y: f64,
    pub yhat: f64,
    pub minutes_since_prev: Option<u32>,
}

/// Per-item normaliser: 99th minus 1st percentile of test ground truths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScale {
    pub v99: f64,
    pub v1: f64,
    pub count: usize,
}

impl MetricScale {
    pub fn range(&self) -> f64 {
        self.v99 - self.v1
    }

    pub fn is_degenerate(&self) -> bool {
        self.range() <= 0.0
    }
}

/// Nearest-rank percentile of sorted data, `p` in (0, 100].
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn metric_scales<'a>(ground_truth: impl IntoIterator<Item = (&'a str, f64)>) -> BTreeMap<String, MetricScale> {
    let mut by_item: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (item, y) in ground_truth {
        by_item.entry(item.to_string()).or_default().push(y);
    }
    by_item
        .into_iter()
        .map(|(item, mut ys)| {
            ys.sort_by(f64::total_cmp);
            let scale = MetricScale {
                v99: percentile_nearest_rank(&ys, 99.0),
                v1: percentile_nearest_rank(&ys, 1.0),
                count: ys.len(),
            };
            (item, scale)
        })
        .collect()
}

/// `|y-ŷ| / ((|y|+|ŷ|)/2) × 100`, defined as 0 when both are 0.
pub fn smape_term(y: f64, yhat: f64) -> f64 {
    let denom = (y.abs() + yhat.abs()) / 2.0;
    if denom == 0.0 {
        0.0
    } else {
        (y - yhat).abs() / denom * 100.0
    }
}

/// Per-item values with unweighted (macro) and count-weighted averages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemwiseMetric {
    pub per_item: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub macro_avg: Option<f64>,
    pub weighted_avg: Option<f64>,
    /// Items left out for a zero-width scale.
    pub excluded: Vec<String>,
}

impl ItemwiseMetric {
    fn finish(per_item: BTreeMap<String, f64>, counts: BTreeMap<String, usize>, excluded: Vec<String>) -> Self {
        let n = per_item.len();
        let macro_avg = (n > 0).then(|| per_item.values().sum::<f64>() / n as f64);
        let total: usize = per_item.keys().map(|k| counts[k]).sum();
        let weighted_avg = (total > 0).then(|| per_item.iter().map(|(k, v)| v * counts[k] as f64).sum::<f64>() / total as f64);
        ItemwiseMetric {
            per_item,
            counts,
            macro_avg,
            weighted_avg,
            excluded,
        }
    }
}

fn group<'a>(points: &'a [ScoredPoint]) -> BTreeMap<&'a str, Vec<&'a ScoredPoint>> {
    let mut g: BTreeMap<&str, Vec<&ScoredPoint>> = BTreeMap::new();
    for p in points {
        g.entry(p.item.as_str()).or_default().push(p);
    }
    g
}

/// Mean absolute error per item over the item's scale.
pub fn nmae(points: &[ScoredPoint], scales: &BTreeMap<String, MetricScale>) -> ItemwiseMetric {
    let mut per_item = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut excluded = Vec::new();
    for (item, pts) in group(points) {
        let scale = scales.get(item).filter(|s| !s.is_degenerate());
        let Some(scale) = scale else {
            log::warn!("{item}: degenerate or missing NMAE scale, excluded");
            excluded.push(item.to_string());
            continue;
        };
        let mae = pts.iter().map(|p| (p.y - p.yhat).abs()).sum::<f64>() / pts.len() as f64;
        per_item.insert(item.to_string(), mae / scale.range());
        counts.insert(item.to_string(), pts.len());
    }
    ItemwiseMetric::finish(per_item, counts, excluded)
}

/// Symmetric mean absolute percentage error per item, in percent.
pub fn smape(points: &[ScoredPoint]) -> ItemwiseMetric {
    let mut per_item = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for (item, pts) in group(points) {
        let s = pts.iter().map(|p| smape_term(p.y, p.yhat)).sum::<f64>() / pts.len() as f64;
        per_item.insert(item.to_string(), s);
        counts.insert(item.to_string(), pts.len());
    }
    ItemwiseMetric::finish(per_item, counts, Vec::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub item: String,
    pub count: usize,
    pub mae: f64,
    pub nmae: Option<f64>,
    pub smape: f64,
    pub unit: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<ItemRow>,
    pub macro_nmae: Option<f64>,
    pub macro_smape: Option<f64>,
    pub weighted_nmae: Option<f64>,
    pub weighted_smape: Option<f64>,
    pub count: usize,
}

pub fn evaluate(points: &[ScoredPoint], scales: &BTreeMap<String, MetricScale>, units: &BTreeMap<String, String>) -> EvalTable {
    let n = nmae(points, scales);
    let s = smape(points);
    let rows = group(points)
        .into_iter()
        .map(|(item, pts)| ItemRow {
            item: item.to_string(),
            count: pts.len(),
            mae: pts.iter().map(|p| (p.y - p.yhat).abs()).sum::<f64>() / pts.len() as f64,
            nmae: n.per_item.get(item).copied(),
            smape: s.per_item[item],
            unit: units.get(item).cloned().unwrap_or_default(),
        })
        .collect();
    EvalTable {
        rows,
        macro_nmae: n.macro_avg,
        macro_smape: s.macro_avg,
        weighted_nmae: n.weighted_avg,
        weighted_smape: s.weighted_avg,
        count: points.len(),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl EvalTable {
    /// CSV rows `method,group,item,count,mae,nmae,smape,unit`, followed by
    /// `MACRO` and `WEIGHTED` summary rows.
    pub fn write_csv_rows(&self, method: &str, group: &str, out: &mut String) {
        for r in &self.rows {
            let _ = writeln!(out, "{method},{group},{},{},{:.6},{},{:.6},{}", r.item, r.count, r.mae, opt(r.nmae), r.smape, r.unit);
        }
        let _ = writeln!(out, "{method},{group},MACRO,{},,{},{},", self.count, opt(self.macro_nmae), opt(self.macro_smape));
        let _ = writeln!(out, "{method},{group},WEIGHTED,{},,{},{},", self.count, opt(self.weighted_nmae), opt(self.weighted_smape));
    }
}

pub const CSV_HEADER: &str = "method,group,item,count,mae,nmae,smape,unit";

/// Metrics split by whether the item was measured within the previous 24 h.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub overall: EvalTable,
    pub within_24h: EvalTable,
    /// Includes points with no prior measurement.
    pub beyond_24h: EvalTable,
}

pub fn within_24h(p: &ScoredPoint) -> bool {
    p.minutes_since_prev.is_some_and(|m| m < 1440)
}

pub fn stratified_report(points: &[ScoredPoint], scales: &BTreeMap<String, MetricScale>, units: &BTreeMap<String, String>) -> StratifiedReport {
    let (near, far): (Vec<ScoredPoint>, Vec<ScoredPoint>) = points.iter().cloned().partition(within_24h);
    if near.is_empty() {
        log::info!("no predictions within 24h of a prior measurement");
    }
    if far.is_empty() {
        log::info!("no predictions beyond 24h of a prior measurement");
    }
    StratifiedReport {
        overall: evaluate(points, scales, units),
        within_24h: evaluate(&near, scales, units),
        beyond_24h: evaluate(&far, scales, units),
    }
}

impl StratifiedReport {
    pub fn write_csv_rows(&self, method: &str, out: &mut String) {
        self.overall.write_csv_rows(method, "all", out);
        self.within_24h.write_csv_rows(method, "lt24h", out);
        self.beyond_24h.write_csv_rows(method, "ge24h", out);
    }
}
