use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textualize::MAX_QUANTILES;

/// Equal-frequency bins for one lab item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemBins {
    /// Inner cut points; bin of `x` is the number of edges `<= x`.
    pub edges: Vec<f64>,
    /// Mean of the training values assigned to each bin.
    pub means: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fewer effective bins than requested (ties or too few distinct values).
    pub degenerate: bool,
}

impl ItemBins {
    pub fn n_bins(&self) -> usize {
        self.means.len()
    }

    pub fn bin_of(&self, x: f64) -> usize {
        self.edges.partition_point(|&e| e <= x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBinning {
    pub k: usize,
    pub items: BTreeMap<String, ItemBins>,
}

impl QuantileBinning {
    pub fn bin_of(&self, item: &str, x: f64) -> Option<usize> {
        self.items.get(item).map(|b| b.bin_of(x))
    }

    pub fn item(&self, item: &str) -> Option<&ItemBins> {
        self.items.get(item)
    }
}

pub const ALLOWED_K: [usize; 3] = [5, 10, 20];

/// Fit `k` equal-frequency bins per item on training values.
pub fn quantile_fit(train_values: &BTreeMap<String, Vec<f64>>, k: usize) -> Result<QuantileBinning> {
    if k == 0 || k > MAX_QUANTILES {
        return Err(Error::Config(format!("quantile count {k} outside 1..={MAX_QUANTILES}")));
    }
    let mut items = BTreeMap::new();
    for (name, values) in train_values {
        if values.is_empty() {
            return Err(Error::Validation(format!("no training values for {name:?}")));
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut edges: Vec<f64> = (1..k).map(|q| sorted[q * n / k]).filter(|&e| e > sorted[0]).collect();
        edges.dedup();

        let nb = edges.len() + 1;
        let mut sums = vec![0.0; nb];
        let mut counts = vec![0usize; nb];
        for &x in &sorted {
            let b = edges.partition_point(|&e| e <= x);
            sums[b] += x;
            counts[b] += 1;
        }
        let means = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        if nb < k {
            log::warn!("{name}: only {nb} effective quantile bins of {k}");
        }
        items.insert(
            name.clone(),
            ItemBins {
                edges,
                means,
                counts,
                degenerate: nb < k,
            },
        );
    }
    Ok(QuantileBinning { k, items })
}

/// `Σ_q μ_q · p(q)` for one item.
pub fn quantile_expected(bin_probs: &[f64], binning: &QuantileBinning, item: &str) -> Result<f64> {
    let bins = binning.item(item).ok_or_else(|| Error::UnknownItem(item.to_string()))?;
    if bin_probs.len() != bins.n_bins() {
        return Err(Error::Shape(format!(
            "{} bin probabilities for {} bins of {item:?}",
            bin_probs.len(),
            bins.n_bins()
        )));
    }
    let total: f64 = bin_probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 || bin_probs.iter().any(|p| *p < 0.0) {
        return Err(Error::Validation(format!("bin probabilities sum to {total}")));
    }
    Ok(bin_probs.iter().zip(&bins.means).map(|(p, m)| p * m).sum())
}
