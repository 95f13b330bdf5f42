use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ehr::{IcuStay, MedicalEvent};
use crate::error::{Error, Result};

/// Per-item mean of lab values across the training split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeans(pub BTreeMap<String, f64>);

impl TrainingMeans {
    pub fn from_stays(stays: &[IcuStay]) -> Self {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (item, v) in lab_values(stays) {
            let e = acc.entry(item).or_default();
            e.0 += v;
            e.1 += 1;
        }
        TrainingMeans(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
    }

    pub fn get(&self, item: &str) -> Result<f64> {
        self.0.get(item).copied().ok_or_else(|| Error::UnknownItem(item.to_string()))
    }
}

/// `(item, value)` for every lab event with a parseable value.
pub fn lab_values(stays: &[IcuStay]) -> impl Iterator<Item = (String, f64)> + '_ {
    stays
        .iter()
        .flat_map(|s| &s.events)
        .filter(|e| e.is_lab())
        .filter_map(|e| e.numeric_value().map(|v| (e.description.clone(), v)))
}

pub fn values_by_item(stays: &[IcuStay]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (item, v) in lab_values(stays) {
        out.entry(item).or_default().push(v);
    }
    out
}

fn prior_values<'a>(history: &'a [MedicalEvent], item: &'a str, t: u32) -> impl Iterator<Item = f64> + 'a {
    history
        .iter()
        .filter(move |e| e.is_lab() && e.description == item && e.offset_minutes < t)
        .filter_map(MedicalEvent::numeric_value)
}

/// Last value of `item` strictly before `t`, else the training mean.
pub fn naive_predict(history: &[MedicalEvent], item: &str, t: u32, means: &TrainingMeans) -> Result<f64> {
    let fallback = means.get(item)?;
    // events are sorted by offset; the last strictly-prior one wins
    Ok(prior_values(history, item, t).last().unwrap_or(fallback))
}

/// Mean of all values of `item` strictly before `t`, else the training mean.
pub fn naive_mean_predict(history: &[MedicalEvent], item: &str, t: u32, means: &TrainingMeans) -> Result<f64> {
    let fallback = means.get(item)?;
    let (sum, n) = prior_values(history, item, t).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    Ok(if n == 0 { fallback } else { sum / n as f64 })
}

/// Minutes since the previous measurement of `item` strictly before `t`.
pub fn minutes_since_prev(history: &[MedicalEvent], item: &str, t: u32) -> Option<u32> {
    history
        .iter()
        .filter(|e| e.is_lab() && e.description == item && e.offset_minutes < t)
        .map(|e| t - e.offset_minutes)
        .min()
}
