use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{InferencePrompt, PromptSpan};
use crate::error::{Error, Result};
use crate::model::{attention_maps, ModelParams, Scalar};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Head- then layer-averaged attention row of each decoding step.
    pub a_final: Vec<Vec<f64>>,
    /// `a_final` averaged over decoding steps, restricted to prompt tokens.
    pub token_scores: Vec<f64>,
    /// `(event ordinal, score)` per history event, summing to 1.
    pub event_scores: Vec<(usize, f64)>,
}

/// Aggregate raw maps (`[layer][head]`, each `cols × cols` row-major) over
/// the query rows in `steps`, then sum token scores per history span.
pub fn aggregate_attention<F: Scalar>(maps: &[Vec<Vec<F>>], cols: usize, steps: Range<usize>, prompt_len: usize, spans: &[PromptSpan]) -> Result<AttentionSummary> {
    let n_layers = maps.len();
    let n_heads = maps.first().map_or(0, Vec::len);
    if n_layers == 0 || maps.iter().any(Vec::is_empty) || steps.is_empty() || steps.end > cols || prompt_len > cols {
        return Err(Error::Shape("empty attention maps or steps out of range".into()));
    }
    let mut a_final = Vec::with_capacity(steps.len());
    for r in steps.clone() {
        let mut row = vec![0.0; cols];
        for layer in maps {
            let mut layer_row = vec![0.0; cols];
            for head in layer {
                for (acc, x) in layer_row.iter_mut().zip(&head[r * cols..(r + 1) * cols]) {
                    *acc += x.f64();
                }
            }
            for (acc, x) in row.iter_mut().zip(&layer_row) {
                *acc += x / layer.len() as f64;
            }
        }
        row.iter_mut().for_each(|x| *x /= n_layers as f64);
        a_final.push(row);
    }
    let mut token_scores = vec![0.0; prompt_len];
    for row in &a_final {
        for (acc, x) in token_scores.iter_mut().zip(row) {
            *acc += x / a_final.len() as f64;
        }
    }
    let mut event_scores: Vec<(usize, f64)> = spans
        .iter()
        .filter_map(|s| s.ordinal.map(|o| (o, token_scores[s.start..s.end].iter().sum())))
        .collect();
    let total: f64 = event_scores.iter().map(|e| e.1).sum();
    if total > 0.0 {
        event_scores.iter_mut().for_each(|e| e.1 /= total);
    }
    Ok(AttentionSummary {
        n_layers,
        n_heads,
        a_final,
        token_scores,
        event_scores,
    })
}

/// Attention of the decoding steps that produced `generated` (plus the
/// `[EOE]` step when `terminated`) over the prompt's history events.
pub fn attention_summary(params: &ModelParams<f32>, prompt: &InferencePrompt, generated: &[TokenId], terminated: bool) -> Result<AttentionSummary> {
    let steps = generated.len() + usize::from(terminated);
    if steps == 0 {
        return Err(Error::Shape("no decoding steps to summarise".into()));
    }
    let p = prompt.ids.len();
    let mut fed = prompt.ids.clone();
    fed.extend_from_slice(&generated[..steps - 1]);
    let maps = attention_maps(params, &fed)?;
    aggregate_attention(&maps, fed.len(), p - 1..p - 1 + steps, p, &prompt.spans)
}
