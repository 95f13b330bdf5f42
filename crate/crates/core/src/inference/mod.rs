//! Prompt construction, greedy value generation and prediction records.

mod attention;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ehr::IcuStay;
use crate::error::{Error, Result};
use crate::metrics::{minutes_since_prev, quantile_expected, ScoredPoint, TrainingMeans};
use crate::model::{extend, softmax, ExtendOptions, KvCache, ModelParams};
use crate::textualize::{
    encode_time, event_blocks, event_header, quantile_token, textualize_demographics, AssemblyOptions, TimeMode, ValueEncoding,
};
use crate::train::Checkpoint;
use crate::vocab::{TokenId, Vocabulary, EOE_ID};

pub use attention::{aggregate_attention, attention_summary, AttentionSummary};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 24;

/// A contiguous run of prompt tokens belonging to one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpan {
    /// Event ordinal in the stay, `None` for the demographic prefix.
    pub ordinal: Option<usize>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferencePrompt {
    pub stay_id: String,
    /// Ordinal of the target lab event in the stay.
    pub target: usize,
    pub item: String,
    pub offset_minutes: u32,
    pub ids: Vec<TokenId>,
    /// Demographics, then history events; the target header is the tail
    /// after the last span.
    pub spans: Vec<PromptSpan>,
    pub y_true: String,
    pub unit: String,
    /// Oldest history events dropped to fit the length budget.
    pub dropped_events: usize,
}

impl InferencePrompt {
    /// Spans of history events only.
    pub fn history(&self) -> impl Iterator<Item = &PromptSpan> {
        self.spans.iter().filter(|s| s.ordinal.is_some())
    }

    /// Start of the target header.
    pub fn header_start(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }
}

/// One prompt per lab event: demographics, every kept event strictly before
/// the target, then the target's time (absolute mode) and item header.
/// Oldest history events are dropped first when over `max_len`.
pub fn build_prompts(stay: &IcuStay, vocab: &Vocabulary, max_len: usize, opts: &AssemblyOptions<'_>) -> Result<Vec<InferencePrompt>> {
    let demo = vocab.encode(&textualize_demographics(&stay.demographics));
    let blocks: Vec<(usize, u32, Vec<TokenId>)> = event_blocks(stay, None, opts)?
        .into_iter()
        .map(|b| (b.ordinal, b.offset_minutes, vocab.encode(&b.tokens)))
        .collect();

    let mut prompts = Vec::new();
    for (k, target) in stay.lab_events() {
        let mut header = Vec::new();
        if opts.time_mode == TimeMode::Absolute {
            header.extend(encode_time(stay.admit_datetime, target.offset_minutes).tokens());
        }
        header.extend(event_header(target).0);
        let header = vocab.encode(&header);

        let n_hist = blocks.partition_point(|b| b.1 < target.offset_minutes);
        debug_assert!(blocks[..n_hist].iter().all(|b| b.1 < target.offset_minutes));
        let mut first = 0;
        let mut total: usize = demo.len() + header.len() + blocks[..n_hist].iter().map(|b| b.2.len()).sum::<usize>();
        while total > max_len && first < n_hist {
            total -= blocks[first].2.len();
            first += 1;
        }
        if total > max_len {
            return Err(Error::EventTooLong {
                ordinal: k,
                needed: total,
                max_len,
            });
        }

        let mut ids = Vec::with_capacity(total);
        let mut spans = Vec::with_capacity(n_hist - first + 1);
        ids.extend_from_slice(&demo);
        spans.push(PromptSpan {
            ordinal: None,
            start: 0,
            end: ids.len(),
        });
        for (ordinal, _, b) in &blocks[first..n_hist] {
            let start = ids.len();
            ids.extend_from_slice(b);
            spans.push(PromptSpan {
                ordinal: Some(*ordinal),
                start,
                end: ids.len(),
            });
        }
        ids.extend_from_slice(&header);
        prompts.push(InferencePrompt {
            stay_id: stay.stay_id.clone(),
            target: k,
            item: target.description.clone(),
            offset_minutes: target.offset_minutes,
            ids,
            spans,
            y_true: target.value.clone().unwrap_or_default(),
            unit: target.unit.clone().unwrap_or_default(),
            dropped_events: first,
        });
    }
    Ok(prompts)
}

/// Output of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids, without the closing `[EOE]`.
    pub ids: Vec<TokenId>,
    pub terminated: bool,
    /// Softmax of every decoding step, including the `[EOE]` step.
    pub step_probs: Vec<Vec<f64>>,
}

/// Index of the largest logit; ties go to the smaller id.
pub fn argmax(probs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Anything that maps a token history to next-token probabilities.
pub trait NextToken {
    /// Feed `ids` after everything fed so far and return the distribution
    /// of the next token.
    fn feed(&mut self, ids: &[TokenId]) -> Result<Vec<f64>>;
}

/// [`NextToken`] backed by a transformer and a key/value cache that keeps
/// the longest common prefix between successive prompts.
pub struct CachedModel<'a> {
    params: &'a ModelParams<f32>,
    cache: KvCache<f32>,
}

impl<'a> CachedModel<'a> {
    pub fn new(params: &'a ModelParams<f32>) -> Self {
        CachedModel {
            params,
            cache: KvCache::new(params),
        }
    }

    /// Next-token distribution after `prompt`, reusing the cached prefix.
    pub fn start(&mut self, prompt: &[TokenId]) -> Result<Vec<f64>> {
        let common = self.cache.tokens().iter().zip(prompt).take_while(|(a, b)| a == b).count();
        // at least the last prompt token must be recomputed for its logits
        self.cache.truncate(common.min(prompt.len() - 1));
        let rest = prompt[self.cache.len()..].to_vec();
        self.feed(&rest)
    }
}

impl NextToken for CachedModel<'_> {
    fn feed(&mut self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let out = extend(self.params, &mut self.cache, ids, ExtendOptions::default())?;
        Ok(softmax(&out.logits))
    }
}

/// Greedy decoding from the distribution that follows the prompt.
pub fn greedy_decode(model: &mut dyn NextToken, first: Vec<f64>, max_new_tokens: usize) -> Result<Generation> {
    let mut gen = Generation {
        ids: Vec::new(),
        terminated: false,
        step_probs: Vec::new(),
    };
    let mut probs = first;
    loop {
        let next = argmax(&probs);
        gen.step_probs.push(probs);
        if next == EOE_ID {
            gen.terminated = true;
            break;
        }
        gen.ids.push(next);
        if gen.ids.len() >= max_new_tokens {
            break;
        }
        probs = model.feed(&[next])?;
    }
    Ok(gen)
}

/// Numeric prefix of generated tokens and the unit tokens after it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedValue {
    pub value: Option<f64>,
    /// Characters of the numeric prefix.
    pub text: String,
    pub unit: Vec<String>,
}

/// Longest token prefix of the form `-? digits (. digits)?`.
pub fn parse_value<S: AsRef<str>>(tokens: &[S]) -> ParsedValue {
    let tok = |i: usize| tokens.get(i).map(AsRef::as_ref);
    let is_digit = |t: Option<&str>| t.is_some_and(|t| t.len() == 1 && t.as_bytes()[0].is_ascii_digit());
    let mut i = 0;
    if tok(0) == Some("-") {
        i = 1;
    }
    let int_start = i;
    while is_digit(tok(i)) {
        i += 1;
    }
    let end = if i == int_start {
        0
    } else if tok(i) == Some(".") && is_digit(tok(i + 1)) {
        let mut j = i + 1;
        while is_digit(tok(j)) {
            j += 1;
        }
        j
    } else {
        i
    };
    let text: String = tokens[..end].iter().map(AsRef::as_ref).collect();
    let value = text.parse::<f64>().ok().filter(|v| v.is_finite() && end > 0);
    ParsedValue {
        value,
        text,
        unit: tokens[end..].iter().map(|t| t.as_ref().to_string()).collect(),
    }
}

/// `-Σ p ln p` of one distribution.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Mean entropy (nats) over decoding steps; 0 for no steps.
pub fn uncertainty(steps: &[Vec<f64>]) -> Result<f64> {
    for (i, s) in steps.iter().enumerate() {
        let total: f64 = s.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("step {i} probabilities sum to {total}")));
        }
    }
    if steps.is_empty() {
        return Ok(0.0);
    }
    Ok(steps.iter().map(|s| entropy(s)).sum::<f64>() / steps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub stay_id: String,
    pub item: String,
    pub offset_minutes: u32,
    pub y_true: f64,
    /// Parsed prediction; `None` exactly when `failed`.
    pub y_pred: Option<f64>,
    pub failed: bool,
    pub generated: Vec<String>,
    pub terminated: bool,
    pub entropy_nats: f64,
    pub minutes_since_prev: Option<u32>,
    /// Generated unit differs from the recorded one.
    pub unit_mismatch: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PredictOptions<'a> {
    pub assembly: AssemblyOptions<'a>,
    pub max_new_tokens: usize,
}

impl PredictOptions<'_> {
    pub fn new(assembly: AssemblyOptions<'_>) -> PredictOptions<'_> {
        PredictOptions {
            assembly,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionRun {
    pub records: Vec<PredictionRecord>,
    pub n_failed: usize,
    pub n_unit_mismatch: usize,
    pub n_truncated_prompts: usize,
}

impl PredictionRun {
    pub fn failure_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.n_failed as f64 / self.records.len() as f64
        }
    }

    /// Points for scoring. Failed parses are dropped, or replaced by the
    /// item's training mean when `fallback` is given.
    pub fn scored_points(&self, fallback: Option<&TrainingMeans>) -> Result<Vec<ScoredPoint>> {
        let mut out = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let yhat = match (r.y_pred, fallback) {
                (Some(v), _) => v,
                (None, Some(m)) => m.get(&r.item)?,
                (None, None) => continue,
            };
            out.push(ScoredPoint {
                item: r.item.clone(),
                y: r.y_true,
                yhat,
                minutes_since_prev: r.minutes_since_prev,
            });
        }
        Ok(out)
    }
}

fn predict_one(
    model: &mut CachedModel<'_>,
    vocab: &Vocabulary,
    stay: &IcuStay,
    prompt: &InferencePrompt,
    opts: &PredictOptions<'_>,
) -> Result<PredictionRecord> {
    let first = model.start(&prompt.ids)?;
    let gen = greedy_decode(model, first, opts.max_new_tokens)?;
    let tokens = vocab.decode(&gen.ids)?;
    let parsed = parse_value(&tokens);
    let y_pred = match opts.assembly.values {
        ValueEncoding::Digits => parsed.value,
        ValueEncoding::Quantile(binning) => match binning.item(&prompt.item) {
            Some(bins) => {
                let ids: Vec<Option<TokenId>> = (0..bins.n_bins()).map(|q| vocab.id(&quantile_token(q))).collect();
                let mut p: Vec<f64> = ids.iter().map(|id| id.map_or(0.0, |i| gen.step_probs[0][i as usize])).collect();
                let total: f64 = p.iter().sum();
                if total > 0.0 {
                    p.iter_mut().for_each(|x| *x /= total);
                    Some(quantile_expected(&p, binning, &prompt.item)?)
                } else {
                    None
                }
            }
            None => None,
        },
    };
    let unit_text: String = parsed.unit.concat();
    let expected_unit: String = crate::textualize::unit_tokens(&prompt.unit).concat();
    Ok(PredictionRecord {
        stay_id: prompt.stay_id.clone(),
        item: prompt.item.clone(),
        offset_minutes: prompt.offset_minutes,
        y_true: prompt.y_true.parse().map_err(|_| Error::Validation(format!("ground truth {:?}", prompt.y_true)))?,
        failed: y_pred.is_none(),
        y_pred,
        generated: tokens,
        terminated: gen.terminated,
        entropy_nats: uncertainty(&gen.step_probs)?,
        minutes_since_prev: minutes_since_prev(&stay.events, &prompt.item, prompt.offset_minutes),
        unit_mismatch: !unit_text.starts_with(&expected_unit),
    })
}

/// Predict every lab event of every stay. Stays run in parallel; each keeps
/// one cache across its prompts.
pub fn predict_all(checkpoint: &Checkpoint, vocab: &Vocabulary, stays: &[IcuStay], opts: &PredictOptions<'_>) -> Result<PredictionRun> {
    let hash = vocab.hash();
    if checkpoint.vocab_hash != hash {
        return Err(Error::VocabMismatch {
            checkpoint: checkpoint.vocab_hash.clone(),
            tokenizer: hash,
        });
    }
    let params = &checkpoint.params;
    if params.config.vocab_size != vocab.len() {
        return Err(Error::Shape(format!("model vocab {} vs tokenizer {}", params.config.vocab_size, vocab.len())));
    }
    let budget = params.config.max_seq_len.saturating_sub(opts.max_new_tokens);
    let per_stay: Vec<(Vec<PredictionRecord>, usize)> = stays
        .par_iter()
        .map(|stay| {
            let prompts = build_prompts(stay, vocab, budget, &opts.assembly)?;
            let truncated = prompts.iter().filter(|p| p.dropped_events > 0).count();
            let mut model = CachedModel::new(params);
            let recs = prompts
                .iter()
                .map(|p| predict_one(&mut model, vocab, stay, p, opts))
                .collect::<Result<Vec<_>>>()?;
            Ok((recs, truncated))
        })
        .collect::<Result<_>>()?;

    let mut run = PredictionRun::default();
    for (recs, truncated) in per_stay {
        run.n_truncated_prompts += truncated;
        run.records.extend(recs);
    }
    run.n_failed = run.records.iter().filter(|r| r.failed).count();
    run.n_unit_mismatch = run.records.iter().filter(|r| r.unit_mismatch).count();
    if run.n_unit_mismatch > 0 {
        log::info!("{} predictions generated a unit different from the record", run.n_unit_mismatch);
    }
    Ok(run)
}

pub const PREDICTIONS_HEADER: &str = "stay_id,item,offset_min,y_true,y_pred,failed,entropy_nats,minutes_since_prev";

pub fn predictions_csv(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    out.push_str(PREDICTIONS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{}",
            r.stay_id,
            r.item,
            r.offset_minutes,
            r.y_true,
            r.y_pred.map(|v| v.to_string()).unwrap_or_default(),
            u8::from(r.failed),
            r.entropy_nats,
            r.minutes_since_prev.map(|m| m.to_string()).unwrap_or_default()
        );
    }
    out
}

#[cfg(test)]
mod tests;
