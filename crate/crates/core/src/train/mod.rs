//! Masked next-token training: batches, loss, Adam, early stopping.

mod checkpoint;
mod gradcheck;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sequence_loss, Logits, ModelParams, Scalar};
use crate::seeds::derive_seed;
use crate::textualize::{compute_loss_mask, SequenceRecord};
use crate::vocab::{TokenId, Vocabulary, PAD_ID};

pub use checkpoint::{read_checkpoint, write_checkpoint, AdamState, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Loss only on value, unit and end tokens of lab events.
    #[default]
    LabOnly,
    /// Every next-token prediction.
    FullAr,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::LabOnly => "lab-only",
            LossMode::FullAr => "full-ar",
        })
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lab-only" => Ok(LossMode::LabOnly),
            "full-ar" => Ok(LossMode::FullAr),
            _ => Err(Error::Config(format!("loss mode {s:?}; expected lab-only or full-ar"))),
        }
    }
}

/// One token sequence with a per-token flag saying whether predicting that
/// token contributes to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl TrainExample {
    pub fn from_record(record: &SequenceRecord, vocab: &Vocabulary, mode: LossMode) -> Self {
        let ids = vocab.encode(&record.tokens);
        let mask = match mode {
            LossMode::LabOnly => compute_loss_mask(record),
            LossMode::FullAr => vec![true; ids.len()],
        };
        TrainExample { ids, mask }
    }

    /// Positions whose token is predicted with loss (the first token never is).
    pub fn n_targets(&self) -> usize {
        self.mask.iter().skip(1).filter(|&&m| m).count()
    }
}

/// Rectangular batch: inputs and left-shifted targets padded with `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<TokenId>>,
    pub targets: Vec<Vec<TokenId>>,
    pub loss_mask: Vec<Vec<bool>>,
    /// True at real (non-padding) positions.
    pub pad_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_examples(examples: &[TrainExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if let Some(e) = examples.iter().find(|e| e.ids.len() < 2 || e.ids.len() != e.mask.len()) {
            return Err(Error::Shape(format!("example of {} ids and {} mask flags", e.ids.len(), e.mask.len())));
        }
        let t = examples.iter().map(|e| e.ids.len() - 1).max().unwrap_or(0);
        let mut b = Batch {
            inputs: Vec::new(),
            targets: Vec::new(),
            loss_mask: Vec::new(),
            pad_mask: Vec::new(),
        };
        for e in examples {
            let n = e.ids.len() - 1;
            let pad = |v: &[TokenId]| v.iter().copied().chain(std::iter::repeat(PAD_ID)).take(t).collect::<Vec<_>>();
            b.inputs.push(pad(&e.ids[..n]));
            b.targets.push(pad(&e.ids[1..]));
            let mask: Vec<bool> = e.mask[1..].iter().zip(&e.ids[1..]).map(|(&m, &id)| m && id != PAD_ID).collect();
            b.loss_mask.push(mask.into_iter().chain(std::iter::repeat(false)).take(t).collect());
            b.pad_mask.push((0..t).map(|i| i < n).collect());
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Row `b` cut after its last masked target; `None` when nothing is masked.
    pub fn row(&self, b: usize) -> Option<(&[TokenId], &[TokenId], &[bool])> {
        let end = self.loss_mask[b].iter().rposition(|&m| m)? + 1;
        Some((&self.inputs[b][..end], &self.targets[b][..end], &self.loss_mask[b][..end]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskedNll {
    /// Mean NLL per masked position (0 when empty).
    pub loss: f64,
    pub count: usize,
    pub empty: bool,
}

impl MaskedNll {
    fn from_sum(sum: f64, count: usize) -> Self {
        if count == 0 {
            MaskedNll {
                loss: 0.0,
                count: 0,
                empty: true,
            }
        } else {
            MaskedNll {
                loss: sum / count as f64,
                count,
                empty: false,
            }
        }
    }
}

/// Mean negative log-likelihood of `targets` over masked positions.
pub fn masked_nll<F: Scalar>(logits: &Logits<F>, targets: &[Vec<TokenId>], mask: &[Vec<bool>]) -> Result<MaskedNll> {
    if targets.len() != logits.batch || mask.len() != logits.batch {
        return Err(Error::Shape("targets and mask must match the logits batch".into()));
    }
    let (mut sum, mut count) = (0.0, 0);
    for b in 0..logits.batch {
        if targets[b].len() != logits.seq_len || mask[b].len() != logits.seq_len {
            return Err(Error::Shape(format!("row {b} does not match sequence length {}", logits.seq_len)));
        }
        for t in (0..logits.seq_len).filter(|&t| mask[b][t]) {
            let row = logits.row(b, t);
            let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
            sum += lse - row[targets[b][t] as usize].f64();
            count += 1;
        }
    }
    Ok(MaskedNll::from_sum(sum, count))
}

/// Mean masked NLL of a batch; with `grad`, also writes its gradient.
/// Rows run in parallel and are reduced in row order.
pub fn batch_loss<F: Scalar>(params: &ModelParams<F>, batch: &Batch, grad: Option<&mut [F]>, dropout_seed: Option<u64>) -> Result<MaskedNll> {
    let want_grad = grad.is_some();
    let n = params.len();
    let rows: Vec<(crate::model::NllSum, Option<Vec<F>>)> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let Some((inp, tgt, mask)) = batch.row(b) else {
                return Ok((Default::default(), None));
            };
            let mut g = want_grad.then(|| vec![F::zero(); n]);
            let seed = dropout_seed.map(|s| derive_seed(s, "row", b as u64));
            let nll = sequence_loss(params, inp, tgt, mask, g.as_deref_mut(), seed)?;
            Ok((nll, g))
        })
        .collect::<Result<_>>()?;
    let sum: f64 = rows.iter().map(|(r, _)| r.sum).sum();
    let count: usize = rows.iter().map(|(r, _)| r.count).sum();
    if let Some(grad) = grad {
        grad.iter_mut().for_each(|g| *g = F::zero());
        if count > 0 {
            for g in rows.iter().filter_map(|(_, g)| g.as_ref()) {
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
            let inv = F::of(1.0 / count as f64);
            grad.iter_mut().for_each(|g| *g *= inv);
        }
    }
    Ok(MaskedNll::from_sum(sum, count))
}

/// Mean masked NLL over many examples without gradients.
pub fn dataset_loss(params: &ModelParams<f32>, examples: &[TrainExample], batch_size: usize) -> Result<MaskedNll> {
    let (mut sum, mut count) = (0.0, 0);
    for chunk in examples.chunks(batch_size.max(1)) {
        let r = batch_loss(params, &Batch::from_examples(chunk)?, None, None)?;
        sum += r.loss * r.count as f64;
        count += r.count;
    }
    Ok(MaskedNll::from_sum(sum, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub patience: u32,
    pub batch_size: usize,
    /// Taken from the run's master seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
    pub max_epochs: u32,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many optimizer steps in total.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-4,
            patience: 5,
            batch_size: 8,
            seed: 0,
            max_epochs: 100,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: None,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// Linear warmup to `lr` over `warmup_steps`, constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam without weight decay. `step` counts completed updates.
pub fn adam_update(params: &mut [f32], grad: &[f32], state: &mut AdamState, hyper: &TrainHyper, lr: f64) {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let step_size = (lr / c1) as f32;
    let sqrt_c2 = c2.sqrt() as f32;
    let (b1, b2, eps) = (b1 as f32, b2 as f32, hyper.adam_eps as f32);
    for i in 0..params.len() {
        let g = grad[i];
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] -= step_size * m / (v.sqrt() / sqrt_c2 + eps);
    }
}

/// Patience counter on validation loss; only strict improvement resets it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: u32,
    pub best: Option<f64>,
    pub epochs_since_improvement: u32,
}

impl EarlyStopping {
    pub fn new(patience: u32) -> Self {
        EarlyStopping {
            patience,
            best: None,
            epochs_since_improvement: 0,
        }
    }

    /// Record one epoch's validation loss; returns whether it improved.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if self.best.map_or(true, |b| val_loss < b) {
            self.best = Some(val_loss);
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

/// Supplies training examples per epoch and a fixed validation set.
pub trait ExampleSource: Sync {
    /// Training examples for `epoch`, assembled with `permute_seed`.
    fn train_examples(&self, epoch: u32, permute_seed: u64) -> Result<Vec<TrainExample>>;
    /// Validation examples, assembled without permutation.
    fn val_examples(&self) -> Result<Vec<TrainExample>>;
}

/// Fixed example lists.
pub struct StaticSource {
    pub train: Vec<TrainExample>,
    pub val: Vec<TrainExample>,
}

impl ExampleSource for StaticSource {
    fn train_examples(&self, _: u32, _: u64) -> Result<Vec<TrainExample>> {
        Ok(self.train.clone())
    }

    fn val_examples(&self) -> Result<Vec<TrainExample>> {
        Ok(self.val.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u32,
    pub stopping: EarlyStopping,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>, patience: u32) -> Self {
        let n = params.len();
        TrainState {
            params,
            adam: AdamState::zeros(n),
            epoch: 0,
            stopping: EarlyStopping::new(patience),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: ModelParams<f32>,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Run epochs until patience or `max_epochs` runs out. `on_epoch` sees each
/// epoch record as soon as it is known.
pub fn train(
    source: &dyn ExampleSource,
    mut state: TrainState,
    hyper: &TrainHyper,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    hyper.validate()?;
    let val = source.val_examples()?;
    if val.is_empty() {
        return Err(Error::Validation("empty validation split".into()));
    }
    let mut best = state.params.clone();
    let mut history = Vec::new();
    let mut grad = vec![0f32; state.params.len()];
    let mut stopped_early = false;

    while state.epoch < hyper.max_epochs {
        if hyper.max_steps.is_some_and(|m| state.step() >= m) {
            break;
        }
        let epoch = state.epoch + 1;
        let mut examples = source.train_examples(epoch, derive_seed(hyper.seed, "permute", epoch as u64))?;
        if examples.is_empty() {
            return Err(Error::Validation("empty training split".into()));
        }
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, "order", epoch as u64)));

        let (mut sum, mut count) = (0.0, 0usize);
        let mut lr = hyper.lr_at(state.step());
        for chunk in examples.chunks(hyper.batch_size) {
            if hyper.max_steps.is_some_and(|m| state.step() >= m) {
                break;
            }
            let step = state.step() + 1;
            lr = hyper.lr_at(step);
            let batch = Batch::from_examples(chunk)?;
            let dropout = (state.params.config.dropout > 0.0).then(|| derive_seed(hyper.seed, "dropout", step));
            let r = batch_loss(&state.params, &batch, Some(&mut grad), dropout)?;
            if !r.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step, lr });
            }
            if r.empty {
                continue;
            }
            adam_update(&mut state.params.data, &grad, &mut state.adam, hyper, lr);
            sum += r.loss * r.count as f64;
            count += r.count;
        }

        let v = dataset_loss(&state.params, &val, hyper.batch_size)?;
        if !v.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: state.step(), lr });
        }
        state.epoch = epoch;
        let improved = state.stopping.observe(v.loss);
        if improved {
            best = state.params.clone();
        }
        let record = EpochRecord {
            epoch,
            step: state.step(),
            train_loss: if count == 0 { 0.0 } else { sum / count as f64 },
            val_loss: v.loss,
            lr,
            improved,
        };
        log::info!(
            "epoch {epoch} step {} train {:.4} val {:.4}{}",
            record.step,
            record.train_loss,
            record.val_loss,
            if improved { " *" } else { "" }
        );
        on_epoch(&record);
        history.push(record);
        if state.stopping.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        state,
        history,
        stopped_early,
    })
}
