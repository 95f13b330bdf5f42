//! End-to-end pipeline steps shared by the command line and the tests:
//! data generation, vocabulary, training, evaluation, ablation and
//! attention tables. Artifacts live in `RunConfig::out_dir`.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DataSpec, EvalSpec, ModelSpec, RunConfig, ValueMode};

use crate::ehr::{generate_synthetic, load_dataset, split_dataset, write_dataset, IcuStay};
use crate::error::{Error, Result};
use crate::inference::{attention_summary, build_prompts, greedy_decode, predict_all, predictions_csv, CachedModel, PredictOptions, PredictionRun};
use crate::metrics::{
    metric_scales, naive_mean_predict, naive_predict, quantile_fit, stratified_report, values_by_item, QuantileBinning, ScoredPoint, StratifiedReport, TrainingMeans,
    CSV_HEADER,
};
use crate::model::ModelParams;
use crate::seeds::derive_seed;
use crate::textualize::{assemble_sequence, crop_sequence, AssemblyOptions, ValueEncoding};
use crate::train::{
    read_checkpoint, train, write_checkpoint, Checkpoint, CheckpointMeta, EpochRecord, ExampleSource, TrainExample, TrainState,
};
use crate::vocab::{build_vocab, Vocabulary};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const VOCAB_FILE: &str = "vocab.txt";
pub const BINNING_FILE: &str = "binning.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

fn io_write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub split: String,
    pub patients: usize,
    pub stays: usize,
    pub lab_events: usize,
    pub events: usize,
}

fn counts(split: &str, stays: &[IcuStay]) -> SplitCounts {
    let patients: std::collections::BTreeSet<&str> = stays.iter().map(|s| s.patient_id.as_str()).collect();
    SplitCounts {
        split: split.to_string(),
        patients: patients.len(),
        stays: stays.len(),
        lab_events: stays.iter().map(|s| s.lab_events().count()).sum(),
        events: stays.iter().map(|s| s.events.len()).sum(),
    }
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Generate, split by patient and write `train/val/test.jsonl`. The data
/// depends only on the data settings, so runs with different seeds share it.
pub fn gen_data(spec: &DataSpec, dir: &Path) -> Result<Vec<SplitCounts>> {
    let stays = generate_synthetic(&spec.synthetic)?;
    let split = split_dataset(&stays, spec.split, derive_seed(spec.synthetic.seed, "split", 0))?;
    ensure_dir(dir)?;
    let parts = [("train", &split.train), ("val", &split.val), ("test", &split.test)];
    for (name, stays) in parts {
        write_dataset(split_path(dir, name), stays)?;
    }
    Ok(parts.iter().map(|(n, s)| counts(n, s)).collect())
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<IcuStay>> {
    Ok(load_dataset(split_path(dir, split))?.stays)
}

/// Text-side state of a run: value binning and vocabulary.
#[derive(Debug, Clone)]
pub struct Representation {
    pub binning: Option<QuantileBinning>,
    pub vocab: Vocabulary,
}

impl Representation {
    pub fn assembly<'a>(&'a self, cfg: &RunConfig) -> AssemblyOptions<'a> {
        AssemblyOptions {
            time_mode: cfg.time_mode,
            values: match &self.binning {
                Some(b) => ValueEncoding::Quantile(b),
                None => ValueEncoding::Digits,
            },
            events: cfg.events.clone(),
        }
    }

    /// Fit binning and vocabulary on the training split.
    pub fn fit(cfg: &RunConfig, train: &[IcuStay]) -> Result<Self> {
        let binning = match cfg.value_mode {
            ValueMode::Digit => None,
            ValueMode::Quantile(k) => Some(quantile_fit(&values_by_item(train), k)?),
        };
        let mut rep = Representation {
            binning,
            vocab: Vocabulary::reserved_only(),
        };
        let opts = rep.assembly(cfg);
        let records = train.iter().map(|s| assemble_sequence(s, None, &opts)).collect::<Result<Vec<_>>>()?;
        rep.vocab = build_vocab(&records);
        Ok(rep)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        self.vocab.save(dir.join(VOCAB_FILE))?;
        if let Some(b) = &self.binning {
            let json = serde_json::to_string_pretty(b).map_err(|e| Error::Other(e.to_string()))?;
            io_write(&dir.join(BINNING_FILE), json)?;
        }
        Ok(())
    }

    pub fn load(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
        let binning = match cfg.value_mode {
            ValueMode::Digit => None,
            ValueMode::Quantile(k) => {
                let path = dir.join(BINNING_FILE);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let b: QuantileBinning = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                if b.k != k {
                    return Err(Error::Config(format!("binning has K={} but the run asks for {k}", b.k)));
                }
                Some(b)
            }
        };
        Ok(Representation { binning, vocab })
    }

    /// Load from `dir` when a vocabulary is already there, else fit and save.
    pub fn load_or_fit(cfg: &RunConfig, dir: &Path, train: &[IcuStay]) -> Result<Self> {
        if dir.join(VOCAB_FILE).exists() {
            Self::load(cfg, dir)
        } else {
            let rep = Self::fit(cfg, train)?;
            rep.save(dir)?;
            Ok(rep)
        }
    }
}

/// Training examples assembled from stays, re-permuted every epoch.
pub struct StaySource<'a> {
    pub cfg: &'a RunConfig,
    pub rep: &'a Representation,
    pub train: &'a [IcuStay],
    pub val: &'a [IcuStay],
}

impl StaySource<'_> {
    fn examples(&self, stays: &[IcuStay], permute_seed: Option<u64>) -> Result<Vec<TrainExample>> {
        let opts = self.rep.assembly(self.cfg);
        let per_stay: Vec<Vec<TrainExample>> = stays
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = permute_seed.map(|p| derive_seed(p, "stay", i as u64));
                let record = assemble_sequence(s, seed, &opts)?;
                Ok(crop_sequence(&record, self.cfg.model.max_seq_len)?
                    .iter()
                    .map(|r| TrainExample::from_record(r, &self.rep.vocab, self.cfg.loss_mode))
                    .filter(|e| e.ids.len() >= 2)
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(per_stay.into_iter().flatten().collect())
    }
}

impl ExampleSource for StaySource<'_> {
    fn train_examples(&self, _epoch: u32, permute_seed: u64) -> Result<Vec<TrainExample>> {
        self.examples(self.train, Some(permute_seed))
    }

    fn val_examples(&self) -> Result<Vec<TrainExample>> {
        self.examples(self.val, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_val_loss: Option<f64>,
    pub epochs: u32,
    pub steps: u64,
    pub stopped_early: bool,
    pub n_params: usize,
    pub vocab_size: usize,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,step,train_loss,val_loss,lr,improved";

fn run_meta(cfg: &RunConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("seed".into(), cfg.seed.to_string()),
        ("time_mode".into(), cfg.time_mode.to_string()),
        ("value_mode".into(), cfg.value_mode.to_string()),
        ("loss_mode".into(), cfg.loss_mode.to_string()),
        ("events".into(), cfg.events.to_string()),
    ])
}

/// Train on `data_dir`'s train/val splits. With `resume`, continue from
/// `last.ckpt` in `out_dir`; the step counter and patience carry over.
pub fn train_run(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_stays = load_split(&cfg.data_dir, "train")?;
    let val_stays = load_split(&cfg.data_dir, "val")?;
    if train_stays.is_empty() || val_stays.is_empty() {
        return Err(Error::Validation("train and val splits must be non-empty".into()));
    }
    let out = &cfg.out_dir;
    ensure_dir(out)?;
    let rep = Representation::load_or_fit(cfg, out, &train_stays)?;
    cfg.save(out.join(CONFIG_FILE))?;
    let hyper = cfg.hyper();
    let model_cfg = cfg.model.config(rep.vocab.len());

    let last = out.join(LAST_FILE);
    let state = if resume && last.exists() {
        let ck = read_checkpoint(&last)?;
        if ck.vocab_hash != rep.vocab.hash() {
            return Err(Error::VocabMismatch {
                checkpoint: ck.vocab_hash,
                tokenizer: rep.vocab.hash(),
            });
        }
        let n = ck.params.len();
        TrainState {
            params: ck.params,
            adam: ck.adam.unwrap_or_else(|| crate::train::AdamState::zeros(n)),
            epoch: ck.meta.epoch,
            stopping: ck.meta.stopping(hyper.patience),
        }
    } else {
        TrainState::new(ModelParams::init(model_cfg, derive_seed(cfg.seed, "init", 0))?, hyper.patience)
    };
    let resumed = state.epoch > 0;

    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = if resumed && log_path.exists() {
        fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?
    } else {
        format!("{TRAIN_LOG_HEADER}\n")
    };
    let source = StaySource {
        cfg,
        rep: &rep,
        train: &train_stays,
        val: &val_stays,
    };
    let outcome = train(&source, state, &hyper, |r| {
        let _ = writeln!(log, "{},{},{:.6},{:.6},{:e},{}", r.epoch, r.step, r.train_loss, r.val_loss, r.lr, u8::from(r.improved));
        if let Err(e) = fs::write(&log_path, &log) {
            log::warn!("cannot write {}: {e}", log_path.display());
        }
    })?;
    io_write(&log_path, &log)?;

    let meta = CheckpointMeta {
        epoch: outcome.state.epoch,
        step: outcome.state.step(),
        best_val_loss: outcome.state.stopping.best,
        epochs_since_improvement: outcome.state.stopping.epochs_since_improvement,
        hyper: Some(hyper.clone()),
        run: run_meta(cfg),
    };
    let hash = rep.vocab.hash();
    write_checkpoint(
        out.join(MODEL_FILE),
        &Checkpoint {
            params: outcome.best.clone(),
            vocab_hash: hash.clone(),
            meta: meta.clone(),
            adam: None,
        },
    )?;
    write_checkpoint(
        &last,
        &Checkpoint {
            params: outcome.state.params.clone(),
            vocab_hash: hash,
            meta,
            adam: Some(outcome.state.adam.clone()),
        },
    )?;
    Ok(TrainSummary {
        best_val_loss: outcome.state.stopping.best,
        epochs: outcome.state.epoch,
        steps: outcome.state.step(),
        stopped_early: outcome.stopped_early,
        n_params: outcome.best.len(),
        vocab_size: rep.vocab.len(),
        history: outcome.history,
    })
}

/// Metrics of one method, overall and by 24-hour stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub report: StratifiedReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub split: String,
    pub n_targets: usize,
    pub n_failed: usize,
    pub failure_rate: f64,
    pub n_unit_mismatch: usize,
    pub n_truncated_prompts: usize,
    pub fallback: bool,
    pub methods: Vec<MethodReport>,
}

impl EvaluationSummary {
    pub fn method(&self, name: &str) -> Option<&StratifiedReport> {
        self.methods.iter().find(|m| m.method == name).map(|m| &m.report)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for m in &self.methods {
            m.report.write_csv_rows(&m.method, &mut out);
        }
        out
    }

    /// One line per method: macro NMAE and SMAPE over all targets.
    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>10} {:>10}\n", "method", "NMAE", "SMAPE(%)");
        for m in &self.methods {
            let o = &m.report.overall;
            let f = |x: Option<f64>, p: usize| x.map_or("-".to_string(), |v| format!("{v:.p$}"));
            let _ = writeln!(out, "{:<12} {:>10} {:>10}", m.method, f(o.macro_nmae, 4), f(o.macro_smape, 2));
        }
        let _ = writeln!(out, "failure rate {:.4} ({} of {})", self.failure_rate, self.n_failed, self.n_targets);
        out
    }
}

/// Naive and Naive(μ) predictions for every lab event of `stays`.
pub fn baseline_points(stays: &[IcuStay], means: &TrainingMeans) -> Result<(Vec<ScoredPoint>, Vec<ScoredPoint>)> {
    let (mut last, mut mean) = (Vec::new(), Vec::new());
    for s in stays {
        for (_, e) in s.lab_events() {
            let y = e.numeric_value().ok_or_else(|| Error::Validation(format!("unparseable value in {}", s.stay_id)))?;
            let gap = crate::metrics::minutes_since_prev(&s.events, &e.description, e.offset_minutes);
            let point = |yhat: f64| ScoredPoint {
                item: e.description.clone(),
                y,
                yhat,
                minutes_since_prev: gap,
            };
            last.push(point(naive_predict(&s.events, &e.description, e.offset_minutes, means)?));
            mean.push(point(naive_mean_predict(&s.events, &e.description, e.offset_minutes, means)?));
        }
    }
    Ok((last, mean))
}

pub fn units_of(stays: &[IcuStay]) -> BTreeMap<String, String> {
    stays
        .iter()
        .flat_map(|s| s.lab_events())
        .filter_map(|(_, e)| e.unit.clone().map(|u| (e.description.clone(), u)))
        .collect()
}

/// Score a prediction run against both baselines.
pub fn evaluate_predictions(run: &PredictionRun, stays: &[IcuStay], means: &TrainingMeans, fallback: bool, split: &str) -> Result<EvaluationSummary> {
    let (naive, naive_mean) = baseline_points(stays, means)?;
    let scales = metric_scales(naive.iter().map(|p| (p.item.as_str(), p.y)));
    let units = units_of(stays);
    let model = run.scored_points(fallback.then_some(means))?;
    let methods = [("model", &model), ("naive", &naive), ("naive_mean", &naive_mean)]
        .into_iter()
        .map(|(name, pts)| MethodReport {
            method: name.to_string(),
            report: stratified_report(pts, &scales, &units),
        })
        .collect();
    Ok(EvaluationSummary {
        split: split.to_string(),
        n_targets: run.records.len(),
        n_failed: run.n_failed,
        failure_rate: run.failure_rate(),
        n_unit_mismatch: run.n_unit_mismatch,
        n_truncated_prompts: run.n_truncated_prompts,
        fallback,
        methods,
    })
}

/// Which report files `evaluate_run` writes next to `predictions.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    Both,
}

impl ReportFormat {
    fn csv(self) -> bool {
        self != ReportFormat::Json
    }

    fn json(self) -> bool {
        self != ReportFormat::Csv
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "both" => Ok(ReportFormat::Both),
            _ => Err(Error::Config(format!("report format {s:?}; expected csv, json or both"))),
        }
    }
}

/// Predict every lab event of `split` with the run's best checkpoint and
/// write predictions plus the selected reports.
pub fn evaluate_run(cfg: &RunConfig, split: &str, format: ReportFormat) -> Result<EvaluationSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let rep = Representation::load(cfg, out)?;
    let ck = read_checkpoint(out.join(MODEL_FILE))?;
    let stays = load_split(&cfg.data_dir, split)?;
    let train_stays = load_split(&cfg.data_dir, "train")?;
    let means = TrainingMeans::from_stays(&train_stays);
    let opts = PredictOptions {
        assembly: rep.assembly(cfg),
        max_new_tokens: cfg.eval.max_new_tokens,
    };
    let run = predict_all(&ck, &rep.vocab, &stays, &opts)?;
    let summary = evaluate_predictions(&run, &stays, &means, cfg.eval.fallback, split)?;
    io_write(&out.join(PREDICTIONS_FILE), predictions_csv(&run.records))?;
    if format.csv() {
        io_write(&out.join(REPORT_FILE), summary.to_csv())?;
    }
    if format.json() {
        let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Other(e.to_string()))?;
        io_write(&out.join(SUMMARY_FILE), json)?;
    }
    Ok(summary)
}

/// Axes of an ablation matrix; each leg is one point of the cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationAxes {
    pub value_modes: Vec<ValueMode>,
    pub time_modes: Vec<crate::textualize::TimeMode>,
    pub loss_modes: Vec<crate::train::LossMode>,
    pub event_sets: Vec<crate::textualize::EventFilter>,
    pub seeds: Vec<u64>,
}

impl AblationAxes {
    /// Only the base config's settings.
    pub fn single(base: &RunConfig) -> Self {
        AblationAxes {
            value_modes: vec![base.value_mode],
            time_modes: vec![base.time_mode],
            loss_modes: vec![base.loss_mode],
            event_sets: vec![base.events.clone()],
            seeds: vec![base.seed],
        }
    }

    pub fn legs(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let mut legs = Vec::new();
        for &v in &self.value_modes {
            for &t in &self.time_modes {
                for &l in &self.loss_modes {
                    for e in &self.event_sets {
                        for &s in &self.seeds {
                            let name = format!("{v}_{t}_{l}_{e}_s{s}");
                            let cfg = RunConfig {
                                seed: s,
                                value_mode: v,
                                time_mode: t,
                                loss_mode: l,
                                events: e.clone(),
                                out_dir: base.out_dir.join(&name),
                                ..base.clone()
                            };
                            legs.push((name, cfg));
                        }
                    }
                }
            }
        }
        legs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub leg: String,
    pub value_mode: String,
    pub time_mode: String,
    pub loss_mode: String,
    pub events: String,
    pub seed: u64,
    pub epochs: Option<u32>,
    pub best_val_loss: Option<f64>,
    pub macro_nmae: Option<f64>,
    pub macro_smape: Option<f64>,
    pub weighted_smape: Option<f64>,
    pub failure_rate: Option<f64>,
    pub naive_mean_smape: Option<f64>,
    /// `ok` or the error that stopped the leg.
    pub status: String,
}

pub const ABLATION_HEADER: &str =
    "leg,value_mode,time_mode,loss_mode,events,seed,epochs,best_val_loss,macro_nmae,macro_smape,weighted_smape,failure_rate,naive_mean_smape,status";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let o = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.leg,
            self.value_mode,
            self.time_mode,
            self.loss_mode,
            self.events,
            self.seed,
            self.epochs.map(|e| e.to_string()).unwrap_or_default(),
            o(self.best_val_loss),
            o(self.macro_nmae),
            o(self.macro_smape),
            o(self.weighted_smape),
            o(self.failure_rate),
            o(self.naive_mean_smape),
            self.status.replace([',', '\n'], ";")
        )
    }
}

/// Train and evaluate one leg.
pub fn run_leg(name: &str, cfg: &RunConfig) -> AblationRow {
    let mut row = AblationRow {
        leg: name.to_string(),
        value_mode: cfg.value_mode.to_string(),
        time_mode: cfg.time_mode.to_string(),
        loss_mode: cfg.loss_mode.to_string(),
        events: cfg.events.to_string(),
        seed: cfg.seed,
        epochs: None,
        best_val_loss: None,
        macro_nmae: None,
        macro_smape: None,
        weighted_smape: None,
        failure_rate: None,
        naive_mean_smape: None,
        status: "ok".into(),
    };
    let result = train_run(cfg, false).and_then(|t| {
        row.epochs = Some(t.epochs);
        row.best_val_loss = t.best_val_loss;
        evaluate_run(cfg, "test", ReportFormat::Both)
    });
    match result {
        Ok(s) => {
            let m = &s.method("model").expect("model row").overall;
            row.macro_nmae = m.macro_nmae;
            row.macro_smape = m.macro_smape;
            row.weighted_smape = m.weighted_smape;
            row.failure_rate = Some(s.failure_rate);
            row.naive_mean_smape = s.method("naive_mean").and_then(|r| r.overall.macro_smape);
        }
        Err(e) => {
            log::error!("leg {name} failed: {e}");
            row.status = format!("failed: {e}");
        }
    }
    row
}

/// Run every leg in order, writing `ablation.csv` after each one. A failing
/// leg is recorded and the rest still run.
pub fn ablate(base: &RunConfig, axes: &AblationAxes) -> Result<Vec<AblationRow>> {
    ensure_dir(&base.out_dir)?;
    let path = base.out_dir.join("ablation.csv");
    let mut rows = Vec::new();
    for (name, cfg) in axes.legs(base) {
        log::info!("ablation leg {name}");
        rows.push(run_leg(&name, &cfg));
        let mut csv = format!("{ABLATION_HEADER}\n");
        for r in &rows {
            csv.push_str(&r.csv_line());
            csv.push('\n');
        }
        io_write(&path, csv)?;
    }
    Ok(rows)
}

/// Event-level attention of the model's prediction for one lab event.
/// `target` is the event ordinal; the stay's last lab event when `None`.
pub fn attention_table(cfg: &RunConfig, split: &str, stay_id: &str, target: Option<usize>) -> Result<String> {
    let rep = Representation::load(cfg, &cfg.out_dir)?;
    let ck = read_checkpoint(cfg.out_dir.join(MODEL_FILE))?;
    if ck.vocab_hash != rep.vocab.hash() {
        return Err(Error::VocabMismatch {
            checkpoint: ck.vocab_hash,
            tokenizer: rep.vocab.hash(),
        });
    }
    let stays = load_split(&cfg.data_dir, split)?;
    let stay = stays
        .iter()
        .find(|s| s.stay_id == stay_id)
        .ok_or_else(|| Error::Validation(format!("stay {stay_id:?} not in the {split} split")))?;
    let opts = rep.assembly(cfg);
    let budget = ck.params.config.max_seq_len - cfg.eval.max_new_tokens;
    let prompts = build_prompts(stay, &rep.vocab, budget, &opts)?;
    let prompt = match target {
        Some(k) => prompts.iter().find(|p| p.target == k),
        None => prompts.last(),
    }
    .ok_or_else(|| Error::Validation(format!("no lab event {target:?} in stay {stay_id:?}")))?;

    let mut model = CachedModel::new(&ck.params);
    let first = model.start(&prompt.ids)?;
    let gen = greedy_decode(&mut model, first, cfg.eval.max_new_tokens)?;
    let summary = attention_summary(&ck.params, prompt, &gen.ids, gen.terminated)?;

    let mut out = String::from("event_ordinal,offset_min,type,description,value,score\n");
    for (ordinal, score) in &summary.event_scores {
        let e = &stay.events[*ordinal];
        let _ = writeln!(
            out,
            "{ordinal},{},{},{},{},{score:.6}",
            e.offset_minutes,
            e.event_type,
            e.description,
            e.value.as_deref().unwrap_or("")
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
