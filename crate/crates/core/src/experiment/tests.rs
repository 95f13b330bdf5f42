use super::*;
use crate::ehr::EventType;
use crate::textualize::{EventFilter, TimeMode};
use crate::train::LossMode;

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 3,
        data_dir: dir.join("data"),
        out_dir: dir.join("run"),
        ..RunConfig::default()
    };
    cfg.data.synthetic.n_patients = 12;
    cfg.data.synthetic.stays_per_patient = (1, 1);
    cfg.data.synthetic.stay_hours = (6, 8);
    cfg.data.split = (0.5, 0.25, 0.25);
    cfg.model = ModelSpec {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        max_seq_len: 128,
        dropout: 0.0,
    };
    cfg.train.max_epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.lr = 1e-3;
    cfg.train.warmup_steps = 2;
    cfg.eval.max_new_tokens = 8;
    cfg
}

#[test]
fn gen_data_splits_by_patient() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let counts = gen_data(&cfg.data, &cfg.data_dir).unwrap();
    assert_eq!(counts.iter().map(|c| c.split.as_str()).collect::<Vec<_>>(), SPLITS);
    assert_eq!(counts.iter().map(|c| c.patients).sum::<usize>(), 12);
    assert_eq!(counts.iter().map(|c| c.patients).collect::<Vec<_>>(), [6, 3, 3]);
    for c in &counts {
        let stays = load_split(&cfg.data_dir, &c.split).unwrap();
        assert_eq!(stays.len(), c.stays);
        assert!(c.lab_events > 0 && c.events >= c.lab_events);
    }
    let again = tempfile::tempdir().unwrap();
    gen_data(&cfg.data, again.path()).unwrap();
    for s in SPLITS {
        assert_eq!(fs::read(split_path(&cfg.data_dir, s)).unwrap(), fs::read(split_path(again.path(), s)).unwrap());
    }
}

#[test]
fn representation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    gen_data(&cfg.data, &cfg.data_dir).unwrap();
    let train_stays = load_split(&cfg.data_dir, "train").unwrap();
    for mode in [ValueMode::Digit, ValueMode::Quantile(10)] {
        cfg.value_mode = mode;
        let out = dir.path().join(mode.to_string());
        let rep = Representation::load_or_fit(&cfg, &out, &train_stays).unwrap();
        assert_eq!(rep.binning.is_some(), mode != ValueMode::Digit);
        assert_eq!(out.join(BINNING_FILE).exists(), rep.binning.is_some());
        let back = Representation::load(&cfg, &out).unwrap();
        assert_eq!(back.vocab, rep.vocab);
        assert_eq!(back.binning, rep.binning);
    }
    let digits = Vocabulary::load(dir.path().join("digit").join(VOCAB_FILE)).unwrap();
    let quant = Vocabulary::load(dir.path().join("quantile-10").join(VOCAB_FILE)).unwrap();
    // Quantile tokens are reserved in both, so the two share their prefix.
    assert!(digits.id("[Q19]").is_some() && quant.id("[Q19]").is_some());
    assert_eq!(digits.n_reserved(), quant.n_reserved());
    cfg.value_mode = ValueMode::Quantile(5);
    assert!(Representation::load(&cfg, &dir.path().join("quantile-10")).is_err());
}

#[test]
fn train_evaluate_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    gen_data(&cfg.data, &cfg.data_dir).unwrap();
    let first = train_run(&cfg, false).unwrap();
    assert_eq!(first.epochs, 2);
    assert_eq!(first.history.len(), 2);
    let log = fs::read_to_string(cfg.out_dir.join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with(TRAIN_LOG_HEADER));
    let ck = read_checkpoint(cfg.out_dir.join(MODEL_FILE)).unwrap();
    assert!(ck.adam.is_none());
    assert_eq!(ck.meta.run["seed"], "3");
    assert_eq!(ck.meta.run["value_mode"], "digit");

    let mut more = cfg.clone();
    more.train.max_epochs = 3;
    let second = train_run(&more, true).unwrap();
    assert_eq!(second.epochs, 3);
    assert_eq!(second.history.len(), 1);
    assert!(second.steps > first.steps);
    let log = fs::read_to_string(cfg.out_dir.join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 4);

    let summary = evaluate_run(&cfg, "test", ReportFormat::Both).unwrap();
    let test = load_split(&cfg.data_dir, "test").unwrap();
    let n_labs: usize = test.iter().map(|s| s.lab_events().count()).sum();
    assert_eq!(summary.n_targets, n_labs);
    assert_eq!(summary.methods.len(), 3);
    let naive = summary.method("naive").unwrap();
    assert_eq!(naive.overall.count, n_labs);
    let preds = fs::read_to_string(cfg.out_dir.join(PREDICTIONS_FILE)).unwrap();
    assert_eq!(preds.lines().count(), n_labs + 1);
    let report = fs::read_to_string(cfg.out_dir.join(REPORT_FILE)).unwrap();
    assert!(report.starts_with(CSV_HEADER));
    assert!(report.contains("naive_mean,all,MACRO"));
    let json: EvaluationSummary = serde_json::from_str(&fs::read_to_string(cfg.out_dir.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(json, summary);
    assert!(summary.table().contains("naive_mean"));

    let mut json_only = cfg.clone();
    json_only.out_dir = dir.path().join("json_only");
    fs::create_dir_all(&json_only.out_dir).unwrap();
    for f in [VOCAB_FILE, MODEL_FILE] {
        fs::copy(cfg.out_dir.join(f), json_only.out_dir.join(f)).unwrap();
    }
    let again = evaluate_run(&json_only, "test", ReportFormat::Json).unwrap();
    assert_eq!(again, summary);
    assert!(json_only.out_dir.join(SUMMARY_FILE).exists() && !json_only.out_dir.join(REPORT_FILE).exists());
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.max_epochs = 1;
    gen_data(&cfg.data, &cfg.data_dir).unwrap();
    let a = train_run(&cfg, false).unwrap();
    let bytes_a = fs::read(cfg.out_dir.join(MODEL_FILE)).unwrap();
    cfg.out_dir = dir.path().join("again");
    let b = train_run(&cfg, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(bytes_a, fs::read(cfg.out_dir.join(MODEL_FILE)).unwrap());
}

#[test]
fn ablation_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.max_epochs = 1;
    gen_data(&cfg.data, &cfg.data_dir).unwrap();
    let axes = AblationAxes {
        value_modes: vec![ValueMode::Digit],
        time_modes: vec![TimeMode::Absolute],
        loss_modes: vec![LossMode::LabOnly],
        event_sets: vec![EventFilter::labs_only(), EventFilter::from_types([EventType::Medication])],
        seeds: vec![1, 2],
    };
    let legs = axes.legs(&cfg);
    assert_eq!(legs.len(), 4);
    // A stray file where the third leg's output directory should go.
    fs::create_dir_all(&cfg.out_dir).unwrap();
    fs::write(cfg.out_dir.join(&legs[2].0), "x").unwrap();
    let rows = ablate(&cfg, &axes).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[2].status.starts_with("failed"));
    assert!(rows.iter().enumerate().all(|(i, r)| i == 2 || r.status == "ok"));
    assert!(rows[0].macro_smape.is_some() && rows[2].macro_smape.is_none());
    let csv = fs::read_to_string(cfg.out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with(ABLATION_HEADER));
}

#[test]
fn attention_table_sums_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.max_epochs = 1;
    gen_data(&cfg.data, &cfg.data_dir).unwrap();
    train_run(&cfg, false).unwrap();
    let stay = &load_split(&cfg.data_dir, "test").unwrap()[0];
    let csv = attention_table(&cfg, "test", &stay.stay_id, None).unwrap();
    let scores: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(!scores.is_empty());
    assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    assert!(attention_table(&cfg, "test", "nope", None).is_err());
}
