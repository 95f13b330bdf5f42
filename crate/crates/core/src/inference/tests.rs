use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::ehr::{parse_datetime, Demographics, EventType, Gender, MedicalEvent};
use crate::metrics::quantile_fit;
use crate::model::ModelConfig;
use crate::textualize::{assemble_sequence, EventFilter, TokenRole};
use crate::train::CheckpointMeta;
use crate::vocab::build_vocab;

fn lab(t: u32, name: &str, v: &str, unit: &str) -> MedicalEvent {
    MedicalEvent {
        offset_minutes: t,
        event_type: EventType::LabEvent,
        code: name.to_lowercase(),
        description: name.into(),
        value: Some(v.into()),
        unit: Some(unit.into()),
    }
}

fn drug(t: u32, name: &str) -> MedicalEvent {
    MedicalEvent {
        offset_minutes: t,
        event_type: EventType::Medication,
        code: "rx".into(),
        description: name.into(),
        value: None,
        unit: None,
    }
}

fn stay(id: &str, events: Vec<MedicalEvent>) -> IcuStay {
    IcuStay {
        stay_id: id.into(),
        patient_id: "p".into(),
        admit_datetime: parse_datetime("2150-03-04T08:00").unwrap(),
        demographics: Demographics {
            gender: Gender::M,
            age: 71,
            race: "White".into(),
        },
        events,
    }
}

fn fixture() -> IcuStay {
    stay(
        "s1",
        vec![
            lab(0, "Glucose", "120", "mg/dL"),
            drug(30, "Insulin"),
            lab(90, "Potassium", "4.1", "mEq/L"),
            lab(90, "Sodium", "139", "mEq/L"),
            lab(400, "Glucose", "98", "mg/dL"),
        ],
    )
}

fn vocab_for(stays: &[IcuStay]) -> Vocabulary {
    let recs: Vec<_> = stays.iter().map(|s| assemble_sequence(s, None, &AssemblyOptions::default()).unwrap()).collect();
    build_vocab(&recs)
}

fn strs(v: &Vocabulary, ids: &[TokenId]) -> Vec<String> {
    v.decode(ids).unwrap()
}

#[test]
fn one_prompt_per_lab() {
    let s = stay("a", vec![lab(0, "A", "1", "u"), lab(60, "B", "2", "u"), drug(70, "X"), lab(80, "A", "3", "u")]);
    let v = vocab_for(&[s.clone()]);
    let prompts = build_prompts(&s, &v, 512, &AssemblyOptions::default()).unwrap();
    assert_eq!(prompts.len(), 3);
    assert_eq!(prompts.iter().map(|p| p.target).collect::<Vec<_>>(), vec![0, 1, 3]);
}

#[test]
fn target_at_offset_zero_has_only_demographics() {
    let s = fixture();
    let v = vocab_for(&[s.clone()]);
    let p = &build_prompts(&s, &v, 512, &AssemblyOptions::default()).unwrap()[0];
    assert_eq!(
        strs(&v, &p.ids),
        ["gender", "m", "age", "7", "1", "race", "white", "[DAY1]", "[WED]", "[8h]", "[00m]", "labevent", "glucose"]
    );
    assert_eq!(p.history().count(), 0);
    assert_eq!(p.header_start(), 7);
}

#[test]
fn simultaneous_labs_do_not_see_each_other() {
    let s = fixture();
    let v = vocab_for(&[s.clone()]);
    let prompts = build_prompts(&s, &v, 512, &AssemblyOptions::default()).unwrap();
    let (k, na) = (&prompts[1], &prompts[2]);
    assert_eq!((k.item.as_str(), na.item.as_str()), ("Potassium", "Sodium"));
    for p in [k, na] {
        let text = strs(&v, &p.ids);
        assert!(!text.contains(&"potassium".to_string()) || p.item == "Potassium");
        assert!(!text.contains(&"sodium".to_string()) || p.item == "Sodium");
        assert_eq!(p.history().map(|s| s.ordinal.unwrap()).collect::<Vec<_>>(), vec![0, 1]);
    }
}

#[test]
fn no_target_value_leaks_into_prompt() {
    let s = fixture();
    let v = vocab_for(&[s.clone()]);
    let recs = assemble_sequence(&s, None, &AssemblyOptions::default()).unwrap();
    for p in build_prompts(&s, &v, 512, &AssemblyOptions::default()).unwrap() {
        // no token of the prompt belongs to the target event's value/unit/EOE
        let full = v.encode(&recs.tokens);
        let target_positions: Vec<usize> = (0..recs.len())
            .filter(|&i| recs.event_index[i] == Some(p.target) && matches!(recs.roles[i], TokenRole::Value | TokenRole::Unit | TokenRole::Eoe))
            .collect();
        let header = &p.ids[p.header_start()..];
        let header_pos = (0..full.len()).find(|&i| full[i..].starts_with(header)).unwrap();
        assert!(target_positions.iter().all(|&i| i >= header_pos + header.len()));
        assert_eq!(p.history().filter(|s| s.ordinal == Some(p.target)).count(), 0);
    }
}

#[test]
fn long_history_dropped_from_front() {
    let events: Vec<_> = (0..40).map(|i| lab(i * 30, "Glucose", "100", "mg/dL")).collect();
    let s = stay("long", events);
    let v = vocab_for(&[s.clone()]);
    let prompts = build_prompts(&s, &v, 60, &AssemblyOptions::default()).unwrap();
    let last = prompts.last().unwrap();
    assert!(last.ids.len() <= 60);
    assert!(last.dropped_events > 0);
    assert_eq!(&strs(&v, &last.ids)[..2], ["gender", "m"]);
    let kept: Vec<usize> = last.history().map(|s| s.ordinal.unwrap()).collect();
    assert_eq!(*kept.last().unwrap(), 38);
    assert!(kept.windows(2).all(|w| w[1] == w[0] + 1));
}

#[test]
fn relative_prompts_have_no_target_time() {
    let s = fixture();
    let opts = AssemblyOptions {
        time_mode: TimeMode::Relative,
        ..Default::default()
    };
    let recs = assemble_sequence(&s, None, &opts).unwrap();
    let v = build_vocab([&recs]);
    let p = &build_prompts(&s, &v, 512, &opts).unwrap()[3];
    let text = strs(&v, &p.ids);
    assert_eq!(&text[text.len() - 2..], ["labevent", "glucose"]);
    assert!(!text.iter().any(|t| t.starts_with("[DAY")));
}

#[test]
fn event_filter_removes_drugs_from_history() {
    let s = fixture();
    let v = vocab_for(&[s.clone()]);
    let opts = AssemblyOptions {
        events: EventFilter::labs_only(),
        ..Default::default()
    };
    let p = build_prompts(&s, &v, 512, &opts).unwrap().pop().unwrap();
    assert!(!strs(&v, &p.ids).contains(&"insulin".to_string()));
}

/// Emits a fixed script, then repeats its last token.
struct Scripted {
    vocab: usize,
    script: Vec<TokenId>,
    pos: usize,
}

impl Scripted {
    fn dist(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.vocab];
        p[self.script[self.pos.min(self.script.len() - 1)] as usize] = 1.0;
        p
    }
}

impl NextToken for Scripted {
    fn feed(&mut self, _: &[TokenId]) -> Result<Vec<f64>> {
        self.pos += 1;
        Ok(self.dist())
    }
}

fn scripted(v: &Vocabulary, script: &[&str]) -> Scripted {
    Scripted {
        vocab: v.len(),
        script: v.encode(script),
        pos: 0,
    }
}

fn meq_vocab() -> Vocabulary {
    let s = stay("x", vec![lab(0, "Bicarbonate", "24.0", "mEq/L")]);
    vocab_for(&[s])
}

#[test]
fn immediate_eoe_gives_empty_output() {
    let v = meq_vocab();
    let mut m = scripted(&v, &["[EOE]"]);
    let first = m.dist();
    let g = greedy_decode(&mut m, first, 24).unwrap();
    assert!(g.ids.is_empty());
    assert!(g.terminated);
    assert_eq!(g.step_probs.len(), 1);
}

#[test]
fn scripted_bicarbonate() {
    let v = meq_vocab();
    let mut m = scripted(&v, &["2", "4", ".", "0", "meq", "/", "l", "[EOE]"]);
    let first = m.dist();
    let g = greedy_decode(&mut m, first, 24).unwrap();
    let toks = v.decode(&g.ids).unwrap();
    assert_eq!(toks, ["2", "4", ".", "0", "meq", "/", "l"]);
    assert!(g.terminated);
    let parsed = parse_value(&toks);
    assert_eq!(parsed.value, Some(24.0));
    assert_eq!(parsed.unit, ["meq", "/", "l"]);
}

#[test]
fn endless_ones_hit_the_cap() {
    let v = meq_vocab();
    let mut m = scripted(&v, &["1"]);
    let first = m.dist();
    let g = greedy_decode(&mut m, first, 24).unwrap();
    assert_eq!(g.ids.len(), 24);
    assert!(!g.terminated);
}

#[test]
fn argmax_ties_prefer_smaller_id() {
    assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    assert_eq!(argmax(&[0.25; 4]), 0);
}

#[test]
fn parse_value_examples() {
    assert_eq!(parse_value(&["meq", "/", "l"]).value, None);
    assert_eq!(parse_value(&["-", "3", ".", "5"]).value, Some(-3.5));
    assert_eq!(parse_value(&["1", "2", ".", "mg"]).value, Some(12.0));
    assert_eq!(parse_value(&["1", "2", ".", "mg"]).unit, [".", "mg"]);
    assert_eq!(parse_value(&["-"]).value, None);
    assert_eq!(parse_value::<&str>(&[]).value, None);
}

#[test]
fn uncertainty_examples() {
    let onehot = vec![0.0, 1.0, 0.0];
    assert_eq!(uncertainty(&[onehot.clone(), onehot.clone()]).unwrap(), 0.0);
    let uniform = vec![0.1; 10];
    assert!((uncertainty(&[uniform.clone()]).unwrap() - 10f64.ln()).abs() < 1e-12);
    assert!((uncertainty(&[vec![1.0, 0.0], uniform]).unwrap() - 1.151_292_546_497_022_8).abs() < 1e-9);
    assert!(uncertainty(&[vec![0.5, 0.4]]).is_err());
}

proptest! {
    #[test]
    fn parse_inverts_textualized_values(neg in any::<bool>(), int in 0u32..100_000, frac in prop::option::of(0u32..100), two in any::<bool>()) {
        let mut s = if neg { "-".to_string() } else { String::new() };
        s.push_str(&int.to_string());
        if let Some(f) = frac {
            if two { s.push_str(&format!(".{:02}", f)) } else { s.push_str(&format!(".{}", f % 10)) }
        }
        let (tokens, _) = crate::textualize::textualize_event(&lab(0, "X", &s, "mg/dL")).unwrap();
        let value_tokens: Vec<&String> = tokens[2..].iter().collect();
        let parsed = parse_value(&value_tokens);
        prop_assert_eq!(&parsed.text, &s);
        prop_assert_eq!(parsed.value, Some(s.parse::<f64>().unwrap()));
    }
}

fn tiny_checkpoint(v: &Vocabulary, seed: u64) -> Checkpoint {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        max_seq_len: 96,
        vocab_size: v.len(),
        dropout: 0.0,
    };
    Checkpoint {
        params: ModelParams::init(cfg, seed).unwrap(),
        vocab_hash: v.hash(),
        meta: CheckpointMeta::default(),
        adam: None,
    }
}

#[test]
fn predict_all_matches_fresh_decoding() {
    let stays = vec![fixture(), stay("s2", vec![lab(5, "Sodium", "141", "mEq/L"), lab(600, "Glucose", "101", "mg/dL")])];
    let v = vocab_for(&stays);
    let ck = tiny_checkpoint(&v, 3);
    let opts = PredictOptions::new(AssemblyOptions::default());
    let run = predict_all(&ck, &v, &stays, &opts).unwrap();
    assert_eq!(run.records.len(), 6);
    let mut i = 0;
    for s in &stays {
        for p in build_prompts(s, &v, 96 - 24, &AssemblyOptions::default()).unwrap() {
            let mut fresh = CachedModel::new(&ck.params);
            let first = fresh.start(&p.ids).unwrap();
            let g = greedy_decode(&mut fresh, first, 24).unwrap();
            let r = &run.records[i];
            assert_eq!(r.generated, v.decode(&g.ids).unwrap());
            assert_eq!(r.failed, r.y_pred.is_none());
            assert!((r.entropy_nats - uncertainty(&g.step_probs).unwrap()).abs() < 1e-6);
            i += 1;
        }
    }
    assert_eq!(run.n_failed, run.records.iter().filter(|r| r.failed).count());
}

#[test]
fn vocab_mismatch_rejected() {
    let stays = vec![fixture()];
    let v = vocab_for(&stays);
    let mut ck = tiny_checkpoint(&v, 1);
    ck.vocab_hash = "other".into();
    let err = predict_all(&ck, &v, &stays, &PredictOptions::new(AssemblyOptions::default())).unwrap_err();
    assert!(matches!(err, Error::VocabMismatch { .. }));
}

#[test]
fn no_labs_no_records() {
    let stays = vec![stay("d", vec![drug(0, "Insulin"), drug(400, "Insulin")])];
    let v = vocab_for(&stays);
    let run = predict_all(&tiny_checkpoint(&v, 1), &v, &stays, &PredictOptions::new(AssemblyOptions::default())).unwrap();
    assert!(run.records.is_empty());
    assert_eq!(run.failure_rate(), 0.0);
}

#[test]
fn failure_bookkeeping_and_fallback() {
    let rec = |i: usize, pred: Option<f64>| PredictionRecord {
        stay_id: format!("s{i}"),
        item: "Glucose".into(),
        offset_minutes: 0,
        y_true: 100.0,
        y_pred: pred,
        failed: pred.is_none(),
        generated: vec![],
        terminated: true,
        entropy_nats: 0.0,
        minutes_since_prev: None,
        unit_mismatch: false,
    };
    let run = PredictionRun {
        records: (0..10).map(|i| rec(i, (i != 3).then_some(100.0))).collect(),
        n_failed: 1,
        ..Default::default()
    };
    assert_eq!(run.failure_rate(), 0.1);
    assert_eq!(run.scored_points(None).unwrap().len(), 9);
    let means = TrainingMeans(BTreeMap::from([("Glucose".to_string(), 95.2)]));
    let pts = run.scored_points(Some(&means)).unwrap();
    assert_eq!(pts.len(), 10);
    assert_eq!(pts[3].yhat, 95.2);
}

#[test]
fn quantile_mode_uses_expectation() {
    let stays = vec![fixture()];
    let values = BTreeMap::from([
        ("Glucose".to_string(), (1..=100).map(f64::from).collect::<Vec<_>>()),
        ("Potassium".to_string(), (1..=100).map(f64::from).collect()),
        ("Sodium".to_string(), (1..=100).map(f64::from).collect()),
    ]);
    let binning = quantile_fit(&values, 5).unwrap();
    let opts = AssemblyOptions {
        values: ValueEncoding::Quantile(&binning),
        ..Default::default()
    };
    let recs: Vec<_> = stays.iter().map(|s| assemble_sequence(s, None, &opts).unwrap()).collect();
    let v = build_vocab(&recs);
    let ck = tiny_checkpoint(&v, 2);
    let run = predict_all(&ck, &v, &stays, &PredictOptions::new(opts)).unwrap();
    for r in &run.records {
        let y = r.y_pred.expect("expectation always defined");
        assert!((10.5..=90.5).contains(&y), "{y}");
    }
}

#[test]
fn predictions_csv_layout() {
    let r = PredictionRecord {
        stay_id: "s".into(),
        item: "Glucose".into(),
        offset_minutes: 90,
        y_true: 101.0,
        y_pred: None,
        failed: true,
        generated: vec![],
        terminated: false,
        entropy_nats: 0.5,
        minutes_since_prev: Some(30),
        unit_mismatch: false,
    };
    let csv = predictions_csv(&[r]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], PREDICTIONS_HEADER);
    assert_eq!(lines[1], "s,Glucose,90,101,,1,0.500000,30");
}

fn constant_maps(values: &[f64], n: usize) -> Vec<Vec<Vec<f64>>> {
    // one head per layer; every causal row is the same pattern renormalised
    values
        .iter()
        .map(|&w| {
            let mut m = vec![0.0; n * n];
            for r in 0..n {
                let weights: Vec<f64> = (0..=r).map(|c| if c == 0 { w } else { 1.0 }).collect();
                let s: f64 = weights.iter().sum();
                for c in 0..=r {
                    m[r * n + c] = weights[c] / s;
                }
            }
            vec![m]
        })
        .collect()
}

#[test]
fn single_layer_single_head_is_identity() {
    let maps = constant_maps(&[3.0], 4);
    let spans = [PromptSpan { ordinal: Some(0), start: 0, end: 3 }];
    let s = aggregate_attention(&maps, 4, 2..4, 3, &spans).unwrap();
    assert_eq!(s.a_final[0], maps[0][0][8..12]);
    assert_eq!(s.a_final[1], maps[0][0][12..16]);
    assert_eq!(s.event_scores, vec![(0, 1.0)]);
}

#[test]
fn two_layers_average_elementwise() {
    let maps = vec![vec![vec![1.0, 0.0, 0.5, 0.5]], vec![vec![1.0, 0.0, 0.9, 0.1]]];
    let s = aggregate_attention(&maps, 2, 1..2, 2, &[]).unwrap();
    assert_eq!(s.a_final, vec![vec![0.7, 0.3]]);
    assert!(s.event_scores.is_empty());
}

#[test]
fn heads_then_layers() {
    // layer 0 has two heads, layer 1 one head: heads average first
    let maps = vec![vec![vec![1.0, 0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]], vec![vec![1.0, 0.0, 1.0, 0.0]]];
    let s = aggregate_attention(&maps, 2, 1..2, 2, &[]).unwrap();
    assert_eq!(s.a_final, vec![vec![0.75, 0.25]]);
}

#[test]
fn model_attention_summary_is_normalised() {
    let stays = vec![fixture()];
    let v = vocab_for(&stays);
    let ck = tiny_checkpoint(&v, 5);
    let prompts = build_prompts(&stays[0], &v, 72, &AssemblyOptions::default()).unwrap();
    let p = prompts.last().unwrap();
    let gen = v.encode(&["9", "8", "mg"]);
    let s = attention_summary(&ck.params, p, &gen, true).unwrap();
    assert_eq!((s.n_layers, s.n_heads), (2, 2));
    assert_eq!(s.a_final.len(), 4);
    for row in &s.a_final {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let total: f64 = s.event_scores.iter().map(|e| e.1).sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert!(s.event_scores.iter().all(|e| e.1 >= 0.0));
    assert_eq!(s.event_scores.len(), p.history().count());
}
