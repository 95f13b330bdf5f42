//! Stay → token stream conversion with per-token roles.
//!
//! A stay becomes `demographics ∥ (time ∥ event ∥ [EOE])*` in absolute time
//! mode, or `demographics ∥ (event ∥ interval ∥ [EOE])*` in relative mode.
//! Roles drive the training loss mask and inference-time prompt cutting.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike, Weekday};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{Demographics, EventType, IcuStay, MedicalEvent};
use crate::error::{Error, Result};
use crate::metrics::QuantileBinning;

pub const PAD: &str = "[PAD]";
pub const EOE: &str = "[EOE]";
pub const UNK: &str = "[UNK]";

/// Day tokens stop at this index; later days clamp to it.
pub const MAX_DAY: u32 = 60;
/// Number of reserved quantile tokens `[Q0]..[Q19]`.
pub const MAX_QUANTILES: usize = 20;

const WEEKDAYS: [&str; 7] = ["[MON]", "[TUE]", "[WED]", "[THU]", "[FRI]", "[SAT]", "[SUN]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    Demo,
    Time,
    EventType,
    ItemText,
    Value,
    Unit,
    Eoe,
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    #[default]
    Absolute,
    Relative,
}

impl FromStr for TimeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(TimeMode::Absolute),
            "relative" => Ok(TimeMode::Relative),
            _ => Err(Error::Config(format!("time mode {s:?}; expected absolute or relative"))),
        }
    }
}

impl fmt::Display for TimeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeMode::Absolute => "absolute",
            TimeMode::Relative => "relative",
        })
    }
}

/// How lab values are written into the stream.
#[derive(Debug, Clone, Copy, Default)]
pub enum ValueEncoding<'a> {
    #[default]
    Digits,
    /// One `[Qk]` token per lab value; items without a fitted binning keep digits.
    Quantile(&'a QuantileBinning),
}

/// Event types kept when assembling sequences. Lab events are always kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventFilter(BTreeSet<EventType>);

impl EventFilter {
    pub fn all() -> Self {
        EventFilter(EventType::ALL.into_iter().collect())
    }

    pub fn labs_only() -> Self {
        EventFilter([EventType::LabEvent].into_iter().collect())
    }

    pub fn from_types(types: impl IntoIterator<Item = EventType>) -> Self {
        let mut set: BTreeSet<_> = types.into_iter().collect();
        set.insert(EventType::LabEvent);
        EventFilter(set)
    }

    pub fn contains(&self, t: EventType) -> bool {
        t == EventType::LabEvent || self.0.contains(&t)
    }

    pub fn types(&self) -> impl Iterator<Item = EventType> + '_ {
        self.0.iter().copied()
    }
}

impl Default for EventFilter {
    fn default() -> Self {
        Self::all()
    }
}

impl fmt::Display for EventFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.0.iter().map(|t| t.as_str()).collect();
        f.write_str(&names.join("+"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssemblyOptions<'a> {
    pub time_mode: TimeMode,
    pub values: ValueEncoding<'a>,
    pub events: EventFilter,
}

/// `all`, or event type names joined by `+`, e.g. `labevent+medication`.
impl FromStr for EventFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(EventFilter::all());
        }
        let types = s
            .split('+')
            .map(|t| EventType::parse(t.trim()).ok_or_else(|| Error::Config(format!("unknown event type {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(EventFilter::from_types(types))
    }
}

/// Four absolute-time tokens for one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeTokens {
    pub day: u32,
    pub weekday: Weekday,
    pub hour: u32,
    pub minute_bucket: u32,
}

impl TimeTokens {
    pub fn tokens(&self) -> [String; 4] {
        [
            format!("[DAY{}]", self.day),
            WEEKDAYS[self.weekday.num_days_from_monday() as usize].to_string(),
            format!("[{}h]", self.hour),
            format!("[{:02}m]", self.minute_bucket),
        ]
    }
}

pub fn encode_time(admit: NaiveDateTime, offset_minutes: u32) -> TimeTokens {
    let mut day = offset_minutes / 1440 + 1;
    if day > MAX_DAY {
        log::warn!("offset {offset_minutes} min is past day {MAX_DAY}; clamping day token");
        day = MAX_DAY;
    }
    let wall = admit + Duration::minutes(i64::from(offset_minutes));
    TimeTokens {
        day,
        weekday: wall.weekday(),
        hour: wall.hour(),
        minute_bucket: wall.minute() / 10 * 10,
    }
}

/// Digit-split minutes since the previous event (`"0"` for the first).
pub fn encode_relative_time(prev: Option<u32>, cur: u32) -> Result<Vec<String>> {
    let delta = match prev {
        Some(p) if cur < p => {
            return Err(Error::Validation(format!("event at {cur} precedes previous event at {p}")));
        }
        Some(p) => cur - p,
        None => 0,
    };
    Ok(split_chars(&delta.to_string()))
}

fn split_chars(s: &str) -> Vec<String> {
    s.chars().map(String::from).collect()
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(str::to_lowercase)
}

/// Lower-cased unit split on `/`, keeping the slash as its own token.
pub fn unit_tokens(unit: &str) -> Vec<String> {
    let lower = unit.trim().to_lowercase();
    let mut out = Vec::new();
    for (i, part) in lower.split('/').enumerate() {
        if i > 0 {
            out.push("/".to_string());
        }
        if !part.is_empty() {
            out.push(part.to_string());
        }
    }
    out
}

/// `[Qk]`
pub fn quantile_token(bin: usize) -> String {
    format!("[Q{bin}]")
}

pub fn quantile_index(token: &str) -> Option<usize> {
    token.strip_prefix("[Q")?.strip_suffix(']')?.parse().ok()
}

fn push(tokens: &mut Vec<String>, roles: &mut Vec<TokenRole>, token: String, role: TokenRole) {
    tokens.push(token);
    roles.push(role);
}

/// Event type and item words: the part of an event known before its value.
pub fn event_header(event: &MedicalEvent) -> (Vec<String>, Vec<TokenRole>) {
    let mut tokens = vec![event.event_type.as_str().to_string()];
    let mut roles = vec![TokenRole::EventType];
    for w in words(&event.description) {
        push(&mut tokens, &mut roles, w, TokenRole::ItemText);
    }
    (tokens, roles)
}

fn event_body(event: &MedicalEvent, values: ValueEncoding<'_>) -> Result<(Vec<String>, Vec<TokenRole>)> {
    event.validate()?;
    let (mut tokens, mut roles) = event_header(event);
    if let Some(v) = &event.value {
        let bin = match values {
            ValueEncoding::Quantile(binning) if event.is_lab() => {
                let x = event.numeric_value().expect("validated value");
                binning.bin_of(&event.description, x)
            }
            _ => None,
        };
        match bin {
            Some(q) => push(&mut tokens, &mut roles, quantile_token(q), TokenRole::Value),
            None => {
                for c in split_chars(v) {
                    push(&mut tokens, &mut roles, c, TokenRole::Value);
                }
            }
        }
    }
    if let Some(u) = &event.unit {
        for t in unit_tokens(u) {
            push(&mut tokens, &mut roles, t, TokenRole::Unit);
        }
    }
    Ok((tokens, roles))
}

/// Event words, value characters, unit and the closing `[EOE]`.
pub fn textualize_event(event: &MedicalEvent) -> Result<(Vec<String>, Vec<TokenRole>)> {
    let (mut tokens, mut roles) = event_body(event, ValueEncoding::Digits)?;
    push(&mut tokens, &mut roles, EOE.into(), TokenRole::Eoe);
    Ok((tokens, roles))
}

pub fn textualize_demographics(demo: &Demographics) -> Vec<String> {
    let mut out = vec!["gender".to_string(), demo.gender.as_str().to_lowercase(), "age".to_string()];
    out.extend(split_chars(&demo.age.to_string()));
    out.push("race".to_string());
    out.extend(words(&demo.race));
    out
}

/// One textualized event, including its time tokens and `[EOE]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventBlock {
    /// Position of the source event in `IcuStay::events`.
    pub ordinal: usize,
    pub offset_minutes: u32,
    pub is_lab: bool,
    pub tokens: Vec<String>,
    pub roles: Vec<TokenRole>,
}

impl EventBlock {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Blocks for the events kept by `opts.events`, in emission order.
///
/// With a permutation seed, events whose absolute time tokens coincide are
/// shuffled among themselves (relative mode: events at the identical minute,
/// so intervals stay non-negative).
pub fn event_blocks(stay: &IcuStay, permute_seed: Option<u64>, opts: &AssemblyOptions<'_>) -> Result<Vec<EventBlock>> {
    let mut kept: Vec<usize> = (0..stay.events.len()).filter(|&i| opts.events.contains(stay.events[i].event_type)).collect();

    if let Some(seed) = permute_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key = |i: usize| -> (TimeTokens, u32) {
            let e = &stay.events[i];
            let t = encode_time(stay.admit_datetime, e.offset_minutes);
            match opts.time_mode {
                TimeMode::Absolute => (t, 0),
                TimeMode::Relative => (t, e.offset_minutes),
            }
        };
        let mut start = 0;
        while start < kept.len() {
            let k = key(kept[start]);
            let mut end = start + 1;
            while end < kept.len() && key(kept[end]) == k {
                end += 1;
            }
            kept[start..end].shuffle(&mut rng);
            start = end;
        }
    }

    let mut blocks = Vec::with_capacity(kept.len());
    let mut prev_offset = None;
    for i in kept {
        let event = &stay.events[i];
        let (body, body_roles) = event_body(event, opts.values)?;
        let mut tokens = Vec::with_capacity(body.len() + 6);
        let mut roles = Vec::with_capacity(body.len() + 6);
        match opts.time_mode {
            TimeMode::Absolute => {
                for t in encode_time(stay.admit_datetime, event.offset_minutes).tokens() {
                    push(&mut tokens, &mut roles, t, TokenRole::Time);
                }
                tokens.extend(body);
                roles.extend(body_roles);
            }
            TimeMode::Relative => {
                tokens.extend(body);
                roles.extend(body_roles);
                for t in encode_relative_time(prev_offset, event.offset_minutes)? {
                    push(&mut tokens, &mut roles, t, TokenRole::Time);
                }
            }
        }
        push(&mut tokens, &mut roles, EOE.into(), TokenRole::Eoe);
        prev_offset = Some(event.offset_minutes);
        blocks.push(EventBlock {
            ordinal: i,
            offset_minutes: event.offset_minutes,
            is_lab: event.is_lab(),
            tokens,
            roles,
        });
    }
    Ok(blocks)
}

/// Token strings with parallel role, source-event and lab annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceRecord {
    pub stay_id: String,
    pub tokens: Vec<String>,
    pub roles: Vec<TokenRole>,
    /// Source event ordinal, `None` for the demographic prefix.
    pub event_index: Vec<Option<usize>>,
    pub lab_flags: Vec<bool>,
}

impl SequenceRecord {
    pub fn new(stay_id: impl Into<String>, demographics: &[String]) -> Self {
        let n = demographics.len();
        SequenceRecord {
            stay_id: stay_id.into(),
            tokens: demographics.to_vec(),
            roles: vec![TokenRole::Demo; n],
            event_index: vec![None; n],
            lab_flags: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push_block(&mut self, block: &EventBlock) {
        self.tokens.extend(block.tokens.iter().cloned());
        self.roles.extend(&block.roles);
        self.event_index.extend(std::iter::repeat(Some(block.ordinal)).take(block.len()));
        self.lab_flags.extend(std::iter::repeat(block.is_lab).take(block.len()));
    }

    pub fn prefix_len(&self) -> usize {
        self.event_index.iter().take_while(|e| e.is_none()).count()
    }

    /// `(ordinal, start, end)` spans of the event blocks after the prefix.
    pub fn block_spans(&self) -> Vec<(usize, usize, usize)> {
        let mut spans = Vec::new();
        let mut i = self.prefix_len();
        while i < self.len() {
            let ord = self.event_index[i].expect("event token after prefix");
            let mut j = i + 1;
            while j < self.len() && self.event_index[j] == Some(ord) {
                j += 1;
            }
            spans.push((ord, i, j));
            i = j;
        }
        spans
    }
}

pub fn assemble_sequence(stay: &IcuStay, permute_seed: Option<u64>, opts: &AssemblyOptions<'_>) -> Result<SequenceRecord> {
    let mut record = SequenceRecord::new(&stay.stay_id, &textualize_demographics(&stay.demographics));
    for block in event_blocks(stay, permute_seed, opts)? {
        record.push_block(&block);
    }
    Ok(record)
}

/// Greedy event-level packing into crops of at most `max_len` tokens, each
/// starting with the demographic prefix.
pub fn crop_sequence(record: &SequenceRecord, max_len: usize) -> Result<Vec<SequenceRecord>> {
    if record.len() <= max_len {
        return Ok(vec![record.clone()]);
    }
    let prefix = record.prefix_len();
    let slice = |r: &mut SequenceRecord, s: usize, e: usize| {
        r.tokens.extend_from_slice(&record.tokens[s..e]);
        r.roles.extend_from_slice(&record.roles[s..e]);
        r.event_index.extend_from_slice(&record.event_index[s..e]);
        r.lab_flags.extend_from_slice(&record.lab_flags[s..e]);
    };
    let fresh = || {
        let mut r = SequenceRecord {
            stay_id: record.stay_id.clone(),
            tokens: Vec::new(),
            roles: Vec::new(),
            event_index: Vec::new(),
            lab_flags: Vec::new(),
        };
        slice(&mut r, 0, prefix);
        r
    };

    let mut crops = Vec::new();
    let mut current = fresh();
    for (ordinal, s, e) in record.block_spans() {
        let len = e - s;
        if prefix + len > max_len {
            return Err(Error::EventTooLong {
                ordinal,
                needed: prefix + len,
                max_len,
            });
        }
        if current.len() + len > max_len {
            crops.push(std::mem::replace(&mut current, fresh()));
        }
        slice(&mut current, s, e);
    }
    if current.len() > prefix || crops.is_empty() {
        crops.push(current);
    }
    Ok(crops)
}

/// True on value, unit and `[EOE]` tokens of lab events.
pub fn compute_loss_mask(record: &SequenceRecord) -> Vec<bool> {
    record
        .roles
        .iter()
        .zip(&record.lab_flags)
        .map(|(role, &lab)| lab && matches!(role, TokenRole::Value | TokenRole::Unit | TokenRole::Eoe))
        .collect()
}

/// Reserved tokens in id order: specials, time, quantiles, digits and signs.
pub fn special_lexicon() -> Vec<String> {
    let mut out: Vec<String> = [PAD, EOE, UNK].iter().map(|s| s.to_string()).collect();
    out.extend((1..=MAX_DAY).map(|d| format!("[DAY{d}]")));
    out.extend(WEEKDAYS.iter().map(|s| s.to_string()));
    out.extend((0..24).map(|h| format!("[{h}h]")));
    out.extend((0..6).map(|m| format!("[{:02}m]", m * 10)));
    out.extend((0..MAX_QUANTILES).map(quantile_token));
    out.extend((0..10).map(|d| d.to_string()));
    out.push(".".into());
    out.push("-".into());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{parse_datetime, Gender};
    use proptest::prelude::*;

    fn lab(offset: u32, desc: &str, value: &str, unit: Option<&str>) -> MedicalEvent {
        MedicalEvent {
            offset_minutes: offset,
            event_type: EventType::LabEvent,
            code: "x".into(),
            description: desc.into(),
            value: Some(value.into()),
            unit: unit.map(Into::into),
        }
    }

    fn drug(offset: u32, desc: &str) -> MedicalEvent {
        MedicalEvent {
            offset_minutes: offset,
            event_type: EventType::Medication,
            code: "rx".into(),
            description: desc.into(),
            value: None,
            unit: None,
        }
    }

    fn stay(events: Vec<MedicalEvent>) -> IcuStay {
        IcuStay {
            stay_id: "s".into(),
            patient_id: "p".into(),
            admit_datetime: parse_datetime("2024-01-02T00:00").unwrap(), // Tuesday
            demographics: Demographics {
                gender: Gender::F,
                age: 65,
                race: "Asian".into(),
            },
            events,
        }
    }

    fn strs(v: &[String]) -> Vec<&str> {
        v.iter().map(String::as_str).collect()
    }

    #[test]
    fn time_tokens_from_wall_clock() {
        let tue = parse_datetime("2024-01-02T00:00").unwrap();
        assert_eq!(strs(&encode_time(tue, 13 * 60 + 38).tokens()), ["[DAY1]", "[TUE]", "[13h]", "[30m]"]);
        let mon = parse_datetime("2024-01-01T00:00").unwrap();
        assert_eq!(strs(&encode_time(mon, 0).tokens()), ["[DAY1]", "[MON]", "[0h]", "[00m]"]);
        // 1440 minutes later is the next calendar day, a Tuesday
        assert_eq!(strs(&encode_time(mon, 1440).tokens()), ["[DAY2]", "[TUE]", "[0h]", "[00m]"]);
        assert_eq!(encode_time(mon, 1439).day, 1);
        assert_eq!(encode_time(mon, 200 * 1440).day, MAX_DAY);
    }

    #[test]
    fn day_counts_elapsed_blocks_not_midnights() {
        let late = parse_datetime("2024-01-01T23:50").unwrap();
        let t = encode_time(late, 20);
        assert_eq!((t.day, t.weekday, t.hour, t.minute_bucket), (1, Weekday::Tue, 0, 10));
    }

    #[test]
    fn relative_intervals() {
        assert_eq!(encode_relative_time(Some(100), 160).unwrap(), ["6", "0"]);
        assert_eq!(encode_relative_time(None, 500).unwrap(), ["0"]);
        assert_eq!(encode_relative_time(Some(0), 0).unwrap(), ["0"]);
        assert!(encode_relative_time(Some(10), 5).is_err());
    }

    #[test]
    fn creatinine_event() {
        let (tokens, roles) = textualize_event(&lab(0, "Creatinine", "1.23", Some("mg/dL"))).unwrap();
        assert_eq!(strs(&tokens), ["labevent", "creatinine", "1", ".", "2", "3", "mg", "/", "dl", "[EOE]"]);
        use TokenRole::*;
        assert_eq!(roles, [EventType, ItemText, Value, Value, Value, Value, Unit, Unit, Unit, Eoe]);
    }

    #[test]
    fn valueless_and_unitless_events() {
        let (tokens, _) = textualize_event(&drug(0, "Insulin Regular")).unwrap();
        assert_eq!(strs(&tokens), ["medication", "insulin", "regular", "[EOE]"]);
        let (tokens, roles) = textualize_event(&lab(0, "pH", "7.0", None)).unwrap();
        assert_eq!(strs(&tokens), ["labevent", "ph", "7", ".", "0", "[EOE]"]);
        use TokenRole::*;
        assert_eq!(roles, [EventType, ItemText, Value, Value, Value, Eoe]);
        let mut bad = lab(0, "pH", "7.0", None);
        bad.value = None;
        assert!(textualize_event(&bad).is_err());
    }

    #[test]
    fn negative_value_has_minus_token() {
        let (tokens, _) = textualize_event(&lab(0, "Base Excess", "-3", Some("mEq/L"))).unwrap();
        assert_eq!(strs(&tokens), ["labevent", "base", "excess", "-", "3", "meq", "/", "l", "[EOE]"]);
    }

    #[test]
    fn demographics() {
        let d = |g, age, race: &str| Demographics {
            gender: g,
            age,
            race: race.into(),
        };
        assert_eq!(strs(&textualize_demographics(&d(Gender::F, 65, "Asian"))), ["gender", "f", "age", "6", "5", "race", "asian"]);
        assert_eq!(strs(&textualize_demographics(&d(Gender::M, 5, "Other"))), ["gender", "m", "age", "5", "race", "other"]);
        let t = textualize_demographics(&d(Gender::F, 100, "African American"));
        assert_eq!(strs(&t[2..]), ["age", "1", "0", "0", "race", "african", "american"]);
    }

    #[test]
    fn assembly_structure() {
        let s = stay(vec![lab(10, "Glucose", "98", Some("mg/dL")), drug(70, "Insulin Regular")]);
        let r = assemble_sequence(&s, None, &AssemblyOptions::default()).unwrap();
        let expected = [
            "gender", "f", "age", "6", "5", "race", "asian", "[DAY1]", "[TUE]", "[0h]", "[10m]", "labevent", "glucose", "9", "8", "mg", "/", "dl",
            "[EOE]", "[DAY1]", "[TUE]", "[1h]", "[10m]", "medication", "insulin", "regular", "[EOE]",
        ];
        assert_eq!(strs(&r.tokens), expected);
        assert_eq!(r.prefix_len(), 7);
        assert_eq!(r.block_spans(), vec![(0, 7, 19), (1, 19, 27)]);
        assert!(r.lab_flags[7..19].iter().all(|&b| b));
        assert!(r.lab_flags[19..].iter().all(|&b| !b));

        let empty = assemble_sequence(&stay(vec![]), None, &AssemblyOptions::default()).unwrap();
        assert_eq!(empty.len(), 7);
        assert!(empty.roles.iter().all(|r| *r == TokenRole::Demo));
    }

    #[test]
    fn relative_mode_appends_interval() {
        let s = stay(vec![lab(100, "Glucose", "98", None), lab(160, "Glucose", "97", None)]);
        let opts = AssemblyOptions {
            time_mode: TimeMode::Relative,
            ..Default::default()
        };
        let r = assemble_sequence(&s, None, &opts).unwrap();
        assert_eq!(strs(&r.tokens[7..]), ["labevent", "glucose", "9", "8", "0", "[EOE]", "labevent", "glucose", "9", "7", "6", "0", "[EOE]"]);
        assert_eq!(r.roles[11], TokenRole::Time);
        let mask = compute_loss_mask(&r);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 6);
    }

    #[test]
    fn event_filter_drops_types() {
        let s = stay(vec![lab(10, "Glucose", "98", None), drug(12, "Insulin Regular")]);
        let opts = AssemblyOptions {
            events: EventFilter::labs_only(),
            ..Default::default()
        };
        let r = assemble_sequence(&s, None, &opts).unwrap();
        assert!(!r.tokens.contains(&"insulin".to_string()));
        assert_eq!(r.block_spans().len(), 1);
    }

    #[test]
    fn quantile_mode_replaces_digit_runs() {
        // Glucose bins fitted on 1..=100: edges 21, 41, 61, 81.
        let values = std::collections::BTreeMap::from([("Glucose".to_string(), (1..=100).map(f64::from).collect::<Vec<_>>())]);
        let binning = crate::metrics::quantile_fit(&values, 5).unwrap();
        let s = stay(vec![lab(10, "Glucose", "98", Some("mg/dL")), lab(20, "Glucose", "21", None), lab(30, "Lactate", "1.5", None)]);
        let opts = AssemblyOptions {
            values: ValueEncoding::Quantile(&binning),
            ..Default::default()
        };
        let r = assemble_sequence(&s, None, &opts).unwrap();
        let bodies: Vec<Vec<&str>> = r.block_spans().iter().map(|&(_, a, b)| strs(&r.tokens[a + 4..b])).collect();
        assert_eq!(bodies[0], ["labevent", "glucose", "[Q4]", "mg", "/", "dl", "[EOE]"]);
        assert_eq!(bodies[1], ["labevent", "glucose", "[Q1]", "[EOE]"]);
        // no bins fitted for lactate: digits stay
        assert_eq!(bodies[2], ["labevent", "lactate", "1", ".", "5", "[EOE]"]);
        let mask = compute_loss_mask(&r);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 5 + 2 + 4);
    }

    #[test]
    fn mode_strings_round_trip() {
        for f in [EventFilter::all(), EventFilter::labs_only(), EventFilter::from_types([EventType::Medication])] {
            assert_eq!(f.to_string().parse::<EventFilter>().unwrap(), f);
        }
        assert_eq!("all".parse::<EventFilter>().unwrap(), EventFilter::all());
        assert_eq!("medication".parse::<EventFilter>().unwrap().to_string(), "labevent+medication");
        assert!("labevent+notes".parse::<EventFilter>().is_err());
        assert_eq!("relative".parse::<TimeMode>().unwrap(), TimeMode::Relative);
        assert_eq!(TimeMode::Absolute.to_string(), "absolute");
        assert!("Absolute".parse::<TimeMode>().is_err());
    }

    fn block_multiset(r: &SequenceRecord) -> Vec<Vec<String>> {
        let mut blocks: Vec<_> = r.block_spans().iter().map(|&(_, s, e)| r.tokens[s..e].to_vec()).collect();
        blocks.sort();
        blocks
    }

    #[test]
    fn permutation_shuffles_only_within_time_bucket() {
        let s = stay(vec![
            lab(0, "A", "1", None),
            lab(121, "B", "2", None),
            lab(123, "C", "3", None),
            lab(129, "D", "4", None),
            lab(400, "E", "5", None),
        ]);
        let opts = AssemblyOptions::default();
        let base = assemble_sequence(&s, None, &opts).unwrap();
        let mut seen_orders = std::collections::HashSet::new();
        for seed in 0..30 {
            let r = assemble_sequence(&s, Some(seed), &opts).unwrap();
            assert_eq!(block_multiset(&r), block_multiset(&base));
            let order: Vec<usize> = r.block_spans().iter().map(|b| b.0).collect();
            assert_eq!(order[0], 0);
            assert_eq!(order[4], 4);
            seen_orders.insert(order);
        }
        assert!(seen_orders.len() > 1);
    }

    #[test]
    fn crop_identity_when_short() {
        let s = stay(vec![lab(10, "Glucose", "98", None)]);
        let r = assemble_sequence(&s, None, &AssemblyOptions::default()).unwrap();
        assert_eq!(crop_sequence(&r, 512).unwrap(), vec![r]);
    }

    fn synthetic_record(prefix: usize, blocks: &[usize]) -> SequenceRecord {
        let demo: Vec<String> = (0..prefix).map(|i| format!("d{i}")).collect();
        let mut r = SequenceRecord::new("s", &demo);
        for (ordinal, &len) in blocks.iter().enumerate() {
            let mut tokens = vec!["x".to_string(); len - 1];
            tokens.push(EOE.into());
            let mut roles = vec![TokenRole::ItemText; len - 1];
            roles.push(TokenRole::Eoe);
            r.push_block(&EventBlock {
                ordinal,
                offset_minutes: 0,
                is_lab: false,
                tokens,
                roles,
            });
        }
        r
    }

    #[test]
    fn crop_packs_whole_events() {
        let r = synthetic_record(8, &[20, 20, 20, 20]);
        let crops = crop_sequence(&r, 50).unwrap();
        assert_eq!(crops.len(), 2);
        for c in &crops {
            assert_eq!(c.len(), 48);
            assert_eq!(c.block_spans().len(), 2);
            assert_eq!(&c.tokens[..8], &r.tokens[..8]);
        }
    }

    #[test]
    fn crop_rejects_oversized_event() {
        let r = synthetic_record(8, &[10, 100]);
        match crop_sequence(&r, 50) {
            Err(Error::EventTooLong { ordinal, .. }) => assert_eq!(ordinal, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mask_examples() {
        let s = stay(vec![lab(0, "Creatinine", "1.23", Some("mg/dL"))]);
        let r = assemble_sequence(&s, None, &AssemblyOptions::default()).unwrap();
        let mask = compute_loss_mask(&r);
        let masked: Vec<&str> = r.tokens.iter().zip(&mask).filter(|(_, &m)| m).map(|(t, _)| t.as_str()).collect();
        assert_eq!(masked, ["1", ".", "2", "3", "mg", "/", "dl", "[EOE]"]);

        let drugs = stay(vec![drug(0, "Insulin"), drug(5, "Heparin")]);
        let r = assemble_sequence(&drugs, None, &AssemblyOptions::default()).unwrap();
        assert!(compute_loss_mask(&r).iter().all(|m| !m));

        let two = stay(vec![lab(0, "A", "1.5", Some("u")), lab(30, "B", "120", Some("u"))]);
        let r = assemble_sequence(&two, None, &AssemblyOptions::default()).unwrap();
        assert_eq!(compute_loss_mask(&r).iter().filter(|&&m| m).count(), 10);
    }

    #[test]
    fn lexicon_is_stable() {
        let lex = special_lexicon();
        assert_eq!(&lex[..3], [PAD, EOE, UNK]);
        let unique: BTreeSet<_> = lex.iter().collect();
        assert_eq!(unique.len(), lex.len());
        assert_eq!(lex.len(), 3 + 60 + 7 + 24 + 6 + 20 + 12);
    }

    #[test]
    fn unit_split_on_slash() {
        assert_eq!(unit_tokens("mEq/L"), ["meq", "/", "l"]);
        assert_eq!(unit_tokens("%"), ["%"]);
        assert_eq!(unit_tokens("mL/min/1.73m2"), ["ml", "/", "min", "/", "1.73m2"]);
    }

    proptest! {
        #[test]
        fn crops_cover_events_in_order(lens in proptest::collection::vec(2usize..30, 0..40), prefix in 1usize..10) {
            let r = synthetic_record(prefix, &lens);
            let max_len = prefix + 30 + 5;
            let crops = crop_sequence(&r, max_len).unwrap();
            let mut rebuilt = Vec::new();
            for c in &crops {
                prop_assert!(c.len() <= max_len);
                prop_assert_eq!(c.prefix_len(), prefix);
                rebuilt.extend_from_slice(&c.event_index[prefix..]);
            }
            prop_assert_eq!(&rebuilt[..], &r.event_index[prefix..]);
        }
    }
}
