//! ICU stay data model, the JSONL interchange format and patient-level splits.
//!
//! Values travel as their recorded decimal strings so the tokenizer sees the
//! exact digits; conversion to floating point happens only at scoring time.

mod synthetic;

pub use synthetic::{generate_synthetic, LabItemSpec, MedItemSpec, SyntheticConfig};

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stays whose last event is earlier than this offset are dropped at load time.
pub const MIN_STAY_MINUTES: u32 = 360;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::F => "F",
            Gender::M => "M",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: Gender,
    pub age: u8,
    pub race: String,
}

impl Demographics {
    pub fn validate(&self) -> Result<()> {
        if self.age > 120 {
            return Err(Error::Validation(format!("age {} outside [0,120]", self.age)));
        }
        if self.race.trim().is_empty() || self.race.contains(['\n', '\r']) {
            return Err(Error::Validation(format!("bad race label {:?}", self.race)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    LabEvent,
    Medication,
    InputEvent,
    ProcedureEvent,
    OutputEvent,
    MicrobiologyEvent,
}

impl EventType {
    pub const ALL: [EventType; 6] = [
        EventType::LabEvent,
        EventType::Medication,
        EventType::InputEvent,
        EventType::ProcedureEvent,
        EventType::OutputEvent,
        EventType::MicrobiologyEvent,
    ];

    /// The word emitted into token streams, also the JSONL spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            EventType::LabEvent => "labevent",
            EventType::Medication => "medication",
            EventType::InputEvent => "inputevent",
            EventType::ProcedureEvent => "procedureevent",
            EventType::OutputEvent => "outputevent",
            EventType::MicrobiologyEvent => "microbiologyevent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One timestamped clinical record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalEvent {
    #[serde(rename = "offset_min")]
    pub offset_minutes: u32,
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub code: String,
    #[serde(rename = "desc")]
    pub description: String,
    pub value: Option<String>,
    pub unit: Option<String>,
}

impl MedicalEvent {
    pub fn is_lab(&self) -> bool {
        self.event_type == EventType::LabEvent
    }

    /// Numeric value, if present and well formed.
    pub fn numeric_value(&self) -> Option<f64> {
        self.value.as_deref().filter(|v| is_valid_value(v)).and_then(|v| v.parse().ok())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = &self.value {
            if !is_valid_value(v) {
                return Err(Error::Validation(format!(
                    "value {v:?} of {:?} is not a plain decimal",
                    self.description
                )));
            }
        } else if self.is_lab() {
            return Err(Error::Validation(format!(
                "lab event {:?} at offset {} has no value",
                self.description, self.offset_minutes
            )));
        }
        Ok(())
    }
}

/// `-?[0-9]+(\.[0-9]+)?`
pub fn is_valid_value(s: &str) -> bool {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    digits(int) && frac.map_or(true, digits)
}

mod minute_datetime {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub const FORMAT: &str = "%Y-%m-%dT%H:%M";

    pub fn serialize<S: Serializer>(dt: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&dt.format(FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let raw = String::deserialize(d)?;
        NaiveDateTime::parse_from_str(&raw, FORMAT).map_err(serde::de::Error::custom)
    }
}

/// One ICU admission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcuStay {
    pub stay_id: String,
    pub patient_id: String,
    #[serde(with = "minute_datetime")]
    pub admit_datetime: NaiveDateTime,
    pub demographics: Demographics,
    pub events: Vec<MedicalEvent>,
}

impl IcuStay {
    pub fn last_offset(&self) -> Option<u32> {
        self.events.iter().map(|e| e.offset_minutes).max()
    }

    pub fn validate(&self) -> Result<()> {
        self.demographics.validate()?;
        for e in &self.events {
            e.validate()?;
        }
        if self.events.windows(2).any(|w| w[0].offset_minutes > w[1].offset_minutes) {
            return Err(Error::Validation(format!("stay {} events not sorted", self.stay_id)));
        }
        Ok(())
    }

    pub fn lab_events(&self) -> impl Iterator<Item = (usize, &MedicalEvent)> {
        self.events.iter().enumerate().filter(|(_, e)| e.is_lab())
    }
}

pub fn parse_datetime(s: &str) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, minute_datetime::FORMAT)
        .map_err(|e| Error::Validation(format!("bad datetime {s:?}: {e}")))
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub stays: Vec<IcuStay>,
    /// Stays dropped for lasting less than six hours.
    pub dropped_short: usize,
}

/// Parse one JSONL line into a validated stay with sorted events.
pub fn parse_stay_line(line: &str, line_no: usize) -> Result<IcuStay> {
    let mut stay: IcuStay = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    stay.events.sort_by_key(|e| e.offset_minutes);
    stay.validate().map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    Ok(stay)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_dataset(reader: impl BufRead) -> Result<LoadedDataset> {
    let mut stays = Vec::new();
    let mut seen = HashSet::new();
    let mut dropped_short = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let stay = parse_stay_line(&line, i + 1)?;
        if !seen.insert(stay.stay_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate stay_id {:?} on line {}",
                stay.stay_id,
                i + 1
            )));
        }
        if stay.last_offset().map_or(true, |t| t < MIN_STAY_MINUTES) {
            dropped_short += 1;
            continue;
        }
        stays.push(stay);
    }
    if dropped_short > 0 {
        log::warn!("dropped {dropped_short} stays shorter than {MIN_STAY_MINUTES} minutes");
    }
    Ok(LoadedDataset {
        stays,
        dropped_short,
    })
}

/// Canonical JSONL: keys in declaration order, LF endings.
pub fn write_dataset_to(mut w: impl Write, stays: &[IcuStay]) -> std::io::Result<()> {
    for stay in stays {
        serde_json::to_writer(&mut w, stay)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_dataset(path: impl AsRef<Path>, stays: &[IcuStay]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(BufWriter::new(file), stays).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<IcuStay>,
    pub val: Vec<IcuStay>,
    pub test: Vec<IcuStay>,
}

/// Patient-level split: every stay of a patient lands in the same partition.
///
/// Patient ids are sorted, shuffled with `seed`, then cut at
/// `round(cumulative_ratio * n_patients)`.
pub fn split_dataset(stays: &[IcuStay], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let patients: BTreeSet<&str> = stays.iter().map(|s| s.patient_id.as_str()).collect();
    if patients.len() < 3 {
        return Err(Error::Validation(format!(
            "need at least 3 patients for a three-way split, found {}",
            patients.len()
        )));
    }
    let mut patients: Vec<&str> = patients.into_iter().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = patients.len() as f64;
    let cut_train = (a * n).round() as usize;
    let cut_val = ((a + b) * n).round() as usize;
    let mut which = std::collections::HashMap::new();
    for (i, p) in patients.iter().enumerate() {
        let part = if i < cut_train {
            0
        } else if i < cut_val {
            1
        } else {
            2
        };
        which.insert(*p, part);
    }

    let mut split = DatasetSplit::default();
    for stay in stays {
        match which[stay.patient_id.as_str()] {
            0 => split.train.push(stay.clone()),
            1 => split.val.push(stay.clone()),
            _ => split.test.push(stay.clone()),
        }
    }
    Ok(split)
}
