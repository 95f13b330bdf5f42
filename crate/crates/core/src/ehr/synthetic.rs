//! Synthetic ICU stays with structure a sequence model can learn.
//!
//! A lab value drawn at wall-clock time `t` is
//!
//! ```text
//! baseline + demographic offset + stay effect
//!   + AR(1) drift (mean-reverting, per-hour coefficient)
//!   + circadian cosine keyed to the hour of day
//!   + sum of medication impulses decaying with their half-life
//!   + observation noise
//! ```
//!
//! clamped to the item's range and rounded to its configured decimals.
//! Each stay draws from its own ChaCha stream (master seed, stay index), so
//! generation order and parallelism never change the output.

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Demographics, EventType, Gender, IcuStay, MedicalEvent};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabItemSpec {
    pub name: String,
    pub code: String,
    pub unit: String,
    pub baseline: f64,
    /// Between-stay standard deviation of the item level.
    pub stay_sd: f64,
    /// Stationary standard deviation of the AR(1) drift.
    pub drift_sd: f64,
    /// Per-hour autocorrelation of the drift, in [0, 1).
    pub ar_coef: f64,
    pub noise_sd: f64,
    pub decimals: u8,
    pub circadian_amplitude: f64,
    pub circadian_peak_hour: f64,
    /// Added to the level of male patients.
    pub male_offset: f64,
    /// Added per decade of age above 60.
    pub age_slope: f64,
    pub min: f64,
    pub max: f64,
    /// Draw interval range in minutes (uniform).
    pub interval_minutes: (u32, u32),
    /// Items sharing a panel are drawn together on the first member's schedule.
    #[serde(default)]
    pub panel: Option<String>,
}

impl LabItemSpec {
    pub fn demographic_offset(&self, demo: &Demographics) -> f64 {
        let male = if demo.gender == Gender::M { self.male_offset } else { 0.0 };
        male + self.age_slope * (f64::from(demo.age) - 60.0) / 10.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedItemSpec {
    pub name: String,
    pub code: String,
    pub event_type: EventType,
    /// Name of the lab item this drug moves.
    pub target: String,
    pub impulse: f64,
    pub half_life_minutes: f64,
    pub interval_minutes: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub stays_per_patient: (u32, u32),
    pub stay_hours: (u32, u32),
    pub seed: u64,
    pub labs: Vec<LabItemSpec>,
    pub meds: Vec<MedItemSpec>,
}

#[allow(clippy::too_many_arguments)]
fn lab(
    name: &str,
    code: &str,
    unit: &str,
    baseline: f64,
    (stay_sd, drift_sd, ar_coef, noise_sd): (f64, f64, f64, f64),
    decimals: u8,
    (circadian_amplitude, circadian_peak_hour): (f64, f64),
    (male_offset, age_slope): (f64, f64),
    (min, max): (f64, f64),
    interval_minutes: (u32, u32),
    panel: Option<&str>,
) -> LabItemSpec {
    LabItemSpec {
        name: name.into(),
        code: code.into(),
        unit: unit.into(),
        baseline,
        stay_sd,
        drift_sd,
        ar_coef,
        noise_sd,
        decimals,
        circadian_amplitude,
        circadian_peak_hour,
        male_offset,
        age_slope,
        min,
        max,
        interval_minutes,
        panel: panel.map(Into::into),
    }
}

fn med(name: &str, code: &str, event_type: EventType, target: &str, impulse: f64, half_life: f64, every: (u32, u32)) -> MedItemSpec {
    MedItemSpec {
        name: name.into(),
        code: code.into(),
        event_type,
        target: target.into(),
        impulse,
        half_life_minutes: half_life,
        interval_minutes: every,
    }
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let chem = Some("chem");
        let abg = Some("abg");
        SyntheticConfig {
            n_patients: 1000,
            stays_per_patient: (1, 2),
            stay_hours: (7, 20),
            seed: 1,
            labs: vec![
                lab("Glucose", "2345-7", "mg/dL", 130.0, (10.0, 10.0, 0.9, 4.0), 0, (25.0, 8.0), (4.0, 3.0), (40.0, 400.0), (150, 210), None),
                lab("Potassium", "2823-3", "mEq/L", 4.1, (0.2, 0.2, 0.9, 0.08), 1, (0.35, 16.0), (0.1, 0.05), (2.5, 6.5), (300, 420), chem),
                lab("Sodium", "2951-2", "mEq/L", 139.0, (2.0, 1.5, 0.95, 0.8), 0, (2.5, 4.0), (0.5, 0.3), (125.0, 155.0), (300, 420), chem),
                lab("Creatinine", "2160-0", "mg/dL", 1.10, (0.2, 0.1, 0.97, 0.03), 2, (0.12, 12.0), (0.25, 0.06), (0.3, 5.0), (300, 420), chem),
                lab("Bicarbonate", "1963-8", "mEq/L", 24.0, (1.5, 1.5, 0.9, 0.7), 0, (2.0, 20.0), (0.5, -0.2), (12.0, 38.0), (300, 420), chem),
                lab("Hemoglobin", "718-7", "g/dL", 10.2, (0.6, 0.4, 0.97, 0.12), 1, (0.5, 10.0), (1.0, -0.2), (6.0, 16.0), (420, 600), None),
                lab("Lactate", "2524-7", "mmol/L", 1.8, (0.3, 0.4, 0.85, 0.12), 1, (0.5, 18.0), (0.1, 0.1), (0.4, 9.0), (240, 360), abg),
                lab("Base Excess", "1925-7", "mEq/L", 0.0, (1.5, 1.5, 0.9, 0.6), 0, (2.5, 2.0), (0.3, -0.2), (-15.0, 15.0), (240, 360), abg),
            ],
            meds: vec![
                med("Insulin Regular", "RX-INS", EventType::Medication, "Glucose", -45.0, 90.0, (240, 480)),
                med("Dextrose 5%", "IN-D5W", EventType::InputEvent, "Glucose", 30.0, 120.0, (360, 720)),
                med("Potassium Chloride", "RX-KCL", EventType::Medication, "Potassium", 0.7, 240.0, (360, 720)),
                med("Furosemide", "RX-FUR", EventType::Medication, "Potassium", -0.5, 300.0, (480, 900)),
                med("Sodium Bicarbonate", "RX-BIC", EventType::Medication, "Bicarbonate", 5.0, 360.0, (480, 900)),
            ],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labs.is_empty() {
            return Err(Error::Config("lab item catalog is empty".into()));
        }
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be positive".into()));
        }
        let (lo, hi) = self.stays_per_patient;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad stays_per_patient range {:?}", self.stays_per_patient)));
        }
        let (lo, hi) = self.stay_hours;
        if lo < 6 || lo > hi {
            return Err(Error::Config(format!("stay_hours {:?} must satisfy 6 <= lo <= hi", self.stay_hours)));
        }
        for l in &self.labs {
            if !(0.0..1.0).contains(&l.ar_coef) {
                return Err(Error::Config(format!("{}: ar_coef must be in [0,1)", l.name)));
            }
            if l.decimals > 2 {
                return Err(Error::Config(format!("{}: decimals must be 0, 1 or 2", l.name)));
            }
            if l.interval_minutes.0 == 0 || l.interval_minutes.0 > l.interval_minutes.1 {
                return Err(Error::Config(format!("{}: bad interval range", l.name)));
            }
            if l.min > l.max || [l.stay_sd, l.drift_sd, l.noise_sd].iter().any(|s| *s < 0.0) {
                return Err(Error::Config(format!("{}: bad range or negative sd", l.name)));
            }
        }
        for m in &self.meds {
            if !self.labs.iter().any(|l| l.name == m.target) {
                return Err(Error::Config(format!("{} targets unknown lab {:?}", m.name, m.target)));
            }
            if m.event_type == EventType::LabEvent {
                return Err(Error::Config(format!("{} cannot be a labevent", m.name)));
            }
            if m.interval_minutes.0 == 0 || m.interval_minutes.0 > m.interval_minutes.1 || m.half_life_minutes <= 0.0 {
                return Err(Error::Config(format!("{}: bad schedule", m.name)));
            }
        }
        Ok(())
    }

    /// Scales every lab's circadian amplitude.
    pub fn with_circadian_scale(mut self, scale: f64) -> Self {
        for l in &mut self.labs {
            l.circadian_amplitude *= scale;
        }
        self
    }

    /// Keeps medication events in the record but removes their effect on labs.
    pub fn without_medication_coupling(mut self) -> Self {
        for m in &mut self.meds {
            m.impulse = 0.0;
        }
        self
    }
}

/// Fixed-decimal rendering without a negative zero.
pub(crate) fn format_value(x: f64, decimals: u8) -> String {
    let s = format!("{:.*}", decimals as usize, x);
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

fn uniform_u32(rng: &mut ChaCha8Rng, (lo, hi): (u32, u32)) -> u32 {
    rng.gen_range(lo..=hi)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct PatientDraw {
    gender: Gender,
    age: u8,
    race: &'static str,
    n_stays: u32,
}

const RACES: [&str; 6] = ["White", "Black", "Asian", "Hispanic", "Other", "African American"];

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generate stays for `config`; deterministic for a fixed config.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<IcuStay>> {
    config.validate()?;

    // patient-level draws use streams above the stay range
    let patient_stream = 1u64 << 40;
    let mut jobs = Vec::new();
    for p in 0..config.n_patients {
        let mut rng = stream_rng(config.seed, patient_stream + p as u64);
        let draw = PatientDraw {
            gender: if rng.gen_bool(0.5) { Gender::F } else { Gender::M },
            age: rng.gen_range(18..=88),
            race: RACES[rng.gen_range(0..RACES.len())],
            n_stays: uniform_u32(&mut rng, config.stays_per_patient),
        };
        for ordinal in 0..draw.n_stays {
            jobs.push((p, ordinal, jobs.len(), draw.gender, draw.age, draw.race));
        }
    }

    let stays = jobs
        .into_par_iter()
        .map(|(p, ordinal, index, gender, age, race)| {
            let demographics = Demographics {
                gender,
                age: (age as u32 + ordinal).min(120) as u8,
                race: race.to_string(),
            };
            let mut rng = stream_rng(config.seed, index as u64);
            generate_stay(config, &mut rng, format!("S{index:06}"), format!("P{p:05}"), demographics)
        })
        .collect();
    Ok(stays)
}

fn generate_stay(config: &SyntheticConfig, rng: &mut ChaCha8Rng, stay_id: String, patient_id: String, demographics: Demographics) -> IcuStay {
    let base = NaiveDate::from_ymd_opt(2150, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let admit: NaiveDateTime = base + Duration::days(rng.gen_range(0..365)) + Duration::minutes(rng.gen_range(0..1440));
    let los = rng.gen_range(config.stay_hours.0 * 60..=config.stay_hours.1 * 60);

    // draw times per schedule group (panel or lone item)
    let mut group_times: Vec<(Option<String>, Vec<u32>)> = Vec::new();
    let mut item_times: Vec<Vec<u32>> = Vec::with_capacity(config.labs.len());
    for item in &config.labs {
        let existing = item
            .panel
            .as_ref()
            .and_then(|p| group_times.iter().find(|(g, _)| g.as_deref() == Some(p.as_str())));
        let times = match existing {
            Some((_, t)) => t.clone(),
            None => {
                let t = renewal_times(rng, item.interval_minutes, los);
                group_times.push((item.panel.clone(), t.clone()));
                t
            }
        };
        item_times.push(times);
    }

    let med_times: Vec<Vec<u32>> = config
        .meds
        .iter()
        .map(|m| {
            let mut t = renewal_times(rng, m.interval_minutes, los);
            // no medication at discharge
            t.retain(|&x| x < los);
            t
        })
        .collect();

    let mut events = Vec::new();
    for (item, times) in config.labs.iter().zip(&item_times) {
        let level = item.baseline + item.demographic_offset(&demographics) + item.stay_sd * normal(rng);
        let mut drift = item.drift_sd * normal(rng);
        let mut prev_t: Option<u32> = None;
        for &t in times {
            if let Some(p) = prev_t {
                let hours = f64::from(t - p) / 60.0;
                let rho = item.ar_coef.powf(hours);
                drift = rho * drift + (1.0 - rho * rho).max(0.0).sqrt() * item.drift_sd * normal(rng);
            }
            prev_t = Some(t);

            let wall = admit + Duration::minutes(i64::from(t));
            let clock = f64::from(wall.hour()) + f64::from(wall.minute()) / 60.0;
            let circadian = item.circadian_amplitude * (std::f64::consts::TAU * (clock - item.circadian_peak_hour) / 24.0).cos();

            let mut med_effect = 0.0;
            for (m, mt) in config.meds.iter().zip(&med_times) {
                if m.target != item.name {
                    continue;
                }
                for &given in mt.iter().filter(|&&g| g < t) {
                    med_effect += m.impulse * 0.5f64.powf(f64::from(t - given) / m.half_life_minutes);
                }
            }

            let x = (level + drift + circadian + med_effect + item.noise_sd * normal(rng)).clamp(item.min, item.max);
            events.push(MedicalEvent {
                offset_minutes: t,
                event_type: EventType::LabEvent,
                code: item.code.clone(),
                description: item.name.clone(),
                value: Some(format_value(x, item.decimals)),
                unit: Some(item.unit.clone()),
            });
        }
    }
    for (m, times) in config.meds.iter().zip(&med_times) {
        for &t in times {
            events.push(MedicalEvent {
                offset_minutes: t,
                event_type: m.event_type,
                code: m.code.clone(),
                description: m.name.clone(),
                value: None,
                unit: None,
            });
        }
    }
    // stable: labs before drugs given in the same minute
    events.sort_by_key(|e| e.offset_minutes);

    IcuStay {
        stay_id,
        patient_id,
        admit_datetime: admit,
        demographics,
        events,
    }
}

/// Renewal process on [0, los]; always ends with a draw at `los`.
fn renewal_times(rng: &mut ChaCha8Rng, interval: (u32, u32), los: u32) -> Vec<u32> {
    let mut times = Vec::new();
    let mut t = rng.gen_range(0..interval.0);
    while t < los {
        times.push(t);
        t += uniform_u32(rng, interval);
    }
    times.push(los);
    times
}
