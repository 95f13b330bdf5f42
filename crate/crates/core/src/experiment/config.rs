use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ehr::SyntheticConfig;
use crate::error::{Error, Result};
use crate::metrics::ALLOWED_K;
use crate::model::ModelConfig;
use crate::textualize::{EventFilter, TimeMode};
use crate::train::{LossMode, TrainHyper};

/// Lab value representation: per-character digits or `K` quantile tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ValueMode {
    #[default]
    Digit,
    Quantile(usize),
}

impl fmt::Display for ValueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueMode::Digit => f.write_str("digit"),
            ValueMode::Quantile(k) => write!(f, "quantile-{k}"),
        }
    }
}

impl FromStr for ValueMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "digit" {
            return Ok(ValueMode::Digit);
        }
        let k = s
            .strip_prefix("quantile-")
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| Error::Config(format!("value mode {s:?}; expected digit or quantile-K")))?;
        if !ALLOWED_K.contains(&k) {
            return Err(Error::Config(format!("quantile count {k} not in {ALLOWED_K:?}")));
        }
        Ok(ValueMode::Quantile(k))
    }
}

impl TryFrom<String> for ValueMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ValueMode> for String {
    fn from(v: ValueMode) -> String {
        v.to_string()
    }
}

/// Model shape; the vocabulary size comes from the built vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        ModelSpec {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            max_seq_len: d.max_seq_len,
            dropout: d.dropout,
        }
    }
}

impl ModelSpec {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            max_seq_len: self.max_seq_len,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub split: (f64, f64, f64),
    pub synthetic: SyntheticConfig,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            split: (0.8, 0.1, 0.1),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Score failed parses as the item's training mean instead of dropping them.
    pub fallback: bool,
    pub max_new_tokens: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            fallback: false,
            max_new_tokens: crate::inference::DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

/// One experiment: data location, representation choices, model and
/// optimiser settings. Every random choice derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub time_mode: TimeMode,
    pub value_mode: ValueMode,
    pub loss_mode: LossMode,
    pub events: EventFilter,
    pub model: ModelSpec,
    pub train: TrainHyper,
    pub eval: EvalSpec,
    pub data: DataSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            time_mode: TimeMode::Absolute,
            value_mode: ValueMode::Digit,
            loss_mode: LossMode::LabOnly,
            events: EventFilter::all(),
            model: ModelSpec::default(),
            train: TrainHyper::default(),
            eval: EvalSpec::default(),
            data: DataSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.config(1).validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if let ValueMode::Quantile(k) = self.value_mode {
            if !ALLOWED_K.contains(&k) {
                return Err(Error::Config(format!("quantile count {k} not in {ALLOWED_K:?}")));
            }
        }
        if self.eval.max_new_tokens == 0 || self.eval.max_new_tokens >= self.model.max_seq_len {
            return Err(Error::Config("max_new_tokens must be in 1..max_seq_len".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Optimiser settings with the run's seed.
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::EventType;

    #[test]
    fn value_mode_strings() {
        assert_eq!("digit".parse::<ValueMode>().unwrap(), ValueMode::Digit);
        assert_eq!("quantile-20".parse::<ValueMode>().unwrap(), ValueMode::Quantile(20));
        assert!("quantile-7".parse::<ValueMode>().is_err());
        assert!("bins".parse::<ValueMode>().is_err());
        assert_eq!(ValueMode::Quantile(5).to_string(), "quantile-5");
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.value_mode = ValueMode::Quantile(10);
        cfg.time_mode = TimeMode::Relative;
        cfg.loss_mode = LossMode::FullAr;
        cfg.events = EventFilter::from_types([EventType::Medication]);
        cfg.train.max_steps = Some(40);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn invalid_configs_rejected() {
        let text = RunConfig::default().to_toml().unwrap();
        assert!(RunConfig::from_toml(&text.replace("value_mode = \"digit\"", "value_mode = \"quantile-3\"")).is_err());
        assert!(RunConfig::from_toml(&text.replace("n_heads = 4", "n_heads = 3")).is_err());
        assert!(RunConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
    }
}
