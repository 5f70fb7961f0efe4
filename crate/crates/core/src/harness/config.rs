use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::budget::BudgetConfig;
use crate::compat::CompatConfig;
use crate::error::{Error, Result};
use crate::reliability::ReliabilityConfig;
use crate::sim::DriftScenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Unweighted distillation at a fixed maximum length.
    OpdBaseline,
    /// Unweighted distillation clamped to `truncate_length`.
    FixedTruncate,
    /// Random positions kept to match a reference run's scored-token count.
    RandomPruneTokens,
    /// Random positions kept to match a reference run's loss-weight mass.
    RandomPruneMass,
    /// Reliability-scaled rewards with the dynamic budget.
    PruneOpd,
}

/// Every experiment knob. Files address fields by dotted key, e.g.
/// `reliability.w_drop`; `scenario.preset` swaps in a named scenario before
/// the remaining `scenario.*` keys are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: DriftScenario,
    pub mode: Mode,
    pub compat: CompatConfig,
    pub reliability: ReliabilityConfig,
    pub budget: BudgetConfig,
    /// Prompts per step.
    pub batch_size: usize,
    pub rollouts_per_prompt: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Fixed length for `fixed_truncate`; defaults to half of `scenario.max_length`.
    pub truncate_length: Option<usize>,
    /// Prior `prune_opd` run whose recorded metrics set the random-pruning targets.
    pub reference_run: Option<PathBuf>,
    /// Held-out rollouts (sampled from the initial student) for the final KL.
    pub eval_rollouts: usize,
    /// Dump the per-position weight profile every this many steps.
    pub profile_stride: usize,
    /// Position-band width used when emitting weight profiles.
    pub profile_band_width: usize,
    /// Mirror metrics to `metrics.jsonl`.
    pub metrics_jsonl: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: DriftScenario::collapse(),
            mode: Mode::PruneOpd,
            compat: CompatConfig::default(),
            reliability: ReliabilityConfig::default(),
            // LLM-scale lengths divided by ~48 to fit a 256-token horizon.
            budget: BudgetConfig {
                m_init: 128,
                m_min: 32,
                m_max: 256,
                delta: 4,
                margin: 4,
                rho: 0.1,
                patience: 3,
                frozen: false,
            },
            batch_size: 4,
            rollouts_per_prompt: 4,
            steps: 300,
            learning_rate: 20.0,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            truncate_length: None,
            reference_run: None,
            eval_rollouts: 16,
            profile_stride: 1,
            profile_band_width: 16,
            metrics_jsonl: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.compat.validate()?;
        self.reliability.validate()?;
        self.budget.validate()?;
        if self.compat.k != self.scenario.k {
            return Err(Error::config(format!(
                "compat.k = {} must equal scenario.k = {}",
                self.compat.k, self.scenario.k
            )));
        }
        if self.budget.m_max > self.scenario.max_length {
            return Err(Error::config(format!(
                "budget.m_max = {} exceeds scenario.max_length = {}",
                self.budget.m_max, self.scenario.max_length
            )));
        }
        if self.budget.m_min == 0 {
            return Err(Error::config("budget.m_min must be at least 1"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("rollouts_per_prompt", self.rollouts_per_prompt),
            ("steps", self.steps),
            ("eval_rollouts", self.eval_rollouts),
            ("profile_stride", self.profile_stride),
            ("profile_band_width", self.profile_band_width),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        match self.mode {
            Mode::FixedTruncate => {
                let len = self.truncate_len();
                if len == 0 || len > self.scenario.max_length {
                    return Err(Error::config(format!(
                        "truncate_length = {len} must be in [1, scenario.max_length]"
                    )));
                }
            }
            Mode::RandomPruneTokens | Mode::RandomPruneMass if self.reference_run.is_none() => {
                return Err(Error::config(
                    "reference_run is required for random pruning modes",
                ));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn truncate_len(&self) -> usize {
        self.truncate_length.unwrap_or(self.scenario.max_length / 2)
    }

    pub fn rollouts_per_step(&self) -> usize {
        self.batch_size * self.rollouts_per_prompt
    }

    /// Parses a config document: a JSON object (nested or with dotted keys) or
    /// `key = value` lines. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(obj)) => {
                let mut out = Vec::new();
                flatten("", Value::Object(obj), &mut out);
                out
            }
            Ok(_) => return Err(Error::config("config JSON must be an object")),
            Err(_) => parse_key_values(text)?,
        };
        Self::from_entries(entries)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Applies dotted-key assignments over the defaults.
    pub fn from_entries(entries: Vec<(String, Value)>) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())
            .map_err(|e| Error::config(e.to_string()))?;
        if let Some((_, preset)) = entries.iter().find(|(k, _)| k == "scenario.preset") {
            let name = preset
                .as_str()
                .ok_or_else(|| Error::config("scenario.preset must be a string"))?;
            let scenario = DriftScenario::preset(name)
                .ok_or_else(|| Error::config(format!("unknown scenario preset `{name}`")))?;
            root["scenario"] =
                serde_json::to_value(scenario).map_err(|e| Error::config(e.to_string()))?;
        }
        for (key, value) in entries.into_iter().filter(|(k, _)| k != "scenario.preset") {
            set_path(&mut root, &key, value)?;
        }
        let cfg: Self =
            serde_json::from_value(root).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn flatten(prefix: &str, value: Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf)),
    }
}

fn parse_key_values(text: &str) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        out.push((key.trim().to_string(), value));
    }
    Ok(out)
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if !map.contains_key(*part) {
            return Err(Error::config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("checked above");
    }
    Err(Error::config("empty config key"))
}
