//! Pipeline configuration: one TOML file, overridable by `AXRL_`-prefixed
//! environment variables, validated with errors that name the offending key.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddpg::{AffinityPrior, Prototype, TrainConfig};
use crate::discretize::BinSpec;
use crate::env::{EnvConfig, NUM_ASSETS};
use crate::market_data::{IndicatorParams, YearMonth};

/// Prefix of environment variables that override config keys. Path segments
/// are separated by a double underscore: `AXRL_TRAIN__EPISODES=5` sets
/// `train.episodes`, `AXRL_PROTOTYPES__0__LAMBDA=2` sets `prototypes[0].lambda`.
pub const ENV_PREFIX: &str = "AXRL_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("environment override {var}: {message}")]
    Override { var: String, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

/// Where one index comes from: a CSV file, or a seeded random walk when the
/// file is absent and the fallback is enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeriesSource {
    pub csv: Option<PathBuf>,
    pub synth_fallback: bool,
    pub start_price: f64,
    pub drift: f64,
    pub vol: f64,
}

impl SeriesSource {
    fn synthetic(start_price: f64, drift: f64, vol: f64) -> Self {
        Self {
            csv: None,
            synth_fallback: true,
            start_price,
            drift,
            vol,
        }
    }
}

impl Default for SeriesSource {
    fn default() -> Self {
        Self::synthetic(100.0, 0.0, 0.02)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub stocks: SeriesSource,
    pub property: SeriesSource,
    /// Interest-rate level in percent per annum.
    pub rate: SeriesSource,
    pub luxury: SeriesSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            stocks: SeriesSource::synthetic(100.0, 0.006, 0.04),
            property: SeriesSource::synthetic(100.0, 0.004, 0.015),
            rate: SeriesSource::synthetic(2.0, 0.0, 0.03),
            luxury: SeriesSource::synthetic(100.0, 0.004, 0.03),
        }
    }
}

/// The four market inputs, in the order their seeds are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Stocks,
    Property,
    Rate,
    Luxury,
}

impl SeriesKind {
    pub const ALL: [SeriesKind; 4] = [
        SeriesKind::Stocks,
        SeriesKind::Property,
        SeriesKind::Rate,
        SeriesKind::Luxury,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SeriesKind::Stocks => "stocks",
            SeriesKind::Property => "property",
            SeriesKind::Rate => "rate",
            SeriesKind::Luxury => "luxury",
        }
    }
}

impl DataConfig {
    pub fn source(&self, kind: SeriesKind) -> &SeriesSource {
        match kind {
            SeriesKind::Stocks => &self.stocks,
            SeriesKind::Property => &self.property,
            SeriesKind::Rate => &self.rate,
            SeriesKind::Luxury => &self.luxury,
        }
    }

    fn source_mut(&mut self, kind: SeriesKind) -> &mut SeriesSource {
        match kind {
            SeriesKind::Stocks => &mut self.stocks,
            SeriesKind::Property => &mut self.property,
            SeriesKind::Rate => &mut self.rate,
            SeriesKind::Luxury => &mut self.luxury,
        }
    }
}

/// One agent: its prototype, optional prior override and per-agent training overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeEntry {
    pub label: Prototype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<[f64; NUM_ASSETS]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
}

impl PrototypeEntry {
    pub fn new(label: Prototype) -> Self {
        Self {
            label,
            prior: None,
            lambda: None,
            episodes: None,
        }
    }

    pub fn prior(&self) -> AffinityPrior {
        AffinityPrior {
            prototype: self.label,
            weights: self.prior.unwrap_or_else(|| self.label.default_prior()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// States shown in each DOT graph, in first-visit order.
    pub dot_max_states: usize,
    /// Transitions below this probability are left out of DOT graphs.
    pub dot_min_prob: f64,
    /// Number of seeds for sampled rollouts.
    pub sample_seeds: usize,
    /// Additive smoothing of the count-fit matrices.
    pub smoothing: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            dot_max_states: 16,
            dot_min_prob: 0.01,
            sample_seeds: 20,
            smoothing: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    /// First month of the investment horizon; price data starts earlier by the indicator warm-up.
    pub start: YearMonth,
    pub indicators: IndicatorParams,
    pub data: DataConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub prototypes: Vec<PrototypeEntry>,
    pub bins: BinSpec,
    pub explain: ExplainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            workers: 1,
            start: YearMonth::new(1994, 1).expect("valid month"),
            indicators: IndicatorParams::default(),
            data: DataConfig::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            prototypes: Prototype::ALL
                .into_iter()
                .map(PrototypeEntry::new)
                .collect(),
            bins: BinSpec::default(),
            explain: ExplainConfig::default(),
        }
    }
}

/// Stable identifiers of the pipeline's random components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Series(SeriesKind),
    Agent(Prototype),
    Rollout,
}

impl SeedStream {
    fn id(self) -> u64 {
        match self {
            SeedStream::Series(kind) => 1 + kind as u64,
            SeedStream::Agent(p) => 16 + p as u64,
            SeedStream::Rollout => 32,
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (or starts from the defaults), applies environment
    /// overrides and validates. Relative CSV paths are resolved against the
    /// config file's directory.
    pub fn load<I>(path: Option<&Path>, env_vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
                (table, p.parent().map(Path::to_path_buf))
            }
            None => (toml::Table::new(), None),
        };
        apply_env_overrides(&mut table, env_vars)?;
        let mut config: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if let Some(base) = base.filter(|b| !b.as_os_str().is_empty()) {
            for kind in SeriesKind::ALL {
                let src = config.data.source_mut(kind);
                if let Some(csv) = src.csv.as_mut().filter(|c| c.is_relative()) {
                    *csv = base.join(&*csv);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(invalid("workers", "must be >= 1"));
        }
        if self.prototypes.len() != Prototype::ALL.len() {
            return Err(invalid(
                "prototypes",
                format!(
                    "exactly {} entries required, found {}",
                    Prototype::ALL.len(),
                    self.prototypes.len()
                ),
            ));
        }
        let mut seen = HashSet::new();
        for (i, entry) in self.prototypes.iter().enumerate() {
            if !seen.insert(entry.label) {
                return Err(invalid(
                    format!("prototypes[{i}].label"),
                    format!("duplicate label {}", entry.label),
                ));
            }
            if let Some(w) = entry.prior {
                AffinityPrior::new(entry.label, w)
                    .map_err(|e| invalid(format!("prototypes[{i}].prior"), e.to_string()))?;
            }
            if let Some(l) = entry.lambda {
                if !(l >= 0.0) {
                    return Err(invalid(format!("prototypes[{i}].lambda"), "must be >= 0"));
                }
            }
        }
        self.indicators_valid()?;
        for kind in SeriesKind::ALL {
            let src = self.data.source(kind);
            let key = format!("data.{}", kind.label());
            match &src.csv {
                Some(p) if !p.is_file() && !src.synth_fallback => {
                    return Err(invalid(
                        format!("{key}.csv"),
                        format!("{} does not exist and synth_fallback is off", p.display()),
                    ));
                }
                None if !src.synth_fallback => {
                    return Err(invalid(key, "no csv given and synth_fallback is off"));
                }
                _ => {}
            }
            if !(src.start_price > 0.0 && src.start_price.is_finite()) {
                return Err(invalid(format!("{key}.start_price"), "must be positive"));
            }
            if !(src.vol >= 0.0) {
                return Err(invalid(format!("{key}.vol"), "must be >= 0"));
            }
            if !src.drift.is_finite() {
                return Err(invalid(format!("{key}.drift"), "must be finite"));
            }
        }
        self.env
            .validate()
            .map_err(|e| invalid("env", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        self.bins
            .validate()
            .map_err(|e| invalid("bins", e.to_string()))?;
        let ex = &self.explain;
        if ex.dot_max_states == 0 {
            return Err(invalid("explain.dot_max_states", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&ex.dot_min_prob) {
            return Err(invalid("explain.dot_min_prob", "must lie in [0, 1]"));
        }
        if ex.sample_seeds == 0 {
            return Err(invalid("explain.sample_seeds", "must be >= 1"));
        }
        if !(ex.smoothing >= 0.0) {
            return Err(invalid("explain.smoothing", "must be >= 0"));
        }
        Ok(())
    }

    fn indicators_valid(&self) -> Result<(), ConfigError> {
        let ind = &self.indicators;
        if ind.macd_fast == 0 {
            return Err(invalid("indicators.macd_fast", "must be >= 1"));
        }
        if ind.macd_fast >= ind.macd_slow {
            return Err(invalid("indicators.macd_slow", "must exceed macd_fast"));
        }
        if ind.rsi_period == 0 {
            return Err(invalid("indicators.rsi_period", "must be >= 1"));
        }
        Ok(())
    }

    /// Months of price history needed: warm-up plus the investment horizon.
    pub fn price_months(&self) -> usize {
        self.indicators.warm_up() + self.env.horizon
    }

    /// First month of price history.
    pub fn data_start(&self) -> YearMonth {
        self.start.add_months(-(self.indicators.warm_up() as i64))
    }

    /// Seed of one random component, derived from the global seed so that
    /// components never share a stream.
    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.id());
        rng.next_u64()
    }

    /// Training settings of one agent after per-agent overrides.
    pub fn train_config_for(&self, entry: &PrototypeEntry) -> TrainConfig {
        let mut cfg = self.train.clone();
        if let Some(l) = entry.lambda {
            cfg.lambda = l;
        }
        if let Some(e) = entry.episodes {
            cfg.episodes = e;
        }
        cfg.seed = self.seed_for(SeedStream::Agent(entry.label));
        cfg
    }

    /// Seeds used by sampled surrogate rollouts.
    pub fn rollout_seeds(&self) -> Vec<u64> {
        let base = self.seed_for(SeedStream::Rollout);
        (0..self.explain.sample_seeds as u64)
            .map(|i| base.wrapping_add(i))
            .collect()
    }
}

/// Applies every `AXRL_`-prefixed variable to the raw TOML table. Values are
/// read as TOML literals when they parse as one, otherwise as strings.
pub fn apply_env_overrides<I>(table: &mut toml::Table, env_vars: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = env_vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (var, raw) in vars {
        let path: Vec<String> = var[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(ConfigError::Override {
                var,
                message: "empty key segment".into(),
            });
        }
        let value = parse_literal(&raw);
        set_path(table, &path, value).map_err(|message| ConfigError::Override {
            var: var.clone(),
            message,
        })?;
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), String> {
    let (head, rest) = path.split_first().ok_or("empty key")?;
    if rest.is_empty() {
        table.insert(head.clone(), value);
        return Ok(());
    }
    let slot = table
        .entry(head.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    set_in_value(slot, rest, value)
}

fn set_in_value(slot: &mut toml::Value, path: &[String], value: toml::Value) -> Result<(), String> {
    match slot {
        toml::Value::Table(t) => set_path(t, path, value),
        toml::Value::Array(items) => {
            let (head, rest) = path.split_first().ok_or("empty key")?;
            let i: usize = head
                .parse()
                .map_err(|_| format!("`{head}` is not an array index"))?;
            let item = items
                .get_mut(i)
                .ok_or_else(|| format!("index {i} out of range"))?;
            if rest.is_empty() {
                *item = value;
                Ok(())
            } else {
                set_in_value(item, rest, value)
            }
        }
        _ => Err(format!("`{}` is not a table", path[0])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let again = PipelineConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(
            PipelineConfig::from_toml_str("").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn env_overrides_reach_nested_keys_and_arrays() {
        let cfg = PipelineConfig::load(
            None,
            vars(&[
                ("AXRL_TRAIN__EPISODES", "3"),
                ("AXRL_SEED", "42"),
                ("AXRL_OUTPUT_DIR", "elsewhere"),
                ("UNRELATED", "1"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.train.episodes, 3);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));

        let mut table: toml::Table = PipelineConfig::default().to_toml().parse().unwrap();
        apply_env_overrides(&mut table, vars(&[("AXRL_PROTOTYPES__1__LAMBDA", "2.5")])).unwrap();
        let cfg: PipelineConfig = toml::Value::Table(table).try_into().unwrap();
        assert_eq!(cfg.prototypes[1].lambda, Some(2.5));
    }

    #[test]
    fn bad_overrides_name_the_key() {
        let err = PipelineConfig::load(None, vars(&[("AXRL_SEED__X", "1")])).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let err = PipelineConfig::load(None, vars(&[("AXRL_WORKERS", "0")])).unwrap_err();
        assert!(err.to_string().contains("`workers`"), "{err}");
    }

    #[test]
    fn missing_csv_without_fallback_names_the_key() {
        let text = "[data.property]\ncsv = \"/definitely/not/here.csv\"\nsynth_fallback = false\n";
        let err = PipelineConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("data.property.csv"), "{err}");
    }

    #[test]
    fn prototype_count_and_uniqueness_are_enforced() {
        let mut cfg = PipelineConfig::default();
        cfg.prototypes.pop();
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("`prototypes`"));
        let mut cfg = PipelineConfig::default();
        cfg.prototypes[4].label = Prototype::Openness;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("prototypes[4].label"));
    }

    #[test]
    fn seeds_differ_per_component_and_follow_the_global_seed() {
        let cfg = PipelineConfig::default();
        let mut seeds: Vec<u64> = SeriesKind::ALL
            .iter()
            .map(|&k| cfg.seed_for(SeedStream::Series(k)))
            .collect();
        seeds.extend(
            Prototype::ALL
                .iter()
                .map(|&p| cfg.seed_for(SeedStream::Agent(p))),
        );
        let unique: HashSet<u64> = seeds.iter().copied().collect();
        assert_eq!(unique.len(), seeds.len());
        let other = PipelineConfig {
            seed: 1,
            ..PipelineConfig::default()
        };
        assert_ne!(
            other.seed_for(SeedStream::Rollout),
            cfg.seed_for(SeedStream::Rollout)
        );
        assert_eq!(cfg.rollout_seeds().len(), 20);
    }

    #[test]
    fn per_agent_overrides_apply() {
        let mut cfg = PipelineConfig::default();
        cfg.prototypes[2].lambda = Some(7.0);
        cfg.prototypes[2].episodes = Some(1);
        let t = cfg.train_config_for(&cfg.prototypes[2]);
        assert_eq!((t.lambda, t.episodes), (7.0, 1));
        assert_eq!(
            cfg.train_config_for(&cfg.prototypes[0]).lambda,
            cfg.train.lambda
        );
    }

    #[test]
    fn horizon_window_accounts_for_warm_up() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.price_months(), 336 + 26);
        assert_eq!(cfg.data_start().to_string(), "1991-11");
    }
}
