//! Scenario configuration: TOML with `key=value` overrides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AdversaryConfig;
use crate::algebra::{AlgebraKind, AlgebraSpec};
use crate::identity::{KidMode, DEFAULT_ADMIN_BITS, MAX_BITS};
use crate::protocol::{AbortMode, DEFAULT_RETRY_BUDGET};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Random,
    /// Every `bits`-bit prefix is taken by exactly one peer.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n: usize,
    pub k: usize,
    pub bits: u8,
    pub seed: u64,
    pub mode: AbortMode,
    pub repeats: u32,
    pub kid_mode: KidMode,
    pub admin_bits: usize,
    pub layout: Layout,
    pub algebra: AlgebraKind,
    pub options: u32,
    pub splitting: bool,
    /// Count containers in confirmation traffic towards L and R.
    pub robust_accounting: bool,
    pub retry_budget: u32,
    pub adversary: AdversaryConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n: 16,
            k: 20,
            bits: MAX_BITS as u8,
            seed: 0,
            mode: AbortMode::Degrade,
            repeats: 10,
            kid_mode: KidMode::Token,
            admin_bits: DEFAULT_ADMIN_BITS,
            layout: Layout::Random,
            algebra: AlgebraKind::Plurality,
            options: 2,
            splitting: false,
            robust_accounting: false,
            retry_budget: DEFAULT_RETRY_BUDGET,
            adversary: AdversaryConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn spec(&self) -> AlgebraSpec {
        AlgebraSpec {
            kind: self.algebra,
            options: self.options,
            splitting: self.splitting,
        }
    }

    /// Applies `key=value`; dotted keys address nested tables. Values are
    /// TOML literals, bare words are taken as strings.
    pub fn apply_override(&self, assignment: &str) -> Result<Self, ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
        let key = key.trim();
        let raw = raw.trim();
        if key.is_empty() {
            return Err(ConfigError::Override(assignment.to_string()));
        }
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cursor = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| ConfigError::Parse(format!("`{key}` is not a table path")))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) {
                    return Err(ConfigError::Parse(format!("unknown key `{key}`")));
                }
                table.insert(part.to_string(), value.clone());
                break;
            }
            cursor = table
                .get_mut(*part)
                .ok_or_else(|| ConfigError::Parse(format!("unknown key `{key}`")))?;
        }
        let c: ScenarioConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.bits == 0 || self.bits as usize > MAX_BITS {
            return bad(format!("bits must lie in 1..={MAX_BITS}"));
        }
        if self.bits < 64 && (self.n as u128) > (1u128 << self.bits) {
            return bad(format!("{} peers do not fit into {} bits", self.n, self.bits));
        }
        if self.admin_bits < 512 {
            return bad("admin_bits must be at least 512".into());
        }
        if self.retry_budget == 0 {
            return bad("retry_budget must be at least 1".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        self.spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.adversary.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.layout == Layout::Balanced {
            if self.kid_mode != KidMode::SimulationPk {
                return bad("the balanced layout needs kid_mode = \"simulation-pk\"".into());
            }
            if self.bits > 16 || self.n != 1usize << self.bits {
                return bad("the balanced layout needs n = 2^bits with bits <= 16".into());
            }
            if self.k < self.n / 2 {
                return bad("the balanced layout needs k >= n/2 so that buckets are exhaustive".into());
            }
        }
        Ok(())
    }
}
