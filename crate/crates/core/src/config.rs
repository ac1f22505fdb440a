//! Run configuration.
//!
//! A single YAML file governs anonymization, model selection, grading
//! policies and paths. Unknown keys are rejected so that a misspelled
//! privacy flag fails loudly instead of silently falling back to a default.
//!
//! ```yaml
//! grading:
//!   anonymize: true
//!   hint_leak_min_run: 24
//!   correction_credit_fraction: 1.0
//!   late_policy: { per_day_fraction: 0.1, grace_minutes: 0, cap_fraction: 1.0 }
//! llm:
//!   endpoint_url: http://127.0.0.1:11434
//!   grader_model: gpt-oss:120b
//!   segmenter_model: gpt-oss:20b
//!   max_retries: 3
//! report:
//!   compiler: pdflatex
//!   repair_max_attempts: 3
//! pipeline:
//!   worker_count: 2
//! paths:
//!   output_dir: out
//! ```

use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

/// Environment variable that may hold the config path when no flag is given.
pub const CONFIG_ENV: &str = "LATA_CONFIG";

pub const DEFAULT_GRADER_MODEL: &str = "gpt-oss:120b";
pub const DEFAULT_SEGMENTER_MODEL: &str = "gpt-oss:20b";
pub const DEFAULT_ENDPOINT: &str = "http://127.0.0.1:11434";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed YAML: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
}

impl ConfigError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Validation {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub grading: GradingConfig,
    pub llm: LlmConfig,
    pub report: ReportConfig,
    pub pipeline: PipelineConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradingConfig {
    pub anonymize: bool,
    pub late_policy: LatePolicy,
    /// Share of a correction's improvement that is credited, in `[0, 1]`.
    pub correction_credit_fraction: f64,
    /// Minimum shared character run between a hint and the reference
    /// solution that counts as a leak.
    pub hint_leak_min_run: usize,
}

impl Default for GradingConfig {
    fn default() -> Self {
        Self {
            anonymize: true,
            late_policy: LatePolicy::default(),
            correction_credit_fraction: 1.0,
            hint_leak_min_run: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub endpoint_url: Url,
    pub grader_model: String,
    pub segmenter_model: String,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub in_flight_limit: usize,
    pub max_output_tokens: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint_url: Url::parse(DEFAULT_ENDPOINT).expect("default endpoint parses"),
            grader_model: DEFAULT_GRADER_MODEL.to_string(),
            segmenter_model: DEFAULT_SEGMENTER_MODEL.to_string(),
            max_retries: 3,
            timeout_secs: 600.0,
            in_flight_limit: 1,
            max_output_tokens: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Compiler program name or path, or `builtin:check` for the in-process
    /// structural checker.
    pub compiler: String,
    pub repair_max_attempts: u32,
    pub compile_timeout_secs: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            compiler: "pdflatex".to_string(),
            repair_max_attempts: 3,
            compile_timeout_secs: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub worker_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { worker_count: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub export_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assignment_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Linear per-day late deduction with a cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatePolicy {
    pub per_day_fraction: f64,
    pub grace_minutes: u32,
    pub cap_fraction: f64,
}

impl Default for LatePolicy {
    fn default() -> Self {
        Self {
            per_day_fraction: 0.1,
            grace_minutes: 0,
            cap_fraction: 1.0,
        }
    }
}

impl LatePolicy {
    /// Fraction of the raw score deducted for a submission.
    ///
    /// Any started day past `due + grace` counts as a full day.
    pub fn penalty(&self, submitted: DateTime<FixedOffset>, due: DateTime<FixedOffset>) -> f64 {
        let deadline = due + chrono::Duration::minutes(i64::from(self.grace_minutes));
        let late = submitted.signed_duration_since(deadline);
        if late <= chrono::Duration::zero() {
            return 0.0;
        }
        let days = (late.num_milliseconds() as f64 / 86_400_000.0).ceil();
        (self.per_day_fraction * days).min(self.cap_fraction)
    }
}

impl Config {
    pub fn anonymize(&self) -> bool {
        self.grading.anonymize
    }

    /// Parses and validates a config from YAML text.
    pub fn from_yaml_str(text: &str) -> Result<Config, ConfigError> {
        let mut value: serde_yaml::Value =
            serde_yaml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if value.is_null() {
            value = serde_yaml::Value::Mapping(Default::default());
        }
        let config: Config = serde_path_to_error::deserialize(value).map_err(|err| {
            let path = err.path().to_string();
            let message = err.inner().to_string();
            if let Some(field) = unknown_field_name(&message) {
                let key = if path.is_empty() || path == "." {
                    field
                } else if path.ends_with(&field) {
                    path
                } else {
                    format!("{path}.{field}")
                };
                ConfigError::UnknownKey { key }
            } else {
                ConfigError::Validation { key: path, message }
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_yaml_string(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.grading;
        check_fraction("grading.correction_credit_fraction", g.correction_credit_fraction)?;
        check_fraction("grading.late_policy.per_day_fraction", g.late_policy.per_day_fraction)?;
        check_fraction("grading.late_policy.cap_fraction", g.late_policy.cap_fraction)?;
        if g.hint_leak_min_run < 8 {
            return Err(ConfigError::invalid("grading.hint_leak_min_run", "must be at least 8"));
        }

        let l = &self.llm;
        if l.endpoint_url.host_str().is_none_or(str::is_empty) {
            return Err(ConfigError::invalid("llm.endpoint_url", "URL has no host"));
        }
        if l.grader_model.trim().is_empty() {
            return Err(ConfigError::invalid("llm.grader_model", "must not be empty"));
        }
        if l.segmenter_model.trim().is_empty() {
            return Err(ConfigError::invalid("llm.segmenter_model", "must not be empty"));
        }
        if !(l.timeout_secs.is_finite() && l.timeout_secs > 0.0) {
            return Err(ConfigError::invalid("llm.timeout_secs", "must be positive"));
        }
        if l.in_flight_limit == 0 {
            return Err(ConfigError::invalid("llm.in_flight_limit", "must be at least 1"));
        }

        let r = &self.report;
        if r.compiler.trim().is_empty() {
            return Err(ConfigError::invalid("report.compiler", "must not be empty"));
        }
        if !(r.compile_timeout_secs.is_finite() && r.compile_timeout_secs > 0.0) {
            return Err(ConfigError::invalid("report.compile_timeout_secs", "must be positive"));
        }
        if self.pipeline.worker_count == 0 {
            return Err(ConfigError::invalid("pipeline.worker_count", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_fraction(key: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, format!("{v} is outside [0, 1]")))
    }
}

fn unknown_field_name(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest.split('`').next()?.to_string())
}

/// Loads and validates the config file at `path`.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Config::from_yaml_str(&text)
}

/// Picks the config path: an explicit flag wins over `LATA_CONFIG`.
pub fn resolve_config_path(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
}
