//! Run configuration: the TOML schema every stage runs under, defaults
//! pinned to the audit protocol, and the protocol hash that keeps artifacts
//! produced under different protocols out of one run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use relaudit::bootstrap::{DEFAULT_N_RESAMPLES, DEFAULT_SEED};
use relaudit::calibration::{DEFAULT_N_BINS, DEFAULT_VPR_THRESHOLD};
use relaudit::datamodel::{PhrasingId, VariantId};
use relaudit::extraction::{EVAL_CONSTRAINED, EVAL_FIRST_CHAR, EVAL_REGEX};
use relaudit::prompts::TaskType;

use crate::AppError;

/// Evaluation examples drawn per dataset under the audit protocol.
pub const DEFAULT_SAMPLE_SIZE: usize = 500;

// ─── sections ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub sample_size: usize,
    pub vpr_threshold: f64,
    pub n_bins: usize,
    pub n_resamples: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: DEFAULT_SEED,
            sample_size: DEFAULT_SAMPLE_SIZE,
            vpr_threshold: DEFAULT_VPR_THRESHOLD,
            n_bins: DEFAULT_N_BINS,
            n_resamples: DEFAULT_N_RESAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Example corpus, one JSONL file covering every configured dataset.
    pub examples: Option<PathBuf>,
    /// Recorded transcripts: a JSONL file or a directory of them. Used by
    /// `score` when the run directory holds no generated transcripts.
    pub transcripts: Option<PathBuf>,
    /// Recorded constrained re-ask answers for offline repair.
    pub recorded_answers: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellsSection {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub variants: Vec<VariantId>,
    pub phrasings: Vec<PhrasingId>,
}

impl Default for CellsSection {
    fn default() -> Self {
        CellsSection {
            models: Vec::new(),
            datasets: Vec::new(),
            variants: VariantId::ALL.to_vec(),
            phrasings: vec![PhrasingId::Decimal01],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatesSection {
    /// Builtin template family: classification, reasoning, or qa.
    pub task_type: String,
    /// Template file overriding the builtin set when present.
    pub path: Option<PathBuf>,
}

impl Default for TemplatesSection {
    fn default() -> Self {
        TemplatesSection {
            task_type: TaskType::Reasoning.as_str().to_string(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSection {
    /// Evaluator whose verdicts drive accuracy, spread, and calibration.
    pub primary: String,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        EvaluatorSection {
            primary: EVAL_FIRST_CHAR.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub base_url: String,
    /// Backend-side model name; defaults to the cell's model id.
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_in_flight() -> usize {
    4
}

fn default_retry_limit() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub cells: CellsSection,
    pub templates: TemplatesSection,
    pub evaluator: EvaluatorSection,
    pub backend: Option<BackendSection>,
    /// Model sizes in billions of parameters; feeds the correlation panel.
    pub sizes: BTreeMap<String, f64>,
}

// ─── loading ───

impl RunConfig {
    /// Parse the TOML at `path`, resolve its relative paths against the
    /// file's directory, apply the seed override, and validate.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<RunConfig, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| AppError::Data(format!("bad config {}: {e}", path.display())))?;
        if let Some(seed) = seed_override {
            config.run.seed = seed;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |slot: &mut Option<PathBuf>| {
            if let Some(path) = slot {
                if path.is_relative() {
                    *path = base.join(&path);
                }
            }
        };
        fix(&mut self.corpus.examples);
        fix(&mut self.corpus.transcripts);
        fix(&mut self.corpus.recorded_answers);
        fix(&mut self.templates.path);
    }

    pub fn validate(&self) -> Result<(), AppError> {
        if self.run.n_bins != DEFAULT_N_BINS {
            return Err(AppError::Data(format!(
                "n_bins is pinned to {DEFAULT_N_BINS} by the audit protocol, got {}",
                self.run.n_bins
            )));
        }
        if !(self.run.vpr_threshold > 0.0 && self.run.vpr_threshold <= 1.0) {
            return Err(AppError::Data(format!(
                "vpr_threshold must lie in (0, 1], got {}",
                self.run.vpr_threshold
            )));
        }
        if self.run.sample_size == 0 {
            return Err(AppError::Data("sample_size must be positive".into()));
        }
        if self.run.n_resamples == 0 {
            return Err(AppError::Data("n_resamples must be positive".into()));
        }
        let known = [EVAL_FIRST_CHAR, EVAL_REGEX, EVAL_CONSTRAINED];
        if !known.contains(&self.evaluator.primary.as_str()) {
            return Err(AppError::Data(format!(
                "unknown primary evaluator {:?}; expected one of {}",
                self.evaluator.primary,
                known.join(", ")
            )));
        }
        self.task_type()?;
        check_unique("models", &self.cells.models)?;
        check_unique("datasets", &self.cells.datasets)?;
        check_unique(
            "variants",
            &self.cells.variants.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
        )?;
        check_unique(
            "phrasings",
            &self.cells.phrasings.iter().map(|p| p.as_str()).collect::<Vec<_>>(),
        )?;
        for (model, &size) in &self.sizes {
            if !(size.is_finite() && size > 0.0) {
                return Err(AppError::Data(format!(
                    "size for {model} must be a positive number, got {size}"
                )));
            }
        }
        Ok(())
    }

    pub fn task_type(&self) -> Result<TaskType, AppError> {
        match self.templates.task_type.as_str() {
            "classification" => Ok(TaskType::Classification),
            "reasoning" => Ok(TaskType::Reasoning),
            "qa" => Ok(TaskType::Qa),
            other => Err(AppError::Data(format!(
                "unknown task_type {other:?}; expected classification, reasoning, or qa"
            ))),
        }
    }
}

fn check_unique<S: AsRef<str>>(what: &str, values: &[S]) -> Result<(), AppError> {
    let mut seen = std::collections::BTreeSet::new();
    for value in values {
        if !seen.insert(value.as_ref()) {
            return Err(AppError::Data(format!(
                "[cells] {what} lists {:?} twice",
                value.as_ref()
            )));
        }
    }
    Ok(())
}

// ─── protocol hash ───

/// The serialized protocol identity. Field order is the hash layout, so a
/// new protocol-relevant config field must be added here to participate.
#[derive(Serialize)]
struct ProtocolFields<'a> {
    seed: u64,
    sample_size: usize,
    vpr_threshold: f64,
    n_bins: usize,
    n_resamples: usize,
    models: &'a [String],
    datasets: &'a [String],
    variants: Vec<&'static str>,
    phrasings: Vec<&'static str>,
    evaluator: &'a str,
    templates: String,
}

impl RunConfig {
    /// Hex SHA-256 over the protocol-relevant fields only. Corpus locations,
    /// backend settings, and output options do not participate: the same
    /// protocol reached through a different backend URL or emitted in a
    /// different format yields artifacts that mix freely.
    pub fn protocol_hash(&self) -> Result<String, AppError> {
        let templates = match &self.templates.path {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| {
                    AppError::Data(format!(
                        "cannot read template file {}: {e}",
                        path.display()
                    ))
                })?;
                // Hash the template text, not its path: moving the file does
                // not change the protocol, editing it does.
                format!("file:{}", hex_digest(&Sha256::digest(&bytes)))
            }
            None => format!("builtin:{}", self.task_type()?.as_str()),
        };
        let fields = ProtocolFields {
            seed: self.run.seed,
            sample_size: self.run.sample_size,
            vpr_threshold: self.run.vpr_threshold,
            n_bins: self.run.n_bins,
            n_resamples: self.run.n_resamples,
            models: &self.cells.models,
            datasets: &self.cells.datasets,
            variants: self.cells.variants.iter().map(|v| v.as_str()).collect(),
            phrasings: self.cells.phrasings.iter().map(|p| p.as_str()).collect(),
            evaluator: &self.evaluator.primary,
            templates,
        };
        let bytes = serde_json::to_vec(&fields).expect("protocol fields serialize");
        Ok(hex_digest(&Sha256::digest(&bytes)))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for byte in bytes {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

// ─── tests ───
