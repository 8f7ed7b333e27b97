//! Run configuration: defaults, then an optional JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ropelab::basis::ExtrapolationParams;
use ropelab::bounds::BoundSweepConfig;
use ropelab::output::SCHEMA_VERSION;
use ropelab::toy::{ExtensionMethod, ToyModelConfig, TrainingParams};

use crate::error::CliError;

pub const OUT_DIR_ENV: &str = "ROPELAB_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "out";

/// A parsed config file: the command parameters plus the optional output
/// directory.
pub struct FileConfig<C> {
    pub params: C,
    pub out_dir: Option<PathBuf>,
}

/// Reads `path` into `C`. The file may carry `schema_version` and `out_dir`
/// next to the command's own fields; anything else unknown is rejected.
pub fn load<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<FileConfig<C>, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig {
            params: C::default(),
            out_dir: None,
        });
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let bad = |msg: String| CliError::Args(format!("config {}: {msg}", path.display()));
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let object = value
        .as_object_mut()
        .ok_or_else(|| bad("expected a JSON object".into()))?;
    if let Some(v) = object.remove("schema_version") {
        if v.as_u64() != Some(u64::from(SCHEMA_VERSION)) {
            return Err(bad(format!("unsupported schema_version {v}")));
        }
    }
    let out_dir = match object.remove("out_dir") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => return Err(bad(format!("out_dir must be a string, got {other}"))),
    };
    let params = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    Ok(FileConfig { params, out_dir })
}

/// Flag, then environment, then config file, then the default.
pub fn resolve_out_dir(flag: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or(file)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Sets `target` when the flag was given.
pub fn set<T>(target: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *target = v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FigExtrapolationConfig {
    pub seed: u64,
    pub d: usize,
    pub c: f64,
    pub window: usize,
    pub eval_end: usize,
    pub ridge_eps: f64,
    pub interp_start: f64,
    pub interp_end: f64,
    pub interp_step: f64,
}

impl Default for FigExtrapolationConfig {
    fn default() -> Self {
        let study = ExtrapolationParams::default();
        Self {
            seed: study.seed,
            d: study.d,
            c: study.c,
            window: study.window,
            eval_end: study.eval_end,
            ridge_eps: study.ridge_eps,
            interp_start: 25.0,
            interp_end: 75.0,
            interp_step: 0.125,
        }
    }
}

impl FigExtrapolationConfig {
    pub fn study(&self) -> ExtrapolationParams {
        ExtrapolationParams {
            seed: self.seed,
            d: self.d,
            c: self.c,
            window: self.window,
            eval_end: self.eval_end,
            ridge_eps: self.ridge_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BCurveConfig {
    pub d: usize,
    pub c: f64,
    pub s_end: u64,
}

impl Default for BCurveConfig {
    fn default() -> Self {
        Self {
            d: 128,
            c: 10_000.0,
            s_end: 4096,
        }
    }
}

pub type VerifyBoundsConfig = BoundSweepConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub window: usize,
    pub steps: usize,
    /// Share of copy documents in the training corpus.
    pub copy_fraction: f64,
    /// Leading steps trained on copy documents only.
    pub copy_warmup_steps: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub rope_base: f64,
    pub training: TrainingParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ToyModelConfig::default();
        Self {
            seed: 0,
            window: model.trained_window,
            steps: 3000,
            copy_fraction: 0.5,
            copy_warmup_steps: 1200,
            vocab_size: model.vocab_size,
            d_model: model.d_model,
            n_heads: model.n_heads,
            n_layers: model.n_layers,
            rope_base: model.rope_base,
            training: TrainingParams {
                learning_rate: 3e-3,
                ..TrainingParams::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ToyModelConfig {
        ToyModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            trained_window: self.window,
            seed: self.seed,
            rope_base: self.rope_base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtendConfig {
    /// Defaults to `pretrained.ckpt` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    /// Defaults to twice the trained window.
    pub extended_window: Option<usize>,
    pub method: ExtensionMethod,
    /// Fine-tuning steps after the extension; 0 skips fine-tuning.
    pub steps: usize,
    pub copy_fraction: f64,
    pub training: TrainingParams,
}

impl Default for ExtendConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            seed: 0,
            extended_window: None,
            method: ExtensionMethod::PositionInterpolation,
            steps: 100,
            copy_fraction: 0.5,
            training: TrainingParams {
                learning_rate: 1e-3,
                warmup_steps: 10,
                ..TrainingParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalPplConfig {
    /// Defaults to `pretrained.ckpt` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    /// Defaults to the model's context window.
    pub window: Option<usize>,
    /// Defaults to half the evaluation window.
    pub stride: Option<usize>,
    pub docs: usize,
    /// Defaults to twice the trained window.
    pub doc_len: Option<usize>,
}

impl Default for EvalPplConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            seed: 99,
            window: None,
            stride: None,
            docs: 8,
            doc_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalPasskeyConfig {
    /// Defaults to `pretrained.ckpt` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    /// Defaults to the model's context window.
    pub extended_window: Option<usize>,
    pub distances: usize,
    pub trials: usize,
}

impl Default for EvalPasskeyConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            seed: 5,
            extended_window: None,
            distances: 32,
            trials: 10,
        }
    }
}
