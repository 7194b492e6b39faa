//! Batch experiment runner: configures a task, trains the baseline and the
//! energy-based variants, applies post-hoc calibrators, and writes the
//! comparison table plus all plot-data files.
//!
//! A run covers the cross product of the configured methods and seeds.
//! Within one seed every method shares the encoder initialization and the
//! minibatch sequence, so method columns are paired; the noise language
//! model is trained once per run and its sample stream once per seed,
//! shared read-only by the three energy variants. Every summary number is
//! recomputable from the emitted per-seed CSV rows, and a rerun with the
//! same config produces bitwise-identical files.

use crate::calibration::{
    apply_scaling_binning, apply_temperature, ece, energy_entropy_scatter, fit_scaling_binning,
    fit_temperature, records_from_posteriors, save_energy_histogram_csv, save_records_csv,
    save_reliability_csv, save_scatter_csv, save_shift_csv, confidence_shift_report,
    reliability_data, CalibError, CalibratorParams,
};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{generate_task, load_split, DataError, DatasetSplit, TaskSpec, Vocab};
use crate::encoder::{EncoderConfig, EncoderModel, HeadKind};
use crate::energy::{
    precompute_noise_stream, train_joint, EnergyError, EnergyVariant, NceConfig, NoiseSource,
    TrainOutcome, TrainRecord, TrainSchedule,
};
use crate::model::ModelError;
use crate::noise::{
    finetune_mlm, LmSchedule, MaskSpec, NoiseError, NoiseLm, NoiseLmConfig, NoiseSample,
};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config:\n{}", format_config_errors(.0))]
    Config(Vec<ConfigError>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path} line {line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
}

/// One field-addressed validation failure.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.msg)
    }
}

fn format_config_errors(errors: &[ConfigError]) -> String {
    errors
        .iter()
        .map(|e| format!("  {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Table rows the runner knows how to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    TScalTrain,
    TScalDev,
    ScalBinTrain,
    ScalBinDev,
    EbmScalar,
    EbmHidden,
    EbmSharpHidden,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Baseline,
        Method::TScalTrain,
        Method::TScalDev,
        Method::ScalBinTrain,
        Method::ScalBinDev,
        Method::EbmScalar,
        Method::EbmHidden,
        Method::EbmSharpHidden,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::TScalTrain => "t_scal_train",
            Method::TScalDev => "t_scal_dev",
            Method::ScalBinTrain => "scal_bin_train",
            Method::ScalBinDev => "scal_bin_dev",
            Method::EbmScalar => "ebm_scalar",
            Method::EbmHidden => "ebm_hidden",
            Method::EbmSharpHidden => "ebm_sharp_hidden",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// The energy definition a joint-training method uses.
    pub fn variant(self) -> Option<EnergyVariant> {
        match self {
            Method::EbmScalar => Some(EnergyVariant::Scalar),
            Method::EbmHidden => Some(EnergyVariant::Hidden),
            Method::EbmSharpHidden => Some(EnergyVariant::SharpHidden),
            _ => None,
        }
    }

    /// Post-hoc calibrator methods refit nothing in the encoder; they reuse
    /// the baseline classifier of the same seed.
    pub fn is_calibrator(self) -> bool {
        matches!(
            self,
            Method::TScalTrain | Method::TScalDev | Method::ScalBinTrain | Method::ScalBinDev
        )
    }

    /// Whether a calibrator fits on the dev split (vs the train split).
    pub fn fits_on_dev(self) -> bool {
        matches!(self, Method::TScalDev | Method::ScalBinDev)
    }
}

/// Where the dataset comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TaskSource {
    Spec(TaskSpec),
    Path(PathBuf),
}

/// Encoder hyperparameters exposed to the config file; vocabulary, class
/// count, and sequence budget are derived from the task.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub head: HeadKind,
    pub dropout: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ff_mult: 2,
            head: HeadKind::Linear,
            dropout: 0.1,
        }
    }
}

/// Noise language model hyperparameters exposed to the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseLmSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
}

impl Default for NoiseLmSettings {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ff_mult: 2,
            dropout: 0.1,
        }
    }
}

/// Noise LM finetuning schedule (the run seed is derived internally).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmScheduleSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_frac: f64,
}

impl Default for LmScheduleSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            holdout_frac: 0.1,
        }
    }
}

/// Classifier training schedule (the per-seed run seed is derived).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: 7e-4,
            eval_every: 100,
        }
    }
}

/// Fully validated and default-filled experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub task: TaskSource,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Noise ratio K: weight and count of noise samples per data sample.
    pub k: usize,
    /// Mask ratio M for noise generation.
    pub mask_ratio: f64,
    /// Sampler truncation for noise generation.
    pub top_k: usize,
    /// Per-class ECE bins for evaluation, and the scaling-binning bin count.
    pub ece_bins: usize,
    pub schedule: ScheduleSettings,
    pub encoder: EncoderSettings,
    pub noise_lm: NoiseLmSettings,
    pub lm_schedule: LmScheduleSettings,
    /// Directory holding a pretrained noise LM (noise_lm.ckpt + .json);
    /// when set, the run loads it instead of finetuning.
    pub noise_lm_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

const KNOWN_KEYS: [&str; 14] = [
    "task",
    "dataset_path",
    "methods",
    "seeds",
    "k",
    "mask_ratio",
    "top_k",
    "ece_bins",
    "schedule",
    "encoder",
    "noise_lm",
    "lm_schedule",
    "noise_lm_dir",
    "out_dir",
];

fn get_uint(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    default: u64,
    errors: &mut Vec<ConfigError>,
) -> u64 {
    match obj.get(key) {
        None => default,
        Some(v) => match v.as_u64() {
            Some(n) => n,
            None => {
                errors.push(ConfigError {
                    field: key.into(),
                    msg: format!("expected a nonnegative integer, got {v}"),
                });
                default
            }
        },
    }
}

fn get_f64(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    default: f64,
    errors: &mut Vec<ConfigError>,
) -> f64 {
    match obj.get(key) {
        None => default,
        Some(v) => match v.as_f64() {
            Some(x) => x,
            None => {
                errors.push(ConfigError {
                    field: key.into(),
                    msg: format!("expected a number, got {v}"),
                });
                default
            }
        },
    }
}

fn get_section<T: Default + for<'de> Deserialize<'de>>(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    errors: &mut Vec<ConfigError>,
) -> T {
    match obj.get(key) {
        None => T::default(),
        Some(v) => match serde_json::from_value::<T>(v.clone()) {
            Ok(t) => t,
            Err(e) => {
                errors.push(ConfigError {
                    field: key.into(),
                    msg: e.to_string(),
                });
                T::default()
            }
        },
    }
}

/// Validate a raw config string; errors are aggregated and field-addressed
/// rather than failing on the first problem.
pub fn validate_config_str(raw: &str) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let mut errors = Vec::new();
    let required = |errors: &mut Vec<ConfigError>| {
        errors.push(ConfigError {
            field: "methods".into(),
            msg: "required: nonempty list of methods".into(),
        });
        errors.push(ConfigError {
            field: "seeds".into(),
            msg: "required: nonempty list of seeds".into(),
        });
    };
    if raw.trim().is_empty() {
        required(&mut errors);
        return Err(errors);
    }
    let value: Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(e) => {
            return Err(vec![ConfigError {
                field: "config".into(),
                msg: format!("not valid JSON: {e}"),
            }])
        }
    };
    let Some(obj) = value.as_object() else {
        return Err(vec![ConfigError {
            field: "config".into(),
            msg: "expected a JSON object".into(),
        }]);
    };
    for key in obj.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            errors.push(ConfigError {
                field: key.clone(),
                msg: "unknown field".into(),
            });
        }
    }

    let methods: Vec<Method> = match obj.get("methods") {
        None => {
            errors.push(ConfigError {
                field: "methods".into(),
                msg: "required: nonempty list of methods".into(),
            });
            Vec::new()
        }
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for (i, item) in items.iter().enumerate() {
                match item.as_str().and_then(Method::parse) {
                    Some(m) => out.push(m),
                    None => errors.push(ConfigError {
                        field: format!("methods[{i}]"),
                        msg: format!(
                            "unknown method {item}; expected one of {}",
                            Method::ALL.map(Method::name).join(", ")
                        ),
                    }),
                }
            }
            if items.is_empty() {
                errors.push(ConfigError {
                    field: "methods".into(),
                    msg: "at least one method is required".into(),
                });
            }
            out
        }
        Some(other) => {
            errors.push(ConfigError {
                field: "methods".into(),
                msg: format!("expected a list, got {other}"),
            });
            Vec::new()
        }
    };

    let seeds: Vec<u64> = match obj.get("seeds") {
        None => {
            errors.push(ConfigError {
                field: "seeds".into(),
                msg: "required: nonempty list of seeds".into(),
            });
            Vec::new()
        }
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for (i, item) in items.iter().enumerate() {
                match item.as_u64() {
                    Some(s) => out.push(s),
                    None => errors.push(ConfigError {
                        field: format!("seeds[{i}]"),
                        msg: format!("expected a nonnegative integer, got {item}"),
                    }),
                }
            }
            if items.is_empty() {
                errors.push(ConfigError {
                    field: "seeds".into(),
                    msg: "at least one seed is required".into(),
                });
            }
            out
        }
        Some(other) => {
            errors.push(ConfigError {
                field: "seeds".into(),
                msg: format!("expected a list, got {other}"),
            });
            Vec::new()
        }
    };

    let k = get_uint(obj, "k", 8, &mut errors) as usize;
    if k == 0 {
        errors.push(ConfigError {
            field: "k".into(),
            msg: "K must be ≥ 1".into(),
        });
    }
    let mask_ratio = get_f64(obj, "mask_ratio", 0.4, &mut errors);
    if !(0.0..=1.0).contains(&mask_ratio) {
        errors.push(ConfigError {
            field: "mask_ratio".into(),
            msg: format!("must be within [0, 1], got {mask_ratio}"),
        });
    }
    let top_k = get_uint(obj, "top_k", 20, &mut errors) as usize;
    if top_k == 0 {
        errors.push(ConfigError {
            field: "top_k".into(),
            msg: "must be ≥ 1".into(),
        });
    }
    let ece_bins = get_uint(obj, "ece_bins", 20, &mut errors) as usize;
    if ece_bins == 0 {
        errors.push(ConfigError {
            field: "ece_bins".into(),
            msg: "must be ≥ 1".into(),
        });
    }

    let task = match (obj.get("task"), obj.get("dataset_path")) {
        (Some(_), Some(_)) => {
            errors.push(ConfigError {
                field: "task".into(),
                msg: "task and dataset_path are mutually exclusive".into(),
            });
            TaskSource::Spec(TaskSpec::default())
        }
        (Some(v), None) => match serde_json::from_value::<TaskSpec>(v.clone()) {
            Ok(spec) => {
                if let Err(e) = spec.validate() {
                    errors.push(ConfigError {
                        field: "task".into(),
                        msg: e.to_string(),
                    });
                }
                TaskSource::Spec(spec)
            }
            Err(e) => {
                errors.push(ConfigError {
                    field: "task".into(),
                    msg: e.to_string(),
                });
                TaskSource::Spec(TaskSpec::default())
            }
        },
        (None, Some(v)) => match v.as_str() {
            Some(p) => TaskSource::Path(PathBuf::from(p)),
            None => {
                errors.push(ConfigError {
                    field: "dataset_path".into(),
                    msg: format!("expected a string path, got {v}"),
                });
                TaskSource::Spec(TaskSpec::default())
            }
        },
        (None, None) => TaskSource::Spec(TaskSpec::default()),
    };

    let schedule: ScheduleSettings = get_section(obj, "schedule", &mut errors);
    if schedule.batch_size == 0 {
        errors.push(ConfigError {
            field: "schedule.batch_size".into(),
            msg: "must be ≥ 1".into(),
        });
    }
    if schedule.eval_every == 0 {
        errors.push(ConfigError {
            field: "schedule.eval_every".into(),
            msg: "must be ≥ 1".into(),
        });
    }
    if !(schedule.lr.is_finite() && schedule.lr > 0.0) {
        errors.push(ConfigError {
            field: "schedule.lr".into(),
            msg: format!("must be positive, got {}", schedule.lr),
        });
    }
    let encoder: EncoderSettings = get_section(obj, "encoder", &mut errors);
    if encoder.d_model == 0 || encoder.n_heads == 0 || encoder.d_model % encoder.n_heads != 0 {
        errors.push(ConfigError {
            field: "encoder".into(),
            msg: format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                encoder.d_model, encoder.n_heads
            ),
        });
    }
    if !(0.0..1.0).contains(&encoder.dropout) {
        errors.push(ConfigError {
            field: "encoder.dropout".into(),
            msg: format!("must be within [0, 1), got {}", encoder.dropout),
        });
    }
    let noise_lm: NoiseLmSettings = get_section(obj, "noise_lm", &mut errors);
    if noise_lm.d_model == 0 || noise_lm.n_heads == 0 || noise_lm.d_model % noise_lm.n_heads != 0 {
        errors.push(ConfigError {
            field: "noise_lm".into(),
            msg: format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                noise_lm.d_model, noise_lm.n_heads
            ),
        });
    }
    let lm_schedule: LmScheduleSettings = get_section(obj, "lm_schedule", &mut errors);
    if lm_schedule.batch_size == 0 {
        errors.push(ConfigError {
            field: "lm_schedule.batch_size".into(),
            msg: "must be ≥ 1".into(),
        });
    }

    let noise_lm_dir = match obj.get("noise_lm_dir") {
        None => None,
        Some(v) => match v.as_str() {
            Some(p) => Some(PathBuf::from(p)),
            None => {
                errors.push(ConfigError {
                    field: "noise_lm_dir".into(),
                    msg: format!("expected a string path, got {v}"),
                });
                None
            }
        },
    };
    let out_dir = match obj.get("out_dir") {
        None => PathBuf::from("out"),
        Some(v) => match v.as_str() {
            Some(p) => PathBuf::from(p),
            None => {
                errors.push(ConfigError {
                    field: "out_dir".into(),
                    msg: format!("expected a string path, got {v}"),
                });
                PathBuf::from("out")
            }
        },
    };

    if errors.is_empty() {
        Ok(ExperimentConfig {
            task,
            methods,
            seeds,
            k,
            mask_ratio,
            top_k,
            ece_bins,
            schedule,
            encoder,
            noise_lm,
            lm_schedule,
            noise_lm_dir,
            out_dir,
        })
    } else {
        Err(errors)
    }
}

/// Validate a config file on disk.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let raw = fs::read_to_string(path).map_err(|e| {
        ExperimentError::Config(vec![ConfigError {
            field: "config".into(),
            msg: format!("cannot read {}: {e}", path.display()),
        }])
    })?;
    validate_config_str(&raw).map_err(ExperimentError::Config)
}

/// Test accuracy and ECE of one (method, seed) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub test_acc: f64,
    pub test_ece: f64,
}

/// Outcome of one cell; failures carry the error text and leave the rest
/// of the run untouched.
#[derive(Debug, Clone)]
pub struct CellReport {
    pub method: Method,
    pub seed: u64,
    pub outcome: Result<CellMetrics, String>,
}

/// One aggregated summary row (sample standard deviation, 0 for n = 1).
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: Method,
    pub n_seeds: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_ece: f64,
    pub std_ece: f64,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub cells: Vec<CellReport>,
    pub summary: Vec<SummaryRow>,
    pub out_dir: PathBuf,
}

impl ReportBundle {
    pub fn n_failed(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }
}

const TAG_LM: u64 = 0x71;
const TAG_ENC_INIT: u64 = 0x72;
const TAG_RUN: u64 = 0x73;

/// Per-class reliability diagrams are emitted with 10 bins.
pub const RELIABILITY_BINS: usize = 10;

fn derived_encoder_config(spec: &TaskSpec, settings: &EncoderSettings) -> EncoderConfig {
    EncoderConfig {
        // noise payloads can reach twice the data length
        vocab_size: Vocab::CONTENT_BASE as usize + spec.vocab_size,
        max_seq_len: 2 * spec.len_max,
        d_model: settings.d_model,
        n_layers: settings.n_layers,
        n_heads: settings.n_heads,
        n_classes: spec.n_classes,
        ff_mult: settings.ff_mult,
        head: settings.head,
        dropout: settings.dropout,
    }
}

fn derived_lm_config(spec: &TaskSpec, settings: &NoiseLmSettings) -> NoiseLmConfig {
    NoiseLmConfig {
        vocab_size: Vocab::CONTENT_BASE as usize + spec.vocab_size,
        // generation runs a masked prefix plus up to twice the data length
        max_seq_len: 3 * spec.len_max + 2,
        d_model: settings.d_model,
        n_layers: settings.n_layers,
        n_heads: settings.n_heads,
        ff_mult: settings.ff_mult,
        dropout: settings.dropout,
    }
}

/// Persist a noise LM as a checkpoint plus a JSON sidecar with its config
/// and held-out perplexity trace.
pub fn save_noise_lm(dir: &Path, lm: &NoiseLm, heldout_ppl: &[f64]) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    checkpoint::save(&dir.join("noise_lm.ckpt"), &lm.params.to_named_tensors())?;
    let meta = serde_json::json!({ "cfg": lm.cfg, "heldout_ppl": heldout_ppl });
    let mut w = BufWriter::new(File::create(dir.join("noise_lm.json"))?);
    writeln!(w, "{}", serde_json::to_string_pretty(&meta).expect("serializable"))?;
    w.flush()?;
    Ok(())
}

/// Load a noise LM saved by [`save_noise_lm`].
pub fn load_noise_lm(dir: &Path) -> Result<NoiseLm, ExperimentError> {
    let raw = fs::read_to_string(dir.join("noise_lm.json"))?;
    let meta: Value = serde_json::from_str(&raw).map_err(|e| ExperimentError::Malformed {
        path: dir.join("noise_lm.json").display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let cfg: NoiseLmConfig =
        serde_json::from_value(meta.get("cfg").cloned().unwrap_or(Value::Null)).map_err(|e| {
            ExperimentError::Malformed {
                path: dir.join("noise_lm.json").display().to_string(),
                line: 0,
                msg: format!("cfg: {e}"),
            }
        })?;
    let mut lm = NoiseLm::new(cfg, 0);
    lm.params.load_from(&checkpoint::load(&dir.join("noise_lm.ckpt"))?)?;
    Ok(lm)
}

/// Train the noise LM for a run (or load a pretrained one), returning the
/// model and its held-out perplexity trace (empty when loaded).
pub fn prepare_noise_lm(
    config: &ExperimentConfig,
    split: &DatasetSplit,
) -> Result<(NoiseLm, Vec<f64>), ExperimentError> {
    if let Some(dir) = &config.noise_lm_dir {
        return Ok((load_noise_lm(dir)?, Vec::new()));
    }
    let lm_seed = derive_seed(config.seeds[0], &[TAG_LM]);
    let mut lm = NoiseLm::new(derived_lm_config(&split.spec, &config.noise_lm), lm_seed);
    let corpus: Vec<Vec<u32>> = split.train.iter().map(|e| e.tokens.clone()).collect();
    let schedule = LmSchedule {
        epochs: config.lm_schedule.epochs,
        batch_size: config.lm_schedule.batch_size,
        lr: config.lm_schedule.lr,
        seed: lm_seed,
        holdout_frac: config.lm_schedule.holdout_frac,
    };
    let mask = MaskSpec {
        mask_ratio: config.mask_ratio,
        ..MaskSpec::default()
    };
    let ppls = finetune_mlm(&mut lm, &corpus, &mask, &schedule)?;
    Ok((lm, ppls))
}

/// Materialize the config's dataset (generating or loading it).
pub fn load_dataset_for(config: &ExperimentConfig) -> Result<DatasetSplit, ExperimentError> {
    match &config.task {
        TaskSource::Spec(spec) => Ok(generate_task(spec)?),
        TaskSource::Path(p) => Ok(load_split(p)?),
    }
}

struct CsvWriter {
    w: BufWriter<File>,
}

impl CsvWriter {
    fn create(path: &Path, header: &str) -> Result<Self, ExperimentError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{header}")?;
        Ok(Self { w })
    }

    fn row(&mut self, fields: &[String]) -> Result<(), ExperimentError> {
        writeln!(self.w, "{}", fields.join(","))?;
        Ok(())
    }

    fn finish(mut self) -> Result<(), ExperimentError> {
        self.w.flush()?;
        Ok(())
    }
}

fn write_trajectory(path: &Path, log: &[TrainRecord]) -> Result<(), ExperimentError> {
    let mut w = CsvWriter::create(path, "step,ce,nce,joint,dev_acc,dev_ece")?;
    for r in log {
        w.row(&[
            r.step.to_string(),
            r.ce.to_string(),
            r.nce.to_string(),
            r.joint.to_string(),
            r.dev_acc.to_string(),
            r.dev_ece.to_string(),
        ])?;
    }
    w.finish()
}

/// Accuracy (argmax, first index wins ties) plus ECE of explicit
/// posteriors against labels.
fn metrics_of(
    posteriors: &[Vec<f64>],
    labels: &[usize],
    ece_bins: usize,
) -> Result<CellMetrics, ExperimentError> {
    let mut hits = 0usize;
    for (p, &y) in posteriors.iter().zip(labels) {
        let mut arg = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[arg] {
                arg = i;
            }
        }
        hits += usize::from(arg == y);
    }
    let records = records_from_posteriors(posteriors, labels);
    Ok(CellMetrics {
        test_acc: hits as f64 / labels.len() as f64,
        test_ece: ece(&records, ece_bins)?,
    })
}

/// State shared by all method cells of one seed.
struct SeedContext<'a> {
    seed: u64,
    schedule: TrainSchedule,
    enc_cfg: EncoderConfig,
    split: &'a DatasetSplit,
    baseline: Option<Result<(EncoderModel, TrainOutcome), String>>,
    noise_stream: Option<Result<Vec<NoiseSample>, String>>,
}

impl<'a> SeedContext<'a> {
    fn new(config: &ExperimentConfig, split: &'a DatasetSplit, seed: u64) -> Self {
        Self {
            seed,
            schedule: TrainSchedule {
                steps: config.schedule.steps,
                batch_size: config.schedule.batch_size,
                lr: config.schedule.lr,
                eval_every: config.schedule.eval_every,
                seed: derive_seed(seed, &[TAG_RUN]),
            },
            enc_cfg: derived_encoder_config(&split.spec, &config.encoder),
            split,
            baseline: None,
            noise_stream: None,
        }
    }

    fn fresh_model(&self) -> EncoderModel {
        EncoderModel::new(self.enc_cfg.clone(), derive_seed(self.seed, &[TAG_ENC_INIT]))
    }

    /// Train the CE-only classifier once; calibrator cells reuse it.
    fn baseline(&mut self) -> Result<&(EncoderModel, TrainOutcome), String> {
        if self.baseline.is_none() {
            let mut model = self.fresh_model();
            let result = train_joint(
                &mut model,
                None,
                &NoiseSource::None,
                &self.split.train,
                &self.split.dev,
                &self.schedule,
            )
            .map(|out| (model, out))
            .map_err(|e| e.to_string());
            self.baseline = Some(result);
        }
        self.baseline.as_ref().expect("just set").as_ref().map_err(Clone::clone)
    }

    /// Generate the seed's noise stream once; energy variants share it.
    fn noise_stream(
        &mut self,
        lm: Option<&NoiseLm>,
        mask: &MaskSpec,
        top_k: usize,
        k: usize,
    ) -> Result<&[NoiseSample], String> {
        if self.noise_stream.is_none() {
            let result = match lm {
                None => Err("no noise language model was prepared".to_string()),
                Some(lm) => {
                    precompute_noise_stream(lm, mask, top_k, k, &self.split.train, &self.schedule)
                        .map_err(|e| e.to_string())
                }
            };
            self.noise_stream = Some(result);
        }
        match self.noise_stream.as_ref().expect("just set") {
            Ok(s) => Ok(s.as_slice()),
            Err(e) => Err(e.clone()),
        }
    }
}

fn logits_and_labels(
    model: &EncoderModel,
    set: &[crate::data::Example],
) -> Result<(Vec<Vec<f64>>, Vec<usize>), String> {
    let mut logits = Vec::with_capacity(set.len());
    let mut labels = Vec::with_capacity(set.len());
    for ex in set {
        logits.push(model.logits_vec(&ex.tokens).map_err(|e| e.to_string())?);
        labels.push(ex.label);
    }
    Ok((logits, labels))
}

/// Run the full experiment described by the config. Cell failures are
/// recorded in the returned bundle instead of aborting the run; dataset or
/// noise-model preparation failures abort early.
pub fn run(config: &ExperimentConfig) -> Result<ReportBundle, ExperimentError> {
    fs::create_dir_all(&config.out_dir)?;
    let split = load_dataset_for(config)?;
    let mask = MaskSpec {
        mask_ratio: config.mask_ratio,
        ..MaskSpec::default()
    };
    let any_ebm = config.methods.iter().any(|m| m.variant().is_some());
    let noise_lm = if any_ebm {
        let (lm, ppls) = prepare_noise_lm(config, &split)?;
        if !ppls.is_empty() {
            let mut w = CsvWriter::create(
                &config.out_dir.join("noise_lm_ppl.csv"),
                "epoch,heldout_ppl",
            )?;
            for (i, p) in ppls.iter().enumerate() {
                w.row(&[i.to_string(), p.to_string()])?;
            }
            w.finish()?;
        }
        Some(lm)
    } else {
        None
    };

    let test_tokens: Vec<Vec<u32>> = split.test.iter().map(|e| e.tokens.clone()).collect();
    let test_labels: Vec<usize> = split.test.iter().map(|e| e.label).collect();

    let first_ebm = config.methods.iter().copied().find(|m| m.variant().is_some());
    let mut shift_pair: Option<(EncoderModel, EncoderModel, EnergyVariant)> = None;

    let mut cells: Vec<CellReport> = Vec::new();
    for &seed in &config.seeds {
        let mut ctx = SeedContext::new(config, &split, seed);
        for &method in &config.methods {
            let outcome = run_cell(
                config,
                &mut ctx,
                method,
                noise_lm.as_ref(),
                &mask,
                &test_tokens,
                &test_labels,
                (seed == config.seeds[0] && Some(method) == first_ebm).then_some(&mut shift_pair),
            );
            cells.push(CellReport {
                method,
                seed,
                outcome,
            });
        }
    }

    if let Some((baseline, ebm, variant)) = &shift_pair {
        let rows = confidence_shift_report(baseline, ebm, *variant, &test_tokens)?;
        save_shift_csv(&config.out_dir.join("shift_table.csv"), &rows)?;
    }

    // per-seed rows grouped by method in config order
    let mut per_seed = CsvWriter::create(
        &config.out_dir.join("per_seed.csv"),
        "method,seed,test_acc,test_ece",
    )?;
    for &method in &config.methods {
        for cell in cells.iter().filter(|c| c.method == method) {
            if let Ok(m) = &cell.outcome {
                per_seed.row(&[
                    method.name().to_string(),
                    cell.seed.to_string(),
                    m.test_acc.to_string(),
                    m.test_ece.to_string(),
                ])?;
            }
        }
    }
    per_seed.finish()?;

    let summary: Vec<SummaryRow> = config
        .methods
        .iter()
        .filter_map(|&method| {
            let vals: Vec<&CellMetrics> = cells
                .iter()
                .filter(|c| c.method == method)
                .filter_map(|c| c.outcome.as_ref().ok())
                .collect();
            if vals.is_empty() {
                return None;
            }
            let accs: Vec<f64> = vals.iter().map(|m| m.test_acc).collect();
            let eces: Vec<f64> = vals.iter().map(|m| m.test_ece).collect();
            Some(SummaryRow {
                method,
                n_seeds: vals.len(),
                mean_acc: mean(&accs),
                std_acc: sample_std(&accs),
                mean_ece: mean(&eces),
                std_ece: sample_std(&eces),
            })
        })
        .collect();

    let mut w = CsvWriter::create(
        &config.out_dir.join("summary.csv"),
        "method,n_seeds,mean_acc,std_acc,mean_ece,std_ece",
    )?;
    for row in &summary {
        w.row(&[
            row.method.name().to_string(),
            row.n_seeds.to_string(),
            row.mean_acc.to_string(),
            row.std_acc.to_string(),
            row.mean_ece.to_string(),
            row.std_ece.to_string(),
        ])?;
    }
    w.finish()?;

    let bundle = ReportBundle {
        cells,
        summary,
        out_dir: config.out_dir.clone(),
    };
    write_summary_text(&config.out_dir.join("summary.txt"), &bundle)?;
    Ok(bundle)
}

/// Arithmetic mean in input order.
pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    ctx: &mut SeedContext,
    method: Method,
    noise_lm: Option<&NoiseLm>,
    mask: &MaskSpec,
    test_tokens: &[Vec<u32>],
    test_labels: &[usize],
    shift_slot: Option<&mut Option<(EncoderModel, EncoderModel, EnergyVariant)>>,
) -> Result<CellMetrics, String> {
    let seed = ctx.seed;
    let out = &config.out_dir;
    let suffix = format!("{}_{}", method.name(), seed);
    let posteriors: Vec<Vec<f64>> = match method.variant() {
        Some(variant) => {
            let stream = ctx
                .noise_stream(noise_lm, mask, config.top_k, config.k)?
                .to_vec();
            let mut model = ctx.fresh_model();
            let nce = NceConfig {
                k: config.k,
                variant,
            };
            let outcome = train_joint(
                &mut model,
                Some(&nce),
                &NoiseSource::Cached(&stream),
                &ctx.split.train,
                &ctx.split.dev,
                &ctx.schedule,
            )
            .map_err(|e| e.to_string())?;
            write_trajectory(&out.join(format!("trajectory_{suffix}.csv")), &outcome.log)
                .map_err(|e| e.to_string())?;
            let scatter = energy_entropy_scatter(
                &model,
                variant,
                test_tokens,
                crate::calibration::ENERGY_HIST_BINS,
            )
            .map_err(|e| e.to_string())?;
            save_scatter_csv(&out.join(format!("scatter_{suffix}.csv")), &scatter)
                .map_err(|e| e.to_string())?;
            save_energy_histogram_csv(&out.join(format!("energy_hist_{suffix}.csv")), &scatter)
                .map_err(|e| e.to_string())?;
            let posteriors: Result<Vec<Vec<f64>>, String> = test_tokens
                .iter()
                .map(|x| model.posterior_vec(x).map_err(|e| e.to_string()))
                .collect();
            let posteriors = posteriors?;
            if let Some(slot) = shift_slot {
                let (baseline, _) = ctx.baseline()?;
                *slot = Some((clone_model(baseline), model, variant));
            }
            posteriors
        }
        None if method == Method::Baseline => {
            let (model, outcome) = ctx.baseline()?;
            write_trajectory(&out.join(format!("trajectory_{suffix}.csv")), &outcome.log)
                .map_err(|e| e.to_string())?;
            test_tokens
                .iter()
                .map(|x| model.posterior_vec(x).map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()?
        }
        None => {
            // post-hoc calibrator on the seed's baseline classifier
            let fit_split = if method.fits_on_dev() {
                &ctx.split.dev
            } else {
                &ctx.split.train
            };
            let (model, _) = ctx.baseline()?;
            let (fit_logits, fit_labels) = logits_and_labels(model, fit_split)?;
            let params: CalibratorParams = match method {
                Method::TScalTrain | Method::TScalDev => {
                    fit_temperature(&fit_logits, &fit_labels)
                        .map_err(|e| e.to_string())?
                        .params
                }
                _ => fit_scaling_binning(&fit_logits, &fit_labels, config.ece_bins)
                    .map_err(|e| e.to_string())?,
            };
            let apply = |z: &[f64]| match method {
                Method::TScalTrain | Method::TScalDev => apply_temperature(&params, z),
                _ => apply_scaling_binning(&params, z),
            };
            let mut posteriors = Vec::with_capacity(test_tokens.len());
            for x in test_tokens {
                let z = model.logits_vec(x).map_err(|e| e.to_string())?;
                posteriors.push(apply(&z).map_err(|e| e.to_string())?);
            }
            posteriors
        }
    };

    let records = records_from_posteriors(&posteriors, test_labels);
    let stats = reliability_data(&records, RELIABILITY_BINS).map_err(|e| e.to_string())?;
    save_reliability_csv(&out.join(format!("reliability_{suffix}.csv")), &stats)
        .map_err(|e| e.to_string())?;
    save_records_csv(&out.join(format!("records_{suffix}.csv")), &records)
        .map_err(|e| e.to_string())?;
    metrics_of(&posteriors, test_labels, config.ece_bins).map_err(|e| e.to_string())
}

fn clone_model(model: &EncoderModel) -> EncoderModel {
    let mut copy = EncoderModel::new(model.cfg.clone(), 0);
    copy.params.restore(&model.params.snapshot());
    copy
}

fn write_summary_text(path: &Path, bundle: &ReportBundle) -> Result<(), ExperimentError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "{:<18} {:>3}  {:>8} {:>8}  {:>8} {:>8}",
        "method", "n", "acc", "±std", "ece", "±std"
    )?;
    for row in &bundle.summary {
        writeln!(
            w,
            "{:<18} {:>3}  {:>8.4} {:>8.4}  {:>8.4} {:>8.4}",
            row.method.name(),
            row.n_seeds,
            row.mean_acc,
            row.std_acc,
            row.mean_ece,
            row.std_ece
        )?;
    }
    let failed: Vec<&CellReport> = bundle.cells.iter().filter(|c| c.outcome.is_err()).collect();
    if !failed.is_empty() {
        writeln!(w, "\nfailed cells:")?;
        for c in failed {
            if let Err(e) = &c.outcome {
                writeln!(w, "  {} seed {}: {e}", c.method.name(), c.seed)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One point of the accuracy-vs-ECE trade-off scatter, reconstructed from
/// an emitted trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub method: String,
    pub seed: u64,
    pub step: usize,
    pub dev_acc: f64,
    pub dev_ece: f64,
}

/// Rebuild the trade-off scatter from the trajectory CSVs in an output
/// directory. Files are processed in lexicographic order.
pub fn reconstruct_tradeoff(out_dir: &Path) -> Result<Vec<TradeoffRow>, ExperimentError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(out_dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trajectory_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for path in paths {
        let name = path
            .file_stem()
            .and_then(|n| n.to_str())
            .expect("utf8 filename");
        let rest = name.strip_prefix("trajectory_").expect("filtered");
        let (method, seed_str) = rest.rsplit_once('_').ok_or_else(|| {
            ExperimentError::Malformed {
                path: path.display().to_string(),
                line: 0,
                msg: "expected trajectory_<method>_<seed>.csv".into(),
            }
        })?;
        let seed: u64 = seed_str.parse().map_err(|e| ExperimentError::Malformed {
            path: path.display().to_string(),
            line: 0,
            msg: format!("seed: {e}"),
        })?;
        let reader = BufReader::new(File::open(&path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let fail = |msg: String| ExperimentError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            if fields.len() != 6 {
                return Err(fail(format!("{} fields, expected 6", fields.len())));
            }
            rows.push(TradeoffRow {
                method: method.to_string(),
                seed,
                step: fields[0].parse().map_err(|e| fail(format!("step: {e}")))?,
                dev_acc: fields[4]
                    .parse()
                    .map_err(|e| fail(format!("dev_acc: {e}")))?,
                dev_ece: fields[5]
                    .parse()
                    .map_err(|e| fail(format!("dev_ece: {e}")))?,
            });
        }
    }
    Ok(rows)
}

/// Write the reconstructed trade-off scatter to `tradeoff.csv`.
pub fn write_tradeoff(out_dir: &Path, rows: &[TradeoffRow]) -> Result<PathBuf, ExperimentError> {
    let path = out_dir.join("tradeoff.csv");
    let mut w = CsvWriter::create(&path, "method,seed,step,dev_acc,dev_ece")?;
    for r in rows {
        w.row(&[
            r.method.clone(),
            r.seed.to_string(),
            r.step.to_string(),
            r.dev_acc.to_string(),
            r.dev_ece.to_string(),
        ])?;
    }
    w.finish()?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_lists_required_fields() {
        let errors = validate_config_str("").unwrap_err();
        let fields: Vec<&str> = errors.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, vec!["methods", "seeds"]);
        let errors = validate_config_str("{}").unwrap_err();
        let fields: Vec<&str> = errors.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, vec!["methods", "seeds"]);
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg =
            validate_config_str(r#"{"methods": ["baseline"], "seeds": [7]}"#).unwrap();
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.mask_ratio, 0.4);
        assert_eq!(cfg.top_k, 20);
        assert_eq!(cfg.ece_bins, 20);
        assert_eq!(cfg.methods, vec![Method::Baseline]);
        assert_eq!(cfg.seeds, vec![7]);
        assert!(matches!(cfg.task, TaskSource::Spec(_)));
        assert_eq!(cfg.schedule.eval_every, ScheduleSettings::default().eval_every);
    }

    #[test]
    fn zero_k_is_rejected_with_message() {
        let errors =
            validate_config_str(r#"{"methods": ["baseline"], "seeds": [1], "k": 0}"#).unwrap_err();
        assert!(errors.iter().any(|e| e.field == "k" && e.msg == "K must be ≥ 1"));
    }

    #[test]
    fn unknown_keys_and_methods_are_rejected() {
        let errors = validate_config_str(
            r#"{"methods": ["baseline", "zzz"], "seeds": [1], "frobnicate": 3}"#,
        )
        .unwrap_err();
        assert!(errors.iter().any(|e| e.field == "frobnicate" && e.msg == "unknown field"));
        assert!(errors.iter().any(|e| e.field == "methods[1]"));
        // unknown keys inside sections are rejected too
        let errors = validate_config_str(
            r#"{"methods": ["baseline"], "seeds": [1], "schedule": {"stepz": 3}}"#,
        )
        .unwrap_err();
        assert!(errors.iter().any(|e| e.field == "schedule"));
    }

    #[test]
    fn task_and_dataset_path_are_exclusive() {
        let errors = validate_config_str(
            r#"{"methods": ["baseline"], "seeds": [1], "task": {}, "dataset_path": "d.jsonl"}"#,
        )
        .unwrap_err();
        assert!(errors.iter().any(|e| e.field == "task"));
    }

    #[test]
    fn aggregated_errors_cover_multiple_fields() {
        let errors = validate_config_str(
            r#"{"methods": [], "seeds": [], "k": 0, "mask_ratio": 1.5, "top_k": 0}"#,
        )
        .unwrap_err();
        let fields: Vec<&str> = errors.iter().map(|e| e.field.as_str()).collect();
        for f in ["methods", "seeds", "k", "mask_ratio", "top_k"] {
            assert!(fields.contains(&f), "missing {f} in {fields:?}");
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("nope"), None);
        assert_eq!(Method::EbmSharpHidden.variant(), Some(EnergyVariant::SharpHidden));
        assert!(Method::TScalDev.is_calibrator() && Method::TScalDev.fits_on_dev());
        assert!(Method::ScalBinTrain.is_calibrator() && !Method::ScalBinTrain.fits_on_dev());
        assert!(!Method::Baseline.is_calibrator());
    }

    #[test]
    fn mean_and_std_oracle() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(sample_std(&[5.0]), 0.0);
        let v = [1.0, 2.0, 3.0, 4.0];
        let m = mean(&v);
        let expect = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0).sqrt();
        assert_eq!(sample_std(&v), expect);
    }

    fn tiny_config(out_dir: PathBuf) -> ExperimentConfig {
        let raw = r#"{
            "methods": ["baseline", "t_scal_dev", "scal_bin_dev", "ebm_hidden"],
            "seeds": [0, 1],
            "task": {"n_classes": 2, "vocab_size": 8, "len_min": 3, "len_max": 6,
                     "dist": "unigram", "epsilon": 0.4, "seed": 5,
                     "n_train": 48, "n_dev_pool": 24},
            "k": 2,
            "top_k": 4,
            "ece_bins": 5,
            "schedule": {"steps": 10, "batch_size": 4, "lr": 0.002, "eval_every": 5},
            "encoder": {"d_model": 16, "n_layers": 1, "n_heads": 2, "ff_mult": 2,
                        "head": "linear", "dropout": 0.0},
            "noise_lm": {"d_model": 16, "n_layers": 1, "n_heads": 2, "ff_mult": 2,
                         "dropout": 0.0},
            "lm_schedule": {"epochs": 2, "batch_size": 8, "lr": 0.001, "holdout_frac": 0.1}
        }"#;
        let mut cfg = validate_config_str(raw).unwrap();
        cfg.out_dir = out_dir;
        cfg
    }

    fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                (
                    p.file_name().unwrap().to_str().unwrap().to_string(),
                    fs::read(&p).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn tiny_run_emits_consistent_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path().join("a"));
        let bundle = run(&cfg).unwrap();
        assert_eq!(bundle.n_failed(), 0, "{:?}", bundle.cells);
        assert_eq!(bundle.cells.len(), 8);
        assert_eq!(bundle.summary.len(), 4);

        for name in [
            "per_seed.csv",
            "summary.csv",
            "summary.txt",
            "shift_table.csv",
            "noise_lm_ppl.csv",
            "trajectory_baseline_0.csv",
            "trajectory_ebm_hidden_1.csv",
            "reliability_t_scal_dev_0.csv",
            "reliability_scal_bin_dev_1.csv",
            "scatter_ebm_hidden_0.csv",
            "energy_hist_ebm_hidden_0.csv",
            "records_baseline_0.csv",
        ] {
            assert!(cfg.out_dir.join(name).exists(), "missing {name}");
        }
        // calibrator cells do not emit trajectories; they train nothing
        assert!(!cfg.out_dir.join("trajectory_t_scal_dev_0.csv").exists());

        // every summary number is recomputable from the per-seed rows
        let per_seed = fs::read_to_string(cfg.out_dir.join("per_seed.csv")).unwrap();
        let mut by_method: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)> =
            Default::default();
        let mut order = Vec::new();
        for line in per_seed.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let entry = by_method.entry(f[0].to_string()).or_default();
            if !order.contains(&f[0].to_string()) {
                order.push(f[0].to_string());
            }
            entry.0.push(f[2].parse().unwrap());
            entry.1.push(f[3].parse().unwrap());
        }
        let summary = fs::read_to_string(cfg.out_dir.join("summary.csv")).unwrap();
        for (line, method) in summary.lines().skip(1).zip(&order) {
            let (accs, eces) = &by_method[method];
            let expect = format!(
                "{},{},{},{},{},{}",
                method,
                accs.len(),
                mean(accs),
                sample_std(accs),
                mean(eces),
                sample_std(eces)
            );
            assert_eq!(line, expect);
        }

        // identical rerun produces bitwise-identical artifacts
        let mut cfg2 = cfg.clone();
        cfg2.out_dir = dir.path().join("b");
        let bundle2 = run(&cfg2).unwrap();
        assert_eq!(bundle2.n_failed(), 0);
        let a = dir_snapshot(&cfg.out_dir);
        let b = dir_snapshot(&cfg2.out_dir);
        assert_eq!(a.len(), b.len());
        for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            assert_eq!(bytes_a, bytes_b, "{name_a} differs between reruns");
        }
    }

    #[test]
    fn tradeoff_reconstruction_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path().to_path_buf());
        cfg.methods = vec![Method::Baseline];
        cfg.seeds = vec![3];
        let _ = run(&cfg).unwrap();
        let rows = reconstruct_tradeoff(&cfg.out_dir).unwrap();
        // the emitted trajectory has steps {0, 5, 10}
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.method == "baseline" && r.seed == 3));

        // a fresh in-memory training run of the same cell matches exactly
        let split = load_dataset_for(&cfg).unwrap();
        let ctx_schedule = TrainSchedule {
            steps: cfg.schedule.steps,
            batch_size: cfg.schedule.batch_size,
            lr: cfg.schedule.lr,
            eval_every: cfg.schedule.eval_every,
            seed: derive_seed(3, &[TAG_RUN]),
        };
        let mut model = EncoderModel::new(
            derived_encoder_config(&split.spec, &cfg.encoder),
            derive_seed(3, &[TAG_ENC_INIT]),
        );
        let outcome = train_joint(
            &mut model,
            None,
            &NoiseSource::None,
            &split.train,
            &split.dev,
            &ctx_schedule,
        )
        .unwrap();
        for (row, rec) in rows.iter().zip(&outcome.log) {
            assert_eq!(row.step, rec.step);
            assert_eq!(row.dev_acc, rec.dev_acc);
            assert_eq!(row.dev_ece, rec.dev_ece);
        }
        let path = write_tradeoff(&cfg.out_dir, &rows).unwrap();
        assert!(path.exists());
        // reconstruction of the written file reproduces the same rows
        let reread = reconstruct_tradeoff(&cfg.out_dir).unwrap();
        assert_eq!(reread, rows);
    }

    #[test]
    fn noise_lm_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path().join("out"));
        let split = load_dataset_for(&cfg).unwrap();
        let (lm, ppls) = prepare_noise_lm(&cfg, &split).unwrap();
        assert!(!ppls.is_empty());
        save_noise_lm(&dir.path().join("lm"), &lm, &ppls).unwrap();
        let loaded = load_noise_lm(&dir.path().join("lm")).unwrap();
        let x: Vec<u32> = split.train[0].tokens.clone();
        let a = lm.score_log_prob(&x, &x).unwrap();
        let b = loaded.score_log_prob(&x, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failed_cells_are_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path().to_path_buf());
        // a scaling-binning bin count larger than the fit split forces a
        // per-cell failure while other cells proceed
        cfg.methods = vec![Method::Baseline, Method::ScalBinDev];
        cfg.seeds = vec![0];
        cfg.ece_bins = 1000;
        let bundle = run(&cfg).unwrap();
        assert_eq!(bundle.n_failed(), 1);
        let failed = &bundle.cells[1];
        assert_eq!(failed.method, Method::ScalBinDev);
        assert!(failed.outcome.is_err());
        assert!(bundle.cells[0].outcome.is_ok());
        let txt = fs::read_to_string(cfg.out_dir.join("summary.txt")).unwrap();
        assert!(txt.contains("failed cells:"));
    }
}
