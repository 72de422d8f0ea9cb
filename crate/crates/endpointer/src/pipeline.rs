//! Experiment orchestration: one config describes corpus, targets, training,
//! and evaluation; `run_compare` trains both heads on identical data and
//! pairs their operating points.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{gen_corpus, load_corpus, split, Corpus, GrammarConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    match_operating_points, sweep, write_curve_csv, write_pairs_csv, write_plot_data,
    PairedPoint, TradeoffCurve,
};
use crate::model::{
    save_params, save_train_config, train, EndpointerParams, EpochStats, Head, TrainConfig,
    TrainingExample,
};
use crate::pausemodel::{fit, PauseModel, DEFAULT_MIN_COUNT, DEFAULT_PAUSE_MS};
use crate::seeds::derive_seed;
use crate::targets::{classification_targets, regression_targets, SlopePolicy};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

/// Where the corpus comes from: generated on the fly or loaded from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Generate { grammar: GrammarConfig, n: usize },
    Load { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PauseModelSettings {
    pub min_count: usize,
    pub default_pause_ms: f64,
}

impl Default for PauseModelSettings {
    fn default() -> Self {
        PauseModelSettings {
            min_count: DEFAULT_MIN_COUNT,
            default_pause_ms: DEFAULT_PAUSE_MS,
        }
    }
}

/// Shared training hyperparameters; the learning rate is per head because
/// the two heads sit on very different loss surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub layers: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate_classification: f64,
    pub learning_rate_regression: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let cls = TrainConfig::for_head(Head::Classification);
        let reg = TrainConfig::for_head(Head::Regression);
        TrainSettings {
            layers: cls.layers,
            hidden: cls.hidden,
            epochs: cls.epochs,
            batch_size: cls.batch_size,
            learning_rate_classification: cls.learning_rate,
            learning_rate_regression: reg.learning_rate,
            adam_beta1: cls.adam_beta1,
            adam_beta2: cls.adam_beta2,
            adam_eps: cls.adam_eps,
            plateau_factor: cls.plateau_factor,
            plateau_patience: cls.plateau_patience,
        }
    }
}

impl TrainSettings {
    pub fn config_for(&self, head: Head, seed: u64) -> TrainConfig {
        TrainConfig {
            head,
            layers: self.layers,
            hidden: self.hidden,
            learning_rate: match head {
                Head::Classification => self.learning_rate_classification,
                Head::Regression => self.learning_rate_regression,
            },
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            batch_size: self.batch_size,
            epochs: self.epochs,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            seed,
        }
    }
}

fn default_schema_version() -> u32 {
    EXPERIMENT_SCHEMA_VERSION
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_dev_fraction() -> f64 {
    0.1
}
fn default_smoothing() -> usize {
    1
}
fn default_thresholds() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub seed: u64,
    pub corpus: CorpusSource,
    /// Fraction of the corpus held out for the threshold sweeps.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Fraction of the remaining data used as the dev set.
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default)]
    pub pause_model: PauseModelSettings,
    pub slope: SlopePolicy,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default = "default_smoothing")]
    pub smoothing_window_frames: usize,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("{}: {e}", path.display()),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "experiment schema version {} (this build reads {EXPERIMENT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must be in (0, 1)".into()));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::Config("dev_fraction must be in (0, 1)".into()));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("thresholds must not be empty".into()));
        }
        for &t in &self.thresholds {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
            }
        }
        if self.smoothing_window_frames == 0 {
            return Err(Error::Config(
                "smoothing_window_frames must be at least 1".into(),
            ));
        }
        if let CorpusSource::Generate { grammar, n } = &self.corpus {
            grammar.validate()?;
            if *n == 0 {
                return Err(Error::Config("corpus size must be positive".into()));
            }
        }
        self.slope.validate()?;
        Ok(())
    }

    /// Output directory precedence: explicit flag, then config, then the
    /// ENDPOINTER_OUT environment variable, then ./endpointer-out.
    pub fn resolve_output_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os("ENDPOINTER_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("endpointer-out"))
    }
}

/// The three splits plus the pause model fitted on the training split only.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub pause_model: PauseModel,
}

pub fn obtain_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    match &config.corpus {
        CorpusSource::Generate { grammar, n } => {
            gen_corpus(grammar, *n, derive_seed(config.seed, "corpus"))
        }
        CorpusSource::Load { path } => load_corpus(path),
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<PreparedData> {
    config.validate()?;
    let corpus = obtain_corpus(config)?;
    let (rest, test) = split(
        &corpus,
        1.0 - config.test_fraction,
        derive_seed(config.seed, "split-test"),
    )?;
    let (train, dev) = split(
        &rest,
        1.0 - config.dev_fraction,
        derive_seed(config.seed, "split-dev"),
    )?;
    if train.is_empty() || dev.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "splits too small: train {}, dev {}, test {}",
            train.len(),
            dev.len(),
            test.len()
        )));
    }
    let pause_model = fit(
        &train,
        config.pause_model.min_count,
        config.pause_model.default_pause_ms,
    )?;
    Ok(PreparedData {
        train,
        dev,
        test,
        pause_model,
    })
}

/// Per-frame training targets for every record. Classification always uses
/// the hard step at the endpoint; regression ramps according to the slope
/// policy, consulting the pause model where the policy calls for it.
pub fn build_examples(
    corpus: &Corpus,
    head: Head,
    policy: &SlopePolicy,
    pause_model: &PauseModel,
) -> Result<Vec<TrainingExample>> {
    use rayon::prelude::*;
    corpus
        .records
        .par_iter()
        .map(|q| {
            let seq = match head {
                Head::Classification => classification_targets(q),
                Head::Regression => {
                    let expected = match policy {
                        SlopePolicy::PauseAdaptive { .. } => {
                            Some(pause_model.expected_pause(q)?)
                        }
                        _ => None,
                    };
                    let slope = policy.slope_ms(q, expected)?;
                    regression_targets(q, slope)
                }
            };
            Ok(TrainingExample {
                features: q.features.clone(),
                targets: seq.values().to_vec(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub head: Head,
    pub params: EndpointerParams,
    pub history: Vec<EpochStats>,
    pub curve: TradeoffCurve,
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub classification: TrainedModel,
    pub regression: TrainedModel,
    pub pairs: Vec<PairedPoint>,
    pub output_dir: PathBuf,
}

fn head_label(head: Head) -> &'static str {
    match head {
        Head::Classification => "classification",
        Head::Regression => "regression",
    }
}

fn train_and_sweep(
    config: &ExperimentConfig,
    data: &PreparedData,
    head: Head,
    out_dir: &Path,
) -> Result<TrainedModel> {
    let label = head_label(head);
    let train_examples = build_examples(&data.train, head, &config.slope, &data.pause_model)?;
    let dev_examples = build_examples(&data.dev, head, &config.slope, &data.pause_model)?;
    let train_config = config
        .train
        .config_for(head, derive_seed(config.seed, &format!("train-{label}")));
    log::info!(
        "training {label}: {} train / {} dev queries, h={}, lr={:.1e}",
        train_examples.len(),
        dev_examples.len(),
        train_config.hidden,
        train_config.learning_rate
    );
    let (params, history) = train(&train_config, &train_examples, &dev_examples, None)?;

    let ckpt = out_dir.join(format!("{label}.ckpt"));
    save_params(&params, &ckpt)?;
    save_train_config(&train_config, &ckpt)?;
    let history_json = serde_json::to_string_pretty(&history)
        .map_err(|e| Error::Config(e.to_string()))?;
    let history_path = out_dir.join(format!("{label}_history.json"));
    std::fs::write(&history_path, history_json).map_err(|e| Error::io(&history_path, e))?;

    let curve = sweep(
        &params,
        &data.test,
        &config.thresholds,
        config.smoothing_window_frames,
    )?;
    write_curve_csv(&curve, &out_dir.join(format!("{label}_curve.csv")))?;
    write_plot_data(&curve, &out_dir.join(format!("{label}_plot.csv")))?;

    Ok(TrainedModel {
        head,
        params,
        history,
        curve,
    })
}

/// Trains both heads on already-prepared data, sweeps them over the same
/// thresholds, and writes every artifact into `out_dir`.
pub fn run_compare_prepared(
    config: &ExperimentConfig,
    data: &PreparedData,
    out_dir: &Path,
) -> Result<CompareOutput> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    config.save(&out_dir.join("experiment.json"))?;

    let classification = train_and_sweep(config, data, Head::Classification, out_dir)?;
    let regression = train_and_sweep(config, data, Head::Regression, out_dir)?;

    let pairs = match_operating_points(&classification.curve, &regression.curve)?;
    write_pairs_csv(
        &pairs,
        "classification",
        "regression",
        &out_dir.join("paired_operating_points.csv"),
    )?;

    Ok(CompareOutput {
        classification,
        regression,
        pairs,
        output_dir: out_dir.to_path_buf(),
    })
}

pub fn run_compare(config: &ExperimentConfig, out_dir: &Path) -> Result<CompareOutput> {
    let data = prepare(config)?;
    run_compare_prepared(config, &data, out_dir)
}
