//! Experiment configuration: one JSON document with documented defaults.
//! Unknown keys are rejected; command-line flags override file values; the
//! fully resolved config is echoed into the output directory so a run can
//! be reproduced from its artifacts alone.

use ask_core::corpus::CorpusParams;
use ask_core::objective::LossVariant;
use ask_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSettings {
    pub n_clusters: usize,
    pub head_size: usize,
    pub tail_size: usize,
    pub n_tail: usize,
    pub d_in: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        let p = CorpusParams::default();
        Self {
            n_clusters: p.n_clusters,
            head_size: p.head_size,
            tail_size: p.tail_size,
            n_tail: p.n_tail,
            d_in: p.d_in,
            noise_sigma: p.noise_sigma,
        }
    }
}

impl SyntheticSettings {
    pub fn corpus_params(&self, seed: u64) -> CorpusParams {
        CorpusParams {
            n_clusters: self.n_clusters,
            head_size: self.head_size,
            tail_size: self.tail_size,
            n_tail: self.n_tail,
            d_in: self.d_in,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub d: usize,
    pub k: usize,
    pub n_c: usize,
    pub rho: f64,
    pub beta: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
    pub refresh_period: u64,
    pub tau: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub renormalize_enhanced: bool,
    pub self_exclude: bool,
    pub loss_variant: LossVariant,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let c = TrainConfig::default();
        Self {
            d: c.d,
            k: c.k,
            n_c: c.n_c,
            rho: c.rho,
            beta: c.beta,
            lambda_f: c.lambda_f,
            lambda_c: c.lambda_c,
            refresh_period: c.refresh_period,
            tau: c.tau,
            epsilon: c.epsilon,
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            batch_size: c.batch_size,
            renormalize_enhanced: c.renormalize_enhanced,
            self_exclude: c.self_exclude,
            loss_variant: c.loss_variant,
            lr_decay_every: c.lr_decay_every,
            lr_decay_factor: c.lr_decay_factor,
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            d_in: 0, // resolved from the corpus
            d: self.d,
            k: self.k,
            n_c: self.n_c,
            rho: self.rho,
            beta: self.beta,
            lambda_f: self.lambda_f,
            lambda_c: self.lambda_c,
            refresh_period: self.refresh_period,
            tau: self.tau,
            epsilon: self.epsilon,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            renormalize_enhanced: self.renormalize_enhanced,
            self_exclude: self.self_exclude,
            loss_variant: self.loss_variant,
            lr_decay_every: self.lr_decay_every,
            lr_decay_factor: self.lr_decay_factor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Path to encoder weights; defaults to `weights.bin` inside the
    /// output directory.
    pub weights_path: Option<String>,
    /// Which corpus split to evaluate: "eval" or "train".
    pub split: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { weights_path: None, split: "eval".to_string() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSettings {
    pub mode: String,
    pub drift_model: String,
    pub steps: usize,
    pub magnitude: f64,
    pub temperature: f64,
    pub trials: usize,
}

impl Default for DiagnoseSettings {
    fn default() -> Self {
        Self {
            mode: "rdm".to_string(),
            drift_model: "gaussian_walk".to_string(),
            steps: 20,
            magnitude: 0.05,
            temperature: 1.0,
            trials: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    /// JSON-lines corpus of {id, audio, text}; absent means synthetic.
    pub corpus_path: Option<String>,
    pub synthetic: SyntheticSettings,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub diagnose: DiagnoseSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "out".to_string(),
            corpus_path: None,
            synthetic: SyntheticSettings::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
            diagnose: DiagnoseSettings::default(),
        }
    }
}
