//! Run configuration shared by every command. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::CostTable;
use crate::error::{Error, Result};
use crate::expert::{ClassWeights, DEFAULT_HIDDEN};
use crate::moe::{CuriosityTarget, RoutingConfig, RoutingMode, DEFAULT_BALANCE, DEFAULT_MC_SAMPLES};
use crate::quant::{Bits, QuantScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    TrainExpert,
    TrainMoe,
    Eval,
    Bench,
    BenchRouting,
    Ablation,
    RouteTrace,
    Melspec,
    SizeReport,
    Stats,
    SynthData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub spread: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            samples_per_class: 200,
            spread: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub runs: usize,
    pub warmup: usize,
    /// Inputs per timed run.
    pub workload: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            runs: 30,
            warmup: 3,
            workload: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelSpec {
    pub window: usize,
    pub hop: usize,
    pub mel_bins: usize,
}

impl Default for MelSpec {
    fn default() -> Self {
        MelSpec {
            window: crate::audio::DEFAULT_WINDOW,
            hop: crate::audio::DEFAULT_HOP,
            mel_bins: crate::audio::DEFAULT_MEL_BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, must match the command being run.
    pub experiment: Option<Experiment>,
    /// Expert schemes: the first for single-expert commands, one expert per
    /// entry for mixtures, one row per entry for ablations.
    pub schemes: Vec<QuantScheme>,
    /// Scheme of the classifier head; defaults to the expert's own scheme.
    pub head_scheme: Option<QuantScheme>,
    pub hidden_dims: Vec<usize>,
    pub dropout: f32,
    pub routing: RoutingMode,
    pub k: usize,
    pub temperature: f64,
    pub alpha_curiosity: f64,
    pub alpha_balance: f32,
    pub mc_samples: usize,
    pub curiosity_target: CuriosityTarget,
    pub entropy_gate: Option<f64>,
    pub seed: u64,
    pub fold_count: usize,
    /// Folds actually trained by ablations; all of them when unset.
    pub folds: Option<usize>,
    /// Validation fold for single training runs.
    pub fold: usize,
    pub max_epochs: Option<usize>,
    pub class_weights: ClassWeights,
    /// Labeled embedding file; synthetic data is generated when unset.
    pub data: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Input model for eval, bench, bench-routing and route-trace.
    pub model: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Output of `synth-data`.
    pub embeddings_out: Option<PathBuf>,
    pub audio: Option<PathBuf>,
    pub mel: MelSpec,
    pub bench: BenchSpec,
    pub costs: CostTable,
    /// Score file for the `stats` command.
    pub stats_input: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: None,
            schemes: vec![QuantScheme::BitLinear(Bits::new(4).expect("valid width"))],
            head_scheme: None,
            hidden_dims: DEFAULT_HIDDEN.to_vec(),
            dropout: crate::expert::DEFAULT_DROPOUT,
            routing: RoutingMode::Uniform,
            k: 1,
            temperature: 1.0,
            alpha_curiosity: 1.0,
            alpha_balance: DEFAULT_BALANCE,
            mc_samples: DEFAULT_MC_SAMPLES,
            curiosity_target: CuriosityTarget::ClassDistributions,
            entropy_gate: None,
            seed: 0,
            fold_count: 5,
            folds: None,
            fold: 0,
            max_epochs: None,
            class_weights: ClassWeights::Balanced,
            data: None,
            synth: SynthSpec::default(),
            model: None,
            model_out: None,
            report: None,
            embeddings_out: None,
            audio: None,
            mel: MelSpec::default(),
            bench: BenchSpec::default(),
            costs: CostTable::default(),
            stats_input: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn routing_config(&self) -> RoutingConfig {
        RoutingConfig {
            k: self.k,
            temperature: self.temperature,
            alpha_curiosity: self.alpha_curiosity,
            alpha_balance: self.alpha_balance,
            mc_samples: self.mc_samples,
            curiosity_target: self.curiosity_target,
            entropy_gate: self.entropy_gate,
        }
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate_for(&self, experiment: Experiment) -> Result<()> {
        if let Some(e) = self.experiment {
            if e != experiment {
                return Err(Error::Config(format!("config is for {e:?}, command is {experiment:?}")));
            }
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("`schemes` must list at least one scheme".into()));
        }
        if self.fold_count < 2 {
            return Err(Error::Config("`fold_count` must be at least 2".into()));
        }
        if self.fold >= self.fold_count {
            return Err(Error::Config(format!("`fold` {} outside 0..{}", self.fold, self.fold_count)));
        }
        if let Some(f) = self.folds {
            if f == 0 || f > self.fold_count {
                return Err(Error::Config(format!("`folds` {f} outside 1..={}", self.fold_count)));
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("`hidden_dims` contains a zero width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("`dropout` must lie in [0, 1)".into()));
        }
        if self.synth.num_classes < 2 {
            return Err(Error::Config("`synth.num_classes` must be at least 2".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("`temperature` must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("`k` must be at least 1".into()));
        }
        let needs_model = matches!(experiment, Experiment::Eval | Experiment::RouteTrace);
        if needs_model && self.model.is_none() {
            return Err(Error::Config(format!("{experiment:?} needs `model`")));
        }
        if experiment == Experiment::Melspec && self.audio.is_none() {
            return Err(Error::Config("melspec needs `audio`".into()));
        }
        if experiment == Experiment::Stats && self.stats_input.is_none() {
            return Err(Error::Config("stats needs `stats_input`".into()));
        }
        if experiment == Experiment::SynthData && self.embeddings_out.is_none() {
            return Err(Error::Config("synth-data needs `embeddings_out`".into()));
        }
        Ok(())
    }
}
