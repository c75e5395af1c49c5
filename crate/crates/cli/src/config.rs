use std::path::PathBuf;

use debias_core::adversary::{AdversaryFamily, AdversarySpec, GammaUpdate};
use debias_core::diagnose::BiasTestOptions;
use debias_core::model::{Activation, Architecture, LossKind, ModelSpec, OutputKind};
use debias_core::regress::SeKind;
use debias_core::simgen::Scenario;
use debias_core::study::{self, Method};
use debias_core::train::{Batch, CheckpointPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_METHODS: &str = "baseline,adv_slr,adv_cov,correct,ground_truth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Train,
    Biastest,
    Power,
    Correct,
    Study,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::Biastest => "biastest",
            Command::Power => "power",
            Command::Correct => "correct",
            Command::Study => "study",
        }
    }
}

/// A complete experiment. Every field has a default so a config file only
/// needs the parts it changes; command-line flags override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub verbose: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub adversary: AdversaryConfig,
    pub study: StudyConfig,
    pub bias: BiasConfig,
    pub power: PowerConfig,
    pub correct: CorrectConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            command: None,
            seed: None,
            out: None,
            jobs: 1,
            verbose: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            adversary: AdversaryConfig::default(),
            study: StudyConfig::default(),
            bias: BiasConfig::default(),
            power: PowerConfig::default(),
            correct: CorrectConfig::default(),
        }
    }
}

/// Where the rows come from: a dataset CSV or a named generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub scenario: String,
    pub n: usize,
    /// Keep this many randomly chosen labeled rows; the rest become the evaluation set.
    pub labeled: Option<usize>,
    pub bank_n: Option<usize>,
    pub bank_seed: Option<u64>,
    pub gamma_err: f64,
    pub strength: f64,
    pub treatment: String,
    pub controls: Vec<String>,
    pub instruments: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            scenario: Scenario::Sim1Greening.name().to_string(),
            n: 20_000,
            labeled: None,
            bank_n: None,
            bank_seed: None,
            gamma_err: 0.05,
            strength: 0.025,
            treatment: String::new(),
            controls: Vec::new(),
            instruments: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub hidden_dims: (usize, usize),
    pub activation: Activation,
    /// Defaults to a probability output for logistic models and a real one otherwise.
    pub output: Option<OutputKind>,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Logistic,
            hidden_dims: (32, 16),
            activation: Activation::Relu,
            output: None,
            loss: LossKind::Mse,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize) -> ModelSpec {
        let output = self.output.unwrap_or(match self.architecture {
            Architecture::Logistic => OutputKind::Probability,
            _ => OutputKind::Real,
        });
        ModelSpec {
            architecture: self.architecture,
            input_dim,
            hidden_dims: self.hidden_dims,
            activation: self.activation,
            output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    Final,
    BestUnbiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub primary_lr: f64,
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub folds: usize,
    pub minibatch: Option<usize>,
    pub standardize: bool,
    pub checkpoint: CheckpointChoice,
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            primary_lr: 1.0,
            iterations: 1500,
            pretrain_iterations: 500,
            folds: 3,
            minibatch: None,
            standardize: true,
            checkpoint: CheckpointChoice::Final,
            checkpoint_every: 100,
        }
    }
}

impl TrainSettings {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            primary_lr: self.primary_lr,
            iterations: self.iterations,
            batch: self.minibatch.map_or(Batch::Full, Batch::Minibatch),
            seed,
            folds: self.folds,
            early_stop: None,
            standardize: self.standardize,
            checkpoint: Some(match self.checkpoint {
                CheckpointChoice::Final => CheckpointPolicy::Final,
                CheckpointChoice::BestUnbiased => CheckpointPolicy::BestUnbiased {
                    every: self.checkpoint_every,
                    p_threshold: debias_core::train::ALPHA_P_THRESHOLD,
                },
            }),
            pretrain_iterations: self.pretrain_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub family: AdversaryFamily,
    /// Weight for `train`, `biastest`, `power` and `correct`; 0 trains a plain model.
    pub alpha: f64,
    /// When non-empty, `train` cross-fits every weight and keeps the selected one.
    pub alpha_grid: Vec<f64>,
    pub gamma_update: GammaUpdate,
    pub adversary_lr: f64,
    /// Primary learning rate used with the covariance penalty.
    pub cov_lr: Option<f64>,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            family: AdversaryFamily::Slr,
            alpha: 0.0,
            alpha_grid: Vec::new(),
            gamma_update: GammaUpdate::ClosedForm,
            adversary_lr: 1e-2,
            cov_lr: Some(0.1),
        }
    }
}

impl AdversaryConfig {
    pub fn spec(&self, alpha: f64, treatment: usize, controls: &[usize], instruments: &[usize]) -> AdversarySpec {
        AdversarySpec {
            control_cols: controls.to_vec(),
            instrument_cols: instruments.to_vec(),
            gamma_update: self.gamma_update,
            adversary_lr: self.adversary_lr,
            ..AdversarySpec::new(self.family, alpha, treatment)
        }
    }

    /// Training settings for this adversary family.
    pub fn train_config(&self, base: TrainConfig) -> TrainConfig {
        match (self.family, self.cov_lr) {
            (AdversaryFamily::CovariancePenalty, Some(lr)) => TrainConfig {
                primary_lr: lr,
                ..base
            },
            _ => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub methods: String,
    /// Labeled-set sizes; empty runs one bootstrap on the dataset as labeled.
    pub sizes: Vec<usize>,
    pub bootstrap: usize,
    pub slr_alpha: f64,
    pub cov_alpha: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            methods: DEFAULT_METHODS.to_string(),
            sizes: Vec::new(),
            bootstrap: 100,
            slr_alpha: 0.995,
            cov_alpha: 3e-3,
        }
    }
}

impl StudyConfig {
    pub fn methods(&self) -> Result<Vec<Method>, String> {
        study::parse_methods(&self.methods)
    }
}

/// Options of the error-on-covariates regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    pub intercept: bool,
    pub se_kind: SeKind,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig {
            intercept: true,
            se_kind: SeKind::Classical,
        }
    }
}

impl BiasConfig {
    pub fn options(&self) -> BiasTestOptions {
        BiasTestOptions {
            intercept: self.intercept,
            se_kind: self.se_kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    /// Labeled sizes: `a..b` (step `a`), `a..b:step`, or a comma list.
    pub sizes: String,
    pub power: f64,
    pub alpha: f64,
    pub draws: usize,
    /// Report the smallest size whose detectable bias is at most this.
    pub target_bias: Option<f64>,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            sizes: "250..10000".to_string(),
            power: 0.8,
            alpha: 0.05,
            draws: 20,
            target_bias: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct CorrectConfig {
    /// Replicates for a bootstrap standard error; 0 uses the normal approximation.
    pub bootstrap: usize,
}


/// Parses `a..b`, `a..b:step` or `a,b,c` into sizes.
pub fn parse_sizes(spec: &str) -> Result<Vec<usize>, String> {
    let spec = spec.trim();
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| format!("`{s}` is not a sample size"))
    };
    if let Some((lo, rest)) = spec.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (num(hi)?, Some(num(step)?)),
            None => (num(rest)?, None),
        };
        let lo = num(lo)?;
        let step = step.unwrap_or(lo);
        if lo == 0 || step == 0 || hi < lo {
            return Err(format!("bad size range `{spec}`"));
        }
        return Ok((lo..=hi).step_by(step).collect());
    }
    let sizes = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(num)
        .collect::<Result<Vec<_>, _>>()?;
    if sizes.is_empty() {
        return Err("no sample sizes given".to_string());
    }
    Ok(sizes)
}

fn nonnegative(what: &str, v: f64, out: &mut Vec<String>) {
    if !(v >= 0.0) || !v.is_finite() {
        out.push(format!("{what}: alpha must be nonnegative"));
    }
}

impl ExperimentConfig {
    /// Schema and cross-field checks; an empty list means the config is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut d = Vec::new();
        let Some(command) = self.command else {
            d.push("command required".to_string());
            return d;
        };
        if self.seed.is_none() {
            d.push("seed required".to_string());
        }
        if self.jobs == 0 {
            d.push("jobs must be at least 1".to_string());
        }
        let data = &self.data;
        match &data.path {
            Some(p) if !p.is_file() => d.push(format!("data file not found: {}", p.display())),
            Some(_) => {}
            None => {
                if Scenario::from_name(&data.scenario).is_none() {
                    d.push(format!("unknown scenario `{}`", data.scenario));
                }
                if data.n < 4 {
                    d.push("data.n must be at least 4".to_string());
                }
            }
        }
        if command == Command::Simulate && data.path.is_some() {
            d.push("simulate generates data and takes no data.path".to_string());
        }
        let rows = if data.path.is_none() { Some(data.n) } else { None };
        let labeled = data.labeled.or(rows);
        if let (Some(j), Some(n)) = (data.labeled, rows) {
            if j > n {
                d.push(format!("data.labeled ({j}) exceeds data.n ({n})"));
            }
        }

        let t = &self.train;
        if t.iterations == 0 {
            d.push("train.iterations must be at least 1".to_string());
        }
        if !(t.primary_lr > 0.0) || !t.primary_lr.is_finite() {
            d.push("train.primary_lr must be positive".to_string());
        }
        if t.folds < 2 {
            d.push("train.folds must be at least 2".to_string());
        }
        if let Some(j) = labeled {
            if t.folds > j {
                d.push(format!(
                    "train.folds ({}) exceeds the labeled rows ({j}); train.cross_fit needs at least one labeled row per fold",
                    t.folds
                ));
            }
        }
        if t.minibatch == Some(0) {
            d.push("train.minibatch must be at least 1".to_string());
        }
        if t.checkpoint == CheckpointChoice::BestUnbiased && t.checkpoint_every == 0 {
            d.push("train.checkpoint_every must be at least 1".to_string());
        }

        let a = &self.adversary;
        nonnegative("adversary.alpha", a.alpha, &mut d);
        for &g in &a.alpha_grid {
            nonnegative("adversary.alpha_grid", g, &mut d);
        }
        if a.gamma_update == GammaUpdate::GradientStep && !(a.adversary_lr > 0.0) {
            d.push("adversary.adversary_lr must be positive".to_string());
        }
        if let Some(lr) = a.cov_lr {
            if !(lr > 0.0) || !lr.is_finite() {
                d.push("adversary.cov_lr must be positive".to_string());
            }
        }
        if a.family == AdversaryFamily::IvSlr && data.instruments.is_empty() {
            d.push("iv_slr needs data.instruments".to_string());
        }
        if a.family == AdversaryFamily::FwlSlr && data.controls.is_empty() {
            d.push("fwl_slr needs data.controls".to_string());
        }

        match command {
            Command::Study => {
                let s = &self.study;
                match s.methods() {
                    Ok(m) if m.is_empty() => d.push("study.methods is empty".to_string()),
                    Ok(_) => {}
                    Err(e) => d.push(format!("study.methods: {e}")),
                }
                nonnegative("study.slr_alpha", s.slr_alpha, &mut d);
                nonnegative("study.cov_alpha", s.cov_alpha, &mut d);
                if s.bootstrap < 2 {
                    d.push("study.bootstrap must be at least 2".to_string());
                }
                if let Some(n) = rows {
                    if let Some(&j) = s.sizes.iter().find(|&&j| j > n) {
                        d.push(format!("study size {j} exceeds data.n ({n})"));
                    }
                }
                if let Some(&j) = s.sizes.iter().find(|&&j| j < t.folds) {
                    d.push(format!(
                        "study size {j} is below train.folds ({}); train.cross_fit needs at least one labeled row per fold",
                        t.folds
                    ));
                }
            }
            Command::Power => {
                let p = &self.power;
                match parse_sizes(&p.sizes) {
                    Ok(sizes) => {
                        if let (Some(&max), Some(j)) = (sizes.iter().max(), labeled) {
                            if max > j {
                                d.push(format!("power size {max} exceeds the labeled rows ({j})"));
                            }
                        }
                    }
                    Err(e) => d.push(format!("power.sizes: {e}")),
                }
                if !(p.power > 0.0 && p.power < 1.0) {
                    d.push("power.power must lie in (0, 1)".to_string());
                }
                if !(p.alpha > 0.0 && p.alpha < 1.0) {
                    d.push("power.alpha must lie in (0, 1)".to_string());
                }
                if p.target_bias.is_some_and(|b| !(b > 0.0)) {
                    d.push("power.target_bias must be positive".to_string());
                }
                if p.draws == 0 {
                    d.push("power.draws must be at least 1".to_string());
                }
            }
            Command::Correct
                if self.correct.bootstrap == 1 => {
                    d.push("correct.bootstrap must be 0 or at least 2".to_string());
                }
            _ => {}
        }
        d
    }

    /// The config with fields that do not affect results cleared, for hashing.
    pub fn hashed_view(&self) -> ExperimentConfig {
        ExperimentConfig {
            out: None,
            jobs: 1,
            verbose: false,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> ExperimentConfig {
        ExperimentConfig {
            command: Some(Command::Train),
            seed: Some(1),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_validate() {
        assert!(valid().validate().is_empty(), "{:?}", valid().validate());
    }

    #[test]
    fn missing_seed() {
        let cfg = ExperimentConfig { seed: None, ..valid() };
        assert!(cfg.validate().iter().any(|m| m == "seed required"));
    }

    #[test]
    fn negative_alpha() {
        let mut cfg = valid();
        cfg.adversary.alpha = -0.5;
        assert!(cfg.validate().iter().any(|m| m.contains("alpha must be nonnegative")));
    }

    #[test]
    fn folds_exceed_labels() {
        let mut cfg = valid();
        cfg.data.labeled = Some(2);
        let d = cfg.validate();
        assert!(d.iter().any(|m| m.contains("train.cross_fit")), "{d:?}");
    }

    #[test]
    fn size_ranges() {
        let s = parse_sizes("250..10000").unwrap();
        assert_eq!((s[0], s[1], *s.last().unwrap(), s.len()), (250, 500, 10_000, 40));
        assert_eq!(parse_sizes("100..300:50").unwrap(), vec![100, 150, 200, 250, 300]);
        assert_eq!(parse_sizes("500, 1000,2500").unwrap(), vec![500, 1000, 2500]);
        assert!(parse_sizes("10..5").is_err());
        assert!(parse_sizes("a..b").is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "train": {"folds": 5}}"#).unwrap();
        assert_eq!((cfg.seed, cfg.train.folds, cfg.train.iterations), (Some(3), 5, 1500));
    }
}
