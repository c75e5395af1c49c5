use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use debias_core::adversary::AdversaryFamily;
use debias_core::model::{Architecture, LossKind};
use debias_core::regress::SeKind;

use crate::config::{Command, ExperimentConfig};
use crate::error::CliError;

/// Bias tests, corrections and adversarially debiased training for
/// regressions on machine-learned outcomes.
///
/// Settings are resolved from built-in defaults, then the `--config` JSON
/// file, then flags on the command line; later sources win.
#[derive(Debug, Parser)]
#[command(name = "debias", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for bootstrap replicates and alpha grids.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Progress events as JSON lines on stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Generate a synthetic dataset as CSV plus a JSON sidecar.
    Simulate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Cross-fit a predictor, optionally with an adversary or an alpha grid.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        adversary: AdversaryArgs,
    },
    /// Regress prediction errors on the treatment over the labeled rows.
    Biastest {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        se_kind: Option<SeKindArg>,
    },
    /// Minimum detectable bias across labeled-set sizes.
    Power {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Sizes as `a..b` (step a), `a..b:step` or `a,b,c`.
        #[arg(long = "J")]
        sizes: Option<String>,
        #[arg(long, allow_negative_numbers = true)]
        power: Option<f64>,
        /// Test level.
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        /// Random labeled subsets per size.
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        target_bias: Option<f64>,
    },
    /// Subtract the estimated bias from the naive coefficient.
    Correct {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Bootstrap replicates; 0 uses the normal approximation.
        #[arg(long = "B")]
        bootstrap: Option<usize>,
    },
    /// Bootstrap every method, optionally across labeled-set sizes.
    Study {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated: baseline, adv_slr, adv_cov, correct, ground_truth.
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated labeled-set sizes.
        #[arg(long = "J", value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long = "B")]
        bootstrap: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        slr_alpha: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        cov_alpha: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset CSV instead of a generator.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Keep this many random labeled rows.
    #[arg(long)]
    pub labeled: Option<usize>,
    #[arg(long)]
    pub bank_n: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub gamma_err: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub treatment: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub controls: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub instruments: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub architecture: Option<ArchitectureArg>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub pretrain: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AdversaryArgs {
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    /// Adversary weight.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Comma-separated weights to cross-fit and select from.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub alpha_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ArchitectureArg {
    Linear,
    Logistic,
    Mlp3,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LossArg {
    Mse,
    Bce,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum FamilyArg {
    Slr,
    Cov,
    FwlSlr,
    IvSlr,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SeKindArg {
    Classical,
    HcRobust,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        let d = &mut cfg.data;
        if self.data.is_some() {
            d.path = self.data;
        }
        set(&mut d.scenario, self.scenario);
        set(&mut d.n, self.n);
        if self.labeled.is_some() {
            d.labeled = self.labeled;
        }
        if self.bank_n.is_some() {
            d.bank_n = self.bank_n;
        }
        set(&mut d.gamma_err, self.gamma_err);
        set(&mut d.strength, self.strength);
        set(&mut d.treatment, self.treatment);
        set(&mut d.controls, self.controls);
        set(&mut d.instruments, self.instruments);
    }
}

impl ModelArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        set(
            &mut cfg.model.architecture,
            self.architecture.map(|a| match a {
                ArchitectureArg::Linear => Architecture::Linear,
                ArchitectureArg::Logistic => Architecture::Logistic,
                ArchitectureArg::Mlp3 => Architecture::Mlp3,
            }),
        );
        set(
            &mut cfg.model.loss,
            self.loss.map(|l| match l {
                LossArg::Mse => LossKind::Mse,
                LossArg::Bce => LossKind::BinaryCrossEntropy,
            }),
        );
        let t = &mut cfg.train;
        set(&mut t.iterations, self.iterations);
        set(&mut t.pretrain_iterations, self.pretrain);
        set(&mut t.folds, self.folds);
        set(&mut t.primary_lr, self.lr);
    }
}

impl Cli {
    /// Folds the config file and flags into one config, flags last.
    pub fn resolve(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.common.config {
            Some(p) => {
                let text = std::fs::read(p).map_err(|e| {
                    CliError::Validation(vec![format!("cannot read config {}: {e}", p.display())])
                })?;
                serde_json::from_slice::<ExperimentConfig>(&text).map_err(|e| {
                    CliError::Validation(vec![format!("config {}: {e}", p.display())])
                })?
            }
            None => ExperimentConfig::default(),
        };
        let c = self.common;
        if c.seed.is_some() {
            cfg.seed = c.seed;
        }
        if c.out.is_some() {
            cfg.out = c.out;
        }
        set(&mut cfg.jobs, c.jobs);
        cfg.verbose |= c.verbose;
        let command = match self.command {
            Sub::Simulate { data } => {
                data.apply(&mut cfg);
                Command::Simulate
            }
            Sub::Train { data, model, adversary } => {
                data.apply(&mut cfg);
                model.apply(&mut cfg);
                let a = &mut cfg.adversary;
                set(
                    &mut a.family,
                    adversary.family.map(|f| match f {
                        FamilyArg::Slr => AdversaryFamily::Slr,
                        FamilyArg::Cov => AdversaryFamily::CovariancePenalty,
                        FamilyArg::FwlSlr => AdversaryFamily::FwlSlr,
                        FamilyArg::IvSlr => AdversaryFamily::IvSlr,
                    }),
                );
                set(&mut a.alpha, adversary.alpha);
                set(&mut a.alpha_grid, adversary.alpha_grid);
                Command::Train
            }
            Sub::Biastest { data, model, se_kind } => {
                data.apply(&mut cfg);
                model.apply(&mut cfg);
                set(
                    &mut cfg.bias.se_kind,
                    se_kind.map(|k| match k {
                        SeKindArg::Classical => SeKind::Classical,
                        SeKindArg::HcRobust => SeKind::HcRobust,
                    }),
                );
                Command::Biastest
            }
            Sub::Power {
                data,
                model,
                sizes,
                power,
                alpha,
                draws,
                target_bias,
            } => {
                data.apply(&mut cfg);
                model.apply(&mut cfg);
                let p = &mut cfg.power;
                set(&mut p.sizes, sizes);
                set(&mut p.power, power);
                set(&mut p.alpha, alpha);
                set(&mut p.draws, draws);
                if target_bias.is_some() {
                    p.target_bias = target_bias;
                }
                Command::Power
            }
            Sub::Correct { data, model, bootstrap } => {
                data.apply(&mut cfg);
                model.apply(&mut cfg);
                set(&mut cfg.correct.bootstrap, bootstrap);
                Command::Correct
            }
            Sub::Study {
                data,
                model,
                methods,
                sizes,
                bootstrap,
                slr_alpha,
                cov_alpha,
            } => {
                data.apply(&mut cfg);
                model.apply(&mut cfg);
                let s = &mut cfg.study;
                set(&mut s.methods, methods);
                set(&mut s.sizes, sizes);
                set(&mut s.bootstrap, bootstrap);
                set(&mut s.slr_alpha, slr_alpha);
                set(&mut s.cov_alpha, cov_alpha);
                Command::Study
            }
        };
        if cfg.command.is_some_and(|c| c != command) {
            return Err(CliError::Validation(vec![format!(
                "config command `{}` differs from the subcommand `{}`",
                cfg.command.map_or("", Command::name),
                command.name()
            )]));
        }
        cfg.command = Some(command);
        Ok(cfg)
    }
}
