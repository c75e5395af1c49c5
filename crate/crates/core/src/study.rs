//! End-to-end downstream pipelines: train a predictor on the labeled rows,
//! predict the outcome everywhere, and regress the predictions on the
//! treatment. Each method yields one downstream coefficient per run.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::adversary::{AdversaryFamily, AdversarySpec};
use crate::data::Dataset;
use crate::diagnose::{self, BiasTestOptions, BiasTestResult};
use crate::error::{Error, Result};
use crate::model::{LossKind, ModelSpec};
use crate::regress::{self, DesignMatrix, FitResult};
use crate::rng;
use crate::train::{self, BootstrapDistribution, CrossFitResult, TrainConfig};

const LABEL_PICK: u64 = 11;
const STUDY_CELL: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    /// Standard model, predictions regressed as if they were the outcome.
    Baseline,
    AdversarialSlr,
    AdversarialCov,
    /// Baseline coefficient minus the bias-test estimate.
    BiasCorrect,
    /// OLS on the labeled rows only.
    GroundTruth,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::AdversarialSlr,
        Method::AdversarialCov,
        Method::BiasCorrect,
        Method::GroundTruth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::AdversarialSlr => "adv_slr",
            Method::AdversarialCov => "adv_cov",
            Method::BiasCorrect => "correct",
            Method::GroundTruth => "ground_truth",
        }
    }

    pub fn from_name(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == s)
    }
}

/// Settings shared by every method of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PipelineConfig {
    pub model: ModelSpec,
    pub loss: LossKind,
    /// Used by the adversarial methods. The baseline runs the same number of
    /// total iterations without an adversary.
    pub train: TrainConfig,
    pub treatment_index: usize,
    pub slr_alpha: f64,
    pub cov_alpha: f64,
    /// Primary learning rate for the covariance penalty, whose fixed-size
    /// subgradient chatters at rates that suit the smooth adversary.
    pub cov_lr: Option<f64>,
}

impl PipelineConfig {
    pub fn baseline_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations + self.train.pretrain_iterations,
            pretrain_iterations: 0,
            checkpoint: None,
            ..self.train.clone()
        }
    }

    pub fn adversary(&self, method: Method) -> Option<AdversarySpec> {
        let (family, alpha) = match method {
            Method::AdversarialSlr => (AdversaryFamily::Slr, self.slr_alpha),
            Method::AdversarialCov => (AdversaryFamily::CovariancePenalty, self.cov_alpha),
            _ => return None,
        };
        Some(AdversarySpec::new(family, alpha, self.treatment_index))
    }

    pub fn method_config(&self, method: Method) -> TrainConfig {
        match (method, self.cov_lr) {
            (Method::AdversarialCov, Some(lr)) => TrainConfig {
                primary_lr: lr,
                ..self.train.clone()
            },
            _ => self.train.clone(),
        }
    }
}

/// One method's result on one dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MethodEstimate {
    pub method: Method,
    pub beta_hat: f64,
    /// Classical OLS standard error of the downstream fit, or the normal
    /// approximation for the corrected estimate.
    pub naive_se: f64,
    /// Out-of-fold bias test of the predictor, if one was trained.
    pub gamma_hat: Option<f64>,
    pub gamma_se: Option<f64>,
    pub gamma_p: Option<f64>,
    pub oof_mse: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Regresses `response` rows on `[1, treatment]` and returns the fit.
pub fn downstream_fit(data: &Dataset, response: &DVector<f64>, rows: &[usize], treatment: usize) -> Result<FitResult> {
    let x = data
        .covariates
        .select_rows(rows.iter())
        .select_columns([treatment].iter());
    let design = DesignMatrix::from_regressors(&x, true)?;
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| response[i]));
    regress::ols_fit(&design, &y)
}

fn oof_bias_test(data: &Dataset, cf: &CrossFitResult, treatment: usize) -> Result<BiasTestResult> {
    let nu = cf.labeled_errors(data);
    let rows = data.labeled_rows();
    let regs = data
        .covariates
        .select_rows(rows.iter())
        .select_columns([treatment].iter());
    diagnose::bias_test_regressors(nu.as_slice(), &regs, &BiasTestOptions::default())
}

fn model_estimate(method: Method, data: &Dataset, cf: &CrossFitResult, treatment: usize) -> Result<(MethodEstimate, FitResult, BiasTestResult)> {
    let all: Vec<usize> = (0..data.n_rows()).collect();
    let fit = downstream_fit(data, &cf.predictions, &all, treatment)?;
    let bt = oof_bias_test(data, cf, treatment)?;
    let est = MethodEstimate {
        method,
        beta_hat: fit.coefficients[1],
        naive_se: libm::sqrt(fit.vcov[(1, 1)]),
        gamma_hat: Some(bt.gamma(0)?),
        gamma_se: Some(bt.std_error(0)?),
        gamma_p: Some(bt.p_value(0)?),
        oof_mse: Some(cf.oof_mse),
        accuracy: Some(cf.accuracy),
    };
    Ok((est, fit, bt))
}

/// Runs every requested method once on `data` and returns estimates in the
/// order of `methods`.
pub fn run_pipeline(data: &Dataset, cfg: &PipelineConfig, methods: &[Method], seed: u64) -> Result<Vec<MethodEstimate>> {
    if methods.is_empty() {
        return Err(Error::InvalidSpec("no methods requested".into()));
    }
    let t = cfg.treatment_index;
    if t >= data.covariates.ncols() {
        return Err(Error::MissingColumns(alloc::format!("treatment column {t}")));
    }
    let needs_baseline = methods.iter().any(|m| matches!(m, Method::Baseline | Method::BiasCorrect));
    let baseline = if needs_baseline {
        let base_cfg = cfg.baseline_config().with_seed(seed);
        let cf = train::cross_fit(&cfg.model, data, &base_cfg, cfg.loss, None)?;
        Some(model_estimate(Method::Baseline, data, &cf, t)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let est = match m {
            Method::Baseline => baseline.as_ref().expect("trained").0.clone(),
            Method::BiasCorrect => {
                let (base, fit, bt) = baseline.as_ref().expect("trained");
                let c = diagnose::bias_correct(fit, bt, 1)?;
                MethodEstimate {
                    method: m,
                    beta_hat: c.beta_corrected,
                    naive_se: c.se_corrected,
                    ..base.clone()
                }
            }
            Method::AdversarialSlr | Method::AdversarialCov => {
                let adv = cfg.adversary(m).expect("adversarial method");
                let train_cfg = cfg.method_config(m).with_seed(seed);
                let cf = train::cross_fit(&cfg.model, data, &train_cfg, cfg.loss, Some(&adv))?;
                model_estimate(m, data, &cf, t)?.0
            }
            Method::GroundTruth => {
                let rows = data.labeled_rows();
                let fit = downstream_fit(data, &data.outcome, &rows, t)?;
                MethodEstimate {
                    method: m,
                    beta_hat: fit.coefficients[1],
                    naive_se: libm::sqrt(fit.vcov[(1, 1)]),
                    gamma_hat: None,
                    gamma_se: None,
                    gamma_p: None,
                    oof_mse: None,
                    accuracy: None,
                }
            }
        };
        out.push(est);
    }
    Ok(out)
}

/// Per-replicate downstream coefficients, in the order of `methods`.
pub fn pipeline_coefficients(data: &Dataset, cfg: &PipelineConfig, methods: &[Method], seed: u64) -> Result<Vec<f64>> {
    Ok(run_pipeline(data, cfg, methods, seed)?.into_iter().map(|e| e.beta_hat).collect())
}

/// Executes `b` independent replicate jobs and returns their outputs in
/// index order.
pub trait ReplicateRunner {
    fn run(&self, b: usize, job: &(dyn Fn(usize) -> Result<Vec<f64>> + Sync)) -> Result<Vec<Vec<f64>>>;
}

/// Runs replicates one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ReplicateRunner for Sequential {
    fn run(&self, b: usize, job: &(dyn Fn(usize) -> Result<Vec<f64>> + Sync)) -> Result<Vec<Vec<f64>>> {
        (0..b).map(job).collect()
    }
}

/// Point estimates on `data` plus a bootstrap over training for each method.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BootstrapStudy {
    pub estimates: Vec<MethodEstimate>,
    pub distributions: Vec<BootstrapDistribution>,
    /// Raw replicate outputs, `draws[r][m]` for replicate `r` and method `m`.
    pub draws: Vec<Vec<f64>>,
}

impl BootstrapStudy {
    pub fn index_of(&self, method: Method) -> Option<usize> {
        self.estimates.iter().position(|e| e.method == method)
    }

    pub fn distribution(&self, method: Method) -> Option<&BootstrapDistribution> {
        self.index_of(method).map(|i| &self.distributions[i])
    }

    pub fn estimate(&self, method: Method) -> Option<&MethodEstimate> {
        self.index_of(method).map(|i| &self.estimates[i])
    }

    /// Paired replicate draws of one method.
    pub fn paired_draws(&self, method: Method) -> Option<Vec<f64>> {
        self.index_of(method).map(|i| self.draws.iter().map(|r| r[i]).collect())
    }
}

/// Runs the pipeline on `data`, then on `b` labeled-set resamples.
pub fn bootstrap_study(
    data: &Dataset,
    cfg: &PipelineConfig,
    methods: &[Method],
    b: usize,
    seed: u64,
    runner: &dyn ReplicateRunner,
) -> Result<BootstrapStudy> {
    if b < 2 {
        return Err(Error::DomainError("a bootstrap needs at least two replicates"));
    }
    let estimates = run_pipeline(data, cfg, methods, seed)?;
    let pipeline = |sample: &Dataset, s: u64| pipeline_coefficients(sample, cfg, methods, s);
    let job = |i: usize| train::bootstrap_replicate(data, seed, i, &pipeline);
    let draws = runner.run(b, &job)?;
    let distributions = train::distributions_from_replicates(draws.clone())?;
    Ok(BootstrapStudy {
        estimates,
        distributions,
        draws,
    })
}

/// Returns a copy of `data` with exactly `j` randomly chosen labeled rows.
pub fn label_subset(data: &Dataset, j: usize, seed: u64) -> Result<Dataset> {
    let pool = data.labeled_rows();
    if j > pool.len() {
        return Err(Error::InsufficientLabels {
            requested: j,
            available: pool.len(),
        });
    }
    let mut r = rng::rng_for(seed, &[LABEL_PICK]);
    let picked = rng::sample_without_replacement(pool.len(), j, &mut r);
    let mut mask = vec![false; data.n_rows()];
    for k in picked {
        mask[pool[k]] = true;
    }
    data.with_labeled(mask)
}

/// One `(J, method)` cell of a progressive-label study.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyCell {
    pub n_labeled: usize,
    pub estimate: MethodEstimate,
    pub bootstrap: BootstrapDistribution,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProgressiveStudy {
    pub cells: Vec<StudyCell>,
    pub n_rows: usize,
    pub seed: u64,
}

impl ProgressiveStudy {
    pub fn cell(&self, j: usize, method: Method) -> Option<&StudyCell> {
        self.cells
            .iter()
            .find(|c| c.n_labeled == j && c.estimate.method == method)
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.cells.iter().map(|c| c.estimate.method).collect();
        m.sort_unstable();
        m.dedup();
        m
    }
}

/// For each `J`, labels `J` random rows of the pool, treats the rest as the
/// evaluation set, and bootstraps every method. The downstream regression
/// always uses all rows.
pub fn progressive_label_study(
    data: &Dataset,
    cfg: &PipelineConfig,
    sample_sizes: &[usize],
    methods: &[Method],
    draws: usize,
    seed: u64,
    runner: &dyn ReplicateRunner,
) -> Result<ProgressiveStudy> {
    if sample_sizes.is_empty() {
        return Err(Error::InvalidSpec("no sample sizes requested".into()));
    }
    let mut cells = Vec::new();
    for (k, &j) in sample_sizes.iter().enumerate() {
        let cell_seed = rng::derive_seed(seed, &[STUDY_CELL, k as u64]);
        let subset = label_subset(data, j, cell_seed)?;
        let bs = bootstrap_study(&subset, cfg, methods, draws, cell_seed, runner)?;
        for (est, dist) in bs.estimates.into_iter().zip(bs.distributions) {
            cells.push(StudyCell {
                n_labeled: j,
                estimate: est,
                bootstrap: dist,
            });
        }
    }
    Ok(ProgressiveStudy {
        cells,
        n_rows: data.n_rows(),
        seed,
    })
}

/// Parses a comma-separated method list.
pub fn parse_methods(s: &str) -> core::result::Result<Vec<Method>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| Method::from_name(t).ok_or_else(|| alloc::format!("unknown method `{t}`")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn linear_data(n: usize, labeled: usize) -> Dataset {
        let features = DMatrix::from_fn(n, 2, |i, j| ((i * (j + 3)) % 7) as f64 / 7.0);
        let x = DMatrix::from_fn(n, 1, |i, _| (i % 2) as f64);
        let y = DVector::from_fn(n, |i, _| 0.3 * features[(i, 0)] - 0.2 * features[(i, 1)] + 0.1);
        let mask = (0..n).map(|i| i < labeled).collect();
        Dataset::new(features, x, vec!["x".into()], y, mask).unwrap()
    }

    fn config() -> PipelineConfig {
        PipelineConfig {
            model: ModelSpec::linear(2),
            loss: LossKind::Mse,
            train: TrainConfig {
                primary_lr: 0.1,
                iterations: 300,
                ..TrainConfig::default()
            },
            treatment_index: 0,
            slr_alpha: 0.5,
            cov_alpha: 1e-3,
            cov_lr: None,
        }
    }

    #[test]
    fn ground_truth_on_full_pool_is_direct_ols() {
        let data = linear_data(60, 60);
        let est = run_pipeline(&data, &config(), &[Method::GroundTruth], 1).unwrap();
        let all: Vec<usize> = (0..60).collect();
        let fit = downstream_fit(&data, &data.outcome, &all, 0).unwrap();
        assert_eq!(est[0].beta_hat, fit.coefficients[1]);
    }

    #[test]
    fn correction_subtracts_bias_from_baseline() {
        let data = linear_data(60, 30);
        let est = run_pipeline(&data, &config(), &[Method::Baseline, Method::BiasCorrect], 2).unwrap();
        let g = est[0].gamma_hat.unwrap();
        assert_eq!(est[1].beta_hat, est[0].beta_hat - g);
    }

    #[test]
    fn label_subset_keeps_all_rows() {
        let data = linear_data(50, 40);
        let s = label_subset(&data, 10, 3).unwrap();
        assert_eq!(s.n_rows(), 50);
        assert_eq!(s.n_labeled(), 10);
        assert!(s.labeled_rows().iter().all(|&i| i < 40));
        assert!(label_subset(&data, 41, 3).is_err());
    }

    #[test]
    fn methods_round_trip_by_name() {
        assert_eq!(parse_methods("baseline, adv_slr,correct").unwrap(), vec![
            Method::Baseline,
            Method::AdversarialSlr,
            Method::BiasCorrect
        ]);
        assert!(parse_methods("nope").is_err());
    }

    #[test]
    fn small_progressive_study_has_every_cell() {
        let data = linear_data(40, 40);
        let methods = [Method::Baseline, Method::GroundTruth];
        let s = progressive_label_study(&data, &config(), &[20, 40], &methods, 3, 4, &Sequential).unwrap();
        assert_eq!(s.cells.len(), 4);
        assert!(s.cell(20, Method::Baseline).is_some());
        assert_eq!(s.cell(40, Method::GroundTruth).unwrap().bootstrap.coefficient_draws.len(), 3);
    }
}
