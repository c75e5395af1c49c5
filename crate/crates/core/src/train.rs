//! Gradient training, optionally against an adversary, plus cross-fitting,
//! weight selection and bootstrap-over-training.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::adversary::{self, AdversaryDesign, AdversarySpec, AdversaryState};
use crate::data::Dataset;
use crate::diagnose::{self, BiasTestOptions};
use crate::error::{Error, Result};
use crate::model::{self, LossKind, ModelSpec, ParamVector, Standardizer, TrainedModel};
use crate::regress::{DesignMatrix, SeKind};
use crate::rng::{self, Rng};
use crate::stats;

// Stream tags for `rng::derive_seed` paths.
const INIT: u64 = 1;
const BATCHES: u64 = 2;
const FOLDS: u64 = 3;
const FOLD_TRAIN: u64 = 4;
const REPLICATE: u64 = 5;
const RESAMPLE: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Batch {
    #[default]
    Full,
    Minibatch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StopMetric {
    /// Primary loss alone.
    PrimaryLoss,
    /// Primary loss plus the signed adversarial term.
    Objective,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EarlyStop {
    pub patience: usize,
    pub metric: StopMetric,
    pub min_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CheckpointPolicy {
    /// Return the last iterate.
    Final,
    /// Every `every` iterations, run the bias test on the training errors.
    /// Among checkpoints with `p > p_threshold` keep the lowest primary loss;
    /// if none qualifies keep the smallest `|γ̂|`.
    BestUnbiased { every: usize, p_threshold: f64 },
}

impl CheckpointPolicy {
    pub const ADVERSARIAL_DEFAULT: CheckpointPolicy = CheckpointPolicy::BestUnbiased {
        every: 100,
        p_threshold: 0.1,
    };
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub primary_lr: f64,
    pub iterations: usize,
    pub batch: Batch,
    pub seed: u64,
    pub folds: usize,
    pub early_stop: Option<EarlyStop>,
    /// z-score features on the training rows.
    pub standardize: bool,
    /// `None` picks `BestUnbiased` for active adversaries and `Final` otherwise.
    pub checkpoint: Option<CheckpointPolicy>,
    /// Standard iterations run before adversarial updates start.
    pub pretrain_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            primary_lr: 1e-2,
            iterations: 2000,
            batch: Batch::Full,
            seed: 0,
            folds: 3,
            early_stop: None,
            standardize: true,
            checkpoint: None,
            pretrain_iterations: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidSpec("iterations must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidSpec("folds must be at least 2".into()));
        }
        if !(self.primary_lr > 0.0) || !self.primary_lr.is_finite() {
            return Err(Error::InvalidSpec("primary_lr must be positive".into()));
        }
        if let Batch::Minibatch(0) = self.batch {
            return Err(Error::InvalidSpec("batch size must be at least 1".into()));
        }
        if let Some(CheckpointPolicy::BestUnbiased { every: 0, .. }) = self.checkpoint {
            return Err(Error::InvalidSpec("checkpoint interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Per-iteration diagnostics handed to a [`TrainObserver`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub primary_loss: f64,
    pub adversary_loss: Option<f64>,
    pub objective: f64,
}

pub trait TrainObserver {
    fn on_iteration(&mut self, record: &IterationRecord);
    fn on_checkpoint(&mut self, _iteration: usize, _gamma_hat: f64, _p_value: f64) {}
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {
    fn on_iteration(&mut self, _record: &IterationRecord) {}
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrainWarning {
    Overparameterized { rows: usize, params: usize },
    /// Primary loss rose over a 100-iteration window ending here.
    LossIncreased { iteration: usize },
    /// No checkpoint passed the bias threshold.
    NoUnbiasedCheckpoint,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Checkpoint {
    pub iteration: usize,
    pub primary_loss: f64,
    pub gamma_hat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub iterations_run: usize,
    pub final_primary_loss: f64,
    /// Iteration whose parameters were returned (`iterations_run` for the final iterate).
    pub selected_iteration: usize,
    pub checkpoints: Vec<Checkpoint>,
    pub warnings: Vec<TrainWarning>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub model: TrainedModel,
    pub report: TrainReport,
}

const LOSS_WINDOW: usize = 100;
const LOSS_TOLERANCE: f64 = 1e-9;

struct Problem {
    spec: ModelSpec,
    features: DMatrix<f64>,
    labels: DVector<f64>,
    covariates: DMatrix<f64>,
    standardizer: Option<Standardizer>,
}

impl Problem {
    fn labeled(data: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<Self> {
        let rows = data.labeled_rows();
        if rows.is_empty() {
            return Err(Error::EmptyLabeledSet);
        }
        if data.n_features() != spec.input_dim {
            return Err(Error::DimensionMismatch {
                what: "feature width",
                expected: spec.input_dim,
                got: data.n_features(),
            });
        }
        let raw = data.features.select_rows(rows.iter());
        let standardizer = cfg.standardize.then(|| Standardizer::fit(&raw));
        let features = match &standardizer {
            Some(s) => s.apply(&raw),
            None => raw,
        };
        Ok(Problem {
            spec: *spec,
            features,
            labels: DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.outcome[i])),
            covariates: data.covariates.select_rows(rows.iter()),
            standardizer,
        })
    }

    fn n(&self) -> usize {
        self.labels.len()
    }
}

struct Adversarial<'a> {
    spec: &'a AdversarySpec,
    full: AdversaryDesign,
    /// Bias-test design over all training rows for checkpoint scoring.
    check_design: DesignMatrix,
}

fn batch_rows(n: usize, size: usize, step: usize, seed: u64, order: &mut Vec<usize>) -> Vec<usize> {
    let per_epoch = n.div_ceil(size);
    let epoch = step / per_epoch;
    let within = step % per_epoch;
    if within == 0 {
        *order = (0..n).collect();
        let mut r: Rng = rng::rng_for(seed, &[BATCHES, epoch as u64]);
        rng::shuffle(order, &mut r);
    }
    let lo = within * size;
    let hi = (lo + size).min(n);
    order[lo..hi].to_vec()
}

fn score_checkpoint(
    adv: &Adversarial<'_>,
    nu: &DVector<f64>,
) -> Result<(f64, f64)> {
    let target = adv.full.adversary_target(nu)?;
    let res = diagnose::bias_test(target.as_slice(), &adv.check_design, SeKind::Classical)?;
    Ok((res.gamma(0)?, res.p_value(0)?))
}

fn run(
    problem: &Problem,
    cfg: &TrainConfig,
    loss: LossKind,
    adv: Option<Adversarial<'_>>,
    start: Option<ParamVector>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    cfg.validate()?;
    problem.spec.validate()?;
    let spec = &problem.spec;
    let n = problem.n();
    let mut params = match start {
        Some(p) => p,
        None => ParamVector::init(spec, &mut rng::rng_for(cfg.seed, &[INIT])),
    };
    let mut warnings = Vec::new();
    if n < params.len() {
        warnings.push(TrainWarning::Overparameterized {
            rows: n,
            params: params.len(),
        });
    }
    let policy = cfg.checkpoint.unwrap_or(if adv.is_some() {
        CheckpointPolicy::ADVERSARIAL_DEFAULT
    } else {
        CheckpointPolicy::Final
    });
    // Scoring needs a bias-test design; without an adversary fall back to the final iterate.
    let policy = if adv.is_none() { CheckpointPolicy::Final } else { policy };

    let mut state = adv.as_ref().map(|a| AdversaryState::new(&a.full));
    let mut order = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<(usize, ParamVector, bool, f64, f64)> = None;
    let mut loss_history: Vec<f64> = Vec::new();
    let mut best_metric = f64::INFINITY;
    let mut since_best = 0usize;
    let mut iterations_run = 0;

    let consider = |iteration: usize,
                    params: &ParamVector,
                    lp: f64,
                    nu: &DVector<f64>,
                    adv: &Adversarial<'_>,
                    p_threshold: f64,
                    checkpoints: &mut Vec<Checkpoint>,
                    best: &mut Option<(usize, ParamVector, bool, f64, f64)>,
                    observer: &mut dyn TrainObserver|
     -> Result<()> {
        let (g, p) = score_checkpoint(adv, nu)?;
        observer.on_checkpoint(iteration, g, p);
        checkpoints.push(Checkpoint {
            iteration,
            primary_loss: lp,
            gamma_hat: g,
            p_value: p,
        });
        let passes = p > p_threshold;
        let better = match best {
            None => true,
            Some((_, _, bp, bl, bg)) => match (passes, *bp) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => lp < *bl,
                (false, false) => libm::fabs(g) < *bg,
            },
        };
        if better {
            *best = Some((iteration, params.clone(), passes, lp, libm::fabs(g)));
        }
        Ok(())
    };

    for t in 0..cfg.iterations {
        let rows = match cfg.batch {
            Batch::Full => None,
            Batch::Minibatch(size) if size >= n => None,
            Batch::Minibatch(size) => Some(batch_rows(n, size, t, cfg.seed, &mut order)),
        };
        let (xb, yb) = match &rows {
            None => (None, None),
            Some(r) => (
                Some(problem.features.select_rows(r.iter())),
                Some(DVector::from_iterator(r.len(), r.iter().map(|&i| problem.labels[i]))),
            ),
        };
        let x = xb.as_ref().unwrap_or(&problem.features);
        let y = yb.as_ref().unwrap_or(&problem.labels);

        let cache = model::forward_cached(spec, &params, x)?;
        let pred = cache.predictions();
        let (lp, mut upstream) = model::loss_from_predictions(loss, &pred, y)?;
        let mut la = None;
        let mut objective = lp;
        let nu = &pred - y;
        if let (Some(a), Some(st)) = (adv.as_ref(), state.as_mut()) {
            let batch_design;
            let design = match &rows {
                None => &a.full,
                Some(r) => {
                    batch_design =
                        AdversaryDesign::new(&problem.covariates.select_rows(r.iter()), a.spec)?;
                    &batch_design
                }
            };
            *st = adversary::adversary_step(st, a.spec, design, &nu)?;
            let value = adversary::adversary_loss(st, design, &nu)?;
            let g = adversary::adversary_grad_wrt_nu(st, design, &nu)?;
            let w = a.spec.objective_sign() * a.spec.alpha;
            upstream.axpy(w, &g, 1.0);
            objective = lp + w * value;
            la = Some(value);
        }
        if !objective.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        observer.on_iteration(&IterationRecord {
            iteration: t,
            primary_loss: lp,
            adversary_loss: la,
            objective,
        });

        if let (CheckpointPolicy::BestUnbiased { every, p_threshold }, Some(a)) = (policy, adv.as_ref()) {
            if t > 0 && t % every == 0 {
                if rows.is_none() {
                    consider(t, &params, lp, &nu, a, p_threshold, &mut checkpoints, &mut best, observer)?;
                } else {
                    let full_pred = model::forward(spec, &params, &problem.features)?;
                    let (full_lp, _) = model::loss_from_predictions(loss, &full_pred, &problem.labels)?;
                    let full_nu = &full_pred - &problem.labels;
                    consider(t, &params, full_lp, &full_nu, a, p_threshold, &mut checkpoints, &mut best, observer)?;
                }
            }
        }

        if adv.is_none() && rows.is_none() {
            loss_history.push(lp);
            if t >= LOSS_WINDOW && lp > loss_history[t - LOSS_WINDOW] + LOSS_TOLERANCE
                && !warnings.iter().any(|w| matches!(w, TrainWarning::LossIncreased { .. })) {
                    warnings.push(TrainWarning::LossIncreased { iteration: t });
                }
        }

        let grad = model::backward(spec, &params, x, &cache, &upstream);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        for (p, g) in params.values.iter_mut().zip(&grad) {
            *p -= cfg.primary_lr * g;
        }
        iterations_run = t + 1;

        if let Some(es) = cfg.early_stop {
            let metric = match es.metric {
                StopMetric::PrimaryLoss => lp,
                StopMetric::Objective => objective,
            };
            if metric < best_metric - es.min_delta {
                best_metric = metric;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    break;
                }
            }
        }
    }

    if !params.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: iterations_run,
        });
    }
    let final_pred = model::forward(spec, &params, &problem.features)?;
    let (final_lp, _) = model::loss_from_predictions(loss, &final_pred, &problem.labels)?;

    let mut selected_iteration = iterations_run;
    if let (CheckpointPolicy::BestUnbiased { p_threshold, .. }, Some(a)) = (policy, adv.as_ref()) {
        let nu = &final_pred - &problem.labels;
        consider(
            iterations_run,
            &params,
            final_lp,
            &nu,
            a,
            p_threshold,
            &mut checkpoints,
            &mut best,
            observer,
        )?;
        if let Some((it, p, passes, _, _)) = best {
            if !passes {
                warnings.push(TrainWarning::NoUnbiasedCheckpoint);
            }
            selected_iteration = it;
            params = p;
        }
    }

    Ok(TrainRun {
        model: TrainedModel {
            spec: *spec,
            params,
            standardizer: problem.standardizer.clone(),
        },
        report: TrainReport {
            iterations_run,
            final_primary_loss: final_lp,
            selected_iteration,
            checkpoints,
            warnings,
        },
    })
}

/// Plain gradient descent on the primary loss over the labeled rows.
pub fn train_standard(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig, loss: LossKind) -> Result<TrainRun> {
    train_standard_observed(spec, data, cfg, loss, &mut Silent)
}

pub fn train_standard_observed(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: LossKind,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    let problem = Problem::labeled(data, spec, cfg)?;
    run(&problem, cfg, loss, None, None, observer)
}

/// Alternating adversary and primary updates over the labeled rows.
///
/// With `alpha = 0` this is exactly [`train_standard`].
pub fn train_adversarial(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: LossKind,
    adv: &AdversarySpec,
) -> Result<TrainRun> {
    train_adversarial_observed(spec, data, cfg, loss, adv, &mut Silent)
}

pub fn train_adversarial_observed(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: LossKind,
    adv: &AdversarySpec,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    adv.validate(data.covariates.ncols())?;
    if adv.alpha == 0.0 {
        return train_standard_observed(spec, data, cfg, loss, observer);
    }
    let problem = Problem::labeled(data, spec, cfg)?;
    let full = AdversaryDesign::new(&problem.covariates, adv)?;
    let regs = adversary::make_residualized_design(&problem.covariates, adv)?;
    let check_design = DesignMatrix::from_regressors(&regs, true)?;
    let a = Adversarial {
        spec: adv,
        full,
        check_design,
    };
    let start = if cfg.pretrain_iterations > 0 {
        let pre = TrainConfig {
            iterations: cfg.pretrain_iterations,
            early_stop: None,
            checkpoint: None,
            ..cfg.clone()
        };
        Some(run(&problem, &pre, loss, None, None, observer)?.model.params)
    } else {
        None
    };
    run(&problem, cfg, loss, Some(a), start, observer)
}

fn train_any(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: LossKind,
    adv: Option<&AdversarySpec>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    match adv {
        Some(a) => train_adversarial_observed(spec, data, cfg, loss, a, observer),
        None => train_standard_observed(spec, data, cfg, loss, observer),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitResult {
    /// Out-of-fold predictions for labeled rows; for unlabeled rows the mean
    /// prediction of the fold models. One entry per dataset row.
    pub predictions: DVector<f64>,
    /// Test fold of each labeled row, `None` for unlabeled rows.
    pub fold_assignment: Vec<Option<usize>>,
    pub models: Vec<TrainedModel>,
    pub reports: Vec<TrainReport>,
    /// Out-of-fold mean squared error over the labeled rows.
    pub oof_mse: f64,
    /// Out-of-fold agreement of `Ŷ ≥ 0.5` with `Y ≥ 0.5`.
    pub accuracy: f64,
}

impl CrossFitResult {
    /// `ν = Ŷ - Y` on the labeled rows, in dataset order.
    pub fn labeled_errors(&self, data: &Dataset) -> DVector<f64> {
        let rows = data.labeled_rows();
        DVector::from_iterator(
            rows.len(),
            rows.iter().map(|&i| self.predictions[i] - data.outcome[i]),
        )
    }
}

/// Assigns each labeled row a fold so that rows sharing a group share a fold.
pub fn assign_folds(data: &Dataset, folds: usize, seed: u64) -> Result<Vec<Option<usize>>> {
    let rows = data.labeled_rows();
    let mut groups: Vec<usize> = rows.iter().map(|&i| data.group_of(i)).collect();
    groups.sort_unstable();
    groups.dedup();
    if folds > groups.len() {
        return Err(Error::InsufficientLabels {
            requested: folds,
            available: groups.len(),
        });
    }
    let mut perm: Vec<usize> = (0..groups.len()).collect();
    rng::shuffle(&mut perm, &mut rng::rng_for(seed, &[FOLDS]));
    let mut fold_of_group = vec![0usize; groups.len()];
    for (k, &p) in perm.iter().enumerate() {
        fold_of_group[p] = k % folds;
    }
    let mut out = vec![None; data.n_rows()];
    for &i in &rows {
        let g = groups.binary_search(&data.group_of(i)).expect("group listed");
        out[i] = Some(fold_of_group[g]);
    }
    Ok(out)
}

/// K-fold cross-fitting over the labeled rows.
pub fn cross_fit(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: LossKind,
    adv: Option<&AdversarySpec>,
) -> Result<CrossFitResult> {
    cross_fit_observed(spec, data, cfg, loss, adv, &mut Silent)
}

pub fn cross_fit_observed(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: LossKind,
    adv: Option<&AdversarySpec>,
    observer: &mut dyn TrainObserver,
) -> Result<CrossFitResult> {
    cfg.validate()?;
    if data.n_labeled() == 0 {
        return Err(Error::EmptyLabeledSet);
    }
    let assignment = assign_folds(data, cfg.folds, cfg.seed)?;
    let unlabeled = data.unlabeled_rows();
    let unlabeled_features = data.features.select_rows(unlabeled.iter());
    let mut predictions = DVector::zeros(data.n_rows());
    let mut models = Vec::with_capacity(cfg.folds);
    let mut reports = Vec::with_capacity(cfg.folds);
    for f in 0..cfg.folds {
        let train_mask: Vec<bool> = assignment.iter().map(|a| matches!(a, Some(k) if *k != f)).collect();
        let test_rows: Vec<usize> = (0..data.n_rows()).filter(|&i| assignment[i] == Some(f)).collect();
        let fold_data = data.with_labeled(train_mask)?;
        let fold_cfg = cfg.with_seed(rng::derive_seed(cfg.seed, &[FOLD_TRAIN, f as u64]));
        let run = train_any(spec, &fold_data, &fold_cfg, loss, adv, observer)?;
        let test_pred = run.model.predict(&data.features.select_rows(test_rows.iter()))?;
        for (k, &i) in test_rows.iter().enumerate() {
            predictions[i] = test_pred[k];
        }
        if !unlabeled.is_empty() {
            let p = run.model.predict(&unlabeled_features)?;
            for (k, &i) in unlabeled.iter().enumerate() {
                predictions[i] += p[k] / cfg.folds as f64;
            }
        }
        models.push(run.model);
        reports.push(run.report);
    }
    let rows = data.labeled_rows();
    let mut sse = 0.0;
    let mut hits = 0usize;
    for &i in &rows {
        let (p, y) = (predictions[i], data.outcome[i]);
        sse += (p - y) * (p - y);
        if (p >= 0.5) == (y >= 0.5) {
            hits += 1;
        }
    }
    Ok(CrossFitResult {
        predictions,
        fold_assignment: assignment,
        models,
        reports,
        oof_mse: sse / rows.len() as f64,
        accuracy: hits as f64 / rows.len() as f64,
    })
}

/// Covariate columns entering the bias test for an adversary's target
/// coefficient; the first listed column is the one reported.
pub fn bias_regressor_cols(adv: &AdversarySpec) -> Vec<usize> {
    use crate::adversary::AdversaryFamily::*;
    let mut cols = match adv.family {
        Slr | CovariancePenalty | FwlSlr => vec![adv.treatment_index],
        IvSlr => adv.instrument_cols.clone(),
    };
    if matches!(adv.family, FwlSlr | IvSlr) {
        cols.extend(&adv.control_cols);
    }
    cols
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlphaRow {
    pub alpha: f64,
    pub oof_mse: f64,
    pub accuracy: f64,
    pub gamma_hat: f64,
    pub gamma_se: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlphaTuning {
    pub alpha_star: f64,
    pub rows: Vec<AlphaRow>,
}

pub const ALPHA_P_THRESHOLD: f64 = 0.1;

/// Cross-fits every weight in `alpha_grid` and picks the smallest one whose
/// out-of-fold bias test has `p > 0.1`. If none qualifies, the weight with
/// the smallest `|γ̂|` is chosen.
pub fn tune_alpha(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: LossKind,
    template: &AdversarySpec,
    alpha_grid: &[f64],
) -> Result<AlphaTuning> {
    let rows = alpha_grid
        .iter()
        .map(|&a| alpha_row(spec, data, cfg, loss, template, a))
        .collect::<Result<Vec<_>>>()?;
    select_alpha(rows)
}

/// One grid cell of [`tune_alpha`], usable as an independent job.
pub fn alpha_row(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: LossKind,
    template: &AdversarySpec,
    alpha: f64,
) -> Result<AlphaRow> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidSpec("alpha must be nonnegative".into()));
    }
    let adv = AdversarySpec {
        alpha,
        ..template.clone()
    };
    let cf = cross_fit(spec, data, cfg, loss, Some(&adv))?;
    let nu = cf.labeled_errors(data);
    let rows = data.labeled_rows();
    let regs = data
        .covariates
        .select_rows(rows.iter())
        .select_columns(bias_regressor_cols(&adv).iter());
    let bt = diagnose::bias_test_regressors(nu.as_slice(), &regs, &BiasTestOptions::default())?;
    Ok(AlphaRow {
        alpha,
        oof_mse: cf.oof_mse,
        accuracy: cf.accuracy,
        gamma_hat: bt.gamma(0)?,
        gamma_se: bt.std_error(0)?,
        p_value: bt.p_value(0)?,
    })
}

pub fn select_alpha(rows: Vec<AlphaRow>) -> Result<AlphaTuning> {
    if rows.is_empty() {
        return Err(Error::InvalidSpec("alpha grid is empty".into()));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].alpha.total_cmp(&rows[b].alpha));
    let pick = order
        .iter()
        .copied()
        .find(|&i| rows[i].p_value > ALPHA_P_THRESHOLD)
        .unwrap_or_else(|| {
            order
                .iter()
                .copied()
                .min_by(|&a, &b| libm::fabs(rows[a].gamma_hat).total_cmp(&libm::fabs(rows[b].gamma_hat)))
                .expect("nonempty")
        });
    Ok(AlphaTuning {
        alpha_star: rows[pick].alpha,
        rows,
    })
}

/// Labeled rows drawn with replacement; unlabeled rows kept as they are.
///
/// Each copy remembers its source row as its group so cross-fitting keeps
/// duplicates in one fold.
pub fn resample_labeled(data: &Dataset, rng: &mut Rng) -> Dataset {
    use rand::Rng as _;
    let labeled = data.labeled_rows();
    let unlabeled = data.unlabeled_rows();
    let mut rows = Vec::with_capacity(data.n_rows());
    for _ in 0..labeled.len() {
        rows.push(labeled[rng.random_range(0..labeled.len())]);
    }
    rows.extend(&unlabeled);
    let mut out = data.select_rows(&rows);
    out.groups = Some(rows.iter().map(|&i| data.group_of(i)).collect());
    out
}

/// Seed handed to the pipeline of replicate `index`.
pub fn replicate_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[REPLICATE, index as u64])
}

/// Resamples for replicate `index` and runs `pipeline` on the result.
pub fn bootstrap_replicate<F>(data: &Dataset, seed: u64, index: usize, pipeline: &F) -> Result<Vec<f64>>
where
    F: Fn(&Dataset, u64) -> Result<Vec<f64>>,
{
    let rep_seed = replicate_seed(seed, index);
    let sample = resample_labeled(data, &mut rng::rng_for(rep_seed, &[RESAMPLE]));
    let stats = pipeline(&sample, rep_seed).map_err(|e| Error::Replicate {
        index,
        source: alloc::boxed::Box::new(e),
    })?;
    if stats.iter().any(|v| !v.is_finite()) {
        return Err(Error::Replicate {
            index,
            source: alloc::boxed::Box::new(Error::NonFiniteLoss { iteration: 0 }),
        });
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BootstrapDistribution {
    pub coefficient_draws: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// 2.5th and 97.5th percentiles.
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl BootstrapDistribution {
    pub fn from_draws(draws: Vec<f64>) -> Result<Self> {
        if draws.len() < 2 {
            return Err(Error::DomainError("a bootstrap needs at least two replicates"));
        }
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(Error::DomainError("non-finite bootstrap draw"));
        }
        Ok(BootstrapDistribution {
            mean: stats::mean(&draws),
            sd: stats::std_dev(&draws),
            ci_lower: stats::quantile(&draws, 0.025),
            ci_upper: stats::quantile(&draws, 0.975),
            coefficient_draws: draws,
        })
    }

    /// Whether the percentile interval contains `value`.
    pub fn covers(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

/// Splits per-replicate statistic vectors into one distribution per statistic.
pub fn distributions_from_replicates(replicates: Vec<Vec<f64>>) -> Result<Vec<BootstrapDistribution>> {
    let k = replicates.first().map_or(0, |r| r.len());
    if replicates.iter().any(|r| r.len() != k) {
        return Err(Error::DomainError("replicates returned different statistic counts"));
    }
    (0..k)
        .map(|j| BootstrapDistribution::from_draws(replicates.iter().map(|r| r[j]).collect()))
        .collect()
}

/// Sequential bootstrap over training with several statistics per replicate.
pub fn bootstrap_train_multi<F>(b: usize, data: &Dataset, seed: u64, pipeline: F) -> Result<Vec<BootstrapDistribution>>
where
    F: Fn(&Dataset, u64) -> Result<Vec<f64>>,
{
    if b < 2 {
        return Err(Error::DomainError("a bootstrap needs at least two replicates"));
    }
    let reps = (0..b)
        .map(|i| bootstrap_replicate(data, seed, i, &pipeline))
        .collect::<Result<Vec<_>>>()?;
    distributions_from_replicates(reps)
}

/// Sequential bootstrap over training of a single coefficient.
pub fn bootstrap_train<F>(b: usize, data: &Dataset, seed: u64, pipeline: F) -> Result<BootstrapDistribution>
where
    F: Fn(&Dataset, u64) -> Result<f64>,
{
    let mut d = bootstrap_train_multi(b, data, seed, |s, r| pipeline(s, r).map(|v| vec![v]))?;
    Ok(d.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use rand::Rng as _;

    fn linear_data(n: usize, seed: u64) -> Dataset {
        let mut r = rng::rng_for(seed, &[]);
        let x = DMatrix::from_fn(n, 2, |_, _| r.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |i, _| 0.5 + 2.0 * x[(i, 0)] - x[(i, 1)]);
        let cov = x.columns(0, 1).into_owned();
        Dataset::new(x, cov, vec![String::from("x")], y, vec![true; n]).unwrap()
    }

    #[test]
    fn realizable_linear_target_is_learned() {
        let data = linear_data(50, 1);
        let cfg = TrainConfig {
            primary_lr: 0.1,
            iterations: 3000,
            standardize: false,
            ..Default::default()
        };
        let run = train_standard(&ModelSpec::linear(2), &data, &cfg, LossKind::Mse).unwrap();
        assert!(run.report.final_primary_loss < 1e-6);
        assert!(run.report.warnings.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let data = linear_data(20, 2);
        let cfg = TrainConfig {
            primary_lr: 1e3,
            iterations: 500,
            standardize: false,
            ..Default::default()
        };
        assert!(matches!(
            train_standard(&ModelSpec::linear(2), &data, &cfg, LossKind::Mse),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn folds_partition_labeled_rows() {
        let data = linear_data(10, 3);
        let cfg = TrainConfig {
            folds: 10,
            iterations: 5,
            ..Default::default()
        };
        let cf = cross_fit(&ModelSpec::linear(2), &data, &cfg, LossKind::Mse, None).unwrap();
        let mut seen: Vec<usize> = cf.fold_assignment.iter().map(|f| f.unwrap()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let too_many = TrainConfig { folds: 11, ..cfg };
        assert!(matches!(
            cross_fit(&ModelSpec::linear(2), &data, &too_many, LossKind::Mse, None),
            Err(Error::InsufficientLabels { .. })
        ));
    }

    #[test]
    fn grouped_rows_share_a_fold() {
        let mut data = linear_data(30, 4);
        data.groups = Some((0..30).map(|i| i / 3).collect());
        let a = assign_folds(&data, 3, 9).unwrap();
        for i in 0..30 {
            assert_eq!(a[i], a[3 * (i / 3)]);
        }
    }

    #[test]
    fn constant_pipeline_has_zero_spread() {
        let data = linear_data(12, 5);
        let d = bootstrap_train(5, &data, 1, |_, _| Ok(2.5)).unwrap();
        assert_eq!(d.sd, 0.0);
        assert!(d.coefficient_draws.iter().all(|&v| v == 2.5));
        assert!(bootstrap_train(1, &data, 1, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn replicate_errors_carry_index() {
        let data = linear_data(12, 6);
        let err = bootstrap_train(3, &data, 1, |_, seed| {
            if seed == replicate_seed(1, 1) {
                Err(Error::EmptyLabeledSet)
            } else {
                Ok(0.0)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Replicate { index: 1, .. }));
    }

    #[test]
    fn resampling_keeps_unlabeled_rows() {
        let mut data = linear_data(10, 7);
        data.labeled[8] = false;
        data.labeled[9] = false;
        let s = resample_labeled(&data, &mut rng::rng_for(1, &[]));
        assert_eq!(s.n_rows(), 10);
        assert_eq!(s.n_labeled(), 8);
        assert_eq!(s.outcome[8], data.outcome[8]);
        assert_eq!(s.outcome[9], data.outcome[9]);
    }

    #[test]
    fn alpha_selection_rules() {
        let row = |alpha, gamma_hat: f64, p_value| AlphaRow {
            alpha,
            oof_mse: 0.0,
            accuracy: 0.0,
            gamma_hat,
            gamma_se: 0.0,
            p_value,
        };
        let t = select_alpha(vec![row(1.0, 0.0, 0.9), row(0.5, 0.01, 0.2), row(0.0, 0.1, 0.0)]).unwrap();
        assert_eq!(t.alpha_star, 0.5);
        let t = select_alpha(vec![row(0.0, 0.1, 0.0), row(0.5, -0.02, 0.01)]).unwrap();
        assert_eq!(t.alpha_star, 0.5);
        assert!(select_alpha(vec![]).is_err());
    }
}
