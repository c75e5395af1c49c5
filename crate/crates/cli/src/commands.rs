use std::time::Instant;

use debias_core::adversary::AdversaryFamily;
use debias_core::data::Dataset;
use debias_core::diagnose::{self, BiasTestResult, CorrectedEstimate, PowerOptions};
use debias_core::regress::{FitResult, SeKind};
use debias_core::rng::derive_seed;
use debias_core::simgen::{
    self, ContinuousConfig, ControlsConfig, DagConfig, DagScenario, PixelBankConfig, Scenario, SimulatedDataset,
};
use debias_core::stats;
use debias_core::study::{self, BootstrapStudy, Method, PipelineConfig, StudyCell};
use debias_core::train::{self, CrossFitResult};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::config::{parse_sizes, Command, ExperimentConfig};
use crate::dataset_io::{self, BankInfo};
use crate::error::CliError;
use crate::report::{
    self, cell, AlphaSection, BiasTestRecord, ExperimentReport, Manifest, OutputDir, PowerSection, Record,
};
use crate::runner::{parallel_map, Progress, Threaded};

// Seed paths below the experiment seed.
const BANK: u64 = 1;
const SIMULATE: u64 = 2;
const LABELS: u64 = 3;
const TRAIN: u64 = 4;
const RESAMPLE: u64 = 5;

const DECILES: usize = 10;

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    progress: Progress,
    started: Instant,
}

impl Ctx<'_> {
    fn stream(&self, tag: u64) -> u64 {
        derive_seed(self.seed, &[tag])
    }
}

/// Covariate columns used by the regressions, resolved by name.
struct Columns {
    treatment: usize,
    controls: Vec<usize>,
    instruments: Vec<usize>,
}

impl Columns {
    fn resolve(cfg: &ExperimentConfig, data: &Dataset) -> Result<Columns, CliError> {
        let mut missing = Vec::new();
        let mut find = |name: &str| match data.covariate_index(name) {
            Some(i) => i,
            None => {
                missing.push(format!("covariate `{name}` not in the dataset ({})", data.covariate_names.join(", ")));
                0
            }
        };
        let d = &cfg.data;
        let treatment = if d.treatment.is_empty() { 0 } else { find(&d.treatment) };
        let controls = d.controls.iter().map(|c| find(c)).collect();
        let instruments = d.instruments.iter().map(|c| find(c)).collect();
        if !missing.is_empty() {
            return Err(CliError::Validation(missing));
        }
        Ok(Columns {
            treatment,
            controls,
            instruments,
        })
    }

    /// Treatment then controls, the regressors of the bias test.
    fn bias_regressors(&self) -> Vec<usize> {
        let mut cols = vec![self.treatment];
        cols.extend(&self.controls);
        cols
    }
}

struct Loaded {
    data: Dataset,
    sim: Option<SimulatedDataset>,
    bank: Option<BankInfo>,
}

fn generate(ctx: &Ctx) -> Result<Loaded, CliError> {
    let d = &ctx.cfg.data;
    let scenario = Scenario::from_name(&d.scenario)
        .ok_or_else(|| CliError::Validation(vec![format!("unknown scenario `{}`", d.scenario)]))?;
    let seed = ctx.stream(SIMULATE);
    let dag = |s: DagScenario| simgen::simulate_dag(d.n, seed, &DagConfig::new(s, d.strength));
    let mut bank = None;
    let mut with_bank = || {
        let bank_cfg = PixelBankConfig::new(d.bank_n.unwrap_or(d.n), d.bank_seed.unwrap_or(ctx.stream(BANK)));
        let b = simgen::make_pixel_bank(&bank_cfg)?;
        bank = Some(BankInfo {
            n: b.len(),
            seed: bank_cfg.seed,
            noise_scale: b.noise_scale,
            pilot_accuracy: b.pilot_accuracy,
        });
        Ok::<_, debias_core::Error>(b)
    };
    let sim = match scenario {
        Scenario::Sim1Greening => simgen::simulate_greening(&with_bank()?, d.n, seed)?,
        Scenario::ContinuousDistance => {
            simgen::simulate_continuous_treatment(&with_bank()?, d.n, seed, &ContinuousConfig::new(d.gamma_err))?
        }
        Scenario::DagClassical => dag(DagScenario::Classical)?,
        Scenario::DagOutcome => dag(DagScenario::OutcomeInduced)?,
        Scenario::DagConfounder => dag(DagScenario::ConfounderInduced)?,
        Scenario::DagTreatment => dag(DagScenario::TreatmentInduced)?,
        Scenario::ControlsConfounded => simgen::simulate_controls_confounded(d.n, seed, &ControlsConfig::default())?,
    };
    ctx.progress.event("simulated", json!({ "scenario": d.scenario, "n": d.n }));
    Ok(Loaded {
        data: sim.data.clone(),
        sim: Some(sim),
        bank,
    })
}

fn load(ctx: &Ctx) -> Result<Loaded, CliError> {
    let mut loaded = match &ctx.cfg.data.path {
        Some(p) => Loaded {
            data: dataset_io::read_csv(p)?,
            sim: None,
            bank: None,
        },
        None => generate(ctx)?,
    };
    if let Some(j) = ctx.cfg.data.labeled {
        loaded.data = study::label_subset(&loaded.data, j, ctx.stream(LABELS))?;
        if let Some(sim) = &mut loaded.sim {
            sim.data.labeled = loaded.data.labeled.clone();
        }
    }
    if ctx.cfg.data.path.is_some() && ctx.cfg.train.folds > loaded.data.n_labeled() {
        return Err(CliError::Validation(vec![format!(
            "train.folds ({}) exceeds the labeled rows ({}); train.cross_fit needs at least one labeled row per fold",
            ctx.cfg.train.folds,
            loaded.data.n_labeled()
        )]));
    }
    Ok(loaded)
}

/// Method label of a trained predictor.
fn model_label(family: Option<AdversaryFamily>) -> &'static str {
    match family {
        None => "baseline",
        Some(AdversaryFamily::Slr) => "adv_slr",
        Some(AdversaryFamily::CovariancePenalty) => "adv_cov",
        Some(AdversaryFamily::FwlSlr) => "adv_fwl_slr",
        Some(AdversaryFamily::IvSlr) => "adv_iv_slr",
    }
}

/// Cross-fits the configured model; `alpha = None` trains without an adversary
/// for the same total number of iterations.
fn cross_fit(ctx: &Ctx, data: &Dataset, cols: &Columns, alpha: Option<f64>) -> Result<CrossFitResult, CliError> {
    let cfg = ctx.cfg;
    let spec = cfg.model.spec(data.n_features());
    let base = cfg.train.config(ctx.stream(TRAIN));
    let label = model_label(alpha.map(|_| cfg.adversary.family));
    let mut observer = ctx.progress.observer(label);
    let cf = match alpha {
        None => {
            let tc = train::TrainConfig {
                iterations: base.iterations + base.pretrain_iterations,
                pretrain_iterations: 0,
                ..base
            };
            train::cross_fit_observed(&spec, data, &tc, cfg.model.loss, None, &mut observer)?
        }
        Some(a) => {
            let adv = cfg.adversary.spec(a, cols.treatment, &cols.controls, &cols.instruments);
            let tc = cfg.adversary.train_config(base);
            train::cross_fit_observed(&spec, data, &tc, cfg.model.loss, Some(&adv), &mut observer)?
        }
    };
    ctx.progress.event(
        "cross_fit",
        json!({ "run": label, "alpha": alpha, "oof_mse": cf.oof_mse, "accuracy": cf.accuracy }),
    );
    Ok(cf)
}

fn labeled_errors(data: &Dataset, predictions: &DVector<f64>) -> Vec<f64> {
    data.labeled_rows().iter().map(|&i| predictions[i] - data.outcome[i]).collect()
}

fn labeled_regressors(data: &Dataset, cols: &[usize]) -> DMatrix<f64> {
    let rows = data.labeled_rows();
    data.covariates.select_rows(rows.iter()).select_columns(cols.iter())
}

fn bias_test(ctx: &Ctx, data: &Dataset, predictions: &DVector<f64>, cols: &[usize]) -> Result<BiasTestResult, CliError> {
    let nu = labeled_errors(data, predictions);
    Ok(diagnose::bias_test_regressors(
        &nu,
        &labeled_regressors(data, cols),
        &ctx.cfg.bias.options(),
    )?)
}

fn bias_record(bt: &BiasTestResult) -> Result<BiasTestRecord, CliError> {
    Ok(BiasTestRecord {
        gamma_hat: bt.gamma(0)?,
        se: bt.std_error(0)?,
        p: bt.p_value(0)?,
    })
}

/// Predictions regressed on the treatment over every row.
fn downstream(data: &Dataset, predictions: &DVector<f64>, cols: &Columns) -> Result<FitResult, CliError> {
    let all: Vec<usize> = (0..data.n_rows()).collect();
    Ok(study::downstream_fit(data, predictions, &all, cols.treatment)?)
}

/// Decile bins of the treatment on the labeled rows with the mean error in each.
fn error_deciles(data: &Dataset, predictions: &DVector<f64>, treatment: usize) -> Vec<Vec<String>> {
    let nu = labeled_errors(data, predictions);
    let x: Vec<f64> = data.labeled_rows().iter().map(|&i| data.covariates[(i, treatment)]).collect();
    let bins = DECILES.min(x.len()).max(1);
    let x_means = stats::binned_means(&x, &x, bins);
    let nu_means = stats::binned_means(&x, &nu, bins);
    (0..bins)
        .map(|b| {
            let count = (b + 1) * x.len() / bins - b * x.len() / bins;
            vec![(b + 1).to_string(), cell(Some(x_means[b])), cell(Some(nu_means[b])), count.to_string()]
        })
        .collect()
}

const DECILE_HEADER: [&str; 4] = ["decile", "treatment_mean", "nu_mean", "n"];

/// Predictions to diagnose: a supplied column, or a plain cross-fitted model.
fn predictions(ctx: &Ctx, data: &Dataset, cols: &Columns) -> Result<(DVector<f64>, Option<CrossFitResult>), CliError> {
    match &data.proxy {
        Some(p) => Ok((p.clone(), None)),
        None => {
            let cf = cross_fit(ctx, data, cols, None)?;
            Ok((cf.predictions.clone(), Some(cf)))
        }
    }
}

fn naive_record(
    ctx: &Ctx,
    data: &Dataset,
    predictions: &DVector<f64>,
    cf: Option<&CrossFitResult>,
    cols: &Columns,
) -> Result<Record, CliError> {
    let fit = downstream(data, predictions, cols)?;
    let bt = bias_test(ctx, data, predictions, &cols.bias_regressors())?;
    let method = if cf.is_some() { "baseline" } else { "supplied" };
    let mut rec = Record::new(method, data.n_labeled(), fit.coefficient(1)?, fit.std_error(1)?, fit.se_kind, ctx.seed);
    rec.bias_test = Some(bias_record(&bt)?);
    rec.oof_mse = cf.map(|c| c.oof_mse);
    rec.accuracy = cf.map(|c| c.accuracy);
    Ok(rec)
}

fn simulate(ctx: &Ctx, out: &mut OutputDir, report: &mut ExperimentReport) -> Result<(), CliError> {
    let loaded = load(ctx)?;
    let sim = loaded.sim.expect("generated");
    let csv = dataset_io::write_csv(&loaded.data, loaded.data.proxy.as_ref())?;
    out.write("dataset.csv", &csv)?;
    let side = dataset_io::sidecar(&sim, loaded.bank, report::sha256_hex(&csv));
    let mut bytes = serde_json::to_vec_pretty(&side)?;
    bytes.push(b'\n');
    out.write("dataset.json", &bytes)?;
    let cols = Columns::resolve(ctx.cfg, &loaded.data)?;
    let rows = loaded.data.labeled_rows();
    let fit = study::downstream_fit(&loaded.data, &loaded.data.outcome, &rows, cols.treatment)?;
    report.records.push(Record::new(
        Method::GroundTruth.name(),
        rows.len(),
        fit.coefficient(1)?,
        fit.std_error(1)?,
        fit.se_kind,
        ctx.seed,
    ));
    if let Some(p) = &loaded.data.proxy {
        report.records.push(naive_record(ctx, &loaded.data, p, None, &cols)?);
    }
    set_sizes(report, &loaded.data);
    Ok(())
}

fn set_sizes(report: &mut ExperimentReport, data: &Dataset) {
    report.n_rows = data.n_rows();
    report.n_labeled = data.n_labeled();
}

fn train_cmd(ctx: &Ctx, out: &mut OutputDir, report: &mut ExperimentReport) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let loaded = load(ctx)?;
    let data = &loaded.data;
    set_sizes(report, data);
    let cols = Columns::resolve(cfg, data)?;
    let grid = &cfg.adversary.alpha_grid;
    let alpha = if !grid.is_empty() {
        let spec = cfg.model.spec(data.n_features());
        let tc = cfg.adversary.train_config(cfg.train.config(ctx.stream(TRAIN)));
        let template = cfg.adversary.spec(0.0, cols.treatment, &cols.controls, &cols.instruments);
        let rows = parallel_map(grid.len(), cfg.jobs, |k| {
            let row = train::alpha_row(&spec, data, &tc, cfg.model.loss, &template, grid[k]);
            if let Ok(r) = &row {
                ctx.progress.event("alpha", json!({ "alpha": r.alpha, "gamma_hat": r.gamma_hat, "p": r.p_value }));
            }
            row
        })?;
        let tuning = train::select_alpha(rows)?;
        let table: Vec<Vec<String>> = tuning
            .rows
            .iter()
            .map(|r| {
                [r.alpha, r.oof_mse, r.accuracy, r.gamma_hat, r.gamma_se, r.p_value]
                    .iter()
                    .map(|v| cell(Some(*v)))
                    .chain([u8::from(r.alpha == tuning.alpha_star).to_string()])
                    .collect()
            })
            .collect();
        out.write_csv(
            "alpha_grid.csv",
            &["alpha", "oof_mse", "accuracy", "gamma_hat", "gamma_se", "p", "selected"],
            &table,
        )?;
        let star = tuning.alpha_star;
        report.alpha_grid = Some(AlphaSection {
            alpha_star: star,
            rows: tuning.rows,
        });
        Some(star)
    } else if cfg.adversary.alpha > 0.0 {
        Some(cfg.adversary.alpha)
    } else {
        None
    };

    let t0 = Instant::now();
    let cf = cross_fit(ctx, data, &cols, alpha)?;
    let fit = downstream(data, &cf.predictions, &cols)?;
    let regs = match alpha {
        Some(a) => train::bias_regressor_cols(&cfg.adversary.spec(a, cols.treatment, &cols.controls, &cols.instruments)),
        None => cols.bias_regressors(),
    };
    let bt = bias_test(ctx, data, &cf.predictions, &regs)?;
    let label = model_label(alpha.map(|_| cfg.adversary.family));
    let mut rec = Record::new(label, data.n_labeled(), fit.coefficient(1)?, fit.std_error(1)?, fit.se_kind, ctx.seed);
    rec.bias_test = Some(bias_record(&bt)?);
    rec.oof_mse = Some(cf.oof_mse);
    rec.accuracy = Some(cf.accuracy);
    rec.alpha = alpha;
    rec.runtime_s = t0.elapsed().as_secs_f64();
    report.records.push(rec);

    let preds: Vec<Vec<String>> = (0..data.n_rows())
        .map(|i| {
            vec![
                i.to_string(),
                cell(Some(cf.predictions[i])),
                cf.fold_assignment[i].map_or_else(String::new, |f| f.to_string()),
                u8::from(data.labeled[i]).to_string(),
            ]
        })
        .collect();
    out.write_csv("predictions.csv", &["id", "yhat", "fold", "labeled_flag"], &preds)?;
    out.write_csv("error_deciles.csv", &DECILE_HEADER, &error_deciles(data, &cf.predictions, cols.treatment))?;
    Ok(())
}

fn biastest_cmd(ctx: &Ctx, out: &mut OutputDir, report: &mut ExperimentReport) -> Result<(), CliError> {
    let loaded = load(ctx)?;
    let data = &loaded.data;
    set_sizes(report, data);
    let cols = Columns::resolve(ctx.cfg, data)?;
    let t0 = Instant::now();
    let (preds, cf) = predictions(ctx, data, &cols)?;
    let mut rec = naive_record(ctx, data, &preds, cf.as_ref(), &cols)?;
    rec.runtime_s = t0.elapsed().as_secs_f64();
    report.records.push(rec);
    let bt = bias_test(ctx, data, &preds, &cols.bias_regressors())?;
    let names = bias_regressor_names(data, &cols, &bt);
    let table: Vec<Vec<String>> = (0..bt.gamma_hat.len())
        .map(|k| {
            vec![
                names[k].clone(),
                cell(Some(bt.gamma_hat[k])),
                cell(Some(bt.se[k])),
                cell(Some(bt.t_stats[k])),
                cell(Some(bt.p_values[k])),
            ]
        })
        .collect();
    out.write_csv("bias_test.csv", &["term", "gamma_hat", "se", "t", "p"], &table)?;
    out.write_csv("error_deciles.csv", &DECILE_HEADER, &error_deciles(data, &preds, cols.treatment))?;
    Ok(())
}

fn bias_regressor_names(data: &Dataset, cols: &Columns, bt: &BiasTestResult) -> Vec<String> {
    let mut names = Vec::new();
    if bt.has_intercept {
        names.push("intercept".to_string());
    }
    names.extend(cols.bias_regressors().iter().map(|&c| data.covariate_names[c].clone()));
    names
}

fn power_cmd(ctx: &Ctx, out: &mut OutputDir, report: &mut ExperimentReport) -> Result<(), CliError> {
    let p = &ctx.cfg.power;
    let sizes = parse_sizes(&p.sizes).map_err(|e| CliError::Validation(vec![format!("power.sizes: {e}")]))?;
    let loaded = load(ctx)?;
    let data = &loaded.data;
    set_sizes(report, data);
    let cols = Columns::resolve(ctx.cfg, data)?;
    let t0 = Instant::now();
    let (preds, cf) = predictions(ctx, data, &cols)?;
    let mut rec = naive_record(ctx, data, &preds, cf.as_ref(), &cols)?;
    let nu = labeled_errors(data, &preds);
    let opts = PowerOptions {
        power: p.power,
        alpha_level: p.alpha,
        bias: ctx.cfg.bias.options(),
        regressor: 0,
    };
    let regs = labeled_regressors(data, &cols.bias_regressors());
    let curve = diagnose::power_curve(&nu, &regs, &sizes, p.draws, ctx.stream(RESAMPLE), &opts)?;
    rec.runtime_s = t0.elapsed().as_secs_f64();
    report.records.push(rec);
    let table: Vec<Vec<String>> = (0..sizes.len())
        .map(|i| {
            let sd = if p.draws > 1 { Some(stats::std_dev(&curve.mdb_draws[i])) } else { None };
            vec![sizes[i].to_string(), cell(Some(curve.mdb[i])), cell(sd), cell(Some(curve.true_mdb[i]))]
        })
        .collect();
    out.write_csv("mdb_curve.csv", &["J", "mdb", "mdb_sd", "true_mdb"], &table)?;
    let detectable_at = p
        .target_bias
        .and_then(|b| sizes.iter().zip(&curve.mdb).find(|(_, &m)| m <= b).map(|(&j, _)| j));
    report.power = Some(PowerSection {
        power: p.power,
        alpha: p.alpha,
        draws: p.draws,
        sizes,
        mdb: curve.mdb,
        true_mdb: curve.true_mdb,
        target_bias: p.target_bias,
        detectable_at,
    });
    Ok(())
}

/// Naive and corrected coefficients from fixed predictions carried as the proxy.
fn corrected_from_proxy(sample: &Dataset, ctx: &Ctx, cols: &Columns) -> debias_core::Result<(f64, f64)> {
    let preds = sample.proxy.as_ref().expect("predictions attached");
    let all: Vec<usize> = (0..sample.n_rows()).collect();
    let fit = study::downstream_fit(sample, preds, &all, cols.treatment)?;
    let nu = labeled_errors(sample, preds);
    let bt = diagnose::bias_test_regressors(&nu, &labeled_regressors(sample, &[cols.treatment]), &ctx.cfg.bias.options())?;
    let c = diagnose::bias_correct(&fit, &bt, 1)?;
    Ok((c.beta_naive, c.beta_corrected))
}

fn correct_cmd(ctx: &Ctx, out: &mut OutputDir, report: &mut ExperimentReport) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let loaded = load(ctx)?;
    let data = &loaded.data;
    set_sizes(report, data);
    let cols = Columns::resolve(cfg, data)?;
    let t0 = Instant::now();
    let (preds, cf) = predictions(ctx, data, &cols)?;
    let fit = downstream(data, &preds, &cols)?;
    let bt = bias_test(ctx, data, &preds, &[cols.treatment])?;
    let mut corrected = diagnose::bias_correct(&fit, &bt, 1)?;
    let mut naive = naive_record(ctx, data, &preds, cf.as_ref(), &cols)?;
    naive.bias_test = Some(bias_record(&bt)?);

    let b = cfg.correct.bootstrap;
    if b >= 2 {
        let seed = ctx.stream(RESAMPLE);
        let runner = Threaded {
            jobs: cfg.jobs,
            progress: ctx.progress,
        };
        let draws = match cf {
            None => {
                let fixed = data.clone().with_proxy(preds.clone())?;
                let pipeline = |s: &Dataset, _: u64| corrected_from_proxy(s, ctx, &cols).map(|(a, c)| vec![a, c]);
                debias_core::study::ReplicateRunner::run(&runner, b, &|i| {
                    train::bootstrap_replicate(&fixed, seed, i, &pipeline)
                })?
            }
            Some(_) => {
                let pcfg = pipeline_config(ctx, &cols, data)?;
                let methods = [Method::Baseline, Method::BiasCorrect];
                let pipeline = |s: &Dataset, rs: u64| study::pipeline_coefficients(s, &pcfg, &methods, rs);
                debias_core::study::ReplicateRunner::run(&runner, b, &|i| {
                    train::bootstrap_replicate(data, seed, i, &pipeline)
                })?
            }
        };
        let naive_draws: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let corrected_draws: Vec<f64> = draws.iter().map(|d| d[1]).collect();
        corrected = CorrectedEstimate::from_bootstrap(corrected.beta_naive, corrected.gamma_hat, &corrected_draws);
        let mut rows = Vec::new();
        for (name, d) in [("baseline", &naive_draws), ("correct", &corrected_draws)] {
            rows.extend(d.iter().enumerate().map(|(r, v)| {
                vec![data.n_labeled().to_string(), name.to_string(), r.to_string(), cell(Some(*v))]
            }));
        }
        out.write_csv("coefficient_distributions.csv", &["J", "method", "replicate", "beta_hat"], &rows)?;
    }
    let se_kind = if b >= 2 { SeKind::Bootstrap } else { fit.se_kind };
    let mut rec = Record::new(
        Method::BiasCorrect.name(),
        data.n_labeled(),
        corrected.beta_corrected,
        corrected.se_corrected,
        se_kind,
        ctx.seed,
    );
    rec.bias_test = naive.bias_test;
    rec.oof_mse = naive.oof_mse;
    rec.accuracy = naive.accuracy;
    let elapsed = t0.elapsed().as_secs_f64();
    naive.runtime_s = elapsed;
    rec.runtime_s = elapsed;
    report.records.push(naive);
    report.records.push(rec);
    Ok(())
}

fn pipeline_config(ctx: &Ctx, cols: &Columns, data: &Dataset) -> Result<PipelineConfig, CliError> {
    let cfg = ctx.cfg;
    if !cols.controls.is_empty() || !cols.instruments.is_empty() {
        return Err(CliError::Validation(vec![
            "study pipelines regress on the treatment alone; drop data.controls and data.instruments".to_string(),
        ]));
    }
    Ok(PipelineConfig {
        model: cfg.model.spec(data.n_features()),
        loss: cfg.model.loss,
        train: cfg.train.config(ctx.stream(TRAIN)),
        treatment_index: cols.treatment,
        slr_alpha: cfg.study.slr_alpha,
        cov_alpha: cfg.study.cov_alpha,
        cov_lr: cfg.adversary.cov_lr,
    })
}

fn study_cmd(ctx: &Ctx, out: &mut OutputDir, report: &mut ExperimentReport) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let methods = cfg.study.methods().map_err(|e| CliError::Validation(vec![e]))?;
    let loaded = load(ctx)?;
    let data = &loaded.data;
    set_sizes(report, data);
    let cols = Columns::resolve(cfg, data)?;
    let pcfg = pipeline_config(ctx, &cols, data)?;
    let runner = Threaded {
        jobs: cfg.jobs,
        progress: ctx.progress,
    };
    let seed = ctx.stream(RESAMPLE);
    let t0 = Instant::now();
    let cells: Vec<StudyCell> = if cfg.study.sizes.is_empty() {
        let bs: BootstrapStudy = study::bootstrap_study(data, &pcfg, &methods, cfg.study.bootstrap, seed, &runner)?;
        bs.estimates
            .into_iter()
            .zip(bs.distributions)
            .map(|(estimate, bootstrap)| StudyCell {
                n_labeled: data.n_labeled(),
                estimate,
                bootstrap,
            })
            .collect()
    } else {
        study::progressive_label_study(data, &pcfg, &cfg.study.sizes, &methods, cfg.study.bootstrap, seed, &runner)?.cells
    };
    let elapsed = t0.elapsed().as_secs_f64();

    let mut summary = Vec::new();
    let mut draws = Vec::new();
    for c in &cells {
        let e = &c.estimate;
        let d = &c.bootstrap;
        let mut rec = Record::new(e.method.name(), c.n_labeled, e.beta_hat, d.sd, SeKind::Bootstrap, ctx.seed);
        if let (Some(g), Some(se), Some(p)) = (e.gamma_hat, e.gamma_se, e.gamma_p) {
            rec.bias_test = Some(BiasTestRecord { gamma_hat: g, se, p });
        }
        rec.oof_mse = e.oof_mse;
        rec.accuracy = e.accuracy;
        rec.alpha = match e.method {
            Method::AdversarialSlr => Some(pcfg.slr_alpha),
            Method::AdversarialCov => Some(pcfg.cov_alpha),
            _ => None,
        };
        rec.runtime_s = elapsed;
        report.records.push(rec);
        summary.push(vec![
            c.n_labeled.to_string(),
            e.method.name().to_string(),
            cell(Some(e.beta_hat)),
            cell(Some(e.naive_se)),
            cell(Some(d.mean)),
            cell(Some(d.sd)),
            cell(Some(d.ci_lower)),
            cell(Some(d.ci_upper)),
            u8::from(d.covers(0.0)).to_string(),
            cell(e.gamma_hat),
            cell(e.gamma_se),
            cell(e.gamma_p),
            cell(e.oof_mse),
            cell(e.accuracy),
        ]);
        draws.extend(d.coefficient_draws.iter().enumerate().map(|(r, v)| {
            vec![c.n_labeled.to_string(), e.method.name().to_string(), r.to_string(), cell(Some(*v))]
        }));
    }
    out.write_csv(
        "study.csv",
        &[
            "J", "method", "beta_hat", "naive_se", "boot_mean", "boot_sd", "ci_lower", "ci_upper", "covers_zero",
            "gamma_hat", "gamma_se", "gamma_p", "oof_mse", "accuracy",
        ],
        &summary,
    )?;
    out.write_csv("coefficient_distributions.csv", &["J", "method", "replicate", "beta_hat"], &draws)?;
    Ok(())
}

/// Validates `cfg`, runs its command and writes every output into `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<Manifest, CliError> {
    let diagnostics = cfg.validate();
    if !diagnostics.is_empty() {
        return Err(CliError::Validation(diagnostics));
    }
    let command = cfg.command.expect("validated");
    let seed = cfg.seed.expect("validated");
    let ctx = Ctx {
        cfg,
        seed,
        progress: Progress { enabled: cfg.verbose },
        started: Instant::now(),
    };
    let dir = cfg.out.clone().unwrap_or_else(|| format!("debias-out/{}", command.name()).into());
    let mut out = OutputDir::create(&dir)?;
    let mut report = ExperimentReport::new(command.name(), seed, 0, 0);
    match command {
        Command::Simulate => simulate(&ctx, &mut out, &mut report)?,
        Command::Train => train_cmd(&ctx, &mut out, &mut report)?,
        Command::Biastest => biastest_cmd(&ctx, &mut out, &mut report)?,
        Command::Power => power_cmd(&ctx, &mut out, &mut report)?,
        Command::Correct => correct_cmd(&ctx, &mut out, &mut report)?,
        Command::Study => study_cmd(&ctx, &mut out, &mut report)?,
    }
    let bad = report.non_finite();
    if !bad.is_empty() {
        return Err(CliError::Numerical(bad.join(", ")));
    }
    report.runtime_s = ctx.started.elapsed().as_secs_f64();
    let config_sha = report::sha256_hex(&serde_json::to_vec(&cfg.hashed_view())?);
    let mut config_bytes = serde_json::to_vec_pretty(cfg)?;
    config_bytes.push(b'\n');
    out.write("config.json", &config_bytes)?;
    let manifest = out.finish(&report, config_sha)?;
    ctx.progress.event("done", json!({ "out": dir.display().to_string() }));
    Ok(manifest)
}
