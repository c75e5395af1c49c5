//! Synthetic data-generating processes.
//!
//! A calibrated pixel bank plays the role of labeled satellite imagery: each
//! row has a percent-forest value and 24 noisy spectral summaries of it (eight
//! series, three percentiles each). Scenario generators draw from the bank or
//! generate errors directly from a small causal graph.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal, Poisson, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const SERIES: usize = 8;
pub const PERCENTILES: usize = 3;
pub const N_FEATURES: usize = SERIES * PERCENTILES;
/// Series whose transform is increasing in percent forest.
pub const GREEN_SERIES: usize = 5;

const BANK_PERCENTF: u64 = 1;
const BANK_NOISE: u64 = 2;
const GREENING: u64 = 3;
const CONTINUOUS: u64 = 4;
const DAG: u64 = 5;
const CONTROLS: u64 = 6;

/// Feature columns built from increasing transforms.
pub fn greenness_columns() -> Vec<usize> {
    (0..GREEN_SERIES * PERCENTILES).collect()
}

fn transform(series: usize, p: f64) -> f64 {
    match series {
        0 => p,
        1 => libm::sqrt(p),
        2 => p * p,
        3 => 1.0 - libm::exp(-3.0 * p),
        4 => 1.0 / (1.0 + libm::exp(-8.0 * (p - 0.5))),
        5 => -p,
        6 => -libm::sqrt(p),
        _ => libm::log(0.05 + p),
    }
}

fn transform_range(series: usize) -> f64 {
    libm::fabs(transform(series, 1.0) - transform(series, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PixelBankConfig {
    pub n: usize,
    pub seed: u64,
    pub accuracy_target: f64,
    /// Percent forest ~ Beta(a, b).
    pub beta_a: f64,
    pub beta_b: f64,
    /// Skip calibration and use this noise scale.
    pub noise_override: Option<f64>,
}

impl PixelBankConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        PixelBankConfig {
            n,
            seed,
            accuracy_target: 0.75,
            beta_a: 1.0,
            beta_b: 1.0,
            noise_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelBank {
    pub features: DMatrix<f64>,
    pub percent_forest: Vec<f64>,
    pub forest_label: Vec<bool>,
    pub noise_scale: f64,
    /// Held-out accuracy of the pilot logistic fit at `noise_scale`.
    pub pilot_accuracy: f64,
    pub config: PixelBankConfig,
}

impl PixelBank {
    pub fn len(&self) -> usize {
        self.percent_forest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.percent_forest.is_empty()
    }

    /// The bank as a classification dataset (outcome = forest label, all labeled).
    pub fn label_dataset(&self) -> Result<Dataset> {
        let n = self.len();
        let y = DVector::from_iterator(n, self.forest_label.iter().map(|&l| f64::from(u8::from(l))));
        let pf = DMatrix::from_column_slice(n, 1, &self.percent_forest);
        Dataset::new(
            self.features.clone(),
            pf,
            vec!["percent_forest".to_string()],
            y,
            vec![true; n],
        )
    }
}

struct NoiseDraws {
    common: Vec<f64>,
    series: DMatrix<f64>,
    cell: DMatrix<f64>,
}

const COMMON_WEIGHT: f64 = 0.4;
const SERIES_WEIGHT: f64 = 0.9;
const CELL_WEIGHT: f64 = 0.2;
const PERCENTILE_SPREAD: f64 = 0.1;

fn assemble(pf: &[f64], noise: &NoiseDraws, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(pf.len(), N_FEATURES, |i, j| {
        let (s, q) = (j / PERCENTILES, j % PERCENTILES);
        let range = transform_range(s);
        let offset = (q as f64 - 1.0) * PERCENTILE_SPREAD * range;
        // the shared component moves every series the way a forest change would
        let along = if s < GREEN_SERIES { 1.0 } else { -1.0 };
        let e = along * COMMON_WEIGHT * noise.common[i]
            + SERIES_WEIGHT * noise.series[(i, s)]
            + CELL_WEIGHT * noise.cell[(i, j)];
        transform(s, pf[i]) + offset + scale * range * e
    })
}

/// Ridge-stabilized Newton fit of a logistic regression; returns held-out accuracy.
fn pilot_accuracy(features: &DMatrix<f64>, labels: &[bool]) -> f64 {
    let n = features.nrows();
    let train: Vec<usize> = (0..n).step_by(2).collect();
    let test: Vec<usize> = (1..n).step_by(2).collect();
    let mean: Vec<f64> = (0..N_FEATURES)
        .map(|j| train.iter().map(|&i| features[(i, j)]).sum::<f64>() / train.len() as f64)
        .collect();
    let sd: Vec<f64> = (0..N_FEATURES)
        .map(|j| {
            let v = train
                .iter()
                .map(|&i| (features[(i, j)] - mean[j]).powi(2))
                .sum::<f64>()
                / train.len() as f64;
            let s = libm::sqrt(v);
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let design = |rows: &[usize]| {
        DMatrix::from_fn(rows.len(), N_FEATURES + 1, |r, j| {
            if j == 0 {
                1.0
            } else {
                (features[(rows[r], j - 1)] - mean[j - 1]) / sd[j - 1]
            }
        })
    };
    let x = design(&train);
    let y = DVector::from_iterator(train.len(), train.iter().map(|&i| f64::from(u8::from(labels[i]))));
    let ridge = 1e-3 * train.len() as f64;
    let mut beta = DVector::zeros(N_FEATURES + 1);
    for _ in 0..30 {
        let eta = &x * &beta;
        let p = eta.map(|e| 1.0 / (1.0 + libm::exp(-e)));
        let w = p.map(|v| v * (1.0 - v));
        let mut xw = x.clone();
        for (r, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[r];
        }
        let mut h = x.tr_mul(&xw);
        for k in 0..=N_FEATURES {
            h[(k, k)] += ridge;
        }
        let g = x.tr_mul(&(&y - &p)) - &beta * ridge;
        let Some(chol) = h.cholesky() else { break };
        let step = chol.solve(&g);
        beta += &step;
        if step.amax() < 1e-8 {
            break;
        }
    }
    let xt = design(&test);
    let eta = &xt * &beta;
    let hits = test
        .iter()
        .enumerate()
        .filter(|(r, &i)| (eta[*r] >= 0.0) == labels[i])
        .count();
    hits as f64 / test.len() as f64
}

/// Synthetic pixel bank whose noise scale is tuned so a logistic model on the
/// forest label reaches `accuracy_target` on held-out rows.
pub fn make_pixel_bank(cfg: &PixelBankConfig) -> Result<PixelBank> {
    if cfg.n < 100 {
        return Err(Error::InsufficientLabels {
            requested: 100,
            available: cfg.n,
        });
    }
    if !(cfg.accuracy_target > 0.5 && cfg.accuracy_target < 1.0) {
        return Err(Error::DomainError("accuracy target must lie in (0.5, 1)"));
    }
    let beta = Beta::new(cfg.beta_a, cfg.beta_b).map_err(|_| Error::DomainError("invalid Beta shape"))?;
    let mut r = rng::rng_for(cfg.seed, &[BANK_PERCENTF]);
    let pf: Vec<f64> = (0..cfg.n).map(|_| beta.sample(&mut r)).collect();
    let labels: Vec<bool> = pf.iter().map(|&p| p >= 0.5).collect();
    let mut r = rng::rng_for(cfg.seed, &[BANK_NOISE]);
    let mut normal = || -> f64 { StandardNormal.sample(&mut r) };
    let noise = NoiseDraws {
        common: (0..cfg.n).map(|_| normal()).collect(),
        series: DMatrix::from_fn(cfg.n, SERIES, |_, _| normal()),
        cell: DMatrix::from_fn(cfg.n, N_FEATURES, |_, _| normal()),
    };

    let (scale, accuracy) = match cfg.noise_override {
        Some(s) => {
            let f = assemble(&pf, &noise, s);
            (s, pilot_accuracy(&f, &labels))
        }
        None => {
            let acc_at = |s: f64| pilot_accuracy(&assemble(&pf, &noise, s), &labels);
            let (mut lo, mut hi) = (libm::log(1e-3), libm::log(1e2));
            let (a_lo, a_hi) = (acc_at(libm::exp(lo)), acc_at(libm::exp(hi)));
            if a_lo < cfg.accuracy_target || a_hi > cfg.accuracy_target {
                return Err(Error::CalibrationFailed {
                    achieved: if a_lo < cfg.accuracy_target { a_lo } else { a_hi },
                    target: cfg.accuracy_target,
                });
            }
            let mut best = (libm::exp(lo), a_lo);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                let a = acc_at(libm::exp(mid));
                if libm::fabs(a - cfg.accuracy_target) < libm::fabs(best.1 - cfg.accuracy_target) {
                    best = (libm::exp(mid), a);
                }
                if libm::fabs(a - cfg.accuracy_target) < 0.002 {
                    break;
                }
                if a > cfg.accuracy_target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if libm::fabs(best.1 - cfg.accuracy_target) > 0.03 {
                return Err(Error::CalibrationFailed {
                    achieved: best.1,
                    target: cfg.accuracy_target,
                });
            }
            best
        }
    };
    Ok(PixelBank {
        features: assemble(&pf, &noise, scale),
        percent_forest: pf,
        forest_label: labels,
        noise_scale: scale,
        pilot_accuracy: accuracy,
        config: *cfg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scenario {
    Sim1Greening,
    ContinuousDistance,
    DagClassical,
    DagOutcome,
    DagConfounder,
    DagTreatment,
    ControlsConfounded,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Sim1Greening => "sim1_greening",
            Scenario::ContinuousDistance => "continuous_distance",
            Scenario::DagClassical => "dag_classical",
            Scenario::DagOutcome => "dag_outcome",
            Scenario::DagConfounder => "dag_confounder",
            Scenario::DagTreatment => "dag_treatment",
            Scenario::ControlsConfounded => "controls_confounded",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            Scenario::Sim1Greening,
            Scenario::ContinuousDistance,
            Scenario::DagClassical,
            Scenario::DagOutcome,
            Scenario::DagConfounder,
            Scenario::DagTreatment,
            Scenario::ControlsConfounded,
        ]
        .into_iter()
        .find(|s| s.name() == name)
    }
}

/// A generated dataset together with what generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub data: Dataset,
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
    /// Generator parameters by name, enough to regenerate the data.
    pub params: Vec<(String, f64)>,
    /// Confounder `W` (zeros where the scenario has none).
    pub w: Vec<f64>,
    pub true_beta: f64,
    /// Sign of the measurement-error bias implied by construction.
    pub implied_bias_sign: i8,
    /// Greening rows that had no strictly greener partner.
    pub no_greener: usize,
}

impl SimulatedDataset {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

fn poisson(lambda: f64) -> Result<Poisson<f64>> {
    Poisson::new(lambda).map_err(|_| Error::DomainError("Poisson rate must be positive"))
}

/// Treatment probability given the confounder in the greening design.
pub fn greening_treatment_prob(w: f64) -> f64 {
    (1.0 - w / 4.0).max(0.0)
}

fn poisson_pmf(lambda: f64, k: u32) -> f64 {
    let mut p = libm::exp(-lambda);
    for i in 1..=k {
        p *= lambda / i as f64;
    }
    p
}

/// `(P(X = 1), Cov(W, X))` under `W ~ Poisson(1)` and the greening treatment rule.
pub fn greening_moments() -> (f64, f64) {
    let (mut px, mut ewx) = (0.0, 0.0);
    for w in 0..4u32 {
        let m = poisson_pmf(1.0, w) * greening_treatment_prob(w as f64);
        px += m;
        ewx += w as f64 * m;
    }
    (px, ewx - px)
}

/// Population slope of `W` on `X` in the greening design.
pub fn greening_w_on_x_slope() -> f64 {
    let (px, cov) = greening_moments();
    cov / (px * (1.0 - px))
}

fn draw_confounded_treatment(n: usize, r: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let pois = poisson(1.0)?;
    let mut w = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        let wi: f64 = pois.sample(r);
        let xi = r.random_bool(greening_treatment_prob(wi));
        w.push(wi);
        x.push(f64::from(u8::from(xi)));
    }
    Ok((w, x))
}

fn covariate_table(x: &[f64], w: &[f64]) -> (DMatrix<f64>, Vec<String>) {
    let n = x.len();
    (
        DMatrix::from_fn(n, 2, |i, j| if j == 0 { x[i] } else { w[i] }),
        vec!["x".to_string(), "w".to_string()],
    )
}

/// The four-step greening simulation: confounder, treatment, label
/// assignment, and greener features wherever the confounder is positive.
/// The true treatment effect is zero.
pub fn simulate_greening(bank: &PixelBank, n: usize, seed: u64) -> Result<SimulatedDataset> {
    if bank.len() < n {
        return Err(Error::InsufficientLabels {
            requested: n,
            available: bank.len(),
        });
    }
    let mut r = rng::rng_for(seed, &[GREENING]);
    let (w, x) = draw_confounded_treatment(n, &mut r)?;
    let rows = rng::sample_without_replacement(bank.len(), n, &mut r);

    let mut by_pf: Vec<usize> = (0..bank.len()).collect();
    by_pf.sort_by(|&a, &b| bank.percent_forest[a].total_cmp(&bank.percent_forest[b]));
    let sorted_pf: Vec<f64> = by_pf.iter().map(|&i| bank.percent_forest[i]).collect();

    let mut source = rows.clone();
    let mut no_greener = 0;
    for (i, &row) in rows.iter().enumerate() {
        if w[i] > 0.0 {
            let own = bank.percent_forest[row];
            let first = sorted_pf.partition_point(|&p| p <= own);
            if first == sorted_pf.len() {
                no_greener += 1;
            } else {
                source[i] = by_pf[r.random_range(first..sorted_pf.len())];
            }
        }
    }
    let features = bank.features.select_rows(source.iter());
    let y = DVector::from_iterator(n, rows.iter().map(|&i| bank.percent_forest[i]));
    let (cov, names) = covariate_table(&x, &w);
    let data = Dataset::new(features, cov, names, y, vec![true; n])?;
    Ok(SimulatedDataset {
        data,
        scenario: Scenario::Sim1Greening,
        n,
        seed,
        params: vec![
            ("bank_n".to_string(), bank.len() as f64),
            ("bank_seed".to_string(), bank.config.seed as f64),
            ("noise_scale".to_string(), bank.noise_scale),
        ],
        w,
        true_beta: 0.0,
        implied_bias_sign: -1,
        no_greener,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ContinuousConfig {
    /// Differential error injected per unit of treatment.
    pub gamma_err: f64,
    /// Logit slope of the forest label on log distance.
    pub slope: f64,
    pub logit_intercept: f64,
    /// Log distance ~ Normal(mean, sd).
    pub x_mean: f64,
    pub x_sd: f64,
    /// Feature shift per unit of `gamma_err · (x - x̄)`, in noise-scale units.
    pub corruption_gain: f64,
    /// Noise sd of the supplied proxy prediction.
    pub proxy_noise: f64,
}

impl ContinuousConfig {
    pub fn new(gamma_err: f64) -> Self {
        ContinuousConfig {
            gamma_err,
            slope: 0.5,
            logit_intercept: 0.0,
            x_mean: 1.0,
            x_sd: 0.6,
            corruption_gain: 25.0,
            proxy_noise: 0.3,
        }
    }
}

/// Fixed unit direction of the injected corruption: half along the
/// greenness signal, the rest along a within-series contrast.
pub fn corruption_direction() -> Vec<f64> {
    let mut signal = vec![0.0; N_FEATURES];
    let mut contrast = vec![0.0; N_FEATURES];
    for s in 0..SERIES {
        let sign = if s < GREEN_SERIES { 1.0 } else { -1.0 };
        for q in 0..PERCENTILES {
            signal[s * PERCENTILES + q] = sign * transform_range(s);
        }
        contrast[s * PERCENTILES] = transform_range(s);
        contrast[s * PERCENTILES + 2] = -transform_range(s);
    }
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
    let (ns, nc) = (norm(&signal), norm(&contrast));
    let d: Vec<f64> = signal
        .iter()
        .zip(&contrast)
        .map(|(s, c)| 0.5 * s / ns + 0.75_f64.sqrt() * c / nc)
        .collect();
    let nd = norm(&d);
    d.into_iter().map(|v| v / nd).collect()
}

/// Continuous treatment (log distance) with a binary forest outcome.
///
/// Features come from bank rows of the drawn class. Forest rows are shifted
/// along [`corruption_direction`] in proportion to `gamma_err · (x - x̄)`, so
/// with `gamma_err > 0` forest gets easier to detect as `x` grows. A trained
/// model's errors then gain a positive slope in `x` on top of the negative
/// slope that shrinkage alone produces. The
/// dataset's proxy is `Y + gamma_err (x - x̄) + noise`.
pub fn simulate_continuous_treatment(
    bank: &PixelBank,
    n: usize,
    seed: u64,
    cfg: &ContinuousConfig,
) -> Result<SimulatedDataset> {
    if bank.len() < n {
        return Err(Error::InsufficientLabels {
            requested: n,
            available: bank.len(),
        });
    }
    let normal = Normal::new(cfg.x_mean, cfg.x_sd).map_err(|_| Error::DomainError("x_sd must be positive"))?;
    let mut r = rng::rng_for(seed, &[CONTINUOUS]);
    let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut r)).collect();
    let y: Vec<bool> = x
        .iter()
        .map(|&xi| {
            let eta = cfg.logit_intercept + cfg.slope * (xi - cfg.x_mean);
            r.random_bool(1.0 / (1.0 + libm::exp(-eta)))
        })
        .collect();
    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for i in 0..bank.len() {
        pools[usize::from(bank.forest_label[i])].push(i);
    }
    if pools.iter().any(|p| p.is_empty()) {
        return Err(Error::DomainError("bank lacks one of the two classes"));
    }
    for p in &mut pools {
        rng::shuffle(p, &mut r);
    }
    let mut next = [0usize; 2];
    let rows: Vec<usize> = y
        .iter()
        .map(|&yi| {
            let c = usize::from(yi);
            let row = pools[c][next[c] % pools[c].len()];
            next[c] += 1;
            row
        })
        .collect();
    let x_bar = x.iter().sum::<f64>() / n as f64;
    let d = corruption_direction();
    let shift = cfg.gamma_err * cfg.corruption_gain * bank.noise_scale;
    let features = DMatrix::from_fn(n, N_FEATURES, |i, j| {
        let forest = f64::from(u8::from(y[i]));
        bank.features[(rows[i], j)] + forest * shift * (x[i] - x_bar) * d[j]
    });
    let yv = DVector::from_iterator(n, y.iter().map(|&b| f64::from(u8::from(b))));
    let proxy = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut r);
        yv[i] + cfg.gamma_err * (x[i] - x_bar) + cfg.proxy_noise * e
    });
    let cov = DMatrix::from_column_slice(n, 1, &x);
    let data = Dataset::new(features, cov, vec!["x".to_string()], yv, vec![true; n])?.with_proxy(proxy)?;
    Ok(SimulatedDataset {
        data,
        scenario: Scenario::ContinuousDistance,
        n,
        seed,
        params: vec![
            ("gamma_err".to_string(), cfg.gamma_err),
            ("slope".to_string(), cfg.slope),
            ("logit_intercept".to_string(), cfg.logit_intercept),
            ("x_mean".to_string(), cfg.x_mean),
            ("x_sd".to_string(), cfg.x_sd),
            ("corruption_gain".to_string(), cfg.corruption_gain),
            ("proxy_noise".to_string(), cfg.proxy_noise),
        ],
        w: vec![0.0; n],
        true_beta: cfg.slope,
        implied_bias_sign: sign_of(cfg.gamma_err),
        no_greener: 0,
    })
}

fn sign_of(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DagScenario {
    Classical,
    OutcomeInduced,
    ConfounderInduced,
    TreatmentInduced,
}

impl DagScenario {
    pub fn scenario(self) -> Scenario {
        match self {
            DagScenario::Classical => Scenario::DagClassical,
            DagScenario::OutcomeInduced => Scenario::DagOutcome,
            DagScenario::ConfounderInduced => Scenario::DagConfounder,
            DagScenario::TreatmentInduced => Scenario::DagTreatment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DagConfig {
    pub scenario: DagScenario,
    /// Bias `Cov(X, ν) / Var(X)` implied by construction.
    pub strength: f64,
    /// Effect of `X` on `Y`.
    pub beta: f64,
    pub outcome_noise: f64,
    /// sd of the classical component of `ν`.
    pub error_noise: f64,
    /// Baseline Poisson rate of `W` in the treatment-induced graph.
    pub base_rate: f64,
}

pub const DEFAULT_ERROR_NOISE: f64 = 0.19;

impl DagConfig {
    pub fn new(scenario: DagScenario, strength: f64) -> Self {
        DagConfig {
            scenario,
            strength,
            beta: if scenario == DagScenario::OutcomeInduced { 1.0 } else { 0.0 },
            outcome_noise: 1.0,
            error_noise: DEFAULT_ERROR_NOISE,
            base_rate: 1.0,
        }
    }
}

/// Errors generated from one of four causal graphs.
///
/// * classical: `ν` is independent noise;
/// * outcome-induced: `ν` scales with the centered outcome;
/// * confounder-induced: `W → X` by the greening rule and `W → ν`;
/// * treatment-induced: `X → W → ν` with `X ~ Bernoulli(1/2)`, `W ~ Poisson(λ₀ + X)`.
///
/// Coefficients on the mechanism variable are chosen so the population slope
/// of `ν` on `X` equals `strength`. The proxy `Y + ν` is the only feature.
pub fn simulate_dag(n: usize, seed: u64, cfg: &DagConfig) -> Result<SimulatedDataset> {
    if n < 3 {
        return Err(Error::InsufficientLabels {
            requested: 3,
            available: n,
        });
    }
    let mut r = rng::rng_for(seed, &[DAG, cfg.scenario as u64]);
    let (w, x) = match cfg.scenario {
        DagScenario::TreatmentInduced => {
            let mut w = Vec::with_capacity(n);
            let mut x = Vec::with_capacity(n);
            for _ in 0..n {
                let xi = f64::from(u8::from(r.random_bool(0.5)));
                w.push(poisson(cfg.base_rate + xi)?.sample(&mut r));
                x.push(xi);
            }
            (w, x)
        }
        _ => draw_confounded_treatment(n, &mut r)?,
    };
    let y: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let e: f64 = StandardNormal.sample(&mut r);
            cfg.beta * xi + cfg.outcome_noise * e
        })
        .collect();
    let y_bar = y.iter().sum::<f64>() / n as f64;
    let mechanism = |i: usize| -> Result<f64> {
        Ok(match cfg.scenario {
            DagScenario::Classical => 0.0,
            DagScenario::OutcomeInduced => {
                if cfg.beta == 0.0 {
                    return Err(Error::DomainError("outcome-induced bias needs a nonzero treatment effect"));
                }
                cfg.strength / cfg.beta * (y[i] - y_bar)
            }
            DagScenario::ConfounderInduced => cfg.strength / greening_w_on_x_slope() * w[i],
            DagScenario::TreatmentInduced => cfg.strength * w[i],
        })
    };
    let mut nu = Vec::with_capacity(n);
    for i in 0..n {
        let e: f64 = StandardNormal.sample(&mut r);
        nu.push(mechanism(i)? + cfg.error_noise * e);
    }
    let proxy = DVector::from_fn(n, |i, _| y[i] + nu[i]);
    let features = DMatrix::from_column_slice(n, 1, proxy.as_slice());
    let (cov, names) = covariate_table(&x, &w);
    let data = Dataset::new(features, cov, names, DVector::from_vec(y), vec![true; n])?.with_proxy(proxy)?;
    let implied = if cfg.scenario == DagScenario::Classical {
        0
    } else {
        sign_of(cfg.strength)
    };
    Ok(SimulatedDataset {
        data,
        scenario: cfg.scenario.scenario(),
        n,
        seed,
        params: vec![
            ("strength".to_string(), cfg.strength),
            ("beta".to_string(), cfg.beta),
            ("outcome_noise".to_string(), cfg.outcome_noise),
            ("error_noise".to_string(), cfg.error_noise),
            ("base_rate".to_string(), cfg.base_rate),
        ],
        w,
        true_beta: cfg.beta,
        implied_bias_sign: implied,
        no_greener: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControlsConfig {
    pub beta_treatment: f64,
    pub beta_control: f64,
    /// Loading of the treatment on the control.
    pub confounding: f64,
    /// Noise sd of each outcome-tracking feature.
    pub feature_noise: f64,
}

impl Default for ControlsConfig {
    fn default() -> Self {
        ControlsConfig {
            beta_treatment: 1.0,
            beta_control: 1.0,
            confounding: 0.6,
            feature_noise: 1.5,
        }
    }
}

/// Treatment confounded by one control.
///
/// `X₂ ~ N(0, 1)`, `X₁ = c X₂ + N(0, 0.8²)`, `Y = β₁X₁ + β₂X₂ + N(0, 1)`.
/// Features are three noisy copies of `Y` and a noisy copy of `X₂`, so a
/// least-squares predictor shrinks toward the mean and its errors load on
/// the treatment even after partialling out the control.
pub fn simulate_controls_confounded(n: usize, seed: u64, cfg: &ControlsConfig) -> Result<SimulatedDataset> {
    if n < 4 {
        return Err(Error::InsufficientLabels {
            requested: 4,
            available: n,
        });
    }
    let mut r = rng::rng_for(seed, &[CONTROLS]);
    let mut normal = || -> f64 { StandardNormal.sample(&mut r) };
    let mut cov = DMatrix::zeros(n, 2);
    let mut y = DVector::zeros(n);
    let mut features = DMatrix::zeros(n, 4);
    for i in 0..n {
        let x2 = normal();
        let x1 = cfg.confounding * x2 + 0.8 * normal();
        let yi = cfg.beta_treatment * x1 + cfg.beta_control * x2 + normal();
        cov[(i, 0)] = x1;
        cov[(i, 1)] = x2;
        y[i] = yi;
        for j in 0..3 {
            features[(i, j)] = yi + cfg.feature_noise * normal();
        }
        features[(i, 3)] = x2 + 0.5 * normal();
    }
    let data = Dataset::new(features, cov, vec!["x1".to_string(), "x2".to_string()], y, vec![true; n])?;
    Ok(SimulatedDataset {
        data,
        scenario: Scenario::ControlsConfounded,
        n,
        seed,
        params: vec![
            ("beta_treatment".to_string(), cfg.beta_treatment),
            ("beta_control".to_string(), cfg.beta_control),
            ("confounding".to_string(), cfg.confounding),
            ("feature_noise".to_string(), cfg.feature_noise),
        ],
        w: vec![0.0; n],
        true_beta: cfg.beta_treatment,
        implied_bias_sign: -1,
        no_greener: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn treatment_rule_matches_formula() {
        assert_eq!(greening_treatment_prob(0.0), 1.0);
        assert_eq!(greening_treatment_prob(2.0), 0.5);
        assert_eq!(greening_treatment_prob(4.0), 0.0);
        assert_eq!(greening_treatment_prob(7.0), 0.0);
    }

    #[test]
    fn moments_match_direct_sum() {
        let e = libm::exp(-1.0);
        let px = e * (1.0 + 0.75 + 0.5 * 0.5 + (1.0 / 6.0) * 0.25);
        let (p, cov) = greening_moments();
        assert!((p - px).abs() < 1e-15);
        let ewx = e * (0.75 + 2.0 * 0.5 * 0.5 + 3.0 * (1.0 / 6.0) * 0.25);
        assert!((cov - (ewx - px)).abs() < 1e-15);
        assert!(greening_w_on_x_slope() < 0.0);
    }

    #[test]
    fn corruption_direction_is_unit_and_half_aligned() {
        let d = corruption_direction();
        let n: f64 = d.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in [
            Scenario::Sim1Greening,
            Scenario::DagTreatment,
            Scenario::ControlsConfounded,
        ] {
            assert_eq!(Scenario::from_name(s.name()), Some(s));
        }
    }

    #[test]
    fn small_bank_is_rejected() {
        assert!(make_pixel_bank(&PixelBankConfig::new(50, 1)).is_err());
    }

    #[test]
    fn outcome_induced_needs_effect() {
        let mut cfg = DagConfig::new(DagScenario::OutcomeInduced, 0.1);
        cfg.beta = 0.0;
        assert!(simulate_dag(100, 1, &cfg).is_err());
    }
}
