//! Detecting and correcting measurement-error bias.
//!
//! The bias test regresses prediction errors `ν = Ŷ - Y` on the regressors of
//! the downstream model over the labeled rows. Its coefficients estimate the
//! shift that the prediction error adds to the downstream coefficients, so it
//! doubles as the plug-in correction term. Inference uses a normal reference
//! throughout; residual variance carries the `n - p` correction.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::regress::{self, DesignMatrix, FitResult, SeKind, SolverOptions};
use crate::rng;
use crate::stats;

/// Options for [`bias_test_regressors`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BiasTestOptions {
    /// Prepend a constant column before regressing the errors.
    pub intercept: bool,
    pub se_kind: SeKind,
}

impl Default for BiasTestOptions {
    fn default() -> Self {
        BiasTestOptions {
            intercept: true,
            se_kind: SeKind::Classical,
        }
    }
}

/// Coefficients of the error-on-regressors regression, one per design column.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BiasTestResult {
    pub gamma_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub n_labeled: usize,
    pub se_kind: SeKind,
    /// Whether column 0 is an intercept (regressor `i` then sits at `i + 1`).
    pub has_intercept: bool,
}

impl BiasTestResult {
    fn column(&self, regressor: usize) -> Result<usize> {
        let col = regressor + usize::from(self.has_intercept);
        if col >= self.gamma_hat.len() {
            return Err(Error::IndexOutOfRange {
                index: regressor,
                len: self.gamma_hat.len() - usize::from(self.has_intercept),
            });
        }
        Ok(col)
    }

    /// Bias estimate for the `regressor`-th non-intercept column.
    pub fn gamma(&self, regressor: usize) -> Result<f64> {
        Ok(self.gamma_hat[self.column(regressor)?])
    }

    pub fn std_error(&self, regressor: usize) -> Result<f64> {
        Ok(self.se[self.column(regressor)?])
    }

    pub fn p_value(&self, regressor: usize) -> Result<f64> {
        Ok(self.p_values[self.column(regressor)?])
    }

    pub fn rejects(&self, regressor: usize, level: f64) -> Result<bool> {
        Ok(self.p_value(regressor)? < level)
    }
}

fn z_and_p(est: f64, se: f64) -> (f64, f64) {
    if se > 0.0 {
        let z = est / se;
        (z, stats::two_sided_p(z))
    } else if est == 0.0 {
        (0.0, 1.0)
    } else {
        (est.signum() * f64::INFINITY, 0.0)
    }
}

/// Regresses `nu` on the full design `x` (intercept handled by the caller).
pub fn bias_test(nu: &[f64], x: &DesignMatrix, se_kind: SeKind) -> Result<BiasTestResult> {
    if nu.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    if nu.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            what: "prediction errors",
            expected: x.nrows(),
            got: nu.len(),
        });
    }
    let nu = DVector::from_column_slice(nu);
    let fit = regress::ols_fit_with(x, &nu, se_kind, &SolverOptions::default())?;
    Ok(result_from_fit(&fit, x.has_intercept()))
}

fn result_from_fit(fit: &FitResult, has_intercept: bool) -> BiasTestResult {
    let se: Vec<f64> = fit.std_errors().iter().copied().collect();
    let gamma_hat: Vec<f64> = fit.coefficients.iter().copied().collect();
    let (t_stats, p_values) = gamma_hat
        .iter()
        .zip(&se)
        .map(|(&g, &s)| z_and_p(g, s))
        .unzip();
    BiasTestResult {
        gamma_hat,
        se,
        t_stats,
        p_values,
        n_labeled: fit.n_obs,
        se_kind: fit.se_kind,
        has_intercept,
    }
}

/// Bias test on raw regressor columns; adds the intercept unless disabled.
pub fn bias_test_regressors(
    nu: &[f64],
    regressors: &DMatrix<f64>,
    opts: &BiasTestOptions,
) -> Result<BiasTestResult> {
    if nu.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let design = DesignMatrix::from_regressors(regressors, opts.intercept)?;
    bias_test(nu, &design, opts.se_kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CorrectionMethod {
    NormalApprox,
    Bootstrap,
}

/// Naive coefficient minus the estimated bias.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorrectedEstimate {
    pub beta_naive: f64,
    pub gamma_hat: f64,
    pub beta_corrected: f64,
    pub se_corrected: f64,
    pub method: CorrectionMethod,
}

impl CorrectedEstimate {
    /// Point estimate from the full sample, spread from replicate estimates of `β̂ - γ̂`.
    pub fn from_bootstrap(beta_naive: f64, gamma_hat: f64, corrected_draws: &[f64]) -> Self {
        CorrectedEstimate {
            beta_naive,
            gamma_hat,
            beta_corrected: beta_naive - gamma_hat,
            se_corrected: stats::std_dev(corrected_draws),
            method: CorrectionMethod::Bootstrap,
        }
    }
}

/// Subtracts the bias estimate at `treatment_index` from the naive coefficient.
///
/// `beta_fit` and `bias` must share a column layout; the labeled and
/// evaluation samples are treated as independent for the standard error.
pub fn bias_correct(
    beta_fit: &FitResult,
    bias: &BiasTestResult,
    treatment_index: usize,
) -> Result<CorrectedEstimate> {
    let beta_naive = beta_fit.coefficient(treatment_index)?;
    let se_beta = beta_fit.std_error(treatment_index)?;
    if treatment_index >= bias.gamma_hat.len() {
        return Err(Error::IndexOutOfRange {
            index: treatment_index,
            len: bias.gamma_hat.len(),
        });
    }
    let gamma_hat = bias.gamma_hat[treatment_index];
    let se_gamma = bias.se[treatment_index];
    Ok(CorrectedEstimate {
        beta_naive,
        gamma_hat,
        beta_corrected: beta_naive - gamma_hat,
        se_corrected: libm::sqrt(se_beta * se_beta + se_gamma * se_gamma),
        method: CorrectionMethod::NormalApprox,
    })
}

/// Smallest bias detectable with probability `power` by a two-sided level-`alpha_level` test.
pub fn minimum_detectable_bias(se_gamma: f64, power: f64, alpha_level: f64) -> Result<f64> {
    if !(se_gamma > 0.0) || !se_gamma.is_finite() {
        return Err(Error::DomainError("standard error must be positive"));
    }
    if !(power > 0.0 && power < 1.0) {
        return Err(Error::DomainError("power must lie in (0, 1)"));
    }
    if !(alpha_level > 0.0 && alpha_level < 1.0) {
        return Err(Error::DomainError("alpha level must lie in (0, 1)"));
    }
    let z_alpha = stats::normal_quantile(1.0 - alpha_level / 2.0);
    let z_power = stats::normal_quantile(power);
    Ok((z_alpha + z_power) * se_gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PowerOptions {
    pub power: f64,
    pub alpha_level: f64,
    pub bias: BiasTestOptions,
    /// Regressor (non-intercept column) whose bias is being powered.
    pub regressor: usize,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions {
            power: 0.8,
            alpha_level: 0.05,
            bias: BiasTestOptions::default(),
            regressor: 0,
        }
    }
}

/// Minimum detectable bias as a function of labeled sample size.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PowerCurve {
    pub sample_sizes: Vec<usize>,
    /// Mean over random labeled subsets at each size.
    pub mdb: Vec<f64>,
    /// `mdb_draws[i][d]`: subset `d` at `sample_sizes[i]`.
    pub mdb_draws: Vec<Vec<f64>>,
    /// Full-sample standard error scaled by `sqrt(N / J)`.
    pub true_mdb: Vec<f64>,
    pub power: f64,
    pub alpha_level: f64,
}

/// MDB curve from random labeled subsets of `(nu, regressors)`.
///
/// Subset `d` at size index `i` draws from the stream `(seed, [i, d])`.
pub fn power_curve(
    nu: &[f64],
    regressors: &DMatrix<f64>,
    sample_sizes: &[usize],
    draws: usize,
    seed: u64,
    opts: &PowerOptions,
) -> Result<PowerCurve> {
    let n = nu.len();
    if n == 0 {
        return Err(Error::EmptyLabeledSet);
    }
    if regressors.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "power-curve regressors",
            expected: n,
            got: regressors.nrows(),
        });
    }
    if draws == 0 {
        return Err(Error::DomainError("at least one draw is required"));
    }
    let p = regressors.ncols() + usize::from(opts.bias.intercept);
    if let Some(&bad) = sample_sizes.iter().find(|&&j| j > n || j <= p) {
        return Err(Error::InsufficientLabels {
            requested: bad,
            available: n,
        });
    }
    let full = bias_test_regressors(nu, regressors, &opts.bias)?;
    let full_se = full.std_error(opts.regressor)?;

    let mut mdb = Vec::with_capacity(sample_sizes.len());
    let mut mdb_draws = Vec::with_capacity(sample_sizes.len());
    let mut true_mdb = Vec::with_capacity(sample_sizes.len());
    for (i, &j) in sample_sizes.iter().enumerate() {
        let mut row = Vec::with_capacity(draws);
        for d in 0..draws {
            let mut r = rng::rng_for(seed, &[i as u64, d as u64]);
            let mut idx = rng::sample_without_replacement(n, j, &mut r);
            idx.sort_unstable();
            let sub_nu: Vec<f64> = idx.iter().map(|&k| nu[k]).collect();
            let sub_x = regressors.select_rows(idx.iter());
            let res = bias_test_regressors(&sub_nu, &sub_x, &opts.bias)?;
            row.push(minimum_detectable_bias(
                res.std_error(opts.regressor)?,
                opts.power,
                opts.alpha_level,
            )?);
        }
        mdb.push(stats::mean(&row));
        mdb_draws.push(row);
        let scaled = full_se * libm::sqrt(n as f64 / j as f64);
        true_mdb.push(minimum_detectable_bias(scaled, opts.power, opts.alpha_level)?);
    }
    Ok(PowerCurve {
        sample_sizes: sample_sizes.to_vec(),
        mdb,
        mdb_draws,
        true_mdb,
        power: opts.power,
        alpha_level: opts.alpha_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn column(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn zero_errors_never_reject() {
        let x = column(&[0.0, 1.0, 1.0, 0.0, 1.0]);
        let res = bias_test_regressors(&[0.0; 5], &x, &BiasTestOptions::default()).unwrap();
        assert_eq!(res.gamma(0).unwrap(), 0.0);
        assert_eq!(res.p_value(0).unwrap(), 1.0);
        assert!(!res.rejects(0, 0.05).unwrap());
    }

    #[test]
    fn exact_linear_error_without_intercept() {
        let xs = [0.5, 1.0, -2.0, 3.0, 0.25];
        let nu: Vec<f64> = xs.iter().map(|x| 0.5 * x).collect();
        let opts = BiasTestOptions {
            intercept: false,
            ..Default::default()
        };
        let res = bias_test_regressors(&nu, &column(&xs), &opts).unwrap();
        assert!((res.gamma(0).unwrap() - 0.5).abs() < 1e-14);
        assert!(res.std_error(0).unwrap() < 1e-14);
    }

    #[test]
    fn empty_labeled_set() {
        let x = DMatrix::<f64>::zeros(0, 1);
        assert_eq!(
            bias_test_regressors(&[], &x, &BiasTestOptions::default()).unwrap_err(),
            Error::EmptyLabeledSet
        );
    }

    #[test]
    fn bootstrap_flavor_is_rejected_for_single_fit() {
        let x = column(&[0.0, 1.0, 2.0, 3.0]);
        let opts = BiasTestOptions {
            se_kind: SeKind::Bootstrap,
            ..Default::default()
        };
        assert!(bias_test_regressors(&[0.1, 0.0, 0.3, 0.2], &x, &opts).is_err());
    }

    fn fit_with(coef: f64, se: f64) -> FitResult {
        FitResult {
            coefficients: DVector::from_vec(vec![0.3, coef]),
            residuals: DVector::zeros(3),
            vcov: DMatrix::from_row_slice(2, 2, &[0.01, 0.0, 0.0, se * se]),
            se_kind: SeKind::Classical,
            n_obs: 3,
            sigma2: 0.0,
        }
    }

    fn bias_with(gamma: f64, se: f64) -> BiasTestResult {
        BiasTestResult {
            gamma_hat: vec![0.0, gamma],
            se: vec![0.1, se],
            t_stats: vec![0.0, 0.0],
            p_values: vec![1.0, 1.0],
            n_labeled: 10,
            se_kind: SeKind::Classical,
            has_intercept: true,
        }
    }

    #[test]
    fn zero_bias_keeps_naive_and_widens_se() {
        let c = bias_correct(&fit_with(1.2, 0.1), &bias_with(0.0, 0.05), 1).unwrap();
        assert_eq!(c.beta_corrected, 1.2);
        assert!(c.se_corrected >= 0.1);
    }

    #[test]
    fn correcting_the_greening_bias_recovers_null() {
        let c = bias_correct(&fit_with(-0.025, 0.01), &bias_with(-0.025, 0.01), 1).unwrap();
        assert_eq!(c.beta_corrected, 0.0);
        assert_eq!(c.beta_corrected + c.gamma_hat, c.beta_naive);
    }

    #[test]
    fn correct_rejects_bad_index() {
        assert!(matches!(
            bias_correct(&fit_with(1.0, 0.1), &bias_with(0.0, 0.1), 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn mdb_reference_values() {
        // z_{0.975} + z_{0.8} = 1.959964 + 0.841621
        let m = minimum_detectable_bias(0.01, 0.8, 0.05).unwrap();
        assert!((m - 0.028016).abs() < 5e-7);
        let half = minimum_detectable_bias(0.01, 0.5, 0.05).unwrap();
        assert!((half - 0.01959964).abs() < 1e-8);
    }

    #[test]
    fn mdb_domain_errors() {
        assert!(minimum_detectable_bias(0.0, 0.8, 0.05).is_err());
        assert!(minimum_detectable_bias(0.1, 1.0, 0.05).is_err());
        assert!(minimum_detectable_bias(0.1, 0.8, 0.0).is_err());
    }

    #[test]
    fn full_sample_curve_point_is_full_sample_mdb() {
        let mut r = rng::rng_for(11, &[]);
        use rand::Rng as _;
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let nu: Vec<f64> = x.iter().map(|&v| 0.1 * v + r.random::<f64>() - 0.5).collect();
        let reg = column(&x);
        let curve = power_curve(&nu, &reg, &[n], 3, 5, &PowerOptions::default()).unwrap();
        let full = bias_test_regressors(&nu, &reg, &BiasTestOptions::default()).unwrap();
        let expected = minimum_detectable_bias(full.std_error(0).unwrap(), 0.8, 0.05).unwrap();
        assert!((curve.mdb[0] - expected).abs() < 1e-12);
        assert!((curve.true_mdb[0] - expected).abs() < 1e-15);
        assert!(matches!(
            power_curve(&nu, &reg, &[n + 1], 3, 5, &PowerOptions::default()),
            Err(Error::InsufficientLabels { .. })
        ));
    }
}
