//! Adversaries that try to predict prediction errors from the treatment.
//!
//! The linear-regression adversaries fit `ν ≈ Xγ` on an intercept plus the
//! (possibly residualized) treatment; the primary model is rewarded for
//! making that fit poor. The covariance penalty skips the inner fit and
//! charges `|Σ (x - x̄) ν|` directly.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::regress::{self, DesignMatrix, IvSpec, LeastSquares, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AdversaryFamily {
    Slr,
    CovariancePenalty,
    /// Regression of residualized errors on the treatment net of controls.
    FwlSlr,
    /// Regression of residualized errors on the residualized instrument
    /// (single instrument) or residualized first-stage fit.
    IvSlr,
}

impl AdversaryFamily {
    pub fn is_regression(self) -> bool {
        !matches!(self, AdversaryFamily::CovariancePenalty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GammaUpdate {
    GradientStep,
    #[default]
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdversarySpec {
    pub family: AdversaryFamily,
    pub alpha: f64,
    /// Treatment column in the covariate table.
    pub treatment_index: usize,
    pub control_cols: Vec<usize>,
    pub instrument_cols: Vec<usize>,
    pub gamma_update: GammaUpdate,
    /// Step size for `GradientStep`.
    pub adversary_lr: f64,
    /// Adversary updates per primary update.
    pub inner_steps: usize,
}

impl AdversarySpec {
    pub fn new(family: AdversaryFamily, alpha: f64, treatment_index: usize) -> Self {
        AdversarySpec {
            family,
            alpha,
            treatment_index,
            control_cols: Vec::new(),
            instrument_cols: Vec::new(),
            gamma_update: GammaUpdate::ClosedForm,
            adversary_lr: 1e-2,
            inner_steps: 1,
        }
    }

    pub fn with_controls(mut self, cols: Vec<usize>) -> Self {
        self.control_cols = cols;
        self
    }

    pub fn with_instruments(mut self, cols: Vec<usize>) -> Self {
        self.instrument_cols = cols;
        self
    }

    pub fn validate(&self, ncols: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidSpec("alpha must be nonnegative".into()));
        }
        if self.gamma_update == GammaUpdate::GradientStep && !(self.adversary_lr > 0.0) {
            return Err(Error::InvalidSpec("adversary_lr must be positive".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidSpec("inner_steps must be at least 1".into()));
        }
        let missing = |c: usize| c >= ncols;
        if missing(self.treatment_index)
            || self.control_cols.iter().any(|&c| missing(c))
            || self.instrument_cols.iter().any(|&c| missing(c))
        {
            return Err(Error::MissingColumns(alloc::format!(
                "adversary columns exceed the {ncols} available covariates"
            )));
        }
        match self.family {
            AdversaryFamily::IvSlr => self.iv_spec().validate(ncols),
            AdversaryFamily::FwlSlr => {
                if self.control_cols.contains(&self.treatment_index) {
                    return Err(Error::InvalidSpec(
                        "treatment cannot also be a control".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn iv_spec(&self) -> IvSpec {
        IvSpec {
            treatment_col: self.treatment_index,
            control_cols: self.control_cols.clone(),
            instrument_cols: self.instrument_cols.clone(),
        }
    }

    /// Sign with which the adversarial term enters the training objective.
    ///
    /// Regression adversaries are maximized (`L_p - α L_a`); the covariance
    /// magnitude is minimized (`L_p + α |cov|`).
    pub fn objective_sign(&self) -> f64 {
        if self.family.is_regression() {
            -1.0
        } else {
            1.0
        }
    }
}

fn centered(x: &DVector<f64>) -> DVector<f64> {
    let m = x.mean();
    x.map(|v| v - m)
}

fn degenerate_check(resid: &DVector<f64>, raw: &DVector<f64>) -> Result<()> {
    let scale = centered(raw).norm();
    if !(scale > 0.0) || resid.norm() <= 1e-8 * scale {
        return Err(Error::DegenerateDesign(
            "treatment carries no variation beyond the controls",
        ));
    }
    Ok(())
}

/// Regressor columns the adversary sees (no intercept), one row per observation.
///
/// `slr` and `covariance_penalty` use the raw treatment; `fwl_slr` the
/// treatment net of `[1, controls]`; `iv_slr` the residualized instrument or
/// first-stage fit. Without controls the residualization only centers.
pub fn make_residualized_design(covariates: &DMatrix<f64>, spec: &AdversarySpec) -> Result<DMatrix<f64>> {
    spec.validate(covariates.ncols())?;
    let x = covariates.column(spec.treatment_index).into_owned();
    match spec.family {
        AdversaryFamily::Slr | AdversaryFamily::CovariancePenalty => {
            Ok(DMatrix::from_column_slice(x.len(), 1, x.as_slice()))
        }
        AdversaryFamily::FwlSlr => {
            if spec.control_cols.is_empty() {
                return Ok(DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
            }
            let controls = regress::intercept_design(covariates, &spec.control_cols)?;
            let resid = regress::fwl_residualize_vec(&x, &controls)?;
            degenerate_check(&resid, &x)?;
            Ok(DMatrix::from_column_slice(resid.len(), 1, resid.as_slice()))
        }
        AdversaryFamily::IvSlr => {
            let controls = regress::intercept_design(covariates, &spec.control_cols)?;
            let target = if spec.instrument_cols.len() == 1 {
                covariates.column(spec.instrument_cols[0]).into_owned()
            } else {
                let mut cols = spec.control_cols.clone();
                cols.extend(&spec.instrument_cols);
                let first = regress::intercept_design(covariates, &cols)?;
                LeastSquares::new(&first, &SolverOptions::default())?.fitted(&x)?
            };
            let resid = regress::fwl_residualize_vec(&target, &controls)?;
            degenerate_check(&resid, &target)?;
            Ok(DMatrix::from_column_slice(resid.len(), 1, resid.as_slice()))
        }
    }
}

/// Everything the adversary needs about a fixed set of rows.
#[derive(Debug, Clone)]
pub struct AdversaryDesign {
    family: AdversaryFamily,
    /// `[1, regressors]` for regression families.
    design: Option<DesignMatrix>,
    solver: Option<LeastSquares>,
    /// Residualizes errors against `[1, controls]` (fwl and iv families).
    residualizer: Option<LeastSquares>,
    /// Centered treatment for the covariance penalty.
    centered_treatment: Option<DVector<f64>>,
    n: usize,
}

impl AdversaryDesign {
    pub fn new(covariates: &DMatrix<f64>, spec: &AdversarySpec) -> Result<Self> {
        let regressors = make_residualized_design(covariates, spec)?;
        let n = regressors.nrows();
        if spec.family == AdversaryFamily::CovariancePenalty {
            return Ok(AdversaryDesign {
                family: spec.family,
                design: None,
                solver: None,
                residualizer: None,
                centered_treatment: Some(centered(&regressors.column(0).into_owned())),
                n,
            });
        }
        let design = DesignMatrix::from_regressors(&regressors, true)?;
        let solver = LeastSquares::new(&design, &SolverOptions::default())?;
        let residualizer = match spec.family {
            AdversaryFamily::FwlSlr | AdversaryFamily::IvSlr if !spec.control_cols.is_empty() => {
                let c = regress::intercept_design(covariates, &spec.control_cols)?;
                Some(LeastSquares::new(&c, &SolverOptions::default())?)
            }
            _ => None,
        };
        Ok(AdversaryDesign {
            family: spec.family,
            design: Some(design),
            solver: Some(solver),
            residualizer,
            centered_treatment: None,
            n,
        })
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn family(&self) -> AdversaryFamily {
        self.family
    }

    /// Adversary design including its intercept column.
    pub fn design(&self) -> Option<&DesignMatrix> {
        self.design.as_ref()
    }

    /// Errors as seen by the adversary (`ν̃` when controls are present).
    pub fn adversary_target(&self, nu: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(nu)?;
        match &self.residualizer {
            Some(r) => r.residualize(nu),
            None => Ok(nu.clone()),
        }
    }

    fn check_len(&self, nu: &DVector<f64>) -> Result<()> {
        if nu.len() != self.n {
            return Err(Error::DimensionMismatch {
                what: "prediction errors",
                expected: self.n,
                got: nu.len(),
            });
        }
        Ok(())
    }

    /// Projection onto the adversary design, `P = X(X'X)⁻¹X'`.
    pub fn projection(&self) -> Result<DMatrix<f64>> {
        match &self.design {
            Some(d) => regress::projection_matrix(d),
            None => Err(Error::InvalidSpec(
                "covariance penalty has no projection".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryState {
    pub gamma: DVector<f64>,
}

impl AdversaryState {
    pub fn new(design: &AdversaryDesign) -> Self {
        let p = design.design.as_ref().map_or(0, |d| d.ncols());
        AdversaryState {
            gamma: DVector::zeros(p),
        }
    }

    /// Slope coefficients (intercept dropped).
    pub fn slopes(&self) -> &[f64] {
        if self.gamma.is_empty() {
            &[]
        } else {
            &self.gamma.as_slice()[1..]
        }
    }
}

fn regression_residual(
    state: &AdversaryState,
    design: &AdversaryDesign,
    nu: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = design.design.as_ref().expect("regression family has a design");
    let target = design.adversary_target(nu)?;
    Ok(target - d.values() * &state.gamma)
}

fn covariance_sum(design: &AdversaryDesign, nu: &DVector<f64>) -> Result<f64> {
    design.check_len(nu)?;
    let xc = design.centered_treatment.as_ref().expect("covariance family");
    Ok(xc.dot(nu))
}

/// `(1/N)‖ν̃ - Xγ‖²` for regression families, `|Σ (x - x̄) ν|` for the penalty.
pub fn adversary_loss(state: &AdversaryState, design: &AdversaryDesign, nu: &DVector<f64>) -> Result<f64> {
    if design.family.is_regression() {
        let r = regression_residual(state, design, nu)?;
        Ok(r.norm_squared() / design.n as f64)
    } else {
        Ok(libm::fabs(covariance_sum(design, nu)?))
    }
}

/// One adversary update. The covariance penalty has no parameters.
pub fn adversary_step(
    state: &AdversaryState,
    spec: &AdversarySpec,
    design: &AdversaryDesign,
    nu: &DVector<f64>,
) -> Result<AdversaryState> {
    if !design.family.is_regression() {
        design.check_len(nu)?;
        return Ok(state.clone());
    }
    match spec.gamma_update {
        GammaUpdate::ClosedForm => {
            let target = design.adversary_target(nu)?;
            let solver = design.solver.as_ref().expect("regression family has a solver");
            Ok(AdversaryState {
                gamma: solver.solve(&target)?,
            })
        }
        GammaUpdate::GradientStep => {
            let d = design.design.as_ref().expect("regression family has a design");
            let mut gamma = state.gamma.clone();
            for _ in 0..spec.inner_steps {
                let r = design.adversary_target(nu)? - d.values() * &gamma;
                let grad = d.values().tr_mul(&r) * (-2.0 / design.n as f64);
                gamma -= grad * spec.adversary_lr;
            }
            Ok(AdversaryState { gamma })
        }
    }
}

/// `∂L_a/∂ν` at the current `γ` (held fixed).
///
/// For the covariance penalty this is the subgradient `sign(s)(x - x̄)` with
/// `sign(0) = 0`.
pub fn adversary_grad_wrt_nu(
    state: &AdversaryState,
    design: &AdversaryDesign,
    nu: &DVector<f64>,
) -> Result<DVector<f64>> {
    if design.family.is_regression() {
        let r = regression_residual(state, design, nu)?;
        let scale = 2.0 / design.n as f64;
        let g = match &design.residualizer {
            Some(res) => res.residualize(&r)?,
            None => r,
        };
        Ok(g * scale)
    } else {
        let s = covariance_sum(design, nu)?;
        let xc = design.centered_treatment.as_ref().expect("covariance family");
        let sign = if s > 0.0 {
            1.0
        } else if s < 0.0 {
            -1.0
        } else {
            0.0
        };
        Ok(xc * sign)
    }
}
