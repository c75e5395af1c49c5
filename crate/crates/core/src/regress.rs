//! Closed-form linear estimation.
//!
//! Least squares problems are solved through a column-pivoted Householder QR
//! of the design; `(X'X)^-1` is only assembled when a covariance matrix is
//! requested. Callers decide about the intercept: nothing here adds a
//! constant column on its own.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{ColPivQR, DMatrix, DVector};

use crate::error::{Error, Result};

/// Numerical options shared by the least-squares routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Smallest accepted reciprocal condition number of the (column-equilibrated)
    /// Gram matrix `X'X`.
    pub rcond_floor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { rcond_floor: 1e-12 }
    }
}

/// Flavor of a reported variance-covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SeKind {
    Classical,
    HcRobust,
    Bootstrap,
}

/// A dense `n x p` regressor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    has_intercept: bool,
}

impl DesignMatrix {
    /// Validates and wraps `values`. With `has_intercept` the first column must be all ones.
    pub fn new(values: DMatrix<f64>, has_intercept: bool) -> Result<Self> {
        let (n, p) = values.shape();
        if p == 0 {
            return Err(Error::InvalidDesign("design has no columns"));
        }
        if n < p {
            return Err(Error::InvalidDesign("fewer rows than columns"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDesign("non-finite entry"));
        }
        if has_intercept && values.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidDesign("flagged intercept column is not constant one"));
        }
        if values.column_iter().any(|c| c.iter().all(|&v| v == 0.0)) {
            return Err(Error::InvalidDesign("all-zero column"));
        }
        Ok(DesignMatrix {
            values,
            has_intercept,
        })
    }

    /// Builds `[1, regressors]` when `intercept` is set, `regressors` otherwise.
    pub fn from_regressors(regressors: &DMatrix<f64>, intercept: bool) -> Result<Self> {
        if !intercept {
            return DesignMatrix::new(regressors.clone(), false);
        }
        let n = regressors.nrows();
        let mut values = DMatrix::zeros(n, regressors.ncols() + 1);
        values.column_mut(0).fill(1.0);
        values
            .columns_mut(1, regressors.ncols())
            .copy_from(regressors);
        DesignMatrix::new(values, true)
    }

    /// Convenience constructor from column slices.
    pub fn from_columns(columns: &[&[f64]], intercept: bool) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.len());
        if let Some(bad) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch {
                what: "design columns",
                expected: n,
                got: bad.len(),
            });
        }
        let regressors = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        DesignMatrix::from_regressors(&regressors, intercept)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    /// Design restricted to `rows` (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let values = self.values.select_rows(rows.iter());
        DesignMatrix::new(values, self.has_intercept)
    }
}

/// Column-pivoted QR factorization of a design, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    qr: ColPivQR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    rcond: f64,
}

impl LeastSquares {
    pub fn new(design: &DesignMatrix, opts: &SolverOptions) -> Result<Self> {
        let x = design.values();
        let p = x.ncols();
        let rcond = gram_rcond(x);
        if !(rcond > opts.rcond_floor) {
            return Err(Error::SingularDesign {
                rcond,
                floor: opts.rcond_floor,
            });
        }
        let qr = ColPivQR::new(x.clone());
        let q = qr.q();
        let r = qr.r().rows(0, p).into_owned();
        Ok(LeastSquares { qr, q, r, rcond })
    }

    /// Reciprocal condition number estimate of the equilibrated Gram matrix.
    pub fn rcond(&self) -> f64 {
        self.rcond
    }

    pub fn nrows(&self) -> usize {
        self.q.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.r.ncols()
    }

    fn check_rows(&self, got: usize) -> Result<()> {
        if got != self.nrows() {
            return Err(Error::DimensionMismatch {
                what: "least-squares right-hand side",
                expected: self.nrows(),
                got,
            });
        }
        Ok(())
    }

    /// Coefficients minimizing `||y - X b||`.
    pub fn solve(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(y.len())?;
        let qty = self.q.tr_mul(y);
        let mut z = self
            .r
            .solve_upper_triangular(&qty)
            .ok_or(Error::SingularDesign {
                rcond: 0.0,
                floor: 0.0,
            })?;
        self.qr.p().inv_permute_rows(&mut z);
        Ok(z)
    }

    /// Coefficients for every column of `targets`.
    pub fn solve_matrix(&self, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(targets.nrows())?;
        let qty = self.q.tr_mul(targets);
        let mut z = self
            .r
            .solve_upper_triangular(&qty)
            .ok_or(Error::SingularDesign {
                rcond: 0.0,
                floor: 0.0,
            })?;
        self.qr.p().inv_permute_rows(&mut z);
        Ok(z)
    }

    /// Orthogonal projection `P y` onto the column space.
    pub fn fitted(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(y.len())?;
        Ok(&self.q * self.q.tr_mul(y))
    }

    /// Annihilator `(I - P) y`.
    pub fn residualize(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(y - self.fitted(y)?)
    }

    pub fn residualize_matrix(&self, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(targets.nrows())?;
        Ok(targets - &self.q * self.q.tr_mul(targets))
    }

    /// `(X'X)^-1`, symmetrized.
    pub fn gram_inverse(&self) -> DMatrix<f64> {
        let p = self.ncols();
        let r_inv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .expect("triangular factor checked at construction");
        let mut inv = &r_inv * r_inv.transpose();
        self.qr.p().inv_permute_rows(&mut inv);
        self.qr.p().inv_permute_columns(&mut inv);
        symmetrize(&mut inv);
        inv
    }

    /// Thin orthonormal basis of the column space.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.q
    }
}

/// Reciprocal condition number of `X'X` after scaling columns to unit norm,
/// estimated from the pivoted R diagonal.
fn gram_rcond(x: &DMatrix<f64>) -> f64 {
    let mut scaled = x.clone();
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let p = scaled.ncols();
    let r = ColPivQR::new(scaled).r();
    let diag: Vec<f64> = (0..p).map(|i| libm::fabs(r[(i, i)])).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        return 0.0;
    }
    let ratio = min / max;
    ratio * ratio
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Result of a linear regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub se_kind: SeKind,
    pub n_obs: usize,
    /// Residual variance with the `n - p` correction.
    pub sigma2: f64,
}

impl FitResult {
    pub fn std_errors(&self) -> DVector<f64> {
        self.vcov.diagonal().map(|v| libm::sqrt(v.max(0.0)))
    }

    pub fn coefficient(&self, index: usize) -> Result<f64> {
        self.coefficients
            .get(index)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                index,
                len: self.coefficients.len(),
            })
    }

    pub fn std_error(&self, index: usize) -> Result<f64> {
        let p = self.vcov.nrows();
        if index >= p {
            return Err(Error::IndexOutOfRange { index, len: p });
        }
        Ok(libm::sqrt(self.vcov[(index, index)].max(0.0)))
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// OLS with classical standard errors `σ̂²(X'X)^-1`.
pub fn ols_fit(x: &DesignMatrix, y: &DVector<f64>) -> Result<FitResult> {
    ols_fit_with(x, y, SeKind::Classical, &SolverOptions::default())
}

/// OLS with the requested standard-error flavor (`Classical` or `HcRobust`).
pub fn ols_fit_with(
    x: &DesignMatrix,
    y: &DVector<f64>,
    se_kind: SeKind,
    opts: &SolverOptions,
) -> Result<FitResult> {
    check_len("ols outcome", x.nrows(), y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDesign("non-finite outcome"));
    }
    let ls = LeastSquares::new(x, opts)?;
    fit_from_decomposition(&ls, x, y, se_kind)
}

/// Fit reusing an existing factorization of `x`.
pub fn fit_from_decomposition(
    ls: &LeastSquares,
    x: &DesignMatrix,
    y: &DVector<f64>,
    se_kind: SeKind,
) -> Result<FitResult> {
    let coefficients = ls.solve(y)?;
    let residuals = y - x.values() * &coefficients;
    let (n, p) = x.values().shape();
    let rss = residuals.norm_squared();
    let sigma2 = if n > p { rss / (n - p) as f64 } else { 0.0 };
    let bread = ls.gram_inverse();
    let vcov = match se_kind {
        SeKind::Classical => &bread * sigma2,
        SeKind::HcRobust => sandwich(&bread, x.values(), &residuals),
        SeKind::Bootstrap => {
            return Err(Error::InvalidSpec(
                "bootstrap standard errors come from resampling, not from a single fit".into(),
            ))
        }
    };
    Ok(FitResult {
        coefficients,
        residuals,
        vcov,
        se_kind,
        n_obs: n,
        sigma2,
    })
}

fn sandwich(bread: &DMatrix<f64>, x: &DMatrix<f64>, residuals: &DVector<f64>) -> DMatrix<f64> {
    let mut weighted = x.clone();
    for (mut row, e) in weighted.row_iter_mut().zip(residuals.iter()) {
        row *= *e;
    }
    let meat = weighted.tr_mul(&weighted);
    let mut v = bread * meat * bread;
    symmetrize(&mut v);
    v
}

/// HC0 sandwich estimate `(X'X)^-1 X' diag(e²) X (X'X)^-1`.
pub fn hc_robust_vcov(x: &DesignMatrix, residuals: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_len("hc residuals", x.nrows(), residuals.len())?;
    let ls = LeastSquares::new(x, &SolverOptions::default())?;
    Ok(sandwich(&ls.gram_inverse(), x.values(), residuals))
}

/// Residuals of every column of `target` after projecting out `controls`.
pub fn fwl_residualize(target: &DMatrix<f64>, controls: &DesignMatrix) -> Result<DMatrix<f64>> {
    LeastSquares::new(controls, &SolverOptions::default())?.residualize_matrix(target)
}

pub fn fwl_residualize_vec(target: &DVector<f64>, controls: &DesignMatrix) -> Result<DVector<f64>> {
    LeastSquares::new(controls, &SolverOptions::default())?.residualize(target)
}

/// Dense hat matrix `X(X'X)^-1X'`. Quadratic in `n`; meant for small problems and checks.
pub fn projection_matrix(x: &DesignMatrix) -> Result<DMatrix<f64>> {
    let ls = LeastSquares::new(x, &SolverOptions::default())?;
    Ok(ls.basis() * ls.basis().transpose())
}

/// Column roles for instrumental-variable estimation within a covariate table.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IvSpec {
    pub treatment_col: usize,
    pub control_cols: Vec<usize>,
    pub instrument_cols: Vec<usize>,
}

impl IvSpec {
    pub fn validate(&self, ncols: usize) -> Result<()> {
        if self.instrument_cols.is_empty() {
            return Err(Error::InvalidSpec("at least one instrument is required".into()));
        }
        let mut all: Vec<usize> = Vec::with_capacity(1 + self.control_cols.len() + self.instrument_cols.len());
        all.push(self.treatment_col);
        all.extend(&self.control_cols);
        all.extend(&self.instrument_cols);
        if let Some(&bad) = all.iter().find(|&&c| c >= ncols) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: ncols,
            });
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return Err(Error::InvalidSpec(
                "treatment, controls and instruments must be disjoint".into(),
            ));
        }
        Ok(())
    }
}

/// Builds `[1, table[:, cols]...]`.
pub(crate) fn intercept_design(table: &DMatrix<f64>, cols: &[usize]) -> Result<DesignMatrix> {
    let sel = table.select_columns(cols.iter());
    DesignMatrix::from_regressors(&sel, true)
}

/// First-stage F below this value raises the weak-instrument flag.
pub const WEAK_INSTRUMENT_F: f64 = 10.0;

/// Two-stage least squares estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TslsFit {
    /// Second-stage fit on `[1, X̂₁, X₂]`; residuals are structural (`y - [1, X₁, X₂]b`).
    pub fit: FitResult,
    pub treatment_coefficient: f64,
    pub treatment_se: f64,
    pub first_stage_f: f64,
    pub weak_instrument: bool,
}

/// Two-stage least squares with first stage on `C = [1, X₂, Z]`.
pub fn tsls_fit(outcome: &DVector<f64>, table: &DMatrix<f64>, spec: &IvSpec) -> Result<TslsFit> {
    spec.validate(table.ncols())?;
    check_len("tsls outcome", table.nrows(), outcome.len())?;
    let opts = SolverOptions::default();
    let n = table.nrows();
    let x1 = table.column(spec.treatment_col).into_owned();

    let mut first_cols = spec.control_cols.clone();
    first_cols.extend(&spec.instrument_cols);
    let c_full = intercept_design(table, &first_cols)?;
    let first = LeastSquares::new(&c_full, &opts)?;
    let x1_hat = first.fitted(&x1)?;
    let rss_u = (&x1 - &x1_hat).norm_squared();

    let c_restricted = intercept_design(table, &spec.control_cols)?;
    let rss_r = LeastSquares::new(&c_restricted, &opts)?
        .residualize(&x1)?
        .norm_squared();
    let q = spec.instrument_cols.len() as f64;
    let dof = (n - c_full.ncols()) as f64;
    let first_stage_f = if rss_u <= 0.0 {
        f64::INFINITY
    } else {
        ((rss_r - rss_u) / q) / (rss_u / dof)
    };

    let p = 2 + spec.control_cols.len();
    let mut second = DMatrix::zeros(n, p);
    second.column_mut(0).fill(1.0);
    second.column_mut(1).copy_from(&x1_hat);
    let mut structural = second.clone();
    structural.column_mut(1).copy_from(&x1);
    for (k, &c) in spec.control_cols.iter().enumerate() {
        second.column_mut(2 + k).copy_from(&table.column(c));
        structural.column_mut(2 + k).copy_from(&table.column(c));
    }
    let second = DesignMatrix::new(second, true)?;
    let ls = LeastSquares::new(&second, &opts)?;
    let coefficients = ls.solve(outcome)?;
    let residuals = outcome - &structural * &coefficients;
    let sigma2 = if n > p {
        residuals.norm_squared() / (n - p) as f64
    } else {
        0.0
    };
    let vcov = ls.gram_inverse() * sigma2;
    let treatment_coefficient = coefficients[1];
    let treatment_se = libm::sqrt(vcov[(1, 1)].max(0.0));
    Ok(TslsFit {
        fit: FitResult {
            coefficients,
            residuals,
            vcov,
            se_kind: SeKind::Classical,
            n_obs: n,
            sigma2,
        },
        treatment_coefficient,
        treatment_se,
        first_stage_f,
        weak_instrument: first_stage_f < WEAK_INSTRUMENT_F,
    })
}

/// Indirect least squares: reduced-form over first-stage instrument coefficients.
pub fn ils_fit(outcome: &DVector<f64>, table: &DMatrix<f64>, spec: &IvSpec) -> Result<f64> {
    spec.validate(table.ncols())?;
    check_len("ils outcome", table.nrows(), outcome.len())?;
    if spec.instrument_cols.len() != 1 {
        return Err(Error::InvalidSpec(format!(
            "indirect least squares needs exactly one instrument, got {}",
            spec.instrument_cols.len()
        )));
    }
    let mut cols = spec.instrument_cols.clone();
    cols.extend(&spec.control_cols);
    let design = intercept_design(table, &cols)?;
    let ls = LeastSquares::new(&design, &SolverOptions::default())?;
    let reduced = ls.solve(outcome)?[1];
    let x1 = table.column(spec.treatment_col).into_owned();
    let first = ls.solve(&x1)?[1];

    let z = table.column(spec.instrument_cols[0]);
    let scale = column_sd(z.iter().copied()) / column_sd(x1.iter().copied()).max(f64::MIN_POSITIVE);
    if !(libm::fabs(first) * scale > 1e-10) {
        return Err(Error::DivisionByNearZero { value: first });
    }
    Ok(reduced / first)
}

fn column_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let m = values.clone().sum::<f64>() / n;
    libm::sqrt(values.map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}
