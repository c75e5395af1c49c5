use debias_core::adversary::{self, AdversaryDesign, AdversaryFamily, AdversarySpec, AdversaryState};
use debias_core::diagnose::{self, BiasTestOptions};
use debias_core::model::{self, LossKind, ModelSpec, ParamVector};
use debias_core::regress::{self, DesignMatrix, IvSpec, SeKind};
use debias_core::rng::{rng_for, Rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn gauss(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normal_matrix(rows: usize, cols: usize, r: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gauss(r))
}

fn normal_vector(n: usize, r: &mut Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(r))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

proptest! {
    #[test]
    fn logistic_cross_entropy_is_convex(seed in any::<u64>(), t in 0.0f64..1.0) {
        let mut r = rng_for(seed, &[1]);
        let spec = ModelSpec::logistic(3);
        let x = normal_matrix(15, 3, &mut r);
        let y = DVector::from_fn(15, |_, _| f64::from(u8::from(r.random_bool(0.5))));
        let a = DVector::from_fn(spec.n_params(), |_, _| 2.0 * gauss(&mut r));
        let b = DVector::from_fn(spec.n_params(), |_, _| 2.0 * gauss(&mut r));
        // the probability clip caps each row's loss, which is only convex
        // while no logit on the segment reaches it
        let logit_bound = (1.0 / model::PROB_CLIP - 1.0).ln();
        let max_logit = |v: &DVector<f64>| {
            let p = ParamVector { values: v.iter().copied().collect() };
            let pr = model::forward(&spec, &p, &x).unwrap();
            pr.iter().fold(0.0f64, |m, q| m.max((q / (1.0 - q)).ln().abs()))
        };
        prop_assume!(max_logit(&a) < 0.9 * logit_bound && max_logit(&b) < 0.9 * logit_bound);
        let mid = &a * (1.0 - t) + &b * t;
        let loss = |v: &DVector<f64>| {
            let p = ParamVector { values: v.iter().copied().collect() };
            model::loss_and_grad(&spec, &p, &x, &y, LossKind::BinaryCrossEntropy).unwrap().0
        };
        prop_assert!(loss(&mid) <= (1.0 - t) * loss(&a) + t * loss(&b) + 1e-10);
    }

    #[test]
    fn bias_test_p_values_are_probabilities(seed in any::<u64>(), n in 5usize..60, scale in 1e-6f64..1e3) {
        let mut r = rng_for(seed, &[2]);
        let regs = normal_matrix(n, 2, &mut r);
        let nu: Vec<f64> = (0..n).map(|_| scale * gauss(&mut r)).collect();
        for se_kind in [SeKind::Classical, SeKind::HcRobust] {
            let opts = BiasTestOptions { intercept: true, se_kind };
            let res = diagnose::bias_test_regressors(&nu, &regs, &opts).unwrap();
            for p in &res.p_values {
                prop_assert!((0.0..=1.0).contains(p));
            }
        }
    }

    #[test]
    fn minimum_detectable_bias_is_monotone(
        se in 1e-4f64..10.0,
        k in 1.01f64..3.0,
        power in 0.5f64..0.94,
        alpha in 0.01f64..0.5,
    ) {
        let mdb = |s, p, a| diagnose::minimum_detectable_bias(s, p, a).unwrap();
        let base = mdb(se, power, alpha);
        prop_assert!(base > 0.0);
        prop_assert!(mdb(se * k, power, alpha) > base);
        prop_assert!(mdb(se, power, alpha * 0.9) > base);
        prop_assert!(mdb(se, power + 0.05, alpha) > base);
    }

    #[test]
    fn correction_is_exact_subtraction(seed in any::<u64>()) {
        let mut r = rng_for(seed, &[3]);
        let n = 30;
        let x = normal_matrix(n, 1, &mut r);
        let design = DesignMatrix::from_regressors(&x, true).unwrap();
        let y = normal_vector(n, &mut r);
        let fit = regress::ols_fit(&design, &y).unwrap();
        let nu: Vec<f64> = (0..n).map(|_| gauss(&mut r)).collect();
        let bt = diagnose::bias_test(&nu, &design, SeKind::Classical).unwrap();
        let c = diagnose::bias_correct(&fit, &bt, 1).unwrap();
        prop_assert_eq!(c.beta_corrected, c.beta_naive - c.gamma_hat);
        // adding back is exact up to the rounding of one subtraction
        let back = c.beta_corrected + c.gamma_hat;
        prop_assert!((back - c.beta_naive).abs() <= 2.0 * f64::EPSILON * c.beta_naive.abs().max(c.gamma_hat.abs()));
    }

    #[test]
    fn covariance_penalty_ignores_constant_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut r = rng_for(seed, &[4]);
        let n = 25;
        let cov = normal_matrix(n, 1, &mut r);
        let nu = normal_vector(n, &mut r);
        let spec = AdversarySpec::new(AdversaryFamily::CovariancePenalty, 1.0, 0);
        let design = AdversaryDesign::new(&cov, &spec).unwrap();
        let st = AdversaryState::new(&design);
        let a = adversary::adversary_loss(&st, &design, &nu).unwrap();
        let b = adversary::adversary_loss(&st, &design, &nu.add_scalar(shift)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs() + shift.abs()));
    }

    #[test]
    fn projection_is_symmetric_and_idempotent(seed in any::<u64>(), n in 6usize..40, p in 1usize..5) {
        let mut r = rng_for(seed, &[5]);
        let x = normal_matrix(n, p, &mut r);
        let d = DesignMatrix::from_regressors(&x, true).unwrap();
        let pm = regress::projection_matrix(&d).unwrap();
        prop_assert!(max_abs(&(&pm * &pm - &pm)) <= 1e-8);
        prop_assert!(max_abs(&(&pm - pm.transpose())) <= 1e-8);
    }

    #[test]
    fn fwl_reproduces_the_full_regression(seed in any::<u64>()) {
        let mut r = rng_for(seed, &[6]);
        let n = 20;
        let x = normal_matrix(n, 3, &mut r);
        let y = normal_vector(n, &mut r);
        let full = DesignMatrix::from_regressors(&x, true).unwrap();
        let beta = regress::ols_fit(&full, &y).unwrap().coefficients[1];
        let controls = DesignMatrix::from_regressors(&x.columns(1, 2).into_owned(), true).unwrap();
        let yt = regress::fwl_residualize_vec(&y, &controls).unwrap();
        let xt = regress::fwl_residualize_vec(&x.column(0).into_owned(), &controls).unwrap();
        let short = DesignMatrix::from_regressors(&DMatrix::from_column_slice(n, 1, xt.as_slice()), false).unwrap();
        let b = regress::ols_fit(&short, &yt).unwrap().coefficients[0];
        prop_assert!((beta - b).abs() <= 1e-8 * (1.0 + beta.abs()));
    }

    #[test]
    fn tsls_equals_ils_with_one_instrument(seed in any::<u64>()) {
        let mut r = rng_for(seed, &[7]);
        let n = 40;
        let mut t = normal_matrix(n, 3, &mut r);
        for i in 0..n {
            t[(i, 0)] += 1.5 * t[(i, 2)] + 0.5 * t[(i, 1)];
        }
        let y = DVector::from_fn(n, |i, _| 0.7 * t[(i, 0)] - 0.3 * t[(i, 1)]) + normal_vector(n, &mut r);
        let spec = IvSpec { treatment_col: 0, control_cols: vec![1], instrument_cols: vec![2] };
        let a = regress::tsls_fit(&y, &t, &spec).unwrap().treatment_coefficient;
        let b = regress::ils_fit(&y, &t, &spec).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
    }

    #[test]
    fn closed_form_adversary_equals_bias_test(seed in any::<u64>()) {
        let mut r = rng_for(seed, &[8]);
        let n = 18;
        let cov = normal_matrix(n, 1, &mut r);
        let nu = normal_vector(n, &mut r);
        let spec = AdversarySpec::new(AdversaryFamily::Slr, 1.0, 0);
        let design = AdversaryDesign::new(&cov, &spec).unwrap();
        let st = adversary::adversary_step(&AdversaryState::new(&design), &spec, &design, &nu).unwrap();
        let bt = diagnose::bias_test_regressors(nu.as_slice(), &cov, &BiasTestOptions::default()).unwrap();
        prop_assert!((st.gamma[1] - bt.gamma(0).unwrap()).abs() <= 1e-12 * (1.0 + st.gamma[1].abs()));
        // (1/N)(ν'ν - ν'Pν) = (1/N)‖ν - Xγ‖²
        let pm = design.projection().unwrap();
        let identity = (nu.dot(&nu) - nu.dot(&(&pm * &nu))) / n as f64;
        let loss = adversary::adversary_loss(&st, &design, &nu).unwrap();
        prop_assert!((identity - loss).abs() <= 1e-10 * loss.abs().max(1e-300));
    }
}

/// Univariate regressor without intercept, as in the proof.
fn slope(x: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    x.dot(nu) / x.dot(x)
}

fn adversarial_loss(pm: &DMatrix<f64>, nu: &DVector<f64>) -> f64 {
    nu.dot(nu) - nu.dot(&(pm * nu))
}

/// Rotates `nu` by angle `theta` towards `dir` within its norm sphere.
fn rotate(nu: &DVector<f64>, dir: &DVector<f64>, theta: f64) -> DVector<f64> {
    let norm = nu.norm();
    let u = nu / norm;
    let mut t = dir - &u * u.dot(dir);
    t /= t.norm();
    (&u * theta.cos() + t * theta.sin()) * norm
}

#[test]
fn rising_adversary_loss_on_the_sphere_shrinks_the_bias() {
    let mut holds = 0;
    for k in 0..100 {
        let mut r = rng_for(11, &[k]);
        let n = 8 + (k as usize % 20);
        let x = normal_vector(n, &mut r);
        let d = DesignMatrix::from_regressors(&DMatrix::from_column_slice(n, 1, x.as_slice()), false).unwrap();
        let pm = regress::projection_matrix(&d).unwrap();
        let nu = normal_vector(n, &mut r) + &x * (0.5 * gauss(&mut r));
        let dir = normal_vector(n, &mut r);
        let mut theta = 0.05 + 0.3 * r.random::<f64>();
        let mut next = rotate(&nu, &dir, theta);
        for _ in 0..60 {
            if adversarial_loss(&pm, &next) > adversarial_loss(&pm, &nu) {
                break;
            }
            let flipped = rotate(&nu, &-&dir, theta);
            if adversarial_loss(&pm, &flipped) > adversarial_loss(&pm, &nu) {
                next = flipped;
                break;
            }
            theta *= 0.5;
            next = rotate(&nu, &dir, theta);
        }
        assert!((next.norm() - nu.norm()).abs() < 1e-10 * nu.norm());
        if adversarial_loss(&pm, &next) > adversarial_loss(&pm, &nu) && slope(&x, &next).abs() < slope(&x, &nu).abs() {
            holds += 1;
        }
    }
    assert_eq!(holds, 100);
}

#[test]
fn gradient_ascent_on_the_sphere_shrinks_intercept_and_slope() {
    // With the default `[1, x]` design the tangent gradient direction scales Pν.
    for k in 0..100 {
        let mut r = rng_for(12, &[k]);
        let n = 10 + (k as usize % 15);
        let cov = normal_matrix(n, 1, &mut r);
        let spec = AdversarySpec::new(AdversaryFamily::Slr, 1.0, 0);
        let design = AdversaryDesign::new(&cov, &spec).unwrap();
        let pm = design.projection().unwrap();
        let nu = normal_vector(n, &mut r).add_scalar(gauss(&mut r));
        let next = rotate(&nu, &(&nu - &pm * &nu), 0.01);
        let g = |v: &DVector<f64>| {
            adversary::adversary_step(&AdversaryState::new(&design), &spec, &design, v)
                .unwrap()
                .gamma
        };
        assert!(adversarial_loss(&pm, &next) > adversarial_loss(&pm, &nu));
        let (g0, g1) = (g(&nu), g(&next));
        assert!(g1[1].abs() < g0[1].abs());
        assert!(g1[0].abs() < g0[0].abs());
    }
}
