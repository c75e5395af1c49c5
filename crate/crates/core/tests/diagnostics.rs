use debias_core::diagnose::{self, BiasTestOptions, PowerOptions};
use debias_core::regress::{self, DesignMatrix, IvSpec, SeKind};
use debias_core::rng::{rng_for, Rng};
use debias_core::stats;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

fn gauss(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

fn within_mc(mean: f64, target: f64, sd: f64, draws: usize) -> bool {
    (mean - target).abs() < 3.0 * sd / (draws as f64).sqrt()
}

#[test]
fn bias_test_is_unbiased_and_covers() {
    let (draws, n, gamma) = (500, 200, 0.3);
    let mut est = Vec::with_capacity(draws);
    let mut covered = 0;
    let mut rejected_null = 0;
    for d in 0..draws {
        let mut r = rng_for(1, &[d as u64]);
        let x: Vec<f64> = (0..n).map(|_| gauss(&mut r)).collect();
        let e: Vec<f64> = (0..n).map(|_| gauss(&mut r)).collect();
        let nu: Vec<f64> = x.iter().zip(&e).map(|(x, e)| 0.1 + gamma * x + e).collect();
        let bt = diagnose::bias_test_regressors(&nu, &column(&x), &BiasTestOptions::default()).unwrap();
        let (g, se) = (bt.gamma(0).unwrap(), bt.std_error(0).unwrap());
        est.push(g);
        if (g - gamma).abs() <= 1.959964 * se {
            covered += 1;
        }
        let null = diagnose::bias_test_regressors(&e, &column(&x), &BiasTestOptions::default()).unwrap();
        if null.rejects(0, 0.05).unwrap() {
            rejected_null += 1;
        }
    }
    assert!(within_mc(stats::mean(&est), gamma, stats::std_dev(&est), draws));
    let band = 3.0 * (0.05f64 * 0.95 / draws as f64).sqrt();
    assert!((covered as f64 / draws as f64 - 0.95).abs() < band, "coverage {covered}/{draws}");
    assert!((rejected_null as f64 / draws as f64 - 0.05).abs() < band, "size {rejected_null}/{draws}");
}

#[test]
fn robust_errors_cover_under_heteroskedasticity() {
    let (draws, n) = (500, 300);
    let mut covered = [0usize; 2];
    for d in 0..draws {
        let mut r = rng_for(2, &[d as u64]);
        let x: Vec<f64> = (0..n).map(|_| gauss(&mut r)).collect();
        let nu: Vec<f64> = x.iter().map(|x| 0.2 * x + (0.2 + x * x) * gauss(&mut r)).collect();
        for (k, se_kind) in [SeKind::Classical, SeKind::HcRobust].into_iter().enumerate() {
            let opts = BiasTestOptions { intercept: true, se_kind };
            let bt = diagnose::bias_test_regressors(&nu, &column(&x), &opts).unwrap();
            if (bt.gamma(0).unwrap() - 0.2).abs() <= 1.959964 * bt.std_error(0).unwrap() {
                covered[k] += 1;
            }
        }
    }
    let rate = |c: usize| c as f64 / draws as f64;
    assert!((rate(covered[1]) - 0.95).abs() < 0.03, "robust coverage {}", rate(covered[1]));
    assert!(rate(covered[0]) < rate(covered[1]), "classical {} robust {}", rate(covered[0]), rate(covered[1]));
}

#[test]
fn minimum_detectable_bias_matches_the_normal_formula() {
    // z_{0.975} + z_{0.8}
    let k = 1.959963984540054 + 0.8416212335729143;
    for se in [1e-3, 0.01, 0.5] {
        let m = diagnose::minimum_detectable_bias(se, 0.8, 0.05).unwrap();
        assert!((m - k * se).abs() < 1e-9 * se.max(1.0), "se {se}: {m}");
    }
    assert!(diagnose::minimum_detectable_bias(0.0, 0.8, 0.05).is_err());
    assert!(diagnose::minimum_detectable_bias(0.01, 1.0, 0.05).is_err());
}

#[test]
fn power_curve_scales_with_root_sample_size() {
    let n = 40_000;
    let mut r = rng_for(3, &[]);
    let x: Vec<f64> = (0..n).map(|_| gauss(&mut r)).collect();
    let nu: Vec<f64> = x.iter().map(|x| 0.02 * x + 0.2 * gauss(&mut r)).collect();
    let sizes = [1000, 2000, 10_000];
    let curve = diagnose::power_curve(&nu, &column(&x), &sizes, 40, 4, &PowerOptions::default()).unwrap();
    let r2 = curve.mdb[0] / curve.mdb[1];
    let r10 = curve.mdb[0] / curve.mdb[2];
    assert!((r2 / 2f64.sqrt() - 1.0).abs() < 0.05, "ratio {r2}");
    assert!((r10 / 10f64.sqrt() - 1.0).abs() < 0.05, "ratio {r10}");
    assert!((curve.true_mdb[0] / curve.true_mdb[2] - 10f64.sqrt()).abs() < 1e-12);
    assert!(curve.mdb.windows(2).all(|w| w[1] < w[0]));
    for (m, t) in curve.mdb.iter().zip(&curve.true_mdb) {
        assert!((m / t - 1.0).abs() < 0.05, "subset mean {m} vs scaled {t}");
    }
}

/// Evaluation set with only predictions, labeled set with both.
fn correction_draw(seed: u64) -> (f64, f64, f64) {
    let (n_eval, n_lab, beta, gamma) = (3000, 1000, 1.0, 0.3);
    let mut r = rng_for(5, &[seed]);
    let mut simulate = |n: usize| {
        let x: Vec<f64> = (0..n).map(|_| gauss(&mut r)).collect();
        let y: Vec<f64> = x.iter().map(|x| beta * x + gauss(&mut r)).collect();
        let yhat: Vec<f64> = x.iter().zip(&y).map(|(x, y)| y + gamma * x + 0.5 * gauss(&mut r)).collect();
        (x, y, yhat)
    };
    let (xe, _, yhat_e) = simulate(n_eval);
    let (xl, yl, yhat_l) = simulate(n_lab);
    let fit = regress::ols_fit(&DesignMatrix::from_columns(&[&xe], true).unwrap(), &DVector::from_vec(yhat_e)).unwrap();
    let nu: Vec<f64> = yhat_l.iter().zip(&yl).map(|(p, y)| p - y).collect();
    let bt = diagnose::bias_test_regressors(&nu, &column(&xl), &BiasTestOptions::default()).unwrap();
    let c = diagnose::bias_correct(&fit, &bt, 1).unwrap();
    (c.beta_naive, c.beta_corrected, c.se_corrected)
}

#[test]
fn correction_recovers_the_true_slope() {
    let draws = 300usize;
    let mut naive = Vec::new();
    let mut corrected = Vec::new();
    let mut covered = 0;
    for d in 0..draws {
        let (b0, b1, se) = correction_draw(d as u64);
        naive.push(b0);
        corrected.push(b1);
        if (b1 - 1.0).abs() <= 1.959964 * se {
            covered += 1;
        }
    }
    assert!((stats::mean(&naive) - 1.3).abs() < 0.01);
    assert!(within_mc(stats::mean(&corrected), 1.0, stats::std_dev(&corrected), draws));
    let rate = covered as f64 / draws as f64;
    assert!((rate - 0.95).abs() < 3.0 * (0.05f64 * 0.95 / draws as f64).sqrt(), "coverage {rate}");
}

#[test]
fn two_stage_least_squares_recovers_an_endogenous_slope() {
    let (draws, n, beta) = (200usize, 2000, 1.5);
    let mut tsls = Vec::new();
    let mut ols = Vec::new();
    for d in 0..draws {
        let mut r = rng_for(6, &[d as u64]);
        let mut table = DMatrix::zeros(n, 3);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let (z, w, u) = (gauss(&mut r), gauss(&mut r), gauss(&mut r));
            let x = 0.7 * z + 0.5 * w + u + 0.3 * gauss(&mut r);
            table[(i, 0)] = x;
            table[(i, 1)] = w;
            table[(i, 2)] = z;
            y[i] = beta * x + 0.8 * w + u + 0.5 * gauss(&mut r);
        }
        let spec = IvSpec {
            treatment_col: 0,
            control_cols: vec![1],
            instrument_cols: vec![2],
        };
        let fit = regress::tsls_fit(&y, &table, &spec).unwrap();
        assert!(!fit.weak_instrument);
        tsls.push(fit.treatment_coefficient);
        let x: Vec<f64> = table.column(0).iter().copied().collect();
        let w: Vec<f64> = table.column(1).iter().copied().collect();
        let o = regress::ols_fit(&DesignMatrix::from_columns(&[&x, &w], true).unwrap(), &y).unwrap();
        ols.push(o.coefficient(1).unwrap());
    }
    assert!(within_mc(stats::mean(&tsls), beta, stats::std_dev(&tsls), draws));
    assert!(stats::mean(&ols) > beta + 0.3);
}
