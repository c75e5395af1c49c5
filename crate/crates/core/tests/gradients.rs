use debias_core::adversary::{self, AdversaryDesign, AdversaryFamily, AdversarySpec, AdversaryState};
use debias_core::model::{self, Activation, LossKind, ModelSpec, OutputKind, ParamVector};
use debias_core::rng::rng_for;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const DRAWS: u64 = 20;
const TOL: f64 = 1e-5;

fn step(theta: f64) -> f64 {
    1e-5 * (1.0 + theta.abs())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn normal_matrix(rows: usize, cols: usize, r: &mut debias_core::rng::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

fn random_params(spec: &ModelSpec, r: &mut debias_core::rng::Rng) -> ParamVector {
    let mut p = ParamVector::init(spec, r);
    for v in p.values.iter_mut() {
        *v += 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r);
    }
    p
}

fn labels_for(loss: LossKind, n: usize, r: &mut debias_core::rng::Rng) -> DVector<f64> {
    match loss {
        LossKind::Mse => DVector::from_fn(n, |_, _| StandardNormal.sample(r)),
        LossKind::BinaryCrossEntropy => DVector::from_fn(n, |_, _| r.random::<f64>()),
    }
}

/// Smallest `|z|` over hidden pre-activations; the gradient is undefined
/// at a ReLU kink, so central differences need some room around it.
fn kink_margin(spec: &ModelSpec, params: &ParamVector, x: &DMatrix<f64>) -> f64 {
    if spec.activation != Activation::Relu {
        return f64::INFINITY;
    }
    let layout = spec.layout();
    let mut input = x.clone();
    let mut margin = f64::INFINITY;
    for l in &layout[..layout.len() - 1] {
        let w = DMatrix::from_row_slice(l.fan_out, l.fan_in, &params.values[l.weights..l.bias]);
        let mut z = &input * w.transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(params.values[l.bias + j]);
        }
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        z.apply(|v| *v = v.max(0.0));
        input = z;
    }
    margin
}

fn check_model(spec: ModelSpec, loss: LossKind, tag: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut d = 0u64;
    while accepted < DRAWS {
        let mut r = rng_for(3, &[tag, d]);
        d += 1;
        let n = 7;
        let x = normal_matrix(n, spec.input_dim, &mut r);
        let y = labels_for(loss, n, &mut r);
        let params = random_params(&spec, &mut r);
        if kink_margin(&spec, &params, &x) < 1e-3 {
            continue;
        }
        accepted += 1;
        let (_, grad) = model::loss_and_grad(&spec, &params, &x, &y, loss).unwrap();
        for k in 0..params.len() {
            let h = step(params.values[k]);
            let mut up = params.clone();
            up.values[k] += h;
            let mut dn = params.clone();
            dn.values[k] -= h;
            let lu = model::loss_and_grad(&spec, &up, &x, &y, loss).unwrap().0;
            let ld = model::loss_and_grad(&spec, &dn, &x, &y, loss).unwrap().0;
            worst = worst.max(rel_err(grad[k], (lu - ld) / (2.0 * h)));
        }
    }
    worst
}

fn mlp(output: OutputKind, activation: Activation) -> ModelSpec {
    ModelSpec {
        hidden_dims: (6, 4),
        activation,
        ..ModelSpec::mlp3(3, output)
    }
}

#[test]
fn linear_mse_gradient() {
    let e = check_model(ModelSpec::linear(4), LossKind::Mse, 1);
    assert!(e <= TOL, "max relative error {e:e}");
}

#[test]
fn logistic_mse_gradient() {
    let e = check_model(ModelSpec::logistic(4), LossKind::Mse, 2);
    assert!(e <= TOL, "max relative error {e:e}");
}

#[test]
fn logistic_bce_gradient() {
    let e = check_model(ModelSpec::logistic(4), LossKind::BinaryCrossEntropy, 3);
    assert!(e <= TOL, "max relative error {e:e}");
}

#[test]
fn mlp3_gradients() {
    let cases = [
        (mlp(OutputKind::Real, Activation::Relu), LossKind::Mse),
        (mlp(OutputKind::Real, Activation::Tanh), LossKind::Mse),
        (mlp(OutputKind::Probability, Activation::Relu), LossKind::Mse),
        (mlp(OutputKind::Probability, Activation::Tanh), LossKind::BinaryCrossEntropy),
        (mlp(OutputKind::Probability, Activation::Relu), LossKind::BinaryCrossEntropy),
    ];
    for (i, (spec, loss)) in cases.into_iter().enumerate() {
        let e = check_model(spec, loss, 10 + i as u64);
        assert!(e <= TOL, "case {i}: max relative error {e:e}");
    }
}

fn covariates(n: usize, r: &mut debias_core::rng::Rng) -> DMatrix<f64> {
    // treatment, two controls, one instrument correlated with the treatment
    let mut c = normal_matrix(n, 4, r);
    for i in 0..n {
        c[(i, 0)] += 0.8 * c[(i, 3)] + 0.5 * c[(i, 1)];
    }
    c
}

fn check_adversary(spec: &AdversarySpec, tag: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for d in 0..DRAWS {
        let mut r = rng_for(5, &[tag, d]);
        let n = 12;
        let cov = covariates(n, &mut r);
        let nu = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
        let design = AdversaryDesign::new(&cov, spec).unwrap();
        let state = AdversaryState::new(&design);
        let state = adversary::adversary_step(&state, spec, &design, &nu).unwrap();
        // move away from the adversary's optimum so the gradient is nonzero
        let probe = &nu + DVector::from_fn(n, |_, _| 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r));
        let g = adversary::adversary_grad_wrt_nu(&state, &design, &probe).unwrap();
        for k in 0..n {
            let h = step(probe[k]);
            let mut up = probe.clone();
            up[k] += h;
            let mut dn = probe.clone();
            dn[k] -= h;
            let lu = adversary::adversary_loss(&state, &design, &up).unwrap();
            let ld = adversary::adversary_loss(&state, &design, &dn).unwrap();
            worst = worst.max(rel_err(g[k], (lu - ld) / (2.0 * h)));
        }
    }
    worst
}

#[test]
fn adversary_gradients_wrt_errors() {
    let specs = [
        AdversarySpec::new(AdversaryFamily::Slr, 1.0, 0),
        AdversarySpec::new(AdversaryFamily::CovariancePenalty, 1.0, 0),
        AdversarySpec::new(AdversaryFamily::FwlSlr, 1.0, 0).with_controls(vec![1, 2]),
        AdversarySpec::new(AdversaryFamily::IvSlr, 1.0, 0)
            .with_controls(vec![1, 2])
            .with_instruments(vec![3]),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let e = check_adversary(spec, i as u64);
        assert!(e <= TOL, "{:?}: max relative error {e:e}", spec.family);
    }
}

#[test]
fn combined_objective_gradient_through_model() {
    // L_p - α L_a with γ held at its closed-form value, differentiated in ω.
    let spec = ModelSpec {
        hidden_dims: (5, 3),
        activation: Activation::Tanh,
        ..ModelSpec::mlp3(3, OutputKind::Probability)
    };
    let adv = AdversarySpec::new(AdversaryFamily::Slr, 0.7, 0);
    let mut worst: f64 = 0.0;
    for d in 0..DRAWS {
        let mut r = rng_for(9, &[d]);
        let n = 10;
        let x = normal_matrix(n, 3, &mut r);
        let y = DVector::from_fn(n, |_, _| r.random::<f64>());
        let cov = covariates(n, &mut r);
        let params = random_params(&spec, &mut r);
        let design = AdversaryDesign::new(&cov, &adv).unwrap();
        let nu0 = model::predict_error(&spec, &params, &x, &y).unwrap();
        let state = adversary::adversary_step(&AdversaryState::new(&design), &adv, &design, &nu0).unwrap();
        let objective = |p: &ParamVector| {
            let pred = model::forward(&spec, p, &x).unwrap();
            let (lp, _) = model::loss_from_predictions(LossKind::Mse, &pred, &y).unwrap();
            let la = adversary::adversary_loss(&state, &design, &(&pred - &y)).unwrap();
            lp - adv.alpha * la
        };
        let cache = model::forward_cached(&spec, &params, &x).unwrap();
        let pred = cache.predictions();
        let (_, mut upstream) = model::loss_from_predictions(LossKind::Mse, &pred, &y).unwrap();
        let ga = adversary::adversary_grad_wrt_nu(&state, &design, &(&pred - &y)).unwrap();
        upstream.axpy(-adv.alpha, &ga, 1.0);
        let grad = model::backward(&spec, &params, &x, &cache, &upstream);
        for k in 0..params.len() {
            let h = step(params.values[k]);
            let mut up = params.clone();
            up.values[k] += h;
            let mut dn = params.clone();
            dn.values[k] -= h;
            worst = worst.max(rel_err(grad[k], (objective(&up) - objective(&dn)) / (2.0 * h)));
        }
    }
    assert!(worst <= TOL, "max relative error {worst:e}");
}

