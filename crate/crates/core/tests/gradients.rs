//! Analytic gradients against central differences on a small encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucl_core::losses::{barlow_twins_loss, simsiam_loss, simsiam_objective, Centering, NormGuard};
use ucl_core::models::{ArchConfig, BackboneConfig, EncoderBundle, Mode, PredictorConfig, ProjectorConfig};
use ucl_core::strategies::SiState;
use ucl_core::testing::{central_difference, central_difference_kinks, rel_error, seeded_tensor};
use ucl_core::{Graph, Tensor};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn toy(seed: u64, predictor: bool) -> EncoderBundle {
    let cfg = ArchConfig {
        backbone: BackboneConfig::Mlp { hidden: 6, out: 5 },
        input_channels: 1,
        input_size: 2,
        projector: ProjectorConfig { layers: 2, hidden: 6, out: 4, final_norm: true },
        predictor: predictor.then_some(PredictorConfig { hidden: 3 }),
        init_seed: seed,
        ..ArchConfig::default()
    };
    EncoderBundle::new(&cfg).unwrap()
}

/// Most coordinates a trial may drop as ReLU kinks before it counts as a
/// failure.
const MAX_KINKS: usize = 2;

/// Compares the tape's parameter gradient with central differences,
/// skipping coordinates whose finite difference straddles a ReLU kink.
fn check_params(bundle: &EncoderBundle, loss: impl Fn(&EncoderBundle) -> (f64, Vec<f64>)) -> f64 {
    let (_, analytic) = loss(bundle);
    let theta = Tensor::from_vec(&[analytic.len()], bundle.parameter_vector().values).unwrap();
    let (numeric, kinks) = central_difference_kinks(&theta, H, 1e-2, |t| {
        let mut b = bundle.clone();
        b.load_parameter_vector(&ucl_core::ParamVector { values: t.data().to_vec() }).unwrap();
        loss(&b).0
    });
    assert!(kinks.iter().filter(|&&k| k).count() <= MAX_KINKS, "too many kinks");
    let keep = |v: &[f64]| v.iter().zip(&kinks).filter(|(_, &k)| !k).map(|(x, _)| *x).collect::<Vec<_>>();
    rel_error(&keep(&analytic), &keep(&numeric))
}

fn flat(bundle: &EncoderBundle, grads: Vec<Option<Tensor>>) -> Vec<f64> {
    let mut out = Vec::new();
    for id in bundle.store.trainable_ids() {
        match &grads[id.index()] {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat_n(0.0, bundle.store.get(id).len())),
        }
    }
    out
}

/// `sg` only changes the gradient, so the numeric side holds the targets at
/// their unperturbed values.
#[test]
fn simsiam_parameter_gradients() {
    for trial in 0..20u64 {
        let bundle = toy(trial, true);
        let v1 = seeded_tensor(&[8, 1, 2, 2], 100 + trial);
        let v2 = seeded_tensor(&[8, 1, 2, 2], 200 + trial);
        let targets = {
            let mut g = bundle.graph();
            let (x1, x2) = (g.input(v1.clone()), g.input(v2.clone()));
            let t = simsiam_loss(&bundle, &mut g, x1, x2, NormGuard::default()).unwrap();
            (g.value(t.z1).clone(), g.value(t.z2).clone())
        };
        let analytic = {
            let mut g = bundle.graph();
            let (x1, x2) = (g.input(v1.clone()), g.input(v2.clone()));
            let t = simsiam_loss(&bundle, &mut g, x1, x2, NormGuard::default()).unwrap();
            flat(&bundle, g.backward(t.loss).unwrap().into_param_grads())
        };
        let err = check_params(&bundle, |b| {
            let mut g = b.graph();
            let mut branch = |v: &Tensor| {
                let x = g.input(v.clone());
                let f = b.backbone(&mut g, x, Mode::Train).unwrap();
                let z = b.project(&mut g, f, Mode::Train).unwrap();
                b.predict(&mut g, z, Mode::Train).unwrap()
            };
            let (p1, p2) = (branch(&v1), branch(&v2));
            let (z1, z2) = (g.input(targets.0.clone()), g.input(targets.1.clone()));
            let l = simsiam_objective(&mut g, p1, z1, p2, z2, NormGuard::default()).unwrap();
            (g.value(l).item(), analytic.clone())
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn barlow_parameter_gradients() {
    for trial in 0..20u64 {
        let bundle = toy(trial, false);
        let v1 = seeded_tensor(&[6, 1, 2, 2], 300 + trial);
        let v2 = seeded_tensor(&[6, 1, 2, 2], 400 + trial);
        let err = check_params(&bundle, |b| {
            let mut g = b.graph();
            let (x1, x2) = (g.input(v1.clone()), g.input(v2.clone()));
            let t = barlow_twins_loss(b, &mut g, x1, x2, 0.005, Centering::Centered, NormGuard::default()).unwrap();
            (t.output.loss, flat(b, g.backward(t.loss).unwrap().into_param_grads()))
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn si_penalty_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = rng.random_range(1..40);
        let star: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut si = SiState::new(rng.random_range(0.01..10.0), 1.0, &star).unwrap();
        si.omega = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let theta = Tensor::from_vec(&[n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let analytic = si.penalty_grad(theta.data()).unwrap();
        let numeric = central_difference(&theta, H, |t| si.penalty(t.data()).unwrap());
        assert!(rel_error(&analytic, &numeric) < TOL);
    }
}

#[test]
fn stop_gradient_blocks_target_branch() {
    let mut g = Graph::new();
    let p1 = g.input_with_grad(seeded_tensor(&[3, 4], 1));
    let z1 = g.input_with_grad(seeded_tensor(&[3, 4], 2));
    let p2 = g.input_with_grad(seeded_tensor(&[3, 4], 3));
    let z2 = g.input_with_grad(seeded_tensor(&[3, 4], 4));
    let loss = simsiam_objective(&mut g, p1, z1, p2, z2, NormGuard::Strict).unwrap();
    let grads = g.backward(loss).unwrap();
    for z in [z1, z2] {
        assert!(grads.of(z).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }
    for p in [p1, p2] {
        assert!(grads.of(p).unwrap().data().iter().any(|&v| v != 0.0));
    }
}
