//! Finite-difference checks of every backward pass.

use bpnn::analysis::{grad_check_layer, grad_check_model, relative_error, synthetic_batch, GradCheckOptions};
use bpnn::data::Targets;
use bpnn::layers::{
    ActivationLayer, Conv2d, ConvSpec, Dense, Embedding, GlobalAvgPool, Layer, Lstm, LstmState, MaxPool, Module,
    Padding, ProjectionMode, Softmax,
};
use bpnn::projections::{bilinear_backward, Activation, BilinearProjection};
use bpnn::{ArchitectureConfig, Model, Rng, Tensor};

const STD: f64 = 0.5;

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn opts(tolerance: f64) -> GradCheckOptions {
    GradCheckOptions { tolerance, ..GradCheckOptions::default() }
}

fn check(mut layer: Layer, x: &Tensor, tolerance: f64, seed: u64) -> f64 {
    let report = grad_check_layer(&mut layer, x, &mut Rng::seed(seed), &opts(tolerance)).unwrap();
    assert!(report.passed(), "{:#?}", report.checks);
    report.worst()
}

#[test]
fn bilinear_projection_matches_half_squared_error() {
    // J = 1/2 |phi(w1 x w2 + b) - y|^2 with d = k = (2, 2)
    let mut rng = Rng::seed(17);
    for phi in [Activation::Identity, Activation::Sigmoid, Activation::Tanh] {
        // moderate scale keeps tanh/sigmoid away from saturation
        let mut p = BilinearProjection::random(&mut rng, (2, 2), (2, 2), STD).unwrap();
        p.bias = normal(&mut rng, &[2, 2]).scale(STD);
        let x = normal(&mut rng, &[2, 2]);
        let y = normal(&mut rng, &[2, 2]);
        let output = |p: &BilinearProjection, x: &Tensor| bpnn::projections::bilinear_forward(p, x, phi).unwrap();
        // J(h+) - J(h-) = 1/2 sum (h+ - h-)(h+ + h- - 2y), free of cancellation
        let loss_difference = |hp: &Tensor, hm: &Tensor| -> f64 {
            let terms = hp.data().iter().zip(hm.data()).zip(y.data());
            0.5 * terms.map(|((p, m), y)| (p - m) * (p + m - 2.0 * y)).sum::<f64>()
        };
        let h = bpnn::projections::bilinear_forward(&p, &x, phi).unwrap();
        let grads = bilinear_backward(&p, &x, phi, &h.sub(&y).unwrap()).unwrap();
        let step = 1e-6;
        let perturbed = |which: usize, j: usize, d: f64| {
            let mut q = p.clone();
            let mut xq = x.clone();
            match which {
                0 => q.w1.data_mut()[j] += d,
                1 => q.w2.data_mut()[j] += d,
                2 => q.bias.data_mut()[j] += d,
                _ => xq.data_mut()[j] += d,
            }
            output(&q, &xq)
        };
        for (which, analytic) in [&grads.w1, &grads.w2, &grads.bias, &grads.input].into_iter().enumerate() {
            for j in 0..4 {
                let numeric = loss_difference(&perturbed(which, j, step), &perturbed(which, j, -step)) / (2.0 * step);
                let rel = relative_error(analytic.data()[j], numeric);
                assert!(rel <= 1e-5, "{} tensor {which} entry {j}: {rel:e} a={} n={numeric}", phi.name(), analytic.data()[j]);
            }
        }
    }
}

#[test]
fn dense_every_activation_and_mode() {
    let mut rng = Rng::seed(1);
    for phi in [Activation::Identity, Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
        for (mode, alpha) in [(ProjectionMode::Bilinear, 1), (ProjectionMode::Bilinear, 3), (ProjectionMode::Full, 1)] {
            let layer = Dense::new(&mut rng, mode, 12, 8, alpha, phi, STD).unwrap();
            let x = normal(&mut rng, &[4, 12]);
            check(Layer::Dense(layer), &x, 1e-5, 2);
        }
    }
}

#[test]
fn degenerate_prime_dimensions() {
    let mut rng = Rng::seed(3);
    let layer = Dense::new(&mut rng, ProjectionMode::Bilinear, 7, 5, 1, Activation::Tanh, STD).unwrap();
    check(Layer::Dense(layer), &normal(&mut rng, &[3, 7]), 1e-5, 4);
}

#[test]
fn conv_geometries() {
    let mut rng = Rng::seed(5);
    for (kernel, stride, padding, alpha, mode) in [
        ((3, 3), 1, Padding::Same, 1, ProjectionMode::Bilinear),
        ((3, 3), 2, Padding::Same, 2, ProjectionMode::Bilinear),
        ((2, 3), 1, Padding::Valid, 1, ProjectionMode::Bilinear),
        ((1, 1), 1, Padding::Valid, 2, ProjectionMode::Bilinear),
        ((3, 2), 2, Padding::Valid, 1, ProjectionMode::Full),
    ] {
        let spec = ConvSpec::new(kernel, stride, padding);
        let layer = Conv2d::new(&mut rng, mode, 3, 6, spec, alpha, Activation::Tanh, STD).unwrap();
        let x = normal(&mut rng, &[2, 5, 6, 3]);
        check(Layer::Conv2d(layer), &x, 1e-5, 6);
    }
}

#[test]
fn embedding_both_modes() {
    let mut rng = Rng::seed(7);
    for (mode, alpha) in [(ProjectionMode::Bilinear, 2), (ProjectionMode::Full, 1)] {
        let layer = Embedding::new(&mut rng, mode, 10, 6, alpha, STD).unwrap();
        let ids: Vec<f64> = (0..12).map(|_| rng.below(10) as f64).collect();
        let x = Tensor::new(vec![3, 4], ids).unwrap();
        check(Layer::Embedding(layer), &x, 1e-5, 8);
    }
}

#[test]
fn lstm_length_five_sequences() {
    let mut rng = Rng::seed(9);
    for (mode, hidden, alpha, seqs) in [
        (ProjectionMode::Bilinear, 4, 2, true),
        (ProjectionMode::Bilinear, 9, 1, false),
        (ProjectionMode::Full, 9, 1, true),
        (ProjectionMode::Full, 5, 1, false),
    ] {
        let layer = Lstm::new(&mut rng, mode, 6, hidden, alpha, seqs, STD).unwrap();
        assert!(layer.hidden() <= 9);
        let x = normal(&mut rng, &[2, 5, 6]);
        check(Layer::Lstm(layer), &x, 1e-4, 10);
    }
}

#[test]
fn lstm_single_step_matches_step_function() {
    let mut rng = Rng::seed(11);
    let mut layer = Lstm::new(&mut rng, ProjectionMode::Bilinear, 4, 4, 1, false, STD).unwrap();
    let x = normal(&mut rng, &[3, 1, 4]);
    let seq = layer.forward(&x).unwrap();
    let state: LstmState = layer.step(&x.reshape(&[3, 4]).unwrap(), &layer.zero_state(3)).unwrap();
    assert!(seq.max_abs_diff(&state.h).unwrap() <= 1e-15);
    layer.clear_cache();
    check(Layer::Lstm(layer), &x, 1e-4, 12);
}

#[test]
fn lstm_gradient_reaches_first_input() {
    let mut rng = Rng::seed(13);
    let mut layer = Layer::Lstm(Lstm::new(&mut rng, ProjectionMode::Bilinear, 4, 4, 1, false, STD).unwrap());
    let x = normal(&mut rng, &[1, 3, 4]);
    let report = grad_check_layer(&mut layer, &x, &mut Rng::seed(14), &opts(1e-4)).unwrap();
    let input = report.checks.iter().find(|c| c.tensor == "input").unwrap();
    assert_eq!(input.probes, 12);
    assert!(input.worst <= 1e-4);
    // the first time step does influence the final state
    let y = layer.forward(&x).unwrap();
    let dx = layer.backward(&Tensor::ones(y.shape())).unwrap();
    assert!(dx.data()[..4].iter().any(|g| g.abs() > 1e-6));
}

#[test]
fn parameter_free_layers() {
    let mut rng = Rng::seed(15);
    let x = normal(&mut rng, &[2, 4, 6, 3]);
    check(Layer::MaxPool(MaxPool::default()), &x, 1e-5, 16);
    check(Layer::GlobalAvgPool(GlobalAvgPool::default()), &x, 1e-5, 16);
    let x = normal(&mut rng, &[3, 5]);
    check(Layer::Softmax(Softmax::default()), &x, 1e-5, 16);
    for phi in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
        check(Layer::Activation(ActivationLayer::new(phi)), &x, 1e-5, 16);
    }
}

#[test]
fn relu_kink_is_excluded_and_flagged() {
    let x = Tensor::from_f64(&[1, 4], &[0.5, 0.0, -0.5, 2.0]).unwrap();
    let mut layer = Layer::Activation(ActivationLayer::new(Activation::Relu));
    let report = grad_check_layer(&mut layer, &x, &mut Rng::seed(0), &opts(1e-5)).unwrap();
    assert!(report.passed());
    assert_eq!(report.excluded(), 1);
    assert_eq!(report.checks[0].probes, 3);
}

fn toy_network(loss: &str) -> Model {
    let text = format!(
        r#"{{"seed": 21, "input": [12], "init_std": 0.5, "loss": "{loss}", "layers": [
            {{"type": "dense", "out": 6, "projection": "bilinear", "activation": "sigmoid"}},
            {{"type": "relu"}},
            {{"type": "dense", "out": 3}},
            {{"type": "softmax"}}]}}"#
    );
    Model::build(&ArchitectureConfig::from_json(&text).unwrap()).unwrap()
}

#[test]
fn toy_network_cross_entropy() {
    let mut model = toy_network("cross_entropy");
    let mut rng = Rng::seed(22);
    let x = normal(&mut rng, &[5, 12]);
    let targets = Targets::Classes { labels: vec![0, 1, 2, 1, 0], classes: 3 };
    let report = grad_check_model(&mut model, &x, &targets, &opts(1e-5)).unwrap();
    assert!(report.passed(), "{:#?}", report.checks);
    assert_eq!(report.checks.len(), 5);
}

#[test]
fn toy_network_mse_through_softmax() {
    let mut model = toy_network("mse");
    let mut rng = Rng::seed(23);
    let (x, targets) = synthetic_batch(&model, 4, &mut rng).unwrap();
    let report = grad_check_model(&mut model, &x, &targets, &opts(1e-5)).unwrap();
    assert!(report.passed(), "{:#?}", report.checks);
}

#[test]
fn linear_layer_with_squared_error_is_near_exact() {
    let text = r#"{"seed": 2, "input": [6], "init_std": 0.5, "loss": "mse",
        "layers": [{"type": "dense", "out": 3}]}"#;
    let mut model: Model = Model::build(&ArchitectureConfig::from_json(text).unwrap()).unwrap();
    let mut rng = Rng::seed(24);
    let (x, targets) = synthetic_batch(&model, 4, &mut rng).unwrap();
    let report = grad_check_model(&mut model, &x, &targets, &opts(1e-8)).unwrap();
    assert!(report.passed(), "{:#?}", report.checks);
}

/// Every shipped architecture, end to end, at a well-conditioned scale.
#[test]
fn shipped_architectures_end_to_end() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let mut config = ArchitectureConfig::from_path(&path).unwrap();
        config.init_std = STD;
        let mut model: Model = Model::build(&config).unwrap();
        if model.param_count() > 1_000_000 {
            continue; // the 4096-wide full layer is covered per layer by the CLI tests
        }
        let mut rng = Rng::seed(25);
        let (x, targets) = synthetic_batch(&model, 2, &mut rng).unwrap();
        let o = GradCheckOptions { max_probes: Some(48), ..opts(1e-5) };
        let report = grad_check_model(&mut model, &x, &targets, &o).unwrap();
        assert!(report.passed(), "{}: {:#?}", path.display(), report.per_layer());
        seen += 1;
    }
    assert!(seen >= 6);
}

#[test]
fn layer_trait_objects_agree_with_enum() {
    let mut rng = Rng::seed(26);
    let dense = Dense::new(&mut rng, ProjectionMode::Bilinear, 4, 4, 1, Activation::Identity, STD).unwrap();
    let layer = Layer::Dense(dense.clone());
    assert_eq!(Module::<f64>::param_count(&dense), layer.param_count());
}
