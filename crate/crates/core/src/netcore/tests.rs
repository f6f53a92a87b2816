//! Unit tests for the model core.
//!
//! Gradient tests compare every analytic derivative against central finite
//! differences; forward tests pin hand-computed values. Instances that put a
//! relu input within the stencil width of its kink are skipped and redrawn,
//! since the disagreement there is an artifact of the stencil.

use rand::Rng;

use super::fd;
use super::*;
use crate::rng;

fn dense_arch(input: usize, hidden: usize, classes: usize, batchnorm: bool) -> ArchSpec {
    let mut layers = vec![LayerSpec::Dense { out: hidden }];
    if batchnorm {
        layers.push(LayerSpec::BatchNorm);
    }
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense { out: classes });
    layers.push(LayerSpec::Softmax);
    ArchSpec {
        input_shape: vec![input],
        layers,
        num_classes: classes,
    }
}

fn conv_arch(channels: usize, side: usize, classes: usize, batchnorm: bool) -> ArchSpec {
    let mut layers = vec![LayerSpec::Conv2d {
        out_channels: 2,
        kernel: 3,
        padding: 1,
    }];
    if batchnorm {
        layers.push(LayerSpec::BatchNorm);
    }
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense { out: classes });
    layers.push(LayerSpec::Softmax);
    ArchSpec {
        input_shape: vec![channels, side, side],
        layers,
        num_classes: classes,
    }
}

fn random_batch(shape: &[usize], n: usize, classes: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed);
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let count: usize = full.iter().product();
    let data: Vec<f64> = (0..count).map(|_| r.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.gen_range(0..classes)).collect();
    Batch::new(Tensor::from_vec(&full, data).unwrap(), labels).unwrap()
}

#[test]
fn forward_matches_hand_computed_two_layer_chain() {
    let arch = dense_arch(2, 2, 2, false);
    let mut model = init_model(&arch, 0).unwrap();
    if let Layer::Dense(d) = &mut model.layers_mut()[0] {
        d.weight = Tensor::from_vec(&[2, 2], vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        d.bias = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
    }
    if let Layer::Dense(d) = &mut model.layers_mut()[2] {
        d.weight = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        d.bias = Tensor::from_vec(&[2], vec![0.0, 0.5]).unwrap();
    }
    let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
    let trace = forward_trace(&model, &x, false).unwrap();
    // Hand chain: z1 = [0.1, 2.3] (positive, relu passes both),
    // z2 = [0.1 - 2.3, 0.05 + 0.575 + 0.5] = [-2.2, 1.125].
    assert!((trace.logits.data()[0] - -2.2).abs() < 1e-12);
    assert!((trace.logits.data()[1] - 1.125).abs() < 1e-12);
    // p0 = 1 / (1 + e^{3.325}), worked out by hand to six figures.
    assert!((trace.output.data()[0] - 0.0347234).abs() < 5e-6);
    assert!((trace.output.data()[0] + trace.output.data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn forward_rows_always_sum_to_one() {
    let arch = dense_arch(3, 8, 5, true);
    let model = init_model(&arch, 3).unwrap();
    let batch = random_batch(&[3], 17, 5, 100);
    for training in [false, true] {
        let p = forward(&model, &batch.inputs, training).unwrap();
        for i in 0..17 {
            let s: f64 = p.data()[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn forward_rejects_bad_shapes_and_nonfinite_inputs() {
    let model = init_model(&dense_arch(4, 4, 2, false), 0).unwrap();
    let wrong = Tensor::zeros(&[2, 3]);
    assert!(forward(&model, &wrong, false).is_err());
    let empty = Tensor::zeros(&[0, 4]);
    assert!(forward(&model, &empty, false).is_err());
    let mut nan = Tensor::zeros(&[1, 4]);
    nan.data_mut()[2] = f64::NAN;
    assert!(forward(&model, &nan, false).is_err());
}

#[test]
fn backward_rejects_out_of_range_labels() {
    let model = init_model(&dense_arch(2, 3, 2, false), 1).unwrap();
    let batch = Batch::new(Tensor::zeros(&[1, 2]), vec![2]).unwrap();
    assert!(backward(&model, &batch, LossKind::CrossEntropy, false).is_err());
}

/// Draws gradient-check instances until one clears the relu kink margin.
fn clean_instance(
    make_arch: impl Fn() -> ArchSpec,
    base_seed: u64,
    n: usize,
) -> (Model, Batch) {
    for attempt in 0..50 {
        let seed = rng::derive(base_seed, "gradcheck", attempt);
        let arch = make_arch();
        let model = init_model(&arch, seed).unwrap();
        let batch = random_batch(&arch.input_shape, n, arch.num_classes, seed ^ 1);
        let train_kink = fd::has_relu_kink(&model, &batch, true, 1e-3).unwrap();
        let eval_kink = fd::has_relu_kink(&model, &batch, false, 1e-3).unwrap();
        if !train_kink && !eval_kink {
            return (model, batch);
        }
    }
    panic!("could not draw a kink-free instance in 50 attempts");
}

#[test]
fn dense_gradients_match_finite_differences() {
    for (i, bn) in [(0u64, false), (1, true), (2, false), (3, true)] {
        let (model, batch) = clean_instance(|| dense_arch(3, 6, 3, bn), 40 + i, 5);
        for training in [false, true] {
            let rep =
                fd::check_param_gradients(&model, &batch, training, 1e-5, 1e-4, 1e-7, 1).unwrap();
            assert!(
                rep.ok(),
                "dense bn={bn} training={training}: {} of {} failed, e.g. {:?}",
                rep.failures.len(),
                rep.checked,
                rep.failures.first()
            );
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for (i, bn) in [(0u64, false), (1, true)] {
        let (model, batch) = clean_instance(|| conv_arch(1, 5, 2, bn), 60 + i, 3);
        for training in [false, true] {
            let rep =
                fd::check_param_gradients(&model, &batch, training, 1e-5, 1e-4, 1e-7, 1).unwrap();
            assert!(
                rep.ok(),
                "conv bn={bn} training={training}: {} of {} failed, e.g. {:?}",
                rep.failures.len(),
                rep.checked,
                rep.failures.first()
            );
        }
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let (model, batch) = clean_instance(|| dense_arch(4, 6, 3, true), 77, 4);
    for training in [false, true] {
        let rep =
            fd::check_input_gradients(&model, &batch, training, 1e-5, 1e-4, 1e-7, 1).unwrap();
        assert!(rep.ok(), "input grads training={training}: {:?}", rep.failures.first());
    }
}

#[test]
fn zero_weight_classifier_has_uniform_residual_bias_gradient() {
    // With a zero final dense layer the logits are all zero, the prediction
    // is uniform, and the cross-entropy bias gradient is exactly
    // (uniform - one_hot(label)) averaged over the batch.
    let arch = ArchSpec {
        input_shape: vec![3],
        layers: vec![LayerSpec::Dense { out: 4 }, LayerSpec::Softmax],
        num_classes: 4,
    };
    let mut model = init_model(&arch, 5).unwrap();
    if let Layer::Dense(d) = &mut model.layers_mut()[0] {
        d.weight = Tensor::zeros(&[4, 3]);
        d.bias = Tensor::zeros(&[4]);
    }
    let batch = Batch::new(
        Tensor::from_vec(&[1, 3], vec![0.3, -0.7, 2.0]).unwrap(),
        vec![2],
    )
    .unwrap();
    let out = backward(&model, &batch, LossKind::CrossEntropy, false).unwrap();
    let gb = out.grads.layers[0].bias.as_ref().unwrap();
    let expected = [0.25, 0.25, -0.75, 0.25];
    for (a, e) in gb.data().iter().zip(expected) {
        assert!((a - e).abs() < 1e-10, "bias grad {a} vs {e}");
    }
    // Inputs reach the loss only through zero weights, so their gradient
    // vanishes identically.
    assert!(out.input_grad.data().iter().all(|&g| g == 0.0));
    // Loss of a uniform prediction is ln(C).
    assert!((out.loss - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn softmax_only_model_input_gradient_is_probability_residual() {
    let arch = ArchSpec {
        input_shape: vec![3],
        layers: vec![LayerSpec::Softmax],
        num_classes: 3,
    };
    let model = init_model(&arch, 0).unwrap();
    let batch = Batch::new(
        Tensor::from_vec(&[1, 3], vec![0.2, -1.0, 0.5]).unwrap(),
        vec![1],
    )
    .unwrap();
    let out = backward(&model, &batch, LossKind::CrossEntropy, false).unwrap();
    let p = forward(&model, &batch.inputs, false).unwrap();
    for j in 0..3 {
        let expected = p.data()[j] - if j == 1 { 1.0 } else { 0.0 };
        assert!((out.input_grad.data()[j] - expected).abs() < 1e-10);
    }
}

#[test]
fn masked_weights_are_invisible_and_stay_untrained() {
    let arch = dense_arch(3, 5, 2, false);
    let mut model = init_model(&arch, 11).unwrap();
    let mut mask = Tensor::filled(&[5, 3], 1.0);
    mask.data_mut()[4] = 0.0;
    mask.data_mut()[7] = 0.0;
    model.layers_mut()[0].set_mask(mask).unwrap();

    let batch = random_batch(&[3], 6, 2, 5);
    let before = forward(&model, &batch.inputs, false).unwrap();
    // Ghost invariance: the stored value under a zero mask cannot matter.
    if let Layer::Dense(d) = &mut model.layers_mut()[0] {
        d.weight.data_mut()[4] = 1e300;
        d.weight.data_mut()[7] = -42.0;
    }
    let after = forward(&model, &batch.inputs, false).unwrap();
    assert_eq!(before.data(), after.data());

    // Masked parameters receive exactly zero gradient through training.
    if let Layer::Dense(d) = &mut model.layers_mut()[0] {
        d.weight.data_mut()[4] = 0.0;
        d.weight.data_mut()[7] = 0.0;
    }
    for step in 0..5 {
        let out = backward(&model, &batch, LossKind::CrossEntropy, true).unwrap();
        let gw = out.grads.layers[0].weight.as_ref().unwrap();
        assert_eq!(gw.data()[4], 0.0, "step {step}");
        assert_eq!(gw.data()[7], 0.0, "step {step}");
        sgd_step(&mut model, &out.grads, 0.1).unwrap();
        if let Layer::Dense(d) = &model.layers()[0] {
            assert_eq!(d.weight.data()[4], 0.0, "step {step}");
            assert_eq!(d.weight.data()[7], 0.0, "step {step}");
        }
    }
}

#[test]
fn sgd_step_zero_lr_is_identity_and_negative_lr_rejected() {
    let arch = dense_arch(3, 4, 2, true);
    let mut model = init_model(&arch, 2).unwrap();
    let reference = model.clone();
    let batch = random_batch(&[3], 4, 2, 9);
    let out = backward(&model, &batch, LossKind::CrossEntropy, true).unwrap();
    sgd_step(&mut model, &out.grads, 0.0).unwrap();
    assert_eq!(model, reference);
    assert!(sgd_step(&mut model, &out.grads, -0.1).is_err());
    assert!(sgd_step(&mut model, &out.grads, f64::NAN).is_err());
}

#[test]
fn init_model_is_seed_deterministic() {
    let arch = dense_arch(5, 7, 3, true);
    let a = init_model(&arch, 123).unwrap();
    let b = init_model(&arch, 123).unwrap();
    let c = init_model(&arch, 124).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // Fan-in bound: dense weights live in (-1/sqrt(fin), 1/sqrt(fin)).
    if let Layer::Dense(d) = &a.layers()[0] {
        let bound = 1.0 / 5.0f64.sqrt();
        assert!(d.weight.data().iter().all(|w| w.abs() < bound));
    }
}

#[test]
fn running_stats_blend_with_momentum() {
    let arch = dense_arch(2, 3, 2, true);
    let mut model = init_model(&arch, 4).unwrap();
    let batch = random_batch(&[2], 8, 2, 21);
    let trace = forward_trace(&model, &batch.inputs, true).unwrap();
    let stats = trace.bn_stats[1].as_ref().unwrap().clone();
    update_running_stats(&mut model, &trace.bn_stats, 0.1).unwrap();
    if let Layer::BatchNorm(bn) = &model.layers()[1] {
        for c in 0..3 {
            let expected = 0.9 * 0.0 + 0.1 * stats.mean.data()[c];
            assert!((bn.running_mean.data()[c] - expected).abs() < 1e-15);
            let expected_var = 0.9 * 1.0 + 0.1 * stats.var.data()[c];
            assert!((bn.running_var.data()[c] - expected_var).abs() < 1e-15);
        }
    }
}

#[test]
fn inference_batchnorm_composes_into_effective_weights() {
    // In inference mode batchnorm is an affine per-feature map, so folding
    // gamma / sqrt(var) into the preceding dense weights reproduces the
    // logits up to the eps the folded form drops. With variances around 100
    // the discrepancy sits far below 1e-6.
    let arch = ArchSpec {
        input_shape: vec![3],
        layers: vec![
            LayerSpec::Dense { out: 2 },
            LayerSpec::BatchNorm,
            LayerSpec::Softmax,
        ],
        num_classes: 2,
    };
    let mut model = init_model(&arch, 8).unwrap();
    let mut r = rng::stream(31);
    let (mut gamma, mut var, mut mean, mut beta) = (vec![], vec![], vec![], vec![]);
    for _ in 0..2 {
        gamma.push(r.gen_range(0.5..2.0));
        var.push(r.gen_range(80.0..160.0));
        mean.push(r.gen_range(-1.0..1.0));
        beta.push(r.gen_range(-0.5..0.5));
    }
    if let Layer::BatchNorm(bn) = &mut model.layers_mut()[1] {
        bn.gamma = Tensor::from_vec(&[2], gamma.clone()).unwrap();
        bn.running_var = Tensor::from_vec(&[2], var.clone()).unwrap();
        bn.running_mean = Tensor::from_vec(&[2], mean.clone()).unwrap();
        bn.beta = Tensor::from_vec(&[2], beta.clone()).unwrap();
    }

    // Fold: w_hat[o][k] = gamma_o * w[o][k] / sigma_o, with matching bias.
    let mut folded = init_model(
        &ArchSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::Dense { out: 2 }, LayerSpec::Softmax],
            num_classes: 2,
        },
        0,
    )
    .unwrap();
    if let (Layer::Dense(src), Layer::Dense(dst)) =
        (&model.layers()[0], &mut folded.layers_mut()[0])
    {
        let mut w = src.weight.clone();
        let mut b = src.bias.clone();
        for o in 0..2 {
            let scale = gamma[o] / var[o].sqrt();
            for k in 0..3 {
                w.data_mut()[o * 3 + k] *= scale;
            }
            b.data_mut()[o] = scale * (src.bias.data()[o] - mean[o]) + beta[o];
        }
        dst.weight = w;
        dst.bias = b;
    }

    let x = random_batch(&[3], 10, 2, 77).inputs;
    let full = forward_trace(&model, &x, false).unwrap().logits;
    let fold = forward_trace(&folded, &x, false).unwrap().logits;
    for (a, b) in full.data().iter().zip(fold.data()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn forward_trace_records_relu_activation_mass() {
    let arch = dense_arch(2, 4, 2, false);
    let mut model = init_model(&arch, 6).unwrap();
    if let Layer::Dense(d) = &mut model.layers_mut()[0] {
        d.weight = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -2.0])
            .unwrap();
        d.bias = Tensor::zeros(&[4]);
    }
    let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
    let trace = forward_trace(&model, &x, false).unwrap();
    // Pre-relu activations are [1, -1, 2, -2]: two survive, summing to 3.
    assert_eq!(trace.relu_act_nonzero, 2);
    assert!((trace.relu_act_sum - 3.0).abs() < 1e-12);
}
