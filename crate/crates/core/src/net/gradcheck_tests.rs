//! Forward-pass oracles and finite-difference gradient checks across all
//! layer kinds and norm variants.

use crate::linalg::matmul;
use crate::norm::{Mode, NormVariant};
use crate::rng::Stream;
use crate::Mat;

use super::*;

fn rand_batch(n: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    let mut stream = Stream::new(seed);
    let inputs = Mat::from_fn(n, dim, |_, _| stream.normal_f64());
    let labels = (0..n).map(|_| stream.bounded(classes as u64) as usize).collect();
    Batch { inputs, labels }
}

/// Randomizes biases and norm parameters so gradient checks do not sit at
/// the symmetric initialization.
fn jitter_params(params: &mut ParamSet, seed: u64) {
    let mut stream = Stream::new(seed);
    for p in &mut params.layers {
        match p {
            LayerParams::Weight { w, b } => {
                for v in w.data_mut() {
                    *v += 0.05 * stream.normal_f64();
                }
                for v in b {
                    *v = 0.1 * stream.normal_f64();
                }
            }
            LayerParams::Norm(state) => {
                for v in &mut state.gamma {
                    *v = 1.0 + 0.3 * stream.normal_f64();
                }
                for v in &mut state.beta {
                    *v = 0.2 * stream.normal_f64();
                }
                state.upsilon_bar = 1.0 + 0.3 * stream.normal_f64();
            }
            LayerParams::Stateless => {}
        }
    }
}

#[test]
fn uniform_softmax_loss_is_ln2() {
    // Identity-weight dense layer, two classes, zero logits.
    let kinds = [LayerKind::Dense { units: 2 }, LayerKind::SoftmaxCe];
    let (net, mut params) = build_network(FeatureShape::Flat(2), &kinds, NormVariant::Bn, 0).unwrap();
    if let LayerParams::Weight { w, b } = &mut params.layers[0] {
        *w = Mat::identity(2);
        *b = vec![0.0, 0.0];
    }
    let batch = Batch {
        inputs: Mat::zeros(1, 2),
        labels: vec![0],
    };
    let (loss, logits, _) = forward(&net, &params, &batch, Mode::Infer).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-15);
    assert_eq!(logits.shape(), (2, 1));
}

#[test]
fn all_negative_preactivations_zero_out() {
    let kinds = [
        LayerKind::Dense { units: 3 },
        LayerKind::Relu,
        LayerKind::Dense { units: 2 },
        LayerKind::SoftmaxCe,
    ];
    let (net, mut params) =
        build_network(FeatureShape::Flat(2), &kinds, NormVariant::Bn, 1).unwrap();
    if let LayerParams::Weight { w, b } = &mut params.layers[0] {
        for v in w.data_mut() {
            *v = -v.abs() - 0.1;
        }
        *b = vec![-0.5; 3];
    }
    let batch = Batch {
        inputs: Mat::from_rows(&[vec![1.0, 2.0]]),
        labels: vec![0],
    };
    let (_, _, trace) = forward(&net, &params, &batch, Mode::Infer).unwrap();
    match &trace.layers[1].detail {
        TraceDetail::Relu { mask } => {
            assert!(mask.data().iter().all(|&m| m == 0.0));
        }
        other => panic!("expected relu trace, got {other:?}"),
    }
    assert!(trace.layers[1].output.data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_mask_consistency() {
    let kinds = [
        LayerKind::Dense { units: 6 },
        LayerKind::Relu,
        LayerKind::Dense { units: 3 },
        LayerKind::SoftmaxCe,
    ];
    let (net, params) = build_network(FeatureShape::Flat(4), &kinds, NormVariant::Bn, 2).unwrap();
    let batch = rand_batch(5, 4, 3, 3);
    let (_, _, trace) = forward(&net, &params, &batch, Mode::Train).unwrap();
    let pre = &trace.layers[0].output;
    let post = &trace.layers[1].output;
    let TraceDetail::Relu { mask } = &trace.layers[1].detail else {
        panic!("expected relu trace");
    };
    for i in 0..pre.rows() {
        for b in 0..pre.cols() {
            assert_eq!(mask[(i, b)], if pre[(i, b)] > 0.0 { 1.0 } else { 0.0 });
            assert_eq!(post[(i, b)], mask[(i, b)] * pre[(i, b)]);
        }
    }
}

/// Straight-line forward oracle for a Dense/ReLU/Dense/SoftmaxCe network,
/// written directly against scalar loops.
#[test]
fn forward_matches_straight_line_oracle() {
    let kinds = [
        LayerKind::Dense { units: 5 },
        LayerKind::Relu,
        LayerKind::Dense { units: 3 },
        LayerKind::SoftmaxCe,
    ];
    let (net, mut params) =
        build_network(FeatureShape::Flat(4), &kinds, NormVariant::Bn, 7).unwrap();
    jitter_params(&mut params, 8);
    let batch = rand_batch(6, 4, 3, 9);
    let (loss, _, _) = forward(&net, &params, &batch, Mode::Infer).unwrap();

    let (LayerParams::Weight { w: w1, b: b1 }, LayerParams::Weight { w: w2, b: b2 }) =
        (&params.layers[0], &params.layers[2])
    else {
        panic!("unexpected param layout");
    };
    let mut oracle_loss = 0.0;
    for s in 0..batch.len() {
        let x = batch.inputs.row(s);
        let mut h = vec![0.0; 5];
        for i in 0..5 {
            let mut acc = b1[i];
            for (j, &xj) in x.iter().enumerate() {
                acc += w1[(i, j)] * xj;
            }
            h[i] = acc.max(0.0);
        }
        let mut z = vec![0.0; 3];
        for i in 0..3 {
            let mut acc = b2[i];
            for (j, &hj) in h.iter().enumerate() {
                acc += w2[(i, j)] * hj;
            }
            z[i] = acc;
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        oracle_loss += lse - z[batch.labels[s]];
    }
    oracle_loss /= batch.len() as f64;
    assert!((loss - oracle_loss).abs() < 1e-12, "{loss} vs {oracle_loss}");
}

#[test]
fn saturated_softmax_has_vanishing_gradient() {
    let kinds = [LayerKind::Dense { units: 2 }, LayerKind::SoftmaxCe];
    let (net, mut params) =
        build_network(FeatureShape::Flat(2), &kinds, NormVariant::Bn, 0).unwrap();
    if let LayerParams::Weight { w, b } = &mut params.layers[0] {
        *w = Mat::identity(2);
        *b = vec![0.0; 2];
    }
    // Logits with a huge margin for the true class: probs ~ (1 - 1e-12).
    let batch = Batch {
        inputs: Mat::from_rows(&[vec![30.0, 0.0]]),
        labels: vec![0],
    };
    let (_, _, trace) = forward(&net, &params, &batch, Mode::Train).unwrap();
    let grads = backward(&net, &params, &batch, &trace).unwrap();
    let LayerGrads::Weight { dw, db } = &grads.layers[0] else {
        panic!("expected weight grads");
    };
    let norm: f64 = dw.frobenius_norm() + db.iter().map(|v| v.abs()).sum::<f64>();
    assert!(norm <= 1e-9, "saturated gradient should vanish, got {norm:e}");
}

#[test]
fn softmax_ce_gradient_is_probs_minus_onehot() {
    // 1x1 linear net: logits = W x, so dL/dW = (p - onehot(y)) x^T directly.
    let kinds = [LayerKind::Dense { units: 2 }, LayerKind::SoftmaxCe];
    let (net, mut params) =
        build_network(FeatureShape::Flat(1), &kinds, NormVariant::Bn, 0).unwrap();
    if let LayerParams::Weight { w, b } = &mut params.layers[0] {
        *w = Mat::from_rows(&[vec![0.7], vec![-0.4]]);
        *b = vec![0.0; 2];
    }
    let x = 1.3;
    let batch = Batch {
        inputs: Mat::from_rows(&[vec![x]]),
        labels: vec![1],
    };
    let (_, logits, trace) = forward(&net, &params, &batch, Mode::Train).unwrap();
    let grads = backward(&net, &params, &batch, &trace).unwrap();
    let z0 = logits[(0, 0)];
    let z1 = logits[(1, 0)];
    let m = z0.max(z1);
    let denom = (z0 - m).exp() + (z1 - m).exp();
    let p = [(z0 - m).exp() / denom, (z1 - m).exp() / denom];
    let LayerGrads::Weight { dw, .. } = &grads.layers[0] else {
        panic!("expected weight grads");
    };
    assert!((dw[(0, 0)] - p[0] * x).abs() < 1e-12);
    assert!((dw[(1, 0)] - (p[1] - 1.0) * x).abs() < 1e-12);
}

/// Central-difference gradient check over every parameter of the network.
fn gradcheck(
    input_shape: FeatureShape,
    kinds: &[LayerKind],
    variant: NormVariant,
    batch_n: usize,
    seed: u64,
    tol: f64,
) {
    let (net, mut params) = build_network(input_shape, kinds, variant, seed).unwrap();
    jitter_params(&mut params, seed ^ 0xAB);
    let classes = net.num_classes();
    let batch = rand_batch(batch_n, input_shape.len(), classes, seed ^ 0xCD);

    let (_, _, trace) = forward(&net, &params, &batch, Mode::Train).unwrap();
    let grads = backward(&net, &params, &batch, &trace).unwrap();

    let loss_at = |p: &ParamSet| forward(&net, p, &batch, Mode::Train).unwrap().0;
    let h = 1e-5;
    let mut checked = 0usize;
    let mut max_rel: f64 = 0.0;

    for (li, lp) in params.layers.clone().iter().enumerate() {
        let analytic: Vec<(String, f64)> = match (&grads.layers[li], lp) {
            (LayerGrads::Weight { dw, db }, LayerParams::Weight { w, .. }) => {
                let mut v = Vec::new();
                for i in 0..w.rows() {
                    for j in 0..w.cols() {
                        v.push((format!("w[{li}][{i}][{j}]"), dw[(i, j)]));
                    }
                }
                for (i, &g) in db.iter().enumerate() {
                    v.push((format!("b[{li}][{i}]"), g));
                }
                v
            }
            (
                LayerGrads::Norm {
                    d_gamma,
                    d_beta,
                    d_upsilon_bar,
                },
                LayerParams::Norm(state),
            ) => {
                let mut v = Vec::new();
                match state.variant {
                    NormVariant::Dbn => v.push((format!("ub[{li}]"), *d_upsilon_bar)),
                    _ => {
                        for (i, &g) in d_gamma.iter().enumerate() {
                            v.push((format!("gamma[{li}][{i}]"), g));
                        }
                    }
                }
                for (i, &g) in d_beta.iter().enumerate() {
                    v.push((format!("beta[{li}][{i}]"), g));
                }
                v
            }
            _ => Vec::new(),
        };

        for (name, a) in analytic {
            let mut plus = params.clone();
            let mut minus = params.clone();
            perturb(&mut plus, &name, h);
            perturb(&mut minus, &name, -h);
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(err);
            assert!(err <= tol, "{name}: analytic {a} vs fd {fd} (rel {err:e})");
            checked += 1;
        }
    }
    assert!(checked > 0);
    assert!(max_rel <= tol);
}

/// Applies a signed bump to the parameter named by `gradcheck`'s labels.
fn perturb(params: &mut ParamSet, name: &str, h: f64) {
    let parse = |s: &str| -> Vec<usize> {
        s.split(['[', ']'])
            .filter(|t| !t.is_empty())
            .skip(1)
            .map(|t| t.parse().unwrap())
            .collect()
    };
    let idx = parse(name);
    match (&mut params.layers[idx[0]], name.chars().next().unwrap()) {
        (LayerParams::Weight { w, .. }, 'w') => w[(idx[1], idx[2])] += h,
        (LayerParams::Weight { b, .. }, 'b') => b[idx[1]] += h,
        (LayerParams::Norm(state), 'g') => state.gamma[idx[1]] += h,
        (LayerParams::Norm(state), 'u') => state.upsilon_bar += h,
        (LayerParams::Norm(state), _) => state.beta[idx[1]] += h,
        _ => panic!("bad perturb target {name}"),
    }
}

#[test]
fn gradcheck_dense_relu() {
    gradcheck(
        FeatureShape::Flat(5),
        &[
            LayerKind::Dense { units: 6 },
            LayerKind::Relu,
            LayerKind::Dense { units: 3 },
            LayerKind::SoftmaxCe,
        ],
        NormVariant::Bn,
        4,
        11,
        1e-4,
    );
}

#[test]
fn gradcheck_all_norm_variants() {
    for (variant, seed) in [
        (NormVariant::Bn, 21u64),
        (NormVariant::Dbn, 22),
        (NormVariant::Bbn { epsilon_tilde: 0.2 }, 23),
    ] {
        gradcheck(
            FeatureShape::Flat(4),
            &[
                LayerKind::Dense { units: 5 },
                LayerKind::Norm,
                LayerKind::Relu,
                LayerKind::Dense { units: 3 },
                LayerKind::SoftmaxCe,
            ],
            variant,
            5,
            seed,
            1e-4,
        );
    }
}

#[test]
fn gradcheck_conv_pool() {
    gradcheck(
        FeatureShape::Image {
            channels: 2,
            height: 5,
            width: 5,
        },
        &[
            LayerKind::ConvAsMatrix {
                out_channels: 3,
                in_channels: 2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: 1,
            },
            LayerKind::Norm,
            LayerKind::Relu,
            LayerKind::MaxPool { window: 2, stride: 2 },
            LayerKind::Dense { units: 3 },
            LayerKind::SoftmaxCe,
        ],
        NormVariant::Bn,
        3,
        31,
        1e-4,
    );
}

#[test]
fn gradcheck_flat_maxpool() {
    gradcheck(
        FeatureShape::Flat(9),
        &[
            LayerKind::Dense { units: 8 },
            LayerKind::Relu,
            LayerKind::MaxPool { window: 2, stride: 2 },
            LayerKind::Dense { units: 2 },
            LayerKind::SoftmaxCe,
        ],
        NormVariant::Bn,
        4,
        41,
        1e-4,
    );
}

#[test]
fn forward_is_deterministic() {
    let kinds = [
        LayerKind::Dense { units: 8 },
        LayerKind::Norm,
        LayerKind::Relu,
        LayerKind::Dense { units: 4 },
        LayerKind::SoftmaxCe,
    ];
    let (net, params) = build_network(FeatureShape::Flat(6), &kinds, NormVariant::Bn, 5).unwrap();
    let batch = rand_batch(8, 6, 4, 6);
    let (l1, z1, t1) = forward(&net, &params, &batch, Mode::Train).unwrap();
    let (l2, z2, t2) = forward(&net, &params, &batch, Mode::Train).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(z1, z2);
    let g1 = backward(&net, &params, &batch, &t1).unwrap();
    let g2 = backward(&net, &params, &batch, &t2).unwrap();
    for (a, b) in g1.layers.iter().zip(&g2.layers) {
        if let (LayerGrads::Weight { dw: d1, .. }, LayerGrads::Weight { dw: d2, .. }) = (a, b) {
            assert_eq!(d1, d2);
        }
    }
}

#[test]
fn infer_trace_rejected_by_backward() {
    let kinds = [LayerKind::Dense { units: 2 }, LayerKind::SoftmaxCe];
    let (net, params) = build_network(FeatureShape::Flat(2), &kinds, NormVariant::Bn, 0).unwrap();
    let batch = rand_batch(3, 2, 2, 1);
    let (_, _, trace) = forward(&net, &params, &batch, Mode::Infer).unwrap();
    assert!(matches!(
        backward(&net, &params, &batch, &trace),
        Err(NetError::StaleTrace(_))
    ));
}

#[test]
fn nan_activation_names_layer() {
    let kinds = [
        LayerKind::Dense { units: 3 },
        LayerKind::Relu,
        LayerKind::Dense { units: 2 },
        LayerKind::SoftmaxCe,
    ];
    let (net, mut params) =
        build_network(FeatureShape::Flat(2), &kinds, NormVariant::Bn, 0).unwrap();
    if let LayerParams::Weight { w, .. } = &mut params.layers[2] {
        w[(0, 0)] = f64::NAN;
    }
    let batch = rand_batch(2, 2, 2, 1);
    match forward(&net, &params, &batch, Mode::Infer) {
        Err(NetError::Numeric { index, .. }) => assert_eq!(index, 2),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn conv_forward_path_matches_dense_on_1x1() {
    // A 1x1-kernel conv over a 1x1 image is exactly a dense layer.
    let kinds_conv = [
        LayerKind::ConvAsMatrix {
            out_channels: 4,
            in_channels: 3,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            pad: 0,
        },
        LayerKind::SoftmaxCe,
    ];
    let shape = FeatureShape::Image {
        channels: 3,
        height: 1,
        width: 1,
    };
    let (net, params) = build_network(shape, &kinds_conv, NormVariant::Bn, 3).unwrap();
    let batch = rand_batch(4, 3, 4, 5);
    let (_, logits, _) = forward(&net, &params, &batch, Mode::Infer).unwrap();
    let LayerParams::Weight { w, .. } = &params.layers[0] else {
        panic!()
    };
    let want = matmul(w, &batch.inputs.transpose()).unwrap();
    assert!(logits.sub(&want).frobenius_norm() < 1e-12);
}
