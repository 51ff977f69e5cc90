//! Forward pass with trace capture.

use crate::linalg::matmul;
use crate::norm::{bn_forward, BnCache, Mode};
use crate::Mat;

use super::conv::im2col;
use super::{Batch, FeatureShape, LayerKind, LayerParams, NetError, NetworkSpec, ParamSet};

/// Per-layer byproducts needed by the backward pass and the probes.
#[derive(Debug, Clone)]
pub enum TraceDetail {
    Weight {
        /// Per-sample im2col patch matrices (conv layers, train mode only).
        cols: Option<Vec<Mat>>,
    },
    Relu {
        /// Binary mask, 1 where the pre-activation is strictly positive.
        mask: Mat,
    },
    MaxPool {
        /// Per sample, per output element: the flat input index that won.
        argmax: Vec<Vec<usize>>,
    },
    Norm {
        cache: BnCache,
    },
    SoftmaxCe {
        /// Softmax probabilities, classes x batch.
        probs: Mat,
    },
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer output, features x batch.
    pub output: Mat,
    pub detail: TraceDetail,
}

/// Everything captured during one forward pass: the (transposed) input and
/// one entry per layer. The ReLU masks and pooling argmaxes identify the
/// activation pattern, i.e. the linear region the batch elements fall in.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input activations, features x batch.
    pub input: Mat,
    pub mode: Mode,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    /// The concatenated activation pattern (ReLU masks and pooling argmax
    /// choices) of one batch column. Two inputs lie in the same linear
    /// region exactly when their patterns agree.
    pub fn activation_pattern(&self, column: usize) -> Vec<u64> {
        let mut pattern = Vec::new();
        for layer in &self.layers {
            match &layer.detail {
                TraceDetail::Relu { mask } => {
                    for r in 0..mask.rows() {
                        pattern.push(mask[(r, column)] as u64);
                    }
                }
                TraceDetail::MaxPool { argmax } => {
                    pattern.extend(argmax[column].iter().map(|&i| i as u64));
                }
                _ => {}
            }
        }
        pattern
    }
}

/// Runs the network over a batch, returning the mean softmax cross-entropy
/// loss, the logits (classes x batch), and the full trace.
///
/// Train mode uses batch statistics in norm layers; infer mode uses running
/// statistics. The pass is pure: running averages are carried in the trace
/// and folded in later by the trainer.
pub fn forward(
    net: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch,
    mode: Mode,
) -> Result<(f64, Mat, ForwardTrace), NetError> {
    if batch.is_empty() {
        return Err(NetError::Batch("empty batch".into()));
    }
    if batch.inputs.rows() != batch.labels.len() {
        return Err(NetError::Batch(format!(
            "{} input rows vs {} labels",
            batch.inputs.rows(),
            batch.labels.len()
        )));
    }
    if batch.inputs.cols() != net.input_shape.len() {
        return Err(NetError::Batch(format!(
            "input dim {} does not match network input shape {}",
            batch.inputs.cols(),
            net.input_shape
        )));
    }
    let classes = net.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(NetError::Batch(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let mut x = batch.inputs.transpose();
    let input = x.clone();
    let n_batch = batch.len();
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut loss = 0.0;
    let mut logits = Mat::zeros(0, 0);

    for (index, layer) in net.layers.iter().enumerate() {
        let numeric_err = |_| NetError::Numeric {
            index,
            kind: layer.kind.name().into(),
        };
        let (out, detail) = match (&layer.kind, &params.layers[index]) {
            (LayerKind::Dense { .. }, LayerParams::Weight { w, b }) => {
                let mut z = matmul(w, &x).map_err(|e| NetError::StaleTrace(e.to_string()))?;
                for (i, &bi) in b.iter().enumerate() {
                    for v in z.row_mut(i) {
                        *v += bi;
                    }
                }
                (z, TraceDetail::Weight { cols: None })
            }
            (
                LayerKind::ConvAsMatrix {
                    kernel_h,
                    kernel_w,
                    stride,
                    pad,
                    ..
                },
                LayerParams::Weight { w, b },
            ) => {
                let FeatureShape::Image {
                    channels,
                    height,
                    width,
                } = layer.in_shape
                else {
                    unreachable!("validated at build time");
                };
                let positions = layer.out_shape.len() / w.rows();
                let mut z = Mat::zeros(layer.out_shape.len(), n_batch);
                let mut all_cols = Vec::with_capacity(n_batch);
                for s in 0..n_batch {
                    let sample = x.col(s);
                    let cols = im2col(
                        &sample, channels, height, width, *kernel_h, *kernel_w, *stride, *pad,
                    )
                    .map_err(|source| NetError::Conv { index, source })?;
                    let zs = matmul(w, &cols).map_err(|e| NetError::StaleTrace(e.to_string()))?;
                    for c in 0..w.rows() {
                        for p in 0..positions {
                            z[(c * positions + p, s)] = zs[(c, p)] + b[c];
                        }
                    }
                    if mode == Mode::Train {
                        all_cols.push(cols);
                    }
                }
                (
                    z,
                    TraceDetail::Weight {
                        cols: (mode == Mode::Train).then_some(all_cols),
                    },
                )
            }
            (LayerKind::Relu, _) => {
                let mut mask = Mat::zeros(x.rows(), x.cols());
                let mut out = Mat::zeros(x.rows(), x.cols());
                for (i, (&v, (m, o))) in x
                    .data()
                    .iter()
                    .zip(mask.data_mut().iter_mut().zip(out.data_mut().iter_mut()))
                    .enumerate()
                {
                    let _ = i;
                    // Tie at exactly zero counts as inactive.
                    if v > 0.0 {
                        *m = 1.0;
                        *o = v;
                    }
                }
                (out, TraceDetail::Relu { mask })
            }
            (LayerKind::MaxPool { window, stride }, _) => {
                let (out, argmax) = max_pool(&x, layer.in_shape, *window, *stride);
                (out, TraceDetail::MaxPool { argmax })
            }
            (LayerKind::Norm, LayerParams::Norm(state)) => {
                let (out, cache) = bn_forward(state, &x, mode)
                    .map_err(|source| NetError::Norm { index, source })?;
                (out, TraceDetail::Norm { cache })
            }
            (LayerKind::SoftmaxCe, _) => {
                logits = x.clone();
                let (l, probs) = softmax_cross_entropy(&x, &batch.labels);
                loss = l;
                (x.clone(), TraceDetail::SoftmaxCe { probs })
            }
            (kind, params) => {
                return Err(NetError::StaleTrace(format!(
                    "layer {index} kind {} has mismatched params {:?}",
                    kind.name(),
                    std::mem::discriminant(params)
                )))
            }
        };
        out.ensure_finite().map_err(numeric_err)?;
        x = out.clone();
        layers.push(LayerTrace {
            output: out,
            detail,
        });
    }

    if !loss.is_finite() {
        let index = net.layers.len() - 1;
        return Err(NetError::Numeric {
            index,
            kind: "softmax-ce".into(),
        });
    }

    Ok((
        loss,
        logits,
        ForwardTrace {
            input,
            mode,
            layers,
        },
    ))
}

/// Max pooling over a features x batch matrix. Flat features pool along the
/// vector; image features pool window x window per channel. Ties go to the
/// lowest input index.
fn max_pool(
    x: &Mat,
    in_shape: FeatureShape,
    window: usize,
    stride: usize,
) -> (Mat, Vec<Vec<usize>>) {
    let n_batch = x.cols();
    match in_shape {
        FeatureShape::Flat(n) => {
            let out_len = (n - window) / stride + 1;
            let mut out = Mat::zeros(out_len, n_batch);
            let mut argmax = vec![vec![0usize; out_len]; n_batch];
            for b in 0..n_batch {
                for o in 0..out_len {
                    let start = o * stride;
                    let mut best = start;
                    let mut best_v = x[(start, b)];
                    for i in start + 1..start + window {
                        if x[(i, b)] > best_v {
                            best_v = x[(i, b)];
                            best = i;
                        }
                    }
                    out[(o, b)] = best_v;
                    argmax[b][o] = best;
                }
            }
            (out, argmax)
        }
        FeatureShape::Image {
            channels,
            height,
            width,
        } => {
            let oh = (height - window) / stride + 1;
            let ow = (width - window) / stride + 1;
            let out_len = channels * oh * ow;
            let mut out = Mat::zeros(out_len, n_batch);
            let mut argmax = vec![vec![0usize; out_len]; n_batch];
            for b in 0..n_batch {
                for c in 0..channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = 0usize;
                            let mut best_v = f64::NEG_INFINITY;
                            for ky in 0..window {
                                for kx in 0..window {
                                    let iy = oy * stride + ky;
                                    let ix = ox * stride + kx;
                                    let idx = (c * height + iy) * width + ix;
                                    if x[(idx, b)] > best_v {
                                        best_v = x[(idx, b)];
                                        best = idx;
                                    }
                                }
                            }
                            let o = (c * oh + oy) * ow + ox;
                            out[(o, b)] = best_v;
                            argmax[b][o] = best;
                        }
                    }
                }
            }
            (out, argmax)
        }
    }
}

/// Mean cross-entropy with log-sum-exp stabilization; also returns the
/// softmax probabilities (classes x batch).
fn softmax_cross_entropy(logits: &Mat, labels: &[usize]) -> (f64, Mat) {
    let (classes, n_batch) = logits.shape();
    let mut probs = Mat::zeros(classes, n_batch);
    let mut loss = 0.0;
    for b in 0..n_batch {
        let mut max = f64::NEG_INFINITY;
        for c in 0..classes {
            max = max.max(logits[(c, b)]);
        }
        let mut sum = 0.0;
        for c in 0..classes {
            sum += (logits[(c, b)] - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - logits[(labels[b], b)];
        for c in 0..classes {
            probs[(c, b)] = (logits[(c, b)] - lse).exp();
        }
    }
    (loss / n_batch as f64, probs)
}
