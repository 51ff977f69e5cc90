//! Reverse-mode gradients of the mean loss w.r.t. every parameter, replaying
//! a train-mode trace. ReLU uses the stored masks (subgradient 0 at
//! non-positive pre-activations); pooling routes gradients through the
//! stored argmax indices; norm layers differentiate exactly through their
//! batch statistics.

use crate::linalg::{matmul_nt, matmul_tn};
use crate::norm::{bn_backward, Mode};
use crate::Mat;

use super::conv::col2im;
use super::forward::{ForwardTrace, TraceDetail};
use super::{
    Batch, FeatureShape, Gradients, LayerGrads, LayerKind, LayerParams, NetError, NetworkSpec,
    ParamSet,
};

pub fn backward(
    net: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch,
    trace: &ForwardTrace,
) -> Result<Gradients, NetError> {
    if trace.mode != Mode::Train {
        return Err(NetError::StaleTrace(
            "backward needs a trace from forward(train)".into(),
        ));
    }
    if trace.layers.len() != net.layers.len() {
        return Err(NetError::StaleTrace(format!(
            "trace has {} layers, network has {}",
            trace.layers.len(),
            net.layers.len()
        )));
    }
    let n_batch = batch.len();
    if trace.input.shape() != (net.input_shape.len(), n_batch) {
        return Err(NetError::StaleTrace(format!(
            "trace input is {:?}, batch expects {:?}",
            trace.input.shape(),
            (net.input_shape.len(), n_batch)
        )));
    }

    let mut grads: Vec<LayerGrads> = Vec::with_capacity(net.layers.len());
    grads.resize_with(net.layers.len(), || LayerGrads::Stateless);

    // Gradient w.r.t. the current layer's output, walked back to front.
    let mut d = Mat::zeros(0, 0);

    for index in (0..net.layers.len()).rev() {
        let layer = &net.layers[index];
        let layer_input: &Mat = if index == 0 {
            &trace.input
        } else {
            &trace.layers[index - 1].output
        };
        match (&layer.kind, &params.layers[index], &trace.layers[index].detail) {
            (LayerKind::SoftmaxCe, _, TraceDetail::SoftmaxCe { probs }) => {
                let scale = 1.0 / n_batch as f64;
                let mut dz = probs.scale(scale);
                for (b, &y) in batch.labels.iter().enumerate() {
                    dz[(y, b)] -= scale;
                }
                d = dz;
            }
            (LayerKind::Dense { .. }, LayerParams::Weight { w, .. }, TraceDetail::Weight { .. }) => {
                let dw =
                    matmul_nt(&d, layer_input).map_err(|e| NetError::StaleTrace(e.to_string()))?;
                let db: Vec<f64> = (0..d.rows()).map(|i| d.row(i).iter().sum()).collect();
                let dx = matmul_tn(w, &d).map_err(|e| NetError::StaleTrace(e.to_string()))?;
                grads[index] = LayerGrads::Weight { dw, db };
                d = dx;
            }
            (
                LayerKind::ConvAsMatrix {
                    kernel_h,
                    kernel_w,
                    stride,
                    pad,
                    ..
                },
                LayerParams::Weight { w, .. },
                TraceDetail::Weight { cols },
            ) => {
                let Some(cols) = cols else {
                    return Err(NetError::StaleTrace(
                        "conv trace is missing patch matrices".into(),
                    ));
                };
                let FeatureShape::Image {
                    channels,
                    height,
                    width,
                } = layer.in_shape
                else {
                    unreachable!("validated at build time")
                };
                let out_c = w.rows();
                let positions = layer.out_shape.len() / out_c;
                let mut dw = Mat::zeros(w.rows(), w.cols());
                let mut db = vec![0.0; out_c];
                let mut dx = Mat::zeros(layer.in_shape.len(), n_batch);
                for s in 0..n_batch {
                    // Column s of d, reshaped to out_c x positions.
                    let mut ds = Mat::zeros(out_c, positions);
                    for c in 0..out_c {
                        for p in 0..positions {
                            let g = d[(c * positions + p, s)];
                            ds[(c, p)] = g;
                            db[c] += g;
                        }
                    }
                    dw.axpy(
                        1.0,
                        &matmul_nt(&ds, &cols[s])
                            .map_err(|e| NetError::StaleTrace(e.to_string()))?,
                    );
                    let dcols =
                        matmul_tn(w, &ds).map_err(|e| NetError::StaleTrace(e.to_string()))?;
                    let dxs = col2im(
                        &dcols, channels, height, width, *kernel_h, *kernel_w, *stride, *pad,
                    );
                    for (r, &v) in dxs.iter().enumerate() {
                        dx[(r, s)] = v;
                    }
                }
                grads[index] = LayerGrads::Weight { dw, db };
                d = dx;
            }
            (LayerKind::Relu, _, TraceDetail::Relu { mask }) => {
                if mask.shape() != d.shape() {
                    return Err(NetError::StaleTrace("relu mask shape mismatch".into()));
                }
                let mut dx = d.clone();
                for (v, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
                d = dx;
            }
            (LayerKind::MaxPool { .. }, _, TraceDetail::MaxPool { argmax }) => {
                let mut dx = Mat::zeros(layer.in_shape.len(), n_batch);
                for (b, indices) in argmax.iter().enumerate() {
                    for (o, &src) in indices.iter().enumerate() {
                        // Overlapping windows can select the same input.
                        dx[(src, b)] += d[(o, b)];
                    }
                }
                d = dx;
            }
            (LayerKind::Norm, LayerParams::Norm(state), TraceDetail::Norm { cache }) => {
                if cache.mode != Mode::Train {
                    return Err(NetError::StaleTrace(
                        "norm cache comes from an inference forward".into(),
                    ));
                }
                let bn = bn_backward(state, cache, &d);
                grads[index] = LayerGrads::Norm {
                    d_gamma: bn.d_gamma,
                    d_beta: bn.d_beta,
                    d_upsilon_bar: bn.d_upsilon_bar,
                };
                d = bn.d_input;
            }
            _ => {
                return Err(NetError::StaleTrace(format!(
                    "layer {index} trace does not match its kind"
                )))
            }
        }
    }

    Ok(Gradients { layers: grads })
}
