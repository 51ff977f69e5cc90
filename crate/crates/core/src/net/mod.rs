//! Feed-forward network definition: layer kinds, shape validation,
//! parameter allocation, forward pass with trace capture, and reverse-mode
//! gradients.
//!
//! Activations are stored as `features x batch` matrices so every weighted
//! layer is a plain left-multiplication. The topology is a fixed sequence
//! ending in a softmax cross-entropy head; there are no skip connections.

pub mod conv;
mod backward;
#[cfg(test)]
mod gradcheck_tests;
mod forward;

pub use backward::backward;
pub use forward::{forward, ForwardTrace, LayerTrace, TraceDetail};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::norm::{NormError, NormState, NormVariant};
use crate::opt::orthogonal_init;
use crate::Mat;

use conv::conv_out_dim;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {index} ({kind}): {message}")]
    Spec {
        index: usize,
        kind: String,
        message: String,
    },
    #[error("non-finite activation produced by layer {index} ({kind})")]
    Numeric { index: usize, kind: String },
    #[error("stale trace: {0}")]
    StaleTrace(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error("layer {index}: {source}")]
    Norm {
        index: usize,
        #[source]
        source: NormError,
    },
    #[error("layer {index}: {source}")]
    Conv {
        index: usize,
        #[source]
        source: conv::ConvError,
    },
}

/// Shape of the feature vector flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatureShape::Flat(n) => n,
            FeatureShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            FeatureShape::Flat(n) => write!(f, "{n}"),
            FeatureShape::Image {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
        }
    }
}

/// One layer of the fixed sequential topology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        units: usize,
    },
    ConvAsMatrix {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Norm,
    SoftmaxCe,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::ConvAsMatrix { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Norm => "norm",
            LayerKind::SoftmaxCe => "softmax-ce",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::ConvAsMatrix { .. })
    }
}

/// A layer with its resolved input/output shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_shape: FeatureShape,
    pub out_shape: FeatureShape,
}

/// Validated network topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: FeatureShape,
    pub norm_variant: NormVariant,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Number of classes = width of the softmax head input.
    pub fn num_classes(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.in_shape.len())
            .unwrap_or(0)
    }

    /// Indices of the weighted layers, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.has_weights())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Trainable state of one layer, aligned with `NetworkSpec::layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Weight { w: Mat, b: Vec<f64> },
    Norm(NormState),
    Stateless,
}

/// All trainable parameters plus norm-layer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    /// Iterates over the weight matrices (the targets of every
    /// orthogonality mechanism; biases and norm parameters are excluded).
    pub fn weight_matrices(&self) -> impl Iterator<Item = (usize, &Mat)> {
        self.layers.iter().enumerate().filter_map(|(i, p)| match p {
            LayerParams::Weight { w, .. } => Some((i, w)),
            _ => None,
        })
    }

    pub fn ensure_finite(&self) -> Result<(), NetError> {
        for (i, p) in self.layers.iter().enumerate() {
            if let LayerParams::Weight { w, b } = p {
                if w.find_non_finite().is_some() || b.iter().any(|v| !v.is_finite()) {
                    return Err(NetError::Numeric {
                        index: i,
                        kind: "weights".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Gradient of the loss w.r.t. one layer's parameters.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Weight {
        dw: Mat,
        db: Vec<f64>,
    },
    Norm {
        d_gamma: Vec<f64>,
        d_beta: Vec<f64>,
        d_upsilon_bar: f64,
    },
    Stateless,
}

/// ParamSet-shaped gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

/// A labeled mini-batch; inputs are `batch_size x input_dim`, one example
/// per row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Mat,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn spec_err(index: usize, kind: &LayerKind, message: String) -> NetError {
    NetError::Spec {
        index,
        kind: kind.name().to_string(),
        message,
    }
}

/// Resolves the output shape of `kind` applied to `shape`.
fn apply_shape(
    index: usize,
    kind: &LayerKind,
    shape: FeatureShape,
) -> Result<FeatureShape, NetError> {
    match *kind {
        LayerKind::Dense { units } => {
            if units == 0 {
                return Err(spec_err(index, kind, "zero output units".into()));
            }
            if shape.is_empty() {
                return Err(spec_err(index, kind, "empty input".into()));
            }
            Ok(FeatureShape::Flat(units))
        }
        LayerKind::ConvAsMatrix {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
        } => {
            let FeatureShape::Image {
                channels,
                height,
                width,
            } = shape
            else {
                return Err(spec_err(
                    index,
                    kind,
                    format!("needs an image input, got flat {}", shape.len()),
                ));
            };
            if channels != in_channels {
                return Err(spec_err(
                    index,
                    kind,
                    format!("expects {in_channels} input channels, previous layer produces {channels}"),
                ));
            }
            if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                return Err(spec_err(index, kind, "zero-sized kernel parameter".into()));
            }
            let oh = conv_out_dim(height, kernel_h, stride, pad);
            let ow = conv_out_dim(width, kernel_w, stride, pad);
            match (oh, ow) {
                (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(FeatureShape::Image {
                    channels: out_channels,
                    height: oh,
                    width: ow,
                }),
                _ => Err(spec_err(
                    index,
                    kind,
                    format!("kernel {kernel_h}x{kernel_w} does not fit {height}x{width} with pad {pad}"),
                )),
            }
        }
        LayerKind::Relu | LayerKind::Norm => {
            if shape.is_empty() {
                return Err(spec_err(index, kind, "empty input".into()));
            }
            Ok(shape)
        }
        LayerKind::MaxPool { window, stride } => {
            if window == 0 || stride == 0 {
                return Err(spec_err(index, kind, "zero window or stride".into()));
            }
            match shape {
                FeatureShape::Flat(n) => {
                    if window > n {
                        return Err(spec_err(
                            index,
                            kind,
                            format!("window {window} exceeds flat input {n}"),
                        ));
                    }
                    Ok(FeatureShape::Flat((n - window) / stride + 1))
                }
                FeatureShape::Image {
                    channels,
                    height,
                    width,
                } => {
                    if window > height || window > width {
                        return Err(spec_err(
                            index,
                            kind,
                            format!("window {window} exceeds map {height}x{width}"),
                        ));
                    }
                    Ok(FeatureShape::Image {
                        channels,
                        height: (height - window) / stride + 1,
                        width: (width - window) / stride + 1,
                    })
                }
            }
        }
        LayerKind::SoftmaxCe => {
            if shape.len() < 2 {
                return Err(spec_err(
                    index,
                    kind,
                    "softmax head needs at least 2 logits".into(),
                ));
            }
            Ok(shape)
        }
    }
}

/// Validates the layer sequence against the input shape and allocates an
/// orthogonally-initialized parameter set.
pub fn build_network(
    input_shape: FeatureShape,
    kinds: &[LayerKind],
    norm_variant: NormVariant,
    seed: u64,
) -> Result<(NetworkSpec, ParamSet), NetError> {
    if kinds.is_empty() {
        return Err(NetError::Batch("empty layer list".into()));
    }
    let last = kinds.len() - 1;
    for (i, kind) in kinds.iter().enumerate() {
        let is_head = matches!(kind, LayerKind::SoftmaxCe);
        if is_head != (i == last) {
            return Err(spec_err(
                i,
                kind,
                if is_head {
                    "softmax-ce head must be the final layer".into()
                } else {
                    "network must end with a softmax-ce head".into()
                },
            ));
        }
    }

    let mut layers = Vec::with_capacity(kinds.len());
    let mut params = Vec::with_capacity(kinds.len());
    let mut shape = input_shape;
    for (i, kind) in kinds.iter().enumerate() {
        let out_shape = apply_shape(i, kind, shape)?;
        layers.push(LayerSpec {
            kind: *kind,
            in_shape: shape,
            out_shape,
        });
        params.push(match *kind {
            LayerKind::Dense { units } => LayerParams::Weight {
                w: orthogonal_init(units, shape.len(), layer_seed(seed, i)),
                b: vec![0.0; units],
            },
            LayerKind::ConvAsMatrix {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => LayerParams::Weight {
                w: orthogonal_init(
                    out_channels,
                    in_channels * kernel_h * kernel_w,
                    layer_seed(seed, i),
                ),
                b: vec![0.0; out_channels],
            },
            LayerKind::Norm => {
                let (neurons, spatial) = match shape {
                    FeatureShape::Flat(n) => (n, 1),
                    FeatureShape::Image {
                        channels,
                        height,
                        width,
                    } => (channels, height * width),
                };
                LayerParams::Norm(NormState::new(neurons, spatial, norm_variant))
            }
            _ => LayerParams::Stateless,
        });
        shape = out_shape;
    }

    Ok((
        NetworkSpec {
            input_shape,
            norm_variant,
            layers,
        },
        ParamSet { layers: params },
    ))
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_shapes() {
        let kinds = [
            LayerKind::Dense { units: 4 },
            LayerKind::Relu,
            LayerKind::Dense { units: 2 },
            LayerKind::SoftmaxCe,
        ];
        let (spec, params) =
            build_network(FeatureShape::Flat(3), &kinds, NormVariant::Bn, 1).unwrap();
        assert_eq!(spec.num_classes(), 2);
        match &params.layers[0] {
            LayerParams::Weight { w, b } => {
                assert_eq!(w.shape(), (4, 3));
                assert_eq!(b.len(), 4);
            }
            other => panic!("expected weights, got {other:?}"),
        }
        match &params.layers[2] {
            LayerParams::Weight { w, .. } => assert_eq!(w.shape(), (2, 4)),
            other => panic!("expected weights, got {other:?}"),
        }
    }

    #[test]
    fn conv_weight_is_flattened_filter_matrix() {
        let kinds = [
            LayerKind::ConvAsMatrix {
                out_channels: 16,
                in_channels: 3,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: 1,
            },
            LayerKind::Relu,
            LayerKind::Dense { units: 5 },
            LayerKind::SoftmaxCe,
        ];
        let (spec, params) = build_network(
            FeatureShape::Image {
                channels: 3,
                height: 8,
                width: 8,
            },
            &kinds,
            NormVariant::Bn,
            2,
        )
        .unwrap();
        match &params.layers[0] {
            LayerParams::Weight { w, .. } => assert_eq!(w.shape(), (16, 27)),
            other => panic!("expected weights, got {other:?}"),
        }
        assert_eq!(
            spec.layers[0].out_shape,
            FeatureShape::Image {
                channels: 16,
                height: 8,
                width: 8
            }
        );
    }

    #[test]
    fn non_composing_shapes_rejected() {
        let kinds = [
            LayerKind::ConvAsMatrix {
                out_channels: 4,
                in_channels: 2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: 0,
            },
            LayerKind::SoftmaxCe,
        ];
        let err = build_network(
            FeatureShape::Image {
                channels: 3,
                height: 8,
                width: 8,
            },
            &kinds,
            NormVariant::Bn,
            0,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 0"), "{msg}");
        assert!(msg.contains("channels"), "{msg}");
    }

    #[test]
    fn head_position_enforced() {
        let no_head = [LayerKind::Dense { units: 3 }];
        assert!(build_network(FeatureShape::Flat(2), &no_head, NormVariant::Bn, 0).is_err());
        let early_head = [
            LayerKind::SoftmaxCe,
            LayerKind::Dense { units: 3 },
            LayerKind::SoftmaxCe,
        ];
        assert!(build_network(FeatureShape::Flat(2), &early_head, NormVariant::Bn, 0).is_err());
    }

    #[test]
    fn norm_layer_groups_by_channel_after_conv() {
        let kinds = [
            LayerKind::ConvAsMatrix {
                out_channels: 4,
                in_channels: 1,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: 1,
            },
            LayerKind::Norm,
            LayerKind::Relu,
            LayerKind::Dense { units: 3 },
            LayerKind::SoftmaxCe,
        ];
        let (_, params) = build_network(
            FeatureShape::Image {
                channels: 1,
                height: 5,
                width: 5,
            },
            &kinds,
            NormVariant::Bn,
            3,
        )
        .unwrap();
        match &params.layers[1] {
            LayerParams::Norm(state) => {
                assert_eq!(state.neurons(), 4);
                assert_eq!(state.spatial, 25);
            }
            other => panic!("expected norm state, got {other:?}"),
        }
    }
}
