//! Probes of a trained network's spectral/isometry geometry: per-layer
//! singular spectra, the region-wise induced linear map, local-linearity
//! radii, and expansion/contraction ratio statistics over sample pairs.
//!
//! All probes run the network in inference mode over frozen parameters;
//! norm layers enter through their inference-time affine map.

use serde::Serialize;

use crate::linalg::{matmul, svd};
use crate::net::{
    forward, Batch, FeatureShape, LayerKind, LayerParams, NetError, NetworkSpec, ParamSet,
    TraceDetail,
};
use crate::norm::Mode;
use crate::Mat;

/// Singular values below `NONZERO_REL_TOL * sigma_max` count as zero when
/// reporting minima and ranks.
pub const NONZERO_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct LayerSpectrum {
    pub layer_index: usize,
    pub kind: String,
    /// Full spectrum of the raw weight matrix, descending.
    pub spectrum: Vec<f64>,
    pub sigma_max: f64,
    /// Smallest singular value above the nonzero threshold.
    pub sigma_min: f64,
    pub effective_rank: usize,
    /// Spectrum of the effective transform `G W` when a norm layer directly
    /// follows this weight layer.
    pub effective_spectrum: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub layers: Vec<LayerSpectrum>,
    /// Product over weighted layers of sigma_max, taken from the effective
    /// spectrum where a norm layer follows.
    pub prod_sigma_max: f64,
    /// Same for the smallest nonzero singular values.
    pub prod_sigma_min: f64,
}

fn nonzero_min(spectrum: &[f64]) -> (f64, usize) {
    let sigma_max = spectrum.first().copied().unwrap_or(0.0);
    let threshold = NONZERO_REL_TOL * sigma_max;
    let nonzero: Vec<f64> = spectrum.iter().copied().filter(|&s| s > threshold).collect();
    (
        nonzero.last().copied().unwrap_or(0.0),
        nonzero.len(),
    )
}

/// Exact spectra of every weight matrix (and of the effective transform
/// where a norm layer follows), with the cross-layer products.
pub fn layer_spectra(net: &NetworkSpec, params: &ParamSet) -> SpectralReport {
    let mut layers = Vec::new();
    let mut prod_max = 1.0;
    let mut prod_min = 1.0;
    for (i, layer) in net.layers.iter().enumerate() {
        let LayerParams::Weight { w, .. } = &params.layers[i] else {
            continue;
        };
        let spectrum = svd(w).expect("finite weights").s;
        let (sigma_min, effective_rank) = nonzero_min(&spectrum);
        let effective_spectrum = match (net.layers.get(i + 1), params.layers.get(i + 1)) {
            (Some(next), Some(LayerParams::Norm(state)))
                if matches!(next.kind, LayerKind::Norm) =>
            {
                let (wt, _) = crate::norm::effective_transform(state, w);
                Some(svd(&wt).expect("finite weights").s)
            }
            _ => None,
        };
        let counted = effective_spectrum.as_deref().unwrap_or(&spectrum);
        let (c_min, _) = nonzero_min(counted);
        prod_max *= counted.first().copied().unwrap_or(0.0);
        prod_min *= c_min;
        layers.push(LayerSpectrum {
            layer_index: i,
            kind: layer.kind.name().to_string(),
            sigma_max: spectrum.first().copied().unwrap_or(0.0),
            sigma_min,
            effective_rank,
            spectrum,
            effective_spectrum,
        });
    }
    SpectralReport {
        layers,
        prod_sigma_max: prod_max,
        prod_sigma_min: prod_min,
    }
}

/// The affine map a network induces on the linear region containing the
/// anchor point: `logits(x') = matrix * x' + bias` for every `x'` in the
/// region.
#[derive(Debug, Clone)]
pub struct InducedMap {
    pub anchor: Vec<f64>,
    pub matrix: Mat,
    pub bias: Vec<f64>,
    /// Activation pattern (ReLU masks + pooling argmaxes) at the anchor.
    pub pattern: Vec<u64>,
}

impl InducedMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.matrix.matvec(x);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

fn single_batch(x: &[f64]) -> Batch {
    Batch {
        inputs: Mat::from_vec(1, x.len(), x.to_vec()),
        labels: vec![0],
    }
}

/// Logits and trace of one input in inference mode.
pub fn forward_point(
    net: &NetworkSpec,
    params: &ParamSet,
    x: &[f64],
) -> Result<(Vec<f64>, crate::net::ForwardTrace), NetError> {
    let (_, logits, trace) = forward(net, params, &single_batch(x), Mode::Infer)?;
    Ok((logits.col(0), trace))
}

/// Expands a conv layer into its explicit (out_len x in_len) matrix.
fn conv_matrix(
    w: &Mat,
    in_shape: FeatureShape,
    out_shape: FeatureShape,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
) -> Mat {
    let FeatureShape::Image {
        channels: in_c,
        height,
        width,
    } = in_shape
    else {
        unreachable!("validated at build time")
    };
    let FeatureShape::Image {
        channels: out_c,
        height: oh,
        width: ow,
    } = out_shape
    else {
        unreachable!("validated at build time")
    };
    let mut m = Mat::zeros(out_c * oh * ow, in_c * height * width);
    for co in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (co * oh + oy) * ow + ox;
                for ci in 0..in_c {
                    for ky in 0..kernel_h {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for kx in 0..kernel_w {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            m[(row, (ci * height + iy as usize) * width + ix as usize)] =
                                w[(co, (ci * kernel_h + ky) * kernel_w + kx)];
                        }
                    }
                }
            }
        }
    }
    m
}

/// Assembles the affine map induced at `x` from the forward trace's masks
/// and pooling selections, with norm layers folded in through their
/// inference affine form.
pub fn induced_linear_map(
    net: &NetworkSpec,
    params: &ParamSet,
    x: &[f64],
) -> Result<InducedMap, NetError> {
    let (_, trace) = forward_point(net, params, x)?;
    let dim = net.input_shape.len();
    let mut t = Mat::identity(dim);
    let mut bias = vec![0.0; dim];

    for (index, layer) in net.layers.iter().enumerate() {
        match (&layer.kind, &params.layers[index], &trace.layers[index].detail) {
            (LayerKind::Dense { .. }, LayerParams::Weight { w, b }, _) => {
                t = matmul(w, &t).expect("shapes compose");
                let mut nb = w.matvec(&bias);
                for (v, bi) in nb.iter_mut().zip(b) {
                    *v += bi;
                }
                bias = nb;
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
                _,
            ) => {
                let m = conv_matrix(
                    w,
                    layer.in_shape,
                    layer.out_shape,
                    *kernel_h,
                    *kernel_w,
                    *stride,
                    *pad,
                );
                t = matmul(&m, &t).expect("shapes compose");
                let mut nb = m.matvec(&bias);
                let positions = layer.out_shape.len() / b.len();
                for (i, v) in nb.iter_mut().enumerate() {
                    *v += b[i / positions];
                }
                bias = nb;
            }
            (LayerKind::Relu, _, TraceDetail::Relu { mask }) => {
                for r in 0..t.rows() {
                    let m = mask[(r, 0)];
                    if m == 0.0 {
                        for v in t.row_mut(r) {
                            *v = 0.0;
                        }
                        bias[r] = 0.0;
                    }
                }
            }
            (LayerKind::MaxPool { .. }, _, TraceDetail::MaxPool { argmax }) => {
                let selected = &argmax[0];
                let mut nt = Mat::zeros(selected.len(), t.cols());
                let mut nb = vec![0.0; selected.len()];
                for (o, &src) in selected.iter().enumerate() {
                    nt.row_mut(o).copy_from_slice(t.row(src));
                    nb[o] = bias[src];
                }
                t = nt;
                bias = nb;
            }
            (LayerKind::Norm, LayerParams::Norm(state), _) => {
                let scale = state.inference_scale();
                let spatial = state.spatial;
                for r in 0..t.rows() {
                    let i = r / spatial;
                    let g = scale[i];
                    for v in t.row_mut(r) {
                        *v *= g;
                    }
                    bias[r] = g * (bias[r] - state.running_mean[i]) + state.beta[i];
                }
            }
            (LayerKind::SoftmaxCe, _, _) => break,
            _ => {
                return Err(NetError::StaleTrace(format!(
                    "layer {index} trace does not match its kind"
                )))
            }
        }
    }

    Ok(InducedMap {
        anchor: x.to_vec(),
        matrix: t,
        bias,
        pattern: trace.activation_pattern(0),
    })
}

/// One weight layer's region-restricted factor: the raw (norm-folded)
/// matrix and its masked/pooled counterpart `P diag(tau) G W`.
#[derive(Debug, Clone)]
pub struct MaskedLayer {
    pub layer_index: usize,
    pub raw: Mat,
    pub masked: Mat,
}

/// The per-layer masked submatrices realized at `x`: for each weight layer,
/// the following norm scale (if any) is folded into both members, then the
/// region's ReLU mask zeroes rows and its pooling selection keeps rows.
pub fn masked_layer_maps(
    net: &NetworkSpec,
    params: &ParamSet,
    x: &[f64],
) -> Result<Vec<MaskedLayer>, NetError> {
    let (_, trace) = forward_point(net, params, x)?;
    let mut out: Vec<MaskedLayer> = Vec::new();
    let mut current: Option<(usize, Mat, Mat)> = None; // (index, raw, masked)

    for (index, layer) in net.layers.iter().enumerate() {
        match (&layer.kind, &params.layers[index], &trace.layers[index].detail) {
            (LayerKind::Dense { .. }, LayerParams::Weight { w, .. }, _) => {
                if let Some((i, raw, masked)) = current.take() {
                    out.push(MaskedLayer {
                        layer_index: i,
                        raw,
                        masked,
                    });
                }
                current = Some((index, w.clone(), w.clone()));
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
                _,
            ) => {
                if let Some((i, raw, masked)) = current.take() {
                    out.push(MaskedLayer {
                        layer_index: i,
                        raw,
                        masked,
                    });
                }
                let m = conv_matrix(
                    w,
                    layer.in_shape,
                    layer.out_shape,
                    *kernel_h,
                    *kernel_w,
                    *stride,
                    *pad,
                );
                current = Some((index, m.clone(), m));
            }
            (LayerKind::Norm, LayerParams::Norm(state), _) => {
                if let Some((_, raw, masked)) = current.as_mut() {
                    let scale = state.inference_scale();
                    let spatial = state.spatial;
                    for r in 0..raw.rows() {
                        let g = scale[r / spatial];
                        for v in raw.row_mut(r) {
                            *v *= g;
                        }
                        for v in masked.row_mut(r) {
                            *v *= g;
                        }
                    }
                }
            }
            (LayerKind::Relu, _, TraceDetail::Relu { mask }) => {
                if let Some((_, _, masked)) = current.as_mut() {
                    for r in 0..masked.rows() {
                        if mask[(r, 0)] == 0.0 {
                            for v in masked.row_mut(r) {
                                *v = 0.0;
                            }
                        }
                    }
                }
            }
            (LayerKind::MaxPool { .. }, _, TraceDetail::MaxPool { argmax }) => {
                if let Some((_, _, masked)) = current.as_mut() {
                    let selected = &argmax[0];
                    let mut nm = Mat::zeros(selected.len(), masked.cols());
                    for (o, &src) in selected.iter().enumerate() {
                        nm.row_mut(o).copy_from_slice(masked.row(src));
                    }
                    *masked = nm;
                }
            }
            _ => {}
        }
    }
    if let Some((i, raw, masked)) = current.take() {
        out.push(MaskedLayer {
            layer_index: i,
            raw,
            masked,
        });
    }
    Ok(out)
}

/// Lower bound on the distance from `x` to the nearest activation-pattern
/// boundary: the minimum over ReLU neurons of
/// `|pre-activation| / prod(sigma_max up to that layer)`, and over pooling
/// windows of `|winner - runner-up| / (sqrt(2) * prod)`. Returns 0 when `x`
/// sits exactly on a boundary.
pub fn local_region_radius(
    net: &NetworkSpec,
    params: &ParamSet,
    x: &[f64],
) -> Result<f64, NetError> {
    let (_, trace) = forward_point(net, params, x)?;
    let mut prod = 1.0f64;
    let mut radius = f64::INFINITY;

    for (index, layer) in net.layers.iter().enumerate() {
        match (&layer.kind, &params.layers[index], &trace.layers[index].detail) {
            (LayerKind::Dense { .. }, LayerParams::Weight { w, .. }, _) => {
                prod *= svd(w).expect("finite weights").sigma_max();
            }
            (LayerKind::ConvAsMatrix { .. }, LayerParams::Weight { w, .. }, _) => {
                // The conv operator norm is bounded by the patch-matrix norm
                // times the worst-case patch multiplicity; the exact value is
                // the expanded matrix's top singular value.
                let m = conv_matrix_for(layer, w);
                prod *= svd(&m).expect("finite weights").sigma_max();
            }
            (LayerKind::Norm, LayerParams::Norm(state), _) => {
                prod *= state
                    .inference_scale()
                    .iter()
                    .fold(0.0f64, |a, g| a.max(g.abs()));
            }
            (LayerKind::Relu, _, TraceDetail::Relu { .. }) => {
                let pre = if index == 0 {
                    &trace.input
                } else {
                    &trace.layers[index - 1].output
                };
                for r in 0..pre.rows() {
                    let d = pre[(r, 0)].abs();
                    if d == 0.0 {
                        return Ok(0.0);
                    }
                    radius = radius.min(d / prod);
                }
            }
            (LayerKind::MaxPool { .. }, _, TraceDetail::MaxPool { argmax }) => {
                let pre = if index == 0 {
                    &trace.input
                } else {
                    &trace.layers[index - 1].output
                };
                // When the pool reads a ReLU's output, exact zeros are
                // mask-pinned: they stay zero for any perturbation that
                // keeps the masks, so a 0-vs-0 tie is not a boundary.
                let after_relu =
                    index > 0 && matches!(net.layers[index - 1].kind, LayerKind::Relu);
                let windows = pool_windows(layer.in_shape, &layer.kind);
                for (o, window) in windows.iter().enumerate() {
                    let winner = argmax[0][o];
                    let wv = pre[(winner, 0)];
                    for &k in window {
                        if k == winner {
                            continue;
                        }
                        let kv = pre[(k, 0)];
                        if after_relu && wv == 0.0 && kv == 0.0 {
                            continue;
                        }
                        let gap = wv - kv;
                        if gap == 0.0 {
                            return Ok(0.0);
                        }
                        radius = radius.min(gap / (std::f64::consts::SQRT_2 * prod));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(if radius.is_finite() { radius } else { 0.0 })
}

fn conv_matrix_for(layer: &crate::net::LayerSpec, w: &Mat) -> Mat {
    let LayerKind::ConvAsMatrix {
        kernel_h,
        kernel_w,
        stride,
        pad,
        ..
    } = layer.kind
    else {
        unreachable!()
    };
    conv_matrix(
        w,
        layer.in_shape,
        layer.out_shape,
        kernel_h,
        kernel_w,
        stride,
        pad,
    )
}

/// Input indices of every pooling window, in output order.
fn pool_windows(in_shape: FeatureShape, kind: &LayerKind) -> Vec<Vec<usize>> {
    let LayerKind::MaxPool { window, stride } = *kind else {
        unreachable!()
    };
    match in_shape {
        FeatureShape::Flat(n) => {
            let out_len = (n - window) / stride + 1;
            (0..out_len)
                .map(|o| (o * stride..o * stride + window).collect())
                .collect()
        }
        FeatureShape::Image {
            channels,
            height,
            width,
        } => {
            let oh = (height - window) / stride + 1;
            let ow = (width - window) / stride + 1;
            let mut out = Vec::with_capacity(channels * oh * ow);
            for c in 0..channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut idx = Vec::with_capacity(window * window);
                        for ky in 0..window {
                            for kx in 0..window {
                                idx.push((c * height + oy * stride + ky) * width
                                    + ox * stride
                                    + kx);
                            }
                        }
                        out.push(idx);
                    }
                }
            }
            out
        }
    }
}

/// Smallest [`local_region_radius`] over a set of anchors.
pub fn min_region_radius(
    net: &NetworkSpec,
    params: &ParamSet,
    anchors: &[Vec<f64>],
) -> Result<f64, NetError> {
    let mut min = f64::INFINITY;
    for a in anchors {
        min = min.min(local_region_radius(net, params, a)?);
    }
    Ok(if min.is_finite() { min } else { 0.0 })
}

/// Distance expansion/contraction statistics over sample pairs.
#[derive(Debug, Clone, Serialize)]
pub struct IsometryStats {
    pub pairs: usize,
    pub skipped_zero_distance: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub ratio_mean: f64,
    /// Ratio quantiles at 5/25/50/75/95 percent.
    pub ratio_quantiles: [f64; 5],
    /// Largest | ||Tx - Tx'|| - ||x - x'|| | observed.
    pub delta_hat: f64,
    /// Largest input norm (the bound `b`).
    pub input_norm_bound: f64,
    /// Pairs whose activation patterns agree.
    pub same_region_pairs: usize,
    /// Same-region pairs whose ratio leaves the per-region product sandwich
    /// by more than 1e-8.
    pub sandwich_violations: usize,
}

/// Computes ratio statistics over pairs; for pairs inside one linear region
/// the ratio is checked against the masked-spectra product sandwich.
pub fn isometry_ratio_stats(
    net: &NetworkSpec,
    params: &ParamSet,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<IsometryStats, NetError> {
    let mut ratios = Vec::with_capacity(pairs.len());
    let mut skipped = 0usize;
    let mut delta_hat = 0.0f64;
    let mut bound = 0.0f64;
    let mut same_region = 0usize;
    let mut violations = 0usize;

    for (a, b) in pairs {
        let (ta, trace_a) = forward_point(net, params, a)?;
        let (tb, trace_b) = forward_point(net, params, b)?;
        let d_in = dist(a, b);
        let d_out = dist(&ta, &tb);
        bound = bound.max(norm(a)).max(norm(b));
        if d_in == 0.0 {
            skipped += 1;
            continue;
        }
        let ratio = d_out / d_in;
        ratios.push(ratio);
        delta_hat = delta_hat.max((d_out - d_in).abs());

        if trace_a.activation_pattern(0) == trace_b.activation_pattern(0) {
            same_region += 1;
            let mut prod_max = 1.0;
            let mut prod_min = 1.0;
            for layer in masked_layer_maps(net, params, a)? {
                let s = svd(&layer.masked).expect("finite weights").s;
                let (mn, _) = nonzero_min(&s);
                prod_max *= s.first().copied().unwrap_or(0.0);
                prod_min *= mn;
            }
            if ratio > prod_max + 1e-8 || ratio < prod_min - 1e-8 {
                violations += 1;
            }
        }
    }

    let mut sorted = ratios.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite ratios"));
    let quantile = |q: f64| -> f64 {
        if sorted.is_empty() {
            return 0.0;
        }
        let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
        sorted[idx]
    };
    Ok(IsometryStats {
        pairs: pairs.len(),
        skipped_zero_distance: skipped,
        ratio_min: sorted.first().copied().unwrap_or(0.0),
        ratio_max: sorted.last().copied().unwrap_or(0.0),
        ratio_mean: if sorted.is_empty() {
            0.0
        } else {
            ratios.iter().sum::<f64>() / ratios.len() as f64
        },
        ratio_quantiles: [
            quantile(0.05),
            quantile(0.25),
            quantile(0.50),
            quantile(0.75),
            quantile(0.95),
        ],
        delta_hat,
        input_norm_bound: bound,
        same_region_pairs: same_region,
        sandwich_violations: violations,
    })
}

/// Projects `delta` onto the row space of `t` (the complement of its null
/// space), using the nonzero-singular-value convention.
pub fn project_off_null(t: &Mat, delta: &[f64]) -> Vec<f64> {
    let f = svd(t).expect("finite matrix");
    let sigma_max = f.s.first().copied().unwrap_or(0.0);
    let threshold = NONZERO_REL_TOL * sigma_max;
    let mut out = vec![0.0; delta.len()];
    for (j, &s) in f.s.iter().enumerate() {
        if s <= threshold {
            continue;
        }
        let vj: Vec<f64> = (0..f.v.rows()).map(|i| f.v[(i, j)]).collect();
        let coef: f64 = vj.iter().zip(delta).map(|(a, b)| a * b).sum();
        for (o, vi) in out.iter_mut().zip(&vj) {
            *o += coef * vi;
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
