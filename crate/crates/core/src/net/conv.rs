//! Convolution as matrix multiplication: kernel flattening and im2col.
//!
//! A conv layer with an `out_c x in_c x kh x kw` kernel tensor is handled as
//! the `out_c x (in_c * kh * kw)` matrix whose rows are the flattened
//! filters; the forward pass is then a plain product against the im2col
//! patch matrix, which lets every orthogonality mechanism treat the kernel
//! like any other weight matrix.

use thiserror::Error;

use crate::Mat;

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("kernel window {kh}x{kw} exceeds padded input {h}x{w} (pad {pad})")]
    WindowTooLarge {
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
        pad: usize,
    },
    #[error("input length {len} does not match {channels} channels of {h}x{w}")]
    BadInput {
        len: usize,
        channels: usize,
        h: usize,
        w: usize,
    },
}

/// A 4-d kernel tensor `out_c x in_c x h x w`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4 {
    pub out_c: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Kernel4 {
    pub fn new(out_c: usize, in_c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), out_c * in_c * h * w);
        Self {
            out_c,
            in_c,
            h,
            w,
            data,
        }
    }
}

/// Flattens each filter in (channel, row, col) order into one matrix row.
/// The mapping is bit-exact and inverted by [`matrix_to_kernel`].
pub fn kernel_to_matrix(kernel: &Kernel4) -> Mat {
    let cols = kernel.in_c * kernel.h * kernel.w;
    Mat::from_vec(kernel.out_c, cols, kernel.data.clone())
}

/// Inverse of [`kernel_to_matrix`].
pub fn matrix_to_kernel(m: &Mat, in_c: usize, h: usize, w: usize) -> Kernel4 {
    assert_eq!(m.cols(), in_c * h * w, "matrix width mismatch");
    Kernel4::new(m.rows(), in_c, h, w, m.data().to_vec())
}

/// Output spatial size of a stride/pad convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Rearranges sliding-window patches of a single `channels x h x w` feature
/// map (flattened row-major) into the `(channels*kh*kw) x (oh*ow)` patch
/// matrix, zero-padding at the borders. Column `p` is the flattened patch
/// under output position `p`.
pub fn im2col(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Mat, ConvError> {
    if input.len() != channels * h * w {
        return Err(ConvError::BadInput {
            len: input.len(),
            channels,
            h,
            w,
        });
    }
    let (oh, ow) = match (
        conv_out_dim(h, kh, stride, pad),
        conv_out_dim(w, kw, stride, pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(ConvError::WindowTooLarge {
                kh,
                kw,
                h,
                w,
                pad,
            })
        }
    };
    let mut cols = Mat::zeros(channels * kh * kw, oh * ow);
    for c in 0..channels {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    // Signed source coordinates; negatives fall in padding.
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] =
                            input[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the
/// input feature map (accumulating where patches overlap).
pub fn col2im(
    cols: &Mat,
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, kh, stride, pad).expect("validated at forward time");
    let ow = conv_out_dim(w, kw, stride, pad).expect("validated at forward time");
    debug_assert_eq!(cols.shape(), (channels * kh * kw, oh * ow));
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(c * h + iy as usize) * w + ix as usize] +=
                            cols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    out
}
