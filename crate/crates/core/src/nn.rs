//! CPU tensor kernels for single images in channel-major (C, H, W) layout.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, Axis};

/// 2-D convolution with symmetric zero padding, via im2col and one GEMM.
///
/// `weight` is laid out (out_channels, in_channels, kh, kw).
pub fn conv2d(
    input: ArrayView3<f32>,
    weight: &Array4<f32>,
    bias: ArrayView1<f32>,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let (c, h, w) = input.dim();
    let (o, i, kh, kw) = weight.dim();
    assert_eq!(c, i, "conv input has {c} channels, kernel expects {i}");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let kernel = weight
        .view()
        .into_shape_with_order((o, i * kh * kw))
        .expect("contiguous kernel");

    let mut out = if kh == 1 && kw == 1 && pad == 0 {
        let x = if stride == 1 {
            input.to_owned()
        } else {
            input.slice(s![.., ..;stride, ..;stride]).to_owned()
        };
        let x = x
            .into_shape_with_order((c, oh * ow))
            .expect("contiguous input");
        kernel.dot(&x)
    } else {
        kernel.dot(&im2col(input, kh, kw, stride, pad, oh, ow))
    };
    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        if b != 0.0 {
            row.mapv_inplace(|v| v + b);
        }
    }
    out.into_shape_with_order((o, oh, ow))
        .expect("GEMM output is contiguous")
}

fn im2col(
    input: ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, h, w) = input.dim();
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut cols = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    let dst = cols.as_slice_mut().expect("fresh array");
    let n = oh * ow;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let out_row = &mut dst[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_line = &mut out_row[oy * ow..(oy + 1) * ow];
                    for (ox, v) in out_line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *v = line[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Inference-mode batch normalization over the channel axis.
pub fn batch_norm(
    x: &mut Array3<f32>,
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
    mean: &Array1<f32>,
    var: &Array1<f32>,
    eps: f32,
) {
    for (ch, mut plane) in x.axis_iter_mut(Axis(0)).enumerate() {
        let scale = gamma[ch] / (var[ch] + eps).sqrt();
        let shift = beta[ch] - mean[ch] * scale;
        plane.mapv_inplace(|v| v * scale + shift);
    }
}

pub fn relu(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Max pooling over a zero-padded input.
///
/// Zero padding matches max pooling with -inf padding whenever the input is
/// non-negative, as it is after a ReLU.
pub fn max_pool(x: ArrayView3<f32>, size: usize, stride: usize, pad: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - size) / stride + 1;
    let ow = (w + 2 * pad - size) / stride + 1;
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..size {
                    for kx in 0..size {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            0.0
                        } else {
                            x[[ch, iy as usize, ix as usize]]
                        };
                        m = m.max(v);
                    }
                }
                out[[ch, oy, ox]] = m;
            }
        }
    }
    out
}

/// Mean over the spatial axes, one value per channel.
pub fn global_avg_pool(x: ArrayView3<f32>) -> Array1<f32> {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    Array1::from_iter((0..c).map(|ch| {
        let sum: f64 = x.index_axis(Axis(0), ch).iter().map(|&v| v as f64).sum();
        (sum / n) as f32
    }))
}

/// HWC image tensor to CHW.
pub fn hwc_to_chw(x: ArrayView3<f32>) -> Array3<f32> {
    x.permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}
