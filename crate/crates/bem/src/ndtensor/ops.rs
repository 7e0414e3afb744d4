//! Pure tensor operations shared by the tape forward and backward passes.
//! Shapes follow the CHW convention; kernels are [C_out, C_in, kh, kw].

use super::{shape_str, Scalar, Tensor, TensorError};

fn expect_rank<T: Scalar>(
    t: &Tensor<T>,
    rank: usize,
    op: &'static str,
) -> Result<(), TensorError> {
    if t.shape().len() != rank {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("rank-{rank} tensor"),
            got: shape_str(t.shape()),
        });
    }
    Ok(())
}

pub(crate) fn conv_out_dim(
    in_dim: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = in_dim + 2 * padding;
    if k > padded || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    expect_rank(input, 3, "conv2d")?;
    expect_rank(kernel, 4, "conv2d")?;
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kci, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kci != ci {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: format!("kernel with {ci} input channels"),
            got: shape_str(kernel.shape()),
        });
    }
    let (oh, ow) = match (
        conv_out_dim(h, kh, stride, padding),
        conv_out_dim(w, kw, stride, padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(TensorError::InvalidArg {
                op: "conv2d",
                msg: format!(
                    "kernel {kh}x{kw} with stride {stride}, padding {padding} \
                     does not fit input {h}x{w}"
                ),
            })
        }
    };

    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); co * oh * ow];
    for o in 0..co {
        for c in 0..ci {
            let kbase = ((o * ci) + c) * kh * kw;
            let xbase = c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc
                                + x[xbase + iy as usize * w + ix as usize]
                                    * k[kbase + dy * kw + dx];
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = out[(o * oh + oy) * ow + ox] + acc;
                }
            }
        }
    }
    let t = Tensor::new(vec![co, oh, ow], out)?;
    t.check_finite("conv2d")?;
    Ok(t)
}

/// Gradient of conv2d w.r.t. its input (scatter of grad_out through the kernel).
pub(crate) fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    in_shape: &[usize],
) -> Tensor<T> {
    let (ci, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (co, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let g = grad_out.data();
    let k = kernel.data();
    let mut gi = vec![T::zero(); ci * h * w];
    for o in 0..co {
        for c in 0..ci {
            let kbase = ((o * ci) + c) * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[(o * oh + oy) * ow + ox];
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (c * h + iy as usize) * w + ix as usize;
                            gi[idx] = gi[idx] + go * k[kbase + dy * kw + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gi).expect("grad shape")
}

/// Gradient of conv2d w.r.t. the kernel.
pub(crate) fn conv2d_grad_kernel<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    stride: usize,
    padding: usize,
    k_shape: &[usize],
) -> Tensor<T> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let g = grad_out.data();
    let x = input.data();
    let mut gk = vec![T::zero(); co * ci * kh * kw];
    for o in 0..co {
        for c in 0..ci {
            let kbase = ((o * ci) + c) * kh * kw;
            let xbase = c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[(o * oh + oy) * ow + ox];
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = kbase + dy * kw + dx;
                            gk[idx] = gk[idx] + go * x[xbase + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(k_shape.to_vec(), gk).expect("grad shape")
}

/// Per-axis source coordinate and interpolation weights under the
/// half-pixel-center convention: src = (dst + 0.5) * in/out - 0.5, clamped.
fn bilinear_taps(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0).min(in_dim as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_dim - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers. Exact on constant inputs.
pub fn bilinear_resize<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    expect_rank(input, 3, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::InvalidArg {
            op: "bilinear_resize",
            msg: "output dimensions must be >= 1".into(),
        });
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        let base = ch * h * w;
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let ty = T::of_f64(ty);
                let tx = T::of_f64(tx);
                let one = T::one();
                let v = x[base + y0 * w + x0] * (one - ty) * (one - tx)
                    + x[base + y0 * w + x1] * (one - ty) * tx
                    + x[base + y1 * w + x0] * ty * (one - tx)
                    + x[base + y1 * w + x1] * ty * tx;
                out[(ch * out_h + oy) * out_w + ox] = v;
            }
        }
    }
    let t = Tensor::new(vec![c, out_h, out_w], out)?;
    t.check_finite("bilinear_resize")?;
    Ok(t)
}

/// Transpose of `bilinear_resize` (scatter with the same weights).
pub(crate) fn bilinear_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Tensor<T> {
    let (c, oh, ow) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    let ys = bilinear_taps(in_h, oh);
    let xs = bilinear_taps(in_w, ow);
    let g = grad_out.data();
    let mut gi = vec![T::zero(); c * in_h * in_w];
    for ch in 0..c {
        let base = ch * in_h * in_w;
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let go = g[(ch * oh + oy) * ow + ox];
                let ty = T::of_f64(ty);
                let tx = T::of_f64(tx);
                let one = T::one();
                gi[base + y0 * in_w + x0] = gi[base + y0 * in_w + x0] + go * (one - ty) * (one - tx);
                gi[base + y0 * in_w + x1] = gi[base + y0 * in_w + x1] + go * (one - ty) * tx;
                gi[base + y1 * in_w + x0] = gi[base + y1 * in_w + x0] + go * ty * (one - tx);
                gi[base + y1 * in_w + x1] = gi[base + y1 * in_w + x1] + go * ty * tx;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], gi).expect("grad shape")
}

/// Concatenate two CHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    expect_rank(a, 3, "concat_channels")?;
    expect_rank(b, 3, "concat_channels")?;
    if a.shape()[1..] != b.shape()[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            expected: shape_str(&a.shape()[1..]),
            got: shape_str(&b.shape()[1..]),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(
        vec![a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]],
        data,
    )
}

/// Add a per-channel bias vector [C] to a CHW tensor.
pub fn add_channel_bias<T: Scalar>(
    x: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    expect_rank(x, 3, "add_channel_bias")?;
    if bias.shape() != [x.shape()[0]] {
        return Err(TensorError::ShapeMismatch {
            op: "add_channel_bias",
            expected: format!("[{}]", x.shape()[0]),
            got: shape_str(bias.shape()),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let bd = bias.data();
    let mut out = Vec::with_capacity(xd.len());
    for ch in 0..c {
        for i in 0..h * w {
            out.push(xd[ch * h * w + i] + bd[ch]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Reduce a CHW gradient to a per-channel bias gradient [C].
pub(crate) fn channel_bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    let g = grad_out.data();
    let data: Vec<T> = (0..c)
        .map(|ch| g[ch * h * w..(ch + 1) * h * w].iter().copied().sum())
        .collect();
    Tensor::new(vec![c], data).expect("grad shape")
}
