//! 2-D FFT of real CHW images via rustfft. Arbitrary H and W are handled
//! by rustfft's mixed-radix planner; no internal padding is performed.
//! The spectrum is stored full-size (H x W complex bins per channel) and
//! is conjugate-symmetric because the input is real.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{shape_str, Scalar, Tensor, TensorError};

/// Full-size complex spectrum of a real CHW image. Forward transform is
/// unnormalized, so the DC bin equals the per-channel pixel sum.
#[derive(Debug, Clone)]
pub struct Spectrum<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major [C, H, W] complex bins.
    pub data: Vec<Complex<T>>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn bin(&self, c: usize, u: usize, v: usize) -> Complex<T> {
        self.data[(c * self.height + u) * self.width + v]
    }
}

fn fft_2d_inplace<T: Scalar>(
    data: &mut [Complex<T>],
    h: usize,
    w: usize,
    inverse: bool,
) {
    let mut planner = FftPlanner::<T>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for v in 0..w {
        for u in 0..h {
            col[u] = data[u * w + v];
        }
        col_fft.process(&mut col);
        for u in 0..h {
            data[u * w + v] = col[u];
        }
    }
}

/// Forward 2-D FFT of a real image, per channel.
pub fn rfft2<T: Scalar>(input: &Tensor<T>) -> Result<Spectrum<T>, TensorError> {
    if input.shape().len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "rfft2",
            expected: "rank-3 tensor [C,H,W]".into(),
            got: shape_str(input.shape()),
        });
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h == 0 || w == 0 {
        return Err(TensorError::InvalidArg {
            op: "rfft2",
            msg: "spatial dimensions must be >= 1".into(),
        });
    }
    input.check_finite("rfft2")?;
    let mut data: Vec<Complex<T>> = input
        .data()
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    for ch in 0..c {
        fft_2d_inplace(&mut data[ch * h * w..(ch + 1) * h * w], h, w, false);
    }
    Ok(Spectrum {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

/// Inverse 2-D FFT back to a real image. The spectrum must carry the
/// conjugate symmetry of a real signal; the imaginary residue after the
/// inverse transform is discarded.
pub fn irfft2<T: Scalar>(
    spectrum: &Spectrum<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>, TensorError> {
    if spectrum.height != h || spectrum.width != w {
        return Err(TensorError::ShapeMismatch {
            op: "irfft2",
            expected: format!("spectrum of size {h}x{w}"),
            got: format!("{}x{}", spectrum.height, spectrum.width),
        });
    }
    let c = spectrum.channels;
    let mut data = spectrum.data.clone();
    for ch in 0..c {
        fft_2d_inplace(&mut data[ch * h * w..(ch + 1) * h * w], h, w, true);
    }
    let norm = T::of_f64((h * w) as f64);
    let out: Vec<T> = data.iter().map(|z| z.re / norm).collect();
    let t = Tensor::new(vec![c, h, w], out)?;
    t.check_finite("irfft2")?;
    Ok(t)
}
