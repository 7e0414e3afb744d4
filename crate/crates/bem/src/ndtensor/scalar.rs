use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type for tensors: f32 (training default) or f64 (gradient
/// checks and oracles).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + rustfft::FftNum
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Dtype code used in the checkpoint format: 0 = f32, 1 = f64.
    const DTYPE: u8;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn std_normal<R: Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn std_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;

    fn of_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn std_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
