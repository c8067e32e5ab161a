//! Minimal neural-network layers with hand-written backward passes.
//! Everything is generic over [`Scalar`] so the training path runs in f32
//! while gradient checks run the identical code in f64.

pub mod adam;
pub mod conv;
pub mod dense;
pub mod pool;

use rand::Rng;

/// Float element type usable in layers. The associated consts avoid pulling a
/// numeric-traits dependency into every signature.
pub trait Scalar:
    ndarray::LinalgScalar + PartialOrd + std::fmt::Debug + std::fmt::Display + Send + Sync
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INF: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn cos(self) -> Self;

    fn abs(self) -> Self {
        if self < Self::ZERO {
            Self::ZERO - self
        } else {
            self
        }
    }
    fn max_s(self, other: Self) -> Self {
        if self < other {
            other
        } else {
            self
        }
    }
    fn min_s(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
    fn clamp_s(self, lo: Self, hi: Self) -> Self {
        self.max_s(lo).min_s(hi)
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INF: Self = f32::NEG_INFINITY;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn cos(self) -> Self {
        f32::cos(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INF: Self = f64::NEG_INFINITY;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Mutable view of one trainable tensor, flattened. Layers yield these in a
/// fixed order; the optimizer and checkpointer key off position and name.
pub struct ParamRef<'a, S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub w: &'a mut [S],
    pub g: &'a mut [S],
}

/// Mutable view of one non-trainable buffer that must survive checkpoints
/// (spectral-norm power-iteration vectors).
pub struct StateRef<'a, S> {
    pub name: String,
    pub w: &'a mut [S],
}

pub type ParamVisitor<'a, 'b, S> = &'a mut dyn FnMut(ParamRef<'b, S>);

/// Uniform init in (-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for
/// dense and conv layers.
pub fn fan_in_uniform<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, out: &mut [S]) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in out.iter_mut() {
        *v = S::from_f64(rng.gen_range(-bound..bound));
    }
}

/// Global L2 norm across a set of gradient slices, accumulated in f64.
pub fn global_norm<S: Scalar>(slices: &[&[S]]) -> f64 {
    let mut acc = 0.0f64;
    for s in slices {
        for &v in s.iter() {
            let v = v.to_f64();
            acc += v * v;
        }
    }
    acc.sqrt()
}
