//! Scalar abstraction and small dense kernels shared by the model and the
//! steering functions.
//!
//! Everything in the toolkit runs in `f32`; the `f64` instantiation exists so
//! that finite-difference oracles can evaluate the exact same forward code at
//! higher precision.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn widen(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

pub fn cast_vec<A: Real, B: Real>(xs: &[A]) -> Vec<B> {
    xs.iter().map(|x| B::of(x.widen())).collect()
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

#[inline]
pub fn l2_norm<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// `y += a * x`
#[inline]
pub fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * *xi;
    }
}

/// `out = bias + x · W` with `W` stored row-major as `[x.len(), out.len()]`.
pub fn vec_mat<F: Real>(x: &[F], w: &[F], bias: Option<&[F]>, out: &mut [F]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    match bias {
        Some(b) => out.copy_from_slice(b),
        None => out.iter_mut().for_each(|o| *o = F::zero()),
    }
    for (i, xi) in x.iter().enumerate() {
        axpy(out, *xi, &w[i * n..(i + 1) * n]);
    }
}

/// Backward of [`vec_mat`]: `dx += W · dout`, and optionally `dW += x ⊗ dout`.
pub fn vec_mat_backward<F: Real>(x: &[F], w: &[F], dout: &[F], dx: &mut [F], dw: Option<&mut [F]>) {
    let n = dout.len();
    for (i, dxi) in dx.iter_mut().enumerate() {
        *dxi = *dxi + dot(&w[i * n..(i + 1) * n], dout);
    }
    if let Some(dw) = dw {
        for (i, xi) in x.iter().enumerate() {
            axpy(&mut dw[i * n..(i + 1) * n], *xi, dout);
        }
    }
}

/// SplitMix64 finalizer; used wherever a stateless, seedable hash of a few
/// integers is needed (dropout masks, subset selection).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x5EED_u64, |acc, w| mix64(acc ^ mix64(*w)))
}

/// Uniform in `[0, 1)` from a hash value.
#[inline]
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}
