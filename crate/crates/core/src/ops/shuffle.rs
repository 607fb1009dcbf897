//! Sub-pixel rearrangement between channels and space.
//!
//! Input channel `c * alpha^2 + i * alpha + j` lands at output channel `c`,
//! row offset `i`, column offset `j`. Hence the `alpha^2` input channels that
//! feed output channel `c` are contiguous, and the channels sharing one
//! sub-pixel phase `k = i * alpha + j` form the strided slice
//! `k, k + alpha^2, k + 2 * alpha^2, ...`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn check_alpha(alpha: usize) -> Result<()> {
    if alpha == 0 {
        return Err(Error::invalid("pixel_shuffle", "alpha must be positive"));
    }
    Ok(())
}

/// `(n, c * alpha^2, h, w) -> (n, c, h * alpha, w * alpha)`.
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, alpha: usize) -> Result<Tensor<T>> {
    check_alpha(alpha)?;
    let s = input.shape();
    let a2 = alpha * alpha;
    if !s.c.is_multiple_of(a2) {
        return Err(Error::invalid("pixel_shuffle", format!("{} channels not divisible by alpha^2 = {a2}", s.c)));
    }
    let out_shape = Shape::new(s.n, s.c / a2, s.h * alpha, s.w * alpha);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for ci in 0..s.c {
            let (c, k) = (ci / a2, ci % a2);
            let (i, j) = (k / alpha, k % alpha);
            for y in 0..s.h {
                for x in 0..s.w {
                    *out.at_mut(n, c, y * alpha + i, x * alpha + j) = input.at(n, ci, y, x);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse rearrangement; also the gradient of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, alpha: usize) -> Result<Tensor<T>> {
    check_alpha(alpha)?;
    let s = input.shape();
    if !s.h.is_multiple_of(alpha) || !s.w.is_multiple_of(alpha) {
        return Err(Error::invalid("pixel_unshuffle", format!("spatial size {}x{} not divisible by {alpha}", s.h, s.w)));
    }
    let a2 = alpha * alpha;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c * a2, s.h / alpha, s.w / alpha));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let k = (y % alpha) * alpha + x % alpha;
                    *out.at_mut(n, c * a2 + k, y / alpha, x / alpha) = input.at(n, c, y, x);
                }
            }
        }
    }
    Ok(out)
}
