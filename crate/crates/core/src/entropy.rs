//! Quantization surrogates and idealized code lengths for the latents.
//!
//! A latent value `v` with scale `s` is charged `-log2 P(v)` bits, where
//! `P(v)` is the mass a zero-mean Gaussian puts on the unit bin centred at
//! `v`. Training feeds the noisy surrogate, evaluation feeds rounded values.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::scalar::{normal_cdf, normal_pdf, Scalar};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SCALE_FLOOR: f64 = 0.11;
pub const DEFAULT_LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Adds independent `U(-0.5, 0.5)` noise; the open interval is exact.
pub fn add_uniform_noise<T: Scalar>(y: &Tensor<T>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = y.clone();
    out.clear_grad();
    for v in out.data_mut() {
        let k = (rng.next_u64() >> 11) as f64;
        let u = (k + 0.5) * (1.0 / (1u64 << 53) as f64) - 0.5;
        *v += T::of(u);
    }
    out
}

/// Round half away from zero.
pub fn quantize_round<T: Scalar>(y: &Tensor<T>) -> Tensor<T> {
    y.map(|v| v.round())
}

/// Per-element code lengths and their row-major sum.
#[derive(Debug, Clone)]
pub struct Rate<T> {
    pub bits: Tensor<T>,
    pub total: T,
}

/// Bin mass of a zero-mean Gaussian and its partial derivatives.
struct Bin<T> {
    bits: T,
    dbits_dv: T,
    dbits_ds: T,
}

/// `v` is already centred; `s` is the raw scale before flooring.
fn bin<T: Scalar>(v: T, s: T, scale_floor: T, likelihood_floor: T) -> Bin<T> {
    let half = T::of(0.5);
    let s_eff = s.max(scale_floor);
    let a = v.abs();
    // Mirror into the lower tail so both CDF terms stay relative-accurate.
    let upper = (half - a) / s_eff;
    let lower = (-half - a) / s_eff;
    let p = normal_cdf(upper) - normal_cdf(lower);
    if p <= likelihood_floor {
        return Bin { bits: -likelihood_floor.log2(), dbits_dv: T::zero(), dbits_ds: T::zero() };
    }
    let (pu, pl) = (normal_pdf(upper), normal_pdf(lower));
    let dp_da = (pl - pu) / s_eff;
    let dp_dv = if v > T::zero() {
        dp_da
    } else if v < T::zero() {
        -dp_da
    } else {
        T::zero()
    };
    let dp_ds = if s >= scale_floor { (lower * pl - upper * pu) / s_eff } else { T::zero() };
    let dbits_dp = -T::one() / (p * T::of(std::f64::consts::LN_2));
    Bin { bits: -p.log2(), dbits_dv: dbits_dp * dp_dv, dbits_ds: dbits_dp * dp_ds }
}

/// Zero-mean Gaussian conditional model for the main latent; scales come
/// from the hyper decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianConditional<T> {
    pub scale_floor: T,
    pub likelihood_floor: T,
}

impl<T: Scalar> Default for GaussianConditional<T> {
    fn default() -> Self {
        Self { scale_floor: T::of(DEFAULT_SCALE_FLOOR), likelihood_floor: T::of(DEFAULT_LIKELIHOOD_FLOOR) }
    }
}

impl<T: Scalar> GaussianConditional<T> {
    pub fn new(scale_floor: T, likelihood_floor: T) -> Result<Self> {
        if scale_floor <= T::zero() || likelihood_floor <= T::zero() {
            return Err(Error::invalid("gaussian model", "floors must be positive"));
        }
        Ok(Self { scale_floor, likelihood_floor })
    }

    pub fn rate(&self, y_hat: &Tensor<T>, sigma: &Tensor<T>) -> Result<Rate<T>> {
        check_same(y_hat, sigma)?;
        let bits: Vec<T> = y_hat
            .data()
            .iter()
            .zip(sigma.data())
            .map(|(&v, &s)| bin(v, s, self.scale_floor, self.likelihood_floor).bits)
            .collect();
        Ok(finish(y_hat.shape(), bits))
    }

    /// Gradients of `upstream * total_bits` w.r.t. the latent and the scales.
    pub fn rate_backward(&self, y_hat: &Tensor<T>, sigma: &Tensor<T>, upstream: T) -> Result<(Tensor<T>, Tensor<T>)> {
        check_same(y_hat, sigma)?;
        let mut dv = Tensor::zeros(y_hat.shape());
        let mut ds = Tensor::zeros(y_hat.shape());
        for (i, (&v, &s)) in y_hat.data().iter().zip(sigma.data()).enumerate() {
            let b = bin(v, s, self.scale_floor, self.likelihood_floor);
            dv.data_mut()[i] = upstream * b.dbits_dv;
            ds.data_mut()[i] = upstream * b.dbits_ds;
        }
        Ok((dv, ds))
    }
}

/// Per-channel Gaussian prior for the hyper latent with learnable mean and
/// scale, integrated over the same unit bins as [`GaussianConditional`].
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel<T> {
    pub mean: Tensor<T>,
    pub scale: Tensor<T>,
    pub scale_floor: T,
    pub likelihood_floor: T,
}

/// Gradients of the factorized rate.
#[derive(Debug, Clone)]
pub struct FactorizedGrads<T> {
    pub input: Tensor<T>,
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> FactorizedModel<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::vector(vec![T::zero(); channels]),
            scale: Tensor::vector(vec![T::one(); channels]),
            scale_floor: T::of(DEFAULT_SCALE_FLOOR),
            likelihood_floor: T::of(DEFAULT_LIKELIHOOD_FLOOR),
        }
    }

    pub fn from_parts(mean: Vec<T>, scale: Vec<T>) -> Result<Self> {
        ensure_dim("factorized model", "scale length", scale.len(), mean.len())?;
        let mut m = Self::new(mean.len());
        m.mean = Tensor::vector(mean);
        m.scale = Tensor::vector(scale);
        m.clamp_scales();
        Ok(m)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn num_params(&self) -> usize {
        self.mean.len() + self.scale.len()
    }

    /// Re-imposes `scale >= scale_floor`; called after every update.
    pub fn clamp_scales(&mut self) {
        let floor = self.scale_floor;
        self.scale.data_mut().iter_mut().for_each(|s| *s = s.max(floor));
    }

    pub fn rate(&self, z_hat: &Tensor<T>) -> Result<Rate<T>> {
        self.rate_masked(z_hat, None)
    }

    /// Rate counting only channels with `active[c]`; inactive channels cost
    /// nothing.
    pub fn rate_masked(&self, z_hat: &Tensor<T>, active: Option<&[bool]>) -> Result<Rate<T>> {
        let s = z_hat.shape();
        self.check_mask(s.c, active)?;
        let plane = s.plane();
        let bits = z_hat
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % s.c;
                if active.is_some_and(|a| !a[c]) {
                    return T::zero();
                }
                bin(v - self.mean.data()[c], self.scale.data()[c], self.scale_floor, self.likelihood_floor).bits
            })
            .collect();
        Ok(finish(s, bits))
    }

    pub fn rate_backward(&self, z_hat: &Tensor<T>, upstream: T) -> Result<FactorizedGrads<T>> {
        self.rate_backward_masked(z_hat, upstream, None)
    }

    pub fn rate_backward_masked(&self, z_hat: &Tensor<T>, upstream: T, active: Option<&[bool]>) -> Result<FactorizedGrads<T>> {
        let s = z_hat.shape();
        self.check_mask(s.c, active)?;
        let plane = s.plane();
        let mut input = Tensor::zeros(s);
        let mut mean = vec![T::zero(); s.c];
        let mut scale = vec![T::zero(); s.c];
        for (i, &v) in z_hat.data().iter().enumerate() {
            let c = (i / plane) % s.c;
            if active.is_some_and(|a| !a[c]) {
                continue;
            }
            let b = bin(v - self.mean.data()[c], self.scale.data()[c], self.scale_floor, self.likelihood_floor);
            input.data_mut()[i] = upstream * b.dbits_dv;
            mean[c] -= upstream * b.dbits_dv;
            scale[c] += upstream * b.dbits_ds;
        }
        Ok(FactorizedGrads { input, mean, scale })
    }

    fn check_mask(&self, channels: usize, active: Option<&[bool]>) -> Result<()> {
        ensure_dim("factorized rate", "channels", channels, self.channels())?;
        if let Some(a) = active {
            ensure_dim("factorized rate", "mask length", a.len(), channels)?;
        }
        Ok(())
    }

    /// Keeps the listed channels.
    pub fn select(&self, channels: &[usize]) -> Self {
        Self {
            mean: Tensor::vector(channels.iter().map(|&c| self.mean.data()[c]).collect()),
            scale: Tensor::vector(channels.iter().map(|&c| self.scale.data()[c]).collect()),
            scale_floor: self.scale_floor,
            likelihood_floor: self.likelihood_floor,
        }
    }
}

/// `R + lambda * D` with the rate normalised to bits per pixel.
pub fn rd_loss<T: Scalar>(rate_bits_total: T, mse: T, lambda: T, num_pixels: usize) -> Result<T> {
    if num_pixels == 0 {
        return Err(Error::invalid("rd_loss", "pixel count must be positive"));
    }
    Ok(rate_bits_total / T::of(num_pixels as f64) + lambda * mse)
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid("gaussian rate", format!("latent {} vs scale {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn finish<T: Scalar>(shape: Shape, bits: Vec<T>) -> Rate<T> {
    let total = bits.iter().fold(T::zero(), |acc, &b| acc + b);
    Rate { bits: Tensor::from_vec(shape, bits).expect("shape preserved"), total }
}
