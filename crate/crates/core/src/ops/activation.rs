use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu if x > T::zero() => x,
            Activation::LeakyRelu => x * T::of(LEAKY_SLOPE),
            Activation::Identity => x,
        }
    }

    /// Derivative; at exactly zero the negative-side slope is used.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu if x > T::zero() => T::one(),
            Activation::LeakyRelu => T::of(LEAKY_SLOPE),
            Activation::Identity => T::one(),
        }
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    input.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>, kind: Activation) -> Tensor<T> {
    input.zip_map(grad_out, |x, g| g * kind.derivative(x)).expect("activation gradient shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaky_values() {
        assert_eq!(Activation::LeakyRelu.apply(2.0f64), 2.0);
        assert_eq!(Activation::LeakyRelu.apply(-1.0f64), -0.01);
        assert_eq!(Activation::LeakyRelu.derivative(0.0f64), 0.01);
        assert_eq!(Activation::Identity.apply(-3.0f64), -3.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(Shape::new(1, 3, 4, 4), 1.0, &mut rng);
        let probe = Tensor::<f64>::randn(x.shape(), 1.0, &mut rng);
        let g = activation_backward(&x, &probe, Activation::LeakyRelu);
        let h = 1e-5;
        for i in 0..x.len() {
            let v = x.data()[i];
            if v.abs() < 10.0 * h {
                continue;
            }
            let fd = (Activation::LeakyRelu.apply(v + h) - Activation::LeakyRelu.apply(v - h)) / (2.0 * h) * probe.data()[i];
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-6);
        }
    }
}
