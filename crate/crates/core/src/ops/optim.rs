//! First-order optimizers over named parameter tensors.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

/// Optimizer state is keyed by parameter name, so it survives reordering but
/// must be rebuilt when a parameter changes shape.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    state: HashMap<String, Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, state: HashMap::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    /// Applies one update to every parameter. All parameters must carry a
    /// gradient; nothing is modified if one is missing.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    {
        let params: Vec<_> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        let lr = T::of(self.lr);
        for (name, p) in params {
            let (data, grad) = p.param_and_grad();
            let grad = grad.expect("checked above");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in data.iter_mut().zip(grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let st = self
                        .state
                        .entry(name)
                        .or_insert_with(|| Moments { m: vec![T::zero(); data.len()], v: vec![T::zero(); data.len()], t: 0 });
                    if st.m.len() != data.len() {
                        *st = Moments { m: vec![T::zero(); data.len()], v: vec![T::zero(); data.len()], t: 0 };
                    }
                    st.t += 1;
                    let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::one() - b1.powi(st.t);
                    let c2 = T::one() - b2.powi(st.t);
                    for ((w, &g), (m, v)) in data.iter_mut().zip(grad).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn param(value: f64, grad: Option<f64>) -> Tensor<f64> {
        let mut t = Tensor::full(Shape::new(1, 1, 1, 1), value);
        if let Some(g) = grad {
            t.accumulate_grad(&[g]);
        }
        t
    }

    #[test]
    fn sgd_update() {
        let mut p = param(1.0, Some(0.5));
        Optimizer::sgd(0.1).step([("p".to_string(), &mut p)]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut p = param(1.25, Some(0.0));
            Optimizer::new(kind, 0.1).step([("p".to_string(), &mut p)]).unwrap();
            assert_eq!(p.data()[0], 1.25);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction: p -= 0.1 * 1 / (1 + 1e-8)
        let mut p = param(1.0, Some(1.0));
        Optimizer::adam(0.1).step([("p".to_string(), &mut p)]).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut a = param(1.0, Some(1.0));
        let mut b = param(2.0, None);
        let err = Optimizer::sgd(0.1).step([("a".to_string(), &mut a), ("b".to_string(), &mut b)]).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "b"));
        assert_eq!(a.data()[0], 1.0);
    }
}
