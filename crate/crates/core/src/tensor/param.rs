use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_KEY: AtomicUsize = AtomicUsize::new(0);

/// Process-unique identity of a parameter; ties tape leaves back to storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(usize);

impl ParamKey {
    fn fresh() -> Self {
        ParamKey(NEXT_KEY.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor with its gradient slot and Adam moments.
pub struct Parameter<T> {
    name: String,
    key: ParamKey,
    value: Arc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
    moment1: Tensor<T>,
    moment2: Tensor<T>,
    steps: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape();
        Parameter {
            name: name.into(),
            key: ParamKey::fresh(),
            value: Arc::new(value),
            grad: None,
            moment1: Tensor::zeros(shape),
            moment2: Tensor::zeros(shape),
            steps: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{}: {} vs {}", self.name, value.shape(), self.shape()),
            ));
        }
        self.value = Arc::new(value);
        Ok(())
    }

    pub fn moments(&self) -> (&Tensor<T>, &Tensor<T>) {
        (&self.moment1, &self.moment2)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_optimizer_state(&mut self, m1: Tensor<T>, m2: Tensor<T>, steps: u64) -> Result<()> {
        if m1.shape() != self.shape() || m2.shape() != self.shape() {
            return Err(Error::shape("set_optimizer_state", self.name.clone()));
        }
        self.moment1 = m1;
        self.moment2 = m2;
        self.steps = steps;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            key: ParamKey::fresh(),
            value: Arc::new(self.value.cast()),
            grad: self.grad.as_ref().map(Tensor::cast),
            moment1: self.moment1.cast(),
            moment2: self.moment2.cast(),
            steps: self.steps,
        }
    }
}

impl<T: Real> Clone for Parameter<T> {
    /// Clones get a fresh key so two copies can share one tape.
    fn clone(&self) -> Self {
        Parameter {
            name: self.name.clone(),
            key: ParamKey::fresh(),
            value: Arc::clone(&self.value),
            grad: self.grad.clone(),
            moment1: self.moment1.clone(),
            moment2: self.moment2.clone(),
            steps: self.steps,
        }
    }
}

impl<T: Real> std::fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Parameter({}, {})", self.name, self.shape())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update; consumes and clears every gradient.
    pub fn step<'a, T: Real>(&self, params: impl IntoIterator<Item = &'a mut Parameter<T>>) -> Result<()> {
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        for p in params {
            let grad = p.grad.take().ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            if grad.shape() != p.shape() {
                return Err(Error::shape("adam_step", p.name.clone()));
            }
            p.steps += 1;
            let t = p.steps as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let step = T::of(self.lr / c1);
            let c2 = T::of(c2);
            let eps = T::of(self.eps);
            let m1 = p.moment1.data_mut();
            let m2 = p.moment2.data_mut();
            let value = Arc::make_mut(&mut p.value).data_mut();
            for i in 0..value.len() {
                let g = grad.data()[i];
                m1[i] = b1 * m1[i] + (one - b1) * g;
                m2[i] = b2 * m2[i] + (one - b2) * g * g;
                value[i] = value[i] - step * m1[i] / ((m2[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<'a, T: Real>(params: impl IntoIterator<Item = &'a mut Parameter<T>>, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut Tensor<T>> = params.into_iter().filter_map(|p| p.grad.as_mut()).collect();
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter<f64> {
        Parameter::new("p", Tensor::scalar(v))
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Parameter::new("w", Tensor::<f32>::full(Shape::new(1, 2, 3, 3), 0.7));
        for _ in 0..5 {
            p.grad = Some(Tensor::zeros(p.shape()));
            Adam::new(1e-4).step([&mut p]).unwrap();
        }
        assert!(p.value().data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; corrected m/sqrt(v) = 1 so the step is lr * 1/(1+eps).
        let mut p = scalar_param(0.5);
        p.grad = Some(Tensor::scalar(1.0));
        Adam::new(1e-4).step([&mut p]).unwrap();
        let moved = 0.5 - p.value().data()[0];
        assert!((moved - 1e-4).abs() < 1e-10, "moved {moved}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = scalar_param(0.0);
        let err = Adam::new(1e-3).step([&mut p]).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "p"));
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut a = scalar_param(0.3);
        let mut b = scalar_param(0.3);
        for i in 0..50 {
            let g = ((i as f64) * 0.7).sin();
            a.grad = Some(Tensor::scalar(g));
            b.grad = Some(Tensor::scalar(g));
            Adam::new(1e-2).step([&mut a, &mut b]).unwrap();
        }
        assert_eq!(a.value().data()[0].to_bits(), b.value().data()[0].to_bits());
        assert!(a.grad.is_none());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = scalar_param(0.0);
        let mut b = scalar_param(0.0);
        a.grad = Some(Tensor::scalar(3.0));
        b.grad = Some(Tensor::scalar(4.0));
        let norm = clip_grad_norm([&mut a, &mut b], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a.grad.as_ref().unwrap().data()[0] - 0.6).abs() < 1e-12);
        assert!((b.grad.as_ref().unwrap().data()[0] - 0.8).abs() < 1e-12);
    }
}
