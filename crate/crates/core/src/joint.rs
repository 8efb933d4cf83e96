//! The target density interface shared by estimators, oracles and training.

use std::sync::atomic::{AtomicU64, Ordering};

/// A joint density `p(x, z) = p(z) p(x | z)` over a real latent `z`.
///
/// Gradient methods add `∇_z` of the respective log-density into `grad`
/// and return the log-density value.
pub trait JointModel {
    type Datum: ?Sized;

    fn latent_dim(&self) -> usize;

    fn log_prior(&self, z: &[f64]) -> f64;

    fn log_likelihood(&self, x: &Self::Datum, z: &[f64]) -> f64;

    fn log_prior_grad(&self, z: &[f64], grad: &mut [f64]) -> f64;

    fn log_likelihood_grad(&self, x: &Self::Datum, z: &[f64], grad: &mut [f64]) -> f64;

    fn log_joint(&self, x: &Self::Datum, z: &[f64]) -> f64 {
        self.log_prior(z) + self.log_likelihood(x, z)
    }
}

/// Wraps a model and counts likelihood evaluations (the `#p` unit).
#[derive(Debug)]
pub struct CountingModel<'a, M> {
    inner: &'a M,
    calls: AtomicU64,
}

impl<'a, M> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<M: JointModel> JointModel for CountingModel<'_, M> {
    type Datum = M::Datum;

    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn log_prior(&self, z: &[f64]) -> f64 {
        self.inner.log_prior(z)
    }

    fn log_likelihood(&self, x: &Self::Datum, z: &[f64]) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.log_likelihood(x, z)
    }

    fn log_prior_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        self.inner.log_prior_grad(z, grad)
    }

    fn log_likelihood_grad(&self, x: &Self::Datum, z: &[f64], grad: &mut [f64]) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.log_likelihood_grad(x, z, grad)
    }
}
