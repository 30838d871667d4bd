//! Classifier trait, loss functions, and optimizers.

mod checkpoint;
mod cnn;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use cnn::{Cnn, CnnConfig, Gradients};

use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::warp::Image;

/// Scalar type the network can run in: `f32` for speed, `f64` for
/// numerical checks.
pub trait Real:
    Float + num_traits::NumAssignOps + std::fmt::Debug + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + num_traits::NumAssignOps + std::fmt::Debug + Send + Sync + 'static
{
}

pub(crate) fn real<T: Real>(x: f64) -> T {
    T::from(x).expect("f64 representable in model scalar")
}

/// Anything that maps an image to class logits.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, image: &Image) -> Vec<f32>;
}

/// Index of the largest logit; earlier index wins exact ties.
pub fn predict(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, l) in logits.iter().enumerate().skip(1) {
        if *l > logits[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of a softmax over `logits` against `label`, computed with
/// max-subtraction so large logits cannot overflow `exp`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits
        .iter()
        .map(|l| (*l - max).exp())
        .fold(T::zero(), |a, b| a + b)
        .ln();
    lse - (logits[label] - max)
}

/// Softmax probabilities, shifted by the max logit for stability.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|l| (*l - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, b| a + *b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pass-through classifier that counts `logits` calls, for auditing how
/// many forward passes an attack actually spends.
pub struct CountingClassifier<'a> {
    inner: &'a dyn Classifier,
    count: AtomicU64,
}

impl<'a> CountingClassifier<'a> {
    pub fn new(inner: &'a dyn Classifier) -> Self {
        Self { inner, count: AtomicU64::new(0) }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl Classifier for CountingClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn logits(&self, image: &Image) -> Vec<f32> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.logits(image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First-order optimizer over the network's flat tensor list.
pub struct Optimizer<T> {
    kind: OptimizerKind,
    learning_rate: T,
    step: u64,
    moment1: Vec<Vec<T>>,
    moment2: Vec<Vec<T>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, model: &Cnn<T>) -> Self {
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        let zeros = || shapes.iter().map(|n| vec![T::zero(); *n]).collect();
        Self {
            kind,
            learning_rate: real(learning_rate),
            step: 0,
            moment1: zeros(),
            moment2: zeros(),
        }
    }

    pub fn step(&mut self, model: &mut Cnn<T>, grads: &Gradients<T>) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (tensor, grad) in model.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (p, g) in tensor.iter_mut().zip(grad) {
                        *p = *p - self.learning_rate * *g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1: T = real(ADAM_BETA1);
                let b2: T = real(ADAM_BETA2);
                let eps: T = real(ADAM_EPS);
                let one = T::one();
                let bias1 = one - b1.powi(self.step as i32);
                let bias2 = one - b2.powi(self.step as i32);
                for ((tensor, grad), (m, v)) in model
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(self.moment1.iter_mut().zip(self.moment2.iter_mut()))
                {
                    for i in 0..tensor.len() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (one - b1) * g;
                        v[i] = b2 * v[i] + (one - b2) * g * g;
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        tensor[i] = tensor[i] - self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One optimizer step on a batch; returns the pre-update mean loss.
/// A non-finite loss aborts with a divergence error.
pub fn train_step<T: Real>(
    model: &mut Cnn<T>,
    optimizer: &mut Optimizer<T>,
    batch: &[(&Image, usize)],
) -> Result<f64> {
    let (grads, loss) = model.batch_gradients(batch)?;
    let loss_f64 = loss.to_f64().unwrap_or(f64::NAN);
    if !loss_f64.is_finite() {
        return Err(Error::Divergence(format!("batch loss is {loss_f64}")));
    }
    optimizer.step(model, &grads);
    Ok(loss_f64)
}
