//! Minimal dense/conv building blocks with hand-written backward passes.
//!
//! Everything is f64 on the CPU. Layers cache what their backward pass needs
//! during a `Mode::Train` forward; `Mode::Eval` forwards are pure. Gradients
//! accumulate into [`Param::grad`] and are applied by [`Sgd`].

pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::Conv2d;
pub use linear::Linear;
pub use loss::cross_entropy;
pub use norm::BatchNorm2d;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Forward-pass mode. Train caches intermediates and engages dropout and
/// batch statistics; Eval is deterministic and cache-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor together with its gradient and momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub velocity: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let velocity = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            velocity,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Symmetric uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fanin(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    out
}

/// SGD with momentum: v <- momentum * v + g; w <- w - lr * v.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub momentum: f64,
}

impl Sgd {
    pub fn update(&self, param: &mut Param, lr: f64) {
        ndarray::azip!((v in &mut param.velocity, g in &param.grad) {
            *v = self.momentum * *v + *g;
        });
        ndarray::azip!((w in &mut param.value, v in &param.velocity) {
            *w -= lr * *v;
        });
    }
}

/// Elementwise activation applied inside conv blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    /// ReLU clamped at 6.
    Relu6,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
        }
    }

    /// Derivative as a function of the pre-activation value.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Inverted dropout with its own seeded RNG stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub prob: f64,
    rng: ChaCha8Rng,
    mask: Option<ArrayD<f64>>,
}

impl Dropout {
    pub fn new(prob: f64, rng: ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&prob), "dropout prob must be in [0,1)");
        Self {
            prob,
            rng,
            mask: None,
        }
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode) -> ArrayD<f64> {
        if mode == Mode::Eval || self.prob == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.prob;
        let mut mask = ArrayD::zeros(x.raw_dim());
        for m in mask.iter_mut() {
            if self.rng.random::<f64>() < keep {
                *m = 1.0 / keep;
            }
        }
        let out = x * &mask;
        self.mask = Some(mask);
        out
    }

    pub fn backward(&mut self, grad: &ArrayD<f64>) -> ArrayD<f64> {
        match self.mask.take() {
            Some(mask) => grad * &mask,
            None => grad.clone(),
        }
    }
}

/// Named view over a tensor of persistent state (weights and norm buffers).
pub type StateFn<'v> = dyn FnMut(String, ArrayViewD<'_, f64>) + 'v;
/// Mutable counterpart used when restoring checkpoints.
pub type StateMutFn<'v> = dyn FnMut(String, ArrayViewMutD<'_, f64>) + 'v;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fanin_init_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = uniform_fanin(&mut rng, &[4, 9], 9);
        let bound = 1.0 / 3.0;
        assert!(a.iter().all(|v| v.abs() < bound));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let b = uniform_fanin(&mut rng2, &[4, 9], 9);
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_momentum_convention() {
        // v <- m*v + g; w <- w - lr*v, starting from v = 0.
        let mut p = Param::new(ndarray::arr1(&[1.0, -2.0]).into_dyn());
        p.grad = ndarray::arr1(&[0.5, 0.25]).into_dyn();
        let sgd = Sgd { momentum: 0.9 };
        sgd.update(&mut p, 0.1);
        assert_eq!(p.value.as_slice().unwrap(), &[1.0 - 0.05, -2.0 - 0.025]);
        // Second step with the same gradient folds momentum in.
        sgd.update(&mut p, 0.1);
        let v1 = 0.9 * 0.5 + 0.5;
        assert!((p.value[[0]] - (0.95 - 0.1 * v1)).abs() < 1e-15);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Dropout::new(0.5, rng);
        let x = ArrayD::from_elem(IxDyn(&[1000]), 1.0);
        let eval = d.forward(&x, Mode::Eval);
        assert_eq!(eval, x);
        let train = d.forward(&x, Mode::Train);
        for v in train.iter() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
        let mean = train.sum() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15);
    }

    #[test]
    fn relu6_derivative_matches_clamp() {
        let a = Activation::Relu6;
        assert_eq!(a.apply(7.5), 6.0);
        assert_eq!(a.derivative(7.5), 0.0);
        assert_eq!(a.apply(-1.0), 0.0);
        assert_eq!(a.derivative(3.0), 1.0);
    }
}
