//! Fully connected layer, y = x W^T + b.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::{join, uniform_fanin, Mode, Param, StateFn, StateMutFn};

/// Affine map with weight stored as (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Param::new(uniform_fanin(rng, &[out_dim, in_dim], in_dim));
        let bias = Param::new(uniform_fanin(rng, &[out_dim], in_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            cache: None,
        }
    }

    /// Zero-initialized variant, used by tests that need an exactly known map.
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::zeros(&[out_dim, in_dim]),
            bias: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
            cache: None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("linear weight is 2-d")
    }

    fn bias1(&self) -> ndarray::ArrayView1<'_, f64> {
        self.bias
            .value
            .view()
            .into_dimensionality()
            .expect("linear bias is 1-d")
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_dim, "linear input dim");
        let out = x.dot(&self.weight2().t()) + self.bias1();
        self.cache = (mode == Mode::Train).then(|| x.clone());
        out
    }

    /// Single-vector forward used on inference paths.
    pub fn forward_one(&self, x: &Array1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.in_dim, "linear input dim");
        self.weight2().dot(x) + self.bias1()
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        let x = self
            .cache
            .take()
            .expect("linear backward without train forward");
        let gw = grad_out.t().dot(&x);
        self.weight
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .scaled_add(1.0, &gw);
        let gb = grad_out.sum_axis(Axis(0));
        self.bias
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .scaled_add(1.0, &gb);
        grad_out.dot(&self.weight2())
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        f(join(prefix, "weight"), self.weight.value.view());
        f(join(prefix, "bias"), self.bias.value.view());
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        f(join(prefix, "weight"), self.weight.value.view_mut());
        f(join(prefix, "bias"), self.bias.value.view_mut());
    }
}
