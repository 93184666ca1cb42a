//! Batch normalization over (N, H, W) per channel.

use ndarray::{Array1, Array4};

use super::{join, Mode, Param, StateFn, StateMutFn};

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
}

/// 2-d batch norm. Train mode normalizes with batch statistics and updates
/// the running buffers; eval mode uses the running buffers. A frozen backbone
/// must be driven in eval mode so its buffers never move.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub channels: usize,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels).into_dyn()),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            channels,
            cache: None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batchnorm channels");
        let count = (n * h * w) as f64;
        let mut out = Array4::zeros(x.raw_dim());

        if mode == Mode::Train {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let slice = x.slice(ndarray::s![.., ch, .., ..]);
                let m = slice.sum() / count;
                let v = slice.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / count;
                mean[ch] = m;
                var[ch] = v;
            }
            let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let mut x_hat = Array4::zeros(x.raw_dim());
            for ch in 0..c {
                let g = self.gamma.value[[ch]];
                let b = self.beta.value[[ch]];
                let m = mean[ch];
                let is = inv_std[ch];
                ndarray::azip!((
                    xh in &mut x_hat.slice_mut(ndarray::s![.., ch, .., ..]),
                    o in &mut out.slice_mut(ndarray::s![.., ch, .., ..]),
                    xv in &x.slice(ndarray::s![.., ch, .., ..])
                ) {
                    *xh = (xv - m) * is;
                    *o = g * *xh + b;
                });
            }
            // Running buffers keep the unbiased variance.
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch]
                    + self.momentum * var[ch] * unbias;
            }
            self.cache = Some(BnCache { x_hat, inv_std });
        } else {
            for ch in 0..c {
                let g = self.gamma.value[[ch]];
                let b = self.beta.value[[ch]];
                let m = self.running_mean[ch];
                let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                ndarray::azip!((
                    o in &mut out.slice_mut(ndarray::s![.., ch, .., ..]),
                    xv in &x.slice(ndarray::s![.., ch, .., ..])
                ) {
                    *o = g * (xv - m) * is + b;
                });
            }
            self.cache = None;
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let BnCache { x_hat, inv_std } = self
            .cache
            .take()
            .expect("batchnorm backward without train forward");
        let (n, c, h, w) = grad_out.dim();
        let count = (n * h * w) as f64;
        let mut grad_x = Array4::zeros(grad_out.raw_dim());
        for ch in 0..c {
            let g_slice = grad_out.slice(ndarray::s![.., ch, .., ..]);
            let xh_slice = x_hat.slice(ndarray::s![.., ch, .., ..]);
            let sum_g = g_slice.sum();
            let sum_gx: f64 = g_slice.iter().zip(xh_slice.iter()).map(|(a, b)| a * b).sum();
            self.gamma.grad[[ch]] += sum_gx;
            self.beta.grad[[ch]] += sum_g;
            let scale = self.gamma.value[[ch]] * inv_std[ch] / count;
            ndarray::azip!((
                gx in &mut grad_x.slice_mut(ndarray::s![.., ch, .., ..]),
                g in &g_slice,
                xh in &xh_slice
            ) {
                *gx = scale * (count * g - sum_g - xh * sum_gx);
            });
        }
        grad_x
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        f(join(prefix, "gamma"), self.gamma.value.view());
        f(join(prefix, "beta"), self.beta.value.view());
        f(
            join(prefix, "running_mean"),
            self.running_mean.view().into_dyn(),
        );
        f(
            join(prefix, "running_var"),
            self.running_var.view().into_dyn(),
        );
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        f(join(prefix, "gamma"), self.gamma.value.view_mut());
        f(join(prefix, "beta"), self.beta.value.view_mut());
        f(
            join(prefix, "running_mean"),
            self.running_mean.view_mut().into_dyn(),
        );
        f(
            join(prefix, "running_var"),
            self.running_var.view_mut().into_dyn(),
        );
    }
}
