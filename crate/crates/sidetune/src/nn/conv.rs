//! Grouped 2-d convolution via im2col.

use ndarray::{s, Array2, Array4, Order};
use rand_chacha::ChaCha8Rng;

use super::{join, uniform_fanin, Mode, Param, StateFn, StateMutFn};

/// Square-kernel convolution. Weight layout (out, in/groups, k, k); bias is
/// optional because conv+batchnorm stacks fold it into the norm.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    cache: Option<Array4<f64>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        let cg = in_channels / groups;
        let fan_in = cg * kernel * kernel;
        let weight = Param::new(uniform_fanin(
            rng,
            &[out_channels, cg, kernel, kernel],
            fan_in,
        ));
        let bias = bias.then(|| Param::new(uniform_fanin(rng, &[out_channels], fan_in)));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            cache: None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn im2col(&self, x: &Array4<f64>, group: usize, ho: usize, wo: usize) -> Array2<f64> {
        let (n, _, h, w) = x.dim();
        let cg = self.in_channels / self.groups;
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let mut cols = Array2::zeros((cg * k * k, n * ho * wo));
        for ni in 0..n {
            for c in 0..cg {
                let ch = group * cg + c;
                for kh in 0..k {
                    for kw in 0..k {
                        let row = (c * k + kh) * k + kw;
                        for oh in 0..ho {
                            let ih = oh * s + kh;
                            if ih < p || ih - p >= h {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = ow * s + kw;
                                if iw < p || iw - p >= w {
                                    continue;
                                }
                                cols[[row, (ni * ho + oh) * wo + ow]] = x[[ni, ch, ih - p, iw - p]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        assert!(ho > 0 && wo > 0, "conv output collapsed to zero size");
        let og = self.out_channels / self.groups;
        let cg = self.in_channels / self.groups;
        let kk = cg * self.kernel * self.kernel;
        let w2 = self
            .weight
            .value
            .to_shape(((self.out_channels, kk), Order::RowMajor))
            .expect("conv weight contiguous");
        let mut out = Array4::zeros((n, self.out_channels, ho, wo));
        for g in 0..self.groups {
            let cols = self.im2col(x, g, ho, wo);
            let wg = w2.slice(s![g * og..(g + 1) * og, ..]);
            let og_out = wg.dot(&cols); // (og, n*ho*wo)
            for oc in 0..og {
                for ni in 0..n {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            out[[ni, g * og + oc, oh, ow]] = og_out[[oc, (ni * ho + oh) * wo + ow]];
                        }
                    }
                }
            }
        }
        if let Some(b) = &self.bias {
            for oc in 0..self.out_channels {
                let bv = b.value[[oc]];
                out.slice_mut(s![.., oc, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        self.cache = (mode == Mode::Train).then(|| x.clone());
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let x = self
            .cache
            .take()
            .expect("conv backward without train forward");
        let (n, _, h, w) = x.dim();
        let (_, _, ho, wo) = grad_out.dim();
        let og = self.out_channels / self.groups;
        let cg = self.in_channels / self.groups;
        let k = self.kernel;
        let kk = cg * k * k;
        let (st, p) = (self.stride, self.padding);

        let w2 = self
            .weight
            .value
            .to_shape(((self.out_channels, kk), Order::RowMajor))
            .expect("conv weight contiguous")
            .to_owned();
        let mut grad_x = Array4::zeros((n, self.in_channels, h, w));
        let mut wgrad_inc = Array2::zeros((self.out_channels, kk));
        for g in 0..self.groups {
            // Gather grad_out for this group into (og, n*ho*wo).
            let mut gout = Array2::zeros((og, n * ho * wo));
            for oc in 0..og {
                for ni in 0..n {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            gout[[oc, (ni * ho + oh) * wo + ow]] =
                                grad_out[[ni, g * og + oc, oh, ow]];
                        }
                    }
                }
            }
            let cols = self.im2col(&x, g, ho, wo);
            let gw = gout.dot(&cols.t()); // (og, kk)
            wgrad_inc
                .slice_mut(s![g * og..(g + 1) * og, ..])
                .assign(&gw);
            // grad wrt cols, scattered back to the input.
            let gcols = w2.slice(s![g * og..(g + 1) * og, ..]).t().dot(&gout);
            for ni in 0..n {
                for c in 0..cg {
                    let ch = g * cg + c;
                    for kh in 0..k {
                        for kw in 0..k {
                            let row = (c * k + kh) * k + kw;
                            for oh in 0..ho {
                                let ih = oh * st + kh;
                                if ih < p || ih - p >= h {
                                    continue;
                                }
                                for ow in 0..wo {
                                    let iw = ow * st + kw;
                                    if iw < p || iw - p >= w {
                                        continue;
                                    }
                                    grad_x[[ni, ch, ih - p, iw - p]] +=
                                        gcols[[row, (ni * ho + oh) * wo + ow]];
                                }
                            }
                        }
                    }
                }
            }
        }
        {
            let mut g4 = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            for o in 0..self.out_channels {
                for idx in 0..kk {
                    g4[[o, idx / (k * k), (idx / k) % k, idx % k]] += wgrad_inc[[o, idx]];
                }
            }
        }
        if let Some(b) = &mut self.bias {
            for oc in 0..self.out_channels {
                let gsum = grad_out.slice(s![.., oc, .., ..]).sum();
                b.grad[[oc]] += gsum;
            }
        }
        grad_x
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        f(join(prefix, "weight"), self.weight.value.view());
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b.value.view());
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        f(join(prefix, "weight"), self.weight.value.view_mut());
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b.value.view_mut());
        }
    }
}
