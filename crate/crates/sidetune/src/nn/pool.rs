//! Spatial pooling: windowed max pool and global average pool.

use ndarray::{Array2, Array4};

use super::Mode;

/// Flat argmax indices plus the input dims they refer to.
type ArgmaxCache = (Vec<usize>, (usize, usize, usize, usize));

/// Max pooling with square window; caches argmax routing for backward.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Option<ArgmaxCache>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            argmax: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let mut out = Array4::from_elem((n, c, ho, wo), f64::NEG_INFINITY);
        let mut argmax = vec![usize::MAX; n * c * ho * wo];
        for ni in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for kh in 0..self.kernel {
                            let ih = oh * self.stride + kh;
                            if ih < self.padding || ih - self.padding >= h {
                                continue;
                            }
                            for kw in 0..self.kernel {
                                let iw = ow * self.stride + kw;
                                if iw < self.padding || iw - self.padding >= w {
                                    continue;
                                }
                                let v = x[[ni, ch, ih - self.padding, iw - self.padding]];
                                if v > best {
                                    best = v;
                                    best_idx = (ih - self.padding) * w + (iw - self.padding);
                                }
                            }
                        }
                        out[[ni, ch, oh, ow]] = best;
                        argmax[((ni * c + ch) * ho + oh) * wo + ow] = best_idx;
                    }
                }
            }
        }
        self.argmax = (mode == Mode::Train).then_some((argmax, (n, c, h, w)));
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let (argmax, (n, c, h, w)) = self
            .argmax
            .take()
            .expect("maxpool backward without train forward");
        let (_, _, ho, wo) = grad_out.dim();
        let mut grad_x = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let idx = argmax[((ni * c + ch) * ho + oh) * wo + ow];
                        if idx != usize::MAX {
                            grad_x[[ni, ch, idx / w, idx % w]] += grad_out[[ni, ch, oh, ow]];
                        }
                    }
                }
            }
        }
        grad_x
    }
}

/// Mean over the spatial grid: (N, C, H, W) -> (N, C).
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ch in 0..c {
            out[[ni, ch]] = x.slice(ndarray::s![ni, ch, .., ..]).sum() * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward(grad: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = grad.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ch in 0..c {
            out.slice_mut(ndarray::s![ni, ch, .., ..])
                .fill(grad[[ni, ch]] * scale);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_3x3_s2_p1_shape_and_values() {
        let mut pool = MaxPool2d::new(3, 2, 1);
        assert_eq!(pool.output_hw(8, 8), (4, 4));
        let mut x = Array4::zeros((1, 1, 4, 4));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let y = pool.forward(&x, Mode::Eval);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        // Window at (0,0) covers padded rows/cols; max of {0,1,4,5} = 5.
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let mut pool = MaxPool2d::new(2, 2, 0);
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 9.0, 3.0, 2.0]).unwrap();
        let y = pool.forward(&x, Mode::Train);
        assert_eq!(y[[0, 0, 0, 0]], 9.0);
        let g = Array4::from_elem((1, 1, 1, 1), 2.5);
        let gx = pool.backward(&g);
        assert_eq!(gx[[0, 0, 0, 1]], 2.5);
        assert_eq!(gx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn global_avg_pool_roundtrip() {
        let mut x = Array4::zeros((2, 3, 2, 2));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let y = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 1.5);
        let g = Array2::from_elem((2, 3), 4.0);
        let gx = global_avg_pool_backward(&g, 2, 2);
        assert!((gx[[0, 0, 0, 0]] - 1.0).abs() < 1e-15);
    }
}
