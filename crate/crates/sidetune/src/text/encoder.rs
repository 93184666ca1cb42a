//! Parallel-window convolutional text encoder.
//!
//! Each window size h runs a valid stride-1 convolution of shape h x k over
//! the token matrix (one filter bank per window), applies ReLU, and
//! max-pools globally over positions. Pooled vectors concatenate in
//! ascending-h order; dropout acts on the concatenation in train mode.
//! The embedding rows are a frozen lookup, so no gradient flows into the
//! input.

use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::Encoding;
use crate::nn::{join, uniform_fanin, Dropout, Mode, Param, StateFn, StateMutFn};
use crate::text::{TextEncoderConfig, TokenMatrix};

#[derive(Debug, Clone)]
struct ConvWindow {
    h: usize,
    /// (filters, h * embedding_dim)
    weight: Param,
    /// (filters)
    bias: Param,
}

#[derive(Debug)]
struct Cache {
    input: Array3<f64>,
    /// Per window: argmax position, one per (sample, filter).
    argmax: Vec<Array2<usize>>,
    /// Per window: 1.0 where the max pre-activation was positive.
    mask: Vec<Array2<f64>>,
}

/// The text side encoder. Output dim = |windows| * filters.
#[derive(Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    windows: Vec<ConvWindow>,
    dropout: Dropout,
    cache: Option<Cache>,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, rng: &mut ChaCha8Rng, dropout_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.embedding_dim;
        let f = cfg.filters_per_window;
        let windows = cfg
            .window_sizes
            .iter()
            .map(|&h| ConvWindow {
                h,
                weight: Param::new(uniform_fanin(rng, &[f, h * k], h * k)),
                bias: Param::new(uniform_fanin(rng, &[f], h * k)),
            })
            .collect();
        let dropout = Dropout::new(cfg.dropout_prob, ChaCha8Rng::seed_from_u64(dropout_seed));
        Ok(Self {
            cfg,
            windows,
            dropout,
            cache: None,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.windows
            .iter()
            .map(|w| w.weight.len() + w.bias.len())
            .sum()
    }

    /// Convolution + ReLU + global max pool for one window bank over one
    /// matrix with any number of rows >= h. Returns (pooled, argmax, mask).
    fn window_pool(
        window: &ConvWindow,
        rows: &ndarray::ArrayView2<'_, f64>,
        k: usize,
    ) -> (Array1<f64>, Vec<usize>, Vec<f64>) {
        let t = rows.nrows();
        let h = window.h;
        let positions = t - h + 1;
        let f = window.bias.len();
        let w2 = window
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        // Window rows flattened into (positions, h*k), then one matmul.
        let mut xw = Array2::zeros((positions, h * k));
        for p in 0..positions {
            let flat = rows.slice(s![p..p + h, ..]);
            let mut row = xw.row_mut(p);
            for (j, v) in flat.iter().enumerate() {
                row[j] = *v;
            }
        }
        let conv = xw.dot(&w2.t()); // (positions, f)
        let mut pooled = Array1::zeros(f);
        let mut argmax = vec![0usize; f];
        let mut mask = vec![0.0f64; f];
        for fi in 0..f {
            let b = window.bias.value[[fi]];
            let mut best = f64::NEG_INFINITY;
            let mut best_p = 0usize;
            for p in 0..positions {
                let v = conv[[p, fi]] + b;
                if v > best {
                    best = v;
                    best_p = p;
                }
            }
            argmax[fi] = best_p;
            mask[fi] = if best > 0.0 { 1.0 } else { 0.0 };
            pooled[fi] = best.max(0.0);
        }
        (pooled, argmax, mask)
    }

    /// Eval-mode forward over a matrix with arbitrary row count >= largest
    /// window. Used by inference and by padding-behavior tests.
    pub fn forward_matrix(&self, rows: &Array2<f64>) -> Result<Array1<f64>> {
        if rows.ncols() != self.cfg.embedding_dim {
            return Err(Error::ShapeError(format!(
                "expected {} columns, got {}",
                self.cfg.embedding_dim,
                rows.ncols()
            )));
        }
        let max_h = *self.cfg.window_sizes.last().unwrap();
        if rows.nrows() < max_h {
            return Err(Error::ShapeError(format!(
                "matrix with {} rows is shorter than the largest window {}",
                rows.nrows(),
                max_h
            )));
        }
        let f = self.cfg.filters_per_window;
        let mut out = Array1::zeros(self.output_dim());
        for (wi, window) in self.windows.iter().enumerate() {
            let (pooled, _, _) = Self::window_pool(window, &rows.view(), self.cfg.embedding_dim);
            out.slice_mut(s![wi * f..(wi + 1) * f]).assign(&pooled);
        }
        Ok(out)
    }

    /// Single-document forward: validates the configured matrix geometry,
    /// then encodes in eval mode (no dropout).
    pub fn text_forward(&self, matrix: &TokenMatrix) -> Result<Encoding> {
        let rows = matrix.rows();
        if rows.nrows() != self.cfg.max_tokens || rows.ncols() != self.cfg.embedding_dim {
            return Err(Error::ShapeError(format!(
                "expected {}x{} token matrix, got {}x{}",
                self.cfg.max_tokens,
                self.cfg.embedding_dim,
                rows.nrows(),
                rows.ncols()
            )));
        }
        Encoding::new(self.forward_matrix(rows)?)
    }

    /// Batched training/eval forward: (N, max_tokens, k) -> (N, out_dim).
    pub fn forward_batch(&mut self, x: &Array3<f64>, mode: Mode) -> Result<Array2<f64>> {
        let (n, t, k) = x.dim();
        if t != self.cfg.max_tokens || k != self.cfg.embedding_dim {
            return Err(Error::ShapeError(format!(
                "expected (N, {}, {}), got (N, {}, {})",
                self.cfg.max_tokens, self.cfg.embedding_dim, t, k
            )));
        }
        let f = self.cfg.filters_per_window;
        let mut out = Array2::zeros((n, self.output_dim()));
        let mut argmax_all = Vec::with_capacity(self.windows.len());
        let mut mask_all = Vec::with_capacity(self.windows.len());
        for (wi, window) in self.windows.iter().enumerate() {
            let mut argmax = Array2::zeros((n, f));
            let mut mask = Array2::zeros((n, f));
            for ni in 0..n {
                let rows = x.slice(s![ni, .., ..]);
                let (pooled, am, mk) = Self::window_pool(window, &rows, k);
                out.slice_mut(s![ni, wi * f..(wi + 1) * f]).assign(&pooled);
                for fi in 0..f {
                    argmax[[ni, fi]] = am[fi];
                    mask[[ni, fi]] = mk[fi];
                }
            }
            argmax_all.push(argmax);
            mask_all.push(mask);
        }
        if mode == Mode::Train {
            self.cache = Some(Cache {
                input: x.clone(),
                argmax: argmax_all,
                mask: mask_all,
            });
        } else {
            self.cache = None;
        }
        let out_dyn = self.dropout.forward(&out.into_dyn(), mode);
        Ok(out_dyn.into_dimensionality().unwrap())
    }

    /// Accumulates weight gradients. The input is a frozen embedding lookup,
    /// so no input gradient is produced.
    pub fn backward(&mut self, grad_out: &Array2<f64>) {
        let grad_dyn = self.dropout.backward(&grad_out.clone().into_dyn());
        let grad: Array2<f64> = grad_dyn.into_dimensionality().unwrap();
        let cache = self
            .cache
            .take()
            .expect("text encoder backward without train forward");
        let f = self.cfg.filters_per_window;
        let k = self.cfg.embedding_dim;
        let n = cache.input.dim().0;
        for (wi, window) in self.windows.iter_mut().enumerate() {
            let h = window.h;
            let argmax = &cache.argmax[wi];
            let mask = &cache.mask[wi];
            let mut wgrad = window
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            for ni in 0..n {
                for fi in 0..f {
                    let g = grad[[ni, wi * f + fi]] * mask[[ni, fi]];
                    if g == 0.0 {
                        continue;
                    }
                    let p = argmax[[ni, fi]];
                    let win = cache.input.slice(s![ni, p..p + h, ..]);
                    let mut row = wgrad.row_mut(fi);
                    for (j, v) in win.iter().enumerate() {
                        row[j] += g * v;
                    }
                    window.bias.grad[[fi]] += g;
                }
            }
            let _ = k;
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for w in &mut self.windows {
            f(&mut w.weight);
            f(&mut w.bias);
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        for w in &self.windows {
            let p = join(prefix, &format!("conv_h{}", w.h));
            f(join(&p, "weight"), w.weight.value.view());
            f(join(&p, "bias"), w.bias.value.view());
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        for w in &mut self.windows {
            let p = join(prefix, &format!("conv_h{}", w.h));
            f(join(&p, "weight"), w.weight.value.view_mut());
            f(join(&p, "bias"), w.bias.value.view_mut());
        }
    }

    /// Zeroes every conv bias; used by padding-behavior tests.
    pub fn zero_biases(&mut self) {
        for w in &mut self.windows {
            w.bias.value.fill(0.0);
        }
    }

    /// Makes every conv bias nonnegative in place.
    pub fn abs_biases(&mut self) {
        for w in &mut self.windows {
            w.bias.value.mapv_inplace(f64::abs);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, EmbeddingTable, OovPolicy, TextEncoderConfig};
    use rand::Rng;

    fn tiny_cfg() -> TextEncoderConfig {
        TextEncoderConfig {
            window_sizes: vec![2, 3],
            filters_per_window: 4,
            dropout_prob: 0.5,
            embedding_dim: 5,
            max_tokens: 12,
            num_classes: 3,
        }
    }

    fn encoder(cfg: TextEncoderConfig, seed: u64) -> TextEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TextEncoder::new(cfg, &mut rng, seed ^ 0x5eed).unwrap()
    }

    #[test]
    fn reference_shape_arithmetic() {
        let enc = encoder(TextEncoderConfig::reference(10), 1);
        // Conv output lengths 498/497/496 are implied by the window pools;
        // verify via the degenerate argmax range on a structured input.
        let rows = Array2::zeros((500, 300));
        let out = enc.forward_matrix(&rows).unwrap();
        assert_eq!(out.len(), 1536);
        for (h, expected) in [(3usize, 498usize), (4, 497), (5, 496)] {
            assert_eq!(500 - h + 1, expected);
        }
    }

    #[test]
    fn zero_matrix_zero_bias_gives_zero_encoding() {
        let mut enc = encoder(TextEncoderConfig::reference(10), 2);
        enc.zero_biases();
        let rows = Array2::zeros((500, 300));
        let out = enc.forward_matrix(&rows).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let enc = encoder(tiny_cfg(), 3);
        let mut rows = Array2::zeros((12, 5));
        for (i, v) in rows.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let a = enc.forward_matrix(&rows).unwrap();
        let b = enc.forward_matrix(&rows).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_dropout_differs_from_eval_but_masks_consistently() {
        let mut enc = encoder(tiny_cfg(), 4);
        let mut x = Array3::zeros((2, 12, 5));
        for (i, v) in x.iter_mut().enumerate() {
            *v = ((i * 17 % 11) as f64 - 5.0) * 0.2;
        }
        let eval = enc.forward_batch(&x, Mode::Eval).unwrap();
        let train = enc.forward_batch(&x, Mode::Train).unwrap();
        // Dropout zeroes or rescales by 1/keep.
        for (e, t) in eval.iter().zip(train.iter()) {
            assert!(*t == 0.0 || (*t - e * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_weights() {
        let mut cfg = tiny_cfg();
        cfg.dropout_prob = 0.0; // keep the objective deterministic
        let mut enc = encoder(cfg, 5);
        let mut x = Array3::zeros((2, 12, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let loss_w: Array2<f64> = {
            let out = enc.forward_batch(&x, Mode::Eval).unwrap();
            let mut w = Array2::zeros(out.raw_dim());
            for (i, v) in w.iter_mut().enumerate() {
                *v = 0.3 + 0.01 * i as f64;
            }
            w
        };
        let _ = enc.forward_batch(&x, Mode::Train).unwrap();
        enc.backward(&loss_w);

        let eps = 1e-6;
        for wi in 0..enc.windows.len() {
            for &flat in &[0usize, 7, 13] {
                let shape = enc.windows[wi].weight.value.shape().to_vec();
                let idx = [flat / shape[1], flat % shape[1]];
                let orig = enc.windows[wi].weight.value[idx.as_slice()];
                enc.windows[wi].weight.value[idx.as_slice()] = orig + eps;
                let fp = (&enc.forward_batch(&x, Mode::Eval).unwrap() * &loss_w).sum();
                enc.windows[wi].weight.value[idx.as_slice()] = orig - eps;
                let fm = (&enc.forward_batch(&x, Mode::Eval).unwrap() * &loss_w).sum();
                enc.windows[wi].weight.value[idx.as_slice()] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let got = enc.windows[wi].weight.grad[idx.as_slice()];
                assert!(
                    (got - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                    "window {wi} weight grad {idx:?}: got {got}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn duplicating_the_max_window_never_decreases_pooled_features() {
        let cfg = tiny_cfg();
        let enc = encoder(cfg.clone(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut rows = Array2::zeros((10, 5));
        for v in rows.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let pooled = enc.forward_matrix(&rows).unwrap();
        // Append a copy of the window that maximizes filter 0 of the first bank.
        let (_, argmax, _) = TextEncoder::window_pool(&enc.windows[0], &rows.view(), 5);
        let h = enc.windows[0].h;
        let p = argmax[0];
        let mut extended = Array2::zeros((10 + h, 5));
        extended.slice_mut(s![0..10, ..]).assign(&rows);
        extended
            .slice_mut(s![10..10 + h, ..])
            .assign(&rows.slice(s![p..p + h, ..]));
        let pooled_ext = enc.forward_matrix(&extended).unwrap();
        for (a, b) in pooled.iter().zip(pooled_ext.iter()) {
            assert!(b >= a, "pooled feature decreased: {a} -> {b}");
        }
    }

    #[test]
    fn padding_bounds_for_nonnegative_and_zero_biases() {
        // L-row valid conv vs zero-padded max_tokens-row conv.
        let cfg = tiny_cfg();
        let table = {
            let mut rng = ChaCha8Rng::seed_from_u64(321);
            let pairs = (0..6)
                .map(|i| {
                    (
                        format!("tok{i}"),
                        (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect();
            EmbeddingTable::from_pairs(pairs, 5, "toy").unwrap()
        };
        let doc = tokenize("tok0 tok1 tok2 tok3 tok4 tok5");
        let (matrix, _) = table.embed(&doc, cfg.max_tokens, OovPolicy::Zero).unwrap();
        let l = matrix.true_length();
        assert!(l >= 5);
        let unpadded = matrix.rows().slice(s![0..l, ..]).to_owned();

        // Nonnegative biases: padded pools dominate.
        let mut enc = encoder(cfg.clone(), 7);
        enc.abs_biases();
        let padded_pool = enc.forward_matrix(matrix.rows()).unwrap();
        let plain_pool = enc.forward_matrix(&unpadded).unwrap();
        for (a, b) in plain_pool.iter().zip(padded_pool.iter()) {
            assert!(*a <= b + 1e-15, "padded pool lost a feature: {a} > {b}");
        }

        // Zero biases: the same bound holds, and padding beyond the last
        // boundary-straddling window changes nothing at all.
        enc.zero_biases();
        let h_max = *cfg.window_sizes.last().unwrap();
        let mut short = Array2::zeros((l + h_max, 5));
        short.slice_mut(s![0..l, ..]).assign(&unpadded);
        let short_pool = enc.forward_matrix(&short).unwrap();
        let full_pool = enc.forward_matrix(matrix.rows()).unwrap();
        for (a, b) in short_pool.iter().zip(full_pool.iter()) {
            assert_eq!(a, b);
        }
        let plain_pool0 = enc.forward_matrix(&unpadded).unwrap();
        for (a, b) in plain_pool0.iter().zip(full_pool.iter()) {
            assert!(*a <= b + 1e-15);
        }
    }

    #[test]
    fn text_forward_rejects_wrong_geometry() {
        let enc = encoder(TextEncoderConfig::reference(10), 8);
        let bad = TokenMatrix::new(Array2::zeros((400, 300)), 0).unwrap();
        assert_eq!(enc.text_forward(&bad).unwrap_err().class(), "ShapeError");
    }

    #[test]
    fn encoder_param_count_matches_closed_form() {
        let cfg = TextEncoderConfig::reference(10);
        let mut enc = encoder(cfg.clone(), 9);
        let mut actual = 0usize;
        enc.visit_params(&mut |p| actual += p.len());
        // Closed form minus the standalone head (the encoder has no head).
        let head = 1536 * 10 + 10;
        assert_eq!(actual as u64 + head as u64, super::super::count_text_params(&cfg));
    }
}
