//! Alpha-weighted fusion of base and side encodings, the text-to-image
//! adaptation layer, and the classification head.
//!
//! The merge computes `R(x) = a0*B(x) + sum_i ai*Si(x)` with fixed
//! nonnegative coefficients summing to one. Zero-coefficient terms are
//! skipped entirely, so degenerate configurations like (1,0,0) reproduce the
//! corresponding branch bit for bit.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mode, Param, StateFn, StateMutFn};

/// Absolute tolerance on the sum-to-one constraint.
pub const ALPHA_SUM_TOLERANCE: f64 = 1e-6;

/// Validated fusion coefficients: a0 for the base, a1..aN for the sides.
/// Values are stored exactly as given — no renormalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaConfig {
    alphas: Vec<f64>,
}

impl AlphaConfig {
    /// Validates and wraps a coefficient list. Rejects empty lists, negative
    /// or non-finite entries, and sums outside `1.0 +/- 1e-6`.
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::EmptyConfig);
        }
        for (index, &value) in alphas.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::NegativeCoefficient { index, value });
            }
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > ALPHA_SUM_TOLERANCE {
            return Err(Error::ConstraintViolation {
                sum,
                tolerance: ALPHA_SUM_TOLERANCE,
            });
        }
        Ok(Self { alphas })
    }

    pub fn values(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Coefficient for the base encoder.
    pub fn base(&self) -> f64 {
        self.alphas[0]
    }

    /// Coefficients for the side encoders, in order.
    pub fn sides(&self) -> &[f64] {
        &self.alphas[1..]
    }
}

/// Alias kept for symmetry with the operation naming used by callers.
pub fn validate_alphas(alphas: Vec<f64>) -> Result<AlphaConfig> {
    AlphaConfig::new(alphas)
}

/// A fixed-length feature vector produced by one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    values: Array1<f64>,
}

impl Encoding {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeError("encoding contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }
}

/// The merge: elementwise weighted sum of encodings, one coefficient
/// per encoding (base first, sides after). Linear in each input with
/// gradient `d(combine)/d(encoding_i) = alpha_i * I`.
pub fn combine(encodings: &[Encoding], alpha: &AlphaConfig) -> Result<Encoding> {
    if encodings.len() != alpha.len() {
        return Err(Error::ArityMismatch {
            encodings: encodings.len(),
            alphas: alpha.len(),
        });
    }
    let dim = encodings[0].dim();
    for e in encodings.iter().skip(1) {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.dim(),
                context: "combine",
            });
        }
    }
    let mut out = Array1::zeros(dim);
    for (e, &a) in encodings.iter().zip(alpha.values()) {
        if a != 0.0 {
            out.scaled_add(a, e.values());
        }
    }
    Ok(Encoding { values: out })
}

/// Batched form of [`combine`] used inside the training graph; rows are
/// samples. Same zero-coefficient skipping as the single-vector form.
pub fn combine_batch(encodings: &[Array2<f64>], alpha: &AlphaConfig) -> Result<Array2<f64>> {
    if encodings.len() != alpha.len() {
        return Err(Error::ArityMismatch {
            encodings: encodings.len(),
            alphas: alpha.len(),
        });
    }
    let dim = encodings[0].raw_dim();
    let mut out = Array2::zeros(dim);
    for (e, &a) in encodings.iter().zip(alpha.values()) {
        if e.raw_dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim[1],
                actual: e.ncols(),
                context: "combine_batch",
            });
        }
        if a != 0.0 {
            out.scaled_add(a, e);
        }
    }
    Ok(out)
}

/// Affine map aligning the text encoding with the image feature space.
#[derive(Debug, Clone)]
pub struct AdaptationLayer {
    linear: Linear,
}

impl AdaptationLayer {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::new(in_dim, out_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.linear.num_params()
    }

    /// Maps a text encoding into the image feature space. Purely affine;
    /// deterministic for fixed weights.
    pub fn adapt(&self, encoding: &Encoding) -> Result<Encoding> {
        if encoding.dim() != self.linear.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.linear.in_dim,
                actual: encoding.dim(),
                context: "adaptation input",
            });
        }
        Ok(Encoding {
            values: self.linear.forward_one(encoding.values()),
        })
    }

    pub fn forward_batch(&mut self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        if x.ncols() != self.linear.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.linear.in_dim,
                actual: x.ncols(),
                context: "adaptation input",
            });
        }
        Ok(self.linear.forward(x, mode))
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        self.linear.backward(grad)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.linear.visit_params(f);
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        self.linear.visit_state(prefix, f);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        self.linear.visit_state_mut(prefix, f);
    }
}

/// Classification head: optional dense+ReLU of width 512 or 1024, then the
/// affine map to raw class scores. Normalization lives in the loss.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc: Option<Linear>,
    pub head: Linear,
    fc_relu_mask: Option<Array2<f64>>,
    num_classes: usize,
}

/// Widths the optional dense layer may take.
pub const ALLOWED_FC_WIDTHS: [usize; 2] = [512, 1024];

impl Classifier {
    pub fn new(
        in_dim: usize,
        fc_width: Option<usize>,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if let Some(w) = fc_width {
            if !ALLOWED_FC_WIDTHS.contains(&w) {
                return Err(Error::InvalidWidth(w));
            }
        }
        let fc = fc_width.map(|w| Linear::new(in_dim, w, rng));
        let head_in = fc_width.unwrap_or(in_dim);
        Ok(Self {
            fc,
            head: Linear::new(head_in, num_classes, rng),
            fc_relu_mask: None,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn in_dim(&self) -> usize {
        self.fc.as_ref().map_or(self.head.in_dim, |fc| fc.in_dim)
    }

    pub fn num_params(&self) -> usize {
        self.fc.as_ref().map_or(0, Linear::num_params) + self.head.num_params()
    }

    /// Raw class scores for one fused encoding.
    pub fn classify(&self, fused: &Encoding) -> Result<Array1<f64>> {
        if fused.dim() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                actual: fused.dim(),
                context: "classifier input",
            });
        }
        let x = match &self.fc {
            Some(fc) => fc.forward_one(fused.values()).mapv(|v| v.max(0.0)),
            None => fused.values().clone(),
        };
        Ok(self.head.forward_one(&x))
    }

    pub fn forward_batch(&mut self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                actual: x.ncols(),
                context: "classifier input",
            });
        }
        let hidden = match &mut self.fc {
            Some(fc) => {
                let pre = fc.forward(x, mode);
                let mask = pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let act = &pre * &mask;
                self.fc_relu_mask = (mode == Mode::Train).then_some(mask);
                act
            }
            None => x.clone(),
        };
        Ok(self.head.forward(&hidden, mode))
    }

    pub fn backward(&mut self, grad_scores: &Array2<f64>) -> Array2<f64> {
        let g = self.head.backward(grad_scores);
        match (&mut self.fc, self.fc_relu_mask.take()) {
            (Some(fc), Some(mask)) => fc.backward(&(&g * &mask)),
            (Some(_), None) => panic!("classifier backward without train forward"),
            _ => g,
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(fc) = &mut self.fc {
            fc.visit_params(f);
        }
        self.head.visit_params(f);
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        if let Some(fc) = &self.fc {
            fc.visit_state(&crate::nn::join(prefix, "fc"), f);
        }
        self.head.visit_state(&crate::nn::join(prefix, "head"), f);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        if let Some(fc) = &mut self.fc {
            fc.visit_state_mut(&crate::nn::join(prefix, "fc"), f);
        }
        self.head.visit_state_mut(&crate::nn::join(prefix, "head"), f);
    }
}

/// Predicted class: argmax with ties broken toward the lowest index.
pub fn argmax(scores: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Row-wise [`argmax`] for batched scores.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
