//! Text pipeline: whitespace tokenization, embedding lookup into a padded
//! token matrix, and the parallel-window convolutional encoder.

pub mod embedding;
pub mod encoder;

pub use embedding::{EmbeddingTable, OovPolicy};
pub use encoder::TextEncoder;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Reference geometry: 500 tokens of 300-d embeddings.
pub const MAX_TOKENS: usize = 500;
pub const EMBEDDING_DIM: usize = 300;

/// Tokens in document order. Tokens never contain whitespace; punctuation,
/// digits, and OCR artifacts are preserved verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits on maximal whitespace runs. No lowercasing, no filtering, no
/// normalization — OCR noise is kept as-is. Total on every input.
pub fn tokenize(raw_text: &str) -> TokenSequence {
    TokenSequence {
        tokens: raw_text.split_whitespace().map(str::to_string).collect(),
    }
}

/// Fixed-size embedded document: `max_tokens` rows of `dim` entries, with
/// every row at index >= `true_length` exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: Array2<f64>,
    true_length: usize,
}

impl TokenMatrix {
    pub fn new(rows: Array2<f64>, true_length: usize) -> Result<Self> {
        if true_length > rows.nrows() {
            return Err(Error::ShapeError(format!(
                "true_length {} exceeds {} rows",
                true_length,
                rows.nrows()
            )));
        }
        for i in true_length..rows.nrows() {
            if rows.row(i).iter().any(|&v| v != 0.0) {
                return Err(Error::ShapeError(format!(
                    "padding row {i} is not zero"
                )));
            }
        }
        Ok(Self { rows, true_length })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }
}

/// Geometry and regularization of the text encoder. The reference
/// configuration is windows {3,4,5} x 512 filters over 500x300 input with
/// dropout 0.5, giving a 1536-d encoding.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderConfig {
    pub window_sizes: Vec<usize>,
    pub filters_per_window: usize,
    pub dropout_prob: f64,
    pub embedding_dim: usize,
    pub max_tokens: usize,
    /// Class count of the standalone softmax head (baseline model only).
    pub num_classes: usize,
}

impl TextEncoderConfig {
    pub fn reference(num_classes: usize) -> Self {
        Self {
            window_sizes: vec![3, 4, 5],
            filters_per_window: 512,
            dropout_prob: 0.5,
            embedding_dim: EMBEDDING_DIM,
            max_tokens: MAX_TOKENS,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_sizes.is_empty() {
            return Err(Error::InvalidConfig("no conv window sizes".into()));
        }
        if !self.window_sizes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "window sizes must be strictly ascending".into(),
            ));
        }
        let max_h = *self.window_sizes.last().unwrap();
        if max_h > self.max_tokens {
            return Err(Error::InvalidConfig(format!(
                "window {} exceeds max_tokens {}",
                max_h, self.max_tokens
            )));
        }
        if self.filters_per_window == 0 || self.embedding_dim == 0 || self.max_tokens == 0 {
            return Err(Error::InvalidConfig("zero-sized text encoder".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidConfig(format!(
                "dropout prob {} outside [0,1)",
                self.dropout_prob
            )));
        }
        Ok(())
    }

    /// Encoder output width: |windows| * filters.
    pub fn output_dim(&self) -> usize {
        self.window_sizes.len() * self.filters_per_window
    }
}

/// Exact trainable-parameter count of the standalone text classifier:
/// conv weights and biases plus the softmax head. Embedding vectors are a
/// frozen lookup and not counted.
pub fn count_text_params(cfg: &TextEncoderConfig) -> u64 {
    let f = cfg.filters_per_window as u64;
    let k = cfg.embedding_dim as u64;
    let conv: u64 = cfg
        .window_sizes
        .iter()
        .map(|&h| f * (h as u64) * k + f)
        .sum();
    let d = cfg.output_dim() as u64;
    let head = d * cfg.num_classes as u64 + cfg.num_classes as u64;
    conv + head
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_on_whitespace_and_keeps_punctuation() {
        let t = tokenize("Dear Mr. Smith,");
        assert_eq!(t.tokens(), &["Dear", "Mr.", "Smith,"]);
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" \t\n ").is_empty());
    }

    #[test]
    fn tokenize_preserves_ocr_artifacts_and_collapses_runs() {
        let t = tokenize("ta6le  7");
        assert_eq!(t.tokens(), &["ta6le", "7"]);
    }

    #[test]
    fn token_matrix_rejects_nonzero_padding() {
        let mut rows = Array2::zeros((4, 2));
        rows[[3, 1]] = 0.5;
        assert!(TokenMatrix::new(rows, 2).is_err());
        let rows = Array2::zeros((4, 2));
        assert!(TokenMatrix::new(rows, 0).is_ok());
    }

    #[test]
    fn reference_config_dims() {
        let cfg = TextEncoderConfig::reference(10);
        cfg.validate().unwrap();
        assert_eq!(cfg.output_dim(), 1536);
    }

    #[test]
    fn param_count_conv_stack_only() {
        // 512*300*(3+4+5) + 3*512 = 1,844,736
        let mut cfg = TextEncoderConfig::reference(0);
        cfg.num_classes = 0;
        assert_eq!(count_text_params(&cfg), 1_844_736);
    }

    #[test]
    fn param_count_reference_with_ten_class_head() {
        let cfg = TextEncoderConfig::reference(10);
        assert_eq!(count_text_params(&cfg), 1_860_106);
    }

    #[test]
    fn param_count_toy_config_brute_force() {
        // filters=1, windows={3}, C=1, k=300: 1*300*3+1 + (1*1+1) = 903
        let cfg = TextEncoderConfig {
            window_sizes: vec![3],
            filters_per_window: 1,
            dropout_prob: 0.5,
            embedding_dim: 300,
            max_tokens: 500,
            num_classes: 1,
        };
        assert_eq!(count_text_params(&cfg), 903);
    }

    #[test]
    fn config_validation_rejects_bad_windows() {
        let mut cfg = TextEncoderConfig::reference(10);
        cfg.window_sizes = vec![5, 3, 4];
        assert!(cfg.validate().is_err());
        cfg.window_sizes = vec![];
        assert!(cfg.validate().is_err());
        cfg.window_sizes = vec![600];
        assert!(cfg.validate().is_err());
    }
}
