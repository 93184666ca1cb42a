//! Single-document inference profiler: OCR, loading, and per-network
//! forward timings averaged over repeated runs.

use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::FusedEncoder;
use crate::ocr::OcrClient;
use crate::text::{tokenize, EmbeddingTable, OovPolicy};
use crate::vision::{preprocess, PageImage};

/// Wall-clock stage means in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub ocr_ms: f64,
    pub image_load_ms: f64,
    pub text_load_ms: f64,
    pub base_ms: f64,
    pub side_image_ms: f64,
    pub side_text_ms: f64,
    pub total_ms: f64,
    pub runs: usize,
}

impl TimingBreakdown {
    /// Sum of the measured stages; `total_ms` is at least this minus timer
    /// granularity.
    pub fn stage_sum_ms(&self) -> f64 {
        self.ocr_ms
            + self.image_load_ms
            + self.text_load_ms
            + self.base_ms
            + self.side_image_ms
            + self.side_text_ms
    }
}

impl std::fmt::Display for TimingBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let pct = |v: f64| if self.total_ms > 0.0 { 100.0 * v / self.total_ms } else { 0.0 };
        writeln!(f, "inference timings over {} runs:", self.runs)?;
        writeln!(f, "  ocr         {:>10.2} ms ({:>5.1}%)", self.ocr_ms, pct(self.ocr_ms))?;
        writeln!(
            f,
            "  image load  {:>10.2} ms ({:>5.1}%)",
            self.image_load_ms,
            pct(self.image_load_ms)
        )?;
        writeln!(
            f,
            "  text load   {:>10.2} ms ({:>5.1}%)",
            self.text_load_ms,
            pct(self.text_load_ms)
        )?;
        writeln!(f, "  base        {:>10.2} ms ({:>5.1}%)", self.base_ms, pct(self.base_ms))?;
        writeln!(
            f,
            "  side image  {:>10.2} ms ({:>5.1}%)",
            self.side_image_ms,
            pct(self.side_image_ms)
        )?;
        writeln!(
            f,
            "  side text   {:>10.2} ms ({:>5.1}%)",
            self.side_text_ms,
            pct(self.side_text_ms)
        )?;
        writeln!(f, "  total       {:>10.2} ms", self.total_ms)
    }
}

/// Where the document's text comes from.
pub enum TextSource<'a> {
    /// Run the external OCR engine on the image.
    Ocr(&'a OcrClient),
    /// Read a pre-extracted text file (`ocr_ms` reports 0).
    File(&'a Path),
    /// Use the given string (`ocr_ms` reports 0).
    Inline(&'a str),
}

/// Output of one profiled classification.
#[derive(Debug, Clone)]
pub struct ProfiledPrediction {
    pub predicted_class: usize,
    pub scores: Array1<f64>,
    pub timings: TimingBreakdown,
}

/// Runs the full single-document pipeline `runs` times and averages each
/// stage. The prediction comes from the last run (all runs agree — the
/// model is in eval mode).
pub fn profile_inference(
    model: &mut FusedEncoder,
    image_path: &Path,
    text: &TextSource<'_>,
    table: &EmbeddingTable,
    runs: usize,
) -> Result<ProfiledPrediction> {
    let runs = runs.max(1);
    let mut acc = TimingBreakdown {
        ocr_ms: 0.0,
        image_load_ms: 0.0,
        text_load_ms: 0.0,
        base_ms: 0.0,
        side_image_ms: 0.0,
        side_text_ms: 0.0,
        total_ms: 0.0,
        runs,
    };
    let mut last: Option<(usize, Array1<f64>)> = None;
    for _ in 0..runs {
        let total_start = Instant::now();

        let (raw_text, ocr_ms) = match text {
            TextSource::Ocr(client) => {
                let (t, d) = client.run(image_path)?;
                (t, d.as_secs_f64() * 1e3)
            }
            TextSource::File(path) => {
                let t0 = Instant::now();
                let t = std::fs::read_to_string(path)
                    .map_err(|e| crate::error::Error::io(*path, e))?;
                // Reading the pre-extracted file counts as text load below;
                // report it there and keep OCR at zero.
                let _ = t0;
                (t, 0.0)
            }
            TextSource::Inline(s) => (s.to_string(), 0.0),
        };

        let t0 = Instant::now();
        let page = PageImage::load(image_path)?;
        let image = preprocess(&page, &model.spec.vision)?;
        let image_load_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t0 = Instant::now();
        let (matrix, _oov) = table.embed(
            &tokenize(&raw_text),
            model.spec.text.max_tokens,
            OovPolicy::Zero,
        )?;
        let text_load_ms = t0.elapsed().as_secs_f64() * 1e3;

        let (scores, stages) = model.predict_single(&image, &matrix)?;
        let total_ms = total_start.elapsed().as_secs_f64() * 1e3;

        acc.ocr_ms += ocr_ms;
        acc.image_load_ms += image_load_ms;
        acc.text_load_ms += text_load_ms;
        acc.base_ms += stages.base.as_secs_f64() * 1e3;
        acc.side_image_ms += stages.side_image.as_secs_f64() * 1e3;
        acc.side_text_ms += stages.side_text.as_secs_f64() * 1e3;
        acc.total_ms += total_ms;
        last = Some((crate::fusion::argmax(&scores), scores));
    }
    let n = runs as f64;
    acc.ocr_ms /= n;
    acc.image_load_ms /= n;
    acc.text_load_ms /= n;
    acc.base_ms /= n;
    acc.side_image_ms /= n;
    acc.side_text_ms /= n;
    acc.total_ms /= n;
    let (predicted_class, scores) = last.expect("at least one run");
    Ok(ProfiledPrediction {
        predicted_class,
        scores,
        timings: acc,
    })
}
