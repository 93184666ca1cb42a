//! Vision pipeline: page decoding, grayscale preprocessing, and the
//! frozen-base / trainable-side backbone pair.

pub mod backbone;
pub mod blocks;

pub use backbone::{Backbone, BackboneKind};

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mode, Param, StateFn, StateMutFn};

/// Reference input side after resize.
pub const INPUT_SIDE: usize = 384;

/// Single-channel page scan with intensities in [0,1].
#[derive(Debug, Clone)]
pub struct PageImage {
    pixels: Array2<f64>,
    pub source: PathBuf,
}

impl PageImage {
    pub fn new(pixels: Array2<f64>, source: impl Into<PathBuf>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::DegenerateImage(format!("zero-area image {h}x{w}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::DegenerateImage(
                "pixel outside [0,1] or non-finite".into(),
            ));
        }
        Ok(Self {
            pixels,
            source: source.into(),
        })
    }

    /// Decodes a TIFF/PNG/JPEG scan to single-channel intensity.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::DegenerateImage(format!("{}: {other}", path.display())),
        })?;
        let luma = img.to_luma32f();
        let (w, h) = (luma.width() as usize, luma.height() as usize);
        if w == 0 || h == 0 {
            return Err(Error::DegenerateImage(format!(
                "zero-area image {}",
                path.display()
            )));
        }
        let mut pixels = Array2::zeros((h, w));
        for (x, y, p) in luma.enumerate_pixels() {
            pixels[[y as usize, x as usize]] = f64::from(p.0[0]).clamp(0.0, 1.0);
        }
        Self::new(pixels, path)
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Preprocessing and backbone geometry for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub backbone: BackboneKind,
    pub input_side: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub width_mult: f64,
}

impl VisionConfig {
    pub fn new(
        backbone: BackboneKind,
        input_side: usize,
        channel_mean: [f64; 3],
        channel_std: [f64; 3],
        width_mult: f64,
    ) -> Result<Self> {
        if input_side == 0 {
            return Err(Error::InvalidConfig("input_side must be positive".into()));
        }
        if channel_std.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "channel_std must be positive, got {channel_std:?}"
            )));
        }
        if !width_mult.is_finite() || width_mult <= 0.0 {
            return Err(Error::InvalidConfig("width_mult must be positive".into()));
        }
        Ok(Self {
            backbone,
            input_side,
            channel_mean,
            channel_std,
            width_mult,
        })
    }

    pub fn reference(backbone: BackboneKind) -> Self {
        // ImageNet statistics; replaced by training-split statistics when a
        // run computes them.
        Self {
            backbone,
            input_side: INPUT_SIDE,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
            width_mult: 1.0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim(self.width_mult)
    }
}

/// Bilinear resample with half-pixel centers, clamped at the borders.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::zeros((out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - dx) + src[[y0, x1]] * dx;
            let bot = src[[y1, x0]] * (1.0 - dx) + src[[y1, x1]] * dx;
            out[[oy, ox]] = top * (1.0 - dy) + bot * dy;
        }
    }
    out
}

/// Resize, replicate the grayscale to three channels, and standardize each
/// channel with the configured statistics.
pub fn preprocess(image: &PageImage, cfg: &VisionConfig) -> Result<Array3<f64>> {
    let resized = resize_bilinear(image.pixels(), cfg.input_side, cfg.input_side);
    let mut out = Array3::zeros((3, cfg.input_side, cfg.input_side));
    for c in 0..3 {
        let mean = cfg.channel_mean[c];
        let std = cfg.channel_std[c];
        ndarray::azip!((o in &mut out.slice_mut(ndarray::s![c, .., ..]), &v in &resized) {
            *o = (v - mean) / std;
        });
    }
    Ok(out)
}

/// Resize-and-replicate without standardization; the stage statistics are
/// computed over.
pub fn resize_replicate(image: &PageImage, input_side: usize) -> Array3<f64> {
    let resized = resize_bilinear(image.pixels(), input_side, input_side);
    let mut out = Array3::zeros((3, input_side, input_side));
    for c in 0..3 {
        out.slice_mut(ndarray::s![c, .., ..]).assign(&resized);
    }
    out
}

/// Per-channel mean and population standard deviation over a training
/// split, computed on resized, replicated, unstandardized tensors. The
/// standard deviation is floored at 1e-6 so a degenerate constant corpus
/// still yields a usable configuration.
pub fn compute_channel_stats(
    images: &[PageImage],
    input_side: usize,
) -> Result<([f64; 3], [f64; 3])> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus("<channel stats input>".into()));
    }
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        let t = resize_replicate(img, input_side);
        for c in 0..3 {
            let slice = t.slice(ndarray::s![c, .., ..]);
            sum[c] += slice.sum();
            sumsq[c] += slice.iter().map(|v| v * v).sum::<f64>();
        }
        count += input_side * input_side;
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / count as f64;
        let var = (sumsq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt().max(1e-6);
    }
    Ok((mean, std))
}

/// Which half of the pair to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Base,
    Side,
}

/// Frozen base backbone and its trainable twin. Both start from identical
/// weights; the base is only ever driven in eval mode and is excluded from
/// every parameter visit.
#[derive(Debug, Clone)]
pub struct BackbonePair {
    base: Backbone,
    side: Backbone,
}

impl BackbonePair {
    /// Builds one backbone and clones it, so base and side share both the
    /// architecture and the initial weights.
    pub fn new(kind: BackboneKind, width_mult: f64, rng: &mut ChaCha8Rng) -> Self {
        let base = Backbone::build(kind, width_mult, rng);
        let side = base.clone();
        Self { base, side }
    }

    pub fn feature_dim(&self) -> usize {
        self.base.feature_dim
    }

    pub fn kind(&self) -> BackboneKind {
        self.base.kind
    }

    /// Penultimate pooled features. The base path always runs in eval mode
    /// and records nothing.
    pub fn forward(&mut self, x: &Array4<f64>, which: Which, mode: Mode) -> Array2<f64> {
        match which {
            Which::Base => self.base.forward(x, Mode::Eval),
            Which::Side => self.side.forward(x, mode),
        }
    }

    pub fn backward_side(&mut self, grad: &Array2<f64>) {
        self.side.backward(grad);
    }

    /// Trainable parameters: side only. The base never appears here.
    pub fn visit_trainable(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.side.visit_params(f);
    }

    pub fn side_num_params(&self) -> usize {
        self.side.num_params()
    }

    pub fn base_num_params(&self) -> usize {
        self.base.num_params()
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        self.base.visit_state(&crate::nn::join(prefix, "base"), f);
        self.side.visit_state(&crate::nn::join(prefix, "side"), f);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        self.base
            .visit_state_mut(&crate::nn::join(prefix, "base"), f);
        self.side
            .visit_state_mut(&crate::nn::join(prefix, "side"), f);
    }

    /// State of the frozen base alone, for hashing.
    pub fn visit_base_state(&self, f: &mut StateFn<'_>) {
        self.base.visit_state("base", f);
    }

    /// Installs externally converted weights into BOTH halves, preserving
    /// the identical-initialization contract. Names are backbone-relative
    /// (e.g. `layer0.conv.weight`); every backbone tensor must be covered.
    pub fn load_shared_weights(
        &mut self,
        tensors: &std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<()> {
        let mut missing = Vec::new();
        let mut shape_err = None;
        for net in [&mut self.base, &mut self.side] {
            net.visit_state_mut("", &mut |name, mut view| {
                match tensors.get(&name) {
                    Some((shape, data)) if shape == view.shape() => {
                        for (dst, src) in view.iter_mut().zip(data.iter()) {
                            *dst = *src;
                        }
                    }
                    Some((shape, _)) => {
                        if shape_err.is_none() {
                            shape_err = Some(format!(
                                "tensor {name}: file shape {shape:?} vs model {:?}",
                                view.shape()
                            ));
                        }
                    }
                    None => missing.push(name),
                }
            });
        }
        if let Some(msg) = shape_err {
            return Err(Error::CheckpointMismatch(msg));
        }
        if !missing.is_empty() {
            missing.sort();
            missing.dedup();
            return Err(Error::CheckpointMismatch(format!(
                "backbone weights missing {} tensors (first: {})",
                missing.len(),
                missing[0]
            )));
        }
        Ok(())
    }

    /// Backbone-relative state of one half, for exporting weight files.
    pub fn export_base_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.base.visit_state("", &mut |name, view| {
            out.push((name, view.shape().to_vec(), view.iter().copied().collect()));
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn ramp_image(h: usize, w: usize) -> PageImage {
        let mut px = Array2::zeros((h, w));
        for ((y, x), v) in px.indexed_iter_mut() {
            *v = ((y * w + x) % 256) as f64 / 255.0;
        }
        PageImage::new(px, "ramp").unwrap()
    }

    fn test_cfg(side: usize) -> VisionConfig {
        VisionConfig::new(
            BackboneKind::MobileNetV2,
            side,
            [0.5, 0.5, 0.5],
            [0.25, 0.25, 0.25],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn preprocess_replicates_channels_before_standardization() {
        let img = ramp_image(200, 300);
        let mut cfg = test_cfg(384);
        cfg.channel_mean = [0.0, 0.0, 0.0];
        cfg.channel_std = [1.0, 1.0, 1.0];
        let t = preprocess(&img, &cfg).unwrap();
        assert_eq!(t.dim(), (3, 384, 384));
        for y in [0usize, 100, 383] {
            for x in [0usize, 191, 383] {
                assert_eq!(t[[0, y, x]], t[[1, y, x]]);
                assert_eq!(t[[1, y, x]], t[[2, y, x]]);
            }
        }
    }

    #[test]
    fn constant_image_at_channel_mean_standardizes_to_zero() {
        let px = Array2::from_elem((64, 48), 0.5);
        let img = PageImage::new(px, "flat").unwrap();
        let mut cfg = test_cfg(32);
        cfg.channel_std = [1.0, 1.0, 1.0];
        let t = preprocess(&img, &cfg).unwrap();
        assert!(t.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_resize_preserves_pixels() {
        let img = ramp_image(384, 384);
        let out = resize_bilinear(img.pixels(), 384, 384);
        for (a, b) in out.iter().zip(img.pixels().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_images_are_rejected() {
        assert!(matches!(
            PageImage::new(Array2::zeros((0, 5)), "x").unwrap_err(),
            Error::DegenerateImage(_)
        ));
        let mut px = Array2::zeros((2, 2));
        px[[0, 0]] = 1.5;
        assert!(PageImage::new(px, "x").is_err());
    }

    #[test]
    fn channel_stats_standardize_a_random_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let images: Vec<PageImage> = (0..12)
            .map(|i| {
                let mut px = Array2::zeros((40, 40));
                for v in px.iter_mut() {
                    *v = rng.random_range(0.0..1.0);
                }
                PageImage::new(px, format!("img{i}")).unwrap()
            })
            .collect();
        let (mean, std) = compute_channel_stats(&images, 32).unwrap();
        let cfg = VisionConfig::new(BackboneKind::MobileNetV2, 32, mean, std, 1.0).unwrap();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut n = 0usize;
        for img in &images {
            let t = preprocess(img, &cfg).unwrap();
            let c0 = t.slice(ndarray::s![0, .., ..]);
            sum += c0.sum();
            sumsq += c0.iter().map(|v| v * v).sum::<f64>();
            n += c0.len();
        }
        let m = sum / n as f64;
        let s = (sumsq / n as f64 - m * m).sqrt();
        assert!(m.abs() < 0.05, "post-standardization mean {m}");
        assert!((s - 1.0).abs() < 0.1, "post-standardization std {s}");
    }

    #[test]
    fn base_and_side_start_identical_and_base_stays_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut pair = BackbonePair::new(BackboneKind::MobileNetV2, 0.125, &mut rng);
        let x = Array4::from_elem((1, 3, 32, 32), 0.3);
        let b0 = pair.forward(&x, Which::Base, Mode::Eval);
        let s0 = pair.forward(&x, Which::Side, Mode::Eval);
        assert_eq!(b0, s0);

        // Nudge every side parameter; the base must not move.
        pair.visit_trainable(&mut |p| p.value.mapv_inplace(|v| v + 0.01));
        let b1 = pair.forward(&x, Which::Base, Mode::Eval);
        let s1 = pair.forward(&x, Which::Side, Mode::Eval);
        assert_eq!(b0, b1);
        assert_ne!(s0, s1);
    }

    #[test]
    fn base_forward_is_bit_stable_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut pair = BackbonePair::new(BackboneKind::MobileNetV2, 0.125, &mut rng);
        let x = Array4::from_elem((1, 3, 32, 32), 0.7);
        // Even when asked for train mode, the base path runs eval.
        let a = pair.forward(&x, Which::Base, Mode::Train);
        let b = pair.forward(&x, Which::Base, Mode::Train);
        for (u, v) in a.iter().zip(b.iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
}
