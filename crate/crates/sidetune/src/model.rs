//! The fused classifier: frozen base backbone, trainable image side,
//! trainable text side behind an adaptation layer, alpha-weighted merge,
//! optional dense layer, and the classification head.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{combine, AdaptationLayer, AlphaConfig, Classifier, Encoding};
use crate::nn::{Mode, Param, StateFn, StateMutFn};
use crate::text::{TextEncoder, TextEncoderConfig, TokenMatrix};
use crate::vision::{BackbonePair, VisionConfig, Which};

/// Everything needed to rebuild the architecture deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vision: VisionConfig,
    pub text: TextEncoderConfig,
    pub alphas: Vec<f64>,
    pub fc_width: Option<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<AlphaConfig> {
        self.text.validate()?;
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        let alpha = AlphaConfig::new(self.alphas.clone())?;
        if alpha.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "expected 3 alpha coefficients (base, image side, text side), got {}",
                alpha.len()
            )));
        }
        Ok(alpha)
    }
}

/// Wall-clock stage timings of a single-document forward.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub base: Duration,
    pub side_image: Duration,
    pub side_text: Duration,
}

/// Per-component parameter counts. The base is reported but excluded from
/// the trainable total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub backbone: String,
    pub width_mult: f64,
    pub base: usize,
    pub side_image: usize,
    pub side_text: usize,
    pub adaptation: usize,
    pub fc: usize,
    pub head: usize,
}

impl ParamReport {
    pub fn trainable_total(&self) -> usize {
        self.side_image + self.side_text + self.adaptation + self.fc + self.head
    }

    pub fn grand_total(&self) -> usize {
        self.base + self.trainable_total()
    }
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "parameters ({} width x{}):", self.backbone, self.width_mult)?;
        writeln!(f, "  base (frozen)      {:>12}", self.base)?;
        writeln!(f, "  side image         {:>12}", self.side_image)?;
        writeln!(f, "  side text          {:>12}", self.side_text)?;
        writeln!(f, "  adaptation         {:>12}", self.adaptation)?;
        writeln!(f, "  fc                 {:>12}", self.fc)?;
        writeln!(f, "  head               {:>12}", self.head)?;
        writeln!(f, "  trainable total    {:>12}", self.trainable_total())?;
        writeln!(f, "  grand total        {:>12}", self.grand_total())?;
        if self.width_mult == 1.0 {
            let refs = match self.backbone.as_str() {
                "mobilenetv2" => "reference: image fine-tune ~3.5M, image side-tune ~7M, multimodal ~12M",
                _ => "reference: image side-tune ~51M, multimodal ~57M",
            };
            writeln!(f, "  {refs}")?;
        }
        Ok(())
    }
}

/// The multimodal side-tuned document classifier.
#[derive(Debug)]
pub struct FusedEncoder {
    pub spec: ModelSpec,
    pub alpha: AlphaConfig,
    backbones: BackbonePair,
    text: TextEncoder,
    adaptation: AdaptationLayer,
    classifier: Classifier,
}

impl FusedEncoder {
    /// Deterministic construction from the spec's init seed. Base and image
    /// side start from identical weights; the text side and the dense layers
    /// are freshly initialized.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        let alpha = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let backbones = BackbonePair::new(spec.vision.backbone, spec.vision.width_mult, &mut rng);
        let text = TextEncoder::new(spec.text.clone(), &mut rng, spec.init_seed ^ 0xd20f0)?;
        let feature_dim = backbones.feature_dim();
        let adaptation = AdaptationLayer::new(spec.text.output_dim(), feature_dim, &mut rng);
        let classifier = Classifier::new(feature_dim, spec.fc_width, spec.num_classes, &mut rng)?;
        Ok(Self {
            spec,
            alpha,
            backbones,
            text,
            adaptation,
            classifier,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbones.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    /// Batched forward over preprocessed image tensors and token matrices.
    /// Zero-coefficient branches are skipped entirely, so their side effects
    /// (batch statistics, dropout draws) never occur.
    pub fn forward_batch(
        &mut self,
        images: &Array4<f64>,
        tokens: &Array3<f64>,
        mode: Mode,
    ) -> Result<Array2<f64>> {
        let n = images.dim().0;
        if tokens.dim().0 != n {
            return Err(Error::ShapeError(format!(
                "batch size mismatch: {} images vs {} token matrices",
                n,
                tokens.dim().0
            )));
        }
        let d = self.feature_dim();
        let mut fused = Array2::zeros((n, d));
        let a = self.alpha.values().to_vec();
        if a[0] != 0.0 {
            let base = self.backbones.forward(images, Which::Base, mode);
            fused.scaled_add(a[0], &base);
        }
        if a[1] != 0.0 {
            let side = self.backbones.forward(images, Which::Side, mode);
            fused.scaled_add(a[1], &side);
        }
        if a[2] != 0.0 {
            let text = self.text.forward_batch(tokens, mode)?;
            let adapted = self.adaptation.forward_batch(&text, mode)?;
            fused.scaled_add(a[2], &adapted);
        }
        self.classifier.forward_batch(&fused, mode)
    }

    /// Backpropagates score gradients into every trainable component. The
    /// frozen base receives nothing by construction.
    pub fn backward(&mut self, grad_scores: &Array2<f64>) {
        let g = self.classifier.backward(grad_scores);
        let a = self.alpha.values().to_vec();
        if a[1] != 0.0 {
            self.backbones.backward_side(&(&g * a[1]));
        }
        if a[2] != 0.0 {
            let gt = self.adaptation.backward(&(&g * a[2]));
            self.text.backward(&gt);
        }
    }

    /// Single-document eval forward with per-stage wall-clock timings.
    pub fn predict_single(
        &mut self,
        image: &Array3<f64>,
        matrix: &TokenMatrix,
    ) -> Result<(Array1<f64>, StageTimings)> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::ShapeError(format!("expected 3 channels, got {c}")));
        }
        let mut batch = Array4::zeros((1, 3, h, w));
        batch.index_axis_mut(Axis(0), 0).assign(image);
        let mut timings = StageTimings::default();
        let a = self.alpha.values().to_vec();

        let dim = self.feature_dim();
        let zero = || Encoding::new(Array1::zeros(dim)).unwrap();
        let base = if a[0] != 0.0 {
            let t0 = Instant::now();
            let out = self.backbones.forward(&batch, Which::Base, Mode::Eval);
            timings.base = t0.elapsed();
            Encoding::new(out.row(0).to_owned())?
        } else {
            zero()
        };
        let side = if a[1] != 0.0 {
            let t0 = Instant::now();
            let out = self.backbones.forward(&batch, Which::Side, Mode::Eval);
            timings.side_image = t0.elapsed();
            Encoding::new(out.row(0).to_owned())?
        } else {
            zero()
        };
        let text = if a[2] != 0.0 {
            let t0 = Instant::now();
            let enc = self.text.text_forward(matrix)?;
            let adapted = self.adaptation.adapt(&enc)?;
            timings.side_text = t0.elapsed();
            adapted
        } else {
            zero()
        };
        let fused = combine(&[base, side, text], &self.alpha)?;
        let scores = self.classifier.classify(&fused)?;
        Ok((scores, timings))
    }

    /// Trainable parameters: image side, text side, adaptation, fc, head.
    pub fn visit_trainable(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbones.visit_trainable(f);
        self.text.visit_params(f);
        self.adaptation.visit_params(f);
        self.classifier.visit_params(f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_trainable(&mut Param::zero_grad);
    }

    pub fn param_report(&self) -> ParamReport {
        let fc = self.classifier.fc.as_ref().map_or(0, |l| l.num_params());
        ParamReport {
            backbone: self.spec.vision.backbone.to_string(),
            width_mult: self.spec.vision.width_mult,
            base: self.backbones.base_num_params(),
            side_image: self.backbones.side_num_params(),
            side_text: self.text.num_params(),
            adaptation: self.adaptation.num_params(),
            fc,
            head: self.classifier.head.num_params(),
        }
    }

    /// Full persistent state, including frozen base weights and batch-norm
    /// buffers.
    pub fn visit_state(&self, f: &mut StateFn<'_>) {
        self.backbones.visit_state("backbones", f);
        self.text.visit_state("text", f);
        self.adaptation.visit_state("adaptation", f);
        self.classifier.visit_state("classifier", f);
    }

    pub fn visit_state_mut(&mut self, f: &mut StateMutFn<'_>) {
        self.backbones.visit_state_mut("backbones", f);
        self.text.visit_state_mut("text", f);
        self.adaptation.visit_state_mut("adaptation", f);
        self.classifier.visit_state_mut("classifier", f);
    }

    /// Installs converted pre-trained weights into both the frozen base and
    /// the image side (identical initialization). Must happen before any
    /// training step.
    pub fn load_pretrained_backbone(
        &mut self,
        tensors: &crate::checkpoint::NamedTensors,
    ) -> Result<()> {
        let map: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = tensors
            .iter()
            .map(|(name, shape, data)| (name.clone(), (shape.clone(), data.clone())))
            .collect();
        self.backbones.load_shared_weights(&map)
    }

    /// SHA-256 over the serialized frozen-base state, in visit order.
    pub fn base_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.backbones.visit_base_state(&mut |name, view| {
            hasher.update(name.as_bytes());
            for d in view.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in view.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::BackboneKind;

    pub(crate) fn tiny_spec(alphas: Vec<f64>, fc_width: Option<usize>) -> ModelSpec {
        ModelSpec {
            vision: VisionConfig {
                backbone: BackboneKind::MobileNetV2,
                input_side: 32,
                channel_mean: [0.5, 0.5, 0.5],
                channel_std: [0.25, 0.25, 0.25],
                width_mult: 0.125,
            },
            text: TextEncoderConfig {
                window_sizes: vec![2, 3],
                filters_per_window: 4,
                dropout_prob: 0.5,
                embedding_dim: 6,
                max_tokens: 10,
                num_classes: 2,
            },
            alphas,
            fc_width,
            num_classes: 2,
            init_seed: 7,
        }
    }

    fn tiny_inputs(n: usize, seed: u64) -> (Array4<f64>, Array3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Array4::zeros((n, 3, 32, 32));
        for v in images.iter_mut() {
            *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
        let mut tokens = Array3::zeros((n, 10, 6));
        for v in tokens.iter_mut() {
            *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
        (images, tokens)
    }

    #[test]
    fn build_validates_alphas() {
        assert!(FusedEncoder::build(tiny_spec(vec![0.2, 0.3, 0.5], None)).is_ok());
        let err = FusedEncoder::build(tiny_spec(vec![0.5, 0.6, 0.5], None)).unwrap_err();
        assert_eq!(err.class(), "ConstraintViolation");
        let err = FusedEncoder::build(tiny_spec(vec![0.5, 0.5], None)).unwrap_err();
        assert_eq!(err.class(), "InvalidConfig");
    }

    #[test]
    fn forward_shapes_and_determinism_in_eval() {
        let mut model = FusedEncoder::build(tiny_spec(vec![0.2, 0.3, 0.5], None)).unwrap();
        let (images, tokens) = tiny_inputs(3, 41);
        let a = model.forward_batch(&images, &tokens, Mode::Eval).unwrap();
        assert_eq!(a.dim(), (3, 2));
        let b = model.forward_batch(&images, &tokens, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_alpha_matches_single_branch_through_model() {
        // alpha = (1,0,0): fused representation equals the base encoding, so
        // two models differing only in side weights agree bit for bit.
        let mut m = FusedEncoder::build(tiny_spec(vec![1.0, 0.0, 0.0], None)).unwrap();
        let (images, tokens) = tiny_inputs(2, 42);
        let scores = m.forward_batch(&images, &tokens, Mode::Eval).unwrap();
        // Perturbing side and text weights cannot change anything.
        let mut m2 = FusedEncoder::build(tiny_spec(vec![1.0, 0.0, 0.0], None)).unwrap();
        m2.backbones.visit_trainable(&mut |p| p.value.mapv_inplace(|v| v + 1.0));
        m2.text.visit_params(&mut |p| p.value.mapv_inplace(|v| v - 2.0));
        m2.adaptation.visit_params(&mut |p| p.value.mapv_inplace(|v| v + 3.0));
        let scores2 = m2.forward_batch(&images, &tokens, Mode::Eval).unwrap();
        for (a, b) in scores.iter().zip(scores2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn backward_accumulates_only_into_trainable_parts() {
        let mut model = FusedEncoder::build(tiny_spec(vec![0.2, 0.3, 0.5], Some(512))).unwrap();
        let (images, tokens) = tiny_inputs(2, 43);
        let hash_before = model.base_hash();
        let scores = model.forward_batch(&images, &tokens, Mode::Train).unwrap();
        let (_, grad) = crate::nn::cross_entropy(&scores, &[0, 1]);
        model.backward(&grad);
        let mut nonzero = 0usize;
        model.visit_trainable(&mut |p| {
            if p.grad.iter().any(|&g| g != 0.0) {
                nonzero += 1;
            }
        });
        assert!(nonzero > 10, "expected gradients in many trainable tensors");
        assert_eq!(model.base_hash(), hash_before);
    }

    #[test]
    fn predict_single_matches_batched_eval_path() {
        let mut model = FusedEncoder::build(tiny_spec(vec![0.2, 0.3, 0.5], Some(512))).unwrap();
        let (images, tokens) = tiny_inputs(1, 44);
        let batch_scores = model.forward_batch(&images, &tokens, Mode::Eval).unwrap();
        let image = images.index_axis(Axis(0), 0).to_owned();
        let rows = tokens.index_axis(Axis(0), 0).to_owned();
        let matrix = TokenMatrix::new(rows, 10).unwrap();
        let (scores, timings) = model.predict_single(&image, &matrix).unwrap();
        for (a, b) in scores.iter().zip(batch_scores.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(timings.base <= timings.base + timings.side_image + timings.side_text);
    }

    #[test]
    fn param_report_counts_are_consistent() {
        let mut model = FusedEncoder::build(tiny_spec(vec![0.2, 0.3, 0.5], Some(1024))).unwrap();
        let report = model.param_report();
        let mut visited = 0usize;
        model.visit_trainable(&mut |p| visited += p.len());
        assert_eq!(report.trainable_total(), visited);
        assert_eq!(report.base, report.side_image);
        assert!(report.fc > 0);
        let text = format!("{report}");
        assert!(text.contains("trainable total"));
    }

    #[test]
    fn base_hash_is_stable_and_side_sensitive() {
        let model = FusedEncoder::build(tiny_spec(vec![0.2, 0.3, 0.5], None)).unwrap();
        let h1 = model.base_hash();
        let h2 = model.base_hash();
        assert_eq!(h1, h2);
        let mut other = FusedEncoder::build(tiny_spec(vec![0.2, 0.3, 0.5], None)).unwrap();
        other.backbones.visit_trainable(&mut |p| p.value.mapv_inplace(|v| v + 0.5));
        // Side mutation leaves the base hash alone.
        assert_eq!(other.base_hash(), h1);
    }

    #[test]
    fn pretrained_backbone_weights_apply_to_both_halves() {
        let donor = FusedEncoder::build(tiny_spec(vec![0.2, 0.3, 0.5], None)).unwrap();
        let tensors = donor.backbones.export_base_tensors();

        let mut spec = tiny_spec(vec![0.2, 0.3, 0.5], None);
        spec.init_seed = 99; // different random init
        let mut receiver = FusedEncoder::build(spec).unwrap();
        assert_ne!(receiver.base_hash(), donor.base_hash());
        receiver.load_pretrained_backbone(&tensors).unwrap();
        assert_eq!(receiver.base_hash(), donor.base_hash());

        // Both halves hold the donor weights: side == base on a probe.
        let (images, _) = tiny_inputs(1, 46);
        let b = receiver
            .backbones
            .forward(&images, crate::vision::Which::Base, Mode::Eval);
        let s = receiver
            .backbones
            .forward(&images, crate::vision::Which::Side, Mode::Eval);
        assert_eq!(b, s);

        // A truncated tensor set is rejected.
        let partial = tensors[..tensors.len() - 1].to_vec();
        let err = receiver.load_pretrained_backbone(&partial).unwrap_err();
        assert_eq!(err.class(), "CheckpointMismatch");
    }

    #[test]
    fn state_roundtrip_restores_outputs() {
        let mut model = FusedEncoder::build(tiny_spec(vec![0.2, 0.3, 0.5], Some(512))).unwrap();
        let (images, tokens) = tiny_inputs(2, 45);
        let before = model.forward_batch(&images, &tokens, Mode::Eval).unwrap();
        let mut saved: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
        model.visit_state(&mut |name, view| {
            saved.push((name, view.iter().copied().collect(), view.shape().to_vec()));
        });
        // Scramble, then restore from the saved state.
        model.visit_trainable(&mut |p| p.value.fill(0.123));
        let mut idx = 0usize;
        model.visit_state_mut(&mut |name, mut view| {
            assert_eq!(saved[idx].0, name);
            for (dst, src) in view.iter_mut().zip(saved[idx].1.iter()) {
                *dst = *src;
            }
            idx += 1;
        });
        let after = model.forward_batch(&images, &tokens, Mode::Eval).unwrap();
        assert_eq!(before, after);
    }
}
