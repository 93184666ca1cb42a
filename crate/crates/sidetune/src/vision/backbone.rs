//! Backbone feature extractors: MobileNetV2 and ResNet50 without their
//! classifier heads, with an optional width multiplier for small test
//! instances. Forward ends in global average pooling over the spatial grid.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{Bottleneck, ConvBnAct, InvertedResidual, VisionLayer};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, Activation, MaxPool2d, Mode, Param, StateFn,
    StateMutFn,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "mobilenetv2")]
    MobileNetV2,
    #[serde(rename = "resnet50")]
    ResNet50,
}

impl std::str::FromStr for BackboneKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mobilenetv2" | "mobilenet_v2" | "mobilenet" => Ok(BackboneKind::MobileNetV2),
            "resnet50" | "resnet-50" | "resnet" => Ok(BackboneKind::ResNet50),
            other => Err(crate::error::Error::InvalidConfig(format!(
                "unknown backbone {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackboneKind::MobileNetV2 => write!(f, "mobilenetv2"),
            BackboneKind::ResNet50 => write!(f, "resnet50"),
        }
    }
}

impl BackboneKind {
    /// Penultimate feature width for a given width multiplier. 1280 for
    /// MobileNetV2 and 2048 for ResNet50 at full width.
    pub fn feature_dim(&self, width_mult: f64) -> usize {
        match self {
            BackboneKind::MobileNetV2 => make_divisible(1280.0 * width_mult.max(1.0), 8),
            BackboneKind::ResNet50 => scale_planes(512, width_mult) * Bottleneck::EXPANSION,
        }
    }
}

/// Channel rounding used by the MobileNet family.
fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let new_v = (d).max(((v + d / 2.0) as usize / divisor * divisor) as f64);
    if new_v < 0.9 * v {
        (new_v as usize) + divisor
    } else {
        new_v as usize
    }
}

fn scale_planes(planes: usize, width_mult: f64) -> usize {
    ((planes as f64 * width_mult).round() as usize).max(1)
}

/// (expand_ratio, channels, repeats, first_stride)
const INVERTED_RESIDUAL_SETTINGS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

/// (planes, blocks, first_stride)
const RESNET50_LAYERS: [(usize, usize, usize); 4] = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];

/// A full feature extractor: layer stack plus global average pool.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub width_mult: f64,
    pub feature_dim: usize,
    layers: Vec<VisionLayer>,
    pool_hw: Option<(usize, usize)>,
}

impl Backbone {
    pub fn build(kind: BackboneKind, width_mult: f64, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            BackboneKind::MobileNetV2 => Self::mobilenet_v2(width_mult, rng),
            BackboneKind::ResNet50 => Self::resnet50(width_mult, rng),
        }
    }

    pub fn mobilenet_v2(width_mult: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut input = make_divisible(32.0 * width_mult, 8);
        layers.push(VisionLayer::ConvBnAct(ConvBnAct::new(
            3,
            input,
            3,
            2,
            1,
            Activation::Relu6,
            rng,
        )));
        for &(t, c, n, s) in INVERTED_RESIDUAL_SETTINGS.iter() {
            let output = make_divisible(c as f64 * width_mult, 8);
            for i in 0..n {
                let stride = if i == 0 { s } else { 1 };
                layers.push(VisionLayer::InvertedResidual(InvertedResidual::new(
                    input, output, stride, t, rng,
                )));
                input = output;
            }
        }
        let last = BackboneKind::MobileNetV2.feature_dim(width_mult);
        layers.push(VisionLayer::ConvBnAct(ConvBnAct::new(
            input,
            last,
            1,
            1,
            1,
            Activation::Relu6,
            rng,
        )));
        Self {
            kind: BackboneKind::MobileNetV2,
            width_mult,
            feature_dim: last,
            layers,
            pool_hw: None,
        }
    }

    pub fn resnet50(width_mult: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut inplanes = scale_planes(64, width_mult);
        layers.push(VisionLayer::ConvBnAct(ConvBnAct::new(
            3,
            inplanes,
            7,
            2,
            1,
            Activation::Relu,
            rng,
        )));
        layers.push(VisionLayer::MaxPool(MaxPool2d::new(3, 2, 1)));
        for &(planes, blocks, stride) in RESNET50_LAYERS.iter() {
            let planes = scale_planes(planes, width_mult);
            for i in 0..blocks {
                let s = if i == 0 { stride } else { 1 };
                layers.push(VisionLayer::Bottleneck(Bottleneck::new(
                    inplanes, planes, s, rng,
                )));
                inplanes = planes * Bottleneck::EXPANSION;
            }
        }
        Self {
            kind: BackboneKind::ResNet50,
            width_mult,
            feature_dim: inplanes,
            layers,
            pool_hw: None,
        }
    }

    /// Runs the stack and pools: (N, 3, H, W) -> (N, feature_dim).
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let mut t = x.clone();
        for layer in &mut self.layers {
            t = layer.forward(&t, mode);
        }
        let (_, _, h, w) = t.dim();
        self.pool_hw = (mode == Mode::Train).then_some((h, w));
        global_avg_pool(&t)
    }

    /// Pushes feature gradients back through the stack, accumulating into
    /// every parameter. The gradient w.r.t. the input image is discarded.
    pub fn backward(&mut self, grad_features: &Array2<f64>) {
        let (h, w) = self
            .pool_hw
            .take()
            .expect("backbone backward without train forward");
        let mut g = global_avg_pool_backward(grad_features, h, w);
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(VisionLayer::num_params).sum()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_state(&crate::nn::join(prefix, &format!("layer{i}")), f);
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_state_mut(&crate::nn::join(prefix, &format!("layer{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn make_divisible_matches_reference_rounding() {
        assert_eq!(make_divisible(32.0, 8), 32);
        assert_eq!(make_divisible(32.0 * 0.125, 8), 8);
        assert_eq!(make_divisible(20.0, 8), 24);
        assert_eq!(make_divisible(160.0 * 0.125, 8), 24);
        assert_eq!(make_divisible(320.0 * 0.125, 8), 40);
        // The +divisor branch: 0.9*v above the floored value.
        assert_eq!(make_divisible(23.0, 8), 24);
        assert_eq!(make_divisible(36.0, 8), 40);
    }

    #[test]
    fn feature_dims_at_full_width() {
        assert_eq!(BackboneKind::MobileNetV2.feature_dim(1.0), 1280);
        assert_eq!(BackboneKind::ResNet50.feature_dim(1.0), 2048);
        // Reduced widths keep the MobileNet head at 1280.
        assert_eq!(BackboneKind::MobileNetV2.feature_dim(0.125), 1280);
        assert_eq!(BackboneKind::ResNet50.feature_dim(0.25), 512);
    }

    #[test]
    fn tiny_mobilenet_forward_and_backward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut net = Backbone::mobilenet_v2(0.125, &mut rng);
        let x = Array4::from_elem((2, 3, 32, 32), 0.2);
        let features = net.forward(&x, Mode::Train);
        assert_eq!(features.dim(), (2, 1280));
        net.backward(&Array2::from_elem((2, 1280), 0.01));
        let mut count = 0usize;
        net.visit_params(&mut |p| {
            count += 1;
            assert_eq!(p.grad.shape(), p.value.shape());
        });
        assert!(count > 50);
    }

    #[test]
    fn tiny_resnet_forward_and_backward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut net = Backbone::resnet50(0.125, &mut rng);
        assert_eq!(net.feature_dim, 256);
        let x = Array4::from_elem((1, 3, 32, 32), 0.4);
        let features = net.forward(&x, Mode::Train);
        assert_eq!(features.dim(), (1, 256));
        net.backward(&Array2::from_elem((1, 256), 0.05));
    }

    #[test]
    fn full_width_parameter_counts_match_reference_architectures() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mobilenet = Backbone::mobilenet_v2(1.0, &mut rng);
        assert_eq!(mobilenet.num_params(), 2_223_872);
        let resnet = Backbone::resnet50(1.0, &mut rng);
        assert_eq!(resnet.num_params(), 23_508_032);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut net = Backbone::mobilenet_v2(0.125, &mut rng);
        let x = Array4::from_elem((1, 3, 32, 32), 0.3);
        let a = net.forward(&x, Mode::Eval);
        let b = net.forward(&x, Mode::Eval);
        assert_eq!(a, b);
    }
}
