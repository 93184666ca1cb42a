//! Composite vision blocks: conv+norm+activation, the inverted residual
//! block, and the bottleneck residual block.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::nn::{join, Activation, BatchNorm2d, Conv2d, MaxPool2d, Mode, Param, StateFn, StateMutFn};

/// Conv -> BatchNorm -> activation. The conv carries no bias (the norm
/// absorbs it).
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Activation,
    act_mask: Option<Array4<f64>>,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let padding = (kernel - 1) / 2;
        Self {
            conv: Conv2d::new(in_ch, out_ch, kernel, stride, padding, groups, false, rng),
            bn: BatchNorm2d::new(out_ch),
            act,
            act_mask: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let y = self.conv.forward(x, mode);
        let z = self.bn.forward(&y, mode);
        if self.act == Activation::None {
            self.act_mask = None;
            return z;
        }
        let mut mask = Array4::zeros(z.raw_dim());
        let mut out = Array4::zeros(z.raw_dim());
        ndarray::azip!((m in &mut mask, o in &mut out, &v in &z) {
            *m = self.act.derivative(v);
            *o = self.act.apply(v);
        });
        self.act_mask = (mode == Mode::Train).then_some(mask);
        out
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let g = match self.act_mask.take() {
            Some(mask) => grad * &mask,
            None => {
                assert!(self.act == Activation::None, "activation mask missing");
                grad.clone()
            }
        };
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        self.conv.visit_state(&join(prefix, "conv"), f);
        self.bn.visit_state(&join(prefix, "bn"), f);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        self.conv.visit_state_mut(&join(prefix, "conv"), f);
        self.bn.visit_state_mut(&join(prefix, "bn"), f);
    }
}

/// MobileNetV2 inverted residual: optional 1x1 expansion, 3x3 depthwise,
/// linear 1x1 projection, with a skip connection when the shape allows.
#[derive(Debug, Clone)]
pub struct InvertedResidual {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    project_conv: Conv2d,
    project_bn: BatchNorm2d,
    use_res: bool,
    saved_input: Option<Array4<f64>>,
}

impl InvertedResidual {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        expand_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = in_ch * expand_ratio;
        let expand = (expand_ratio != 1)
            .then(|| ConvBnAct::new(in_ch, hidden, 1, 1, 1, Activation::Relu6, rng));
        let depthwise = ConvBnAct::new(hidden, hidden, 3, stride, hidden, Activation::Relu6, rng);
        let project_conv = Conv2d::new(hidden, out_ch, 1, 1, 0, 1, false, rng);
        let project_bn = BatchNorm2d::new(out_ch);
        Self {
            expand,
            depthwise,
            project_conv,
            project_bn,
            use_res: stride == 1 && in_ch == out_ch,
            saved_input: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let mut t = match &mut self.expand {
            Some(e) => e.forward(x, mode),
            None => x.clone(),
        };
        t = self.depthwise.forward(&t, mode);
        t = self.project_conv.forward(&t, mode);
        t = self.project_bn.forward(&t, mode);
        self.saved_input = None;
        if self.use_res {
            if mode == Mode::Train {
                self.saved_input = Some(x.clone());
            }
            t + x
        } else {
            t
        }
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let g = self.project_bn.backward(grad);
        let g = self.project_conv.backward(&g);
        let g = self.depthwise.backward(&g);
        let g = match &mut self.expand {
            Some(e) => e.backward(&g),
            None => g,
        };
        if self.use_res {
            self.saved_input = None;
            g + grad
        } else {
            g
        }
    }

    pub fn num_params(&self) -> usize {
        self.expand.as_ref().map_or(0, ConvBnAct::num_params)
            + self.depthwise.num_params()
            + self.project_conv.num_params()
            + self.project_bn.num_params()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(e) = &mut self.expand {
            e.visit_params(f);
        }
        self.depthwise.visit_params(f);
        self.project_conv.visit_params(f);
        self.project_bn.visit_params(f);
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        if let Some(e) = &self.expand {
            e.visit_state(&join(prefix, "expand"), f);
        }
        self.depthwise.visit_state(&join(prefix, "depthwise"), f);
        self.project_conv.visit_state(&join(prefix, "project.conv"), f);
        self.project_bn.visit_state(&join(prefix, "project.bn"), f);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        if let Some(e) = &mut self.expand {
            e.visit_state_mut(&join(prefix, "expand"), f);
        }
        self.depthwise.visit_state_mut(&join(prefix, "depthwise"), f);
        self.project_conv
            .visit_state_mut(&join(prefix, "project.conv"), f);
        self.project_bn
            .visit_state_mut(&join(prefix, "project.bn"), f);
    }
}

/// ResNet bottleneck: 1x1 reduce, 3x3, 1x1 expand, plus an optional
/// downsample projection on the identity path. Final ReLU after the add.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: ConvBnAct,
    conv2: ConvBnAct,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    relu_mask: Option<Array4<f64>>,
}

impl Bottleneck {
    pub const EXPANSION: usize = 4;

    pub fn new(in_ch: usize, planes: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let out_ch = planes * Self::EXPANSION;
        let conv1 = ConvBnAct::new(in_ch, planes, 1, 1, 1, Activation::Relu, rng);
        let conv2 = ConvBnAct::new(planes, planes, 3, stride, 1, Activation::Relu, rng);
        let conv3 = Conv2d::new(planes, out_ch, 1, 1, 0, 1, false, rng);
        let bn3 = BatchNorm2d::new(out_ch);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(in_ch, out_ch, 1, stride, 0, 1, false, rng),
                BatchNorm2d::new(out_ch),
            )
        });
        Self {
            conv1,
            conv2,
            conv3,
            bn3,
            downsample,
            relu_mask: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let identity = match &mut self.downsample {
            Some((conv, bn)) => {
                let y = conv.forward(x, mode);
                bn.forward(&y, mode)
            }
            None => x.clone(),
        };
        let t = self.conv1.forward(x, mode);
        let t = self.conv2.forward(&t, mode);
        let t = self.conv3.forward(&t, mode);
        let t = self.bn3.forward(&t, mode);
        let pre = t + identity;
        let mut out = Array4::zeros(pre.raw_dim());
        let mut mask = Array4::zeros(pre.raw_dim());
        ndarray::azip!((o in &mut out, m in &mut mask, &v in &pre) {
            *o = v.max(0.0);
            *m = if v > 0.0 { 1.0 } else { 0.0 };
        });
        self.relu_mask = (mode == Mode::Train).then_some(mask);
        out
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let mask = self
            .relu_mask
            .take()
            .expect("bottleneck backward without train forward");
        let g = grad * &mask;
        let gb = self.bn3.backward(&g);
        let gb = self.conv3.backward(&gb);
        let gb = self.conv2.backward(&gb);
        let gb = self.conv1.backward(&gb);
        let gi = match &mut self.downsample {
            Some((conv, bn)) => {
                let t = bn.backward(&g);
                conv.backward(&t)
            }
            None => g,
        };
        gb + gi
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params()
            + self.conv2.num_params()
            + self.conv3.num_params()
            + self.bn3.num_params()
            + self
                .downsample
                .as_ref()
                .map_or(0, |(c, b)| c.num_params() + b.num_params())
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        self.conv3.visit_params(f);
        self.bn3.visit_params(f);
        if let Some((c, b)) = &mut self.downsample {
            c.visit_params(f);
            b.visit_params(f);
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        self.conv1.visit_state(&join(prefix, "conv1"), f);
        self.conv2.visit_state(&join(prefix, "conv2"), f);
        self.conv3.visit_state(&join(prefix, "conv3"), f);
        self.bn3.visit_state(&join(prefix, "bn3"), f);
        if let Some((c, b)) = &self.downsample {
            c.visit_state(&join(prefix, "downsample.conv"), f);
            b.visit_state(&join(prefix, "downsample.bn"), f);
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        self.conv1.visit_state_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_state_mut(&join(prefix, "conv2"), f);
        self.conv3.visit_state_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_state_mut(&join(prefix, "bn3"), f);
        if let Some((c, b)) = &mut self.downsample {
            c.visit_state_mut(&join(prefix, "downsample.conv"), f);
            b.visit_state_mut(&join(prefix, "downsample.bn"), f);
        }
    }
}

/// Uniform wrapper so a backbone is a flat layer list.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum VisionLayer {
    ConvBnAct(ConvBnAct),
    InvertedResidual(InvertedResidual),
    Bottleneck(Bottleneck),
    MaxPool(MaxPool2d),
}

impl VisionLayer {
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        match self {
            VisionLayer::ConvBnAct(l) => l.forward(x, mode),
            VisionLayer::InvertedResidual(l) => l.forward(x, mode),
            VisionLayer::Bottleneck(l) => l.forward(x, mode),
            VisionLayer::MaxPool(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        match self {
            VisionLayer::ConvBnAct(l) => l.backward(grad),
            VisionLayer::InvertedResidual(l) => l.backward(grad),
            VisionLayer::Bottleneck(l) => l.backward(grad),
            VisionLayer::MaxPool(l) => l.backward(grad),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            VisionLayer::ConvBnAct(l) => l.num_params(),
            VisionLayer::InvertedResidual(l) => l.num_params(),
            VisionLayer::Bottleneck(l) => l.num_params(),
            VisionLayer::MaxPool(_) => 0,
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            VisionLayer::ConvBnAct(l) => l.visit_params(f),
            VisionLayer::InvertedResidual(l) => l.visit_params(f),
            VisionLayer::Bottleneck(l) => l.visit_params(f),
            VisionLayer::MaxPool(_) => {}
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn<'_>) {
        match self {
            VisionLayer::ConvBnAct(l) => l.visit_state(prefix, f),
            VisionLayer::InvertedResidual(l) => l.visit_state(prefix, f),
            VisionLayer::Bottleneck(l) => l.visit_state(prefix, f),
            VisionLayer::MaxPool(_) => {}
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut StateMutFn<'_>) {
        match self {
            VisionLayer::ConvBnAct(l) => l.visit_state_mut(prefix, f),
            VisionLayer::InvertedResidual(l) => l.visit_state_mut(prefix, f),
            VisionLayer::Bottleneck(l) => l.visit_state_mut(prefix, f),
            VisionLayer::MaxPool(_) => {}
        }
    }
}
