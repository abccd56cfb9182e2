//! Feature encoders: Conv4 and ResNet-12.
//!
//! Both map a `[batch, 3, s, s]` image tensor to `[batch, c, s/16, s/16]`
//! feature maps through four stages that each end in a 2x2 max-pool.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsadError};
use crate::nn::module::join;
use crate::nn::{BatchNorm2d, Conv2d, Entry, EntryMut, MaxPool2, Mode, Module, Real, Relu, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Conv4,
    ResNet12,
}

impl FromStr for BackboneKind {
    type Err = RsadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "conv4" => Ok(BackboneKind::Conv4),
            "resnet12" => Ok(BackboneKind::ResNet12),
            other => Err(RsadError::config("backbone", format!("unknown backbone kind `{other}`"))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Conv4 => "conv4",
            BackboneKind::ResNet12 => "resnet12",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Output channels of each stage.
    pub channels: Vec<usize>,
    /// Square input resolution in pixels.
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn conv4(input_size: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::Conv4,
            channels: vec![64; 4],
            input_size,
        }
    }

    pub fn resnet12(input_size: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::ResNet12,
            channels: vec![64, 128, 256, 512],
            input_size,
        }
    }

    pub fn standard(kind: BackboneKind, input_size: usize) -> Self {
        match kind {
            BackboneKind::Conv4 => Self::conv4(input_size),
            BackboneKind::ResNet12 => Self::resnet12(input_size),
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated channel plan")
    }

    /// Spatial side of the output map, with floor division at every pool.
    pub fn out_size(&self) -> usize {
        self.channels
            .iter()
            .fold(self.input_size, |s, _| MaxPool2::out_size(s))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(RsadError::config("channels", "need at least one non-zero stage"));
        }
        if self.out_size() == 0 {
            return Err(RsadError::config(
                "input_size",
                format!(
                    "{} px vanishes after {} poolings",
                    self.input_size,
                    self.channels.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock<T> {
    conv: Conv2d<T>,
    /// BN fused with the ReLU and the 2x2 max-pool.
    bn: BatchNorm2d<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        ConvBlock {
            conv: Conv2d::new(cin, cout, 3, 1, true, rng),
            bn: BatchNorm2d::with_relu_pool(cout),
        }
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let x = self.conv.forward(x, mode);
        self.bn.forward(x, mode)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.bn.infer(&self.conv.infer(x))
    }

    fn backward(&mut self, dy: Tensor<T>) -> Option<Tensor<T>> {
        let d = self.bn.backward(dy);
        self.conv.backward(&d)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Three conv-BN layers (ReLU after the first two), a projected shortcut,
/// a ReLU after the sum and a 2x2 max-pool.
#[derive(Clone, Debug)]
struct ResBlock<T> {
    conv1: Conv2d<T>,
    /// BN fused with ReLU.
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    /// BN fused with ReLU.
    bn2: BatchNorm2d<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm2d<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu_out: Relu,
    pool: MaxPool2,
}

impl<T: Real> ResBlock<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        ResBlock {
            conv1: Conv2d::new(cin, cout, 3, 1, false, rng),
            bn1: BatchNorm2d::with_relu(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, false, rng),
            bn2: BatchNorm2d::with_relu(cout),
            conv3: Conv2d::new(cout, cout, 3, 1, false, rng),
            bn3: BatchNorm2d::new(cout),
            shortcut: (cin != cout)
                .then(|| (Conv2d::new(cin, cout, 1, 0, false, rng), BatchNorm2d::new(cout))),
            relu_out: Relu::default(),
            pool: MaxPool2::default(),
        }
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x.clone(), mode);
                bn.forward(s, mode)
            }
            None => x.clone(),
        };
        let a = self.bn1.forward(self.conv1.forward(x, mode), mode);
        let a = self.bn2.forward(self.conv2.forward(a, mode), mode);
        let mut a = self.bn3.forward(self.conv3.forward(a, mode), mode);
        a.add_assign(&skip);
        let a = self.relu_out.forward(a, mode);
        self.pool.forward(a, mode)
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.infer(&conv.infer(x)),
            None => x.clone(),
        };
        let a = self.bn1.infer(&self.conv1.infer(x));
        let a = self.bn2.infer(&self.conv2.infer(&a));
        let mut a = self.bn3.infer(&self.conv3.infer(&a));
        a.add_assign(&skip);
        MaxPool2::infer(&Relu::infer(a))
    }

    fn backward(&mut self, dy: Tensor<T>) -> Option<Tensor<T>> {
        let d = self.pool.backward(&dy);
        let d_sum = self.relu_out.backward(d);
        let d_skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let d = bn.backward(d_sum.clone());
                conv.backward(&d)
            }
            None => Some(d_sum.clone()),
        };
        let d = self.bn3.backward(d_sum);
        let d = self.conv3.backward(&d).expect("inner conv keeps input grad");
        let d = self.bn2.backward(d);
        let d = self.conv2.backward(&d).expect("inner conv keeps input grad");
        let d = self.bn1.backward(d);
        let d_main = self.conv1.backward(&d);
        match (d_main, d_skip) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }

    fn set_input_grad(&mut self, on: bool) {
        self.conv1.input_grad = on;
        if let Some((conv, _)) = &mut self.shortcut {
            conv.input_grad = on;
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&join(prefix, "shortcut.conv"), f);
            bn.visit(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_mut(&join(prefix, "shortcut.conv"), f);
            bn.visit_mut(&join(prefix, "shortcut.bn"), f);
        }
    }
}

#[derive(Clone, Debug)]
enum Block<T> {
    Plain(ConvBlock<T>),
    Residual(ResBlock<T>),
}

/// A feature encoder `f_theta`.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    config: BackboneConfig,
    blocks: Vec<Block<T>>,
}

/// Builds an encoder with freshly initialized weights.
pub fn build_backbone<T: Real, R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Encoder<T>> {
    config.validate()?;
    let mut blocks = Vec::with_capacity(config.channels.len());
    let mut cin = 3;
    for (i, &cout) in config.channels.iter().enumerate() {
        let block = match config.kind {
            BackboneKind::Conv4 => {
                let mut b = ConvBlock::new(cin, cout, rng);
                b.conv.input_grad = i > 0;
                Block::Plain(b)
            }
            BackboneKind::ResNet12 => {
                let mut b = ResBlock::new(cin, cout, rng);
                b.set_input_grad(i > 0);
                Block::Residual(b)
            }
        };
        blocks.push(block);
        cin = cout;
    }
    Ok(Encoder {
        config: config.clone(),
        blocks,
    })
}

/// Number of trainable scalars in an encoder (BN running statistics excluded).
pub fn count_params<T: Real>(encoder: &Encoder<T>) -> usize {
    encoder.num_params()
}

impl<T: Real> Encoder<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `(channels, height, width)` of one output feature map.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let s = self.config.out_size();
        (self.config.out_channels(), s, s)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 4 {
            return Err(RsadError::input(format!("expected [batch, 3, h, w], got {:?}", x.shape())));
        }
        let (_, c, h, w) = x.dims4();
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(RsadError::input(format!(
                "encoder expects 3x{s}x{s} images, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// Forward pass. In `Mode::Train` activations are cached for
    /// [`Encoder::backward`] and batch-norm running statistics move.
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(&x)?;
        let mut x = x;
        for block in &mut self.blocks {
            x = match block {
                Block::Plain(b) => b.forward(x, mode),
                Block::Residual(b) => b.forward(x, mode),
            };
        }
        Ok(x)
    }

    /// Inference with frozen statistics; does not mutate the encoder.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur: Option<Tensor<T>> = None;
        for block in &self.blocks {
            let input = cur.as_ref().unwrap_or(x);
            let out = match block {
                Block::Plain(b) => b.infer(input),
                Block::Residual(b) => b.infer(input),
            };
            cur = Some(out);
        }
        Ok(cur.expect("at least one block"))
    }

    /// Backpropagates `dy` (gradient w.r.t. the last forward output) and
    /// accumulates parameter gradients.
    pub fn backward(&mut self, dy: Tensor<T>) {
        let mut d = Some(dy);
        for block in self.blocks.iter_mut().rev() {
            let g = d.take().expect("gradient flows to every block but the first");
            d = match block {
                Block::Plain(b) => b.backward(g),
                Block::Residual(b) => b.backward(g),
            };
        }
    }

    /// Scales the last batch-norm (or last residual-branch batch-norm) to
    /// `value`; exercises degenerate initializations.
    pub fn set_final_bn_scale(&mut self, value: T) {
        if let Some(block) = self.blocks.last_mut() {
            let bn = match block {
                Block::Plain(b) => &mut b.bn,
                Block::Residual(b) => &mut b.bn3,
            };
            bn.gamma.value.fill(value);
        }
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        for (i, block) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            match block {
                Block::Plain(b) => b.visit(&p, f),
                Block::Residual(b) => b.visit(&p, f),
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            match block {
                Block::Plain(b) => b.visit_mut(&p, f),
                Block::Residual(b) => b.visit_mut(&p, f),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Closed-form Conv4 size: per stage 3x3 conv weights + bias + BN affine.
    fn conv4_closed_form(channels: &[usize]) -> usize {
        let mut cin = 3;
        let mut total = 0;
        for &c in channels {
            total += c * cin * 9 + c + 2 * c;
            cin = c;
        }
        total
    }

    /// Closed-form ResNet-12 size: three bias-free 3x3 convs, a 1x1
    /// projection and four BN layers per stage.
    fn resnet12_closed_form(channels: &[usize]) -> usize {
        let mut cin = 3;
        let mut total = 0;
        for &c in channels {
            total += c * cin * 9 + 2 * c * c * 9 + c * cin + 4 * 2 * c;
            cin = c;
        }
        total
    }

    fn param_values(enc: &Encoder<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        enc.visit("", &mut |_, e| {
            if let Entry::Param(p) = e {
                out.extend_from_slice(p.value.data());
            }
        });
        out
    }

    fn param_grads(enc: &Encoder<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        enc.visit("", &mut |_, e| {
            if let Entry::Param(p) = e {
                out.extend_from_slice(p.grad.data());
            }
        });
        out
    }

    fn nudge(enc: &mut Encoder<f64>, index: usize, delta: f64) {
        let mut seen = 0;
        enc.visit_mut("", &mut |_, e| {
            if let EntryMut::Param(p) = e {
                let n = p.value.len();
                if (seen..seen + n).contains(&index) {
                    p.value.data_mut()[index - seen] += delta;
                }
                seen += n;
            }
        });
    }

    /// Relative error `|a - n| / max(|a|, |n|)` over the whole gradient vector.
    fn backbone_gradient_error(kind: BackboneKind, channels: Vec<usize>) -> f64 {
        const H: f64 = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = BackboneConfig {
            kind,
            channels,
            input_size: 8,
        };
        let mut enc = build_backbone::<f64, _>(&cfg, &mut rng).unwrap();
        let normal = rand_distr::StandardNormal;
        let x = Tensor::from_fn(&[3, 3, 8, 8], |_| rand_distr::Distribution::<f64>::sample(&normal, &mut rng));
        let y = enc.forward(x.clone(), Mode::Train).unwrap();
        let r = Tensor::from_fn(y.shape(), |_| rand_distr::Distribution::<f64>::sample(&normal, &mut rng));
        let loss = |enc: &mut Encoder<f64>| -> f64 {
            let y = enc.forward(x.clone(), Mode::Train).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        enc.visit_mut("", &mut |_, e| {
            if let EntryMut::Param(p) = e {
                p.zero_grad();
            }
        });
        enc.forward(x.clone(), Mode::Train).unwrap();
        enc.backward(r.clone());
        let analytic = param_grads(&enc);
        let numeric: Vec<f64> = (0..param_values(&enc).len())
            .map(|i| {
                nudge(&mut enc, i, H);
                let up = loss(&mut enc);
                nudge(&mut enc, i, -2.0 * H);
                let down = loss(&mut enc);
                nudge(&mut enc, i, H);
                (up - down) / (2.0 * H)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        norm(&diff) / norm(&analytic).max(norm(&numeric))
    }

    #[test]
    fn miniature_backbones_match_finite_differences() {
        let conv4 = backbone_gradient_error(BackboneKind::Conv4, vec![3, 4]);
        assert!(conv4 < 1e-4, "conv4 relative error {conv4:e}");
        let resnet = backbone_gradient_error(BackboneKind::ResNet12, vec![4, 5]);
        assert!(resnet < 1e-4, "resnet12 relative error {resnet:e}");
    }

    #[test]
    fn output_shapes_at_84() {
        assert_eq!(BackboneConfig::conv4(84).out_size(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = build_backbone::<f32, _>(&BackboneConfig::conv4(84), &mut rng).unwrap();
        assert_eq!(enc.output_shape(), (64, 5, 5));
        let y = enc.encode(&Tensor::full(&[1, 3, 84, 84], 0.1)).unwrap();
        assert_eq!(y.shape(), &[1, 64, 5, 5]);
        assert_eq!(BackboneConfig::resnet12(84).out_size(), 5);
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv4 = build_backbone::<f32, _>(&BackboneConfig::conv4(84), &mut rng).unwrap();
        assert_eq!(count_params(&conv4), conv4_closed_form(&[64; 4]));
        assert_eq!(count_params(&conv4), 113_088);
        let res = build_backbone::<f32, _>(&BackboneConfig::resnet12(84), &mut rng).unwrap();
        assert_eq!(count_params(&res), resnet12_closed_form(&[64, 128, 256, 512]));
        assert_eq!(count_params(&res), 7_996_800);
    }

    #[test]
    fn wider_final_stage_has_more_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = build_backbone::<f32, _>(&BackboneConfig::resnet12(84), &mut rng).unwrap();
        let mut wide_cfg = BackboneConfig::resnet12(84);
        wide_cfg.channels[3] *= 2;
        let wide = build_backbone::<f32, _>(&wide_cfg, &mut rng).unwrap();
        assert!(count_params(&wide) > count_params(&base));
    }

    #[test]
    fn rejects_wrong_resolution_and_unknown_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = build_backbone::<f32, _>(&BackboneConfig::conv4(32), &mut rng).unwrap();
        assert!(matches!(
            enc.encode(&Tensor::zeros(&[1, 3, 30, 30])),
            Err(RsadError::Input(_))
        ));
        assert!(matches!("vgg".parse::<BackboneKind>(), Err(RsadError::Config { .. })));
        assert!(BackboneConfig::conv4(8).validate().is_err());
    }

    #[test]
    fn zero_final_scale_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = build_backbone::<f64, _>(&BackboneConfig::resnet12(32), &mut rng).unwrap();
        enc.set_final_bn_scale(0.0);
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i % 17) as f64) / 17.0);
        let y = enc.forward(x, Mode::Train).unwrap();
        assert!(y.all_finite());
    }
}
