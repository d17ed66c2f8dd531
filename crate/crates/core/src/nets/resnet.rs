//! torchvision-layout ResNet with bottleneck blocks (ResNet-50 by default).
//!
//! Parameter names follow torchvision (`conv1.weight`, `layer2.0.downsample.1.running_var`, ...)
//! so ImageNet weights exported from torchvision load without renaming. The
//! probe catalog lists the stem convolution and the three convolutions of every
//! bottleneck. Projection shortcuts are not probed.

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{batch_norm, BatchNorm, BatchNormConfig, VarBuilder};
use serde::{Deserialize, Serialize};

use super::conv::GemmConv2d as Conv2d;
use super::{conv_out, ConvHook, Detached, EncoderRole, ImageEncoder, Preprocessing, ProbePoint};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub blocks: [usize; 4],
    pub base_width: usize,
    pub input_size: usize,
}

impl ResNetConfig {
    pub fn resnet50() -> Self {
        Self {
            blocks: [3, 4, 6, 3],
            base_width: 64,
            input_size: 224,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.base_width * 8 * 4
    }

    pub fn tag(&self) -> String {
        if *self == Self::resnet50() {
            "resnet50".to_string()
        } else {
            format!(
                "resnet-b{}-{}-{}-{}-w{}-s{}",
                self.blocks[0], self.blocks[1], self.blocks[2], self.blocks[3], self.base_width, self.input_size
            )
        }
    }
}

fn bn(c: usize, vb: VarBuilder) -> candle_core::Result<BatchNorm> {
    batch_norm(c, BatchNormConfig { eps: 1e-5, momentum: 0.1, ..Default::default() }, vb)
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    Conv2d::new(cin, cout, k, stride, padding, vb)
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
    ids: [String; 3],
}

impl Bottleneck {
    fn new(prefix: &str, inplanes: usize, planes: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let out = planes * 4;
        let downsample = if stride != 1 || inplanes != out {
            Some((
                conv(inplanes, out, 1, stride, 0, vb.pp("downsample.0"))?,
                bn(out, vb.pp("downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(inplanes, planes, 1, 1, 0, vb.pp("conv1"))?,
            bn1: bn(planes, vb.pp("bn1"))?,
            conv2: conv(planes, planes, 3, stride, 1, vb.pp("conv2"))?,
            bn2: bn(planes, vb.pp("bn2"))?,
            conv3: conv(planes, out, 1, 1, 0, vb.pp("conv3"))?,
            bn3: bn(out, vb.pp("bn3"))?,
            downsample,
            ids: [1, 2, 3].map(|k| format!("{prefix}.conv{k}")),
        })
    }

    fn forward(&self, x: &Tensor, train: bool, hook: &mut dyn ConvHook) -> candle_core::Result<Tensor> {
        let out = hook.on_conv(&self.ids[0], self.conv1.forward(x)?)?;
        let out = self.bn1.forward_t(&out, train)?.relu()?;
        let out = hook.on_conv(&self.ids[1], self.conv2.forward(&out)?)?;
        let out = self.bn2.forward_t(&out, train)?.relu()?;
        let out = hook.on_conv(&self.ids[2], self.conv3.forward(&out)?)?;
        let out = self.bn3.forward_t(&out, train)?;
        let identity = match &self.downsample {
            Some((c, b)) => b.forward_t(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        (out + identity)?.relu()
    }
}

/// ResNet feature extractor (everything up to and including global average pooling).
pub struct ResNet {
    config: ResNetConfig,
    conv1: Conv2d,
    bn1: BatchNorm,
    layers: Vec<Vec<Bottleneck>>,
    preprocessing: Preprocessing,
}

impl ResNet {
    pub fn new(config: ResNetConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let w = config.base_width;
        let conv1 = conv(3, w, 7, 2, 3, vb.pp("conv1"))?;
        let bn1 = bn(w, vb.pp("bn1"))?;
        let mut inplanes = w;
        let mut layers = Vec::new();
        for (stage, &n) in config.blocks.iter().enumerate() {
            let planes = w << stage;
            let stride = if stage == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            for b in 0..n {
                let prefix = format!("layer{}.{b}", stage + 1);
                let s = if b == 0 { stride } else { 1 };
                blocks.push(Bottleneck::new(&prefix, inplanes, planes, s, vb.pp(&prefix))?);
                inplanes = planes * 4;
            }
            layers.push(blocks);
        }
        let preprocessing = Preprocessing::imagenet(config.input_size);
        Ok(Self {
            config,
            conv1,
            bn1,
            layers,
            preprocessing,
        })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    pub fn forward_t(&self, x: &Tensor, train: bool, hook: &mut dyn ConvHook) -> candle_core::Result<Tensor> {
        let x = hook.on_conv("conv1", self.conv1.forward(x)?)?;
        let x = self.bn1.forward_t(&x, train)?.relu()?;
        let mut x = max_pool_3x3_s2(&x)?;
        for stage in &self.layers {
            for block in stage {
                x = block.forward(&x, train, hook)?;
            }
        }
        x.mean(3)?.mean(2)
    }
}

impl ImageEncoder for ResNet {
    fn role(&self) -> EncoderRole {
        EncoderRole::Standalone
    }

    fn architecture(&self) -> String {
        self.config.tag()
    }

    fn catalog(&self) -> Vec<ProbePoint> {
        let w = self.config.base_width;
        let mut size = conv_out(self.config.input_size, 7, 2, 3);
        let mut points = vec![point("conv1", w, size)];
        size = conv_out(size, 3, 2, 1);
        for (stage, &n) in self.config.blocks.iter().enumerate() {
            let planes = w << stage;
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let prefix = format!("layer{}.{b}", stage + 1);
                points.push(point(&format!("{prefix}.conv1"), planes, size));
                size = conv_out(size, 3, stride, 1);
                points.push(point(&format!("{prefix}.conv2"), planes, size));
                points.push(point(&format!("{prefix}.conv3"), planes * 4, size));
            }
        }
        points
    }

    fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    fn forward_hooked(&self, pixels: &Tensor, hook: &mut dyn ConvHook) -> candle_core::Result<Tensor> {
        self.forward_t(pixels, false, &mut Detached(hook))
    }

    fn output_dim(&self) -> usize {
        self.config.feature_dim()
    }
}

/// 3×3 max pooling, stride 2, padding 1, built from strided views so it stays
/// differentiable (candle's pooling backward requires kernel == stride).
/// Input must be non-negative: zero padding stands in for -inf.
fn max_pool_3x3_s2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (oh, ow) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
    let x = x
        .pad_with_zeros(2, 1, 2 + 2 * oh - h - 1)?
        .pad_with_zeros(3, 1, 2 + 2 * ow - w - 1)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let (n, c, _, _) = x.dims4()?;
            let v = x
                .narrow(2, dy, 2 * oh)?
                .narrow(3, dx, 2 * ow)?
                .reshape((n, c, oh, 2, ow, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((n, c, oh, ow))?;
            out = Some(match out {
                Some(m) => m.maximum(&v)?,
                None => v,
            });
        }
    }
    Ok(out.expect("nine taps"))
}

fn point(id: &str, channels: usize, size: usize) -> ProbePoint {
    ProbePoint {
        encoder: EncoderRole::Standalone,
        layer_id: id.to_string(),
        channel_count: channels,
        spatial: (size, size),
        swappable: false,
    }
}
