//! CLIP with the modified-ResNet image tower (RN50 by default) and the causal
//! text transformer.
//!
//! Parameter names follow the OpenAI checkpoint layout (`visual.layer1.0.conv1.weight`,
//! `transformer.resblocks.3.attn.in_proj_weight`, `text_projection`, ...).
//!
//! The image tower differs from torchvision's ResNet in three places: a three
//! convolution stem followed by average pooling, anti-aliased strides (average
//! pooling inside the bottleneck and the shortcut instead of strided
//! convolutions) and attention pooling in place of global average pooling.

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Module, ModuleT, Tensor, D};
use candle_nn::{
    batch_norm, conv2d_no_bias, embedding, layer_norm, linear, BatchNorm, BatchNormConfig, Conv2d,
    Conv2dConfig, Embedding, Init, LayerNorm, Linear, VarBuilder,
};
use serde::{Deserialize, Serialize};

use super::store::SeededStore;
use super::tokenizer::ClipTokenizer;
use super::{conv_out, ConvHook, Detached, EncoderRole, ImageEncoder, Preprocessing, ProbePoint, TextEncoder};
use crate::error::{Result, XaiError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub blocks: [usize; 4],
    pub width: usize,
    pub image_size: usize,
    pub heads: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub context_length: usize,
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
}

impl ClipConfig {
    pub fn rn50() -> Self {
        Self {
            vision: VisionConfig {
                blocks: [3, 4, 6, 3],
                width: 64,
                image_size: 224,
                heads: 32,
                output_dim: 1024,
            },
            text: TextConfig {
                context_length: 77,
                vocab_size: 49408,
                width: 512,
                heads: 8,
                layers: 12,
            },
        }
    }

    pub fn tag(&self) -> String {
        if *self == Self::rn50() {
            "clip-rn50".to_string()
        } else {
            let v = &self.vision;
            format!(
                "clip-modified-resnet-b{}-{}-{}-{}-w{}-s{}",
                v.blocks[0], v.blocks[1], v.blocks[2], v.blocks[3], v.width, v.image_size
            )
        }
    }
}

fn bn(c: usize, vb: VarBuilder) -> candle_core::Result<BatchNorm> {
    batch_norm(c, BatchNormConfig { eps: 1e-5, ..Default::default() }, vb)
}

fn conv(cin: usize, cout: usize, k: usize, padding: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    conv2d_no_bias(cin, cout, k, Conv2dConfig { padding, stride, ..Default::default() }, vb)
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    stride: usize,
    downsample: Option<(Conv2d, BatchNorm)>,
    ids: [String; 3],
}

impl Bottleneck {
    fn new(prefix: &str, inplanes: usize, planes: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let out = planes * 4;
        let downsample = if stride > 1 || inplanes != out {
            Some((conv(inplanes, out, 1, 0, 1, vb.pp("downsample.0"))?, bn(out, vb.pp("downsample.1"))?))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(inplanes, planes, 1, 0, 1, vb.pp("conv1"))?,
            bn1: bn(planes, vb.pp("bn1"))?,
            conv2: conv(planes, planes, 3, 1, 1, vb.pp("conv2"))?,
            bn2: bn(planes, vb.pp("bn2"))?,
            conv3: conv(planes, out, 1, 0, 1, vb.pp("conv3"))?,
            bn3: bn(out, vb.pp("bn3"))?,
            stride,
            downsample,
            ids: [1, 2, 3].map(|k| format!("{prefix}.conv{k}")),
        })
    }

    fn forward(&self, x: &Tensor, hook: &mut dyn ConvHook) -> candle_core::Result<Tensor> {
        let out = hook.on_conv(&self.ids[0], self.conv1.forward(x)?)?;
        let out = self.bn1.forward_t(&out, false)?.relu()?;
        let out = hook.on_conv(&self.ids[1], self.conv2.forward(&out)?)?;
        let mut out = self.bn2.forward_t(&out, false)?.relu()?;
        if self.stride > 1 {
            out = out.avg_pool2d(self.stride)?;
        }
        let out = hook.on_conv(&self.ids[2], self.conv3.forward(&out)?)?;
        let out = self.bn3.forward_t(&out, false)?;
        let identity = match &self.downsample {
            Some((c, b)) => {
                let pooled = if self.stride > 1 { x.avg_pool2d(self.stride)? } else { x.clone() };
                b.forward_t(&c.forward(&pooled)?, false)?
            }
            None => x.clone(),
        };
        (out + identity)?.relu()
    }
}

struct AttentionPool {
    positional_embedding: Tensor,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    c_proj: Linear,
    heads: usize,
}

impl AttentionPool {
    fn new(spatial: usize, embed_dim: usize, heads: usize, output_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let std = (embed_dim as f64).powf(-0.5);
        Ok(Self {
            positional_embedding: vb.get_with_hints(
                (spatial * spatial + 1, embed_dim),
                "positional_embedding",
                Init::Randn { mean: 0.0, stdev: std },
            )?,
            q_proj: linear(embed_dim, embed_dim, vb.pp("q_proj"))?,
            k_proj: linear(embed_dim, embed_dim, vb.pp("k_proj"))?,
            v_proj: linear(embed_dim, embed_dim, vb.pp("v_proj"))?,
            c_proj: linear(embed_dim, output_dim, vb.pp("c_proj"))?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?; // (N, HW, C)
        let mean = tokens.mean_keepdim(1)?;
        let seq = Tensor::cat(&[&mean, &tokens], 1)?.broadcast_add(&self.positional_embedding)?;
        let len = h * w + 1;
        let hd = c / self.heads;
        let q = self.q_proj.forward(&seq.i((.., 0..1, ..))?)?;
        let k = self.k_proj.forward(&seq)?;
        let v = self.v_proj.forward(&seq)?;
        let q = (q.reshape((n, 1, self.heads, hd))?.transpose(1, 2)? * (hd as f64).powf(-0.5))?.contiguous()?;
        let k = k.reshape((n, len, self.heads, hd))?.transpose(1, 2)?.contiguous()?;
        let v = v.reshape((n, len, self.heads, hd))?.transpose(1, 2)?.contiguous()?;
        let att = candle_nn::ops::softmax_last_dim(&q.matmul(&k.t()?)?)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((n, c))?;
        self.c_proj.forward(&out)
    }
}

/// CLIP image tower.
pub struct ModifiedResNet {
    config: VisionConfig,
    stem: [(Conv2d, BatchNorm); 3],
    layers: Vec<Vec<Bottleneck>>,
    attnpool: AttentionPool,
    preprocessing: Preprocessing,
}

const STEM_IDS: [&str; 3] = ["visual.conv1", "visual.conv2", "visual.conv3"];

impl ModifiedResNet {
    pub fn new(config: VisionConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        if config.image_size % 32 != 0 {
            candle_core::bail!("image size {} is not a multiple of 32", config.image_size);
        }
        let w = config.width;
        let stem = [
            (conv(3, w / 2, 3, 1, 2, vb.pp("conv1"))?, bn(w / 2, vb.pp("bn1"))?),
            (conv(w / 2, w / 2, 3, 1, 1, vb.pp("conv2"))?, bn(w / 2, vb.pp("bn2"))?),
            (conv(w / 2, w, 3, 1, 1, vb.pp("conv3"))?, bn(w, vb.pp("bn3"))?),
        ];
        let mut inplanes = w;
        let mut layers = Vec::new();
        for (stage, &n) in config.blocks.iter().enumerate() {
            let planes = w << stage;
            let mut blocks = Vec::new();
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let local = format!("layer{}.{b}", stage + 1);
                blocks.push(Bottleneck::new(&format!("visual.{local}"), inplanes, planes, stride, vb.pp(&local))?);
                inplanes = planes * 4;
            }
            layers.push(blocks);
        }
        let attnpool = AttentionPool::new(config.image_size / 32, w * 32, config.heads, config.output_dim, vb.pp("attnpool"))?;
        let preprocessing = Preprocessing::clip(config.image_size);
        Ok(Self {
            config,
            stem,
            layers,
            attnpool,
            preprocessing,
        })
    }

    /// Ids of the last convolution of each bottleneck stage (network stages 2 to 5).
    pub fn swappable_ids(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|stage| stage.last().expect("non-empty stage").ids[2].clone())
            .collect()
    }
}

impl ImageEncoder for ModifiedResNet {
    fn role(&self) -> EncoderRole {
        EncoderRole::Clip
    }

    fn architecture(&self) -> String {
        let v = &self.config;
        format!("clip-modified-resnet-b{}-{}-{}-{}-w{}-s{}", v.blocks[0], v.blocks[1], v.blocks[2], v.blocks[3], v.width, v.image_size)
    }

    fn catalog(&self) -> Vec<ProbePoint> {
        let w = self.config.width;
        let swappable = self.swappable_ids();
        let mut size = conv_out(self.config.image_size, 3, 2, 1);
        let mut points: Vec<ProbePoint> = STEM_IDS
            .iter()
            .zip([w / 2, w / 2, w])
            .map(|(id, c)| point(id, c, size, false))
            .collect();
        size /= 2;
        for (stage, &n) in self.config.blocks.iter().enumerate() {
            let planes = w << stage;
            for b in 0..n {
                let prefix = format!("visual.layer{}.{b}", stage + 1);
                points.push(point(&format!("{prefix}.conv1"), planes, size, false));
                points.push(point(&format!("{prefix}.conv2"), planes, size, false));
                if stage > 0 && b == 0 {
                    size /= 2;
                }
                let id = format!("{prefix}.conv3");
                let swap = swappable.contains(&id);
                points.push(point(&id, planes * 4, size, swap));
            }
        }
        points
    }

    fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    fn forward_hooked(&self, pixels: &Tensor, hook: &mut dyn ConvHook) -> candle_core::Result<Tensor> {
        let hook = &mut Detached(hook);
        let mut x = pixels.clone();
        for ((c, b), id) in self.stem.iter().zip(STEM_IDS) {
            let y = hook.on_conv(id, c.forward(&x)?)?;
            x = b.forward_t(&y, false)?.relu()?;
        }
        x = x.avg_pool2d(2)?;
        for stage in &self.layers {
            for block in stage {
                x = block.forward(&x, hook)?;
            }
        }
        self.attnpool.forward(&x)
    }

    fn output_dim(&self) -> usize {
        self.config.output_dim
    }
}

fn point(id: &str, channels: usize, size: usize, swappable: bool) -> ProbePoint {
    ProbePoint {
        encoder: EncoderRole::Clip,
        layer_id: id.to_string(),
        channel_count: channels,
        spatial: (size, size),
        swappable,
    }
}

struct ResidualAttentionBlock {
    ln_1: LayerNorm,
    in_proj_weight: Tensor,
    in_proj_bias: Tensor,
    out_proj: Linear,
    ln_2: LayerNorm,
    c_fc: Linear,
    c_proj: Linear,
    heads: usize,
}

impl ResidualAttentionBlock {
    fn new(width: usize, heads: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let attn = vb.pp("attn");
        Ok(Self {
            ln_1: layer_norm(width, 1e-5, vb.pp("ln_1"))?,
            in_proj_weight: attn.get_with_hints(
                (3 * width, width),
                "in_proj_weight",
                Init::Randn { mean: 0.0, stdev: (width as f64).powf(-0.5) },
            )?,
            in_proj_bias: attn.get_with_hints(3 * width, "in_proj_bias", Init::Const(0.0))?,
            out_proj: linear(width, width, attn.pp("out_proj"))?,
            ln_2: layer_norm(width, 1e-5, vb.pp("ln_2"))?,
            c_fc: linear(width, width * 4, vb.pp("mlp.c_fc"))?,
            c_proj: linear(width * 4, width, vb.pp("mlp.c_proj"))?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let hd = c / self.heads;
        let h = self.ln_1.forward(x)?;
        let qkv = h.broadcast_matmul(&self.in_proj_weight.t()?)?.broadcast_add(&self.in_proj_bias)?;
        let split = |k: usize| -> candle_core::Result<Tensor> {
            qkv.narrow(D::Minus1, k * c, c)?
                .reshape((b, l, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = (split(0)? * (hd as f64).powf(-0.5))?;
        let (k, v) = (split(1)?, split(2)?);
        let att = q.matmul(&k.t()?)?.broadcast_add(mask)?;
        let att = candle_nn::ops::softmax_last_dim(&att)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, l, c))?;
        let x = (x + self.out_proj.forward(&out)?)?;
        let h = self.c_fc.forward(&self.ln_2.forward(&x)?)?;
        let h = (&h * candle_nn::ops::sigmoid(&(&h * 1.702)?)?)?;
        x + self.c_proj.forward(&h)?
    }
}

/// CLIP text tower.
pub struct ClipText {
    config: TextConfig,
    token_embedding: Embedding,
    positional_embedding: Tensor,
    blocks: Vec<ResidualAttentionBlock>,
    ln_final: LayerNorm,
    text_projection: Tensor,
    tokenizer: ClipTokenizer,
}

impl ClipText {
    pub fn new(config: TextConfig, embed_dim: usize, tokenizer: ClipTokenizer, vb: VarBuilder) -> candle_core::Result<Self> {
        let w = config.width;
        let blocks = (0..config.layers)
            .map(|i| ResidualAttentionBlock::new(w, config.heads, vb.pp(format!("transformer.resblocks.{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            token_embedding: embedding(config.vocab_size, w, vb.pp("token_embedding"))?,
            positional_embedding: vb.get_with_hints(
                (config.context_length, w),
                "positional_embedding",
                Init::Randn { mean: 0.0, stdev: 0.01 },
            )?,
            blocks,
            ln_final: layer_norm(w, 1e-5, vb.pp("ln_final"))?,
            text_projection: vb.get_with_hints(
                (w, embed_dim),
                "text_projection",
                Init::Randn { mean: 0.0, stdev: (w as f64).powf(-0.5) },
            )?,
            config,
            tokenizer,
        })
    }

    /// Forward over padded token ids of shape (B, context_length).
    pub fn forward_tokens(&self, tokens: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l) = tokens.dims2()?;
        let mut x = self.token_embedding.forward(tokens)?.broadcast_add(&self.positional_embedding.i(0..l)?)?;
        let mask: Vec<f32> = (0..l)
            .flat_map(|i| (0..l).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (l, l), tokens.device())?;
        for block in &self.blocks {
            x = block.forward(&x, &mask)?;
        }
        let x = self.ln_final.forward(&x)?;
        let eot = tokens.argmax(D::Minus1)?.to_vec1::<u32>()?;
        let rows = (0..b)
            .map(|i| x.i((i, eot[i] as usize))?.unsqueeze(0))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Tensor::cat(&rows, 0)?.matmul(&self.text_projection)
    }
}

impl TextEncoder for ClipText {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut ids = Vec::with_capacity(texts.len() * self.config.context_length);
        for t in texts {
            ids.extend(self.tokenizer.tokenize(t, self.config.context_length)?);
        }
        let tokens = Tensor::from_vec(ids, (texts.len(), self.config.context_length), &Device::Cpu)?;
        Ok(self.forward_tokens(&tokens)?.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }
}

/// Image and text towers sharing one parameter store.
pub struct ClipModel {
    pub visual: ModifiedResNet,
    pub text: ClipText,
    pub store: SeededStore,
    pub config: ClipConfig,
    /// `None` when the parameters are seeded random values.
    pub weights_path: Option<String>,
}

impl ClipModel {
    /// Builds the model; parameters come from `weights` when given, otherwise from `seed`.
    pub fn load(config: ClipConfig, weights: Option<&Path>, seed: u64) -> Result<Self> {
        let store = SeededStore::new(seed);
        let vb = store.builder();
        let visual = ModifiedResNet::new(config.vision.clone(), vb.pp("visual"))?;
        let tokenizer = ClipTokenizer::bundled()?;
        let text = ClipText::new(config.text.clone(), config.vision.output_dim, tokenizer, vb.clone())?;
        if let Some(path) = weights {
            store.load_from(path, |n| Some(n.to_string()))?;
        }
        Ok(Self {
            visual,
            text,
            store,
            weights_path: weights.map(|p| p.display().to_string()),
            config,
        })
    }

    pub fn is_pretrained(&self) -> bool {
        self.weights_path.is_some()
    }
}

pub fn check_embed_dims(image: usize, text: usize) -> Result<()> {
    if image != text {
        return Err(XaiError::Architecture(format!(
            "image embedding width {image} differs from text embedding width {text}"
        )));
    }
    Ok(())
}
