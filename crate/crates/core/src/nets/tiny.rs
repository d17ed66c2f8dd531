//! Small convolutional encoders for desk-scale runs and tests.

use candle_core::{Module, Tensor};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Linear, VarBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{conv_out, ConvHook, Detached, NoHook, EncoderRole, ImageEncoder, Preprocessing, ProbePoint, ResizeFilter, TextEncoder};
use crate::error::Result;
use crate::fingerprint::derive_seed_str;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub role: EncoderRole,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub swappable: Vec<bool>,
    pub input_size: usize,
    /// Width of the projection after pooling; 0 returns the pooled features.
    pub output_dim: usize,
}

impl TinyConfig {
    /// Donor side of the oracle pair: 2 + 2 + 2 channels.
    pub fn donor() -> Self {
        Self {
            role: EncoderRole::Standalone,
            channels: vec![2, 2, 2],
            strides: vec![1, 2, 2],
            swappable: vec![false; 3],
            input_size: 28,
            output_dim: 0,
        }
    }

    /// Recipient side of the oracle pair: the last two layers (2 + 2 channels) are swappable.
    pub fn recipient() -> Self {
        Self {
            role: EncoderRole::Clip,
            channels: vec![2, 2, 2],
            strides: vec![2, 1, 2],
            swappable: vec![false, true, true],
            input_size: 28,
            output_dim: 8,
        }
    }

    pub fn tag(&self) -> String {
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let st: Vec<String> = self.strides.iter().map(|c| c.to_string()).collect();
        format!("tiny-{}-c{}-s{}-o{}", self.role, ch.join("."), st.join("."), self.output_dim)
    }
}

pub struct TinyEncoder {
    config: TinyConfig,
    convs: Vec<Conv2d>,
    ids: Vec<String>,
    proj: Option<Linear>,
    preprocessing: Preprocessing,
}

impl TinyEncoder {
    pub fn new(config: TinyConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let n = config.channels.len();
        if config.strides.len() != n || config.swappable.len() != n || n == 0 {
            candle_core::bail!("tiny encoder config lists disagree in length");
        }
        let mut convs = Vec::new();
        let mut ids = Vec::new();
        let mut cin = 3;
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            let id = format!("conv{}", i + 1);
            convs.push(conv2d(cin, c, 3, Conv2dConfig { padding: 1, stride: s, ..Default::default() }, vb.pp(&id))?);
            ids.push(id);
            cin = c;
        }
        let proj = if config.output_dim > 0 {
            Some(linear(cin, config.output_dim, vb.pp("proj"))?)
        } else {
            None
        };
        let preprocessing = Preprocessing {
            size: config.input_size,
            mean: [0.5; 3],
            std: [0.5; 3],
            filter: ResizeFilter::Bilinear,
        };
        Ok(Self {
            config,
            convs,
            ids,
            proj,
            preprocessing,
        })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    /// Differentiable forward pass for training.
    pub fn forward_train(&self, pixels: &Tensor) -> candle_core::Result<Tensor> {
        self.run(pixels, &mut NoHook)
    }

    fn run(&self, pixels: &Tensor, hook: &mut dyn ConvHook) -> candle_core::Result<Tensor> {
        let mut x = pixels.clone();
        for (conv, id) in self.convs.iter().zip(&self.ids) {
            x = hook.on_conv(id, conv.forward(&x)?)?.relu()?;
        }
        let pooled = x.mean(3)?.mean(2)?;
        match &self.proj {
            Some(p) => p.forward(&pooled),
            None => Ok(pooled),
        }
    }
}

impl ImageEncoder for TinyEncoder {
    fn role(&self) -> EncoderRole {
        self.config.role
    }

    fn architecture(&self) -> String {
        self.config.tag()
    }

    fn catalog(&self) -> Vec<ProbePoint> {
        let mut size = self.config.input_size;
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                size = conv_out(size, 3, self.config.strides[i], 1);
                ProbePoint {
                    encoder: self.config.role,
                    layer_id: id.clone(),
                    channel_count: self.config.channels[i],
                    spatial: (size, size),
                    swappable: self.config.swappable[i],
                }
            })
            .collect()
    }

    fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    fn forward_hooked(&self, pixels: &Tensor, hook: &mut dyn ConvHook) -> candle_core::Result<Tensor> {
        self.run(pixels, &mut Detached(hook))
    }

    fn output_dim(&self) -> usize {
        if self.config.output_dim > 0 {
            self.config.output_dim
        } else {
            *self.config.channels.last().expect("non-empty")
        }
    }
}

/// Deterministic caption embeddings seeded by the caption text.
pub struct HashedTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEncoder for HashedTextEncoder {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(self.seed, t));
                (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::store::SeededStore;
    use crate::nets::total_channels;

    #[test]
    fn oracle_pair_channel_counts() {
        let d = TinyEncoder::new(TinyConfig::donor(), SeededStore::new(0).builder()).unwrap();
        let r = TinyEncoder::new(TinyConfig::recipient(), SeededStore::new(0).builder()).unwrap();
        assert_eq!(total_channels(&d.catalog()), 6);
        assert_eq!(total_channels(&r.swappable_catalog()), 4);
        assert_eq!(r.catalog().iter().map(|p| p.spatial.0).collect::<Vec<_>>(), vec![14, 14, 7]);
    }

    #[test]
    fn inference_hooks_see_untracked_maps() {
        struct Tracked(Vec<bool>);
        impl ConvHook for Tracked {
            fn on_conv(&mut self, _: &str, output: Tensor) -> candle_core::Result<Tensor> {
                self.0.push(output.track_op());
                Ok(output)
            }
        }
        let enc = TinyEncoder::new(TinyConfig::donor(), SeededStore::new(0).builder()).unwrap();
        let x = Tensor::zeros((1, 3, 28, 28), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        let mut hook = Tracked(Vec::new());
        enc.forward_hooked(&x, &mut hook).unwrap();
        assert_eq!(hook.0, vec![false; 3]);
        assert!(enc.forward_train(&x).unwrap().track_op());
    }

    #[test]
    fn hashed_text_is_deterministic() {
        let enc = HashedTextEncoder { dim: 4, seed: 1 };
        let a = enc.embed_texts(&["x".into(), "y".into()]).unwrap();
        let b = enc.embed_texts(&["x".into()]).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[0], a[1]);
    }
}
