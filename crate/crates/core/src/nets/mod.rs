//! Convolutional encoders with interception points on every probed convolution.
//!
//! Each encoder exposes a catalog of its probe-able convolution outputs and a
//! forward pass that hands every such output to a [`ConvHook`] before the next
//! layer consumes it. Capturing activations and overwriting channels during
//! network surgery are both implemented as hooks.

pub mod clip;
pub mod conv;
pub mod resnet;
pub mod store;
pub mod tiny;
pub mod tokenizer;

use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XaiError};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderRole {
    Standalone,
    Clip,
}

impl EncoderRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderRole::Standalone => "standalone",
            EncoderRole::Clip => "clip",
        }
    }
}

impl fmt::Display for EncoderRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderRole {
    type Err = XaiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standalone" => Ok(EncoderRole::Standalone),
            "clip" => Ok(EncoderRole::Clip),
            other => Err(XaiError::InvalidInput(format!("unknown encoder `{other}`"))),
        }
    }
}

/// One probe-able convolution output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub encoder: EncoderRole,
    pub layer_id: String,
    pub channel_count: usize,
    /// (H, W) of the output at the encoder's reference input size.
    pub spatial: (usize, usize),
    pub swappable: bool,
}

pub fn total_channels(points: &[ProbePoint]) -> usize {
    points.iter().map(|p| p.channel_count).sum()
}

/// Receives every probed convolution output during a forward pass.
///
/// The returned tensor replaces the output for all downstream layers.
pub trait ConvHook {
    fn on_conv(&mut self, layer_id: &str, output: Tensor) -> candle_core::Result<Tensor>;
}

/// Forwards to an inner hook with every convolution output cut from the autograd
/// graph, so inference passes hold no intermediates for backprop.
pub(crate) struct Detached<'a>(pub &'a mut dyn ConvHook);

impl ConvHook for Detached<'_> {
    fn on_conv(&mut self, layer_id: &str, output: Tensor) -> candle_core::Result<Tensor> {
        self.0.on_conv(layer_id, output.detach())
    }
}

/// Leaves every activation untouched.
pub struct NoHook;

impl ConvHook for NoHook {
    fn on_conv(&mut self, _layer_id: &str, output: Tensor) -> candle_core::Result<Tensor> {
        Ok(output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeFilter {
    Bilinear,
    Bicubic,
}

/// Resize target plus per-channel normalization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub filter: ResizeFilter,
}

impl Preprocessing {
    pub fn imagenet(size: usize) -> Self {
        Self {
            size,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            filter: ResizeFilter::Bilinear,
        }
    }

    /// OpenAI CLIP image normalization.
    pub fn clip(size: usize) -> Self {
        Self {
            size,
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_1],
            filter: ResizeFilter::Bicubic,
        }
    }

    /// Converts RGB rasters into a normalized (B, 3, size, size) tensor.
    pub fn apply(&self, images: &[&Raster]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(XaiError::InvalidInput("no images to preprocess".into()));
        }
        let s = self.size;
        let mut out = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.channels() != 3 {
                return Err(XaiError::Shape(format!(
                    "expected RGB input, got {} channels",
                    img.channels()
                )));
            }
            let resized = self.resize(img);
            for c in 0..3 {
                for px in 0..s * s {
                    out.push((resized[px * 3 + c] - self.mean[c]) / self.std[c]);
                }
            }
        }
        Ok(Tensor::from_vec(out, (images.len(), 3, s, s), &Device::Cpu)?)
    }

    fn resize(&self, img: &Raster) -> Vec<f32> {
        let s = self.size;
        if img.height() == s && img.width() == s {
            return img.data().to_vec();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
                .expect("raster length matches dimensions");
        let filter = match self.filter {
            ResizeFilter::Bilinear => FilterType::Triangle,
            ResizeFilter::Bicubic => FilterType::CatmullRom,
        };
        image::imageops::resize(&buf, s as u32, s as u32, filter)
            .into_raw()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    }
}

/// An image encoder whose convolution outputs can be observed and replaced.
pub trait ImageEncoder: Send + Sync {
    fn role(&self) -> EncoderRole;

    /// Short architecture tag, e.g. `resnet50`.
    fn architecture(&self) -> String;

    /// All probe-able convolution outputs in forward order.
    fn catalog(&self) -> Vec<ProbePoint>;

    fn preprocessing(&self) -> &Preprocessing;

    /// Eval-mode forward returning the encoder's output vector per image.
    fn forward_hooked(&self, pixels: &Tensor, hook: &mut dyn ConvHook) -> candle_core::Result<Tensor>;

    fn output_dim(&self) -> usize;

    fn forward(&self, pixels: &Tensor) -> candle_core::Result<Tensor> {
        self.forward_hooked(pixels, &mut NoHook)
    }

    /// Probe points open to surgery.
    fn swappable_catalog(&self) -> Vec<ProbePoint> {
        self.catalog().into_iter().filter(|p| p.swappable).collect()
    }
}

/// Maps caption strings into the joint embedding space.
pub trait TextEncoder: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

/// Output size of a convolution or pooling window.
pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocessing_normalizes_per_channel() {
        let img = Raster::new(1, 1, 3, vec![1.0, 0.0, 0.5]).unwrap();
        let p = Preprocessing {
            size: 1,
            mean: [0.5, 0.5, 0.5],
            std: [0.5, 0.25, 1.0],
            filter: ResizeFilter::Bilinear,
        };
        let t = p.apply(&[&img]).unwrap();
        assert_eq!(t.dims(), &[1, 3, 1, 1]);
        assert_eq!(t.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0, -2.0, 0.0]);
    }

    #[test]
    fn preprocessing_resizes_constant_image_to_constant() {
        let img = Raster::new(28, 28, 3, vec![0.25; 28 * 28 * 3]).unwrap();
        let t = Preprocessing::imagenet(56).apply(&[&img, &img]).unwrap();
        assert_eq!(t.dims(), &[2, 3, 56, 56]);
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let expected = (0.25 - 0.485) / 0.229;
        assert!((v[0] - expected).abs() < 1e-5);
    }

    #[test]
    fn preprocessing_rejects_grayscale_and_empty() {
        let g = Raster::zeros(4, 4, 1);
        assert!(Preprocessing::imagenet(4).apply(&[&g]).is_err());
        assert!(Preprocessing::imagenet(4).apply(&[]).is_err());
    }
}
