//! Interleaved (H × W × C) float rasters with values in [0, 1].

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Result, XaiError};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(XaiError::Shape(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(XaiError::Shape(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Fails with the first offending value if anything lies outside [0, 1] (NaN included).
    pub fn check_unit_range(&self) -> Result<()> {
        match self
            .data
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            Some(index) => Err(XaiError::OutOfRange {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    /// Writes an 8-bit PNG (grayscale for one channel, RGB for three).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let quantized: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, quantized)
                .expect("buffer length checked at construction")
                .save(path.as_ref())?,
            3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, quantized)
                .expect("buffer length checked at construction")
                .save(path.as_ref())?,
            c => {
                return Err(XaiError::Shape(format!(
                    "PNG export supports 1 or 3 channels, got {c}"
                )))
            }
        }
        Ok(())
    }

    /// Loads a PNG as an RGB raster.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Raster::new(h as usize, w as usize, 3, data)
    }

    /// Rounds every value to the nearest 8-bit level, matching what a PNG round trip yields.
    pub fn quantized(&self) -> Self {
        Self {
            data: self
                .data
                .iter()
                .map(|&v| quantize_u8(v) as f32 / 255.0)
                .collect(),
            ..self.clone()
        }
    }
}

pub(crate) fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Raster::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(Raster::new(0, 2, 3, vec![]).is_err());
    }

    #[test]
    fn range_check_reports_index() {
        let r = Raster::new(1, 2, 1, vec![0.5, 1.5]).unwrap();
        match r.check_unit_range() {
            Err(XaiError::OutOfRange { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let nan = Raster::new(1, 1, 1, vec![f32::NAN]).unwrap();
        assert!(nan.check_unit_range().is_err());
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let r = Raster::new(2, 2, 3, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        r.save_png(&path).unwrap();
        let back = Raster::load_png(&path).unwrap();
        assert_eq!(back, r.quantized());
    }
}
