//! Brute-force reference kernels and tiny encoder pairs.
//!
//! Everything here is written with scalar loops in f64 and shares no code with
//! the matcher or the surgeon, so agreement between the two is evidence rather
//! than tautology.

use crate::error::{Result, XaiError};
use crate::fingerprint::derive_seed_str;
use crate::nets::store::SeededStore;
use crate::nets::tiny::{HashedTextEncoder, TinyConfig, TinyEncoder};
use crate::nets::EncoderRole;

/// (A − μ) / σ, one element at a time.
pub fn naive_standardize(a: &[f32], mu: f64, sigma: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for &v in a {
        out.push((v as f64 - mu) / sigma);
    }
    out
}

/// Standardized dot product of two (B, H, W) stacks divided by B·H·W.
///
/// Loops run batch, then row, then column.
pub fn naive_correlation(
    a: &[f32],
    b: &[f32],
    dims: (usize, usize, usize),
    stats_a: (f64, f64),
    stats_b: (f64, f64),
) -> Result<f64> {
    let (bn, h, w) = dims;
    check_len(a, bn * h * w)?;
    check_len(b, bn * h * w)?;
    let mut sum = 0.0;
    for i in 0..bn {
        for y in 0..h {
            for x in 0..w {
                let k = (i * h + y) * w + x;
                let na = (a[k] as f64 - stats_a.0) / stats_a.1;
                let nb = (b[k] as f64 - stats_b.0) / stats_b.1;
                sum += na * nb;
            }
        }
    }
    Ok(sum / (bn * h * w) as f64)
}

/// Same quantity as [`naive_correlation`], looping column, row, batch.
pub fn naive_correlation_reordered(
    a: &[f32],
    b: &[f32],
    dims: (usize, usize, usize),
    stats_a: (f64, f64),
    stats_b: (f64, f64),
) -> Result<f64> {
    let (bn, h, w) = dims;
    check_len(a, bn * h * w)?;
    check_len(b, bn * h * w)?;
    let mut sum = 0.0;
    for x in 0..w {
        for y in 0..h {
            for i in 0..bn {
                let k = i * h * w + y * w + x;
                sum += ((a[k] as f64 - stats_a.0) / stats_a.1) * ((b[k] as f64 - stats_b.0) / stats_b.1);
            }
        }
    }
    Ok(sum / (bn * h * w) as f64)
}

fn check_len(v: &[f32], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(XaiError::Shape(format!("expected {n} values, got {}", v.len())));
    }
    Ok(())
}

/// Bilinear resize of one (H, W) map with half-pixel centers, one output pixel at a time.
pub fn naive_bilinear(map: &[f32], size: (usize, usize), target: (usize, usize)) -> Result<Vec<f64>> {
    let (h, w) = size;
    let (th, tw) = target;
    if th == 0 || tw == 0 || h == 0 || w == 0 {
        return Err(XaiError::InvalidInput(format!("cannot resize {h}x{w} to {th}x{tw}")));
    }
    check_len(map, h * w)?;
    let mut out = vec![0.0; th * tw];
    for oy in 0..th {
        for ox in 0..tw {
            let sy = ((oy as f64 + 0.5) * h as f64 / th as f64 - 0.5).max(0.0);
            let sx = ((ox as f64 + 0.5) * w as f64 / tw as f64 - 0.5).max(0.0);
            let y0 = (sy.floor() as usize).min(h - 1);
            let x0 = (sx.floor() as usize).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = (sy - y0 as f64).clamp(0.0, 1.0);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            let p = |y: usize, x: usize| map[y * w + x] as f64;
            out[oy * tw + ox] = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
        }
    }
    Ok(out)
}

/// Donor rescaling into recipient statistics followed by bilinear resizing.
pub fn naive_transform_donor(
    map: &[f32],
    size: (usize, usize),
    donor: (f64, f64),
    recipient: (f64, f64),
    target: (usize, usize),
) -> Result<Vec<f64>> {
    let mut scaled = Vec::with_capacity(map.len());
    for &v in map {
        scaled.push((((v as f64 - donor.0) / donor.1) * recipient.1 + recipient.0) as f32);
    }
    if size == target {
        return Ok(scaled.into_iter().map(f64::from).collect());
    }
    naive_bilinear(&scaled, size, target)
}

/// Two small convolutional encoders plus a matching caption embedder.
pub struct TinyEncoderPair {
    pub donor: TinyEncoder,
    pub recipient: TinyEncoder,
    pub text: HashedTextEncoder,
}

/// Donor with 6 probed channels, recipient with 4 swappable channels.
pub fn build_tiny_pair(seed: u64) -> Result<TinyEncoderPair> {
    let donor = TinyEncoder::new(TinyConfig::donor(), SeededStore::new(derive_seed_str(seed, "donor")).builder())?;
    let recipient_cfg = TinyConfig::recipient();
    let dim = recipient_cfg.output_dim;
    let recipient = TinyEncoder::new(recipient_cfg, SeededStore::new(derive_seed_str(seed, "recipient")).builder())?;
    Ok(TinyEncoderPair {
        donor,
        recipient,
        text: HashedTextEncoder { dim, seed },
    })
}

/// Donor and recipient share architecture and weights.
pub fn build_self_pair(seed: u64) -> Result<TinyEncoderPair> {
    let recipient_cfg = TinyConfig::recipient();
    let donor_cfg = TinyConfig {
        role: EncoderRole::Standalone,
        ..recipient_cfg.clone()
    };
    let weights = derive_seed_str(seed, "recipient");
    let dim = recipient_cfg.output_dim;
    Ok(TinyEncoderPair {
        donor: TinyEncoder::new(donor_cfg, SeededStore::new(weights).builder())?,
        recipient: TinyEncoder::new(recipient_cfg, SeededStore::new(weights).builder())?,
        text: HashedTextEncoder { dim, seed },
    })
}
