//! Activation matching: standardization, size alignment, the correlation score
//! matrix and swap selection.
//!
//! Rows of the score matrix are donor (standalone) channels in catalog order,
//! columns are recipient (CLIP swappable) channels. Each (donor layer,
//! recipient layer) pair is one tile, computed at the larger of the two spatial
//! sizes and accumulated over image shards.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::sample_order_fingerprint;
use crate::error::{Result, XaiError};
use crate::fingerprint::{sha256_hex, Fingerprinter};
use crate::gemm::gemm;
use crate::nets::{total_channels, ImageEncoder, ProbePoint};
use crate::probes::{capture, ActivationBatch, ActivationStats};
use crate::raster::Raster;

/// Channels with σ at or below this are never standardized.
pub const SIGMA_MIN: f64 = 1e-6;

pub const SCORE_MAGIC: &[u8; 8] = b"XAIZMAT1";
const DTYPE_F32: u32 = 1;

pub const PLAN_HEADER: &str = "clip_layer\tclip_channel\tdonor_layer\tdonor_channel\tscore";

/// N = (A − μ) / σ.
pub fn standardize(map: &[f32], mu: f64, sigma: f64) -> Result<Vec<f32>> {
    if !(sigma > SIGMA_MIN) {
        return Err(XaiError::InvalidStats(format!("σ = {sigma} is not above {SIGMA_MIN}")));
    }
    Ok(map.iter().map(|&v| ((v as f64 - mu) / sigma) as f32).collect())
}

/// Source index pair and weight of the second tap for every output coordinate.
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(from: usize, to: usize) -> Self {
        let scale = from as f64 / to as f64;
        let mut taps = AxisTaps { lo: Vec::with_capacity(to), hi: Vec::with_capacity(to), frac: Vec::with_capacity(to) };
        for o in 0..to {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src as usize).min(from - 1);
            taps.lo.push(lo);
            taps.hi.push(if lo + 1 < from { lo + 1 } else { lo });
            taps.frac.push(if lo + 1 < from { src - lo as f64 } else { 0.0 });
        }
        taps
    }
}

/// Bilinear resize of one (H, W) map, half-pixel centers, edge clamping.
pub fn resize_bilinear(map: &[f32], size: (usize, usize), target: (usize, usize)) -> Result<Vec<f32>> {
    resize_planes(map, 1, size, target)
}

/// Resizes `planes` consecutive (H, W) maps.
pub fn resize_planes(data: &[f32], planes: usize, size: (usize, usize), target: (usize, usize)) -> Result<Vec<f32>> {
    let (h, w) = size;
    let (th, tw) = target;
    if th == 0 || tw == 0 || h == 0 || w == 0 {
        return Err(XaiError::InvalidInput(format!("cannot resize {h}x{w} maps to {th}x{tw}")));
    }
    if data.len() != planes * h * w {
        return Err(XaiError::Shape(format!("{} values for {planes} maps of {h}x{w}", data.len())));
    }
    if size == target {
        return Ok(data.to_vec());
    }
    let ty = AxisTaps::new(h, th);
    let tx = AxisTaps::new(w, tw);
    let mut out = vec![0f32; planes * th * tw];
    let mut rows = vec![0f64; h * tw];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..tw {
                let a = src[y * w + tx.lo[x]] as f64;
                let b = src[y * w + tx.hi[x]] as f64;
                rows[y * tw + x] = a + (b - a) * tx.frac[x];
            }
        }
        let dst = &mut out[p * th * tw..(p + 1) * th * tw];
        for y in 0..th {
            let (r0, r1, f) = (ty.lo[y] * tw, ty.hi[y] * tw, ty.frac[y]);
            for x in 0..tw {
                let a = rows[r0 + x];
                dst[y * tw + x] = (a + (rows[r1 + x] - a) * f) as f32;
            }
        }
    }
    Ok(out)
}

/// Running Σ N_S·N_C over positions for one tile.
#[derive(Debug, Clone)]
pub struct CorrelationBlock {
    pub rows: usize,
    pub cols: usize,
    sums: Vec<f64>,
    positions: u64,
}

impl CorrelationBlock {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            sums: vec![0.0; rows * cols],
            positions: 0,
        }
    }

    /// Adds one shard. `ns` is rows × len and `nc` is cols × len, both standardized
    /// and laid out channel-major over the same positions.
    pub fn accumulate(&mut self, ns: &[f32], nc: &[f32], len: usize) -> Result<()> {
        self.accumulate_with(ns, nc, len, &mut Vec::new())
    }

    /// As `accumulate`, reusing `scratch` for the f32 product.
    pub fn accumulate_with(&mut self, ns: &[f32], nc: &[f32], len: usize, scratch: &mut Vec<f32>) -> Result<()> {
        if ns.len() != self.rows * len || nc.len() != self.cols * len {
            return Err(XaiError::Shape(format!(
                "correlation shard: {} donor and {} recipient values for {}x{} channels over {len} positions",
                ns.len(),
                nc.len(),
                self.rows,
                self.cols
            )));
        }
        if len == 0 {
            return Ok(());
        }
        scratch.resize(self.rows * self.cols, 0.0);
        gemm(self.rows, len, self.cols, ns, false, nc, true, 0.0, scratch);
        for (s, &v) in self.sums.iter_mut().zip(scratch.iter()) {
            *s += v as f64;
        }
        self.positions += len as u64;
        Ok(())
    }

    pub fn positions(&self) -> u64 {
        self.positions
    }

    /// Z = Σ N_S·N_C / (B·H·W).
    pub fn values(&self) -> Result<Vec<f32>> {
        if self.positions == 0 {
            return Err(XaiError::InvalidInput("correlation block saw no positions".into()));
        }
        let n = self.positions as f64;
        Ok(self.sums.iter().map(|s| (s / n) as f32).collect())
    }
}

/// One-shot correlation of two channel-major standardized stacks.
pub fn correlation_block(ns: &[f32], nc: &[f32], rows: usize, cols: usize, len: usize) -> Result<Vec<f32>> {
    let mut b = CorrelationBlock::new(rows, cols);
    b.accumulate(ns, nc, len)?;
    b.values()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub donor_architecture: String,
    pub recipient_architecture: String,
    pub donor_stats: String,
    pub recipient_stats: String,
    /// Fingerprint of the matched sample ids in order.
    pub subset: String,
    pub images: usize,
    /// Donor rows excluded from candidacy (σ ≤ σ_min).
    pub skipped_donors: Vec<usize>,
    /// Recipient columns that keep their own activations (σ ≤ σ_min).
    pub skipped_recipients: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ScoreHeader {
    rows: Vec<ProbePoint>,
    cols: Vec<ProbePoint>,
    meta: ScoreMeta,
}

/// Donor × recipient correlation matrix, row-major f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: Vec<ProbePoint>,
    pub cols: Vec<ProbePoint>,
    pub values: Vec<f32>,
    pub meta: ScoreMeta,
}

/// A rectangular piece of the score matrix.
#[derive(Debug, Clone)]
pub struct ScoreBlock {
    pub row_start: usize,
    pub col_start: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

/// Maps a flat channel index to (layer position, channel within the layer).
fn locate(points: &[ProbePoint], mut index: usize) -> Option<(usize, usize)> {
    for (k, p) in points.iter().enumerate() {
        if index < p.channel_count {
            return Some((k, index));
        }
        index -= p.channel_count;
    }
    None
}

fn offsets(points: &[ProbePoint]) -> Vec<usize> {
    let mut acc = 0;
    points
        .iter()
        .map(|p| {
            let o = acc;
            acc += p.channel_count;
            o
        })
        .collect()
}

impl ScoreMatrix {
    pub fn n_rows(&self) -> usize {
        total_channels(&self.rows)
    }

    pub fn n_cols(&self) -> usize {
        total_channels(&self.cols)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows(), self.n_cols())
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.n_cols() + j]
    }

    /// (layer_id, channel) of donor row `i`.
    pub fn row_channel(&self, i: usize) -> Option<(&str, usize)> {
        locate(&self.rows, i).map(|(k, c)| (self.rows[k].layer_id.as_str(), c))
    }

    /// (layer_id, channel) of recipient column `j`.
    pub fn col_channel(&self, j: usize) -> Option<(&str, usize)> {
        locate(&self.cols, j).map(|(k, c)| (self.cols[k].layer_id.as_str(), c))
    }

    /// Largest |Z| entry.
    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0f32, |m, v| m.max(v.abs()))
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprinter::new();
        fp.update(serde_json::to_string(&self.meta).expect("meta serializes"));
        for p in self.rows.iter().chain(&self.cols) {
            fp.update(&p.layer_id);
        }
        fp.update_f32s(&self.values);
        fp.finish()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::to_vec(&ScoreHeader {
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            meta: self.meta.clone(),
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SCORE_MAGIC)?;
        w.write_all(&(self.n_rows() as u64).to_le_bytes())?;
        w.write_all(&(self.n_cols() as u64).to_le_bytes())?;
        w.write_all(&DTYPE_F32.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for chunk in self.values.chunks(1 << 16) {
            let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |why: &str| XaiError::format(path, why.to_string());
        let file = File::open(path).map_err(|e| XaiError::MissingSource(format!("{}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != SCORE_MAGIC {
            return Err(bad("not a score matrix file"));
        }
        let mut u64b = [0u8; 8];
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated header"))?;
        let rows = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u64b).map_err(|_| bad("truncated header"))?;
        let cols = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
        if u32::from_le_bytes(u32b) != DTYPE_F32 {
            return Err(bad("unsupported dtype"));
        }
        r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
        let mut meta = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
        let header: ScoreHeader = serde_json::from_slice(&meta).map_err(|e| bad(&e.to_string()))?;
        if total_channels(&header.rows) != rows || total_channels(&header.cols) != cols {
            return Err(bad("dimensions disagree with the channel catalogs"));
        }
        let mut bytes = vec![0u8; rows * cols * 4];
        r.read_exact(&mut bytes).map_err(|_| bad("truncated data"))?;
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(bad("trailing bytes"));
        }
        let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(Self {
            rows: header.rows,
            cols: header.cols,
            values,
            meta: header.meta,
        })
    }
}

/// Stitches tiles into a full matrix; tiles must cover every entry exactly once.
pub fn assemble_score_matrix(
    rows: Vec<ProbePoint>,
    cols: Vec<ProbePoint>,
    blocks: Vec<ScoreBlock>,
    meta: ScoreMeta,
) -> Result<ScoreMatrix> {
    let (nr, nc) = (total_channels(&rows), total_channels(&cols));
    if nr == 0 || nc == 0 {
        return Err(XaiError::InvalidInput("score matrix needs at least one row and one column".into()));
    }
    let mut values = vec![0f32; nr * nc];
    let mut seen = vec![false; nr * nc];
    for b in blocks {
        if b.row_start + b.rows > nr || b.col_start + b.cols > nc || b.values.len() != b.rows * b.cols {
            return Err(XaiError::Shape(format!(
                "tile at ({}, {}) of {}x{} does not fit a {nr}x{nc} matrix",
                b.row_start, b.col_start, b.rows, b.cols
            )));
        }
        for r in 0..b.rows {
            for c in 0..b.cols {
                let k = (b.row_start + r) * nc + b.col_start + c;
                if seen[k] {
                    return Err(XaiError::Shape(format!(
                        "tiles overlap at entry ({}, {})",
                        b.row_start + r,
                        b.col_start + c
                    )));
                }
                let v = b.values[r * b.cols + c];
                if !v.is_finite() {
                    return Err(XaiError::InvalidInput(format!(
                        "non-finite score at ({}, {})",
                        b.row_start + r,
                        b.col_start + c
                    )));
                }
                seen[k] = true;
                values[k] = v;
            }
        }
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(XaiError::Shape(format!("no tile covers entry ({}, {})", k / nc, k % nc)));
    }
    Ok(ScoreMatrix { rows, cols, values, meta })
}

/// Per-channel (μ, σ) of a layer; `None` marks a degenerate channel.
fn layer_norms(stats: &ActivationStats, p: &ProbePoint) -> Result<Vec<Option<(f64, f64)>>> {
    let layer = stats.layer(&p.layer_id).ok_or_else(|| {
        XaiError::InvalidStats(format!("statistics lack layer `{}`", p.layer_id))
    })?;
    if layer.channels.len() != p.channel_count {
        return Err(XaiError::InvalidStats(format!(
            "statistics for `{}` have {} channels, catalog has {}",
            p.layer_id,
            layer.channels.len(),
            p.channel_count
        )));
    }
    Ok((0..p.channel_count)
        .map(|c| {
            if stats.is_degenerate(&p.layer_id, c, SIGMA_MIN) {
                None
            } else {
                stats.mean_std(&p.layer_id, c).ok()
            }
        })
        .collect())
}

/// Standardized maps of one image, channel-major; degenerate channels are zero.
fn standardized_image(batch: &ActivationBatch, values: &[f32], image: usize, norms: &[Option<(f64, f64)>]) -> Vec<f32> {
    let (_, c, h, w) = batch.dims();
    let plane = h * w;
    let base = image * c * plane;
    let mut out = vec![0f32; c * plane];
    for (ch, norm) in norms.iter().enumerate() {
        if let Some((mu, sigma)) = norm {
            let src = &values[base + ch * plane..base + (ch + 1) * plane];
            for (o, &v) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(src) {
                *o = ((v as f64 - mu) / sigma) as f32;
            }
        }
    }
    out
}

/// Accumulates every tile of the score matrix over image shards.
pub struct MatchAccumulator {
    donor_points: Vec<ProbePoint>,
    recipient_points: Vec<ProbePoint>,
    donor_norms: Vec<Vec<Option<(f64, f64)>>>,
    recipient_norms: Vec<Vec<Option<(f64, f64)>>>,
    blocks: Vec<CorrelationBlock>,
    scratch: Vec<f32>,
    sample_ids: Vec<u64>,
    meta: ScoreMeta,
}

impl MatchAccumulator {
    pub fn new(
        donor: &dyn ImageEncoder,
        recipient: &dyn ImageEncoder,
        donor_stats: &ActivationStats,
        recipient_stats: &ActivationStats,
    ) -> Result<Self> {
        let donor_points = donor.catalog();
        let recipient_points = recipient.swappable_catalog();
        if recipient_points.is_empty() {
            return Err(XaiError::Architecture(format!("{} has no swappable layers", recipient.architecture())));
        }
        let donor_norms = donor_points.iter().map(|p| layer_norms(donor_stats, p)).collect::<Result<Vec<_>>>()?;
        let recipient_norms = recipient_points
            .iter()
            .map(|p| layer_norms(recipient_stats, p))
            .collect::<Result<Vec<_>>>()?;
        let skipped = |norms: &[Vec<Option<(f64, f64)>>]| -> Vec<usize> {
            norms.iter().flatten().enumerate().filter(|(_, n)| n.is_none()).map(|(i, _)| i).collect()
        };
        let meta = ScoreMeta {
            donor_architecture: donor.architecture(),
            recipient_architecture: recipient.architecture(),
            donor_stats: donor_stats.fingerprint(),
            recipient_stats: recipient_stats.fingerprint(),
            subset: String::new(),
            images: 0,
            skipped_donors: skipped(&donor_norms),
            skipped_recipients: skipped(&recipient_norms),
        };
        let mut blocks = Vec::new();
        for d in &donor_points {
            for r in &recipient_points {
                blocks.push(CorrelationBlock::new(d.channel_count, r.channel_count));
            }
        }
        Ok(Self {
            donor_points,
            recipient_points,
            donor_norms,
            recipient_norms,
            blocks,
            scratch: Vec::new(),
            sample_ids: Vec::new(),
            meta,
        })
    }

    pub fn donor_points(&self) -> &[ProbePoint] {
        &self.donor_points
    }

    pub fn recipient_points(&self) -> &[ProbePoint] {
        &self.recipient_points
    }

    /// Adds one shard: one batch per donor layer and per recipient swappable layer,
    /// all over the same images in the same order.
    pub fn add(&mut self, donor: &[ActivationBatch], recipient: &[ActivationBatch]) -> Result<()> {
        check_layers(donor, &self.donor_points)?;
        check_layers(recipient, &self.recipient_points)?;
        let ids = &donor[0].sample_ids;
        let order = sample_order_fingerprint(ids);
        for b in donor.iter().chain(recipient) {
            let other = sample_order_fingerprint(&b.sample_ids);
            if other != order {
                return Err(XaiError::Fingerprint(format!(
                    "layer `{}` saw samples in order {other}, expected {order}",
                    b.layer_id
                )));
            }
        }
        let donor_values = donor.iter().map(|b| b.to_vec()).collect::<Result<Vec<_>>>()?;
        let recipient_values = recipient.iter().map(|b| b.to_vec()).collect::<Result<Vec<_>>>()?;
        let nr = self.recipient_points.len();
        for image in 0..ids.len() {
            let ns: Vec<Vec<f32>> = donor
                .iter()
                .zip(&donor_values)
                .zip(&self.donor_norms)
                .map(|((b, v), n)| standardized_image(b, v, image, n))
                .collect();
            let nc: Vec<Vec<f32>> = recipient
                .iter()
                .zip(&recipient_values)
                .zip(&self.recipient_norms)
                .map(|((b, v), n)| standardized_image(b, v, image, n))
                .collect();
            // Resized recipient stacks are shared by every donor layer with the same target.
            let mut cache: Vec<((usize, usize), Vec<Vec<f32>>)> = Vec::new();
            for (d, dp) in self.donor_points.iter().enumerate() {
                let mut donor_resized: Vec<((usize, usize), Vec<f32>)> = Vec::new();
                for (r, rp) in self.recipient_points.iter().enumerate() {
                    let target = (dp.spatial.0.max(rp.spatial.0), dp.spatial.1.max(rp.spatial.1));
                    let len = target.0 * target.1;
                    if !donor_resized.iter().any(|(t, _)| *t == target) {
                        let v = resize_planes(&ns[d], dp.channel_count, dp.spatial, target)?;
                        donor_resized.push((target, v));
                    }
                    if !cache.iter().any(|(t, _)| *t == target) {
                        let stacks = self
                            .recipient_points
                            .iter()
                            .zip(&nc)
                            .map(|(p, v)| {
                                if p.spatial.0 <= target.0 && p.spatial.1 <= target.1 {
                                    resize_planes(v, p.channel_count, p.spatial, target)
                                } else {
                                    Ok(Vec::new())
                                }
                            })
                            .collect::<Result<Vec<_>>>()?;
                        cache.push((target, stacks));
                    }
                    let ds = &donor_resized.iter().find(|(t, _)| *t == target).expect("inserted").1;
                    let rs = &cache.iter().find(|(t, _)| *t == target).expect("inserted").1[r];
                    self.blocks[d * nr + r].accumulate_with(ds, rs, len, &mut self.scratch)?;
                }
            }
        }
        self.sample_ids.extend_from_slice(ids);
        Ok(())
    }

    pub fn finish(self) -> Result<ScoreMatrix> {
        if self.sample_ids.is_empty() {
            return Err(XaiError::InvalidInput("no images were matched".into()));
        }
        let row_off = offsets(&self.donor_points);
        let col_off = offsets(&self.recipient_points);
        let nr = self.recipient_points.len();
        let mut tiles = Vec::with_capacity(self.blocks.len());
        for (k, b) in self.blocks.into_iter().enumerate() {
            tiles.push(ScoreBlock {
                row_start: row_off[k / nr],
                col_start: col_off[k % nr],
                rows: b.rows,
                cols: b.cols,
                values: b.values()?,
            });
        }
        let mut meta = self.meta;
        meta.subset = sample_order_fingerprint(&self.sample_ids);
        meta.images = self.sample_ids.len();
        assemble_score_matrix(self.donor_points, self.recipient_points, tiles, meta)
    }
}

fn check_layers(batches: &[ActivationBatch], points: &[ProbePoint]) -> Result<()> {
    if batches.len() != points.len() {
        return Err(XaiError::Shape(format!("{} layer batches for {} probe points", batches.len(), points.len())));
    }
    for (b, p) in batches.iter().zip(points) {
        let (_, c, h, w) = b.dims();
        if b.layer_id != p.layer_id || c != p.channel_count || (h, w) != p.spatial {
            return Err(XaiError::Shape(format!(
                "batch for `{}` ({c}x{h}x{w}) does not match probe point `{}`",
                b.layer_id, p.layer_id
            )));
        }
    }
    Ok(())
}

/// Captures both encoders over `samples` and builds the full score matrix.
pub fn compute_score_matrix(
    donor: &dyn ImageEncoder,
    recipient: &dyn ImageEncoder,
    donor_stats: &ActivationStats,
    recipient_stats: &ActivationStats,
    samples: &[(u64, &Raster)],
    batch_size: usize,
) -> Result<ScoreMatrix> {
    if batch_size == 0 {
        return Err(XaiError::InvalidInput("match batch size must be positive".into()));
    }
    let mut acc = MatchAccumulator::new(donor, recipient, donor_stats, recipient_stats)?;
    let donor_points = acc.donor_points().to_vec();
    let recipient_points = acc.recipient_points().to_vec();
    for (k, shard) in samples.chunks(batch_size).enumerate() {
        let mut d = Vec::new();
        capture(donor, shard, &donor_points, shard.len(), |b| {
            d.push(b);
            Ok(())
        })?;
        let mut r = Vec::new();
        capture(recipient, shard, &recipient_points, shard.len(), |b| {
            r.push(b);
            Ok(())
        })?;
        acc.add(&d, &r)?;
        log::debug!("matched shard {} ({} images)", k + 1, shard.len());
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapPolicy {
    /// Best donor per recipient channel; donors may be reused.
    Argmax,
    /// Globally descending scores, each donor used at most once.
    OneToOne,
}

impl fmt::Display for SwapPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwapPolicy::Argmax => "argmax",
            SwapPolicy::OneToOne => "one_to_one",
        })
    }
}

impl FromStr for SwapPolicy {
    type Err = XaiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" | "per-recipient-argmax" => Ok(SwapPolicy::Argmax),
            "one_to_one" | "one-to-one" | "greedy-one-to-one" => Ok(SwapPolicy::OneToOne),
            other => Err(XaiError::Config(format!("unknown swap policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapEntry {
    pub clip_layer: String,
    pub clip_channel: usize,
    pub donor_layer: String,
    pub donor_channel: usize,
    pub score: f32,
}

/// Donor → recipient assignments, highest score first.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapPlan {
    pub policy: SwapPolicy,
    pub threshold: f64,
    /// Fingerprint of the score matrix the plan was drawn from.
    pub scores: String,
    pub entries: Vec<SwapEntry>,
}

/// Picks donors for recipient columns of `z`.
///
/// Ties go to the lower row, i.e. the earlier donor layer and then the lower
/// channel. Columns whose best admissible score is below `threshold` are left out.
pub fn select_swaps(z: &ScoreMatrix, policy: SwapPolicy, threshold: f64) -> Result<SwapPlan> {
    let (nr, nc) = z.shape();
    if nr == 0 || nc == 0 || z.values.len() != nr * nc {
        return Err(XaiError::InvalidInput("empty or malformed score matrix".into()));
    }
    if threshold.is_nan() {
        return Err(XaiError::Config("threshold is NaN".into()));
    }
    let mut donor_ok = vec![true; nr];
    for &i in &z.meta.skipped_donors {
        if let Some(d) = donor_ok.get_mut(i) {
            *d = false;
        }
    }
    let mut recipient_ok = vec![true; nc];
    for &j in &z.meta.skipped_recipients {
        if let Some(r) = recipient_ok.get_mut(j) {
            *r = false;
        }
    }
    let mut picks: Vec<(usize, usize, f32)> = Vec::new();
    match policy {
        SwapPolicy::Argmax => {
            for j in (0..nc).filter(|&j| recipient_ok[j]) {
                let mut best: Option<(usize, f32)> = None;
                for i in (0..nr).filter(|&i| donor_ok[i]) {
                    let v = z.get(i, j);
                    if best.map(|(_, b)| v > b).unwrap_or(true) {
                        best = Some((i, v));
                    }
                }
                if let Some((i, v)) = best {
                    if v as f64 >= threshold {
                        picks.push((i, j, v));
                    }
                }
            }
        }
        SwapPolicy::OneToOne => {
            let mut order: Vec<(usize, usize)> = (0..nr)
                .filter(|&i| donor_ok[i])
                .flat_map(|i| (0..nc).filter(|&j| recipient_ok[j]).map(move |j| (i, j)))
                .collect();
            order.sort_by(|a, b| {
                z.get(b.0, b.1)
                    .total_cmp(&z.get(a.0, a.1))
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            let mut used = vec![false; nr];
            let mut filled = vec![false; nc];
            for (i, j) in order {
                let v = z.get(i, j);
                if (v as f64) < threshold {
                    break;
                }
                if !used[i] && !filled[j] {
                    used[i] = true;
                    filled[j] = true;
                    picks.push((i, j, v));
                }
            }
        }
    }
    picks.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)));
    let entries = picks
        .into_iter()
        .map(|(i, j, score)| {
            let (donor_layer, donor_channel) = z.row_channel(i).expect("row in range");
            let (clip_layer, clip_channel) = z.col_channel(j).expect("column in range");
            SwapEntry {
                clip_layer: clip_layer.to_string(),
                clip_channel,
                donor_layer: donor_layer.to_string(),
                donor_channel,
                score,
            }
        })
        .collect();
    Ok(SwapPlan {
        policy,
        threshold,
        scores: z.fingerprint(),
        entries,
    })
}

impl SwapPlan {
    pub fn empty() -> Self {
        Self {
            policy: SwapPolicy::Argmax,
            threshold: f64::NEG_INFINITY,
            scores: String::new(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# policy={}\n# threshold={}\n# scores={}\n{PLAN_HEADER}\n",
            self.policy, self.threshold, self.scores
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.clip_layer, e.clip_channel, e.donor_layer, e.donor_channel, e.score
            ));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        const NAME: &str = "swap plan";
        let mut plan = SwapPlan::empty();
        let mut header = false;
        for (n, line) in text.lines().enumerate() {
            if let Some(meta) = line.strip_prefix("# ") {
                match meta.split_once('=') {
                    Some(("policy", v)) => plan.policy = v.parse()?,
                    Some(("threshold", v)) => {
                        plan.threshold = v.parse().map_err(|_| XaiError::format(NAME, format!("bad threshold `{v}`")))?
                    }
                    Some(("scores", v)) => plan.scores = v.to_string(),
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header {
                if line.trim_end() != PLAN_HEADER {
                    return Err(XaiError::format(NAME, format!("unexpected header `{line}`")));
                }
                header = true;
                continue;
            }
            let bad = |what: &str| XaiError::format(NAME, format!("line {}: bad {what}", n + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("column count"));
            }
            plan.entries.push(SwapEntry {
                clip_layer: cols[0].to_string(),
                clip_channel: cols[1].parse().map_err(|_| bad("clip_channel"))?,
                donor_layer: cols[2].to_string(),
                donor_channel: cols[3].parse().map_err(|_| bad("donor_channel"))?,
                score: cols[4].parse().map_err(|_| bad("score"))?,
            });
        }
        if !header {
            return Err(XaiError::format(NAME, "missing header row"));
        }
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| XaiError::MissingSource(format!("{}: {e}", path.display())))?;
        Self::from_tsv(&text)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_tsv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::EncoderRole;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point(id: &str, channels: usize, role: EncoderRole) -> ProbePoint {
        ProbePoint {
            encoder: role,
            layer_id: id.into(),
            channel_count: channels,
            spatial: (1, 1),
            swappable: role == EncoderRole::Clip,
        }
    }

    fn meta() -> ScoreMeta {
        ScoreMeta {
            donor_architecture: "d".into(),
            recipient_architecture: "r".into(),
            donor_stats: String::new(),
            recipient_stats: String::new(),
            subset: String::new(),
            images: 1,
            skipped_donors: vec![],
            skipped_recipients: vec![],
        }
    }

    fn matrix(rows: &[usize], cols: &[usize], values: Vec<f32>) -> ScoreMatrix {
        let r = rows.iter().enumerate().map(|(k, &c)| point(&format!("d{k}"), c, EncoderRole::Standalone)).collect();
        let c = cols.iter().enumerate().map(|(k, &c)| point(&format!("c{k}"), c, EncoderRole::Clip)).collect();
        ScoreMatrix { rows: r, cols: c, values, meta: meta() }
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[3.0, 3.0], 3.0, 2.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(standardize(&[2.0, 4.0], 3.0, 1.0).unwrap(), vec![-1.0, 1.0]);
        assert!(matches!(standardize(&[1.0], 0.0, 1e-7), Err(XaiError::InvalidStats(_))));
        assert!(standardize(&[1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn resize_examples() {
        let m: Vec<f32> = (0..16).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear(&m, (4, 4), (4, 4)).unwrap(), m);
        assert_eq!(resize_bilinear(&[2.5], (1, 1), (3, 3)).unwrap(), vec![2.5; 9]);
        assert!(resize_bilinear(&m, (4, 4), (0, 2)).is_err());
        let up = resize_bilinear(&[0.0, 1.0, 2.0, 3.0], (2, 2), (4, 4)).unwrap();
        let want = oracle::naive_bilinear(&[0.0, 1.0, 2.0, 3.0], (2, 2), (4, 4)).unwrap();
        for (a, b) in up.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sign_flip_negates_correlation() {
        let ns = [1.0f32, -1.0, 0.5, -0.5];
        let neg: Vec<f32> = ns.iter().map(|v| -v).collect();
        let z = correlation_block(&ns, &ns, 1, 1, 4).unwrap();
        let zn = correlation_block(&ns, &neg, 1, 1, 4).unwrap();
        assert_eq!(zn[0], -z[0]);
    }

    #[test]
    fn shard_accumulation_matches_single_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ns: Vec<f32> = (0..2 * 10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let nc: Vec<f32> = (0..3 * 10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let whole = correlation_block(&ns, &nc, 2, 3, 10).unwrap();
        let mut b = CorrelationBlock::new(2, 3);
        let split = |v: &[f32], ch: usize, lo: usize, hi: usize| -> Vec<f32> {
            (0..ch).flat_map(|c| v[c * 10 + lo..c * 10 + hi].to_vec()).collect()
        };
        b.accumulate(&split(&ns, 2, 0, 4), &split(&nc, 3, 0, 4), 4).unwrap();
        b.accumulate(&split(&ns, 2, 4, 10), &split(&nc, 3, 4, 10), 6).unwrap();
        for (x, y) in b.values().unwrap().iter().zip(&whole) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(b.accumulate(&ns, &nc, 9).is_err());
    }

    #[test]
    fn assembly_detects_gaps_and_overlaps() {
        let rows = vec![point("d", 2, EncoderRole::Standalone)];
        let cols = vec![point("c", 2, EncoderRole::Clip)];
        let tile = |r, c| ScoreBlock { row_start: r, col_start: c, rows: 1, cols: 2, values: vec![0.5, 0.25] };
        let ok = assemble_score_matrix(rows.clone(), cols.clone(), vec![tile(0, 0), tile(1, 0)], meta()).unwrap();
        assert_eq!(ok.shape(), (2, 2));
        assert!(assemble_score_matrix(rows.clone(), cols.clone(), vec![tile(0, 0)], meta()).is_err());
        assert!(assemble_score_matrix(rows.clone(), cols.clone(), vec![tile(0, 0), tile(0, 0), tile(1, 0)], meta()).is_err());
        assert!(assemble_score_matrix(rows, cols, vec![tile(0, 0), tile(1, 1)], meta()).is_err());
    }

    #[test]
    fn score_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.bin");
        let z = matrix(&[2, 1], &[2], vec![0.1, -0.2, 0.3, 0.4, 1.0, -1.0]);
        z.write(&p).unwrap();
        let back = ScoreMatrix::read(&p).unwrap();
        assert_eq!(back, z);
        assert_eq!(back.fingerprint(), z.fingerprint());
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(ScoreMatrix::read(&p).is_err());
        bytes[0] = b'Y';
        std::fs::write(&p, &bytes).unwrap();
        assert!(ScoreMatrix::read(&p).is_err());
    }

    #[test]
    fn select_examples() {
        let z = matrix(&[2], &[2], vec![0.9, 0.1, 0.8, 0.7]);
        for policy in [SwapPolicy::Argmax, SwapPolicy::OneToOne] {
            let plan = select_swaps(&z, policy, f64::NEG_INFINITY).unwrap();
            let got: Vec<(usize, usize, f32)> = plan.entries.iter().map(|e| (e.clip_channel, e.donor_channel, e.score)).collect();
            assert_eq!(got, vec![(0, 0, 0.9), (1, 1, 0.7)], "{policy}");
        }
    }

    #[test]
    fn ties_go_to_lower_donor() {
        let z = matrix(&[1, 2], &[1], vec![0.5, 0.5, 0.5]);
        let plan = select_swaps(&z, SwapPolicy::Argmax, f64::NEG_INFINITY).unwrap();
        assert_eq!((plan.entries[0].donor_layer.as_str(), plan.entries[0].donor_channel), ("d0", 0));
        let again = select_swaps(&z, SwapPolicy::Argmax, f64::NEG_INFINITY).unwrap();
        assert_eq!(plan, again);
    }

    #[test]
    fn threshold_and_skips() {
        let mut z = matrix(&[2], &[2], vec![0.9, 0.1, 0.8, 0.2]);
        let plan = select_swaps(&z, SwapPolicy::Argmax, 0.5).unwrap();
        assert_eq!(plan.len(), 1);
        z.meta.skipped_donors = vec![0];
        z.meta.skipped_recipients = vec![1];
        let plan = select_swaps(&z, SwapPolicy::Argmax, f64::NEG_INFINITY).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!((plan.entries[0].clip_channel, plan.entries[0].donor_channel), (0, 1));
        assert!(select_swaps(&matrix(&[], &[1], vec![]), SwapPolicy::Argmax, 0.0).is_err());
    }

    #[test]
    fn one_to_one_never_reuses_donors() {
        let z = matrix(&[2], &[3], vec![0.9, 0.8, 0.7, 0.1, 0.2, 0.3]);
        let plan = select_swaps(&z, SwapPolicy::OneToOne, f64::NEG_INFINITY).unwrap();
        assert_eq!(plan.len(), 2);
        let argmax = select_swaps(&z, SwapPolicy::Argmax, f64::NEG_INFINITY).unwrap();
        assert_eq!(argmax.len(), 3);
        assert!(argmax.entries.iter().all(|e| e.donor_channel == 0));
    }

    #[test]
    fn plan_tsv_round_trip() {
        let z = matrix(&[2], &[2], vec![0.9, 0.1, 0.8, 0.7]);
        let plan = select_swaps(&z, SwapPolicy::OneToOne, f64::NEG_INFINITY).unwrap();
        let text = plan.to_tsv();
        assert!(text.contains(PLAN_HEADER));
        assert!(text.contains("# threshold=-inf"));
        assert_eq!(SwapPlan::from_tsv(&text).unwrap(), plan);
        assert!(SwapPlan::from_tsv("nope\n").is_err());
    }

    #[test]
    fn sample_order_mismatch_is_rejected() {
        let pair = oracle::build_tiny_pair(0).unwrap();
        let imgs: Vec<Raster> = (0..2).map(|k| Raster::new(28, 28, 3, vec![k as f32 * 0.3 + 0.1; 28 * 28 * 3]).unwrap()).collect();
        let samples: Vec<(u64, &Raster)> = vec![(1, &imgs[0]), (2, &imgs[1])];
        let dp = pair.donor.catalog();
        let rp = pair.recipient.swappable_catalog();
        let ds = crate::probes::compute_stats(&pair.donor, &samples, &dp, 2, "x").unwrap();
        let rs = crate::probes::compute_stats(&pair.recipient, &samples, &rp, 2, "x").unwrap();
        let mut acc = MatchAccumulator::new(&pair.donor, &pair.recipient, &ds, &rs).unwrap();
        let swapped: Vec<(u64, &Raster)> = vec![(2, &imgs[1]), (1, &imgs[0])];
        let (mut d, mut r) = (Vec::new(), Vec::new());
        capture(&pair.donor, &samples, &dp, 2, |b| Ok(d.push(b))).unwrap();
        capture(&pair.recipient, &swapped, &rp, 2, |b| Ok(r.push(b))).unwrap();
        assert!(matches!(acc.add(&d, &r), Err(XaiError::Fingerprint(_))));
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    proptest! {
        #[test]
        fn affine_rescaling_leaves_standardized_maps(seed in 0u64..1000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_vec(&mut rng, 12);
            let (mu, sigma) = (0.3, 1.7);
            let y: Vec<f32> = x.iter().map(|&v| (a * v as f64 + b) as f32).collect();
            let nx = standardize(&x, mu, sigma).unwrap();
            let ny = standardize(&y, a * mu + b, a * sigma).unwrap();
            for (p, q) in nx.iter().zip(&ny) {
                prop_assert!((p - q).abs() < 1e-4);
            }
        }

        #[test]
        fn correlation_is_symmetric(seed in 0u64..1000, r in 1usize..5, c in 1usize..5, len in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_vec(&mut rng, r * len);
            let y = random_vec(&mut rng, c * len);
            let xy = correlation_block(&x, &y, r, c, len).unwrap();
            let yx = correlation_block(&y, &x, c, r, len).unwrap();
            for i in 0..r {
                for j in 0..c {
                    prop_assert!((xy[i * c + j] - yx[j * r + i]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn argmax_depends_only_on_column_order(seed in 0u64..1000, scale in 0.1f32..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = random_vec(&mut rng, 5 * 3);
            let z = matrix(&[5], &[3], values.clone());
            // A strictly increasing map applied to one column keeps its ordering.
            let bent: Vec<f32> = values.iter().enumerate().map(|(k, &v)| if k % 3 == 1 { (v * scale).exp() } else { v }).collect();
            let w = matrix(&[5], &[3], bent);
            let p = select_swaps(&z, SwapPolicy::Argmax, f64::NEG_INFINITY).unwrap();
            let q = select_swaps(&w, SwapPolicy::Argmax, f64::NEG_INFINITY).unwrap();
            let pick = |plan: &SwapPlan| {
                let mut v: Vec<(usize, usize)> = plan.entries.iter().map(|e| (e.clip_channel, e.donor_channel)).collect();
                v.sort();
                v
            };
            prop_assert_eq!(pick(&p), pick(&q));
            prop_assert_eq!(p.len(), 3);
        }
    }
}
