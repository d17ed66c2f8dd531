//! Probe catalogs, activation capture and per-channel streaming statistics.
//!
//! Statistics are one (count, mean, std) triple per channel, pooled over the
//! batch and all spatial positions. Accumulators are plain values that merge
//! with Chan's parallel update, so shards can be reduced in any grouping.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Result, XaiError};
use crate::fingerprint::{sha256_hex, Fingerprinter};
use crate::nets::{ConvHook, EncoderRole, ImageEncoder, ProbePoint};
use crate::raster::Raster;

/// Probed channels of the standalone ResNet-50.
pub const STANDALONE_CHANNELS: usize = 22720;
/// Swappable channels of the CLIP RN50 image tower.
pub const CLIP_SWAPPABLE_CHANNELS: usize = 3840;

pub const STATS_HEADER: &str = "layer_id\tchannel\tcount\tmean\tstd";

/// Catalog of `encoder`, checked against the convolutions a real forward pass reports.
///
/// A layer that fires without being catalogued, fires out of order, or has a
/// shape different from its catalog entry is an architecture error naming it.
pub fn enumerate_probe_points(encoder: &dyn ImageEncoder, swappable_only: bool) -> Result<Vec<ProbePoint>> {
    let catalog = encoder.catalog();
    let size = encoder.preprocessing().size;
    let probe = Tensor::zeros((1, 3, size, size), DType::F32, &Device::Cpu)?;
    let mut seen = ShapeRecorder(Vec::new());
    encoder.forward_hooked(&probe, &mut seen)?;
    for (k, (id, dims)) in seen.0.iter().enumerate() {
        let Some(p) = catalog.get(k) else {
            return Err(XaiError::Architecture(format!(
                "{}: layer `{id}` is not in the probe catalog",
                encoder.architecture()
            )));
        };
        let expected = [1, p.channel_count, p.spatial.0, p.spatial.1];
        if p.layer_id != *id || dims[..] != expected {
            return Err(XaiError::Architecture(format!(
                "{}: layer `{id}` with shape {dims:?} does not match catalog entry `{}` {expected:?}",
                encoder.architecture(),
                p.layer_id
            )));
        }
    }
    if seen.0.len() != catalog.len() {
        return Err(XaiError::Architecture(format!(
            "{}: catalog layer `{}` never produced an output",
            encoder.architecture(),
            catalog[seen.0.len()].layer_id
        )));
    }
    Ok(if swappable_only {
        catalog.into_iter().filter(|p| p.swappable).collect()
    } else {
        catalog
    })
}

struct ShapeRecorder(Vec<(String, Vec<usize>)>);

impl ConvHook for ShapeRecorder {
    fn on_conv(&mut self, layer_id: &str, output: Tensor) -> candle_core::Result<Tensor> {
        self.0.push((layer_id.to_string(), output.dims().to_vec()));
        Ok(output)
    }
}

/// Swappable share of the probed channels, e.g. 3840 / 22720.
pub fn coverage_ratio(swappable: usize, total: usize) -> f64 {
    swappable as f64 / total as f64
}

/// Percentage with one decimal, `0.169…` → `16.9%`.
pub fn format_percent(ratio: f64) -> String {
    format!("{:.1}%", ratio * 100.0)
}

/// Raw outputs of one probed layer for a batch of images.
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    pub layer_id: String,
    /// (B, C, H, W).
    pub values: Tensor,
    pub sample_ids: Vec<u64>,
}

impl ActivationBatch {
    pub fn new(layer_id: impl Into<String>, values: Tensor, sample_ids: Vec<u64>) -> Result<Self> {
        let layer_id = layer_id.into();
        let (b, ..) = values.dims4().map_err(|_| {
            XaiError::Shape(format!("{layer_id}: expected (B, C, H, W), got {:?}", values.dims()))
        })?;
        if b != sample_ids.len() {
            return Err(XaiError::Shape(format!(
                "{layer_id}: batch of {b} maps but {} sample ids",
                sample_ids.len()
            )));
        }
        let values = values.to_dtype(DType::F32)?;
        let bad = values.flatten_all()?.to_vec1::<f32>()?.iter().any(|v| !v.is_finite());
        if bad {
            return Err(XaiError::InvalidInput(format!("{layer_id}: non-finite activation")));
        }
        Ok(Self { layer_id, values, sample_ids })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.values.dims4().expect("validated at construction")
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.values.flatten_all()?.to_vec1::<f32>()?)
    }
}

/// Records the outputs of selected layers without modifying them.
pub struct CaptureHook {
    wanted: HashSet<String>,
    pub captured: Vec<(String, Tensor)>,
}

impl CaptureHook {
    pub fn new<'a>(layer_ids: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            wanted: layer_ids.into_iter().map(str::to_string).collect(),
            captured: Vec::new(),
        }
    }

    pub fn take(&mut self) -> HashMap<String, Tensor> {
        self.captured.drain(..).collect()
    }
}

impl ConvHook for CaptureHook {
    fn on_conv(&mut self, layer_id: &str, output: Tensor) -> candle_core::Result<Tensor> {
        if self.wanted.contains(layer_id) {
            self.captured.push((layer_id.to_string(), output.clone()));
        }
        Ok(output)
    }
}

/// Runs `encoder` over `samples` and hands one batch per (layer, image batch) to `sink`.
///
/// Images go through the encoder's own preprocessing. Batches reach the sink in
/// image order and, within one image batch, in `points` order.
pub fn capture(
    encoder: &dyn ImageEncoder,
    samples: &[(u64, &Raster)],
    points: &[ProbePoint],
    batch_size: usize,
    mut sink: impl FnMut(ActivationBatch) -> Result<()>,
) -> Result<()> {
    if batch_size == 0 {
        return Err(XaiError::InvalidInput("capture batch size must be positive".into()));
    }
    let catalog = encoder.catalog();
    for p in points {
        if !catalog.iter().any(|c| c.layer_id == p.layer_id && c.channel_count == p.channel_count) {
            return Err(XaiError::Architecture(format!(
                "{} has no probe point `{}` with {} channels",
                encoder.architecture(),
                p.layer_id,
                p.channel_count
            )));
        }
    }
    for chunk in samples.chunks(batch_size) {
        let images: Vec<&Raster> = chunk.iter().map(|(_, r)| *r).collect();
        let ids: Vec<u64> = chunk.iter().map(|(id, _)| *id).collect();
        let pixels = encoder.preprocessing().apply(&images)?;
        let mut hook = CaptureHook::new(points.iter().map(|p| p.layer_id.as_str()));
        encoder.forward_hooked(&pixels, &mut hook)?;
        let mut got = hook.take();
        for p in points {
            let values = got.remove(&p.layer_id).ok_or_else(|| {
                XaiError::Architecture(format!("layer `{}` produced no output", p.layer_id))
            })?;
            sink(ActivationBatch::new(p.layer_id.clone(), values, ids.clone())?)?;
        }
    }
    Ok(())
}

/// Count, mean and sum of squared deviations of a stream.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningMoments {
    /// Welford update with one observation.
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Adds a block of observations: exact two-pass moments of the block, then a merge.
    pub fn push_slice(&mut self, xs: &[f32]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
        let m2 = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
        *self = self.merge(&RunningMoments { count: xs.len() as u64, mean, m2 });
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &RunningMoments) -> RunningMoments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        RunningMoments {
            count: self.count + other.count,
            mean: self.mean + delta * nb / n,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n,
        }
    }

    pub fn from_summary(count: u64, mean: f64, std: f64) -> Self {
        Self {
            count,
            mean,
            m2: std * std * count as f64,
        }
    }

    /// Population variance; NaN when empty.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer_id: String,
    pub channels: Vec<RunningMoments>,
}

/// Per-channel statistics for the probed layers of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub encoder: EncoderRole,
    /// Identifies the images the statistics were drawn from.
    pub source_fingerprint: String,
    pub layers: Vec<LayerStats>,
}

impl ActivationStats {
    pub fn new(encoder: EncoderRole, points: &[ProbePoint], source_fingerprint: impl Into<String>) -> Self {
        Self {
            encoder,
            source_fingerprint: source_fingerprint.into(),
            layers: points
                .iter()
                .map(|p| LayerStats {
                    layer_id: p.layer_id.clone(),
                    channels: vec![RunningMoments::default(); p.channel_count],
                })
                .collect(),
        }
    }

    pub fn layer(&self, layer_id: &str) -> Option<&LayerStats> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    pub fn channel_total(&self) -> usize {
        self.layers.iter().map(|l| l.channels.len()).sum()
    }

    pub fn accumulate(&mut self, batch: &ActivationBatch) -> Result<()> {
        let (b, c, h, w) = batch.dims();
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.layer_id == batch.layer_id)
            .ok_or_else(|| XaiError::Shape(format!("no statistics slot for layer `{}`", batch.layer_id)))?;
        if layer.channels.len() != c {
            return Err(XaiError::Shape(format!(
                "layer `{}` has {} channels in the catalog, batch has {c}",
                batch.layer_id,
                layer.channels.len()
            )));
        }
        let values = batch.to_vec()?;
        let plane = h * w;
        let mut buf = Vec::with_capacity(b * plane);
        for (ch, moments) in layer.channels.iter_mut().enumerate() {
            buf.clear();
            for i in 0..b {
                let start = (i * c + ch) * plane;
                buf.extend_from_slice(&values[start..start + plane]);
            }
            moments.push_slice(&buf);
        }
        Ok(())
    }

    /// Combines statistics of two disjoint sample shards.
    pub fn merge(&self, other: &ActivationStats) -> Result<ActivationStats> {
        let same_catalog = self.encoder == other.encoder
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.layer_id == b.layer_id && a.channels.len() == b.channels.len());
        if !same_catalog {
            return Err(XaiError::Shape("cannot merge statistics over different catalogs".into()));
        }
        let mut fp = Fingerprinter::new();
        fp.update("merge").update(&self.source_fingerprint).update(&other.source_fingerprint);
        Ok(ActivationStats {
            encoder: self.encoder,
            source_fingerprint: fp.finish(),
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| LayerStats {
                    layer_id: a.layer_id.clone(),
                    channels: a.channels.iter().zip(&b.channels).map(|(x, y)| x.merge(y)).collect(),
                })
                .collect(),
        })
    }

    /// (μ, σ) of one channel; errors when the channel saw no observations.
    pub fn mean_std(&self, layer_id: &str, channel: usize) -> Result<(f64, f64)> {
        let m = self
            .layer(layer_id)
            .and_then(|l| l.channels.get(channel))
            .ok_or_else(|| XaiError::InvalidStats(format!("no statistics for {layer_id}[{channel}]")))?;
        if m.count == 0 {
            return Err(XaiError::InvalidStats(format!("{layer_id}[{channel}] has zero observations")));
        }
        Ok((m.mean, m.std()))
    }

    /// True when the channel cannot be standardized: no data or σ ≤ `sigma_min`.
    pub fn is_degenerate(&self, layer_id: &str, channel: usize, sigma_min: f64) -> bool {
        match self.mean_std(layer_id, channel) {
            Ok((_, s)) => !(s > sigma_min),
            Err(_) => true,
        }
    }

    pub fn degenerate_channels(&self, sigma_min: f64) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.channels
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.count == 0 || !(m.std() > sigma_min))
                    .map(move |(c, _)| (l.layer_id.clone(), c))
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# encoder={}\n# source={}\n{STATS_HEADER}\n", self.encoder, self.source_fingerprint);
        for l in &self.layers {
            for (c, m) in l.channels.iter().enumerate() {
                let std = if m.count == 0 { 0.0 } else { m.std() };
                s.push_str(&format!("{}\t{c}\t{}\t{}\t{}\n", l.layer_id, m.count, m.mean, std));
            }
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        const NAME: &str = "stats table";
        let mut encoder = None;
        let mut source = String::new();
        let mut header = false;
        let mut layers: Vec<LayerStats> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if let Some(meta) = line.strip_prefix("# ") {
                match meta.split_once('=') {
                    Some(("encoder", v)) => encoder = Some(v.parse::<EncoderRole>()?),
                    Some(("source", v)) => source = v.to_string(),
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header {
                if line.trim_end() != STATS_HEADER {
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
            let channel: usize = cols[1].parse().map_err(|_| bad("channel"))?;
            let count: u64 = cols[2].parse().map_err(|_| bad("count"))?;
            let mean: f64 = cols[3].parse().map_err(|_| bad("mean"))?;
            let std: f64 = cols[4].parse().map_err(|_| bad("std"))?;
            if !(std >= 0.0) || !mean.is_finite() {
                return Err(bad("mean or std"));
            }
            if layers.last().map(|l| l.layer_id != cols[0]).unwrap_or(true) {
                if layers.iter().any(|l| l.layer_id == cols[0]) {
                    return Err(bad("layer order"));
                }
                layers.push(LayerStats { layer_id: cols[0].to_string(), channels: Vec::new() });
            }
            let layer = layers.last_mut().expect("pushed above");
            if channel != layer.channels.len() {
                return Err(bad("channel order"));
            }
            layer.channels.push(RunningMoments::from_summary(count, mean, std));
        }
        if !header {
            return Err(XaiError::format(NAME, "missing header row"));
        }
        Ok(Self {
            encoder: encoder.ok_or_else(|| XaiError::format(NAME, "missing `# encoder=` line"))?,
            source_fingerprint: source,
            layers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| XaiError::MissingSource(format!("{}: {e}", path.display())))?;
        Self::from_tsv(&text).map_err(|e| match e {
            XaiError::Format { reason, .. } => XaiError::format(path, reason),
            other => other,
        })
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_tsv())
    }
}

/// Captures `points` over `samples` and accumulates their statistics.
pub fn compute_stats(
    encoder: &dyn ImageEncoder,
    samples: &[(u64, &Raster)],
    points: &[ProbePoint],
    batch_size: usize,
    source_fingerprint: &str,
) -> Result<ActivationStats> {
    let mut stats = ActivationStats::new(encoder.role(), points, source_fingerprint);
    capture(encoder, samples, points, batch_size, |batch| stats.accumulate(&batch))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::clip::{ClipConfig, ModifiedResNet};
    use crate::nets::resnet::{ResNet, ResNetConfig};
    use crate::nets::store::SeededStore;
    use crate::nets::tiny::{TinyConfig, TinyEncoder};
    use crate::nets::total_channels;
    use proptest::prelude::*;

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn constant_stream_has_zero_std() {
        let mut m = RunningMoments::default();
        for _ in 0..10 {
            m.push(3.5);
        }
        assert_eq!(m.mean, 3.5);
        assert_eq!(m.std(), 0.0);
    }

    #[test]
    fn one_to_four() {
        let mut m = RunningMoments::default();
        m.push_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std() - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn percent_formatting() {
        let r = coverage_ratio(CLIP_SWAPPABLE_CHANNELS, STANDALONE_CHANNELS);
        assert_eq!(format!("{r:.3}"), "0.169");
        assert_eq!(format_percent(r), "16.9%");
    }

    #[test]
    fn full_catalogs_match_forward_passes() {
        let r = ResNet::new(ResNetConfig::resnet50(), SeededStore::new(0).builder()).unwrap();
        let points = enumerate_probe_points(&r, false).unwrap();
        assert_eq!(points.len(), 49);
        assert_eq!(total_channels(&points), STANDALONE_CHANNELS);
        let store = SeededStore::new(0);
        let c = ModifiedResNet::new(ClipConfig::rn50().vision, store.builder().pp("visual")).unwrap();
        let sw = enumerate_probe_points(&c, true).unwrap();
        assert_eq!(sw.len(), 4);
        assert_eq!(sw.iter().map(|p| p.channel_count).collect::<Vec<_>>(), vec![256, 512, 1024, 2048]);
        assert_eq!(total_channels(&sw), CLIP_SWAPPABLE_CHANNELS);
    }

    struct Liar(TinyEncoder);

    impl ImageEncoder for Liar {
        fn role(&self) -> EncoderRole {
            self.0.role()
        }
        fn architecture(&self) -> String {
            "liar".into()
        }
        fn catalog(&self) -> Vec<ProbePoint> {
            let mut c = self.0.catalog();
            c[1].layer_id = "conv9".into();
            c
        }
        fn preprocessing(&self) -> &crate::nets::Preprocessing {
            self.0.preprocessing()
        }
        fn forward_hooked(&self, p: &Tensor, h: &mut dyn ConvHook) -> candle_core::Result<Tensor> {
            self.0.forward_hooked(p, h)
        }
        fn output_dim(&self) -> usize {
            self.0.output_dim()
        }
    }

    #[test]
    fn unexpected_layer_is_named() {
        let enc = Liar(TinyEncoder::new(TinyConfig::donor(), SeededStore::new(0).builder()).unwrap());
        let err = enumerate_probe_points(&enc, false).unwrap_err().to_string();
        assert!(err.contains("conv2"), "{err}");
    }

    fn tiny_images(n: usize, seed: u64) -> Vec<Raster> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Raster::new(28, 28, 3, (0..28 * 28 * 3).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn capture_shapes_and_identical_rows() {
        let enc = TinyEncoder::new(TinyConfig::recipient(), SeededStore::new(2).builder()).unwrap();
        let img = &tiny_images(1, 0)[0];
        let points = enc.catalog();
        let mut got = Vec::new();
        capture(&enc, &[(7, img), (8, img)], &points, 4, |b| {
            got.push(b);
            Ok(())
        })
        .unwrap();
        assert_eq!(got.len(), points.len());
        for (b, p) in got.iter().zip(&points) {
            assert_eq!(b.dims(), (2, p.channel_count, p.spatial.0, p.spatial.1));
            assert_eq!(b.sample_ids, vec![7, 8]);
            let v = b.to_vec().unwrap();
            let half = v.len() / 2;
            assert_eq!(v[..half], v[half..]);
        }
    }

    #[test]
    fn capture_rejects_unknown_points_and_zero_batch() {
        let enc = TinyEncoder::new(TinyConfig::donor(), SeededStore::new(2).builder()).unwrap();
        let img = &tiny_images(1, 0)[0];
        let mut p = enc.catalog();
        assert!(capture(&enc, &[(0, img)], &p, 0, |_| Ok(())).is_err());
        p[0].layer_id = "nope".into();
        assert!(capture(&enc, &[(0, img)], &p, 1, |_| Ok(())).is_err());
    }

    #[test]
    fn stats_are_invariant_to_batching_and_round_trip() {
        let enc = TinyEncoder::new(TinyConfig::donor(), SeededStore::new(3).builder()).unwrap();
        let imgs = tiny_images(7, 1);
        let samples: Vec<(u64, &Raster)> = imgs.iter().enumerate().map(|(i, r)| (i as u64, r)).collect();
        let points = enc.catalog();
        let a = compute_stats(&enc, &samples, &points, 7, "s").unwrap();
        let b = compute_stats(&enc, &samples, &points, 2, "s").unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.channels.iter().zip(&lb.channels) {
                assert_eq!(x.count, y.count);
                assert!(rel(x.mean, y.mean) < 1e-6 && rel(x.std(), y.std()) < 1e-6);
            }
        }
        let back = ActivationStats::from_tsv(&a.to_tsv()).unwrap();
        assert_eq!(back.to_tsv(), a.to_tsv());
        assert_eq!(back.encoder, EncoderRole::Standalone);
        assert_eq!(back.source_fingerprint, "s");
    }

    #[test]
    fn degenerate_channels_are_flagged() {
        let p = ProbePoint {
            encoder: EncoderRole::Clip,
            layer_id: "l".into(),
            channel_count: 3,
            spatial: (1, 2),
            swappable: true,
        };
        let mut s = ActivationStats::new(EncoderRole::Clip, &[p], "x");
        let t = Tensor::from_vec(vec![1f32, 1., 0., 2., 5., 5.], (1, 3, 1, 2), &Device::Cpu).unwrap();
        s.accumulate(&ActivationBatch::new("l", t, vec![0]).unwrap()).unwrap();
        assert_eq!(s.degenerate_channels(1e-6), vec![("l".to_string(), 0), ("l".to_string(), 2)]);
        assert!(!s.is_degenerate("l", 1, 1e-6));
        let empty = ActivationStats::new(EncoderRole::Clip, &[], "x");
        assert!(empty.mean_std("l", 0).is_err());
    }

    #[test]
    fn batch_validation() {
        let t = Tensor::zeros((2, 1, 1, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(ActivationBatch::new("l", t.clone(), vec![0]).is_err());
        let nan = Tensor::from_vec(vec![f32::NAN], (1, 1, 1, 1), &Device::Cpu).unwrap();
        assert!(ActivationBatch::new("l", nan, vec![0]).is_err());
        assert!(ActivationBatch::new("l", t, vec![0, 1]).is_ok());
    }

    proptest! {
        #[test]
        fn welford_matches_two_pass(xs in prop::collection::vec(-1e3f64..1e3, 2..200)) {
            let mut m = RunningMoments::default();
            for &x in &xs { m.push(x); }
            let (mean, std) = two_pass(&xs);
            prop_assert!((m.mean - mean).abs() <= 1e-6 * mean.abs().max(1.0));
            prop_assert!((m.std() - std).abs() <= 1e-6 * std.max(1e-3));
        }

        #[test]
        fn split_merge_matches_single_pass(xs in prop::collection::vec(-50f32..50., 2..300), cut in 0usize..300) {
            let cut = cut % xs.len();
            let mut whole = RunningMoments::default();
            whole.push_slice(&xs);
            let (mut a, mut b) = (RunningMoments::default(), RunningMoments::default());
            a.push_slice(&xs[..cut]);
            b.push_slice(&xs[cut..]);
            let ab = a.merge(&b);
            let ba = b.merge(&a);
            prop_assert_eq!(ab.count, whole.count);
            for m in [ab, ba] {
                prop_assert!((m.mean - whole.mean).abs() <= 1e-6 * whole.mean.abs().max(1e-3));
                prop_assert!((m.std() - whole.std()).abs() <= 1e-6 * whole.std().max(1e-3));
            }
        }
    }
}
