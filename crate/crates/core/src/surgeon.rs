//! Network surgery: donor maps rescaled into recipient statistics and written
//! over CLIP channels during the CLIP forward pass.

use std::collections::{BTreeMap, HashMap};

use candle_core::Tensor;

use crate::error::{Result, XaiError};
use crate::matcher::{resize_planes, SwapEntry, SwapPlan, SIGMA_MIN};
use crate::nets::{ConvHook, ImageEncoder, NoHook, ProbePoint};
use crate::probes::{ActivationStats, CaptureHook};
use crate::raster::Raster;

/// A^X = ((A_S − μ_S) / σ_S) · σ_C + μ_C, then bilinear-resized to `target`.
pub fn transform_donor(
    map: &[f32],
    size: (usize, usize),
    donor: (f64, f64),
    recipient: (f64, f64),
    target: (usize, usize),
) -> Result<Vec<f32>> {
    if !(donor.1 > SIGMA_MIN) {
        return Err(XaiError::InvalidStats(format!("donor σ = {} is not above {SIGMA_MIN}", donor.1)));
    }
    let scaled: Vec<f32> = map
        .iter()
        .map(|&v| (((v as f64 - donor.0) / donor.1) * recipient.1 + recipient.0) as f32)
        .collect();
    resize_planes(&scaled, 1, size, target)
}

#[derive(Debug, Clone)]
struct Injection {
    clip_channel: usize,
    donor_layer: String,
    donor_channel: usize,
    donor: (f64, f64),
    recipient: (f64, f64),
}

/// A CLIP image tower with a frozen swap plan wired in.
pub struct SurgicalEncoder<'a> {
    clip: &'a dyn ImageEncoder,
    donor: &'a dyn ImageEncoder,
    plan: SwapPlan,
    /// Recipient layer id → (catalog entry, injections ordered by channel).
    injections: BTreeMap<String, (ProbePoint, Vec<Injection>)>,
    skipped: Vec<(SwapEntry, String)>,
}

impl<'a> SurgicalEncoder<'a> {
    /// Validates `plan` against both catalogs and resolves every entry's statistics.
    ///
    /// Unknown layers, out-of-range channels and recipient channels listed twice
    /// are configuration errors. Entries whose donor or recipient channel has
    /// degenerate statistics are skipped and reported by [`Self::skipped`].
    pub fn new(
        clip: &'a dyn ImageEncoder,
        donor: &'a dyn ImageEncoder,
        plan: SwapPlan,
        donor_stats: &ActivationStats,
        clip_stats: &ActivationStats,
    ) -> Result<Self> {
        let swappable = clip.swappable_catalog();
        let donor_catalog = donor.catalog();
        let mut injections: BTreeMap<String, (ProbePoint, Vec<Injection>)> = BTreeMap::new();
        let mut skipped = Vec::new();
        for e in &plan.entries {
            let rp = swappable.iter().find(|p| p.layer_id == e.clip_layer).ok_or_else(|| {
                XaiError::Config(format!("plan names `{}`, which is not a swappable layer of {}", e.clip_layer, clip.architecture()))
            })?;
            if e.clip_channel >= rp.channel_count {
                return Err(XaiError::Config(format!(
                    "plan channel {} is out of range for `{}` ({} channels)",
                    e.clip_channel, e.clip_layer, rp.channel_count
                )));
            }
            let dp = donor_catalog.iter().find(|p| p.layer_id == e.donor_layer).ok_or_else(|| {
                XaiError::Config(format!("plan names donor layer `{}`, unknown to {}", e.donor_layer, donor.architecture()))
            })?;
            if e.donor_channel >= dp.channel_count {
                return Err(XaiError::Config(format!(
                    "donor channel {} is out of range for `{}` ({} channels)",
                    e.donor_channel, e.donor_layer, dp.channel_count
                )));
            }
            let slot = injections.entry(e.clip_layer.clone()).or_insert_with(|| (rp.clone(), Vec::new()));
            if slot.1.iter().any(|i| i.clip_channel == e.clip_channel) {
                return Err(XaiError::Config(format!("`{}` channel {} is planned twice", e.clip_layer, e.clip_channel)));
            }
            if donor_stats.is_degenerate(&e.donor_layer, e.donor_channel, SIGMA_MIN) {
                log::warn!("skipping {}[{}]: donor statistics are degenerate", e.donor_layer, e.donor_channel);
                skipped.push((e.clone(), "degenerate donor statistics".to_string()));
                continue;
            }
            if clip_stats.is_degenerate(&e.clip_layer, e.clip_channel, SIGMA_MIN) {
                log::warn!("skipping {}[{}]: recipient statistics are degenerate", e.clip_layer, e.clip_channel);
                skipped.push((e.clone(), "degenerate recipient statistics".to_string()));
                continue;
            }
            slot.1.push(Injection {
                clip_channel: e.clip_channel,
                donor_layer: e.donor_layer.clone(),
                donor_channel: e.donor_channel,
                donor: donor_stats.mean_std(&e.donor_layer, e.donor_channel)?,
                recipient: clip_stats.mean_std(&e.clip_layer, e.clip_channel)?,
            });
        }
        injections.retain(|_, (_, list)| !list.is_empty());
        for (_, list) in injections.values_mut() {
            list.sort_by_key(|i| i.clip_channel);
        }
        Ok(Self {
            clip,
            donor,
            plan,
            injections,
            skipped,
        })
    }

    pub fn plan(&self) -> &SwapPlan {
        &self.plan
    }

    /// Plan entries left out at construction, with the reason.
    pub fn skipped(&self) -> &[(SwapEntry, String)] {
        &self.skipped
    }

    /// Number of recipient channels that will be overwritten.
    pub fn active_swaps(&self) -> usize {
        self.injections.values().map(|(_, l)| l.len()).sum()
    }

    pub fn injection_layers(&self) -> Vec<&str> {
        self.injections.keys().map(String::as_str).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.clip.output_dim()
    }

    /// Vanilla CLIP image embeddings.
    pub fn baseline_forward(&self, images: &[&Raster]) -> Result<Vec<Vec<f32>>> {
        self.baseline_forward_hooked(images, &mut NoHook)
    }

    /// Vanilla forward; `observer` sees every CLIP convolution output.
    pub fn baseline_forward_hooked(&self, images: &[&Raster], observer: &mut dyn ConvHook) -> Result<Vec<Vec<f32>>> {
        let pixels = self.clip.preprocessing().apply(images)?;
        rows(self.clip.forward_hooked(&pixels, observer)?)
    }

    /// CLIP embeddings with the planned channels replaced by transformed donor maps.
    pub fn surgical_forward(&self, images: &[&Raster]) -> Result<Vec<Vec<f32>>> {
        self.surgical_forward_hooked(images, &mut NoHook)
    }

    /// Surgical forward; `observer` sees every CLIP convolution output after injection.
    pub fn surgical_forward_hooked(&self, images: &[&Raster], observer: &mut dyn ConvHook) -> Result<Vec<Vec<f32>>> {
        if self.injections.is_empty() {
            return self.baseline_forward_hooked(images, observer);
        }
        let donor_maps = self.donor_activations(images)?;
        let mut payload = HashMap::new();
        for (layer, (point, list)) in &self.injections {
            payload.insert(layer.clone(), self.transformed(point, list, &donor_maps, images.len())?);
        }
        let pixels = self.clip.preprocessing().apply(images)?;
        let mut hook = InjectHook { payload, observer };
        rows(self.clip.forward_hooked(&pixels, &mut hook)?)
    }

    fn donor_activations(&self, images: &[&Raster]) -> Result<HashMap<String, Tensor>> {
        let mut wanted: Vec<&str> = self
            .injections
            .values()
            .flat_map(|(_, l)| l.iter().map(|i| i.donor_layer.as_str()))
            .collect();
        wanted.sort_unstable();
        wanted.dedup();
        let pixels = self.donor.preprocessing().apply(images)?;
        let mut hook = CaptureHook::new(wanted);
        self.donor.forward_hooked(&pixels, &mut hook)?;
        Ok(hook.take())
    }

    /// (B, n, H, W) block of transformed donor maps for one recipient layer.
    fn transformed(&self, point: &ProbePoint, list: &[Injection], donor: &HashMap<String, Tensor>, batch: usize) -> Result<Injected> {
        let target = point.spatial;
        let plane = target.0 * target.1;
        let mut values = vec![0f32; batch * list.len() * plane];
        let mut cache: HashMap<&str, (Vec<f32>, (usize, usize, usize, usize))> = HashMap::new();
        for (k, inj) in list.iter().enumerate() {
            if !cache.contains_key(inj.donor_layer.as_str()) {
                let t = donor.get(&inj.donor_layer).ok_or_else(|| {
                    XaiError::Architecture(format!("donor layer `{}` produced no output", inj.donor_layer))
                })?;
                let dims = t.dims4()?;
                cache.insert(&inj.donor_layer, (t.flatten_all()?.to_vec1::<f32>()?, dims));
            }
            let (data, (b, c, h, w)) = &cache[inj.donor_layer.as_str()];
            if *b != batch {
                return Err(XaiError::Shape(format!("donor batch {b} differs from image batch {batch}")));
            }
            for i in 0..batch {
                let start = (i * c + inj.donor_channel) * h * w;
                let map = transform_donor(&data[start..start + h * w], (*h, *w), inj.donor, inj.recipient, target)?;
                let dst = (i * list.len() + k) * plane;
                values[dst..dst + plane].copy_from_slice(&map);
            }
        }
        Ok(Injected {
            channels: list.iter().map(|i| i.clip_channel).collect(),
            spatial: target,
            values,
        })
    }
}

struct Injected {
    channels: Vec<usize>,
    spatial: (usize, usize),
    values: Vec<f32>,
}

struct InjectHook<'o> {
    payload: HashMap<String, Injected>,
    observer: &'o mut dyn ConvHook,
}

impl ConvHook for InjectHook<'_> {
    fn on_conv(&mut self, layer_id: &str, output: Tensor) -> candle_core::Result<Tensor> {
        let output = match self.payload.get(layer_id) {
            None => output,
            Some(inj) => {
                let (b, c, h, w) = output.dims4()?;
                if (h, w) != inj.spatial {
                    candle_core::bail!("`{layer_id}` is {h}x{w}, planned injections are {:?}", inj.spatial);
                }
                let plane = h * w;
                let n = inj.channels.len();
                let mut data = output.flatten_all()?.to_vec1::<f32>()?;
                for i in 0..b {
                    for (k, &ch) in inj.channels.iter().enumerate() {
                        let src = (i * n + k) * plane;
                        let dst = (i * c + ch) * plane;
                        data[dst..dst + plane].copy_from_slice(&inj.values[src..src + plane]);
                    }
                }
                Tensor::from_vec(data, (b, c, h, w), output.device())?
            }
        };
        self.observer.on_conv(layer_id, output)
    }
}

fn rows(t: Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_vec2::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{compute_score_matrix, select_swaps, SwapPolicy};
    use crate::oracle::{self, build_self_pair, build_tiny_pair};
    use crate::probes::compute_stats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, seed: u64) -> Vec<Raster> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Raster::new(28, 28, 3, (0..28 * 28 * 3).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn transform_examples() {
        let out = transform_donor(&[2.0; 4], (2, 2), (2.0, 0.5), (7.0, 3.0), (3, 3)).unwrap();
        assert!(out.iter().all(|&v| v == 7.0));
        let m = [0.5f32, -1.0, 3.0, 2.0];
        assert_eq!(transform_donor(&m, (2, 2), (0.3, 1.5), (0.3, 1.5), (2, 2)).unwrap(), m);
        assert!(transform_donor(&m, (2, 2), (0.0, 0.0), (0.0, 1.0), (2, 2)).is_err());
    }

    #[test]
    fn transform_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
            let target = (h + rng.random_range(0..4), w + rng.random_range(0..4));
            let m: Vec<f32> = (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d = (rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0));
            let r = (rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0));
            let ours = transform_donor(&m, (h, w), d, r, target).unwrap();
            let naive = oracle::naive_transform_donor(&m, (h, w), d, r, target).unwrap();
            for (a, b) in ours.iter().zip(&naive) {
                assert!((*a as f64 - b).abs() < 1e-6);
            }
        }
    }

    fn setup(pair: &oracle::TinyEncoderPair, imgs: &[Raster]) -> (ActivationStats, ActivationStats, SwapPlan) {
        let samples: Vec<(u64, &Raster)> = imgs.iter().enumerate().map(|(i, r)| (i as u64, r)).collect();
        let ds = compute_stats(&pair.donor, &samples, &pair.donor.catalog(), 4, "t").unwrap();
        let rs = compute_stats(&pair.recipient, &samples, &pair.recipient.swappable_catalog(), 4, "t").unwrap();
        let z = compute_score_matrix(&pair.donor, &pair.recipient, &ds, &rs, &samples, 3).unwrap();
        let plan = select_swaps(&z, SwapPolicy::Argmax, f64::NEG_INFINITY).unwrap();
        (ds, rs, plan)
    }

    #[test]
    fn empty_plan_is_bit_exact_baseline() {
        let pair = build_tiny_pair(0).unwrap();
        let imgs = images(3, 0);
        let (ds, rs, _) = setup(&pair, &imgs);
        let s = SurgicalEncoder::new(&pair.recipient, &pair.donor, SwapPlan::empty(), &ds, &rs).unwrap();
        let refs: Vec<&Raster> = imgs.iter().collect();
        assert_eq!(s.surgical_forward(&refs).unwrap(), s.baseline_forward(&refs).unwrap());
        let pixels = pair.recipient.preprocessing().apply(&refs).unwrap();
        let vanilla = pair.recipient.forward(&pixels).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(s.baseline_forward(&refs).unwrap(), vanilla);
    }

    #[test]
    fn full_plan_changes_embedding_and_is_deterministic() {
        let pair = build_tiny_pair(1).unwrap();
        let imgs = images(4, 1);
        let (ds, rs, plan) = setup(&pair, &imgs);
        assert_eq!(plan.len(), 4);
        let s = SurgicalEncoder::new(&pair.recipient, &pair.donor, plan, &ds, &rs).unwrap();
        let refs: Vec<&Raster> = imgs.iter().collect();
        let a = s.surgical_forward(&refs).unwrap();
        assert_eq!(a, s.surgical_forward(&refs).unwrap());
        assert_ne!(a, s.baseline_forward(&refs).unwrap());
    }

    struct Record(Vec<(String, Vec<f32>)>);

    impl ConvHook for Record {
        fn on_conv(&mut self, id: &str, out: Tensor) -> candle_core::Result<Tensor> {
            self.0.push((id.to_string(), out.flatten_all()?.to_vec1::<f32>()?));
            Ok(out)
        }
    }

    #[test]
    fn layers_before_injection_are_untouched_and_injected_channels_land() {
        let pair = build_tiny_pair(2).unwrap();
        let imgs = images(2, 2);
        let (ds, rs, plan) = setup(&pair, &imgs);
        let s = SurgicalEncoder::new(&pair.recipient, &pair.donor, plan, &ds, &rs).unwrap();
        let refs: Vec<&Raster> = imgs.iter().collect();
        let (mut base, mut surg) = (Record(Vec::new()), Record(Vec::new()));
        s.baseline_forward_hooked(&refs, &mut base).unwrap();
        s.surgical_forward_hooked(&refs, &mut surg).unwrap();
        assert_eq!(base.0[0], surg.0[0]);
        assert_ne!(base.0[1], surg.0[1]);
    }

    #[test]
    fn partial_plan_only_touches_its_channel() {
        let pair = build_tiny_pair(5).unwrap();
        let imgs = images(2, 5);
        let (ds, rs, plan) = setup(&pair, &imgs);
        let keep = plan.entries.iter().find(|e| e.clip_layer == "conv2").unwrap().clone();
        let mut small = plan.clone();
        small.entries = vec![keep.clone()];
        let s = SurgicalEncoder::new(&pair.recipient, &pair.donor, small, &ds, &rs).unwrap();
        let refs: Vec<&Raster> = imgs.iter().collect();
        let (mut base, mut surg) = (Record(Vec::new()), Record(Vec::new()));
        s.baseline_forward_hooked(&refs, &mut base).unwrap();
        s.surgical_forward_hooked(&refs, &mut surg).unwrap();
        let plane = 14 * 14;
        let (b, a) = (&base.0[1].1, &surg.0[1].1);
        for i in 0..2 {
            for ch in 0..2 {
                let r = (i * 2 + ch) * plane..(i * 2 + ch + 1) * plane;
                assert_eq!(a[r.clone()] == b[r], ch != keep.clip_channel);
            }
        }
    }

    #[test]
    fn invalid_plans_fail_at_construction() {
        let pair = build_tiny_pair(0).unwrap();
        let imgs = images(2, 0);
        let (ds, rs, plan) = setup(&pair, &imgs);
        let mut bad = plan.clone();
        bad.entries[0].clip_layer = "conv1".into();
        assert!(matches!(SurgicalEncoder::new(&pair.recipient, &pair.donor, bad, &ds, &rs), Err(XaiError::Config(_))));
        let mut bad = plan.clone();
        bad.entries[0].donor_channel = 99;
        assert!(SurgicalEncoder::new(&pair.recipient, &pair.donor, bad, &ds, &rs).is_err());
        let mut bad = plan.clone();
        let dup = bad.entries[0].clone();
        bad.entries.push(dup);
        assert!(SurgicalEncoder::new(&pair.recipient, &pair.donor, bad, &ds, &rs).is_err());
    }

    #[test]
    fn degenerate_entries_are_skipped() {
        let pair = build_tiny_pair(0).unwrap();
        let imgs = images(2, 0);
        let (ds, mut rs, plan) = setup(&pair, &imgs);
        let e = plan.entries[0].clone();
        let layer = rs.layers.iter_mut().find(|l| l.layer_id == e.clip_layer).unwrap();
        layer.channels[e.clip_channel].m2 = 0.0;
        let s = SurgicalEncoder::new(&pair.recipient, &pair.donor, plan.clone(), &ds, &rs).unwrap();
        assert_eq!(s.skipped().len(), 1);
        assert_eq!(s.active_swaps(), plan.len() - 1);
    }

    #[test]
    fn self_surgery_keeps_embedding() {
        let pair = build_self_pair(0).unwrap();
        let imgs = images(6, 9);
        let (ds, rs, plan) = setup(&pair, &imgs);
        for e in &plan.entries {
            assert_eq!((e.clip_layer.as_str(), e.clip_channel), (e.donor_layer.as_str(), e.donor_channel));
            assert!(e.score >= 0.999);
        }
        let s = SurgicalEncoder::new(&pair.recipient, &pair.donor, plan, &ds, &rs).unwrap();
        let refs: Vec<&Raster> = imgs.iter().collect();
        let a = s.surgical_forward(&refs).unwrap();
        let b = s.baseline_forward(&refs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-4);
            }
        }
    }
}
