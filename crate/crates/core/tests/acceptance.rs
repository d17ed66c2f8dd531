//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 and 3 read the artifacts of a finished default run from
//! `XAI_RUN_DIR` (default `<workspace>/runs/default`); produce it with
//! `xai run --set out_root=runs`. The remaining criteria compute their
//! evidence here.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use caption_xai::attribution::{cosine_similarity, parse_records, ConceptReport};
use caption_xai::classifier::{BackboneSpec, Classifier, Metrics};
use caption_xai::dataset::Split;
use caption_xai::matcher::{
    compute_score_matrix, correlation_block, resize_bilinear, select_swaps, standardize, ScoreMatrix, SwapPlan,
    SwapPolicy,
};
use caption_xai::nets::clip::{ClipConfig, ClipModel};
use caption_xai::nets::{total_channels, ImageEncoder};
use caption_xai::oracle::{build_self_pair, naive_bilinear, naive_correlation, naive_standardize, naive_transform_donor};
use caption_xai::pipeline::{run_end_to_end, RunConfig};
use caption_xai::probes::{
    compute_stats, coverage_ratio, enumerate_probe_points, format_percent, ActivationStats, RunningMoments,
    CLIP_SWAPPABLE_CHANNELS, STANDALONE_CHANNELS,
};
use caption_xai::raster::Raster;
use caption_xai::surgeon::{transform_donor, SurgicalEncoder};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run_dir() -> PathBuf {
    std::env::var_os("XAI_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../runs/default")))
}

fn random_images(n: usize, size: usize, seed: u64) -> Vec<Raster> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Raster::new(size, size, 3, (0..size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap())
        .collect()
}

fn load_report(variant: &str) -> Result<ConceptReport, String> {
    let p = run_dir().join(variant).join("report.json");
    ConceptReport::load(&p).map_err(|e| format!("no finished run at {}: {e}", p.display()))
}

fn load_metrics(variant: &str) -> Result<Vec<Metrics>, String> {
    let p = run_dir().join(variant).join("metrics.json");
    let text = std::fs::read_to_string(&p).map_err(|e| format!("no finished run at {}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn dominance_flip() -> Outcome {
    let biased = load_report("biased")?;
    let gray = load_report("grayscale")?;
    let detail = format!(
        "biased P(shape)={:.3} P(color)={:.3}; grayscale P(shape)={:.3} P(color)={:.3}; N={}/{}",
        biased.p_shape, biased.p_color, gray.p_shape, gray.p_color, biased.n, gray.n
    );
    check(biased.n == 500 && gray.n == 500, format!("expected 500 real-world images each; {detail}"))?;
    check(biased.p_color > biased.p_shape, format!("biased model is not color-dominant; {detail}"))?;
    check(gray.p_shape > gray.p_color, format!("grayscale model is not shape-dominant; {detail}"))?;
    let margin = (biased.p_color - biased.p_shape).min(gray.p_shape - gray.p_color);
    Ok(format!("{detail}; smallest margin {:.1} pp", margin * 100.0))
}

fn channel_accounting() -> Outcome {
    let model = Classifier::new(BackboneSpec::resnet50(), 0).map_err(|e| e.to_string())?;
    let s = total_channels(&enumerate_probe_points(&model, false).map_err(|e| e.to_string())?);
    let clip = ClipModel::load(ClipConfig::rn50(), None, 0).map_err(|e| e.to_string())?;
    let c = total_channels(&enumerate_probe_points(&clip.visual, true).map_err(|e| e.to_string())?);
    check(s == STANDALONE_CHANNELS, format!("standalone catalog has {s} channels"))?;
    check(c == CLIP_SWAPPABLE_CHANNELS, format!("CLIP swappable catalog has {c} channels"))?;
    let pct = format_percent(coverage_ratio(c, s));
    check(pct == "16.9%", format!("coverage printed as {pct}"))?;
    let z_path = run_dir().join("biased").join("scores.zmat");
    let shape = if z_path.exists() {
        ScoreMatrix::read(&z_path).map_err(|e| e.to_string())?.shape()
    } else {
        let img = random_images(1, 28, 11);
        let samples = [(0u64, &img[0])];
        let ds = compute_stats(&model, &samples, &model.catalog(), 1, "one").map_err(|e| e.to_string())?;
        let cs = compute_stats(&clip.visual, &samples, &clip.visual.swappable_catalog(), 1, "one").map_err(|e| e.to_string())?;
        compute_score_matrix(&model, &clip.visual, &ds, &cs, &samples, 1).map_err(|e| e.to_string())?.shape()
    };
    check(shape == (22720, 3840), format!("score matrix shape {shape:?}"))?;
    Ok(format!("{s} standalone, {c} CLIP-swappable, Z {shape:?}, coverage {c}/{s} = {pct}"))
}

fn classifier_behavior() -> Outcome {
    let b = load_metrics("biased")?;
    let g = load_metrics("grayscale")?;
    let acc = |m: &[Metrics], s: Split| m.iter().find(|x| x.split == s).map(|x| x.accuracy).ok_or("split missing");
    let (bt, br) = (acc(&b, Split::Test)?, acc(&b, Split::RealWorld)?);
    let (gt, gr) = (acc(&g, Split::Test)?, acc(&g, Split::RealWorld)?);
    let detail = format!("biased test {bt:.4}, real_world {br:.4}; grayscale test {gt:.4}, real_world {gr:.4}");
    check(bt >= 0.99, format!("biased test accuracy below 0.99; {detail}"))?;
    check((0.35..=0.65).contains(&br), format!("biased real-world accuracy outside [0.35, 0.65]; {detail}"))?;
    check(gt >= 0.95 && gr >= 0.95, format!("grayscale accuracy below 0.95; {detail}"))?;
    Ok(detail)
}

fn self_surgery() -> Outcome {
    let pair = build_self_pair(21).map_err(|e| e.to_string())?;
    let imgs = random_images(8, 28, 21);
    let samples: Vec<(u64, &Raster)> = imgs.iter().enumerate().map(|(i, r)| (i as u64, r)).collect();
    let e = |e: caption_xai::XaiError| e.to_string();
    let swappable = pair.recipient.swappable_catalog();
    let ds = compute_stats(&pair.donor, &samples, &pair.donor.catalog(), 4, "self").map_err(e)?;
    let rs = compute_stats(&pair.recipient, &samples, &swappable, 4, "self").map_err(e)?;
    let z = compute_score_matrix(&pair.donor, &pair.recipient, &ds, &rs, &samples, 4).map_err(e)?;
    let plan = select_swaps(&z, SwapPolicy::Argmax, f64::NEG_INFINITY).map_err(e)?;
    check(plan.len() == total_channels(&swappable), format!("plan has {} swaps", plan.len()))?;
    let mut min_score = f32::INFINITY;
    for s in &plan.entries {
        check(
            s.donor_layer == s.clip_layer && s.donor_channel == s.clip_channel,
            format!("{}:{} matched {}:{}", s.clip_layer, s.clip_channel, s.donor_layer, s.donor_channel),
        )?;
        min_score = min_score.min(s.score);
    }
    check(min_score >= 0.999, format!("smallest self score {min_score}"))?;
    let surgical = SurgicalEncoder::new(&pair.recipient, &pair.donor, plan, &ds, &rs).map_err(e)?;
    let refs: Vec<&Raster> = imgs.iter().collect();
    let base = surgical.baseline_forward(&refs).map_err(e)?;
    let swapped = surgical.surgical_forward(&refs).map_err(e)?;
    let mut min_cos = f64::INFINITY;
    for (a, b) in base.iter().zip(&swapped) {
        min_cos = min_cos.min(cosine_similarity(a, b).map_err(e)?);
    }
    check(min_cos >= 0.999, format!("self-swap embedding cosine {min_cos}"))?;
    Ok(format!("every channel maps to itself, min Z {min_score:.6}, min embedding cosine {min_cos:.6}"))
}

fn kernel_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0f64; 4];
    let mut worst_round_trip = 0f64;
    let instances = 120;
    for _ in 0..instances {
        let (b, h, w) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        let n = b * h * w;
        let a: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sa = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
        let sc = (rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));

        let fast = standardize(&a, sa.0, sa.1).map_err(|e| e.to_string())?;
        for (x, y) in fast.iter().zip(naive_standardize(&a, sa.0, sa.1)) {
            worst[0] = worst[0].max((*x as f64 - y).abs());
        }

        let na = standardize(&a, sa.0, sa.1).map_err(|e| e.to_string())?;
        let nc = standardize(&c, sc.0, sc.1).map_err(|e| e.to_string())?;
        let z = correlation_block(&na, &nc, 1, 1, n).map_err(|e| e.to_string())?[0];
        let oracle = naive_correlation(&a, &c, (b, h, w), sa, sc).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max((z as f64 - oracle).abs());

        let map = &a[..h * w];
        let target = (rng.random_range(1..12), rng.random_range(1..12));
        let fast = transform_donor(map, (h, w), sa, sc, target).map_err(|e| e.to_string())?;
        let slow = naive_transform_donor(map, (h, w), sa, sc, target).map_err(|e| e.to_string())?;
        for (x, y) in fast.iter().zip(&slow) {
            worst[2] = worst[2].max((*x as f64 - y).abs());
        }

        let fast = resize_bilinear(map, (h, w), target).map_err(|e| e.to_string())?;
        let slow = naive_bilinear(map, (h, w), target).map_err(|e| e.to_string())?;
        for (x, y) in fast.iter().zip(&slow) {
            worst[3] = worst[3].max((*x as f64 - y).abs());
        }

        let n_map = standardize(map, sa.0, sa.1).map_err(|e| e.to_string())?;
        let back = transform_donor(&n_map, (h, w), (0.0, 1.0), sa, (h, w)).map_err(|e| e.to_string())?;
        for (x, y) in back.iter().zip(map) {
            worst_round_trip = worst_round_trip.max(((x - y).abs() / y.abs().max(1e-3)) as f64);
        }
    }
    let names = ["standardize", "correlation", "donor transform", "bilinear"];
    for (name, w) in names.iter().zip(worst) {
        check(w <= 1e-6, format!("{name} differs from its oracle by {w:e}"))?;
    }
    check(worst_round_trip <= 1e-5, format!("round trip relative error {worst_round_trip:e}"))?;
    Ok(format!(
        "{instances} instances; max abs error {:.1e}/{:.1e}/{:.1e}/{:.1e}; round trip {:.1e} relative",
        worst[0], worst[1], worst[2], worst[3], worst_round_trip
    ))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0f64;
    for t in 0..50 {
        let n = rng.random_range(2..3000);
        let offset = rng.random_range(-100.0..100.0);
        let scale = rng.random_range(0.01..10.0);
        let xs: Vec<f32> = (0..n).map(|_| offset + scale * rng.random_range(-1.0f32..1.0)).collect();
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let std = (xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt();

        let mut welford = RunningMoments::default();
        for &x in &xs {
            welford.push(x as f64);
        }
        worst = worst.max(rel(welford.mean, mean)).max(rel(welford.std(), std));

        let cut = rng.random_range(1..n);
        let (mut left, mut right) = (RunningMoments::default(), RunningMoments::default());
        left.push_slice(&xs[..cut]);
        right.push_slice(&xs[cut..]);
        let merged = left.merge(&right);
        worst = worst.max(rel(merged.mean, welford.mean)).max(rel(merged.std(), welford.std()));
        check(merged.count == n as u64, format!("stream {t}: merged count {}", merged.count))?;
    }
    let pair = build_self_pair(2).map_err(|e| e.to_string())?;
    let imgs = random_images(6, 28, 2);
    let samples: Vec<(u64, &Raster)> = imgs.iter().enumerate().map(|(i, r)| (i as u64, r)).collect();
    let pts = pair.donor.catalog();
    let whole = compute_stats(&pair.donor, &samples, &pts, 6, "s").map_err(|e| e.to_string())?;
    let a = compute_stats(&pair.donor, &samples[..2], &pts, 2, "s").map_err(|e| e.to_string())?;
    let b = compute_stats(&pair.donor, &samples[2..], &pts, 3, "s").map_err(|e| e.to_string())?;
    let merged: ActivationStats = a.merge(&b).map_err(|e| e.to_string())?;
    for p in &pts {
        for ch in 0..p.channel_count {
            let (m1, s1) = whole.mean_std(&p.layer_id, ch).map_err(|e| e.to_string())?;
            let (m2, s2) = merged.mean_std(&p.layer_id, ch).map_err(|e| e.to_string())?;
            worst = worst.max(rel(m2, m1)).max(rel(s2, s1));
        }
    }
    check(worst <= 1e-6, format!("worst relative error {worst:e}"))?;
    Ok(format!("50 random streams and one sharded capture; worst relative error {worst:.1e}"))
}

fn tiny_run() -> Result<(tempfile::TempDir, Vec<ConceptReport>, PathBuf), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig { out_root: dir.path().to_path_buf(), ..RunConfig::tiny() };
    let summary = run_end_to_end(&cfg).map_err(|e| e.to_string())?;
    let reports = summary.variants.iter().map(|v| v.report.clone()).collect();
    Ok((dir, reports, summary.run_dir))
}

fn similarity_contract() -> Outcome {
    let (_dir, _, run) = tiny_run()?;
    let mut count = 0;
    let mut runs = vec![run];
    if run_dir().join("biased").join("records.tsv").exists() {
        runs.push(run_dir());
    }
    for r in &runs {
        for v in ["biased", "grayscale"] {
            let text = std::fs::read_to_string(r.join(v).join("records.tsv")).map_err(|e| e.to_string())?;
            for rec in parse_records(&text).map_err(|e| e.to_string())? {
                for c in rec.c_before.iter().chain(&rec.c_after) {
                    check((-1.0..=1.0).contains(c), format!("sample {} has c = {c}", rec.sample_id))?;
                    count += 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for _ in 0..100 {
        let v: Vec<f32> = (0..rng.random_range(1..1024)).map(|_| rng.random_range(-5.0..5.0)).collect();
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        worst = worst.max((cosine_similarity(&v, &v).map_err(|e| e.to_string())? - 1.0).abs());
    }
    check(worst <= 1e-6, format!("self cosine off by {worst:e}"))?;
    let pair = build_self_pair(4).map_err(|e| e.to_string())?;
    let imgs = random_images(4, 28, 4);
    let samples: Vec<(u64, &Raster)> = imgs.iter().enumerate().map(|(i, r)| (i as u64, r)).collect();
    let ds = compute_stats(&pair.donor, &samples, &pair.donor.catalog(), 4, "e").map_err(|e| e.to_string())?;
    let rs = compute_stats(&pair.recipient, &samples, &pair.recipient.swappable_catalog(), 4, "e").map_err(|e| e.to_string())?;
    let s = SurgicalEncoder::new(&pair.recipient, &pair.donor, SwapPlan::empty(), &ds, &rs).map_err(|e| e.to_string())?;
    let refs: Vec<&Raster> = imgs.iter().collect();
    let base = s.baseline_forward(&refs).map_err(|e| e.to_string())?;
    let empty = s.surgical_forward(&refs).map_err(|e| e.to_string())?;
    check(
        base.iter().flatten().map(|x| x.to_bits()).eq(empty.iter().flatten().map(|x| x.to_bits())),
        "empty plan changed the embedding bits",
    )?;
    Ok(format!("{count} similarities in [-1, 1]; self cosine within {worst:.1e}; empty plan bit-exact"))
}

fn report_integrity() -> Outcome {
    let (_dir, mut reports, _) = tiny_run()?;
    for v in ["biased", "grayscale"] {
        if let Ok(r) = load_report(v) {
            reports.push(r);
        }
    }
    for r in &reports {
        let c = &r.counts;
        check(c.total() == r.n, format!("{}: counts sum to {}, N = {}", r.model_variant, c.total(), r.n))?;
        check((r.p_shape + r.p_color - 1.0).abs() < 1e-12, format!("{}: probabilities sum to {}", r.model_variant, r.p_shape + r.p_color))?;
        if r.model_variant == "grayscale" {
            check(r.counts.correct_color == 0, "grayscale run has a correct color outcome")?;
            check(
                r.any_color == r.n - (c.correct_shape + c.incorrect_shape),
                format!("any_color {} vs N - shape {}", r.any_color, r.n - c.shape()),
            )?;
        }
    }
    Ok(format!("{} reports consistent", reports.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("dominance flip", dominance_flip),
        ("channel accounting", channel_accounting),
        ("classifier behavior", classifier_behavior),
        ("self-surgery consistency", self_surgery),
        ("kernel/oracle equivalence", kernel_oracles),
        ("statistics correctness", statistics),
        ("similarity contract", similarity_contract),
        ("report integrity", report_integrity),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != k + 1) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL: {why}", k + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
