//! End-to-end orchestration: data, training, evaluation, statistics, matching,
//! planning and reporting for each dataset variant, then a comparison chart.
//!
//! Every stage writes its artifacts under `<out_root>/<run_id>/` together with a
//! stamp holding the hash of its inputs. A stage whose stamp matches and whose
//! outputs exist is skipped, so reruns only redo what changed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    aggregate, records_tsv, render_chart, render_report, score_samples, CaptionEmbeddings, CaptionRole, CaptionSet,
    ConceptReport, ReportMeta,
};
use crate::classifier::{evaluate, finetune, BackboneSpec, CheckpointRef, Classifier, Hyperparams, Metrics};
use crate::dataset::{build_to_dir, sample_order_fingerprint, DatasetManifest, DigitSource, Split, SplitSizes, Variant};
use crate::error::{Result, XaiError};
use crate::fingerprint::{derive_seed_str, sha256_hex};
use crate::matcher::{compute_score_matrix, select_swaps, ScoreMatrix, SwapPlan, SwapPolicy};
use crate::nets::clip::{ClipConfig, ClipModel};
use crate::nets::resnet::ResNetConfig;
use crate::nets::tiny::{HashedTextEncoder, TinyConfig, TinyEncoder};
use crate::nets::store::SeededStore;
use crate::nets::{EncoderRole, ImageEncoder, TextEncoder};
use crate::probes::{compute_stats, enumerate_probe_points, ActivationStats};
use crate::raster::Raster;
use crate::surgeon::SurgicalEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Resnet50,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipKind {
    Rn50,
    Tiny,
}

macro_rules! kind_names {
    ($t:ident { $($v:ident => $s:literal),+ }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($t::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = XaiError;
            fn from_str(s: &str) -> Result<Self> {
                match s { $($s => Ok($t::$v),)+ other => Err(XaiError::Config(format!("unknown {} `{other}`", stringify!($t)))) }
            }
        }
    };
}

kind_names!(BackboneKind { Resnet50 => "resnet50", Tiny => "tiny" });
kind_names!(ClipKind { Rn50 => "rn50", Tiny => "tiny" });

/// Backbone of the tiny smoke configuration.
pub fn tiny_backbone() -> TinyConfig {
    TinyConfig {
        role: EncoderRole::Standalone,
        channels: vec![8, 16, 16],
        strides: vec![1, 2, 2],
        swappable: vec![false; 3],
        input_size: 28,
        output_dim: 0,
    }
}

/// Image tower of the tiny smoke configuration.
pub fn tiny_clip() -> TinyConfig {
    TinyConfig {
        role: EncoderRole::Clip,
        channels: vec![8, 8, 8],
        strides: vec![2, 1, 2],
        swappable: vec![false, true, true],
        input_size: 28,
        output_dim: 16,
    }
}

/// Flat `key = value` run configuration; every key has a default.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub out_root: PathBuf,
    pub device: String,
    pub variants: Vec<Variant>,
    pub data_seed: u64,
    pub sizes: SplitSizes,
    pub backbone: BackboneKind,
    pub pretrained_backbone: Option<PathBuf>,
    pub train: Hyperparams,
    pub eval_batch: usize,
    pub clip: ClipKind,
    pub clip_weights: Option<PathBuf>,
    pub clip_seed: u64,
    pub match_subset: usize,
    pub match_seed: u64,
    pub match_batch: usize,
    pub policy: SwapPolicy,
    pub threshold: f64,
    pub report_split: Split,
    pub report_batch: usize,
    pub captions: CaptionSet,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            out_root: PathBuf::from("runs"),
            device: "cpu".into(),
            variants: vec![Variant::Biased, Variant::Grayscale],
            data_seed: 0,
            sizes: SplitSizes::default(),
            backbone: BackboneKind::Resnet50,
            pretrained_backbone: None,
            train: Hyperparams::default(),
            eval_batch: 16,
            clip: ClipKind::Rn50,
            clip_weights: None,
            clip_seed: 0,
            match_subset: 256,
            match_seed: 0,
            match_batch: 8,
            policy: SwapPolicy::Argmax,
            threshold: f64::NEG_INFINITY,
            report_split: Split::RealWorld,
            report_batch: 8,
            captions: CaptionSet::default(),
        }
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Small encoders and splits; finishes in well under a minute on one core.
    pub fn tiny() -> Self {
        Self {
            run_id: "tiny".into(),
            sizes: SplitSizes { train: 96, val: 32, test: 32, real_world: 64 },
            backbone: BackboneKind::Tiny,
            clip: ClipKind::Tiny,
            train: Hyperparams { epochs: 4, batch_size: 16, lr: 1e-2, ..Hyperparams::default() },
            match_subset: 32,
            ..Self::default()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root.join(&self.run_id)
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        match self.backbone {
            BackboneKind::Resnet50 => BackboneSpec::Resnet(ResNetConfig::resnet50()),
            BackboneKind::Tiny => BackboneSpec::Tiny(tiny_backbone()),
        }
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| XaiError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| XaiError::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| XaiError::MissingSource(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| XaiError::Config(format!("`{key}` cannot be `{v}`")))
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "run_id" => self.run_id = value.to_string(),
            "out_root" => self.out_root = PathBuf::from(value),
            "device" => self.device = value.to_string(),
            "variants" => {
                self.variants = value.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
            }
            "data_seed" => self.data_seed = num(key, value)?,
            "train_size" => self.sizes.train = num(key, value)?,
            "val_size" => self.sizes.val = num(key, value)?,
            "test_size" => self.sizes.test = num(key, value)?,
            "real_world_size" => self.sizes.real_world = num(key, value)?,
            "backbone" => self.backbone = value.parse()?,
            "pretrained_backbone" => self.pretrained_backbone = path(value),
            "train_seed" => self.train.seed = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "eval_batch" => self.eval_batch = num(key, value)?,
            "clip" => self.clip = value.parse()?,
            "clip_weights" => self.clip_weights = path(value),
            "clip_seed" => self.clip_seed = num(key, value)?,
            "match_subset" => self.match_subset = num(key, value)?,
            "match_seed" => self.match_seed = num(key, value)?,
            "match_batch" => self.match_batch = num(key, value)?,
            "policy" => self.policy = value.parse()?,
            "threshold" => {
                self.threshold = match value {
                    "-inf" => f64::NEG_INFINITY,
                    v => num(key, v)?,
                }
            }
            "report_split" => self.report_split = value.parse()?,
            "report_batch" => self.report_batch = num(key, value)?,
            _ => match key.strip_prefix("caption.") {
                Some(role) => self.captions.set(role.parse::<CaptionRole>()?, value),
                None => return Err(XaiError::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(XaiError::Config(format!("device `{}` is not available; use cpu", self.device)));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(XaiError::Config(format!("run_id `{}` must be a plain name", self.run_id)));
        }
        if self.variants.is_empty() || self.variants.contains(&Variant::RealWorld) {
            return Err(XaiError::Config("variants must be a non-empty list of biased and grayscale".into()));
        }
        let positive = [
            ("batch_size", self.train.batch_size),
            ("eval_batch", self.eval_batch),
            ("match_subset", self.match_subset),
            ("match_batch", self.match_batch),
            ("report_batch", self.report_batch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(XaiError::Config(format!("`{k}` must be positive")));
        }
        if self.match_subset > self.sizes.train {
            return Err(XaiError::Config(format!(
                "match_subset {} exceeds the {} training images",
                self.match_subset, self.sizes.train
            )));
        }
        if self.threshold.is_nan() {
            return Err(XaiError::Config("threshold is NaN".into()));
        }
        self.captions.validate()
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let variants: Vec<&str> = self.variants.iter().map(|v| v.as_str()).collect();
        let threshold = if self.threshold == f64::NEG_INFINITY { "-inf".to_string() } else { self.threshold.to_string() };
        let mut pairs = vec![
            ("run_id", self.run_id.clone()),
            ("out_root", self.out_root.display().to_string()),
            ("device", self.device.clone()),
            ("variants", variants.join(",")),
            ("data_seed", self.data_seed.to_string()),
            ("train_size", self.sizes.train.to_string()),
            ("val_size", self.sizes.val.to_string()),
            ("test_size", self.sizes.test.to_string()),
            ("real_world_size", self.sizes.real_world.to_string()),
            ("backbone", self.backbone.to_string()),
            ("pretrained_backbone", opt_path(&self.pretrained_backbone)),
            ("train_seed", self.train.seed.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("lr", self.train.lr.to_string()),
            ("weight_decay", self.train.weight_decay.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("clip", self.clip.to_string()),
            ("clip_weights", opt_path(&self.clip_weights)),
            ("clip_seed", self.clip_seed.to_string()),
            ("match_subset", self.match_subset.to_string()),
            ("match_seed", self.match_seed.to_string()),
            ("match_batch", self.match_batch.to_string()),
            ("policy", self.policy.to_string()),
            ("threshold", threshold),
            ("report_split", self.report_split.to_string()),
            ("report_batch", self.report_batch.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect::<Vec<_>>();
        for role in CaptionRole::ALL {
            pairs.push((format!("caption.{role}"), self.captions.get(role).to_string()));
        }
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash of every key except `out_root`, which moves artifacts without changing them.
    pub fn fingerprint(&self) -> String {
        let text: String = self.to_text().lines().filter(|l| !l.starts_with("out_root ")).map(|l| format!("{l}\n")).collect();
        sha256_hex(text)
    }
}

/// The CLIP side of a run: image tower, text tower and an identity string.
pub enum ClipBackend {
    Full(Box<ClipModel>),
    Tiny { image: TinyEncoder, text: HashedTextEncoder },
}

impl ClipBackend {
    pub fn build(config: &RunConfig) -> Result<Self> {
        let seed = derive_seed_str(config.clip_seed, "clip");
        match config.clip {
            ClipKind::Rn50 => {
                let m = ClipModel::load(ClipConfig::rn50(), config.clip_weights.as_deref(), seed)?;
                if !m.is_pretrained() {
                    log::warn!("no CLIP weights given; using seeded random parameters");
                }
                Ok(ClipBackend::Full(Box::new(m)))
            }
            ClipKind::Tiny => {
                let cfg = tiny_clip();
                let dim = cfg.output_dim;
                let image = TinyEncoder::new(cfg, SeededStore::new(seed).builder())?;
                Ok(ClipBackend::Tiny { image, text: HashedTextEncoder { dim, seed } })
            }
        }
    }

    pub fn image(&self) -> &dyn ImageEncoder {
        match self {
            ClipBackend::Full(m) => &m.visual,
            ClipBackend::Tiny { image, .. } => image,
        }
    }

    pub fn text(&self) -> &dyn TextEncoder {
        match self {
            ClipBackend::Full(m) => &m.text,
            ClipBackend::Tiny { text, .. } => text,
        }
    }

    /// Architecture plus weight source.
    pub fn identity(&self, config: &RunConfig) -> String {
        let weights = match &config.clip_weights {
            Some(p) => format!("file:{}", p.display()),
            None => format!("seed:{}", config.clip_seed),
        };
        format!("{}|{weights}", self.image().architecture())
    }
}

/// Per-variant outcome of a run.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub dir: PathBuf,
    pub metrics: Vec<Metrics>,
    pub report: ConceptReport,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub variants: Vec<VariantResult>,
    pub chart: PathBuf,
    /// Stages that actually executed, as `variant/stage`.
    pub executed: Vec<String>,
}

pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";
pub const CHART_FILE: &str = "concepts.png";

struct Stages {
    executed: Vec<String>,
}

impl Stages {
    /// Runs `work` unless the stamp in `dir` already holds `key` and all `outputs` exist.
    fn run(
        &mut self,
        name: &str,
        dir: &Path,
        key: &str,
        outputs: &[PathBuf],
        work: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let stamp = dir.join(format!(".{}.stamp", name.replace('/', "_")));
        let fresh = fs::read_to_string(&stamp).map(|s| s == key).unwrap_or(false);
        if fresh && outputs.iter().all(|p| p.exists()) {
            log::info!("{name}: up to date");
            return Ok(());
        }
        log::info!("{name}: running");
        let wrap = |e: XaiError| XaiError::Stage { stage: format!("{name} (inputs {})", &key[..16]), source: Box::new(e) };
        let _ = fs::remove_file(&stamp);
        fs::create_dir_all(dir).map_err(|e| wrap(e.into()))?;
        work().map_err(wrap)?;
        fs::write(&stamp, key)?;
        self.executed.push(name.to_string());
        Ok(())
    }
}

fn key(parts: &[&str]) -> String {
    sha256_hex(parts.join("\u{1f}"))
}

/// Deterministic subset of the training split used for statistics and matching.
pub fn matching_subset(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<Vec<u64>> {
    let mut ids: Vec<u64> = manifest.entries_for(Split::Train).map(|e| e.sample_id).collect();
    if n > ids.len() {
        return Err(XaiError::Config(format!("subset of {n} from {} training images", ids.len())));
    }
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed_str(seed, "match-subset")));
    ids.truncate(n);
    Ok(ids)
}

/// Runs every stage for every configured variant.
pub fn run_end_to_end(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let run_dir = config.run_dir();
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("run.cfg"), config.to_text())?;
    let mut stages = Stages { executed: Vec::new() };
    let source = DigitSource::bundled()?;
    let mut clip: Option<ClipBackend> = None;
    let mut results = Vec::new();
    for &variant in &config.variants {
        results.push(run_variant(config, variant, &source, &mut clip, &mut stages)?);
    }
    let reports: Vec<ConceptReport> = results.iter().map(|r| r.report.clone()).collect();
    let chart = run_dir.join(CHART_FILE);
    render_chart(&reports, &chart)?;
    Ok(RunSummary { run_dir, variants: results, chart, executed: stages.executed })
}

fn run_variant(
    config: &RunConfig,
    variant: Variant,
    source: &DigitSource,
    clip: &mut Option<ClipBackend>,
    stages: &mut Stages,
) -> Result<VariantResult> {
    let dir = config.run_dir().join(variant.as_str());
    let data_dir = dir.join("data");
    let cfg_fp = config.fingerprint();

    let data_key = key(&[
        "data",
        variant.as_str(),
        &config.data_seed.to_string(),
        &serde_json::to_string(&config.sizes)?,
        source.checksum(),
    ]);
    stages.run(&format!("{variant}/data"), &dir, &data_key, &[data_dir.join(crate::dataset::METADATA_FILE)], || {
        if data_dir.exists() {
            fs::remove_dir_all(&data_dir)?;
        }
        build_to_dir(source, variant, config.data_seed, config.sizes, &data_dir).map(|_| ())
    })?;
    let manifest = DatasetManifest::load(&data_dir)?;

    let spec = config.backbone_spec();
    let ckpt_path = dir.join("classifier.safetensors");
    let train_key = key(&[
        "train",
        &manifest.content_fingerprint,
        &serde_json::to_string(&spec)?,
        &serde_json::to_string(&config.train)?,
        &opt_path(&config.pretrained_backbone),
    ]);
    stages.run(&format!("{variant}/train"), &dir, &train_key, &[ckpt_path.clone(), CheckpointRef::sidecar(&ckpt_path)], || {
        finetune(spec.clone(), &manifest, &data_dir, &config.train, config.pretrained_backbone.as_deref(), &ckpt_path)
            .map(|_| ())
    })?;
    let ckpt = CheckpointRef::load(&ckpt_path)?;
    let model = ckpt.open()?;

    let metrics_path = dir.join(METRICS_FILE);
    let eval_key = key(&["eval", &ckpt.weights_fingerprint, &manifest.content_fingerprint]);
    stages.run(&format!("{variant}/eval"), &dir, &eval_key, &[metrics_path.clone()], || {
        let m: Vec<Metrics> = [Split::Test, Split::RealWorld]
            .into_iter()
            .map(|s| evaluate(&model, &ckpt, &manifest, &data_dir, s, config.eval_batch))
            .collect::<Result<_>>()?;
        fs::write(&metrics_path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    })?;
    let metrics: Vec<Metrics> = serde_json::from_str(&fs::read_to_string(&metrics_path)?)?;

    if clip.is_none() {
        *clip = Some(ClipBackend::build(config)?);
    }
    let clip = clip.as_ref().expect("built above");
    let clip_id = clip.identity(config);

    let subset_ids = matching_subset(&manifest, config.match_subset, config.match_seed)?;
    let subset_fp = sample_order_fingerprint(&subset_ids);
    let train_samples = manifest.load_split(&data_dir, Split::Train)?;
    let by_id: BTreeMap<u64, &Raster> = train_samples.iter().map(|s| (s.sample_id, &s.image)).collect();
    let subset: Vec<(u64, &Raster)> = subset_ids.iter().map(|id| (*id, by_id[id])).collect();

    let donor_stats_path = dir.join("stats_standalone.tsv");
    let clip_stats_path = dir.join("stats_clip.tsv");
    let stats_key = key(&["stats", &ckpt.weights_fingerprint, &clip_id, &manifest.content_fingerprint, &subset_fp]);
    stages.run(&format!("{variant}/stats"), &dir, &stats_key, &[donor_stats_path.clone(), clip_stats_path.clone()], || {
        let source_fp = format!("{}:{subset_fp}", manifest.content_fingerprint);
        let donor_points = enumerate_probe_points(&model, false)?;
        compute_stats(&model, &subset, &donor_points, config.match_batch, &source_fp)?.save(&donor_stats_path)?;
        let clip_points = enumerate_probe_points(clip.image(), true)?;
        compute_stats(clip.image(), &subset, &clip_points, config.match_batch, &source_fp)?.save(&clip_stats_path)
    })?;
    let donor_stats = ActivationStats::load(&donor_stats_path)?;
    let clip_stats = ActivationStats::load(&clip_stats_path)?;

    let scores_path = dir.join("scores.zmat");
    let match_key = key(&["match", &donor_stats.fingerprint(), &clip_stats.fingerprint(), &subset_fp, &clip_id, &ckpt.weights_fingerprint]);
    stages.run(&format!("{variant}/match"), &dir, &match_key, &[scores_path.clone()], || {
        compute_score_matrix(&model, clip.image(), &donor_stats, &clip_stats, &subset, config.match_batch)?.write(&scores_path)
    })?;

    let plan_path = dir.join("plan.tsv");
    let threshold = config.threshold.to_string();
    let plan_key = key(&["plan", &match_key, &config.policy.to_string(), &threshold]);
    stages.run(&format!("{variant}/plan"), &dir, &plan_key, &[plan_path.clone()], || {
        let z = ScoreMatrix::read(&scores_path)?;
        select_swaps(&z, config.policy, config.threshold)?.save(&plan_path)
    })?;
    let plan = SwapPlan::load(&plan_path)?;

    let report_path = dir.join(REPORT_FILE);
    let records_path = dir.join("records.tsv");
    let report_key = key(&[
        "report",
        &plan.fingerprint(),
        &donor_stats.fingerprint(),
        &clip_stats.fingerprint(),
        &manifest.content_fingerprint,
        &config.captions.fingerprint(),
        &clip_id,
        &ckpt.weights_fingerprint,
        config.report_split.as_str(),
        &cfg_fp,
    ]);
    stages.run(&format!("{variant}/report"), &dir, &report_key, &[report_path.clone(), records_path.clone()], || {
        let samples = manifest.load_split(&data_dir, config.report_split)?;
        let captions = CaptionEmbeddings::embed(&config.captions, clip.text())?;
        let surgical = SurgicalEncoder::new(clip.image(), &model, plan.clone(), &donor_stats, &clip_stats)?;
        let records = score_samples(&samples, &captions, &surgical, config.report_batch)?;
        fs::write(&records_path, records_tsv(&records))?;
        let provenance = BTreeMap::from([
            ("config".to_string(), cfg_fp.clone()),
            ("dataset".to_string(), manifest.content_fingerprint.clone()),
            ("checkpoint".to_string(), ckpt.weights_fingerprint.clone()),
            ("stats_standalone".to_string(), donor_stats.fingerprint()),
            ("stats_clip".to_string(), clip_stats.fingerprint()),
            ("match_subset".to_string(), subset_fp.clone()),
            ("clip".to_string(), clip_id.clone()),
            ("report_split".to_string(), config.report_split.to_string()),
            ("active_swaps".to_string(), surgical.active_swaps().to_string()),
        ]);
        let meta = ReportMeta {
            run_id: config.run_id.clone(),
            model_variant: variant.to_string(),
            dataset_variant: format!("{variant}/{}", config.report_split),
            plan_fingerprint: plan.fingerprint(),
            caption_set: config.captions.clone(),
            provenance,
        };
        render_report(&aggregate(&records, &meta)?, &report_path)
    })?;
    let report = ConceptReport::load(&report_path)?;
    Ok(VariantResult { variant, dir, metrics, report })
}

/// Opens the classifier of a finished variant.
pub fn open_classifier(variant_dir: &Path) -> Result<(CheckpointRef, Classifier)> {
    let ckpt = CheckpointRef::load(variant_dir.join("classifier.safetensors"))?;
    let model = ckpt.open()?;
    Ok((ckpt, model))
}

/// Serialized form of a summary, written as `summary.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryFile {
    pub run_id: String,
    pub config_fingerprint: String,
    pub reports: Vec<ConceptReport>,
    pub metrics: BTreeMap<String, Vec<Metrics>>,
}

pub fn write_summary(config: &RunConfig, summary: &RunSummary) -> Result<PathBuf> {
    let file = SummaryFile {
        run_id: config.run_id.clone(),
        config_fingerprint: config.fingerprint(),
        reports: summary.variants.iter().map(|v| v.report.clone()).collect(),
        metrics: summary.variants.iter().map(|v| (v.variant.to_string(), v.metrics.clone())).collect(),
    };
    let path = summary.run_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(path)
}
