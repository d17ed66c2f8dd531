//! Binary 5-vs-8 classifier: a convolutional backbone plus one linear layer.
//!
//! Checkpoints are a safetensors file with a JSON sidecar (`<ckpt>.json`) that
//! records architecture, preprocessing, color mode, seeds and fingerprints.
//! Downstream stages read preprocessing from the sidecar and never guess it.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, AdamW, Linear, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ColoredDigitSample, DatasetManifest, Digit, Split, Variant};
use crate::error::{Result, XaiError};
use crate::fingerprint::{derive_seed, derive_seed_str};
use crate::nets::resnet::{ResNet, ResNetConfig};
use crate::nets::store::SeededStore;
use crate::nets::tiny::{TinyConfig, TinyEncoder};
use crate::nets::{ConvHook, EncoderRole, ImageEncoder, Preprocessing, ProbePoint};
use crate::plot::line_chart;
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    Resnet(ResNetConfig),
    Tiny(TinyConfig),
}

impl BackboneSpec {
    pub fn resnet50() -> Self {
        BackboneSpec::Resnet(ResNetConfig::resnet50())
    }

    /// Architecture tag of the full classifier, e.g. `resnet50-binary`.
    pub fn tag(&self) -> String {
        match self {
            BackboneSpec::Resnet(c) => format!("{}-binary", c.tag()),
            BackboneSpec::Tiny(c) => format!("{}-binary", c.tag()),
        }
    }
}

/// Whether the classifier sees colored or gray-converted images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    Rgb,
    Gray,
}

impl ColorMode {
    pub fn of(variant: Variant) -> Self {
        match variant {
            Variant::Grayscale => ColorMode::Gray,
            Variant::Biased | Variant::RealWorld => ColorMode::Rgb,
        }
    }
}

enum Backbone {
    Resnet(ResNet),
    Tiny(TinyEncoder),
}

/// Backbone and head sharing one parameter store.
pub struct Classifier {
    spec: BackboneSpec,
    backbone: Backbone,
    fc: Linear,
    store: SeededStore,
}

impl Classifier {
    /// Seeded initialization; the head is named `fc` as in torchvision.
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        let store = SeededStore::new(seed);
        let vb = store.builder();
        let (backbone, dim) = match &spec {
            BackboneSpec::Resnet(c) => (Backbone::Resnet(ResNet::new(c.clone(), vb.clone())?), c.feature_dim()),
            BackboneSpec::Tiny(c) => {
                let cfg = TinyConfig { role: EncoderRole::Standalone, output_dim: 0, ..c.clone() };
                let enc = TinyEncoder::new(cfg, vb.clone())?;
                let dim = enc.output_dim();
                (Backbone::Tiny(enc), dim)
            }
        };
        let fc = linear(dim, 2, vb.pp("fc"))?;
        Ok(Self { spec, backbone, fc, store })
    }

    /// Loads backbone weights from a torchvision state dict, leaving the head at its initialization.
    pub fn load_backbone(&self, path: impl AsRef<Path>) -> Result<usize> {
        self.store.load_from(path, |name| (!name.starts_with("fc.")).then(|| name.to_string()))
    }

    /// Overwrites every parameter from a checkpoint file.
    pub fn load_all(&self, path: impl AsRef<Path>) -> Result<usize> {
        self.store.load_from(path, |name| Some(name.to_string()))
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn store(&self) -> &SeededStore {
        &self.store
    }

    pub fn encoder(&self) -> &dyn ImageEncoder {
        match &self.backbone {
            Backbone::Resnet(r) => r,
            Backbone::Tiny(t) => t,
        }
    }

    /// Logits of shape (B, 2).
    pub fn logits(&self, pixels: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let features = match &self.backbone {
            Backbone::Resnet(r) if train => r.forward_t(pixels, true, &mut crate::nets::NoHook)?,
            Backbone::Tiny(t) if train => t.forward_train(pixels)?,
            Backbone::Resnet(r) => r.forward(pixels)?,
            Backbone::Tiny(t) => t.forward(pixels)?,
        };
        self.fc.forward(&features)
    }
}

impl ImageEncoder for Classifier {
    fn role(&self) -> EncoderRole {
        EncoderRole::Standalone
    }

    fn architecture(&self) -> String {
        self.encoder().architecture()
    }

    fn catalog(&self) -> Vec<ProbePoint> {
        self.encoder().catalog()
    }

    fn preprocessing(&self) -> &Preprocessing {
        self.encoder().preprocessing()
    }

    fn forward_hooked(&self, pixels: &Tensor, hook: &mut dyn ConvHook) -> candle_core::Result<Tensor> {
        self.encoder().forward_hooked(pixels, hook)
    }

    fn output_dim(&self) -> usize {
        self.encoder().output_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 4,
            lr: 3e-4,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurves {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

pub const CURVES_HEADER: &str = "epoch\ttrain_loss\tval_loss\ttrain_accuracy\tval_accuracy";

impl LearningCurves {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if [self.val_loss.len(), self.train_accuracy.len(), self.val_accuracy.len()].iter().any(|&l| l != n) {
            return Err(XaiError::InvalidInput("learning curve columns differ in length".into()));
        }
        if self.train_accuracy.iter().chain(&self.val_accuracy).any(|a| !(0.0..=1.0).contains(a)) {
            return Err(XaiError::InvalidInput("accuracy outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{CURVES_HEADER}\n");
        for e in 0..self.len() {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e + 1,
                self.train_loss[e],
                self.val_loss[e],
                self.train_accuracy[e],
                self.val_accuracy[e]
            ));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(CURVES_HEADER) {
            return Err(XaiError::format("learning curves", "missing header row"));
        }
        let mut c = LearningCurves::default();
        for (n, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let v: Vec<f64> = line
                .split('\t')
                .map(|x| x.parse().map_err(|_| XaiError::format("learning curves", format!("row {}: bad number", n + 1))))
                .collect::<Result<_>>()?;
            if v.len() != 5 {
                return Err(XaiError::format("learning curves", format!("row {} has {} columns", n + 1, v.len())));
            }
            c.train_loss.push(v[1]);
            c.val_loss.push(v[2]);
            c.train_accuracy.push(v[3]);
            c.val_accuracy.push(v[4]);
        }
        c.validate()?;
        Ok(c)
    }

    /// Writes `<stem>.tsv` and `<stem>.png`.
    pub fn export(&self, stem: &Path) -> Result<()> {
        fs::write(with_suffix(stem, ".tsv"), self.to_tsv())?;
        line_chart(
            &with_suffix(stem, ".png"),
            "learning curves",
            &[
                ("train loss", &self.train_loss),
                ("val loss", &self.val_loss),
                ("train accuracy", &self.train_accuracy),
                ("val accuracy", &self.val_accuracy),
            ],
        )
    }
}

/// Sidecar metadata of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    #[serde(skip)]
    pub path: PathBuf,
    pub architecture: String,
    pub backbone: BackboneSpec,
    pub preprocessing: Preprocessing,
    pub color_mode: ColorMode,
    pub seed: u64,
    pub epochs: usize,
    pub hyperparams: Hyperparams,
    pub dataset_variant: Variant,
    pub dataset_fingerprint: String,
    pub pretrained: Option<String>,
    pub weights_fingerprint: String,
}

impl CheckpointRef {
    pub fn sidecar(path: &Path) -> PathBuf {
        with_suffix(path, ".json")
    }

    pub fn save(&self) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(Self::sidecar(&self.path), s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = Self::sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| XaiError::MissingSource(format!("{}: {e}", side.display())))?;
        let mut r: CheckpointRef = serde_json::from_str(&text)?;
        r.path = path.to_path_buf();
        Ok(r)
    }

    /// Rebuilds the classifier and checks the weights against the recorded fingerprint.
    pub fn open(&self) -> Result<Classifier> {
        let c = Classifier::new(self.backbone.clone(), self.seed)?;
        c.load_all(&self.path)?;
        let fp = c.store().fingerprint()?;
        if fp != self.weights_fingerprint {
            return Err(XaiError::Fingerprint(format!(
                "{}: weights hash to {fp}, sidecar records {}",
                self.path.display(),
                self.weights_fingerprint
            )));
        }
        Ok(c)
    }
}

/// Digit index targets: five is 0, eight is 1.
fn targets(samples: &[&ColoredDigitSample]) -> Result<Tensor> {
    let t: Vec<u32> = samples.iter().map(|s| s.digit.index() as u32).collect();
    Ok(Tensor::from_vec(t, samples.len(), &Device::Cpu)?)
}

fn pixels(model: &Classifier, samples: &[&ColoredDigitSample]) -> Result<Tensor> {
    let images: Vec<&Raster> = samples.iter().map(|s| &s.image).collect();
    model.preprocessing().apply(&images)
}

fn check_mode(mode: ColorMode, samples: &[ColoredDigitSample]) -> Result<()> {
    let gray = |r: &Raster| r.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]);
    if mode == ColorMode::Gray {
        if let Some(s) = samples.iter().find(|s| !gray(&s.image)) {
            return Err(XaiError::Config(format!(
                "sample {} is colored but the classifier expects gray-converted input",
                s.sample_id
            )));
        }
    }
    Ok(())
}

/// Mean loss and accuracy in eval mode.
fn score(model: &Classifier, samples: &[ColoredDigitSample], batch: usize) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in samples.chunks(batch) {
        let refs: Vec<&ColoredDigitSample> = chunk.iter().collect();
        let logits = model.logits(&pixels(model, &refs)?, false)?;
        let t = targets(&refs)?;
        loss += candle_nn::loss::cross_entropy(&logits, &t)?.to_scalar::<f32>()? as f64 * chunk.len() as f64;
        correct += logits.argmax(D::Minus1)?.eq(&t)?.to_dtype(DType::F32)?.sum_all()?.to_scalar::<f32>()? as usize;
    }
    Ok((loss / samples.len() as f64, correct as f64 / samples.len() as f64))
}

pub struct TrainOutput {
    pub checkpoint: CheckpointRef,
    pub curves: LearningCurves,
    pub model: Classifier,
}

/// Fine-tunes all layers with AdamW on the train split, validating after each epoch.
///
/// Writes the weights to `out`, the sidecar to `<out>.json` and the curves to
/// `<out>.curves.{tsv,png}`. A NaN loss aborts with [`XaiError::Diverged`].
pub fn finetune(
    spec: BackboneSpec,
    manifest: &DatasetManifest,
    data_dir: &Path,
    hp: &Hyperparams,
    pretrained: Option<&Path>,
    out: &Path,
) -> Result<TrainOutput> {
    if manifest.variant == Variant::RealWorld {
        return Err(XaiError::Config("train on the biased or grayscale variant".into()));
    }
    if hp.batch_size == 0 {
        return Err(XaiError::Config("batch size must be positive".into()));
    }
    let model = Classifier::new(spec.clone(), derive_seed_str(hp.seed, "classifier"))?;
    if let Some(p) = pretrained {
        let n = model.load_backbone(p)?;
        log::info!("loaded {n} backbone tensors from {}", p.display());
    }
    let train = manifest.load_split(data_dir, Split::Train)?;
    let val = manifest.load_split(data_dir, Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(XaiError::InvalidInput("train and val splits must be non-empty".into()));
    }
    let mut opt = AdamW::new(
        model.store().trainable(),
        ParamsAdamW { lr: hp.lr, weight_decay: hp.weight_decay, ..Default::default() },
    )?;
    let mut curves = LearningCurves::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..hp.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(hp.batch_size).enumerate() {
            let refs: Vec<&ColoredDigitSample> = idx.iter().map(|&i| &train[i]).collect();
            let logits = model.logits(&pixels(&model, &refs)?, true)?;
            let t = targets(&refs)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &t)?;
            let l = loss.to_scalar::<f32>()? as f64;
            if !l.is_finite() {
                return Err(XaiError::Diverged(format!("train loss {l} at epoch {} step {step}", epoch + 1)));
            }
            opt.backward_step(&loss)?;
            loss_sum += l * refs.len() as f64;
            correct += logits.argmax(D::Minus1)?.eq(&t)?.to_dtype(DType::F32)?.sum_all()?.to_scalar::<f32>()? as usize;
            if step % 50 == 0 {
                log::debug!("epoch {} step {step}: loss {l:.4}", epoch + 1);
            }
        }
        let (val_loss, val_acc) = score(&model, &val, hp.batch_size)?;
        if !val_loss.is_finite() {
            return Err(XaiError::Diverged(format!("val loss {val_loss} after epoch {}", epoch + 1)));
        }
        curves.train_loss.push(loss_sum / train.len() as f64);
        curves.train_accuracy.push(correct as f64 / train.len() as f64);
        curves.val_loss.push(val_loss);
        curves.val_accuracy.push(val_acc);
        log::info!(
            "epoch {}: train loss {:.4} acc {:.4}, val loss {val_loss:.4} acc {val_acc:.4}",
            epoch + 1,
            curves.train_loss[epoch],
            curves.train_accuracy[epoch]
        );
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    model.store().save(out)?;
    let checkpoint = CheckpointRef {
        path: out.to_path_buf(),
        architecture: spec.tag(),
        backbone: spec,
        preprocessing: model.preprocessing().clone(),
        color_mode: ColorMode::of(manifest.variant),
        seed: derive_seed_str(hp.seed, "classifier"),
        epochs: hp.epochs,
        hyperparams: hp.clone(),
        dataset_variant: manifest.variant,
        dataset_fingerprint: manifest.content_fingerprint.clone(),
        pretrained: pretrained.map(|p| p.display().to_string()),
        weights_fingerprint: model.store().fingerprint()?,
    };
    checkpoint.save()?;
    curves.export(&curves_stem(out))?;
    Ok(TrainOutput { checkpoint, curves, model })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

/// `<ckpt>.curves`, the stem of the exported learning curves.
pub fn curves_stem(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".curves")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: Split,
    pub total: u64,
    pub accuracy: f64,
    /// Accuracy on fives, then eights.
    pub per_class_accuracy: [f64; 2],
    /// `confusion[truth][predicted]`, five first.
    pub confusion: [[u64; 2]; 2],
}

/// Classifies one split of `manifest`.
///
/// Errors on an empty split and when the data's color mode differs from the
/// one the checkpoint was trained for.
pub fn evaluate(
    model: &Classifier,
    checkpoint: &CheckpointRef,
    manifest: &DatasetManifest,
    data_dir: &Path,
    split: Split,
    batch_size: usize,
) -> Result<Metrics> {
    if model.spec().tag() != checkpoint.architecture {
        return Err(XaiError::Architecture(format!(
            "model is {}, checkpoint is {}",
            model.spec().tag(),
            checkpoint.architecture
        )));
    }
    if model.preprocessing() != &checkpoint.preprocessing {
        return Err(XaiError::Config("model preprocessing differs from the checkpoint's".into()));
    }
    let data_mode = ColorMode::of(manifest.variant);
    if data_mode != checkpoint.color_mode {
        return Err(XaiError::Config(format!(
            "checkpoint expects {:?} input, dataset variant {} is {:?}",
            checkpoint.color_mode, manifest.variant, data_mode
        )));
    }
    let samples = manifest.load_split(data_dir, split)?;
    if samples.is_empty() {
        return Err(XaiError::InvalidInput(format!("split {split} is empty")));
    }
    check_mode(checkpoint.color_mode, &samples)?;
    predict_metrics(model, &samples, split, batch_size.max(1))
}

fn predict_metrics(model: &Classifier, samples: &[ColoredDigitSample], split: Split, batch: usize) -> Result<Metrics> {
    let mut confusion = [[0u64; 2]; 2];
    for chunk in samples.chunks(batch) {
        let refs: Vec<&ColoredDigitSample> = chunk.iter().collect();
        let pred = model.logits(&pixels(model, &refs)?, false)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
        for (s, p) in chunk.iter().zip(pred) {
            confusion[s.digit.index()][p as usize] += 1;
        }
    }
    let total: u64 = confusion.iter().flatten().sum();
    let class_acc = |d: Digit| {
        let row = confusion[d.index()];
        let n = row[0] + row[1];
        if n == 0 { 0.0 } else { row[d.index()] as f64 / n as f64 }
    };
    Ok(Metrics {
        split,
        total,
        accuracy: (confusion[0][0] + confusion[1][1]) as f64 / total as f64,
        per_class_accuracy: [class_acc(Digit::Five), class_acc(Digit::Eight)],
        confusion,
    })
}
