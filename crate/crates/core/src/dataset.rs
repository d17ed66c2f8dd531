//! Colored 5-vs-8 digit corpora.
//!
//! The development splits (train/val/test) of the biased variant tie color to the
//! digit: fives are red, eights are green. The `real_world` split draws each
//! sample's color independently, which is the covariate shift a color-reliant
//! classifier falls for. The grayscale variant collapses every sample to three
//! equal channels.
//!
//! On disk a corpus is one directory per split holding PNG files, a
//! `manifest.tsv` table and a `dataset.json` metadata record.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XaiError};
use crate::fingerprint::{derive_seed, sha256_hex, Fingerprinter};
use crate::raster::Raster;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const METADATA_FILE: &str = "dataset.json";
pub const MANIFEST_HEADER: &str = "sample_id\tsplit\tdigit_label\tcolor_label\trelative_path";

static BUNDLED_IMAGES: &[u8] = include_bytes!("../assets/mnist58-images-idx3-ubyte.gz");
static BUNDLED_LABELS: &[u8] = include_bytes!("../assets/mnist58-labels-idx1-ubyte.gz");

macro_rules! label_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = XaiError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(XaiError::InvalidInput(format!(
                        concat!("unknown ", stringify!($name), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

label_enum!(Digit { Five => "five", Eight => "eight" });
label_enum!(ColorLabel { Red => "red", Green => "green", Gray => "gray" });
label_enum!(Split { Train => "train", Val => "val", Test => "test", RealWorld => "real_world" });
label_enum!(Variant { Biased => "biased", RealWorld => "real_world", Grayscale => "grayscale" });

impl Digit {
    pub fn from_mnist(label: u8) -> Option<Self> {
        match label {
            5 => Some(Digit::Five),
            8 => Some(Digit::Eight),
            _ => None,
        }
    }

    /// Class index used by the classifier head.
    pub fn index(&self) -> usize {
        match self {
            Digit::Five => 0,
            Digit::Eight => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Digit::Five),
            1 => Some(Digit::Eight),
            _ => None,
        }
    }

    /// Color the biased development splits assign to this digit.
    pub fn biased_color(&self) -> ColorLabel {
        match self {
            Digit::Five => ColorLabel::Red,
            Digit::Eight => ColorLabel::Green,
        }
    }
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::RealWorld];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColoredDigitSample {
    pub sample_id: u64,
    pub split: Split,
    pub digit: Digit,
    pub color: ColorLabel,
    pub image: Raster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub real_world: usize,
}

impl Default for SplitSizes {
    /// Sized to fit the bundled digit pool (863 fives, 944 eights).
    fn default() -> Self {
        Self {
            train: 800,
            val: 200,
            test: 300,
            real_world: 500,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::RealWorld => self.real_world,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test + self.real_world
    }
}

/// Handwritten digit pool restricted to fives and eights.
#[derive(Debug, Clone)]
pub struct DigitSource {
    images: Vec<Raster>,
    digits: Vec<Digit>,
    checksum: String,
}

impl DigitSource {
    /// The fives and eights shipped with the crate (28×28, 1807 digits).
    pub fn bundled() -> Result<Self> {
        let images = gunzip(BUNDLED_IMAGES)?;
        let labels = gunzip(BUNDLED_LABELS)?;
        Self::from_idx_bytes(&images, &labels)
    }

    /// Loads an MNIST-format IDX pair (optionally gzip-compressed).
    pub fn from_idx_files(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<u8>> {
            let raw = fs::read(p).map_err(|e| {
                XaiError::MissingSource(format!("{}: {e}", p.display()))
            })?;
            if raw.starts_with(&[0x1f, 0x8b]) {
                gunzip(&raw)
            } else {
                Ok(raw)
            }
        };
        Self::from_idx_bytes(&read(images.as_ref())?, &read(labels.as_ref())?)
    }

    pub fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Self> {
        let be = |b: &[u8], at: usize| -> Result<usize> {
            b.get(at..at + 4)
                .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]) as usize)
                .ok_or_else(|| XaiError::MissingSource("truncated IDX header".into()))
        };
        if be(images, 0)? != 0x803 || be(labels, 0)? != 0x801 {
            return Err(XaiError::MissingSource("bad IDX magic".into()));
        }
        let (n, rows, cols) = (be(images, 4)?, be(images, 8)?, be(images, 12)?);
        if be(labels, 4)? != n {
            return Err(XaiError::MissingSource(
                "IDX image and label counts differ".into(),
            ));
        }
        let px = rows * cols;
        if images.len() < 16 + n * px || labels.len() < 8 + n {
            return Err(XaiError::MissingSource("truncated IDX payload".into()));
        }
        let mut out_images = Vec::new();
        let mut digits = Vec::new();
        for k in 0..n {
            if let Some(d) = Digit::from_mnist(labels[8 + k]) {
                let start = 16 + k * px;
                let data = images[start..start + px]
                    .iter()
                    .map(|&v| v as f32 / 255.0)
                    .collect();
                out_images.push(Raster::new(rows, cols, 1, data)?);
                digits.push(d);
            }
        }
        let mut fp = Fingerprinter::new();
        fp.update(images).update(labels);
        Ok(Self {
            images: out_images,
            digits,
            checksum: fp.finish(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn count(&self, digit: Digit) -> usize {
        self.digits.iter().filter(|&&d| d == digit).count()
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn get(&self, index: usize) -> (&Raster, Digit) {
        (&self.images[index], self.digits[index])
    }
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

/// Places grayscale intensity into the red or green channel.
pub fn colorize(gray: &Raster, color: ColorLabel) -> Result<Raster> {
    if gray.channels() != 1 {
        return Err(XaiError::Shape(format!(
            "colorize expects a single-channel raster, got {} channels",
            gray.channels()
        )));
    }
    gray.check_unit_range()?;
    let channel = match color {
        ColorLabel::Red => 0,
        ColorLabel::Green => 1,
        ColorLabel::Gray => {
            return Err(XaiError::InvalidInput(
                "colorize accepts red or green only".into(),
            ))
        }
    };
    let mut data = vec![0.0f32; gray.data().len() * 3];
    for (px, &v) in gray.data().iter().enumerate() {
        data[px * 3 + channel] = v;
    }
    Raster::new(gray.height(), gray.width(), 3, data)
}

/// Replaces every pixel with the mean of its three channels, repeated three times.
pub fn to_grayscale3(rgb: &Raster) -> Result<Raster> {
    if rgb.channels() != 3 {
        return Err(XaiError::Shape(format!(
            "to_grayscale3 expects an RGB raster, got {} channels",
            rgb.channels()
        )));
    }
    rgb.check_unit_range()?;
    let data = rgb
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let m = (p[0] + p[1] + p[2]) / 3.0;
            [m, m, m]
        })
        .collect();
    Raster::new(rgb.height(), rgb.width(), 3, data)
}

/// Color drawn for a sample whose color is independent of its digit.
pub fn random_color(seed: u64, sample_id: u64) -> ColorLabel {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, sample_id));
    if rng.random_bool(0.5) {
        ColorLabel::Red
    } else {
        ColorLabel::Green
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: u64,
    pub split: Split,
    pub digit: Digit,
    pub color: ColorLabel,
    pub relative_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub variant: Variant,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub source_checksum: String,
    /// SHA-256 over the manifest table and every sample file, in manifest order.
    pub content_fingerprint: String,
    #[serde(skip)]
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_for(split).count()
    }

    pub fn table(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.sample_id, e.split, e.digit, e.color, e.relative_path
            ));
        }
        s
    }

    pub fn parse_table(text: &str) -> Result<Vec<ManifestEntry>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MANIFEST_HEADER => {}
            _ => {
                return Err(XaiError::format(
                    MANIFEST_FILE,
                    "missing or unexpected header row",
                ))
            }
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(n, line)| {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 5 {
                    return Err(XaiError::format(
                        MANIFEST_FILE,
                        format!("row {} has {} columns", n + 1, cols.len()),
                    ));
                }
                Ok(ManifestEntry {
                    sample_id: cols[0].parse().map_err(|_| {
                        XaiError::format(MANIFEST_FILE, format!("bad sample_id `{}`", cols[0]))
                    })?,
                    split: cols[1].parse()?,
                    digit: cols[2].parse()?,
                    color: cols[3].parse()?,
                    relative_path: cols[4].to_string(),
                })
            })
            .collect()
    }

    /// Reads `dataset.json` and `manifest.tsv` from a corpus directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(METADATA_FILE);
        let meta = fs::read_to_string(&meta_path).map_err(|e| {
            XaiError::MissingSource(format!("{}: {e}", meta_path.display()))
        })?;
        let mut manifest: DatasetManifest = serde_json::from_str(&meta)?;
        let table = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        manifest.entries = Self::parse_table(&table)?;
        for split in Split::ALL {
            if manifest.count(split) != manifest.sizes.get(split) {
                return Err(XaiError::format(
                    dir.join(MANIFEST_FILE),
                    format!(
                        "split {split} lists {} samples, metadata says {}",
                        manifest.count(split),
                        manifest.sizes.get(split)
                    ),
                ));
            }
        }
        Ok(manifest)
    }

    /// Loads the samples of one split from `dir`.
    pub fn load_split(&self, dir: impl AsRef<Path>, split: Split) -> Result<Vec<ColoredDigitSample>> {
        let dir = dir.as_ref();
        self.entries_for(split)
            .map(|e| {
                Ok(ColoredDigitSample {
                    sample_id: e.sample_id,
                    split: e.split,
                    digit: e.digit,
                    color: e.color,
                    image: Raster::load_png(dir.join(&e.relative_path))?,
                })
            })
            .collect()
    }
}

/// A materialized corpus: metadata plus in-memory samples.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub samples: Vec<ColoredDigitSample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ColoredDigitSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Writes PNGs, `manifest.tsv` and `dataset.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for split in Split::ALL {
            fs::create_dir_all(dir.join(split.as_str()))?;
        }
        for (sample, entry) in self.samples.iter().zip(&self.manifest.entries) {
            sample.image.save_png(dir.join(&entry.relative_path))?;
        }
        fs::write(dir.join(MANIFEST_FILE), self.manifest.table())?;
        let mut meta = serde_json::to_string_pretty(&self.manifest)?;
        meta.push('\n');
        fs::write(dir.join(METADATA_FILE), meta)?;
        Ok(())
    }
}

/// Draws a corpus from `source`.
///
/// The pool is shuffled under `seed` and cut into train, val, test and
/// real_world in that order, so the splits never share a digit.
pub fn build_corpus(
    source: &DigitSource,
    variant: Variant,
    seed: u64,
    sizes: SplitSizes,
) -> Result<Corpus> {
    if Split::ALL.iter().any(|&s| sizes.get(s) == 0) {
        return Err(XaiError::InvalidInput(
            "every split size must be positive".into(),
        ));
    }
    if sizes.total() > source.len() {
        return Err(XaiError::InvalidInput(format!(
            "requested {} samples but the source holds only {} fives and eights",
            sizes.total(),
            source.len()
        )));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut samples = Vec::with_capacity(sizes.total());
    let mut entries = Vec::with_capacity(sizes.total());
    let mut cursor = order.into_iter();
    for split in Split::ALL {
        let mut chosen: Vec<usize> = cursor.by_ref().take(sizes.get(split)).collect();
        chosen.sort_unstable();
        for index in chosen {
            let (gray, digit) = source.get(index);
            let sample_id = index as u64;
            let drawn = match (variant, split) {
                (Variant::RealWorld, _) | (_, Split::RealWorld) => random_color(seed, sample_id),
                _ => digit.biased_color(),
            };
            let colored = colorize(gray, drawn)?;
            let (image, color) = match variant {
                Variant::Grayscale => (to_grayscale3(&colored)?, ColorLabel::Gray),
                _ => (colored, drawn),
            };
            let relative_path = format!("{}/{:06}.png", split, sample_id);
            entries.push(ManifestEntry {
                sample_id,
                split,
                digit,
                color,
                relative_path,
            });
            samples.push(ColoredDigitSample {
                sample_id,
                split,
                digit,
                color,
                image: image.quantized(),
            });
        }
    }

    let mut manifest = DatasetManifest {
        variant,
        seed,
        sizes,
        source_checksum: source.checksum().to_string(),
        content_fingerprint: String::new(),
        entries,
    };
    manifest.content_fingerprint = in_memory_fingerprint(&manifest, &samples);
    Ok(Corpus { manifest, samples })
}

fn in_memory_fingerprint(manifest: &DatasetManifest, samples: &[ColoredDigitSample]) -> String {
    let mut fp = Fingerprinter::new();
    fp.update(manifest.table());
    for s in samples {
        fp.update_f32s(s.image.data());
    }
    fp.finish()
}

/// Materializes `variant` under `out` and returns the manifest.
pub fn build_to_dir(
    source: &DigitSource,
    variant: Variant,
    seed: u64,
    sizes: SplitSizes,
    out: impl Into<PathBuf>,
) -> Result<DatasetManifest> {
    let out = out.into();
    let corpus = build_corpus(source, variant, seed, sizes)?;
    corpus.write(&out)?;
    Ok(corpus.manifest)
}

/// Quick identity for a list of sample ids, used to check that two encoders saw the same images.
pub fn sample_order_fingerprint(ids: &[u64]) -> String {
    let bytes: Vec<u8> = ids.iter().flat_map(|id| id.to_le_bytes()).collect();
    sha256_hex(bytes)
}
