//! Caption similarities before and after surgery, per-image outcomes, and the
//! aggregated shape/color concept report.
//!
//! The winning caption of an image is the one whose cosine similarity rose the
//! most under surgery; CLIP's own preference for a caption cancels out of the
//! difference.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{ColorLabel, ColoredDigitSample, Digit};
use crate::error::{Result, XaiError};
use crate::fingerprint::sha256_hex;
use crate::nets::clip::check_embed_dims;
use crate::nets::TextEncoder;
use crate::plot::{grouped_bars, BarGroup};
use crate::raster::Raster;
use crate::surgeon::SurgicalEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionRole {
    ShapeFive,
    ShapeEight,
    ColorRed,
    ColorGreen,
}

impl CaptionRole {
    /// Tie-break order.
    pub const ALL: [CaptionRole; 4] = [
        CaptionRole::ShapeFive,
        CaptionRole::ShapeEight,
        CaptionRole::ColorRed,
        CaptionRole::ColorGreen,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CaptionRole::ShapeFive => "shape_five",
            CaptionRole::ShapeEight => "shape_eight",
            CaptionRole::ColorRed => "color_red",
            CaptionRole::ColorGreen => "color_green",
        }
    }

    pub fn is_shape(&self) -> bool {
        matches!(self, CaptionRole::ShapeFive | CaptionRole::ShapeEight)
    }
}

impl fmt::Display for CaptionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaptionRole {
    type Err = XaiError;

    fn from_str(s: &str) -> Result<Self> {
        CaptionRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| XaiError::Config(format!("unknown caption role `{s}`")))
    }
}

/// The four captions, one per role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub shape_five: String,
    pub shape_eight: String,
    pub color_red: String,
    pub color_green: String,
}

impl Default for CaptionSet {
    fn default() -> Self {
        Self {
            shape_five: "a photo of the handwritten digit five".into(),
            shape_eight: "a photo of the handwritten digit eight".into(),
            color_red: "a photo of a red digit".into(),
            color_green: "a photo of a green digit".into(),
        }
    }
}

impl CaptionSet {
    pub fn get(&self, role: CaptionRole) -> &str {
        match role {
            CaptionRole::ShapeFive => &self.shape_five,
            CaptionRole::ShapeEight => &self.shape_eight,
            CaptionRole::ColorRed => &self.color_red,
            CaptionRole::ColorGreen => &self.color_green,
        }
    }

    pub fn set(&mut self, role: CaptionRole, text: impl Into<String>) {
        let text = text.into();
        match role {
            CaptionRole::ShapeFive => self.shape_five = text,
            CaptionRole::ShapeEight => self.shape_eight = text,
            CaptionRole::ColorRed => self.color_red = text,
            CaptionRole::ColorGreen => self.color_green = text,
        }
    }

    /// Captions in role order.
    pub fn texts(&self) -> Vec<String> {
        CaptionRole::ALL.iter().map(|r| self.get(*r).to_string()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let texts = self.texts();
        for (k, t) in texts.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(XaiError::Config(format!("caption `{}` is empty", CaptionRole::ALL[k])));
            }
            if texts[..k].contains(t) {
                return Err(XaiError::Config(format!("caption `{t}` is used for two roles")));
            }
        }
        Ok(())
    }

    /// Reads `role = caption` lines; roles not mentioned keep their defaults.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut set = CaptionSet::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| XaiError::Config(format!("caption line `{line}` lacks `=`")))?;
            set.set(k.trim().parse()?, v.trim());
        }
        set.validate()?;
        Ok(set)
    }

    pub fn to_config_text(&self) -> String {
        CaptionRole::ALL.iter().map(|r| format!("{r} = {}\n", self.get(*r))).collect()
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_config_text())
    }
}

/// Caption embeddings computed once per run.
#[derive(Debug, Clone)]
pub struct CaptionEmbeddings {
    pub set: CaptionSet,
    pub vectors: Vec<Vec<f32>>,
}

impl CaptionEmbeddings {
    pub fn embed(set: &CaptionSet, text: &dyn TextEncoder) -> Result<Self> {
        set.validate()?;
        let vectors = text.embed_texts(&set.texts())?;
        if vectors.len() != 4 {
            return Err(XaiError::Shape(format!("text encoder returned {} embeddings for 4 captions", vectors.len())));
        }
        Ok(Self { set: set.clone(), vectors })
    }
}

/// (I·T) / (‖I‖‖T‖), clamped to [−1, 1] against rounding.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(XaiError::Shape(format!("embeddings of width {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(XaiError::InvalidInput("cosine similarity of a zero vector".into()));
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    if !c.is_finite() {
        return Err(XaiError::InvalidInput("non-finite embedding".into()));
    }
    Ok(c.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    CorrectShape,
    IncorrectShape,
    CorrectColor,
    IncorrectColor,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::CorrectShape => "correct_shape",
            Outcome::IncorrectShape => "incorrect_shape",
            Outcome::CorrectColor => "correct_color",
            Outcome::IncorrectColor => "incorrect_color",
        }
    }
}

/// Role with the largest Δc; ties go to the earlier role.
pub fn winner(delta: &[f64; 4]) -> CaptionRole {
    let mut best = 0;
    for k in 1..4 {
        if delta[k] > delta[best] {
            best = k;
        }
    }
    CaptionRole::ALL[best]
}

/// Grades a winning caption against the sample's labels. A gray sample has no
/// correct color, so any color winner counts as incorrect.
pub fn outcome_for(winner: CaptionRole, digit: Digit, color: ColorLabel) -> Outcome {
    match winner {
        CaptionRole::ShapeFive if digit == Digit::Five => Outcome::CorrectShape,
        CaptionRole::ShapeEight if digit == Digit::Eight => Outcome::CorrectShape,
        CaptionRole::ShapeFive | CaptionRole::ShapeEight => Outcome::IncorrectShape,
        CaptionRole::ColorRed if color == ColorLabel::Red => Outcome::CorrectColor,
        CaptionRole::ColorGreen if color == ColorLabel::Green => Outcome::CorrectColor,
        CaptionRole::ColorRed | CaptionRole::ColorGreen => Outcome::IncorrectColor,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub sample_id: u64,
    pub digit: Digit,
    pub color: ColorLabel,
    pub c_before: [f64; 4],
    pub c_after: [f64; 4],
    pub delta: [f64; 4],
    pub winner: CaptionRole,
    pub outcome: Outcome,
}

/// Builds a record from the image embedding before and after surgery.
pub fn score_embeddings(
    sample_id: u64,
    digit: Digit,
    color: ColorLabel,
    before: &[f32],
    after: &[f32],
    captions: &CaptionEmbeddings,
) -> Result<SimilarityRecord> {
    let mut c_before = [0.0; 4];
    let mut c_after = [0.0; 4];
    for k in 0..4 {
        c_before[k] = cosine_similarity(before, &captions.vectors[k])?;
        c_after[k] = cosine_similarity(after, &captions.vectors[k])?;
    }
    Ok(record_from(sample_id, digit, color, c_before, c_after))
}

fn record_from(sample_id: u64, digit: Digit, color: ColorLabel, c_before: [f64; 4], c_after: [f64; 4]) -> SimilarityRecord {
    let delta = std::array::from_fn(|k| c_after[k] - c_before[k]);
    let winner = winner(&delta);
    SimilarityRecord {
        sample_id,
        digit,
        color,
        c_before,
        c_after,
        delta,
        winner,
        outcome: outcome_for(winner, digit, color),
    }
}

/// Scores one labelled sample through both forwards.
pub fn score_image(sample: &ColoredDigitSample, captions: &CaptionEmbeddings, surgical: &SurgicalEncoder) -> Result<SimilarityRecord> {
    Ok(score_samples(std::slice::from_ref(sample), captions, surgical, 1)?.remove(0))
}

/// Scores samples in batches of `batch_size`.
pub fn score_samples(
    samples: &[ColoredDigitSample],
    captions: &CaptionEmbeddings,
    surgical: &SurgicalEncoder,
    batch_size: usize,
) -> Result<Vec<SimilarityRecord>> {
    if batch_size == 0 {
        return Err(XaiError::InvalidInput("batch size must be positive".into()));
    }
    for v in &captions.vectors {
        check_embed_dims(surgical.embedding_dim(), v.len())?;
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let images: Vec<&Raster> = chunk.iter().map(|s| &s.image).collect();
        let before = surgical.baseline_forward(&images)?;
        let after = surgical.surgical_forward(&images)?;
        for ((s, b), a) in chunk.iter().zip(&before).zip(&after) {
            out.push(score_embeddings(s.sample_id, s.digit, s.color, b, a, captions)?);
        }
    }
    Ok(out)
}

pub const RECORDS_HEADER: &str = "sample_id\tdigit_label\tcolor_label\tc_before\tc_after\tdelta\twinner\toutcome";

/// One row per record; the three vectors are comma-separated in role order.
pub fn records_tsv(records: &[SimilarityRecord]) -> String {
    let join = |v: &[f64; 4]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut s = format!("{RECORDS_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.sample_id,
            r.digit,
            r.color,
            join(&r.c_before),
            join(&r.c_after),
            join(&r.delta),
            r.winner,
            r.outcome.as_str()
        ));
    }
    s
}

/// Parses [`records_tsv`] output, recomputing Δc, the winner and the outcome.
pub fn parse_records(text: &str) -> Result<Vec<SimilarityRecord>> {
    const NAME: &str = "similarity records";
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(RECORDS_HEADER) {
        return Err(XaiError::format(NAME, "missing header row"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let bad = |what: &str| XaiError::format(NAME, format!("row {}: bad {what}", n + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 8 {
                return Err(bad("column count"));
            }
            let vec4 = |s: &str| -> Result<[f64; 4]> {
                let v: Vec<f64> = s.split(',').map(|x| x.parse().map_err(|_| bad("similarity"))).collect::<Result<_>>()?;
                v.try_into().map_err(|_| bad("similarity count"))
            };
            let r = record_from(
                cols[0].parse().map_err(|_| bad("sample_id"))?,
                cols[1].parse()?,
                cols[2].parse()?,
                vec4(cols[3])?,
                vec4(cols[4])?,
            );
            if r.winner.as_str() != cols[6] || r.outcome.as_str() != cols[7] {
                return Err(bad("winner or outcome"));
            }
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub correct_shape: u64,
    pub incorrect_shape: u64,
    pub correct_color: u64,
    pub incorrect_color: u64,
}

impl OutcomeCounts {
    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::CorrectShape => self.correct_shape += 1,
            Outcome::IncorrectShape => self.incorrect_shape += 1,
            Outcome::CorrectColor => self.correct_color += 1,
            Outcome::IncorrectColor => self.incorrect_color += 1,
        }
    }

    pub fn merge(&self, o: &OutcomeCounts) -> OutcomeCounts {
        OutcomeCounts {
            correct_shape: self.correct_shape + o.correct_shape,
            incorrect_shape: self.incorrect_shape + o.incorrect_shape,
            correct_color: self.correct_color + o.correct_color,
            incorrect_color: self.incorrect_color + o.incorrect_color,
        }
    }

    pub fn total(&self) -> u64 {
        self.correct_shape + self.incorrect_shape + self.correct_color + self.incorrect_color
    }

    pub fn shape(&self) -> u64 {
        self.correct_shape + self.incorrect_shape
    }

    pub fn color(&self) -> u64 {
        self.correct_color + self.incorrect_color
    }
}

/// Run identity copied into a report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportMeta {
    pub run_id: String,
    pub model_variant: String,
    pub dataset_variant: String,
    pub plan_fingerprint: String,
    pub caption_set: CaptionSet,
    /// Fingerprints of the artifacts that produced the report.
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub run_id: String,
    pub model_variant: String,
    pub dataset_variant: String,
    #[serde(rename = "N")]
    pub n: u64,
    pub counts: OutcomeCounts,
    pub p_shape: f64,
    pub p_color: f64,
    pub any_color: u64,
    pub dominant_concept: String,
    pub plan_fingerprint: String,
    pub caption_set: CaptionSet,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

pub fn aggregate(records: &[SimilarityRecord], meta: &ReportMeta) -> Result<ConceptReport> {
    let mut counts = OutcomeCounts::default();
    for r in records {
        counts.add(r.outcome);
    }
    aggregate_counts(counts, meta)
}

pub fn aggregate_counts(counts: OutcomeCounts, meta: &ReportMeta) -> Result<ConceptReport> {
    let n = counts.total();
    if n == 0 {
        return Err(XaiError::InvalidInput("cannot aggregate zero records".into()));
    }
    let p_shape = counts.shape() as f64 / n as f64;
    let dominant = match (2 * counts.shape()).cmp(&n) {
        std::cmp::Ordering::Greater => "shape",
        std::cmp::Ordering::Less => "color",
        std::cmp::Ordering::Equal => "tie",
    };
    Ok(ConceptReport {
        run_id: meta.run_id.clone(),
        model_variant: meta.model_variant.clone(),
        dataset_variant: meta.dataset_variant.clone(),
        n,
        counts,
        p_shape,
        p_color: 1.0 - p_shape,
        any_color: counts.color(),
        dominant_concept: dominant.to_string(),
        plan_fingerprint: meta.plan_fingerprint.clone(),
        caption_set: meta.caption_set.clone(),
        provenance: meta.provenance.clone(),
    })
}

impl ConceptReport {
    /// Checks the count and probability invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |why: String| Err(XaiError::InvalidInput(format!("report {}: {why}", self.run_id)));
        if self.counts.total() != self.n || self.n == 0 {
            return fail(format!("counts sum to {}, N is {}", self.counts.total(), self.n));
        }
        if !(0.0..=1.0).contains(&self.p_shape) || !(0.0..=1.0).contains(&self.p_color) {
            return fail("probability outside [0, 1]".into());
        }
        if (self.p_shape + self.p_color - 1.0).abs() > 1e-12 {
            return fail("probabilities do not sum to 1".into());
        }
        if self.any_color != self.n - self.counts.shape() {
            return fail("any_color disagrees with the shape outcomes".into());
        }
        if !["shape", "color", "tie"].contains(&self.dominant_concept.as_str()) {
            return fail(format!("unknown dominant concept `{}`", self.dominant_concept));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| XaiError::MissingSource(format!("{}: {e}", path.display())))?;
        let r: ConceptReport = serde_json::from_str(&text)?;
        r.validate()?;
        Ok(r)
    }
}

/// Writes the structured report.
pub fn render_report(report: &ConceptReport, path: impl AsRef<Path>) -> Result<()> {
    report.validate()?;
    fs::write(path, report.to_json()?)?;
    Ok(())
}

/// Grouped P(shape)/P(color) bars, one group per report.
pub fn render_chart(reports: &[ConceptReport], path: impl AsRef<Path>) -> Result<Vec<BarGroup>> {
    let groups: Vec<BarGroup> = reports
        .iter()
        .map(|r| BarGroup {
            label: r.model_variant.clone(),
            values: vec![r.p_shape, r.p_color],
        })
        .collect();
    grouped_bars(path.as_ref(), "dominant concept", &["shape", "color"], &groups)?;
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(cs: u64, is: u64, cc: u64, ic: u64) -> OutcomeCounts {
        OutcomeCounts { correct_shape: cs, incorrect_shape: is, correct_color: cc, incorrect_color: ic }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn winner_examples() {
        let r = record_from(0, Digit::Five, ColorLabel::Red, [0.0; 4], [0.9, 0.1, 0.2, 0.3]);
        assert_eq!((r.winner, r.outcome), (CaptionRole::ShapeFive, Outcome::CorrectShape));
        let r = record_from(0, Digit::Five, ColorLabel::Red, [0.0; 4], [0.1, 0.1, 0.2, 0.5]);
        assert_eq!((r.winner, r.outcome), (CaptionRole::ColorGreen, Outcome::IncorrectColor));
        assert_eq!(winner(&[0.3; 4]), CaptionRole::ShapeFive);
        assert_eq!(outcome_for(CaptionRole::ColorRed, Digit::Eight, ColorLabel::Gray), Outcome::IncorrectColor);
        assert_eq!(outcome_for(CaptionRole::ShapeFive, Digit::Eight, ColorLabel::Red), Outcome::IncorrectShape);
    }

    #[test]
    fn aggregate_examples() {
        let m = ReportMeta::default();
        let r = aggregate_counts(counts(40, 10, 45, 5), &m).unwrap();
        assert_eq!((r.p_shape, r.p_color, r.dominant_concept.as_str()), (0.5, 0.5, "tie"));
        let r = aggregate_counts(counts(10, 5, 70, 15), &m).unwrap();
        assert!((r.p_color - 0.85).abs() < 1e-12);
        assert_eq!(r.dominant_concept, "color");
        r.validate().unwrap();
        assert!(aggregate(&[], &m).is_err());
    }

    #[test]
    fn report_json_schema_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ReportMeta { run_id: "r".into(), model_variant: "biased".into(), ..Default::default() };
        let r = aggregate_counts(counts(100, 50, 300, 50), &meta).unwrap();
        let p = dir.path().join("report.json");
        render_report(&r, &p).unwrap();
        let first = fs::read(&p).unwrap();
        render_report(&r, &p).unwrap();
        assert_eq!(first, fs::read(&p).unwrap());
        let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
        for key in ["run_id", "model_variant", "dataset_variant", "N", "counts", "p_shape", "p_color", "any_color", "dominant_concept", "plan_fingerprint", "caption_set"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["N"], 500);
        assert_eq!(ConceptReport::load(&p).unwrap(), r);
    }

    #[test]
    fn chart_has_one_group_per_report() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = ReportMeta { model_variant: "biased".into(), ..Default::default() };
        let m2 = ReportMeta { model_variant: "grayscale".into(), ..Default::default() };
        let reports = [aggregate_counts(counts(1, 1, 5, 3), &m1).unwrap(), aggregate_counts(counts(6, 2, 1, 1), &m2).unwrap()];
        let groups = render_chart(&reports, dir.path().join("c.png")).unwrap();
        assert_eq!(groups.len(), 2);
    }

    #[test]
    fn caption_config_round_trip() {
        let mut set = CaptionSet::default();
        set.color_red = "crimson".into();
        let back = CaptionSet::from_config_text(&set.to_config_text()).unwrap();
        assert_eq!(back, set);
        assert!(CaptionSet::from_config_text("shape_five = a photo of a red digit").is_err());
        assert!(CaptionSet::from_config_text("texture = x").is_err());
        let mut empty = CaptionSet::default();
        empty.shape_eight = " ".into();
        assert!(empty.validate().is_err());
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![
            record_from(3, Digit::Eight, ColorLabel::Green, [0.1, 0.2, 0.3, 0.4], [0.2, 0.2, 0.1, 0.9]),
            record_from(9, Digit::Five, ColorLabel::Gray, [0.0; 4], [0.1, 0.5, -0.2, 0.0]),
        ];
        assert_eq!(parse_records(&records_tsv(&recs)).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn cosine_in_range(a in prop::collection::vec(-10f32..10., 1..16), seed in 0u64..100) {
            let b: Vec<f32> = a.iter().enumerate().map(|(k, v)| v * ((k as u64 + seed) % 7) as f32 - 1.0).collect();
            if let Ok(c) = cosine_similarity(&a, &b) {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }

        #[test]
        fn common_shift_keeps_winner(after in prop::array::uniform4(-1f64..1.), shift in -0.5f64..0.5) {
            let before = [0.1, -0.2, 0.3, 0.0];
            let a = record_from(0, Digit::Five, ColorLabel::Red, before, after);
            let b = record_from(0, Digit::Five, ColorLabel::Red, before.map(|v| v + shift), after.map(|v| v + shift));
            prop_assert_eq!(a.winner, b.winner);
            prop_assert_eq!(a.outcome, b.outcome);
        }

        #[test]
        fn caption_permutation_permutes_deltas(delta in prop::array::uniform4(-1f64..1.)) {
            let distinct = (0..4).all(|i| (0..i).all(|j| delta[i] != delta[j]));
            prop_assume!(distinct);
            let w = winner(&delta);
            let perm = [2usize, 0, 3, 1];
            let permuted: [f64; 4] = std::array::from_fn(|k| delta[perm[k]]);
            let wp = winner(&permuted);
            let k = CaptionRole::ALL.iter().position(|r| *r == wp).unwrap();
            prop_assert_eq!(CaptionRole::ALL[perm[k]], w);
        }

        #[test]
        fn report_invariants(cs in 0u64..50, is in 0u64..50, cc in 0u64..50, ic in 0u64..50) {
            prop_assume!(cs + is + cc + ic > 0);
            let r = aggregate_counts(counts(cs, is, cc, ic), &ReportMeta::default()).unwrap();
            prop_assert!(r.validate().is_ok());
            prop_assert_eq!(r.any_color, r.n - (cs + is));
        }
    }
}
