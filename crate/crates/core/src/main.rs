use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use caption_xai::attribution::{aggregate, records_tsv, render_chart, render_report, score_samples, CaptionEmbeddings, CaptionSet, ReportMeta};
use caption_xai::classifier::{evaluate, finetune, CheckpointRef, Hyperparams};
use caption_xai::dataset::{build_to_dir, sample_order_fingerprint, DatasetManifest, DigitSource, Split, SplitSizes, Variant};
use caption_xai::matcher::{compute_score_matrix, select_swaps, ScoreMatrix, SwapPlan, SwapPolicy};
use caption_xai::pipeline::{matching_subset, run_end_to_end, write_summary, BackboneKind, ClipBackend, ClipKind, RunConfig};
use caption_xai::probes::{compute_stats, coverage_ratio, enumerate_probe_points, format_percent, ActivationStats};
use caption_xai::raster::Raster;
use caption_xai::surgeon::SurgicalEncoder;
use caption_xai::{Result, XaiError};

#[derive(Parser)]
#[command(name = "xai", version, about = "Caption-based concept attribution for CNN classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset synthesis.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Fine-tune the binary classifier.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Per-channel activation statistics.
    Stats(StatsArgs),
    /// Correlation score matrix between classifier and CLIP channels.
    Match(MatchArgs),
    /// Select swaps from a score matrix.
    Plan(PlanArgs),
    /// Baseline or surgical CLIP image embeddings.
    Embed(EmbedArgs),
    /// Concept report from a swap plan.
    Report(ReportArgs),
    /// Print probe catalog sizes and the coverage ratio.
    Catalog(ClipArgs),
    /// Run every stage from a config file.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    Build {
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SplitSizes::default().train)]
        train: usize,
        #[arg(long, default_value_t = SplitSizes::default().val)]
        val: usize,
        #[arg(long, default_value_t = SplitSizes::default().test)]
        test: usize,
        #[arg(long, default_value_t = SplitSizes::default().real_world)]
        real_world: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Hyperparams::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = Hyperparams::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = Hyperparams::default().lr)]
    lr: f64,
    #[arg(long, default_value = "resnet50")]
    backbone: BackboneKind,
    /// torchvision ResNet-50 state dict for the backbone.
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args, Clone)]
struct ClipArgs {
    #[arg(long, default_value = "rn50")]
    clip: ClipKind,
    /// CLIP parameters as safetensors or a PyTorch state dict.
    #[arg(long)]
    clip_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    clip_seed: u64,
}

impl ClipArgs {
    fn build(&self) -> Result<(ClipBackend, String)> {
        let cfg = RunConfig { clip: self.clip, clip_weights: self.clip_weights.clone(), clip_seed: self.clip_seed, ..RunConfig::default() };
        let b = ClipBackend::build(&cfg)?;
        let id = b.identity(&cfg);
        Ok((b, id))
    }
}

#[derive(Args, Clone)]
struct SubsetArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 256)]
    subset: usize,
    #[arg(long, default_value_t = 0)]
    subset_seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Standalone,
    Clip,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, value_enum)]
    encoder: EncoderArg,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    subset: SubsetArgs,
    #[command(flatten)]
    clip: ClipArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    stats_s: PathBuf,
    #[arg(long)]
    stats_c: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    subset: SubsetArgs,
    #[command(flatten)]
    clip: ClipArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value = "argmax")]
    policy: SwapPolicy,
    #[arg(long, default_value = "-inf", allow_hyphen_values = true)]
    threshold: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SurgeryArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    stats_s: PathBuf,
    #[arg(long)]
    stats_c: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "real_world")]
    split: Split,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[command(flatten)]
    clip: ClipArgs,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    surgery: SurgeryArgs,
    /// Ignore the plan and emit unmodified CLIP embeddings.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    surgery: SurgeryArgs,
    /// `role = caption` lines overriding the default captions.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long, default_value = "cli")]
    run_id: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    chart: Option<PathBuf>,
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the tiny smoke configuration instead of the defaults.
    #[arg(long)]
    tiny: bool,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set")]
    set: Vec<String>,
}

fn load_subset(args: &SubsetArgs) -> Result<(DatasetManifest, Vec<(u64, Raster)>, String)> {
    let manifest = DatasetManifest::load(&args.data)?;
    let ids = matching_subset(&manifest, args.subset, args.subset_seed)?;
    let train = manifest.load_split(&args.data, Split::Train)?;
    let images = ids
        .iter()
        .map(|id| (*id, train.iter().find(|s| s.sample_id == *id).expect("subset drawn from train").image.clone()))
        .collect();
    let fp = sample_order_fingerprint(&ids);
    Ok((manifest, images, fp))
}

fn borrow(images: &[(u64, Raster)]) -> Vec<(u64, &Raster)> {
    images.iter().map(|(id, r)| (*id, r)).collect()
}

fn parse_threshold(s: &str) -> Result<f64> {
    match s {
        "-inf" => Ok(f64::NEG_INFINITY),
        v => v.parse().map_err(|_| XaiError::Config(format!("threshold `{v}` is not a number"))),
    }
}

const EMB_MAGIC: &[u8; 8] = b"XAIEMB01";

/// Magic, row count u64, width u64, then per row a sample id u64 and f32 values, little-endian.
fn write_embeddings(path: &Path, rows: &[(u64, Vec<f32>)]) -> Result<()> {
    let dim = rows.first().map(|r| r.1.len()).unwrap_or(0);
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(EMB_MAGIC)?;
    f.write_all(&(rows.len() as u64).to_le_bytes())?;
    f.write_all(&(dim as u64).to_le_bytes())?;
    for (id, v) in rows {
        f.write_all(&id.to_le_bytes())?;
        for x in v {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data { command: DataCommand::Build { variant, seed, out, train, val, test, real_world } } => {
            let sizes = SplitSizes { train, val, test, real_world };
            let m = build_to_dir(&DigitSource::bundled()?, variant, seed, sizes, &out)?;
            println!("{} samples written to {} ({})", m.entries.len(), out.display(), m.content_fingerprint);
        }
        Command::Train(a) => {
            let manifest = DatasetManifest::load(&a.data)?;
            let cfg = RunConfig { backbone: a.backbone, ..RunConfig::default() };
            let hp = Hyperparams { epochs: a.epochs, seed: a.seed, batch_size: a.batch_size, lr: a.lr, ..Hyperparams::default() };
            let out = finetune(cfg.backbone_spec(), &manifest, &a.data, &hp, a.pretrained.as_deref(), &a.out)?;
            if let Some(acc) = out.curves.val_accuracy.last() {
                println!("final val accuracy {acc:.4}");
            }
            println!("checkpoint {} ({})", a.out.display(), out.checkpoint.weights_fingerprint);
        }
        Command::Eval(a) => {
            let ckpt = CheckpointRef::load(&a.ckpt)?;
            let model = ckpt.open()?;
            let manifest = DatasetManifest::load(&a.data)?;
            let m = evaluate(&model, &ckpt, &manifest, &a.data, a.split, a.batch_size)?;
            fs::write(&a.report, serde_json::to_string_pretty(&m)? + "\n")?;
            println!("{} accuracy {:.4} on {} images", a.split, m.accuracy, m.total);
        }
        Command::Stats(a) => {
            let (manifest, images, subset_fp) = load_subset(&a.subset)?;
            let source_fp = format!("{}:{subset_fp}", manifest.content_fingerprint);
            let stats = match a.encoder {
                EncoderArg::Standalone => {
                    let ckpt = a.ckpt.ok_or_else(|| XaiError::Config("--ckpt is required for the standalone encoder".into()))?;
                    let model = CheckpointRef::load(&ckpt)?.open()?;
                    let points = enumerate_probe_points(&model, false)?;
                    compute_stats(&model, &borrow(&images), &points, a.subset.batch_size, &source_fp)?
                }
                EncoderArg::Clip => {
                    let (clip, _) = a.clip.build()?;
                    let points = enumerate_probe_points(clip.image(), true)?;
                    compute_stats(clip.image(), &borrow(&images), &points, a.subset.batch_size, &source_fp)?
                }
            };
            stats.save(&a.out)?;
            println!("{} channels, {} degenerate", stats.channel_total(), stats.degenerate_channels(caption_xai::matcher::SIGMA_MIN).len());
        }
        Command::Match(a) => {
            let (_, images, _) = load_subset(&a.subset)?;
            let model = CheckpointRef::load(&a.ckpt)?.open()?;
            let (clip, _) = a.clip.build()?;
            let ds = ActivationStats::load(&a.stats_s)?;
            let cs = ActivationStats::load(&a.stats_c)?;
            let z = compute_score_matrix(&model, clip.image(), &ds, &cs, &borrow(&images), a.subset.batch_size)?;
            z.write(&a.out)?;
            println!("score matrix {:?} written to {}", z.shape(), a.out.display());
        }
        Command::Plan(a) => {
            let z = ScoreMatrix::read(&a.scores)?;
            let plan = select_swaps(&z, a.policy, parse_threshold(&a.threshold)?)?;
            plan.save(&a.out)?;
            println!("{} swaps ({})", plan.len(), plan.fingerprint());
        }
        Command::Embed(a) => {
            let s = &a.surgery;
            let model = CheckpointRef::load(&s.ckpt)?.open()?;
            let (clip, _) = s.clip.build()?;
            let plan = if a.baseline { SwapPlan::empty() } else { SwapPlan::load(&s.plan)? };
            let surgical = SurgicalEncoder::new(clip.image(), &model, plan, &ActivationStats::load(&s.stats_s)?, &ActivationStats::load(&s.stats_c)?)?;
            let manifest = DatasetManifest::load(&s.data)?;
            let samples = manifest.load_split(&s.data, s.split)?;
            let mut rows = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(s.batch_size.max(1)) {
                let images: Vec<&Raster> = chunk.iter().map(|x| &x.image).collect();
                let emb = if a.baseline { surgical.baseline_forward(&images)? } else { surgical.surgical_forward(&images)? };
                rows.extend(chunk.iter().map(|x| x.sample_id).zip(emb));
            }
            write_embeddings(&a.out, &rows)?;
            println!("{} embeddings written to {}", rows.len(), a.out.display());
        }
        Command::Report(a) => {
            let s = &a.surgery;
            let captions = match &a.captions {
                Some(p) => CaptionSet::from_config_text(&fs::read_to_string(p)?)?,
                None => CaptionSet::default(),
            };
            let ckpt = CheckpointRef::load(&s.ckpt)?;
            let model = ckpt.open()?;
            let (clip, clip_id) = s.clip.build()?;
            let plan = SwapPlan::load(&s.plan)?;
            let ds = ActivationStats::load(&s.stats_s)?;
            let cs = ActivationStats::load(&s.stats_c)?;
            let surgical = SurgicalEncoder::new(clip.image(), &model, plan.clone(), &ds, &cs)?;
            let manifest = DatasetManifest::load(&s.data)?;
            let samples = manifest.load_split(&s.data, s.split)?;
            let emb = CaptionEmbeddings::embed(&captions, clip.text())?;
            let records = score_samples(&samples, &emb, &surgical, s.batch_size)?;
            if let Some(p) = &a.records {
                fs::write(p, records_tsv(&records))?;
            }
            let meta = ReportMeta {
                run_id: a.run_id.clone(),
                model_variant: ckpt.dataset_variant.to_string(),
                dataset_variant: format!("{}/{}", manifest.variant, s.split),
                plan_fingerprint: plan.fingerprint(),
                caption_set: captions,
                provenance: [
                    ("dataset", manifest.content_fingerprint.clone()),
                    ("checkpoint", ckpt.weights_fingerprint.clone()),
                    ("stats_standalone", ds.fingerprint()),
                    ("stats_clip", cs.fingerprint()),
                    ("clip", clip_id),
                ]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            };
            let report = aggregate(&records, &meta)?;
            render_report(&report, &a.out)?;
            if let Some(chart) = &a.chart {
                render_chart(std::slice::from_ref(&report), chart)?;
            }
            println!("P(shape) {:.3}, P(color) {:.3}: {}", report.p_shape, report.p_color, report.dominant_concept);
        }
        Command::Catalog(a) => {
            let (clip, _) = a.build()?;
            let model = caption_xai::classifier::Classifier::new(RunConfig::default().backbone_spec(), 0)?;
            let s = enumerate_probe_points(&model, false)?;
            let c = enumerate_probe_points(clip.image(), true)?;
            let (ns, nc) = (caption_xai::nets::total_channels(&s), caption_xai::nets::total_channels(&c));
            println!("standalone: {} layers, {ns} channels", s.len());
            println!("clip swappable: {} layers, {nc} channels", c.len());
            println!("score matrix: {ns} x {nc}");
            println!("coverage: {nc}/{ns} = {}", format_percent(coverage_ratio(nc, ns)));
        }
        Command::Run(a) => {
            let mut cfg = if a.tiny { RunConfig::tiny() } else { RunConfig::default() };
            if let Some(p) = &a.config {
                cfg.apply_text(&fs::read_to_string(p).map_err(|e| XaiError::MissingSource(format!("{}: {e}", p.display())))?)?;
            }
            if !a.set.is_empty() {
                cfg.apply_text(&a.set.join("\n"))?;
            }
            let summary = run_end_to_end(&cfg)?;
            let path = write_summary(&cfg, &summary)?;
            for v in &summary.variants {
                let acc: Vec<String> = v.metrics.iter().map(|m| format!("{} {:.4}", m.split, m.accuracy)).collect();
                println!(
                    "{}: {}; P(shape) {:.3}, P(color) {:.3}, dominant {}",
                    v.variant,
                    acc.join(", "),
                    v.report.p_shape,
                    v.report.p_color,
                    v.report.dominant_concept
                );
            }
            println!("chart {}; summary {}", summary.chart.display(), path.display());
        }
    }
    Ok(())
}
