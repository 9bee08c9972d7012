//! Library backing the `uie` binary; see [`run`] for the entry point.
//!
//! Every subcommand that produces artifacts writes them under `--out`
//! together with two provenance files:
//!
//! * `resolved-config.cfg` (training commands): the fully resolved
//!   configuration, reparseable as a config file; rerunning with it
//!   reproduces the run bit for bit.
//! * `run.manifest`: the invocation (inputs, seeds, worker count) plus
//!   a SHA-256 digest of each artifact.
//!
//! Errors print as a single machine-parseable line `error: <message>`
//! on stderr and exit with status 1.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use uie_core::config::{
    load_finetune_config, load_pretrain_config, render_finetune_config, render_pretrain_config,
    FinetuneFile, PretrainFile,
};
use uie_core::domain::feature_shift;
use uie_core::extractor::{ConvPyramidExtractor, FeatureExtractor, IdentityExtractor};
use uie_core::image::{load_image, save_png};
use uie_core::iqa::{plcc, psnr, ssim, uciqe, uiqm, ProxyScorer, QualityScorer};
use uie_core::manifest::{DatasetManifest, SourceTag};
use uie_core::net::{forward_enhance, NetworkConfig};
use uie_core::params::Checkpoint;
use uie_core::select::{
    make_mixture_series, monotonicity_rate, rank_metrics, DEFAULT_RATIOS,
};
use uie_core::train::{
    finetune, generate_pseudo_labels, pretrain, write_finetune_log, write_pretrain_log,
};
use uie_core::{Image, ImagePair, UieError};

#[derive(Parser)]
#[command(
    name = "uie",
    version,
    about = "Underwater image enhancement: train, enhance, evaluate, diagnose"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised pretraining on paired degraded/clean images
    Pretrain(PretrainArgs),
    /// Quality-guided fine-tuning on raw images under a frozen scorer
    Finetune(FinetuneArgs),
    /// Run a trained checkpoint over a set of images
    Enhance(EnhanceArgs),
    /// Score predictions against targets and report quality metrics
    Evaluate(EvaluateArgs),
    /// Rank no-reference metrics by monotonicity under degradation
    SelectMetric(SelectMetricArgs),
    /// Measure the feature-space shift between two image sets
    AnalyzeDomain(AnalyzeDomainArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Training manifest (TSV: input, target, source tag)
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoint, logs, and provenance
    #[arg(long)]
    out: PathBuf,
    /// Config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Size of the global worker pool
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pretrained checkpoint to start from
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of raw images (targets, if any, are ignored)
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Frozen quality scorer guiding the score term
    #[arg(long, value_enum, default_value_t = ScorerKind::Proxy)]
    scorer: ScorerKind,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Trained checkpoint (must record its network topology)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of images to enhance (input column only)
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; one PNG per input, named after its stem
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of prediction images
    #[arg(long)]
    pred: PathBuf,
    /// Directory of target images with matching file names
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resize predictions to the target size instead of failing on a
    /// shape mismatch
    #[arg(long)]
    resize_full_ref: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SelectMetricArgs {
    /// Manifest of paired images; targets act as the clean endpoints
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Blend-ratio grid from 0 (clean) to 1 (degraded)
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    ratios: Option<Vec<f64>>,
    /// Absolute tie tolerance; defaults to a small fraction of each
    /// series' score range
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct AnalyzeDomainArgs {
    /// Manifest of the reference image set (input column only)
    #[arg(long)]
    reference: PathBuf,
    /// Manifest of the image set to compare against the reference
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Feature extractor for the mean-feature comparison
    #[arg(long, value_enum, default_value_t = ExtractorKind::ConvPyramid)]
    extractor: ExtractorKind,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScorerKind {
    /// Built-in differentiable no-reference scorer
    Proxy,
    /// Reserved for scorers embedded through the library
    External,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExtractorKind {
    /// Fixed random convolutional pyramid
    ConvPyramid,
    /// Raw pixels as features
    Identity,
}

/// Parse `std::env::args` and dispatch; parse failures and `--help`
/// exit directly with clap's conventions.
pub fn run() -> anyhow::Result<()> {
    dispatch(Cli::parse())
}

/// Parse an explicit argument list and dispatch. Used by tests and
/// embedders; parse failures come back as errors instead of exiting.
pub fn run_from<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch(Cli::try_parse_from(args)?)
}

/// Render an error chain as the single stderr line the binary prints.
/// Sources whose text the parent already embeds are not repeated.
pub fn error_line(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if parts.last().is_none_or(|prev| !prev.contains(&text)) {
            parts.push(text);
        }
    }
    format!("error: {}", parts.join(": ")).replace('\n', "; ")
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::SelectMetric(a) => cmd_select_metric(a),
        Command::AnalyzeDomain(a) => cmd_analyze_domain(a),
    }
}

// ---------------------------------------------------------------------
// shared plumbing

fn init_workers(workers: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(UieError::Config("workers must be at least 1".into()).into());
        }
        // The global pool builds once per process; later requests keep
        // the first pool, which never changes any numeric result.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes =
        fs::read(path).with_context(|| format!("digesting {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Provenance record written as `run.manifest` once all artifacts are
/// on disk.
struct RunManifest {
    lines: Vec<(String, String)>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self { lines: vec![("command".into(), command.into())] }
    }

    fn push(&mut self, key: &str, value: impl Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    fn push_opt_path(&mut self, key: &str, value: &Option<PathBuf>) {
        match value {
            Some(p) => self.push(key, p.display()),
            None => self.push(key, "builtin"),
        }
    }

    fn push_workers(&mut self, workers: Option<usize>) {
        match workers {
            Some(n) => self.push("workers", n),
            None => self.push("workers", "default"),
        }
    }

    /// Digest an artifact already written under `out`.
    fn artifact(&mut self, out: &Path, name: &str) -> anyhow::Result<()> {
        let digest = sha256_file(&out.join(name))?;
        self.push(&format!("artifact_{name}"), digest);
        Ok(())
    }

    fn write(self, out: &Path) -> anyhow::Result<()> {
        let body: String = self
            .lines
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let path = out.join("run.manifest");
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn ensure_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

/// Load every paired manifest entry as a training pair.
fn load_pairs(manifest: &DatasetManifest) -> anyhow::Result<Vec<ImagePair>> {
    let entries: Vec<_> = manifest.paired().collect();
    if entries.is_empty() {
        return Err(UieError::Config(
            "manifest lists no paired records (need input<TAB>target lines)".into(),
        )
        .into());
    }
    let pairs = entries
        .par_iter()
        .map(|e| {
            let input = load_image(&e.input)?;
            let target = load_image(e.target.as_ref().unwrap())?;
            ImagePair::new(input, target)
        })
        .collect::<uie_core::Result<Vec<_>>>()?;
    Ok(pairs)
}

/// Load the input column of every manifest entry with its source tag.
fn load_inputs(manifest: &DatasetManifest) -> anyhow::Result<Vec<(Image, SourceTag)>> {
    if manifest.entries.is_empty() {
        return Err(UieError::Config("manifest lists no images".into()).into());
    }
    let inputs = manifest
        .entries
        .par_iter()
        .map(|e| Ok((load_image(&e.input)?, e.source)))
        .collect::<uie_core::Result<Vec<_>>>()?;
    Ok(inputs)
}

/// Recover the network topology recorded in a checkpoint's config echo.
fn network_from_echo(echo: &str) -> Option<NetworkConfig> {
    if echo.starts_with("mode=pretrain") {
        uie_core::config::parse_pretrain_config(echo).ok().map(|f| f.net)
    } else if echo.starts_with("mode=finetune") {
        uie_core::config::parse_finetune_config(echo).ok().map(|f| f.net)
    } else {
        None
    }
}

/// The checkpoint's recorded topology wins; explicit config keys that
/// disagree with it are rejected rather than silently ignored.
fn resolve_network(
    ckpt: &Checkpoint,
    from_config: &NetworkConfig,
    config_explicit: bool,
) -> anyhow::Result<NetworkConfig> {
    match network_from_echo(&ckpt.config_echo) {
        Some(recorded) => {
            if config_explicit
                && format!("{recorded:?}") != format!("{from_config:?}")
            {
                return Err(UieError::Config(format!(
                    "config network keys conflict with the checkpoint's recorded topology ({recorded:?}); drop the net_* keys or match them"
                ))
                .into());
            }
            Ok(recorded)
        }
        None => Ok(from_config.clone()),
    }
}

fn make_scorer(kind: ScorerKind) -> anyhow::Result<ProxyScorer> {
    match kind {
        ScorerKind::Proxy => Ok(ProxyScorer::new()),
        ScorerKind::External => Err(UieError::Capability(
            "external scorers are not wired into the command line; embed one through the library's scorer interface"
                .into(),
        )
        .into()),
    }
}

fn write_text(path: &Path, body: &str) -> anyhow::Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn config_source(config: &Option<PathBuf>) -> String {
    match config {
        Some(p) => p.display().to_string(),
        None => "builtin defaults".into(),
    }
}

/// File stem used to name a derived artifact after its source image.
fn stem_of(path: &Path) -> anyhow::Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| {
            UieError::Config(format!("cannot derive a file stem from {}", path.display()))
                .into()
        })
}

// ---------------------------------------------------------------------
// pretrain

fn cmd_pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    init_workers(a.workers)?;
    let mut file = match &a.config {
        Some(p) => load_pretrain_config(p)?,
        None => PretrainFile {
            config: Default::default(),
            net: NetworkConfig::default(),
            net_explicit: false,
            splits: BTreeMap::new(),
        },
    };
    if let Some(seed) = a.seed {
        file.config.seed = seed;
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let pairs = load_pairs(&manifest)?;

    // resolved settings up front: flag > config file > built-in default
    println!(
        "pretrain: {} pairs, {} epochs, lr {}, seed {} (config: {}{})",
        pairs.len(),
        file.config.epochs,
        file.config.lr,
        file.config.seed,
        config_source(&a.config),
        if a.seed.is_some() { ", seed from flag" } else { "" }
    );
    let outcome = pretrain(&pairs, &file.net, &file.config)?;

    ensure_out(&a.out)?;
    let resolved = render_pretrain_config(&file);
    let mut ckpt = outcome.checkpoint;
    ckpt.config_echo = resolved.clone();
    ckpt.save(&a.out.join("checkpoint.ckpt"))?;
    write_pretrain_log(&a.out.join("loss-log.csv"), &outcome.log)?;
    write_text(&a.out.join("resolved-config.cfg"), &resolved)?;

    let mut rm = RunManifest::new("pretrain");
    rm.push_opt_path("config", &a.config);
    rm.push("manifest", a.manifest.display());
    rm.push("out", a.out.display());
    rm.push("seed", file.config.seed);
    rm.push_workers(a.workers);
    rm.push("pairs", pairs.len());
    rm.push("params_digest", ckpt.params.digest());
    rm.artifact(&a.out, "checkpoint.ckpt")?;
    rm.artifact(&a.out, "loss-log.csv")?;
    rm.artifact(&a.out, "resolved-config.cfg")?;
    rm.write(&a.out)?;

    let last = outcome.log.last().expect("nonempty log");
    println!(
        "pretrain: {} epochs on {} pairs, final total {:.6} -> {}",
        file.config.epochs,
        pairs.len(),
        last.total,
        a.out.join("checkpoint.ckpt").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// finetune

fn cmd_finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    init_workers(a.workers)?;
    let mut file = match &a.config {
        Some(p) => load_finetune_config(p)?,
        None => FinetuneFile {
            config: Default::default(),
            net: NetworkConfig::default(),
            net_explicit: false,
            splits: BTreeMap::new(),
        },
    };
    if let Some(seed) = a.seed {
        file.config.seed = seed;
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = resolve_network(&ckpt, &file.net, file.net_explicit)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let inputs = load_inputs(&manifest)?;
    let scorer = make_scorer(a.scorer)?;

    // resolved settings up front: flag > config file > built-in default
    println!(
        "finetune: {} raw images, {} steps, batch {}, lr {}, lambda {}/{}/{}, seed {} (config: {}{})",
        inputs.len(),
        file.config.steps,
        file.config.batch_size,
        file.config.lr,
        file.config.weights.lambda1,
        file.config.weights.lambda2,
        file.config.weights.lambda3,
        file.config.seed,
        config_source(&a.config),
        if a.seed.is_some() { ", seed from flag" } else { "" }
    );
    let records = generate_pseudo_labels(&inputs, &ckpt, &net, &scorer)?;
    let extractor = ConvPyramidExtractor::default();
    let outcome = finetune(&records, &ckpt, &scorer, &extractor, &net, &file.config)?;

    ensure_out(&a.out)?;
    let resolved = render_finetune_config(&FinetuneFile {
        config: file.config.clone(),
        net: net.clone(),
        net_explicit: true,
        splits: file.splits.clone(),
    });
    let mut tuned = outcome.checkpoint;
    tuned.config_echo = resolved.clone();
    tuned.save(&a.out.join("checkpoint.ckpt"))?;
    write_finetune_log(&a.out.join("loss-log.csv"), &outcome.log)?;
    write_text(&a.out.join("resolved-config.cfg"), &resolved)?;

    let mut records_csv = String::from("file,q_reference,source\n");
    for (entry, record) in manifest.entries.iter().zip(&records) {
        let name = entry
            .input
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("?");
        records_csv.push_str(&format!(
            "{},{},{}\n",
            name, record.q_reference, record.source
        ));
    }
    write_text(&a.out.join("records.csv"), &records_csv)?;

    let mut rm = RunManifest::new("finetune");
    rm.push_opt_path("config", &a.config);
    rm.push("checkpoint", a.checkpoint.display());
    rm.push("manifest", a.manifest.display());
    rm.push("out", a.out.display());
    rm.push("seed", file.config.seed);
    rm.push_workers(a.workers);
    rm.push("scorer", scorer.tag());
    rm.push("records", records.len());
    rm.push("stopped_early", outcome.stopped_early);
    rm.push("params_digest", tuned.params.digest());
    rm.artifact(&a.out, "checkpoint.ckpt")?;
    rm.artifact(&a.out, "loss-log.csv")?;
    rm.artifact(&a.out, "resolved-config.cfg")?;
    rm.artifact(&a.out, "records.csv")?;
    rm.write(&a.out)?;

    let last = outcome.log.last().expect("nonempty log");
    println!(
        "finetune: {} steps on {} records, final total {:.6}, mean q {:.4}{} -> {}",
        outcome.log.len(),
        records.len(),
        last.total,
        last.mean_q,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        a.out.join("checkpoint.ckpt").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// enhance

fn cmd_enhance(a: EnhanceArgs) -> anyhow::Result<()> {
    init_workers(a.workers)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = network_from_echo(&ckpt.config_echo).ok_or_else(|| {
        UieError::Config(
            "checkpoint records no network topology; re-save it with a rendered config echo"
                .into(),
        )
    })?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    if manifest.entries.is_empty() {
        return Err(UieError::Config("manifest lists no images".into()).into());
    }

    let mut names = Vec::with_capacity(manifest.entries.len());
    let mut seen = BTreeSet::new();
    for entry in &manifest.entries {
        let name = format!("{}.png", stem_of(&entry.input)?);
        if !seen.insert(name.clone()) {
            return Err(UieError::Config(format!(
                "two inputs would both write {name}; rename one"
            ))
            .into());
        }
        names.push(name);
    }

    ensure_out(&a.out)?;
    manifest
        .entries
        .par_iter()
        .zip(names.par_iter())
        .map(|(entry, name)| {
            let img = load_image(&entry.input)?;
            let out_img = forward_enhance(&img, &ckpt.params, &net)?;
            save_png(&out_img, &a.out.join(name))
        })
        .collect::<uie_core::Result<Vec<_>>>()?;

    let mut rm = RunManifest::new("enhance");
    rm.push("checkpoint", a.checkpoint.display());
    rm.push("manifest", a.manifest.display());
    rm.push("out", a.out.display());
    rm.push_workers(a.workers);
    rm.push("images", names.len());
    for name in &names {
        rm.artifact(&a.out, name)?;
    }
    rm.write(&a.out)?;

    println!("enhance: {} images -> {}", names.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------
// evaluate

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Side length no-reference metrics are evaluated at.
const NO_REF_SIZE: usize = 256;

/// Image files directly inside `dir`, keyed by file name.
fn list_images(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries =
        fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let path = entry
            .with_context(|| format!("listing {}", dir.display()))?
            .path();
        let is_image = path.extension().and_then(|e| e.to_str()).is_some_and(|e| {
            IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str())
        });
        if path.is_file() && is_image {
            if let Some(name) = path.file_name().and_then(|s| s.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    if out.is_empty() {
        return Err(UieError::Config(format!(
            "no images (png/jpg/jpeg) found in {}",
            dir.display()
        ))
        .into());
    }
    Ok(out)
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    init_workers(a.workers)?;
    let preds = list_images(&a.pred)?;
    let targets = list_images(&a.target)?;

    let only_pred: Vec<_> =
        preds.keys().filter(|k| !targets.contains_key(*k)).take(5).collect();
    let only_target: Vec<_> =
        targets.keys().filter(|k| !preds.contains_key(*k)).take(5).collect();
    if !only_pred.is_empty() || !only_target.is_empty() {
        return Err(UieError::Config(format!(
            "prediction and target directories disagree; only in pred: {only_pred:?}, only in target: {only_target:?}"
        ))
        .into());
    }

    let scorer = ProxyScorer::new();
    let rows = preds
        .par_iter()
        .map(|(name, pred_path)| {
            let pred = load_image(pred_path)?;
            let target = load_image(&targets[name])?;
            // full-reference at native resolution
            let pred_fr = if pred.height() != target.height()
                || pred.width() != target.width()
            {
                if a.resize_full_ref {
                    pred.resize_bilinear(target.height(), target.width())?
                } else {
                    return Err(UieError::Shape(format!(
                        "{name}: prediction {}x{} vs target {}x{}; pass --resize-full-ref to compare anyway",
                        pred.height(),
                        pred.width(),
                        target.height(),
                        target.width()
                    )));
                }
            } else {
                pred.clone()
            };
            // no-reference on the standard 256x256 protocol resolution
            let pred_nr = pred.resize_bilinear(NO_REF_SIZE, NO_REF_SIZE)?;
            Ok((
                name.clone(),
                [
                    psnr(&pred_fr, &target)?,
                    ssim(&pred_fr, &target)?,
                    uiqm(&pred_nr)?,
                    uciqe(&pred_nr)?,
                    scorer.score(&pred_nr)?,
                ],
            ))
        })
        .collect::<uie_core::Result<Vec<_>>>()?;

    let mut csv = String::from("file,psnr,ssim,uiqm,uciqe,proxy\n");
    let mut sums = [0.0f64; 5];
    for (name, values) in &rows {
        csv.push_str(name);
        for (sum, v) in sums.iter_mut().zip(values) {
            csv.push_str(&format!(",{v}"));
            *sum += v;
        }
        csv.push('\n');
    }
    csv.push_str("mean");
    for sum in sums {
        csv.push_str(&format!(",{}", sum / rows.len() as f64));
    }
    csv.push('\n');

    ensure_out(&a.out)?;
    write_text(&a.out.join("metrics.csv"), &csv)?;

    let mut rm = RunManifest::new("evaluate");
    rm.push("pred", a.pred.display());
    rm.push("target", a.target.display());
    rm.push("out", a.out.display());
    rm.push("resize_full_ref", a.resize_full_ref);
    rm.push_workers(a.workers);
    rm.push("images", rows.len());
    rm.artifact(&a.out, "metrics.csv")?;
    rm.write(&a.out)?;

    println!(
        "evaluate: {} images, mean psnr {:.4} dB, mean ssim {:.4} -> {}",
        rows.len(),
        sums[0] / rows.len() as f64,
        sums[1] / rows.len() as f64,
        a.out.join("metrics.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// select-metric

fn cmd_select_metric(a: SelectMetricArgs) -> anyhow::Result<()> {
    init_workers(a.workers)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let entries: Vec<_> = manifest.paired().collect();
    if entries.is_empty() {
        return Err(UieError::Config(
            "metric selection needs paired records (clean targets with degraded inputs)"
                .into(),
        )
        .into());
    }
    // the metric-selection convention: clean endpoint = target column
    let pairs = entries
        .par_iter()
        .map(|e| {
            Ok((
                load_image(e.target.as_ref().unwrap())?,
                load_image(&e.input)?,
            ))
        })
        .collect::<uie_core::Result<Vec<(Image, Image)>>>()?;

    let ratios = a.ratios.clone().unwrap_or_else(|| DEFAULT_RATIOS.to_vec());
    let scorer = ProxyScorer::new();
    type Metric = Box<dyn Fn(&Image) -> uie_core::Result<f64> + Sync>;
    let candidates: Vec<(&str, Metric)> = vec![
        ("uiqm", Box::new(uiqm)),
        ("uciqe", Box::new(uciqe)),
        ("proxy", Box::new(move |img: &Image| scorer.score(img))),
    ];

    let mut table = Vec::new();
    for (tag, metric) in &candidates {
        let rate =
            monotonicity_rate(|img| metric(img), &pairs, &ratios, a.tolerance)?;
        // correlation against the degradation level: a good metric
        // tracks 1 - t as the blend moves toward the degraded endpoint
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (clean, degraded) in &pairs {
            let series = make_mixture_series(clean, degraded, &ratios)?;
            for (t, img) in series.ratios.iter().zip(&series.mixed) {
                scores.push(metric(img)?);
                labels.push(1.0 - t);
            }
        }
        table.push((tag.to_string(), rate, plcc(&scores, &labels)?));
    }
    let ranked = rank_metrics(&table)?;

    let mut csv = String::from("metric,monotonicity,plcc,rank\n");
    for row in &ranked {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.tag, row.monotonicity, row.plcc, row.rank
        ));
    }
    ensure_out(&a.out)?;
    write_text(&a.out.join("selection.csv"), &csv)?;

    let mut rm = RunManifest::new("select-metric");
    rm.push("manifest", a.manifest.display());
    rm.push("out", a.out.display());
    rm.push(
        "ratios",
        ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","),
    );
    match a.tolerance {
        Some(t) => rm.push("tolerance", t),
        None => rm.push("tolerance", "relative-default"),
    }
    rm.push_workers(a.workers);
    rm.push("pairs", pairs.len());
    rm.artifact(&a.out, "selection.csv")?;
    rm.write(&a.out)?;

    let best = &ranked[0];
    println!(
        "select-metric: {} pairs, best {} (monotonicity {:.4}, plcc {:.4}) -> {}",
        pairs.len(),
        best.tag,
        best.monotonicity,
        best.plcc,
        a.out.join("selection.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// analyze-domain

fn cmd_analyze_domain(a: AnalyzeDomainArgs) -> anyhow::Result<()> {
    init_workers(a.workers)?;
    let reference = DatasetManifest::load(&a.reference)?;
    let other = DatasetManifest::load(&a.manifest)?;
    let ref_images: Vec<Image> =
        load_inputs(&reference)?.into_iter().map(|(img, _)| img).collect();
    let other_images: Vec<Image> =
        load_inputs(&other)?.into_iter().map(|(img, _)| img).collect();

    let extractor: Box<dyn FeatureExtractor> = match a.extractor {
        ExtractorKind::ConvPyramid => Box::new(ConvPyramidExtractor::default()),
        ExtractorKind::Identity => Box::new(IdentityExtractor),
    };
    let report = feature_shift(&ref_images, &other_images, &*extractor)?;

    ensure_out(&a.out)?;
    let json = serde_json::to_string_pretty(&report).context("serializing report")?;
    write_text(&a.out.join("domain-report.json"), &json)?;

    let mut rm = RunManifest::new("analyze-domain");
    rm.push("reference", a.reference.display());
    rm.push("manifest", a.manifest.display());
    rm.push("out", a.out.display());
    rm.push("extractor", report.extractor.clone());
    rm.push_workers(a.workers);
    rm.push("reference_images", ref_images.len());
    rm.push("compared_images", other_images.len());
    rm.artifact(&a.out, "domain-report.json")?;
    rm.write(&a.out)?;

    let aligned = match report.delta_domain {
        Some(d) => format!("{d:.6}"),
        None => "n/a (sets not aligned)".into(),
    };
    println!(
        "analyze-domain: pixel discrepancy {}, feature shift {:.6} -> {}",
        aligned,
        report.delta_feat,
        a.out.join("domain-report.json").display()
    );
    Ok(())
}
