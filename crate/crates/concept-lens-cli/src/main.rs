//! Command-line interface: extract concept directions, synthesize images,
//! probe directions against image corpora, judge images, run full sweeps,
//! and render reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand};

use concept_lens::backend::toy::{ToyBackend, ToyConfig};
use concept_lens::backend::{Backend, BackendConfig, BackendRegistry, LayerIndex};
use concept_lens::concepts::{
    bundled_baseline_words, compute_language_baseline, concept_direction, load_baseline_words,
};
use concept_lens::image::PixelImage;
use concept_lens::judge::{
    evaluate_image, JudgeClient, JudgeProtocol, RecognitionRecord, RemoteClient,
    RemoteJudgeConfig, ToyJudge,
};
use concept_lens::probe::{ImageCorpus, SimilarityMetric};
use concept_lens::runner::report::{probe_report, report, ReportKind, PROBE_PROFILE_FILE};
use concept_lens::runner::{run_sweep, EntryStatus, ExperimentConfig, ProtocolChoice, RunManifest};
use concept_lens::synth::{synthesize, SynthesisConfig};

#[derive(Parser)]
#[command(
    name = "concept-lens",
    version,
    about = "Extract concept directions from vision-language models and synthesize images for them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute concept direction vectors and emit them as JSON.
    Extract(ExtractArgs),
    /// Synthesize an image for one concept at one layer.
    Synthesize(SynthesizeArgs),
    /// Score concept directions against image corpora across layers.
    Probe(ProbeArgs),
    /// Ask a judge model what it sees in a directory of images.
    Judge(JudgeArgs),
    /// Run the full category-by-layer synthesis sweep.
    Sweep(SweepArgs),
    /// Render reports from a finished (or partial) sweep.
    Report(ReportArgs),
}

/// Which model adapter to use.
#[derive(Args)]
struct BackendArgs {
    /// Backend adapter name.
    #[arg(long, default_value = "toy")]
    backend: String,
    /// Input resolution override.
    #[arg(long)]
    resolution: Option<usize>,
    /// Model weights path, for adapters that need one.
    #[arg(long)]
    model_path: Option<PathBuf>,
}

impl BackendArgs {
    fn create(&self) -> anyhow::Result<Arc<dyn Backend>> {
        let config = BackendConfig {
            name: self.backend.clone(),
            model_path: self.model_path.clone(),
            image_resolution: self.resolution,
        };
        Ok(BackendRegistry::with_builtins().create(&config)?)
    }

    /// A concretely-typed toy backend, for clients that need its classifier.
    fn create_toy(&self) -> anyhow::Result<Arc<ToyBackend>> {
        ensure!(
            self.backend == "toy",
            "the offline judge grades with the toy classifier and requires --backend toy"
        );
        let toy = match self.resolution {
            None => ToyBackend::new(),
            Some(r) => ToyBackend::with_config(ToyConfig::at_resolution(r)?)?,
        };
        Ok(Arc::new(toy))
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Concept word or phrase; repeatable.
    #[arg(long = "concept", required = true)]
    concepts: Vec<String>,
    /// Layer to read activations at.
    #[arg(long)]
    layer: usize,
    /// Baseline word list file; the bundled 100-word list when omitted.
    #[arg(long)]
    baseline_words: Option<PathBuf>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    concept: String,
    #[arg(long)]
    layer: usize,
    /// Optimisation steps; the preset's count when omitted.
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate; the per-layer preset when omitted.
    #[arg(long)]
    lr: Option<f64>,
    /// Attention softmax temperature; the per-layer preset when omitted.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save an intermediate image every K steps.
    #[arg(long, value_name = "K")]
    snapshot_every: Option<usize>,
    /// Base recipe: "real" (600 steps, full augmentation) or "toy"
    /// (300 steps, noise-only augmentation).
    #[arg(long, default_value = "real")]
    preset: String,
    #[arg(long)]
    baseline_words: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out/synthesize")]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Comma-separated concepts to probe.
    #[arg(long, value_delimiter = ',', required = true)]
    concepts: Vec<String>,
    /// Image corpus as NAME=DIR; repeatable.
    #[arg(long = "corpus", value_name = "NAME=PATH")]
    corpora: Vec<String>,
    /// Also probe against a uniform-noise corpus of this many images.
    #[arg(long, value_name = "N")]
    noise: Option<usize>,
    /// Similarity metric: aggregate, max_patch, or both.
    #[arg(long, default_value = "both")]
    metric: String,
    /// Comma-separated layers; every backend layer when omitted.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long)]
    baseline_words: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the profile JSON, p-values, and plots.
    #[arg(long, default_value = "out/probe")]
    out: PathBuf,
}

#[derive(Args)]
struct JudgeArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Directory of PNG images; each file stem is taken as its concept.
    #[arg(long)]
    images: PathBuf,
    /// Question protocol: open, hinted, or both.
    #[arg(long, default_value = "both")]
    protocol: String,
    /// Samples per image per protocol.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Judge client: offline (toy classifier) or remote.
    #[arg(long, default_value = "offline")]
    client: String,
    /// Mean-verdict threshold at which an image counts as recognised.
    #[arg(long, default_value_t = 0.5)]
    recognition_threshold: f64,
    /// Category hint word; required when the protocol includes hinted.
    #[arg(long)]
    category: Option<String>,
    /// TOML file describing the remote endpoint; credentials come from the
    /// environment variable it names.
    #[arg(long)]
    remote_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full records JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment configuration TOML; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
    /// Override the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing manifest.json.
    #[arg(long)]
    run: PathBuf,
    /// Report kind: recognition, probe, or gallery.
    #[arg(long)]
    kind: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(args) => cmd_extract(args),
        Command::Synthesize(args) => cmd_synthesize(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Judge(args) => cmd_judge(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn baseline_word_list(path: &Option<PathBuf>) -> anyhow::Result<Vec<String>> {
    Ok(match path {
        Some(path) => load_baseline_words(path)?,
        None => bundled_baseline_words(),
    })
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> anyhow::Result<()> {
    let backend = args.backend.create()?;
    let words = baseline_word_list(&args.baseline_words)?;
    let layer = LayerIndex(args.layer);
    let baseline = compute_language_baseline(backend.as_ref(), &words, layer)?;
    let mut vectors = Vec::with_capacity(args.concepts.len());
    for concept in &args.concepts {
        vectors.push(concept_direction(backend.as_ref(), concept, layer, &baseline)?);
    }
    let json = serde_json::to_string_pretty(&vectors)?;
    write_or_print(&args.out, &json)
}

fn cmd_synthesize(args: SynthesizeArgs) -> anyhow::Result<()> {
    let backend = args.backend.create()?;
    let words = baseline_word_list(&args.baseline_words)?;
    let layer = LayerIndex(args.layer);
    let baseline = compute_language_baseline(backend.as_ref(), &words, layer)?;
    let direction = concept_direction(backend.as_ref(), &args.concept, layer, &baseline)?;

    let mut config = match args.preset.as_str() {
        "real" => SynthesisConfig::for_layer(args.layer),
        "toy" => SynthesisConfig::toy(),
        other => bail!("unknown preset {other:?}; use real or toy"),
    };
    if let Some(steps) = args.steps {
        config.optimizer.steps = steps;
    }
    if let Some(lr) = args.lr {
        config.optimizer.learning_rate = lr;
    }
    if let Some(tau) = args.tau {
        config.optimizer.temperature = tau;
    }
    config.snapshot_every = args.snapshot_every;

    let run = synthesize(&direction, backend.as_ref(), &config, args.seed)?;

    let dir = args
        .out
        .join(format!("{}-layer{}", args.concept.replace('/', "-"), args.layer));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let image_path = dir.join("image.png");
    run.final_image.save_png(&image_path)?;
    for snapshot in &run.snapshots {
        let path = dir.join(format!("snapshot_{:04}.png", snapshot.step));
        snapshot.image.save_png(&path)?;
    }

    #[derive(serde::Serialize)]
    struct Trajectory<'a> {
        concept: &'a str,
        layer: usize,
        seed: u64,
        synthesis: &'a SynthesisConfig,
        loss_trajectory: &'a [f64],
        final_objective: f64,
    }
    let trajectory_path = dir.join("trajectory.json");
    std::fs::write(
        &trajectory_path,
        serde_json::to_string_pretty(&Trajectory {
            concept: &args.concept,
            layer: args.layer,
            seed: args.seed,
            synthesis: &config,
            loss_trajectory: &run.loss_trajectory,
            final_objective: run.final_objective,
        })?,
    )?;

    println!(
        "synthesized `{}` at layer {}: final objective {:.4}, final loss {:.4}",
        args.concept,
        args.layer,
        run.final_objective,
        run.loss_trajectory.last().copied().unwrap_or(f64::NAN),
    );
    println!("image: {}", image_path.display());
    println!("trajectory: {}", trajectory_path.display());
    Ok(())
}

fn parse_metrics(metric: &str) -> anyhow::Result<Vec<SimilarityMetric>> {
    Ok(match metric {
        "both" => vec![SimilarityMetric::Aggregate, SimilarityMetric::MaxPatch],
        other => vec![other.parse::<SimilarityMetric>()?],
    })
}

fn cmd_probe(args: ProbeArgs) -> anyhow::Result<()> {
    let backend = args.backend.create()?;
    let descriptor = backend.describe();
    let resolution = descriptor.image_resolution;

    let mut corpora = Vec::new();
    for spec in &args.corpora {
        let Some((name, path)) = spec.split_once('=') else {
            bail!("corpus {spec:?} is not NAME=PATH");
        };
        corpora.push(ImageCorpus::from_dir(name, Path::new(path), resolution)?);
    }
    if let Some(count) = args.noise {
        corpora.push(ImageCorpus::noise("noise", resolution, count, args.seed)?);
    }
    ensure!(
        !corpora.is_empty(),
        "no corpora given; pass --corpus NAME=PATH and/or --noise N"
    );

    let metrics = parse_metrics(&args.metric)?;
    let layers: Vec<LayerIndex> = if args.layers.is_empty() {
        (0..descriptor.layer_count).map(LayerIndex).collect()
    } else {
        args.layers.iter().copied().map(LayerIndex).collect()
    };
    let words = baseline_word_list(&args.baseline_words)?;

    let profile = concept_lens::probe::profile(
        backend.as_ref(),
        &args.concepts,
        &words,
        &corpora,
        &layers,
        &metrics,
    )?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let profile_path = args.out.join(PROBE_PROFILE_FILE);
    std::fs::write(&profile_path, serde_json::to_string_pretty(&profile)?)?;
    println!("wrote {}", profile_path.display());
    for path in probe_report(&profile, args.seed, &args.out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn build_judge_client(
    client: &str,
    backend: &BackendArgs,
    remote_config: &Option<PathBuf>,
) -> anyhow::Result<Box<dyn JudgeClient>> {
    match client {
        "offline" => Ok(Box::new(ToyJudge::new(backend.create_toy()?))),
        "remote" => {
            let Some(path) = remote_config else {
                bail!("--client remote requires --remote-config FILE");
            };
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let config: RemoteJudgeConfig =
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            Ok(Box::new(RemoteClient::new(config)?))
        }
        other => bail!("unknown judge client {other:?}; use offline or remote"),
    }
}

fn cmd_judge(args: JudgeArgs) -> anyhow::Result<()> {
    let protocol: ProtocolChoice = args.protocol.parse()?;
    let needs_hint = matches!(protocol, ProtocolChoice::Hinted | ProtocolChoice::Both);
    if needs_hint && args.category.is_none() {
        bail!("--protocol {} needs --category for the hinted question", args.protocol);
    }
    let client = build_judge_client(&args.client, &args.backend, &args.remote_config)?;
    let resolution = args.backend.create()?.describe().image_resolution;

    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.images)
        .with_context(|| format!("reading {}", args.images.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "no PNG images in {}", args.images.display());

    let mut all_records: Vec<RecognitionRecord> = Vec::new();
    for path in &paths {
        let concept = path
            .file_stem()
            .and_then(|s| s.to_str())
            .context("image filename is not valid UTF-8")?
            .to_string();
        let image = PixelImage::load(path, resolution)?;
        let protocols: Vec<JudgeProtocol> = match protocol {
            ProtocolChoice::Open => vec![JudgeProtocol::open(args.samples)],
            ProtocolChoice::Hinted => vec![JudgeProtocol::hinted(
                args.category.clone().expect("checked above"),
                args.samples,
            )],
            ProtocolChoice::Both => vec![
                JudgeProtocol::open(args.samples),
                JudgeProtocol::hinted(args.category.clone().expect("checked above"), args.samples),
            ],
        };
        let records = evaluate_image(
            &image,
            &path.display().to_string(),
            &concept,
            &protocols,
            client.as_ref(),
            args.seed,
        )?;
        let summary: Vec<String> = records
            .iter()
            .map(|r| {
                format!(
                    "{} {:.2}{}",
                    r.protocol.kind,
                    r.rate,
                    if r.recognised(args.recognition_threshold) {
                        " (recognised)"
                    } else {
                        ""
                    }
                )
            })
            .collect();
        println!("{concept}: {}", summary.join(", "));
        all_records.extend(records);
    }

    if args.out.is_some() {
        let json = serde_json::to_string_pretty(&all_records)?;
        write_or_print(&args.out, &json)?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = args.output_dir {
        config.experiment.output_dir = dir;
    }

    let backend = BackendRegistry::with_builtins().create(&(&config.backend).into())?;
    if args.print_config {
        let catalogue = config.load_catalogue()?;
        let resolved = config.resolve(&catalogue, &backend.describe())?;
        print!("{}", resolved.to_toml_string()?);
        return Ok(());
    }

    let judge_client: Option<Box<dyn JudgeClient>> = if config.judge.enabled {
        match config.judge.client.as_str() {
            "offline" => {
                let toy_args = BackendArgs {
                    backend: config.backend.name.clone(),
                    resolution: config.backend.image_resolution,
                    model_path: config.backend.model_path.clone(),
                };
                Some(Box::new(ToyJudge::new(toy_args.create_toy()?)))
            }
            "remote" => {
                let remote = config
                    .judge
                    .remote
                    .clone()
                    .context("judge.client = \"remote\" requires a [judge.remote] section")?;
                Some(Box::new(RemoteClient::new(remote)?))
            }
            other => bail!("unknown judge client {other:?}"),
        }
    } else {
        None
    };

    let manifest = run_sweep(backend.as_ref(), &config, judge_client.as_deref())?;
    let completed = manifest
        .entries
        .iter()
        .filter(|e| matches!(e.status, EntryStatus::Completed))
        .count();
    println!(
        "sweep finished: {completed}/{} pairs completed, manifest at {}",
        manifest.entries.len(),
        config.experiment.output_dir.join("manifest.json").display()
    );
    let failed = manifest.incomplete();
    if !failed.is_empty() {
        for entry in &failed {
            if let EntryStatus::Failed { message } = &entry.status {
                eprintln!(
                    "failed: {}/{} layer {}: {message}",
                    entry.category, entry.concept, entry.layer
                );
            }
        }
        bail!("{} pair(s) failed; rerun to retry them", failed.len());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let kind: ReportKind = args.kind.parse()?;
    let manifest = RunManifest::load(&args.run)?;
    for path in report(&manifest, &args.run, kind)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
