//! Experiment orchestration: configuration files, the category-by-layer
//! sweep, resumable run manifests, and report generation.
//!
//! A sweep walks every (concept, layer) pair, synthesizes one image per
//! pair with layer-keyed hyperparameters, optionally judges it, and records
//! everything in `manifest.json` under the output directory:
//!
//! ```text
//! out/
//!   manifest.json
//!   <category>/<concept>/layer<k>/image.png
//!   <category>/<concept>/layer<k>/trajectory.json
//! ```
//!
//! Pairs already marked completed in an existing manifest are skipped, so
//! an interrupted sweep resumes where it stopped and adding concepts never
//! recomputes or reseeds existing ones.

pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendDescriptor, LayerIndex};
use crate::concepts::{
    compute_language_baseline, concept_direction, ConceptCatalogue, LanguageBaseline,
};
use crate::error::{Error, Result};
use crate::imrep::AggregationMode;
use crate::judge::{evaluate_image, JudgeClient, JudgeProtocol, RecognitionRecord};
use crate::seeds;
use crate::synth::{
    self, layer_preset, AugmentationConfig, OptimizerConfig, SynthesisConfig,
};

// ── Configuration file ───────────────────────────────────────────────────

/// `[backend]` section: which model adapter to instantiate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_resolution: Option<usize>,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            name: "toy".to_string(),
            model_path: None,
            image_resolution: None,
        }
    }
}

impl From<&BackendSection> for crate::backend::BackendConfig {
    fn from(section: &BackendSection) -> Self {
        crate::backend::BackendConfig {
            name: section.name.clone(),
            model_path: section.model_path.clone(),
            image_resolution: section.image_resolution,
        }
    }
}

/// `[experiment]` section: what to sweep and where to put it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Layers to synthesize at.
    pub layers: Vec<usize>,
    /// Catalogue categories to include; empty means all.
    #[serde(default)]
    pub categories: Vec<String>,
    /// Catalogue file; the bundled catalogue when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalogue: Option<PathBuf>,
    /// Baseline word list file; the bundled list when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_words: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    /// Worker threads for the sweep.
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            layers: vec![1, 5, 10, 15, 20, 25, 30],
            categories: Vec::new(),
            catalogue: None,
            baseline_words: None,
            output_dir: PathBuf::from("out"),
            master_seed: 0,
            workers: 1,
        }
    }
}

/// Per-layer hyperparameter override.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

/// `[synthesis]` section: optimizer and augmentation settings shared by all
/// layers, plus layer-keyed learning-rate/temperature overrides. Learning
/// rate and temperature default to the per-layer presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    pub steps: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub grad_clip_norm: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub max_shift: usize,
    pub noise_sigma: f64,
    pub mode: AggregationMode,
    /// Save intermediate images every this many steps; 0 disables.
    pub snapshot_every: usize,
    /// Keys are layer indices as strings (TOML table keys).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layer_overrides: BTreeMap<String, LayerOverride>,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection {
            steps: 600,
            batch_size: 8,
            momentum: 0.9,
            grad_clip_norm: 1.0,
            sigma_start: 2.0,
            sigma_end: 16.0,
            max_shift: synth::DEFAULT_MAX_SHIFT,
            noise_sigma: synth::DEFAULT_NOISE_SIGMA,
            mode: AggregationMode::Attention,
            snapshot_every: 0,
            layer_overrides: BTreeMap::new(),
        }
    }
}

/// Which question protocols to run when judging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolChoice {
    Open,
    Hinted,
    Both,
}

impl std::str::FromStr for ProtocolChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(ProtocolChoice::Open),
            "hinted" => Ok(ProtocolChoice::Hinted),
            "both" => Ok(ProtocolChoice::Both),
            other => Err(Error::invalid(format!(
                "unknown protocol {other:?}; use open, hinted, or both"
            ))),
        }
    }
}

/// `[judge]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSection {
    pub enabled: bool,
    pub protocol: ProtocolChoice,
    pub samples_per_image: usize,
    /// Mean-verdict threshold at which an image counts as recognised.
    pub recognition_threshold: f64,
    /// "offline" (toy classifier) or "remote".
    pub client: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<crate::judge::RemoteJudgeConfig>,
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection {
            enabled: false,
            protocol: ProtocolChoice::Both,
            samples_per_image: 10,
            recognition_threshold: 0.5,
            client: "offline".to_string(),
            remote: None,
        }
    }
}

/// The experiment configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backend: BackendSection,
    pub experiment: ExperimentSection,
    pub synthesis: SynthesisSection,
    pub judge: JudgeSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from(origin),
            location: e.span().map(|s| format!("bytes {}..{}", s.start, s.end)),
            message: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.layers.is_empty() {
            return Err(Error::invalid("layer list must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &layer in &e.layers {
            if !seen.insert(layer) {
                return Err(Error::invalid(format!("duplicate layer {layer}")));
            }
        }
        if e.workers < 1 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        let s = &self.synthesis;
        if s.steps < 1 || s.batch_size < 1 {
            return Err(Error::invalid("steps and batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(s.grad_clip_norm > 0.0) || !(s.sigma_start > 0.0) || !(s.sigma_end > 0.0) {
            return Err(Error::invalid(
                "grad_clip_norm and sigma schedule endpoints must be positive",
            ));
        }
        if !(s.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be nonnegative"));
        }
        for key in s.layer_overrides.keys() {
            let layer: usize = key.parse().map_err(|_| {
                Error::invalid(format!("layer override key {key:?} is not a layer index"))
            })?;
            if !e.layers.contains(&layer) {
                return Err(Error::invalid(format!(
                    "layer override for {layer} does not match any listed layer"
                )));
            }
            let over = &s.layer_overrides[key];
            if over.learning_rate.map_or(false, |v| v <= 0.0)
                || over.temperature.map_or(false, |v| v <= 0.0)
            {
                return Err(Error::invalid(format!(
                    "layer {layer} override values must be positive"
                )));
            }
        }
        let j = &self.judge;
        if j.samples_per_image < 1 {
            return Err(Error::invalid("samples_per_image must be at least 1"));
        }
        if !(0.0..=1.0).contains(&j.recognition_threshold) {
            return Err(Error::invalid("recognition_threshold must lie in [0, 1]"));
        }
        if j.client != "offline" && j.client != "remote" {
            return Err(Error::invalid(format!(
                "unknown judge client {:?}; use offline or remote",
                j.client
            )));
        }
        if j.client == "remote" && j.enabled && j.remote.is_none() {
            return Err(Error::invalid(
                "judge.client = \"remote\" requires a [judge.remote] section",
            ));
        }
        Ok(())
    }

    /// Loads the configured catalogue, or the bundled one.
    pub fn load_catalogue(&self) -> Result<ConceptCatalogue> {
        match &self.experiment.catalogue {
            Some(path) => ConceptCatalogue::load(path),
            None => Ok(ConceptCatalogue::bundled()),
        }
    }

    /// Loads the configured baseline word list, or the bundled one.
    pub fn load_baseline_words(&self) -> Result<Vec<String>> {
        match &self.experiment.baseline_words {
            Some(path) => crate::concepts::load_baseline_words(path),
            None => Ok(crate::concepts::bundled_baseline_words()),
        }
    }

    /// Expands the configuration against a catalogue and a backend: checks
    /// category references, applies per-layer presets and overrides, and
    /// derives the multi-resolution component list from the backend's
    /// resolution. Layer indices are range-checked at sweep time, not here,
    /// so a configuration can be inspected against any backend.
    pub fn resolve(
        &self,
        catalogue: &ConceptCatalogue,
        descriptor: &BackendDescriptor,
    ) -> Result<ResolvedConfig> {
        self.validate()?;
        let categories = if self.experiment.categories.is_empty() {
            catalogue.category_names()
        } else {
            for name in &self.experiment.categories {
                if catalogue.category(name).is_none() {
                    return Err(Error::invalid(format!(
                        "category {name:?} is not in the catalogue"
                    )));
                }
            }
            self.experiment.categories.clone()
        };
        let mut concepts = BTreeMap::new();
        for name in &categories {
            concepts.insert(
                name.clone(),
                catalogue.category(name).expect("checked above").to_vec(),
            );
        }
        let layers = self
            .experiment
            .layers
            .iter()
            .map(|&layer| {
                let (preset_lr, preset_tau) = layer_preset(layer);
                let over = self.synthesis.layer_overrides.get(&layer.to_string());
                ResolvedLayer {
                    layer,
                    learning_rate: over.and_then(|o| o.learning_rate).unwrap_or(preset_lr),
                    temperature: over.and_then(|o| o.temperature).unwrap_or(preset_tau),
                }
            })
            .collect();
        Ok(ResolvedConfig {
            backend: ResolvedBackend {
                name: descriptor.name.clone(),
                hidden_dim: descriptor.hidden_dim,
                layer_count: descriptor.layer_count,
                image_resolution: descriptor.image_resolution,
                patch_grid: descriptor.patch_grid,
            },
            resolution_components: synth::resolution_set(descriptor.image_resolution)?,
            layers,
            categories,
            concepts,
            steps: self.synthesis.steps,
            batch_size: self.synthesis.batch_size,
            momentum: self.synthesis.momentum,
            grad_clip_norm: self.synthesis.grad_clip_norm,
            sigma_start: self.synthesis.sigma_start,
            sigma_end: self.synthesis.sigma_end,
            max_shift: self.synthesis.max_shift,
            noise_sigma: self.synthesis.noise_sigma,
            mode: self.synthesis.mode,
            snapshot_every: self.synthesis.snapshot_every,
            judge: ResolvedJudge {
                enabled: self.judge.enabled,
                protocol: self.judge.protocol,
                samples_per_image: self.judge.samples_per_image,
                recognition_threshold: self.judge.recognition_threshold,
                client: self.judge.client.clone(),
            },
            master_seed: self.experiment.master_seed,
            output_dir: self.experiment.output_dir.clone(),
            workers: self.experiment.workers,
        })
    }
}

// ── Resolved configuration ───────────────────────────────────────────────

/// Backend echo inside a resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedBackend {
    pub name: String,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub image_resolution: usize,
    pub patch_grid: (usize, usize),
}

/// Fully resolved per-layer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedLayer {
    pub layer: usize,
    pub learning_rate: f64,
    pub temperature: f64,
}

/// Judge settings echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedJudge {
    pub enabled: bool,
    pub protocol: ProtocolChoice,
    pub samples_per_image: usize,
    pub recognition_threshold: f64,
    pub client: String,
}

/// Every value that will affect a run, with nothing left implicit. This is
/// what `--print-config` emits and what the manifest snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub backend: ResolvedBackend,
    /// Trainable component resolutions, largest to smallest.
    pub resolution_components: Vec<usize>,
    pub layers: Vec<ResolvedLayer>,
    pub categories: Vec<String>,
    pub concepts: BTreeMap<String, Vec<String>>,
    pub steps: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub grad_clip_norm: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub max_shift: usize,
    pub noise_sigma: f64,
    pub mode: AggregationMode,
    pub snapshot_every: usize,
    pub judge: ResolvedJudge,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
}

impl ResolvedConfig {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    /// The layer echo for `layer`, if listed.
    pub fn layer(&self, layer: usize) -> Option<&ResolvedLayer> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// The synthesis configuration used for `layer`.
    pub fn synthesis_config(&self, layer: usize) -> Result<SynthesisConfig> {
        let resolved = self
            .layer(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} is not in the sweep")))?;
        Ok(SynthesisConfig {
            optimizer: OptimizerConfig {
                learning_rate: resolved.learning_rate,
                momentum: self.momentum,
                steps: self.steps,
                batch_size: self.batch_size,
                grad_clip_norm: self.grad_clip_norm,
                sigma_schedule: (self.sigma_start, self.sigma_end),
                temperature: resolved.temperature,
            },
            augmentation: AugmentationConfig {
                max_shift: self.max_shift,
                noise_sigma: self.noise_sigma,
            },
            mode: self.mode,
            prior_center: None,
            snapshot_every: if self.snapshot_every > 0 {
                Some(self.snapshot_every)
            } else {
                None
            },
        })
    }

    /// Per-pair seed, stable under additions to the sweep.
    pub fn pair_seed(&self, concept: &str, layer: usize) -> u64 {
        seeds::derive(
            self.master_seed,
            &["pair", concept, "layer", &layer.to_string()],
        )
    }
}

// ── Manifest ─────────────────────────────────────────────────────────────

/// Terminal state of one (concept, layer) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntryStatus {
    Completed,
    Failed { message: String },
}

/// One (concept, layer) pair's artefacts. Paths are relative to the run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub category: String,
    pub concept: String,
    pub layer: usize,
    pub seed: u64,
    pub status: EntryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_path: Option<String>,
    /// Batch-mean loss at the final step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    /// Cosine between the final image's representation and the target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recognition: Vec<RecognitionRecord>,
    /// Unix seconds; 0 when never completed.
    pub completed_at: u64,
}

/// The on-disk record of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub created_at: u64,
    pub config: ResolvedConfig,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// A path component safe to create from a user-facing name.
fn safe_component(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c == '/' || c == '\\' || c == ':' { '-' } else { c })
        .collect();
    if cleaned.is_empty() {
        "_".to_string()
    } else {
        cleaned
    }
}

impl RunManifest {
    pub fn new(config: ResolvedConfig) -> Self {
        RunManifest {
            tool_version: crate::VERSION.to_string(),
            created_at: unix_now(),
            config,
            entries: Vec::new(),
        }
    }

    /// Writes `manifest.json` under `root` atomically (temp file + rename).
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("manifest serialisation failed: {e}")))?;
        let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        let target = root.join(MANIFEST_FILE);
        std::fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            location: Some(format!("line {}, column {}", e.line(), e.column())),
            message: e.to_string(),
        })
    }

    pub fn entry(&self, category: &str, concept: &str, layer: usize) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.category == category && e.concept == concept && e.layer == layer)
    }

    pub fn all_completed(&self) -> bool {
        !self.entries.is_empty()
            && self
                .entries
                .iter()
                .all(|e| matches!(e.status, EntryStatus::Completed))
    }

    pub fn incomplete(&self) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| !matches!(e.status, EntryStatus::Completed))
            .collect()
    }

    fn sort_entries(&mut self) {
        self.entries.sort_by(|a, b| {
            (&a.category, &a.concept, a.layer).cmp(&(&b.category, &b.concept, b.layer))
        });
    }

    /// Checks internal consistency and that every referenced file exists
    /// under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        for entry in &self.entries {
            if matches!(entry.status, EntryStatus::Completed) {
                for path in [&entry.image_path, &entry.trajectory_path] {
                    let Some(rel) = path else {
                        return Err(Error::invalid(format!(
                            "completed entry {}/{} layer {} lacks a file reference",
                            entry.category, entry.concept, entry.layer
                        )));
                    };
                    let full = root.join(rel);
                    if !full.is_file() {
                        return Err(Error::invalid(format!(
                            "manifest references missing file {}",
                            full.display()
                        )));
                    }
                }
            }
            for record in &entry.recognition {
                if record.verdicts.len() != record.protocol.samples_per_image
                    || record.raw_responses.len() != record.protocol.samples_per_image
                {
                    return Err(Error::invalid(format!(
                        "entry {}/{} layer {} has a truncated recognition record",
                        entry.category, entry.concept, entry.layer
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── Sweep ────────────────────────────────────────────────────────────────

struct Job {
    category: String,
    concept: String,
    layer: usize,
}

/// What the sweep stores per pair beyond the manifest entry itself.
#[derive(Debug, Serialize)]
struct TrajectoryFile<'a> {
    concept: &'a str,
    category: &'a str,
    layer: usize,
    seed: u64,
    synthesis: &'a SynthesisConfig,
    loss_trajectory: &'a [f64],
    final_objective: f64,
}

/// Runs the full sweep described by `config` on `backend`.
///
/// Judging requires `judge_client` when `judge.enabled` is set; the runner
/// stays agnostic of how clients are built. Pair failures are recorded in
/// the manifest and do not abort the sweep; the returned manifest may
/// therefore contain failed entries.
pub fn run_sweep(
    backend: &dyn Backend,
    config: &ExperimentConfig,
    judge_client: Option<&dyn JudgeClient>,
) -> Result<RunManifest> {
    let catalogue = config.load_catalogue()?;
    let baseline_words = config.load_baseline_words()?;
    let descriptor = backend.describe();
    let resolved = config.resolve(&catalogue, &descriptor)?;
    for layer in &resolved.layers {
        descriptor.check_layer(LayerIndex(layer.layer))?;
    }
    if resolved.judge.enabled && judge_client.is_none() {
        return Err(Error::invalid(
            "judging is enabled but no judge client was provided",
        ));
    }
    let root = resolved.output_dir.clone();

    // Reuse completed pairs from a previous interrupted run.
    let previous = RunManifest::load(&root).ok();
    let mut manifest = RunManifest::new(resolved.clone());
    if let Some(previous) = &previous {
        for entry in &previous.entries {
            let still_planned = resolved
                .concepts
                .get(&entry.category)
                .map_or(false, |words| words.contains(&entry.concept))
                && resolved.layers.iter().any(|l| l.layer == entry.layer);
            let files_present = entry
                .image_path
                .as_ref()
                .map_or(false, |p| root.join(p).is_file());
            if still_planned
                && matches!(entry.status, EntryStatus::Completed)
                && files_present
            {
                manifest.entries.push(entry.clone());
            }
        }
        manifest.created_at = previous.created_at;
    }

    // One language baseline per layer, shared by every job.
    let mut baselines: BTreeMap<usize, LanguageBaseline> = BTreeMap::new();
    for layer in &resolved.layers {
        baselines.insert(
            layer.layer,
            compute_language_baseline(backend, &baseline_words, LayerIndex(layer.layer))?,
        );
    }

    let jobs: Vec<Job> = resolved
        .concepts
        .iter()
        .flat_map(|(category, words)| {
            words.iter().flat_map(|concept| {
                resolved.layers.iter().map(|l| Job {
                    category: category.clone(),
                    concept: concept.clone(),
                    layer: l.layer,
                })
            })
        })
        .filter(|job| manifest.entry(&job.category, &job.concept, job.layer).is_none())
        .collect();

    let queue = Mutex::new(jobs);
    let (sender, receiver) = mpsc::channel::<ManifestEntry>();
    let pending = {
        let q = queue.lock().expect("queue lock");
        q.len()
    };

    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..resolved.workers.min(pending.max(1)) {
            let sender = sender.clone();
            let queue = &queue;
            let resolved = &resolved;
            let baselines = &baselines;
            let catalogue = &catalogue;
            let root = &root;
            scope.spawn(move || loop {
                let job = {
                    let mut q = queue.lock().expect("queue lock");
                    q.pop()
                };
                let Some(job) = job else { break };
                let entry = run_pair(
                    backend,
                    resolved,
                    baselines,
                    catalogue,
                    root,
                    judge_client,
                    &job,
                );
                if sender.send(entry).is_err() {
                    break;
                }
            });
        }
        drop(sender);

        // Single writer: fold results into the manifest as they arrive so an
        // interrupt loses at most the in-flight pairs.
        for entry in receiver.iter() {
            manifest.entries.push(entry);
            manifest.sort_entries();
            manifest.save(&root)?;
        }
        Ok(())
    })?;

    manifest.sort_entries();
    manifest.save(&root)?;
    Ok(manifest)
}

/// Synthesizes, persists, and optionally judges one (concept, layer) pair.
/// Failures become a `Failed` entry rather than an error.
fn run_pair(
    backend: &dyn Backend,
    resolved: &ResolvedConfig,
    baselines: &BTreeMap<usize, LanguageBaseline>,
    catalogue: &ConceptCatalogue,
    root: &Path,
    judge_client: Option<&dyn JudgeClient>,
    job: &Job,
) -> ManifestEntry {
    let seed = resolved.pair_seed(&job.concept, job.layer);
    let mut entry = ManifestEntry {
        category: job.category.clone(),
        concept: job.concept.clone(),
        layer: job.layer,
        seed,
        status: EntryStatus::Completed,
        image_path: None,
        trajectory_path: None,
        final_loss: None,
        final_objective: None,
        recognition: Vec::new(),
        completed_at: 0,
    };
    match execute_pair(backend, resolved, baselines, catalogue, root, judge_client, job, seed) {
        Ok(done) => {
            entry.image_path = Some(done.image_path);
            entry.trajectory_path = Some(done.trajectory_path);
            entry.final_loss = done.final_loss;
            entry.final_objective = Some(done.final_objective);
            entry.recognition = done.recognition;
            entry.completed_at = unix_now();
        }
        Err(err) => {
            entry.status = EntryStatus::Failed {
                message: err.to_string(),
            };
        }
    }
    entry
}

struct PairOutput {
    image_path: String,
    trajectory_path: String,
    final_loss: Option<f64>,
    final_objective: f64,
    recognition: Vec<RecognitionRecord>,
}

#[allow(clippy::too_many_arguments)]
fn execute_pair(
    backend: &dyn Backend,
    resolved: &ResolvedConfig,
    baselines: &BTreeMap<usize, LanguageBaseline>,
    catalogue: &ConceptCatalogue,
    root: &Path,
    judge_client: Option<&dyn JudgeClient>,
    job: &Job,
    seed: u64,
) -> Result<PairOutput> {
    let layer = LayerIndex(job.layer);
    let baseline = baselines
        .get(&job.layer)
        .ok_or_else(|| Error::invalid(format!("no baseline for layer {}", job.layer)))?;
    let direction = concept_direction(backend, &job.concept, layer, baseline)?;
    let config = resolved.synthesis_config(job.layer)?;
    let run = synth::synthesize(&direction, backend, &config, seed)?;

    let rel_dir = PathBuf::from(safe_component(&job.category))
        .join(safe_component(&job.concept))
        .join(format!("layer{}", job.layer));
    let dir = root.join(&rel_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let image_rel = rel_dir.join("image.png");
    run.final_image.save_png(&root.join(&image_rel))?;
    for snapshot in &run.snapshots {
        let path = dir.join(format!("snapshot_{:04}.png", snapshot.step));
        snapshot.image.save_png(&path)?;
    }

    let trajectory_rel = rel_dir.join("trajectory.json");
    let trajectory = TrajectoryFile {
        concept: &job.concept,
        category: &job.category,
        layer: job.layer,
        seed,
        synthesis: &config,
        loss_trajectory: &run.loss_trajectory,
        final_objective: run.final_objective,
    };
    let full = root.join(&trajectory_rel);
    let json = serde_json::to_string_pretty(&trajectory)
        .map_err(|e| Error::invalid(format!("trajectory serialisation failed: {e}")))?;
    std::fs::write(&full, json).map_err(|e| Error::io(&full, e))?;

    let mut recognition = Vec::new();
    if resolved.judge.enabled {
        let client = judge_client.ok_or_else(|| {
            Error::invalid("judging is enabled but no judge client was provided")
        })?;
        let samples = resolved.judge.samples_per_image;
        let hint = catalogue.hint(&job.category).to_string();
        let protocols: Vec<JudgeProtocol> = match resolved.judge.protocol {
            ProtocolChoice::Open => vec![JudgeProtocol::open(samples)],
            ProtocolChoice::Hinted => vec![JudgeProtocol::hinted(hint, samples)],
            ProtocolChoice::Both => vec![
                JudgeProtocol::open(samples),
                JudgeProtocol::hinted(hint, samples),
            ],
        };
        let image_id = format!("{}/{}/layer{}", job.category, job.concept, job.layer);
        recognition = evaluate_image(
            &run.final_image,
            &image_id,
            &job.concept,
            &protocols,
            client,
            seed,
        )?;
    }

    Ok(PairOutput {
        image_path: image_rel.to_string_lossy().into_owned(),
        trajectory_path: trajectory_rel.to_string_lossy().into_owned(),
        final_loss: run.loss_trajectory.last().copied(),
        final_objective: run.final_objective,
        recognition,
    })
}
