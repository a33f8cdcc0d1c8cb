//! Recognition evaluation of synthesized images.
//!
//! A judge client answers a fixed question about each image several times;
//! a binary rubric grades every answer for whether it names the concept;
//! the per-image rate and per-category recognition curves summarise the
//! verdicts. Clients are pluggable: the crate ships offline oracles (the
//! toy classifier and a keyword grader) so the whole pipeline runs with no
//! network, plus a remote chat-completions client.

mod remote;

pub use remote::{RemoteClient, RemoteJudgeConfig};

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::toy::ToyBackend;
use crate::backend::LayerIndex;
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::seeds;
use crate::stats;

/// The bundled grading rubric with `{request}`, `{response}` and
/// `{concept}` placeholders.
pub const RUBRIC_TEMPLATE: &str = include_str!("../../resources/rubric_template.txt");

// ── Protocols and questions ──────────────────────────────────────────────

/// Which of the two bundled wordings of the stringent question to use.
/// `Guess` is the default; `Plain` is the shorter variant that drops the
/// guessing clause. Both are preserved because sources disagree on the
/// exact phrasing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionWording {
    #[default]
    Guess,
    Plain,
}

/// Whether the question names the concept's category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Stringent: no hint about what kind of thing to look for.
    Open,
    /// Lenient: the question names the category.
    Hinted,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolKind::Open => write!(f, "open"),
            ProtocolKind::Hinted => write!(f, "hinted"),
        }
    }
}

/// One way of asking about an image, sampled several times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeProtocol {
    pub kind: ProtocolKind,
    /// The hint word; required for (and only used by) the hinted kind.
    #[serde(default)]
    pub category: Option<String>,
    pub samples_per_image: usize,
    #[serde(default)]
    pub wording: QuestionWording,
}

impl JudgeProtocol {
    pub fn open(samples_per_image: usize) -> Self {
        JudgeProtocol {
            kind: ProtocolKind::Open,
            category: None,
            samples_per_image,
            wording: QuestionWording::default(),
        }
    }

    pub fn hinted(category: impl Into<String>, samples_per_image: usize) -> Self {
        JudgeProtocol {
            kind: ProtocolKind::Hinted,
            category: Some(category.into()),
            samples_per_image,
            wording: QuestionWording::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_image < 1 {
            return Err(Error::invalid("samples_per_image must be at least 1"));
        }
        if self.kind == ProtocolKind::Hinted
            && self.category.as_deref().map_or(true, |c| c.trim().is_empty())
        {
            return Err(Error::invalid(
                "hinted protocol requires a non-empty category",
            ));
        }
        Ok(())
    }
}

/// The question string for a protocol.
pub fn build_question(protocol: &JudgeProtocol) -> Result<String> {
    protocol.validate()?;
    Ok(match (protocol.kind, protocol.wording) {
        (ProtocolKind::Open, QuestionWording::Guess) => {
            "What is in the image if you had to guess? One word.".to_string()
        }
        (ProtocolKind::Open, QuestionWording::Plain) => {
            "What is in the image? One word.".to_string()
        }
        (ProtocolKind::Hinted, QuestionWording::Guess) => format!(
            "What {} is in the image if you had to guess? One word.",
            protocol.category.as_deref().expect("validated")
        ),
        (ProtocolKind::Hinted, QuestionWording::Plain) => format!(
            "What {} is in the image? One word.",
            protocol.category.as_deref().expect("validated")
        ),
    })
}

/// Fills the bundled rubric template with a request, a response, and the
/// concept being graded.
pub fn build_rubric(request: &str, response: &str, concept: &str) -> String {
    RUBRIC_TEMPLATE
        .replace("{request}", request)
        .replace("{response}", response)
        .replace("{concept}", concept)
}

// ── Clients ──────────────────────────────────────────────────────────────

/// A model (or oracle) that can describe images and grade responses.
///
/// `seed` lets deterministic clients vary across repeated samples; remote
/// clients may ignore it.
pub trait JudgeClient: Send + Sync {
    /// Answers `question` about `image`.
    fn describe_image(&self, image: &PixelImage, question: &str, seed: u64) -> Result<String>;

    /// Grades a response: 1 when it names the concept, else 0.
    fn grade(&self, request: &str, response: &str, concept: &str) -> Result<u8>;

    /// A stable identifier recorded alongside results.
    fn identity(&self) -> String;
}

/// Verdict 1 iff the concept occurs in the response, case-insensitively.
/// This is the offline grading oracle.
pub fn keyword_grade(response: &str, concept: &str) -> u8 {
    u8::from(response.to_lowercase().contains(&concept.to_lowercase()))
}

/// Offline judge for toy-backend images: describes an image with the toy
/// classifier's best word and grades by keyword.
pub struct ToyJudge {
    backend: Arc<ToyBackend>,
}

impl ToyJudge {
    pub fn new(backend: Arc<ToyBackend>) -> Self {
        ToyJudge { backend }
    }
}

impl JudgeClient for ToyJudge {
    fn describe_image(&self, image: &PixelImage, _question: &str, _seed: u64) -> Result<String> {
        let (word, _) = self.backend.classify(image)?;
        Ok(word)
    }

    fn grade(&self, _request: &str, response: &str, concept: &str) -> Result<u8> {
        Ok(keyword_grade(response, concept))
    }

    fn identity(&self) -> String {
        "toy-classifier".to_string()
    }
}

/// Replays a fixed list of responses in order, cycling; empty strings are
/// reported as transport failures. Useful for tests and examples.
pub struct ScriptedClient {
    responses: Vec<String>,
    cursor: AtomicUsize,
}

impl ScriptedClient {
    /// `responses` are replayed in order, wrapping around. An empty string
    /// simulates a failed call.
    pub fn new(responses: Vec<String>) -> Self {
        ScriptedClient {
            responses,
            cursor: AtomicUsize::new(0),
        }
    }
}

impl JudgeClient for ScriptedClient {
    fn describe_image(&self, _image: &PixelImage, _question: &str, _seed: u64) -> Result<String> {
        if self.responses.is_empty() {
            return Err(Error::Transport("scripted client has no responses".into()));
        }
        let i = self.cursor.fetch_add(1, Ordering::Relaxed) % self.responses.len();
        let response = &self.responses[i];
        if response.is_empty() {
            Err(Error::Transport("scripted failure".into()))
        } else {
            Ok(response.clone())
        }
    }

    fn grade(&self, _request: &str, response: &str, concept: &str) -> Result<u8> {
        Ok(keyword_grade(response, concept))
    }

    fn identity(&self) -> String {
        "scripted".to_string()
    }
}

// ── Evaluation ───────────────────────────────────────────────────────────

/// All verdicts for one image under one protocol. Failed samples are kept
/// as `None` so nothing is silently dropped; the rate is computed over the
/// samples that succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionRecord {
    pub image_id: String,
    pub concept: String,
    pub protocol: JudgeProtocol,
    pub question: String,
    pub raw_responses: Vec<Option<String>>,
    pub verdicts: Vec<Option<u8>>,
    pub rate: f64,
    pub client: String,
}

impl RecognitionRecord {
    /// Mean verdict over the successful samples; 0 when none succeeded.
    pub fn recompute_rate(verdicts: &[Option<u8>]) -> f64 {
        let ok: Vec<f64> = verdicts.iter().flatten().map(|v| f64::from(*v)).collect();
        if ok.is_empty() {
            0.0
        } else {
            stats::mean(&ok)
        }
    }

    /// Whether this image counts as recognised at a mean-verdict threshold.
    pub fn recognised(&self, threshold: f64) -> bool {
        self.verdicts.iter().any(|v| v.is_some()) && self.rate >= threshold
    }
}

/// Asks every protocol's question `samples_per_image` times, grades each
/// response, and assembles one record per protocol. A failed describe or
/// grade call leaves a `None` sample.
pub fn evaluate_image(
    image: &PixelImage,
    image_id: &str,
    concept: &str,
    protocols: &[JudgeProtocol],
    client: &dyn JudgeClient,
    seed: u64,
) -> Result<Vec<RecognitionRecord>> {
    let mut records = Vec::with_capacity(protocols.len());
    for protocol in protocols {
        let question = build_question(protocol)?;
        let mut raw_responses = Vec::with_capacity(protocol.samples_per_image);
        let mut verdicts = Vec::with_capacity(protocol.samples_per_image);
        for sample in 0..protocol.samples_per_image {
            let sample_seed = seeds::derive(
                seed,
                &[
                    "judge",
                    &protocol.kind.to_string(),
                    image_id,
                    "sample",
                    &sample.to_string(),
                ],
            );
            match client.describe_image(image, &question, sample_seed) {
                Ok(response) => {
                    let verdict = client.grade(&question, &response, concept).ok();
                    raw_responses.push(Some(response));
                    verdicts.push(verdict);
                }
                Err(_) => {
                    raw_responses.push(None);
                    verdicts.push(None);
                }
            }
        }
        let rate = RecognitionRecord::recompute_rate(&verdicts);
        records.push(RecognitionRecord {
            image_id: image_id.to_string(),
            concept: concept.to_string(),
            protocol: protocol.clone(),
            question,
            raw_responses,
            verdicts,
            rate,
            client: client.identity(),
        });
    }
    Ok(records)
}

// ── Recognition curves ───────────────────────────────────────────────────

/// A record plus the grouping coordinates the curves are drawn over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub category: String,
    pub layer: LayerIndex,
    pub record: RecognitionRecord,
}

/// One (category, layer) point of a recognition curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionPoint {
    pub category: String,
    pub layer: LayerIndex,
    /// Proportion of this group's images that were recognised.
    pub proportion: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub count: usize,
}

/// Groups records by (category, layer) and reports the proportion of
/// recognised images per group with a 95% confidence interval. An image is
/// recognised when its mean verdict reaches `threshold`.
pub fn recognition_curves(records: &[LabeledRecord], threshold: f64) -> Result<Vec<RecognitionPoint>> {
    if records.is_empty() {
        return Err(Error::invalid("no recognition records to summarise"));
    }
    let mut groups: std::collections::BTreeMap<(String, usize), Vec<f64>> =
        std::collections::BTreeMap::new();
    for labeled in records {
        groups
            .entry((labeled.category.clone(), labeled.layer.value()))
            .or_default()
            .push(f64::from(labeled.record.recognised(threshold)));
    }
    let mut points = Vec::with_capacity(groups.len());
    for ((category, layer), outcomes) in groups {
        let (ci_low, ci_high) = stats::ci95(&outcomes);
        points.push(RecognitionPoint {
            category,
            layer: LayerIndex(layer),
            proportion: stats::mean(&outcomes),
            ci_low,
            ci_high,
            count: outcomes.len(),
        });
    }
    Ok(points)
}
