//! Layer-wise similarity analysis of concept directions against image
//! corpora.
//!
//! For each (concept, corpus, layer) the probe computes per-image cosine
//! similarities between the concept direction and either the centred mean
//! patch activation (`aggregate`) or the best single centred patch
//! (`max_patch`), summarises them with 95% confidence intervals, and tests
//! matched-versus-mismatched discrimination with a two-sample permutation
//! test.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, LayerIndex};
use crate::concepts::{compute_language_baseline, concept_direction, ConceptVector};
use crate::error::{Error, Result};
use crate::image::{PixelImage, CHANNELS};
use crate::imrep::{self, AggregationConfig};
use crate::seeds;
use crate::stats;

/// A named collection of equally sized images.
#[derive(Debug, Clone)]
pub struct ImageCorpus {
    name: String,
    images: Vec<PixelImage>,
    source: String,
}

impl ImageCorpus {
    /// Wraps images already in memory. All must share one resolution.
    pub fn new(
        name: impl Into<String>,
        images: Vec<PixelImage>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("image corpus must not be empty"));
        }
        let r = images[0].resolution();
        if images.iter().any(|img| img.resolution() != r) {
            return Err(Error::shape("corpus images must share one resolution"));
        }
        Ok(ImageCorpus {
            name: name.into(),
            images,
            source: source.into(),
        })
    }

    /// Loads every decodable image file in a directory, in sorted filename
    /// order, resized to `resolution`.
    pub fn from_dir(name: impl Into<String>, dir: &Path, resolution: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut images = Vec::new();
        for path in paths {
            images.push(PixelImage::load(&path, resolution)?);
        }
        Self::new(name, images, dir.display().to_string())
    }

    /// A white-noise control corpus: i.i.d. uniform [0,1] pixels.
    pub fn noise(name: impl Into<String>, resolution: usize, count: usize, seed: u64) -> Result<Self> {
        let mut rng = seeds::rng(seed, &["noise-corpus"]);
        let images = (0..count)
            .map(|_| {
                let data = (0..resolution * resolution * CHANNELS)
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect();
                PixelImage::from_data(resolution, data).expect("noise data has image shape")
            })
            .collect();
        Self::new(name, images, format!("noise({seed},{count})"))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &[PixelImage] {
        &self.images
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn resolution(&self) -> usize {
        self.images[0].resolution()
    }
}

/// How an image is reduced to a single similarity value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    /// Cosine between the centred mean patch activation and the direction.
    Aggregate,
    /// Maximum cosine between any single centred patch and the direction.
    MaxPatch,
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimilarityMetric::Aggregate => write!(f, "aggregate"),
            SimilarityMetric::MaxPatch => write!(f, "max_patch"),
        }
    }
}

impl std::str::FromStr for SimilarityMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggregate" => Ok(SimilarityMetric::Aggregate),
            "max_patch" => Ok(SimilarityMetric::MaxPatch),
            other => Err(Error::invalid(format!(
                "unknown similarity metric {other:?}; use aggregate or max_patch"
            ))),
        }
    }
}

/// Per-image similarities of one concept direction to one corpus.
pub fn corpus_similarity(
    backend: &dyn Backend,
    concept: &ConceptVector,
    corpus: &ImageCorpus,
    metric: SimilarityMetric,
) -> Result<Vec<f64>> {
    let desc = backend.describe();
    if corpus.resolution() != desc.image_resolution {
        return Err(Error::invalid(format!(
            "corpus {:?} has resolution {}, backend expects {}",
            corpus.name(),
            corpus.resolution(),
            desc.image_resolution
        )));
    }
    let baseline = imrep::compute_image_baseline(backend, concept.layer)?;
    let mut values = Vec::with_capacity(corpus.images().len());
    for image in corpus.images() {
        let patches = backend.image_patch_activations(image, concept.layer)?;
        let value = match metric {
            SimilarityMetric::Aggregate => {
                let rep = imrep::aggregate(&patches, &baseline, concept, &AggregationConfig::mean())?;
                stats::cosine(&rep.vector, &concept.direction)
            }
            SimilarityMetric::MaxPatch => imrep::semantic_scores(&patches, &baseline, concept)?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max),
        };
        values.push(value);
    }
    Ok(values)
}

/// One-sided two-sample permutation test on the difference of means,
/// testing whether `matched` exceeds `mismatched`. Returns
/// `(1 + #{permuted diff ≥ observed}) / (1 + iterations)`.
pub fn permutation_test(
    matched: &[f64],
    mismatched: &[f64],
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    if matched.is_empty() || mismatched.is_empty() {
        return Err(Error::invalid("permutation test samples must be non-empty"));
    }
    if iterations < 100 {
        return Err(Error::invalid(format!(
            "permutation test needs at least 100 iterations, got {iterations}"
        )));
    }
    let observed = stats::mean(matched) - stats::mean(mismatched);
    let mut pool: Vec<f64> = matched.iter().chain(mismatched).copied().collect();
    let n = matched.len();
    let mut rng = seeds::rng(seed, &["permutation-test"]);
    let mut at_least = 0usize;
    for _ in 0..iterations {
        pool.shuffle(&mut rng);
        let m: f64 = pool[..n].iter().sum::<f64>() / n as f64;
        let mm: f64 = pool[n..].iter().sum::<f64>() / (pool.len() - n) as f64;
        if m - mm >= observed {
            at_least += 1;
        }
    }
    Ok((1 + at_least) as f64 / (1 + iterations) as f64)
}

/// One (concept, corpus, metric, layer) cell of a similarity profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub concept: String,
    pub corpus: String,
    pub metric: SimilarityMetric,
    pub layer: LayerIndex,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub values: Vec<f64>,
}

/// The full cross-product of similarity measurements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub records: Vec<SimilarityRecord>,
}

impl SimilarityProfile {
    /// The record for one cell, if present.
    pub fn record(
        &self,
        concept: &str,
        corpus: &str,
        metric: SimilarityMetric,
        layer: LayerIndex,
    ) -> Option<&SimilarityRecord> {
        self.records.iter().find(|r| {
            r.concept == concept && r.corpus == corpus && r.metric == metric && r.layer == layer
        })
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if !(r.ci_low <= r.mean && r.mean <= r.ci_high) {
                return Err(Error::invalid(format!(
                    "record {}/{}/{}/{:?} has inconsistent CI",
                    r.concept, r.corpus, r.metric, r.layer
                )));
            }
            if r.values.iter().any(|v| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(v)) {
                return Err(Error::invalid("similarity outside [-1, 1]"));
            }
        }
        Ok(())
    }
}

/// Evaluates every (layer, concept, corpus, metric) combination. Concept
/// directions are extracted per layer against `baseline_words`.
pub fn profile(
    backend: &dyn Backend,
    concepts: &[String],
    baseline_words: &[String],
    corpora: &[ImageCorpus],
    layers: &[LayerIndex],
    metrics: &[SimilarityMetric],
) -> Result<SimilarityProfile> {
    let mut records = Vec::new();
    for &layer in layers {
        let language = compute_language_baseline(backend, baseline_words, layer)?;
        for concept in concepts {
            let direction = concept_direction(backend, concept, layer, &language)?;
            for corpus in corpora {
                for &metric in metrics {
                    let values = corpus_similarity(backend, &direction, corpus, metric)?;
                    let (ci_low, ci_high) = stats::ci95(&values);
                    records.push(SimilarityRecord {
                        concept: concept.clone(),
                        corpus: corpus.name().to_string(),
                        metric,
                        layer,
                        mean: stats::mean(&values),
                        ci_low,
                        ci_high,
                        values,
                    });
                }
            }
        }
    }
    Ok(SimilarityProfile { records })
}
