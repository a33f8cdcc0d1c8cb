//! Report generation over a finished (or partial) run: recognition curves,
//! probe similarity plots with permutation p-values, and an image gallery.
//!
//! Reports are written under `<run>/report/` and never mutate the run
//! itself. Partial runs produce partial reports with the gaps listed
//! explicitly rather than silently interpolated.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use base64::Engine;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::LayerIndex;
use crate::error::{Error, Result};
use crate::judge::{recognition_curves, LabeledRecord, ProtocolKind, RecognitionPoint};
use crate::probe::{permutation_test, SimilarityMetric, SimilarityProfile};
use crate::seeds;

use super::{EntryStatus, ManifestEntry, RunManifest};

/// Name of the probe profile file a report expects inside the run directory.
pub const PROBE_PROFILE_FILE: &str = "probe.json";

/// Which report to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    /// Recognition proportion versus layer, per category, per protocol.
    Recognition,
    /// Similarity-versus-layer plots and permutation p-values from a probe
    /// profile stored alongside the manifest.
    Probe,
    /// Contact sheet of the best image per (category, layer) cell.
    Gallery,
}

impl std::str::FromStr for ReportKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recognition" => Ok(ReportKind::Recognition),
            "probe" => Ok(ReportKind::Probe),
            "gallery" => Ok(ReportKind::Gallery),
            other => Err(Error::invalid(format!(
                "unknown report kind {other:?}; use recognition, probe, or gallery"
            ))),
        }
    }
}

/// Generates one report for the run rooted at `root` and returns the files
/// it wrote.
pub fn report(manifest: &RunManifest, root: &Path, kind: ReportKind) -> Result<Vec<PathBuf>> {
    let out = root.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match kind {
        ReportKind::Recognition => recognition_report(manifest, &out),
        ReportKind::Probe => {
            let profile_path = root.join(PROBE_PROFILE_FILE);
            let text = std::fs::read_to_string(&profile_path).map_err(|_| {
                Error::invalid(format!(
                    "no probe profile at {}; run the probe command with this run \
                     directory as its output first",
                    profile_path.display()
                ))
            })?;
            let profile: SimilarityProfile =
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: profile_path.clone(),
                    location: Some(format!("line {}, column {}", e.line(), e.column())),
                    message: e.to_string(),
                })?;
            probe_report(&profile, manifest.config.master_seed, &out)
        }
        ReportKind::Gallery => gallery_report(manifest, root, &out),
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::invalid(format!("plot rendering failed: {e}"))
}

fn escape_xml(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

// ── Recognition ──────────────────────────────────────────────────────────

/// JSON payload of one recognition report.
#[derive(Debug, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub protocol: String,
    pub threshold: f64,
    pub points: Vec<RecognitionPoint>,
    /// (category, layer) cells with no graded images yet.
    pub gaps: Vec<(String, usize)>,
}

fn recognition_report(manifest: &RunManifest, out: &Path) -> Result<Vec<PathBuf>> {
    let threshold = manifest.config.judge.recognition_threshold;
    let mut written = Vec::new();
    let mut any = false;
    for kind in [ProtocolKind::Open, ProtocolKind::Hinted] {
        let records: Vec<LabeledRecord> = manifest
            .entries
            .iter()
            .filter(|e| matches!(e.status, EntryStatus::Completed))
            .flat_map(|e| {
                e.recognition
                    .iter()
                    .filter(|r| r.protocol.kind == kind)
                    .map(|r| LabeledRecord {
                        category: e.category.clone(),
                        layer: LayerIndex(e.layer),
                        record: r.clone(),
                    })
            })
            .collect();
        if records.is_empty() {
            continue;
        }
        any = true;
        let points = recognition_curves(&records, threshold)?;
        let gaps: Vec<(String, usize)> = manifest
            .config
            .categories
            .iter()
            .flat_map(|category| {
                manifest
                    .config
                    .layers
                    .iter()
                    .map(move |l| (category.clone(), l.layer))
            })
            .filter(|(category, layer)| {
                !points
                    .iter()
                    .any(|p| &p.category == category && p.layer.value() == *layer)
            })
            .collect();

        let payload = RecognitionReport {
            protocol: kind.to_string(),
            threshold,
            points: points.clone(),
            gaps,
        };
        let json_path = out.join(format!("recognition_{kind}.json"));
        let json = serde_json::to_string_pretty(&payload)
            .map_err(|e| Error::invalid(format!("report serialisation failed: {e}")))?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        written.push(json_path);

        let svg_path = out.join(format!("recognition_{kind}.svg"));
        draw_recognition_plot(&points, kind, &svg_path)?;
        written.push(svg_path);
    }
    if !any {
        return Err(Error::invalid(
            "the manifest has no recognition records; run the sweep with judging enabled",
        ));
    }
    Ok(written)
}

fn draw_recognition_plot(
    points: &[RecognitionPoint],
    kind: ProtocolKind,
    path: &Path,
) -> Result<()> {
    let mut by_category: BTreeMap<&str, Vec<&RecognitionPoint>> = BTreeMap::new();
    for point in points {
        by_category.entry(&point.category).or_default().push(point);
    }
    let (x_min, x_max) = x_span(points.iter().map(|p| p.layer.value() as f64));

    let area = SVGBackend::new(path, (900, 600)).into_drawing_area();
    area.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&area)
        .margin(20)
        .x_label_area_size(45)
        .y_label_area_size(55)
        .caption(
            format!("Recognition by layer ({kind} protocol)"),
            ("sans-serif", 22),
        )
        .build_cartesian_2d(x_min..x_max, 0.0f64..1.05f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("layer")
        .y_desc("proportion recognised")
        .draw()
        .map_err(plot_err)?;

    for (i, (category, mut pts)) in by_category.into_iter().enumerate() {
        pts.sort_by_key(|p| p.layer.value());
        let color = Palette99::pick(i).to_rgba();
        let band: Vec<(f64, f64)> = pts
            .iter()
            .map(|p| (p.layer.value() as f64, p.ci_high))
            .chain(pts.iter().rev().map(|p| (p.layer.value() as f64, p.ci_low)))
            .collect();
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.15))))
            .map_err(plot_err)?;
        let line: Vec<(f64, f64)> = pts
            .iter()
            .map(|p| (p.layer.value() as f64, p.proportion))
            .collect();
        let style = ShapeStyle::from(&color).stroke_width(2);
        chart
            .draw_series(LineSeries::new(line.clone(), style))
            .map_err(plot_err)?
            .label(category)
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], ShapeStyle::from(&color).stroke_width(2))
            });
        chart
            .draw_series(line.iter().map(|&(x, y)| Circle::new((x, y), 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK.mix(0.4))
        .draw()
        .map_err(plot_err)?;
    area.present().map_err(plot_err)?;
    Ok(())
}

fn x_span(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for x in xs {
        min = min.min(x);
        max = max.max(x);
    }
    if !min.is_finite() || !max.is_finite() {
        return (0.0, 1.0);
    }
    if min == max {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    }
}

// ── Probe ────────────────────────────────────────────────────────────────

/// One permutation test comparing a concept's matched corpus against
/// another corpus at one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeTest {
    pub metric: SimilarityMetric,
    pub concept: String,
    pub layer: usize,
    /// The corpus the matched one was tested against.
    pub against: String,
    pub p_value: f64,
    pub matched_mean: f64,
    pub other_mean: f64,
}

/// JSON payload of the probe report's p-values.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProbePValues {
    pub iterations: usize,
    pub tests: Vec<ProbeTest>,
    /// Concepts with no same-named corpus, so no matched/mismatched split.
    pub skipped_concepts: Vec<String>,
}

/// Runs one-sided permutation tests of "matched corpus scores higher than
/// every other corpus" for each concept that has a corpus named after it.
pub fn probe_pvalues(
    profile: &SimilarityProfile,
    iterations: usize,
    seed: u64,
) -> Result<ProbePValues> {
    let mut metrics: Vec<SimilarityMetric> = Vec::new();
    let mut concepts: Vec<String> = Vec::new();
    let mut corpora: Vec<String> = Vec::new();
    let mut layers: Vec<usize> = Vec::new();
    for record in &profile.records {
        if !metrics.contains(&record.metric) {
            metrics.push(record.metric);
        }
        if !concepts.contains(&record.concept) {
            concepts.push(record.concept.clone());
        }
        if !corpora.contains(&record.corpus) {
            corpora.push(record.corpus.clone());
        }
        if !layers.contains(&record.layer.value()) {
            layers.push(record.layer.value());
        }
    }
    layers.sort_unstable();

    let mut tests = Vec::new();
    let mut skipped = Vec::new();
    for concept in &concepts {
        if !corpora.contains(concept) {
            skipped.push(concept.clone());
            continue;
        }
        for &metric in &metrics {
            for &layer in &layers {
                let matched = profile.record(concept, concept, metric, LayerIndex(layer));
                let Some(matched) = matched else { continue };
                for corpus in &corpora {
                    if corpus == concept {
                        continue;
                    }
                    let Some(other) = profile.record(concept, corpus, metric, LayerIndex(layer))
                    else {
                        continue;
                    };
                    let test_seed = seeds::derive(
                        seed,
                        &[
                            "probe-report",
                            &metric.to_string(),
                            concept,
                            corpus,
                            &layer.to_string(),
                        ],
                    );
                    let p_value =
                        permutation_test(&matched.values, &other.values, iterations, test_seed)?;
                    tests.push(ProbeTest {
                        metric,
                        concept: concept.clone(),
                        layer,
                        against: corpus.clone(),
                        p_value,
                        matched_mean: matched.mean,
                        other_mean: other.mean,
                    });
                }
            }
        }
    }
    Ok(ProbePValues {
        iterations,
        tests,
        skipped_concepts: skipped,
    })
}

/// Renders similarity-versus-layer plots (one per metric) and writes the
/// permutation p-values next to them.
pub fn probe_report(
    profile: &SimilarityProfile,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if profile.records.is_empty() {
        return Err(Error::invalid("the probe profile has no records"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();

    let iterations = 10_000;
    let pvalues = probe_pvalues(profile, iterations, seed)?;
    let json_path = out.join("probe_pvalues.json");
    let json = serde_json::to_string_pretty(&pvalues)
        .map_err(|e| Error::invalid(format!("report serialisation failed: {e}")))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    let mut metrics: Vec<SimilarityMetric> = Vec::new();
    for record in &profile.records {
        if !metrics.contains(&record.metric) {
            metrics.push(record.metric);
        }
    }
    for metric in metrics {
        let svg_path = out.join(format!("probe_{metric}.svg"));
        draw_probe_plot(profile, metric, &svg_path)?;
        written.push(svg_path);
    }
    Ok(written)
}

fn draw_probe_plot(
    profile: &SimilarityProfile,
    metric: SimilarityMetric,
    path: &Path,
) -> Result<()> {
    // One series per (concept, corpus) pair.
    let mut series: BTreeMap<(String, String), Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
    for record in &profile.records {
        if record.metric != metric {
            continue;
        }
        series
            .entry((record.concept.clone(), record.corpus.clone()))
            .or_default()
            .push((
                record.layer.value() as f64,
                record.mean,
                record.ci_low,
                record.ci_high,
            ));
    }
    let all: Vec<&(f64, f64, f64, f64)> = series.values().flatten().collect();
    let (x_min, x_max) = x_span(all.iter().map(|p| p.0));
    let mut y_min = all.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let mut y_max = all.iter().map(|p| p.3).fold(f64::NEG_INFINITY, f64::max);
    if !y_min.is_finite() || !y_max.is_finite() {
        y_min = -1.0;
        y_max = 1.0;
    }
    let pad = ((y_max - y_min) * 0.08).max(0.01);
    let (y_min, y_max) = (y_min - pad, y_max + pad);

    let area = SVGBackend::new(path, (900, 600)).into_drawing_area();
    area.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&area)
        .margin(20)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .caption(
            format!("Corpus similarity by layer ({metric})"),
            ("sans-serif", 22),
        )
        .build_cartesian_2d(x_min..x_max, y_min..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("layer")
        .y_desc("cosine similarity")
        .draw()
        .map_err(plot_err)?;

    for (i, ((concept, corpus), mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
        let color = Palette99::pick(i).to_rgba();
        let band: Vec<(f64, f64)> = pts
            .iter()
            .map(|p| (p.0, p.3))
            .chain(pts.iter().rev().map(|p| (p.0, p.2)))
            .collect();
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.12))))
            .map_err(plot_err)?;
        let line: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
        chart
            .draw_series(LineSeries::new(
                line.clone(),
                ShapeStyle::from(&color).stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(format!("{concept} vs {corpus}"))
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], ShapeStyle::from(&color).stroke_width(2))
            });
        chart
            .draw_series(line.iter().map(|&(x, y)| Circle::new((x, y), 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK.mix(0.4))
        .draw()
        .map_err(plot_err)?;
    area.present().map_err(plot_err)?;
    Ok(())
}

// ── Gallery ──────────────────────────────────────────────────────────────

/// Open-protocol rate if present, else hinted, else `None`.
fn entry_rate(entry: &ManifestEntry) -> Option<f64> {
    for kind in [ProtocolKind::Open, ProtocolKind::Hinted] {
        if let Some(record) = entry.recognition.iter().find(|r| r.protocol.kind == kind) {
            return Some(record.rate);
        }
    }
    None
}

/// Picks the entry to display in one gallery cell: highest recognition
/// rate first, then lower final loss, then concept name for determinism.
fn best_entry<'a>(candidates: &[&'a ManifestEntry]) -> Option<&'a ManifestEntry> {
    candidates
        .iter()
        .min_by(|a, b| {
            let ra = entry_rate(a).unwrap_or(-1.0);
            let rb = entry_rate(b).unwrap_or(-1.0);
            rb.partial_cmp(&ra)
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    let la = a.final_loss.unwrap_or(f64::INFINITY);
                    let lb = b.final_loss.unwrap_or(f64::INFINITY);
                    la.partial_cmp(&lb).unwrap_or(Ordering::Equal)
                })
                .then_with(|| a.concept.cmp(&b.concept))
        })
        .copied()
}

fn gallery_report(manifest: &RunManifest, root: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let categories = &manifest.config.categories;
    let layers: Vec<usize> = manifest.config.layers.iter().map(|l| l.layer).collect();
    if categories.is_empty() || layers.is_empty() {
        return Err(Error::invalid("the manifest sweeps no (category, layer) cells"));
    }

    const CELL: usize = 96;
    const CAPTION: usize = 16;
    const LEFT: usize = 150;
    const TOP: usize = 46;
    const GAP: usize = 10;
    let pitch_x = CELL + GAP;
    let pitch_y = CELL + CAPTION + GAP;
    let width = LEFT + layers.len() * pitch_x + GAP;
    let height = TOP + categories.len() * pitch_y + GAP;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" \
         width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"20\" font-family=\"sans-serif\" font-size=\"15\" \
         font-weight=\"bold\">Best image per category and layer</text>\n"
    ));
    for (col, layer) in layers.iter().enumerate() {
        let x = LEFT + col * pitch_x + CELL / 2;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"12\">layer {layer}</text>\n",
            TOP - 6
        ));
    }

    for (row, category) in categories.iter().enumerate() {
        let y0 = TOP + row * pitch_y;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"12\">{}</text>\n",
            LEFT - 10,
            y0 + CELL / 2,
            escape_xml(category)
        ));
        for (col, &layer) in layers.iter().enumerate() {
            let x0 = LEFT + col * pitch_x;
            let candidates: Vec<&ManifestEntry> = manifest
                .entries
                .iter()
                .filter(|e| {
                    &e.category == category
                        && e.layer == layer
                        && matches!(e.status, EntryStatus::Completed)
                        && e.image_path.is_some()
                })
                .collect();
            match best_entry(&candidates) {
                Some(entry) => {
                    let rel = entry.image_path.as_ref().expect("filtered above");
                    let png_path = root.join(rel);
                    let bytes =
                        std::fs::read(&png_path).map_err(|e| Error::io(&png_path, e))?;
                    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                    svg.push_str(&format!(
                        "<image x=\"{x0}\" y=\"{y0}\" width=\"{CELL}\" height=\"{CELL}\" \
                         data-concept=\"{}\" xlink:href=\"data:image/png;base64,{data}\"/>\n",
                        escape_xml(&entry.concept)
                    ));
                    let caption = match entry_rate(entry) {
                        Some(rate) => format!("{} ({:.0}%)", entry.concept, rate * 100.0),
                        None => entry.concept.clone(),
                    };
                    svg.push_str(&format!(
                        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" \
                         font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
                        x0 + CELL / 2,
                        y0 + CELL + 12,
                        escape_xml(&caption)
                    ));
                }
                None => {
                    svg.push_str(&format!(
                        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{CELL}\" height=\"{CELL}\" \
                         fill=\"none\" stroke=\"#cccccc\" stroke-dasharray=\"4\"/>\n"
                    ));
                    svg.push_str(&format!(
                        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" \
                         font-family=\"sans-serif\" font-size=\"10\" fill=\"#999999\">missing</text>\n",
                        x0 + CELL / 2,
                        y0 + CELL / 2
                    ));
                }
            }
        }
    }
    svg.push_str("</svg>\n");

    let path = out.join("gallery.svg");
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    Ok(vec![path])
}
