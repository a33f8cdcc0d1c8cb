//! Concept directions in language space.
//!
//! A concept's direction at a layer is its text activation minus a language
//! baseline: the mean activation of a fixed list of unrelated words. The
//! baseline removes the large component shared by all text activations, which
//! otherwise dominates cosine similarities. Differences of directions are
//! baseline-independent, so any fixed word list yields the same relative
//! geometry.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, LayerIndex};
use crate::error::{Error, Result};

/// Mean text activation over a word list at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageBaseline {
    pub layer: LayerIndex,
    pub mean_activation: Vec<f64>,
    pub words: Vec<String>,
}

/// A concept's centred activation at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub concept: String,
    pub layer: LayerIndex,
    pub direction: Vec<f64>,
}

/// Mean of per-word activations (each word already averaged over its own
/// token positions by the backend).
pub fn compute_language_baseline(
    backend: &dyn Backend,
    words: &[String],
    layer: LayerIndex,
) -> Result<LanguageBaseline> {
    if words.is_empty() {
        return Err(Error::invalid("baseline word list is empty"));
    }
    let mut mean: Option<Vec<f64>> = None;
    for word in words {
        let act = backend.text_activations(word, layer)?;
        match &mut mean {
            None => mean = Some(act.values),
            Some(m) => {
                for (acc, v) in m.iter_mut().zip(&act.values) {
                    *acc += v;
                }
            }
        }
    }
    let mut mean = mean.expect("non-empty word list");
    for v in &mut mean {
        *v /= words.len() as f64;
    }
    Ok(LanguageBaseline {
        layer,
        mean_activation: mean,
        words: words.to_vec(),
    })
}

/// Concept activation minus the baseline mean.
pub fn concept_direction(
    backend: &dyn Backend,
    concept: &str,
    layer: LayerIndex,
    baseline: &LanguageBaseline,
) -> Result<ConceptVector> {
    if baseline.layer != layer {
        return Err(Error::invalid(format!(
            "baseline was computed at layer {} but the direction was requested at layer {}",
            baseline.layer, layer
        )));
    }
    let act = backend.text_activations(concept, layer)?;
    let direction: Vec<f64> = act
        .values
        .iter()
        .zip(&baseline.mean_activation)
        .map(|(a, b)| a - b)
        .collect();
    Ok(ConceptVector {
        concept: concept.to_string(),
        layer,
        direction,
    })
}

/// Concepts grouped into named categories, with an optional singular hint
/// word per category for the hinted judging protocol. Categories iterate in
/// name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptCatalogue {
    categories: BTreeMap<String, Vec<String>>,
    hints: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct CatalogueFile {
    categories: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    hints: BTreeMap<String, String>,
}

impl ConceptCatalogue {
    /// The default catalogue shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_toml_str(
            include_str!("../resources/catalogue_default.toml"),
            Path::new("<bundled catalogue>"),
        )
        .expect("bundled catalogue is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let parsed: CatalogueFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: e.span().map(|s| format!("bytes {}..{}", s.start, s.end)),
            message: e.message().to_string(),
        })?;
        let catalogue = ConceptCatalogue {
            categories: parsed.categories,
            hints: parsed.hints,
        };
        catalogue.validate(path)?;
        Ok(catalogue)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            location: None,
            message,
        };
        if self.categories.is_empty() {
            return Err(parse_err("catalogue has no categories".to_string()));
        }
        for (name, concepts) in &self.categories {
            if concepts.is_empty() {
                return Err(parse_err(format!("category {name:?} is empty")));
            }
            let mut seen = std::collections::BTreeSet::new();
            for concept in concepts {
                if !seen.insert(concept) {
                    return Err(parse_err(format!(
                        "category {name:?} lists {concept:?} twice"
                    )));
                }
            }
        }
        for name in self.hints.keys() {
            if !self.categories.contains_key(name) {
                return Err(parse_err(format!(
                    "hint for unknown category {name:?}"
                )));
            }
        }
        Ok(())
    }

    /// Categories in name order.
    pub fn categories(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.categories
            .iter()
            .map(|(name, concepts)| (name.as_str(), concepts.as_slice()))
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.keys().cloned().collect()
    }

    pub fn category(&self, name: &str) -> Option<&[String]> {
        self.categories.get(name).map(|c| c.as_slice())
    }

    /// The hint word for the hinted question; falls back to the category
    /// name when no hint was declared.
    pub fn hint<'a>(&'a self, category: &'a str) -> &'a str {
        self.hints
            .get(category)
            .map(|h| h.as_str())
            .unwrap_or(category)
    }

    pub fn concept_count(&self) -> usize {
        self.categories.values().map(|c| c.len()).sum()
    }
}

/// The bundled 100-word baseline list, in printed order. The list contains
/// "marble" and "butterfly" twice; the duplicates are kept as printed and
/// therefore carry double weight in the baseline mean.
pub fn bundled_baseline_words() -> Vec<String> {
    include_str!("../resources/baseline_words.txt")
        .lines()
        .map(|l| l.to_string())
        .collect()
}

/// Loads a baseline word list: one word per line, blank lines ignored.
pub fn load_baseline_words(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let words: Vec<String> = text
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect();
    if words.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            location: None,
            message: "baseline word file contains no words".to_string(),
        });
    }
    Ok(words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyBackend;

    fn strings(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn baseline_is_brute_force_mean() {
        let backend = ToyBackend::new();
        let layer = LayerIndex(1);
        let words = strings(&["octopus", "frog", "granite"]);
        let baseline = compute_language_baseline(&backend, &words, layer).unwrap();
        let acts: Vec<Vec<f64>> = words
            .iter()
            .map(|w| backend.text_activations(w, layer).unwrap().values)
            .collect();
        for (j, m) in baseline.mean_activation.iter().enumerate() {
            let oracle = (acts[0][j] + acts[1][j] + acts[2][j]) / 3.0;
            assert!((m - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn single_word_baseline_equals_activation() {
        let backend = ToyBackend::new();
        let layer = LayerIndex(0);
        let baseline =
            compute_language_baseline(&backend, &strings(&["lantern"]), layer).unwrap();
        let act = backend.text_activations("lantern", layer).unwrap();
        assert_eq!(baseline.mean_activation, act.values);
    }

    #[test]
    fn empty_word_list_is_rejected() {
        let backend = ToyBackend::new();
        assert!(compute_language_baseline(&backend, &[], LayerIndex(0)).is_err());
    }

    #[test]
    fn direction_of_sole_baseline_word_is_zero() {
        let backend = ToyBackend::new();
        let layer = LayerIndex(2);
        let baseline = compute_language_baseline(&backend, &strings(&["vortex"]), layer).unwrap();
        let dir = concept_direction(&backend, "vortex", layer, &baseline).unwrap();
        assert!(dir.direction.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn layer_mismatch_is_rejected() {
        let backend = ToyBackend::new();
        let baseline =
            compute_language_baseline(&backend, &strings(&["vortex"]), LayerIndex(1)).unwrap();
        assert!(concept_direction(&backend, "apple", LayerIndex(2), &baseline).is_err());
    }

    #[test]
    fn planted_direction_aligns_with_planted_axis() {
        let backend = ToyBackend::new();
        let words = bundled_baseline_words();
        for layer in [LayerIndex(0), LayerIndex(3)] {
            let baseline = compute_language_baseline(&backend, &words, layer).unwrap();
            let dir = concept_direction(&backend, "apple", layer, &baseline).unwrap();
            let axis = backend.planted_axis(0, layer).unwrap();
            let c = crate::stats::cosine(&dir.direction, axis);
            assert!(c > 0.99, "layer {layer}: cosine {c}");
        }
    }

    #[test]
    fn distinct_planted_directions_are_near_orthogonal() {
        let backend = ToyBackend::new();
        let layer = LayerIndex(1);
        let baseline =
            compute_language_baseline(&backend, &bundled_baseline_words(), layer).unwrap();
        let words = backend.planted_words().to_vec();
        let dirs: Vec<ConceptVector> = words
            .iter()
            .map(|w| concept_direction(&backend, w, layer, &baseline).unwrap())
            .collect();
        for i in 0..dirs.len() {
            for j in 0..i {
                let c = crate::stats::cosine(&dirs[i].direction, &dirs[j].direction);
                assert!(
                    c.abs() < 0.1,
                    "{} vs {}: cosine {c}",
                    words[i],
                    words[j]
                );
            }
        }
    }

    #[test]
    fn linearity_roundtrip() {
        let backend = ToyBackend::new();
        let layer = LayerIndex(1);
        let baseline = compute_language_baseline(
            &backend,
            &strings(&["granite", "velvet", "meadow"]),
            layer,
        )
        .unwrap();
        let dir = concept_direction(&backend, "octopus", layer, &baseline).unwrap();
        let act = backend.text_activations("octopus", layer).unwrap();
        for ((d, b), a) in dir
            .direction
            .iter()
            .zip(&baseline.mean_activation)
            .zip(&act.values)
        {
            assert!((d + b - a).abs() < 1e-12);
        }
    }

    #[test]
    fn direction_differences_are_baseline_invariant() {
        let backend = ToyBackend::new();
        let layer = LayerIndex(2);
        let b1 = compute_language_baseline(&backend, &strings(&["granite", "velvet"]), layer)
            .unwrap();
        let b2 =
            compute_language_baseline(&backend, &bundled_baseline_words(), layer).unwrap();
        let diff = |b: &LanguageBaseline| {
            let d1 = concept_direction(&backend, "apple", layer, b).unwrap();
            let d2 = concept_direction(&backend, "orange", layer, b).unwrap();
            d1.direction
                .iter()
                .zip(d2.direction)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>()
        };
        for (x, y) in diff(&b1).iter().zip(diff(&b2)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn directions_of_baseline_words_average_to_zero() {
        let backend = ToyBackend::new();
        let layer = LayerIndex(0);
        let words = strings(&["granite", "velvet", "meadow", "ember", "juniper"]);
        let baseline = compute_language_baseline(&backend, &words, layer).unwrap();
        let mut mean = vec![0.0; baseline.mean_activation.len()];
        for w in &words {
            let dir = concept_direction(&backend, w, layer, &baseline).unwrap();
            for (m, v) in mean.iter_mut().zip(&dir.direction) {
                *m += v / words.len() as f64;
            }
        }
        assert!(mean.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn bundled_baseline_matches_printed_list() {
        let words = bundled_baseline_words();
        assert_eq!(words.len(), 100);
        assert_eq!(words.iter().filter(|w| *w == "marble").count(), 2);
        assert_eq!(words.iter().filter(|w| *w == "butterfly").count(), 2);
        assert_eq!(words.first().unwrap(), "desk");
        assert_eq!(words.last().unwrap(), "enigma");
    }

    #[test]
    fn bundled_catalogue_shape() {
        let catalogue = ConceptCatalogue::bundled();
        assert_eq!(catalogue.category("seasons").unwrap().len(), 4);
        let animals = catalogue.category("animals").unwrap();
        assert_eq!(animals.len(), 10);
        assert_eq!(animals.last().unwrap(), "T-rex");
        assert_eq!(catalogue.category_names().len(), 14);
        assert!(catalogue.concept_count() > 100);
        assert_eq!(catalogue.hint("animals"), "animal");
        assert_eq!(catalogue.hint("unlisted"), "unlisted");
        assert!(catalogue
            .category("seasons")
            .unwrap()
            .contains(&"spring (season)".to_string()));
    }

    #[test]
    fn empty_catalogue_file_is_a_parse_error() {
        let err = ConceptCatalogue::from_toml_str("", Path::new("empty.toml")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn malformed_catalogue_reports_location() {
        let err = ConceptCatalogue::from_toml_str(
            "[categories]\nanimals = [\"octopus\", )",
            Path::new("bad.toml"),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.toml"), "{msg}");
        assert!(msg.contains("bytes"), "{msg}");
    }

    #[test]
    fn duplicate_concepts_are_rejected() {
        let err = ConceptCatalogue::from_toml_str(
            "[categories]\nanimals = [\"frog\", \"frog\"]",
            Path::new("dup.toml"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("twice"));
    }

    #[test]
    fn empty_category_is_rejected() {
        assert!(ConceptCatalogue::from_toml_str(
            "[categories]\nanimals = []",
            Path::new("x.toml")
        )
        .is_err());
    }

    #[test]
    fn baseline_word_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("words.txt");
        std::fs::write(&path, "alpha\n\n beta \n").unwrap();
        assert_eq!(
            load_baseline_words(&path).unwrap(),
            vec!["alpha".to_string(), "beta".to_string()]
        );
        std::fs::write(&path, "\n\n").unwrap();
        assert!(load_baseline_words(&path).is_err());
    }
}
