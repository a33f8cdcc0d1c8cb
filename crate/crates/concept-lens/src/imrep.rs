//! Image representations from patch activations.
//!
//! An image at layer ℓ is represented as a weighted sum of its centred patch
//! activations. Centering subtracts the grey-image baseline (the analogue of
//! the language baseline on the vision side). The weights combine semantic
//! relevance (cosine of each centred patch against the target direction) with
//! a Gaussian spatial prior around the image centre, sharpened or flattened
//! by a temperature:
//!
//! ```text
//! α = softmax( (s_i + log g_i) / τ ),   rep = Σ α_i · (p_i − b_img)
//! ```
//!
//! Mean mode replaces α with uniform weights, which empirically performs
//! comparably for probing; it is the default for similarity measurement while
//! attention mode drives synthesis.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, VarId};
use crate::backend::{Backend, LayerIndex, PatchActivations};
use crate::concepts::ConceptVector;
use crate::error::{Error, Result};
use crate::image::PixelImage;

/// Mean patch activation of the uniform grey image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBaseline {
    pub layer: LayerIndex,
    pub mean_patch: Vec<f64>,
}

pub fn compute_image_baseline(backend: &dyn Backend, layer: LayerIndex) -> Result<ImageBaseline> {
    let resolution = backend.describe().image_resolution;
    let grey = PixelImage::grey(resolution);
    let patches = backend.image_patch_activations(&grey, layer)?;
    let h = patches.hidden_dim();
    let n = patches.patch_count();
    let mut mean = vec![0.0; h];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(patches.patch(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    Ok(ImageBaseline {
        layer,
        mean_patch: mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Softmax over semantic scores plus log spatial prior.
    Attention,
    /// Uniform weights over all patches.
    Mean,
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AggregationMode::Attention => write!(f, "attention"),
            AggregationMode::Mean => write!(f, "mean"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub mode: AggregationMode,
    /// Softmax temperature τ; low values focus attention.
    pub temperature: f64,
    /// Spatial prior width σ, in patch-grid units.
    pub prior_sigma: f64,
    /// Prior centre in grid coordinates; `None` means the geometric centre
    /// of the grid, which is fractional for even grids.
    pub prior_center: Option<(f64, f64)>,
}

impl AggregationConfig {
    pub fn attention(temperature: f64, prior_sigma: f64) -> Self {
        AggregationConfig {
            mode: AggregationMode::Attention,
            temperature,
            prior_sigma,
            prior_center: None,
        }
    }

    pub fn mean() -> Self {
        AggregationConfig {
            mode: AggregationMode::Mean,
            temperature: 1.0,
            prior_sigma: 1.0,
            prior_center: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.prior_sigma > 0.0) {
            return Err(Error::invalid(format!(
                "prior sigma must be positive, got {}",
                self.prior_sigma
            )));
        }
        Ok(())
    }

    fn center_for(&self, grid: (usize, usize)) -> (f64, f64) {
        self.prior_center.unwrap_or_else(|| default_center(grid))
    }
}

/// Geometric centre of a (rows, cols) grid in (x, y) coordinates.
pub fn default_center(grid: (usize, usize)) -> (f64, f64) {
    ((grid.1 as f64 - 1.0) / 2.0, (grid.0 as f64 - 1.0) / 2.0)
}

fn log_prior_at(coord: (usize, usize), center: (f64, f64), sigma: f64) -> f64 {
    let dx = coord.0 as f64 - center.0;
    let dy = coord.1 as f64 - center.1;
    -(dx * dx + dy * dy) / (2.0 * sigma * sigma)
}

/// Spatial prior over the row-major patch grid:
/// `g_i = exp(−((x_i−x_c)² + (y_i−y_c)²)/(2σ²))`. With `center: None` the
/// grid's geometric centre is used. All values are strictly positive.
pub fn gaussian_prior(
    grid: (usize, usize),
    center: Option<(f64, f64)>,
    sigma: f64,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "prior sigma must be positive, got {sigma}"
        )));
    }
    let center = center.unwrap_or_else(|| default_center(grid));
    let n = grid.0 * grid.1;
    Ok((0..n)
        .map(|i| log_prior_at((i % grid.1, i / grid.1), center, sigma).exp())
        .collect())
}

/// The log prior computed analytically as −d²/(2σ²), never through
/// `log(exp(·))`, so it stays finite at small σ.
fn log_gaussian_prior(coords: &[(usize, usize)], center: (f64, f64), sigma: f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&c| log_prior_at(c, center, sigma))
        .collect()
}

fn check_dims(
    patches: &PatchActivations,
    baseline: &ImageBaseline,
    target: &ConceptVector,
) -> Result<()> {
    let h = patches.hidden_dim();
    if baseline.mean_patch.len() != h {
        return Err(Error::shape(format!(
            "image baseline has {} dims, patches have {}",
            baseline.mean_patch.len(),
            h
        )));
    }
    if target.direction.len() != h {
        return Err(Error::shape(format!(
            "concept direction has {} dims, patches have {}",
            target.direction.len(),
            h
        )));
    }
    if patches.layer() != baseline.layer || patches.layer() != target.layer {
        return Err(Error::invalid(format!(
            "layer mismatch: patches at {}, image baseline at {}, concept at {}",
            patches.layer(),
            baseline.layer,
            target.layer
        )));
    }
    Ok(())
}

/// Cosine of each centred patch against the target direction. Patches whose
/// centred activation has (near-)zero norm score 0.
pub fn semantic_scores(
    patches: &PatchActivations,
    baseline: &ImageBaseline,
    target: &ConceptVector,
) -> Result<Vec<f64>> {
    check_dims(patches, baseline, target)?;
    let h = patches.hidden_dim();
    let mut centred = Vec::with_capacity(h);
    Ok((0..patches.patch_count())
        .map(|i| {
            centred.clear();
            centred.extend(
                patches
                    .patch(i)
                    .iter()
                    .zip(&baseline.mean_patch)
                    .map(|(p, b)| p - b),
            );
            crate::stats::cosine(&centred, &target.direction)
        })
        .collect())
}

/// An image reduced to a single vector, with the weights and scores that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRepresentation {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Weighted sum of centred patches; see the module docs for the weight rule.
pub fn aggregate(
    patches: &PatchActivations,
    baseline: &ImageBaseline,
    target: &ConceptVector,
    config: &AggregationConfig,
) -> Result<ImageRepresentation> {
    config.validate()?;
    let scores = semantic_scores(patches, baseline, target)?;
    let n = patches.patch_count();
    let h = patches.hidden_dim();
    let weights = match config.mode {
        AggregationMode::Attention => {
            let center = config.center_for(patches.grid());
            let log_prior = log_gaussian_prior(patches.coords(), center, config.prior_sigma);
            let logits: Vec<f64> = scores
                .iter()
                .zip(&log_prior)
                .map(|(s, lg)| (s + lg) / config.temperature)
                .collect();
            autodiff::softmax(&logits)
        }
        AggregationMode::Mean => vec![1.0 / n as f64; n],
    };
    let mut vector = vec![0.0; h];
    for i in 0..n {
        let w = weights[i];
        for (v, (p, b)) in vector
            .iter_mut()
            .zip(patches.patch(i).iter().zip(&baseline.mean_patch))
        {
            *v += w * (p - b);
        }
    }
    Ok(ImageRepresentation {
        vector,
        weights,
        scores,
    })
}

/// Cosine between the aggregated representation and the target direction;
/// the synthesis objective evaluated without a tape.
pub fn objective(
    patches: &PatchActivations,
    baseline: &ImageBaseline,
    target: &ConceptVector,
    config: &AggregationConfig,
) -> Result<f64> {
    let rep = aggregate(patches, baseline, target, config)?;
    Ok(crate::stats::cosine(&rep.vector, &target.direction))
}

/// Tape construction mirroring [`aggregate`] and [`objective`], used by the
/// synthesis loss. `patches_var` holds the row-major activation matrix.
pub(crate) fn objective_tape(
    tape: &mut Tape,
    patches_var: VarId,
    n: usize,
    h: usize,
    coords: &[(usize, usize)],
    grid: (usize, usize),
    baseline: &ImageBaseline,
    target: &ConceptVector,
    config: &AggregationConfig,
) -> VarId {
    let target_dir = std::sync::Arc::new(target.direction.clone());
    let baseline_row = std::sync::Arc::new(baseline.mean_patch.clone());
    let centred = tape.add_row_const(patches_var, n, h, baseline_row, -1.0);
    let rep = match config.mode {
        AggregationMode::Attention => {
            let scores = tape.cosine_rows_const(centred, n, h, std::sync::Arc::clone(&target_dir));
            let center = config.center_for(grid);
            let log_prior = log_gaussian_prior(coords, center, config.prior_sigma);
            let shifted = tape.add_vec_const(scores, log_prior, 1.0);
            let logits = tape.affine_scalar(shifted, 1.0 / config.temperature, 0.0);
            let weights = tape.softmax(logits);
            tape.weighted_row_sum(weights, centred, n, h)
        }
        AggregationMode::Mean => tape.mean_rows(centred, n, h),
    };
    tape.cosine_vec_const(rep, target_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyBackend;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_target(h: usize, seed: u64) -> ConceptVector {
        let mut rng = crate::seeds::rng(seed, &["imrep-target"]);
        ConceptVector {
            concept: "test".into(),
            layer: LayerIndex(0),
            direction: (0..h).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn random_patches(n_rows: usize, n_cols: usize, h: usize, seed: u64) -> PatchActivations {
        let mut rng = crate::seeds::rng(seed, &["imrep-patches"]);
        let values = (0..n_rows * n_cols * h)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        PatchActivations::new(LayerIndex(0), values, h, (n_rows, n_cols)).unwrap()
    }

    fn zero_baseline(h: usize) -> ImageBaseline {
        ImageBaseline {
            layer: LayerIndex(0),
            mean_patch: vec![0.0; h],
        }
    }

    #[test]
    fn grey_baseline_is_pure_and_centres_itself() {
        let backend = ToyBackend::new();
        let layer = LayerIndex(2);
        let a = compute_image_baseline(&backend, layer).unwrap();
        let b = compute_image_baseline(&backend, layer).unwrap();
        assert_eq!(a, b);
        // Subtracting the baseline from the grey image's own patches leaves
        // a zero mean vector.
        let grey = PixelImage::grey(64);
        let patches = backend.image_patch_activations(&grey, layer).unwrap();
        let h = patches.hidden_dim();
        let mut mean = vec![0.0; h];
        for i in 0..patches.patch_count() {
            for (m, (p, bl)) in mean
                .iter_mut()
                .zip(patches.patch(i).iter().zip(&a.mean_patch))
            {
                *m += p - bl;
            }
        }
        assert!(mean.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn prior_is_one_at_centre_and_matches_hand_values() {
        // Exact centre of a 3x3 grid.
        let g = gaussian_prior((3, 3), None, 1.0).unwrap();
        assert_eq!(g[4], 1.0);
        // Corner at squared distance 2 from the centre.
        assert!((g[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!(g.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn prior_flattens_at_large_sigma() {
        let g = gaussian_prior((8, 8), None, 1000.0).unwrap();
        let max = g.iter().cloned().fold(f64::MIN, f64::max);
        let min = g.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 1.01);
    }

    #[test]
    fn prior_rejects_bad_sigma() {
        assert!(gaussian_prior((3, 3), None, 0.0).is_err());
        assert!(gaussian_prior((3, 3), None, -1.0).is_err());
    }

    #[test]
    fn default_center_is_fractional_for_even_grids() {
        assert_eq!(default_center((8, 8)), (3.5, 3.5));
        assert_eq!(default_center((3, 3)), (1.0, 1.0));
        assert_eq!(default_center((2, 4)), (1.5, 0.5));
    }

    #[test]
    fn scores_hit_plus_minus_one_on_colinear_patches() {
        let h = 6;
        let target = toy_target(h, 1);
        let mut rng = crate::seeds::rng(9, &["imrep-baseline"]);
        let base: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut values = Vec::new();
        values.extend(base.iter().zip(&target.direction).map(|(b, t)| b + t));
        values.extend(base.iter().zip(&target.direction).map(|(b, t)| b - t));
        let patches = PatchActivations::new(LayerIndex(0), values, h, (1, 2)).unwrap();
        let baseline = ImageBaseline {
            layer: LayerIndex(0),
            mean_patch: base,
        };
        let s = semantic_scores(&patches, &baseline, &target).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn scores_match_brute_force_cosine() {
        let h = 16;
        let patches = random_patches(3, 4, h, 2);
        let target = toy_target(h, 3);
        let mut rng = crate::seeds::rng(4, &["imrep-baseline2"]);
        let baseline = ImageBaseline {
            layer: LayerIndex(0),
            mean_patch: (0..h).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let s = semantic_scores(&patches, &baseline, &target).unwrap();
        for i in 0..patches.patch_count() {
            let c: Vec<f64> = patches
                .patch(i)
                .iter()
                .zip(&baseline.mean_patch)
                .map(|(p, b)| p - b)
                .collect();
            let dot: f64 = c.iter().zip(&target.direction).map(|(a, b)| a * b).sum();
            let na: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = target.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((s[i] - dot / (na * nb)).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let patches = random_patches(2, 2, 8, 5);
        let baseline = zero_baseline(7);
        let target = toy_target(8, 6);
        assert!(semantic_scores(&patches, &baseline, &target).is_err());
    }

    #[test]
    fn uniform_inputs_give_uniform_attention() {
        let h = 8;
        // All patches identical, prior flattened by huge sigma.
        let row: Vec<f64> = (0..h).map(|i| (i as f64) / 7.0 - 0.4).collect();
        let mut values = Vec::new();
        for _ in 0..9 {
            values.extend(&row);
        }
        let patches = PatchActivations::new(LayerIndex(0), values, h, (3, 3)).unwrap();
        let rep = aggregate(
            &patches,
            &zero_baseline(h),
            &toy_target(h, 7),
            &AggregationConfig::attention(0.5, 1e9),
        )
        .unwrap();
        for w in &rep.weights {
            assert!((w - 1.0 / 9.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_patch_softmax_matches_hand_computation() {
        let h = 4;
        let target = ConceptVector {
            concept: "t".into(),
            layer: LayerIndex(0),
            direction: vec![1.0, 0.0, 0.0, 0.0],
        };
        // Patch 0 colinear with the target (s=1), patch 1 orthogonal (s=0);
        // both patches sit at equal distance from the prior centre, so the
        // prior cancels and α = softmax((1,0)/τ) = softmax(2, 0) at τ=0.5.
        let values = vec![
            2.0, 0.0, 0.0, 0.0, // s = 1
            0.0, 3.0, 0.0, 0.0, // s = 0
        ];
        let patches = PatchActivations::new(LayerIndex(0), values, h, (1, 2)).unwrap();
        let rep = aggregate(
            &patches,
            &zero_baseline(h),
            &target,
            &AggregationConfig::attention(0.5, 1.0),
        )
        .unwrap();
        assert!((rep.weights[0] - 0.8808).abs() < 1e-4);
        assert!((rep.weights[1] - 0.1192).abs() < 1e-4);
        assert!((rep.scores[0] - 1.0).abs() < 1e-12);
        assert!(rep.scores[1].abs() < 1e-12);
    }

    #[test]
    fn low_temperature_focuses_attention() {
        let h = 8;
        let patches = random_patches(3, 3, h, 8);
        let rep = aggregate(
            &patches,
            &zero_baseline(h),
            &toy_target(h, 9),
            &AggregationConfig {
                mode: AggregationMode::Attention,
                temperature: 0.005,
                prior_sigma: 1e6,
                prior_center: None,
            },
        )
        .unwrap();
        let max = rep.weights.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max > 0.999, "max weight {max}");
    }

    #[test]
    fn mean_mode_matches_brute_force_mean() {
        let h = 16;
        let patches = random_patches(4, 4, h, 10);
        let mut rng = crate::seeds::rng(11, &["imrep-baseline3"]);
        let baseline = ImageBaseline {
            layer: LayerIndex(0),
            mean_patch: (0..h).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let rep = aggregate(
            &patches,
            &baseline,
            &toy_target(h, 12),
            &AggregationConfig::mean(),
        )
        .unwrap();
        let n = patches.patch_count();
        for j in 0..h {
            let oracle = (0..n)
                .map(|i| patches.patch(i)[j] - baseline.mean_patch[j])
                .sum::<f64>()
                / n as f64;
            assert!((rep.vector[j] - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_is_monotone_in_distance_for_equal_scores() {
        let h = 4;
        let row = vec![0.3, -0.2, 0.9, 0.1];
        let mut values = Vec::new();
        for _ in 0..12 {
            values.extend(&row);
        }
        let patches = PatchActivations::new(LayerIndex(0), values, h, (3, 4)).unwrap();
        let config = AggregationConfig {
            mode: AggregationMode::Attention,
            temperature: 0.7,
            prior_sigma: 1.3,
            prior_center: Some((0.8, 1.9)),
        };
        let rep = aggregate(&patches, &zero_baseline(h), &toy_target(h, 13), &config).unwrap();
        let mut indexed: Vec<(f64, f64)> = patches
            .coords()
            .iter()
            .zip(&rep.weights)
            .map(|(&(x, y), &w)| {
                let dx = x as f64 - 0.8;
                let dy = y as f64 - 1.9;
                (dx * dx + dy * dy, w)
            })
            .collect();
        indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in indexed.windows(2) {
            assert!(pair[0].1 >= pair[1].1 - 1e-12);
        }
    }

    #[test]
    fn tape_objective_matches_plain_objective_and_finite_differences() {
        let backend = ToyBackend::with_config(crate::backend::toy::ToyConfig::tiny()).unwrap();
        let layer = LayerIndex(1);
        let baseline = compute_image_baseline(&backend, layer).unwrap();
        let mut target = toy_target(16, 14);
        target.layer = layer;
        let patches = {
            let img = backend.planted_image(3, 0.2, 15).unwrap();
            backend.image_patch_activations(&img, layer).unwrap()
        };
        for config in [
            AggregationConfig::attention(0.5, 2.0),
            AggregationConfig::mean(),
        ] {
            let plain = objective(&patches, &baseline, &target, &config).unwrap();
            let mut tape = Tape::new();
            let leaf = tape.leaf(patches.values().to_vec());
            let out = objective_tape(
                &mut tape,
                leaf,
                patches.patch_count(),
                patches.hidden_dim(),
                patches.coords(),
                patches.grid(),
                &baseline,
                &target,
                &config,
            );
            assert!((tape.scalar(out) - plain).abs() < 1e-12);

            // Finite differences through the full aggregation.
            let grads = tape.backward(out);
            let analytic = grads.wrt(leaf).to_vec();
            let h = 1e-5;
            let mut probe = patches.values().to_vec();
            for &i in &[0usize, 13, 37, 63] {
                let orig = probe[i];
                probe[i] = orig + h;
                let up = {
                    let p = PatchActivations::new(layer, probe.clone(), 16, patches.grid())
                        .unwrap();
                    objective(&p, &baseline, &target, &config).unwrap()
                };
                probe[i] = orig - h;
                let down = {
                    let p = PatchActivations::new(layer, probe.clone(), 16, patches.grid())
                        .unwrap();
                    objective(&p, &baseline, &target, &config).unwrap()
                };
                probe[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                assert!(
                    (analytic[i] - numeric).abs() < 1e-4 * numeric.abs().max(1.0),
                    "{config:?} entry {i}: analytic {} numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn weights_form_a_simplex_and_scores_stay_bounded(
            seed in 0u64..1000,
            tau in 0.01f64..10.0,
            sigma in 0.1f64..50.0,
        ) {
            let h = 8;
            let patches = random_patches(3, 3, h, seed);
            let target = toy_target(h, seed.wrapping_add(1));
            let config = AggregationConfig {
                mode: AggregationMode::Attention,
                temperature: tau,
                prior_sigma: sigma,
                prior_center: None,
            };
            let rep = aggregate(&patches, &zero_baseline(h), &target, &config).unwrap();
            let sum: f64 = rep.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(rep.weights.iter().all(|w| *w >= 0.0));
            prop_assert!(rep.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
        }
    }
}
