//! Image synthesis by direct ascent on a multi-resolution pixel stack.
//!
//! The image is parametrised as a grey base plus a bounded perturbation,
//!
//! ```text
//! image = 0.5 + 0.5 · tanh( Σ_r upscale(l_r) )
//! ```
//!
//! where the trainable components `l_r` live at resolutions R, R−20, R−40, …
//! down to 8. Optimising all scales jointly biases the result toward
//! coherent structure instead of adversarial high-frequency noise. Each step
//! draws a batch of augmentations (random wrap-around shift on an enlarged
//! canvas, centre crop, unclamped Gaussian pixel noise) and descends the
//! mean of
//!
//! ```text
//! loss = − cosine( target direction, aggregate(patches(augment(image))) )
//! ```
//!
//! with SGD momentum, global-norm gradient clipping, and a spatial-prior σ
//! that widens linearly over the run.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::backend::Backend;
use crate::concepts::ConceptVector;
use crate::error::{Error, Result};
use crate::image::{bilinear_resize, PixelImage, CHANNELS};
use crate::imrep::{self, AggregationConfig, AggregationMode, ImageBaseline};
use crate::seeds;

/// Gap between adjacent stack resolutions.
pub const RESOLUTION_STEP: usize = 20;
/// Smallest allowed component resolution.
pub const MIN_RESOLUTION: usize = 8;
/// Default augmentation shift bound Σ, in pixels.
pub const DEFAULT_MAX_SHIFT: usize = 56;
/// Default augmentation noise standard deviation.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

/// The component resolutions for a target resolution: `{R, R−20, R−40, …}`
/// truncated at the smallest value that is still at least 8.
pub fn resolution_set(resolution: usize) -> Result<Vec<usize>> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::invalid(format!(
            "stack resolution must be at least {MIN_RESOLUTION}, got {resolution}"
        )));
    }
    let mut set = Vec::new();
    let mut r = resolution;
    loop {
        set.push(r);
        if r < MIN_RESOLUTION + RESOLUTION_STEP {
            break;
        }
        r -= RESOLUTION_STEP;
    }
    Ok(set)
}

/// One trainable component of the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackComponent {
    pub resolution: usize,
    /// HWC values, length `resolution^2 * 3`.
    pub values: Vec<f64>,
}

/// The full set of trainable components for one synthesis run.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiResStack {
    resolution: usize,
    components: Vec<StackComponent>,
}

impl MultiResStack {
    /// Zero-initialised stack: composes to the exact grey base image.
    pub fn zeros(resolution: usize) -> Result<Self> {
        let components = resolution_set(resolution)?
            .into_iter()
            .map(|r| StackComponent {
                resolution: r,
                values: vec![0.0; r * r * CHANNELS],
            })
            .collect();
        Ok(MultiResStack {
            resolution,
            components,
        })
    }

    /// Gaussian-initialised stack, for tests and fixtures.
    pub fn random(resolution: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut stack = Self::zeros(resolution)?;
        let mut rng = seeds::rng(seed, &["stack-init"]);
        for comp in &mut stack.components {
            for v in &mut comp.values {
                *v = scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        Ok(stack)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Components in descending resolution order, largest first.
    pub fn components(&self) -> &[StackComponent] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [StackComponent] {
        &mut self.components
    }
}

/// Sum of all components bilinearly upscaled to the stack resolution; the
/// pre-tanh perturbation. Linear in the stack.
pub fn perturbation(stack: &MultiResStack) -> Vec<f64> {
    let r = stack.resolution;
    let mut sum = vec![0.0; r * r * CHANNELS];
    for comp in &stack.components {
        let up = if comp.resolution == r {
            comp.values.clone()
        } else {
            bilinear_resize(&comp.values, comp.resolution, comp.resolution, r, r)
        };
        for (s, u) in sum.iter_mut().zip(&up) {
            *s += u;
        }
    }
    sum
}

/// The composed image `0.5 + 0.5·tanh(perturbation)`; every pixel is in
/// `[0, 1]` for any finite stack.
pub fn compose(stack: &MultiResStack) -> PixelImage {
    let data = perturbation(stack)
        .into_iter()
        .map(|v| 0.5 + 0.5 * v.tanh())
        .collect();
    PixelImage::from_data(stack.resolution, data).expect("perturbation has image shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Shift bound Σ: shifts are drawn from {−Σ, …, Σ}² and the pre-shift
    /// canvas is (R+Σ)².
    pub max_shift: usize,
    /// Standard deviation of the Gaussian pixel noise added after cropping.
    pub noise_sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            max_shift: DEFAULT_MAX_SHIFT,
            noise_sigma: DEFAULT_NOISE_SIGMA,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// The random choices of one augmentation: horizontal and vertical shifts
/// (drawn independently) and the noise field.
struct AugmentDraw {
    dx: i64,
    dy: i64,
    noise: Option<Vec<f64>>,
}

fn draw_augment(resolution: usize, config: &AugmentationConfig, seed: u64) -> AugmentDraw {
    let mut rng = seeds::rng(seed, &["augment"]);
    let s = config.max_shift as i64;
    let dx = rng.random_range(-s..=s);
    let dy = rng.random_range(-s..=s);
    let noise = if config.noise_sigma > 0.0 {
        let dist = rand_distr::Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        Some(
            (0..resolution * resolution * CHANNELS)
                .map(|_| rng.sample(dist))
                .collect(),
        )
    } else {
        None
    };
    AugmentDraw { dx, dy, noise }
}

/// One random augmentation: bilinear upscale to (R+Σ)², wrap-around shift by
/// (dx, dy) ∈ {−Σ,…,Σ}², centre-crop back to R², then add Gaussian noise.
/// The output is not clamped, so values may leave `[0, 1]`.
pub fn augment(image: &PixelImage, config: &AugmentationConfig, seed: u64) -> Result<PixelImage> {
    config.validate()?;
    let r = image.resolution();
    let canvas = r + config.max_shift;
    let draw = draw_augment(r, config, seed);

    let up = bilinear_resize(image.data(), r, r, canvas, canvas);
    let mut rolled = vec![0.0; up.len()];
    for y in 0..canvas {
        let sy = (y as i64 - draw.dy).rem_euclid(canvas as i64) as usize;
        for x in 0..canvas {
            let sx = (x as i64 - draw.dx).rem_euclid(canvas as i64) as usize;
            let src = (sy * canvas + sx) * CHANNELS;
            let dst = (y * canvas + x) * CHANNELS;
            rolled[dst..dst + CHANNELS].copy_from_slice(&up[src..src + CHANNELS]);
        }
    }
    let off = (canvas - r) / 2;
    let mut out = vec![0.0; r * r * CHANNELS];
    for y in 0..r {
        let src = ((y + off) * canvas + off) * CHANNELS;
        let dst = y * r * CHANNELS;
        out[dst..dst + r * CHANNELS].copy_from_slice(&rolled[src..src + r * CHANNELS]);
    }
    if let Some(noise) = &draw.noise {
        for (o, n) in out.iter_mut().zip(noise) {
            *o += n;
        }
    }
    PixelImage::from_data(r, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Global-norm bound over the concatenated component gradients.
    pub grad_clip_norm: f64,
    /// Spatial-prior σ endpoints, advanced linearly per step.
    pub sigma_schedule: (f64, f64),
    /// Softmax temperature τ for attention aggregation.
    pub temperature: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.steps < 1 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::invalid("gradient clip norm must be positive"));
        }
        if !(self.sigma_schedule.0 > 0.0 && self.sigma_schedule.1 > 0.0) {
            return Err(Error::invalid("sigma schedule endpoints must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// Learning rate and temperature for a layer: (0.15, 0.5) for mid layers
/// 10–25, (0.04, 0.005) elsewhere.
pub fn layer_preset(layer: usize) -> (f64, f64) {
    if (10..=25).contains(&layer) {
        (0.15, 0.5)
    } else {
        (0.04, 0.005)
    }
}

impl OptimizerConfig {
    /// The standard recipe for real models at a given layer: 600 steps,
    /// batch 8, momentum 0.9, clip 1.0, σ 2→16, lr/τ per [`layer_preset`].
    pub fn for_layer(layer: usize) -> Self {
        let (learning_rate, temperature) = layer_preset(layer);
        OptimizerConfig {
            learning_rate,
            momentum: 0.9,
            steps: 600,
            batch_size: 8,
            grad_clip_norm: 1.0,
            sigma_schedule: (2.0, 16.0),
            temperature,
        }
    }

    /// A short recipe sized for the toy backend.
    pub fn toy() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 300,
            batch_size: 4,
            grad_clip_norm: 1.0,
            sigma_schedule: (2.0, 16.0),
            temperature: 0.5,
        }
    }
}

/// Everything `synthesize` needs beyond the target itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationConfig,
    pub mode: AggregationMode,
    /// Prior centre override in grid coordinates; `None` = grid centre.
    pub prior_center: Option<(f64, f64)>,
    /// Record a composed snapshot every K steps.
    pub snapshot_every: Option<usize>,
}

impl SynthesisConfig {
    pub fn for_layer(layer: usize) -> Self {
        SynthesisConfig {
            optimizer: OptimizerConfig::for_layer(layer),
            augmentation: AugmentationConfig::default(),
            mode: AggregationMode::Attention,
            prior_center: None,
            snapshot_every: None,
        }
    }

    /// Recipe for the toy backend. Shift augmentation is disabled because
    /// the toy features are linear over fixed pixel blocks and have no
    /// translation or scale tolerance; pixel noise alone regularises (and
    /// breaks the zero gradient of the all-grey start).
    pub fn toy() -> Self {
        SynthesisConfig {
            optimizer: OptimizerConfig::toy(),
            augmentation: AugmentationConfig {
                max_shift: 0,
                noise_sigma: 0.1,
            },
            mode: AggregationMode::Attention,
            prior_center: None,
            snapshot_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.augmentation.validate()
    }

    fn aggregation_at(&self, sigma: f64) -> AggregationConfig {
        AggregationConfig {
            mode: self.mode,
            temperature: self.optimizer.temperature,
            prior_sigma: sigma,
            prior_center: self.prior_center,
        }
    }
}

/// σ at step `step` of `steps`, linear from start to end inclusive.
fn sigma_at(schedule: (f64, f64), step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return schedule.0;
    }
    let t = step as f64 / (steps - 1) as f64;
    schedule.0 + (schedule.1 - schedule.0) * t
}

/// Builds the full differentiable graph from stack components to the batch
/// mean loss. Returns the tape, one leaf per component, and the loss node.
fn build_loss_tape(
    stack: &MultiResStack,
    target: &ConceptVector,
    backend: &dyn Backend,
    baseline: &ImageBaseline,
    agg: &AggregationConfig,
    aug: &AugmentationConfig,
    seeds: &[u64],
) -> Result<(Tape, Vec<VarId>, VarId)> {
    agg.validate()?;
    aug.validate()?;
    if !backend.supports_gradients() {
        return Err(Error::GradientsUnsupported(backend.describe().name));
    }
    let desc = backend.describe();
    let r = stack.resolution;
    if r != desc.image_resolution {
        return Err(Error::shape(format!(
            "stack resolution {r} does not match backend resolution {}",
            desc.image_resolution
        )));
    }
    if target.direction.len() != desc.hidden_dim {
        return Err(Error::shape(format!(
            "concept direction has {} dims, backend hidden dim is {}",
            target.direction.len(),
            desc.hidden_dim
        )));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("at least one augmentation seed is required"));
    }

    let mut tape = Tape::new();
    let mut leaves = Vec::with_capacity(stack.components.len());
    let mut pert: Option<VarId> = None;
    for comp in &stack.components {
        let leaf = tape.leaf(comp.values.clone());
        leaves.push(leaf);
        let up = if comp.resolution == r {
            leaf
        } else {
            tape.upsample_bilinear(leaf, comp.resolution, r)
        };
        pert = Some(match pert {
            None => up,
            Some(acc) => tape.add(acc, up),
        });
    }
    let pert = pert.expect("stack has at least one component");
    let bounded = tape.tanh(pert);
    let image = tape.affine_scalar(bounded, 0.5, 0.5);

    let canvas = r + aug.max_shift;
    let mut sim_sum: Option<VarId> = None;
    for &seed in seeds {
        let draw = draw_augment(r, aug, seed);
        let up = tape.upsample_bilinear(image, r, canvas);
        let rolled = tape.roll2d(up, canvas, draw.dy, draw.dx);
        let cropped = tape.center_crop(rolled, canvas, r);
        let augmented = match draw.noise {
            Some(noise) => tape.add_vec_const(cropped, noise, 1.0),
            None => cropped,
        };

        let aug_image = PixelImage::from_data(r, tape.value(augmented).to_vec())?;
        let vjp = backend.patch_activations_vjp(&aug_image, target.layer)?;
        let (patches, pullback) = vjp.into_parts();
        let n = patches.patch_count();
        let h = patches.hidden_dim();
        let coords = patches.coords().to_vec();
        let grid = patches.grid();
        let patches_var = tape.opaque(augmented, patches.values().to_vec(), pullback);
        let sim = imrep::objective_tape(
            &mut tape,
            patches_var,
            n,
            h,
            &coords,
            grid,
            baseline,
            target,
            agg,
        );
        sim_sum = Some(match sim_sum {
            None => sim,
            Some(acc) => tape.add(acc, sim),
        });
    }
    let sim_sum = sim_sum.expect("at least one seed");
    let loss = tape.affine_scalar(sim_sum, -1.0 / seeds.len() as f64, 0.0);
    Ok((tape, leaves, loss))
}

/// Loss for a single augmentation draw.
pub fn loss(
    stack: &MultiResStack,
    target: &ConceptVector,
    backend: &dyn Backend,
    baseline: &ImageBaseline,
    agg: &AggregationConfig,
    aug: &AugmentationConfig,
    seed: u64,
) -> Result<f64> {
    let (tape, _, node) = build_loss_tape(stack, target, backend, baseline, agg, aug, &[seed])?;
    Ok(tape.scalar(node))
}

/// Mean loss over a batch of augmentation draws, with its gradient per stack
/// component.
pub fn batch_loss_and_gradient(
    stack: &MultiResStack,
    target: &ConceptVector,
    backend: &dyn Backend,
    baseline: &ImageBaseline,
    agg: &AggregationConfig,
    aug: &AugmentationConfig,
    seeds: &[u64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (tape, leaves, node) = build_loss_tape(stack, target, backend, baseline, agg, aug, seeds)?;
    let value = tape.scalar(node);
    let grads = tape.backward(node);
    Ok((
        value,
        leaves.iter().map(|&l| grads.wrt(l).to_vec()).collect(),
    ))
}

/// A periodic snapshot of the composed image during optimisation.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub image: PixelImage,
}

/// The full record of one synthesis.
#[derive(Debug, Clone)]
pub struct SynthesisRun {
    pub concept: String,
    pub layer: crate::backend::LayerIndex,
    pub config: SynthesisConfig,
    pub seed: u64,
    /// Batch-mean loss at each step, evaluated before the update.
    pub loss_trajectory: Vec<f64>,
    /// Composed (unaugmented) image after the final step; always in [0, 1].
    pub final_image: PixelImage,
    /// Cosine between the final image's aggregated representation and the
    /// target, at the end-of-schedule σ.
    pub final_objective: f64,
    pub snapshots: Vec<Snapshot>,
}

/// Optimises a fresh zero stack against `target` and returns the run record.
pub fn synthesize(
    target: &ConceptVector,
    backend: &dyn Backend,
    config: &SynthesisConfig,
    seed: u64,
) -> Result<SynthesisRun> {
    config.validate()?;
    let opt = &config.optimizer;
    let baseline = imrep::compute_image_baseline(backend, target.layer)?;
    let r = backend.describe().image_resolution;
    let mut stack = MultiResStack::zeros(r)?;
    let mut velocity: Vec<Vec<f64>> = stack
        .components
        .iter()
        .map(|c| vec![0.0; c.values.len()])
        .collect();
    let mut trajectory = Vec::with_capacity(opt.steps);
    let mut snapshots = Vec::new();

    for step in 0..opt.steps {
        let sigma = sigma_at(opt.sigma_schedule, step, opt.steps);
        let agg = config.aggregation_at(sigma);
        let aug_seeds: Vec<u64> = (0..opt.batch_size)
            .map(|b| {
                seeds::derive(
                    seed,
                    &["step", &step.to_string(), "batch", &b.to_string()],
                )
            })
            .collect();
        let (value, mut grads) = batch_loss_and_gradient(
            &stack,
            target,
            backend,
            &baseline,
            &agg,
            &config.augmentation,
            &aug_seeds,
        )?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                concept: target.concept.clone(),
                layer: target.layer.value(),
            });
        }
        trajectory.push(value);

        let norm: f64 = grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > opt.grad_clip_norm {
            let scale = opt.grad_clip_norm / norm;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
        for ((comp, vel), g) in stack
            .components_mut()
            .iter_mut()
            .zip(&mut velocity)
            .zip(&grads)
        {
            for ((p, v), gi) in comp.values.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = opt.momentum * *v + gi;
                *p -= opt.learning_rate * *v;
            }
        }

        if let Some(every) = config.snapshot_every {
            if every > 0 && (step + 1) % every == 0 && step + 1 < opt.steps {
                snapshots.push(Snapshot {
                    step: step + 1,
                    image: compose(&stack),
                });
            }
        }
    }

    let final_image = compose(&stack);
    let final_agg = config.aggregation_at(opt.sigma_schedule.1);
    let patches = backend.image_patch_activations(&final_image, target.layer)?;
    let final_objective = imrep::objective(&patches, &baseline, target, &final_agg)?;

    Ok(SynthesisRun {
        concept: target.concept.clone(),
        layer: target.layer,
        config: config.clone(),
        seed,
        loss_trajectory: trajectory,
        final_image,
        final_objective,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::{ToyBackend, ToyConfig};
    use crate::backend::LayerIndex;
    use crate::concepts::{compute_language_baseline, concept_direction};

    fn toy_direction(backend: &ToyBackend, word: &str, layer: usize) -> ConceptVector {
        let words = crate::concepts::bundled_baseline_words();
        let baseline = compute_language_baseline(backend, &words, LayerIndex(layer)).unwrap();
        concept_direction(backend, word, LayerIndex(layer), &baseline).unwrap()
    }

    #[test]
    fn resolution_sets_match_the_progression_rule() {
        assert_eq!(resolution_set(8).unwrap(), vec![8]);
        assert_eq!(resolution_set(28).unwrap(), vec![28, 8]);
        assert_eq!(resolution_set(64).unwrap(), vec![64, 44, 24]);
        let full = resolution_set(448).unwrap();
        assert_eq!(full.len(), 23);
        assert_eq!(full.first(), Some(&448));
        assert_eq!(full.last(), Some(&8));
        assert!(full.windows(2).all(|w| w[0] - w[1] == RESOLUTION_STEP));
        assert!(resolution_set(7).is_err());
    }

    #[test]
    fn zero_stack_composes_to_grey() {
        let stack = MultiResStack::zeros(64).unwrap();
        let img = compose(&stack);
        assert!(img.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn composition_stays_in_unit_range_for_huge_values() {
        let mut stack = MultiResStack::zeros(28).unwrap();
        for comp in stack.components_mut() {
            for (i, v) in comp.values.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 1e6 } else { -1e6 };
            }
        }
        let img = compose(&stack);
        assert!(img.in_unit_range());
    }

    #[test]
    fn perturbation_is_linear_in_the_stack() {
        let a = MultiResStack::random(64, 0.3, 1).unwrap();
        let b = MultiResStack::random(64, 0.3, 2).unwrap();
        let mut sum = a.clone();
        for (sc, bc) in sum.components_mut().iter_mut().zip(b.components()) {
            for (v, w) in sc.values.iter_mut().zip(&bc.values) {
                *v += w;
            }
        }
        let pa = perturbation(&a);
        let pb = perturbation(&b);
        let ps = perturbation(&sum);
        for ((x, y), s) in pa.iter().zip(&pb).zip(&ps) {
            assert!((x + y - s).abs() < 1e-6);
        }
    }

    #[test]
    fn hot_entry_upscaling_matches_reference_interpolator() {
        // Textbook bilinear interpolation, written independently of the
        // shared resampler: align pixel centres, clamp at borders.
        fn reference_upscale(src: &[f64], s: usize, d: usize) -> Vec<f64> {
            let mut out = vec![0.0; d * d * CHANNELS];
            for oy in 0..d {
                for ox in 0..d {
                    let fy = (((oy as f64 + 0.5) * s as f64 / d as f64) - 0.5)
                        .clamp(0.0, s as f64 - 1.0);
                    let fx = (((ox as f64 + 0.5) * s as f64 / d as f64) - 0.5)
                        .clamp(0.0, s as f64 - 1.0);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
                    let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
                    for c in 0..CHANNELS {
                        let v00 = src[(y0 * s + x0) * CHANNELS + c];
                        let v01 = src[(y0 * s + x1) * CHANNELS + c];
                        let v10 = src[(y1 * s + x0) * CHANNELS + c];
                        let v11 = src[(y1 * s + x1) * CHANNELS + c];
                        out[(oy * d + ox) * CHANNELS + c] = v00 * (1.0 - wy) * (1.0 - wx)
                            + v01 * (1.0 - wy) * wx
                            + v10 * wy * (1.0 - wx)
                            + v11 * wy * wx;
                    }
                }
            }
            out
        }

        let mut stack = MultiResStack::zeros(28).unwrap();
        // One hot entry in the 8x8 component.
        let small = &mut stack.components_mut()[1];
        assert_eq!(small.resolution, 8);
        small.values[(3 * 8 + 4) * CHANNELS + 1] = 5.0;
        let pert = perturbation(&stack);
        let reference = reference_upscale(&stack.components()[1].values, 8, 28);
        for (p, r) in pert.iter().zip(&reference) {
            assert!((p - r).abs() < 1e-9);
        }
        // The bump is smooth and mass-preserving up to interpolation.
        let total: f64 = pert.iter().sum();
        let scale = (28.0 / 8.0) * (28.0 / 8.0);
        assert!((total - 5.0 * scale).abs() / (5.0 * scale) < 0.05);
    }

    #[test]
    fn augment_without_shift_or_noise_is_identity() {
        let img = {
            let mut rng = seeds::rng(5, &["aug-id"]);
            let data = (0..16 * 16 * CHANNELS)
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            PixelImage::from_data(16, data).unwrap()
        };
        let out = augment(
            &img,
            &AugmentationConfig {
                max_shift: 0,
                noise_sigma: 0.0,
            },
            9,
        )
        .unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn augment_is_reproducible_and_seed_sensitive() {
        let img = PixelImage::grey(32);
        let config = AugmentationConfig {
            max_shift: 6,
            noise_sigma: 0.1,
        };
        let a = augment(&img, &config, 4).unwrap();
        let b = augment(&img, &config, 4).unwrap();
        assert_eq!(a.data(), b.data());
        let c = augment(&img, &config, 5).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn augment_noise_has_configured_std() {
        // With zero shift the difference to the input is exactly the noise.
        let img = PixelImage::grey(448);
        let config = AugmentationConfig {
            max_shift: 0,
            noise_sigma: 0.1,
        };
        let mut diffs = Vec::new();
        for seed in 0..2 {
            let out = augment(&img, &config, seed).unwrap();
            diffs.extend(
                out.data()
                    .iter()
                    .zip(img.data())
                    .map(|(a, b)| a - b),
            );
        }
        assert!(diffs.len() > 1_000_000);
        let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var: f64 =
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.1).abs() < 0.005, "std {std}");
    }

    #[test]
    fn plain_augment_matches_tape_augmentation_exactly() {
        // The public augment op and the tape's augmentation branch must
        // agree bitwise, since gradients flow through the latter while the
        // former defines the documented behaviour.
        let stack = MultiResStack::random(8, 0.4, 21).unwrap();
        let composed = compose(&stack);
        let aug = AugmentationConfig {
            max_shift: 3,
            noise_sigma: 0.05,
        };
        let expected = augment(&composed, &aug, 77).unwrap();

        let r = composed.resolution();
        let canvas = r + aug.max_shift;
        let draw = draw_augment(r, &aug, 77);
        let mut tape = Tape::new();
        let leaf = tape.leaf(composed.data().to_vec());
        let up = tape.upsample_bilinear(leaf, r, canvas);
        let rolled = tape.roll2d(up, canvas, draw.dy, draw.dx);
        let cropped = tape.center_crop(rolled, canvas, r);
        let node = match draw.noise {
            Some(noise) => tape.add_vec_const(cropped, noise, 1.0),
            None => cropped,
        };
        assert_eq!(tape.value(node), expected.data());
    }

    #[test]
    fn loss_is_near_minus_one_for_a_presolved_stack() {
        let backend = ToyBackend::new();
        let layer = 1;
        let target = toy_direction(&backend, "apple", layer);
        let baseline = imrep::compute_image_baseline(&backend, LayerIndex(layer)).unwrap();
        // Solve the stack so that compose() reproduces the prototype image:
        // top component = atanh(2 * (prototype - 0.5)), others zero.
        let prototype = backend.prototype_image(0).unwrap();
        let mut stack = MultiResStack::zeros(64).unwrap();
        let top = &mut stack.components_mut()[0];
        for (t, p) in top.values.iter_mut().zip(prototype.data()) {
            *t = (2.0 * (p - 0.5)).atanh();
        }
        let value = loss(
            &stack,
            &target,
            &backend,
            &baseline,
            &AggregationConfig::attention(0.5, 16.0),
            &AugmentationConfig {
                max_shift: 0,
                noise_sigma: 0.0,
            },
            3,
        )
        .unwrap();
        assert!((value + 1.0).abs() < 0.05, "loss {value}");
    }

    #[test]
    fn loss_is_near_zero_for_unreachable_target() {
        let backend = ToyBackend::new();
        let target = ConceptVector {
            concept: "unreachable".into(),
            layer: LayerIndex(0),
            direction: backend.unreachable_direction(0).unwrap(),
        };
        let baseline = imrep::compute_image_baseline(&backend, LayerIndex(0)).unwrap();
        let stack = MultiResStack::random(64, 0.3, 8).unwrap();
        let value = loss(
            &stack,
            &target,
            &backend,
            &baseline,
            &AggregationConfig::attention(0.5, 4.0),
            &AugmentationConfig::default(),
            11,
        )
        .unwrap();
        assert!(value.abs() < 0.05, "loss {value}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences_in_both_modes() {
        let backend = ToyBackend::with_config(ToyConfig::tiny()).unwrap();
        let layer = 2;
        let target = toy_direction(&backend, "orange", layer);
        let baseline = imrep::compute_image_baseline(&backend, LayerIndex(layer)).unwrap();
        let stack = MultiResStack::random(8, 0.3, 31).unwrap();
        let aug = AugmentationConfig {
            max_shift: 2,
            noise_sigma: 0.05,
        };
        for mode in [AggregationMode::Attention, AggregationMode::Mean] {
            let agg = AggregationConfig {
                mode,
                temperature: 0.5,
                prior_sigma: 1.5,
                prior_center: None,
            };
            let (value, grads) = batch_loss_and_gradient(
                &stack, &target, &backend, &baseline, &agg, &aug, &[13],
            )
            .unwrap();
            assert!(value.is_finite());
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for &i in &[0usize, 50, 101, 150] {
                let mut probe = stack.clone();
                probe.components_mut()[0].values[i] += h;
                let up = loss(&probe, &target, &backend, &baseline, &agg, &aug, 13).unwrap();
                probe.components_mut()[0].values[i] -= 2.0 * h;
                let down = loss(&probe, &target, &backend, &baseline, &agg, &aug, 13).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let rel = (grads[0][i] - numeric).abs() / numeric.abs().max(1e-6);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-3, "{mode}: max rel err {max_rel}");
        }
    }

    #[test]
    fn gradient_free_backends_are_rejected() {
        struct NoGrad(ToyBackend);
        impl Backend for NoGrad {
            fn describe(&self) -> crate::backend::BackendDescriptor {
                self.0.describe()
            }
            fn text_activations(
                &self,
                text: &str,
                layer: LayerIndex,
            ) -> Result<crate::backend::Activation> {
                self.0.text_activations(text, layer)
            }
            fn image_patch_activations(
                &self,
                image: &PixelImage,
                layer: LayerIndex,
            ) -> Result<crate::backend::PatchActivations> {
                self.0.image_patch_activations(image, layer)
            }
        }
        let toy = ToyBackend::new();
        let target = toy_direction(&toy, "apple", 0);
        let baseline = imrep::compute_image_baseline(&toy, LayerIndex(0)).unwrap();
        let backend = NoGrad(toy);
        let stack = MultiResStack::zeros(64).unwrap();
        let err = loss(
            &stack,
            &target,
            &backend,
            &baseline,
            &AggregationConfig::mean(),
            &AugmentationConfig::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradientsUnsupported(_)));
    }

    #[test]
    fn synthesize_rejects_zero_steps() {
        let backend = ToyBackend::new();
        let target = toy_direction(&backend, "apple", 1);
        let mut config = SynthesisConfig::toy();
        config.optimizer.steps = 0;
        assert!(synthesize(&target, &backend, &config, 1).is_err());
    }

    #[test]
    fn synthesize_is_bitwise_reproducible() {
        let backend = ToyBackend::new();
        let target = toy_direction(&backend, "bee", 1);
        let mut config = SynthesisConfig::toy();
        config.optimizer.steps = 10;
        config.optimizer.batch_size = 2;
        let a = synthesize(&target, &backend, &config, 99).unwrap();
        let b = synthesize(&target, &backend, &config, 99).unwrap();
        assert_eq!(a.loss_trajectory, b.loss_trajectory);
        assert_eq!(a.final_image.data(), b.final_image.data());
        let c = synthesize(&target, &backend, &config, 100).unwrap();
        assert_ne!(a.loss_trajectory, c.loss_trajectory);
    }

    #[test]
    fn synthesize_records_trajectory_and_snapshots() {
        let backend = ToyBackend::new();
        let target = toy_direction(&backend, "frog", 2);
        let mut config = SynthesisConfig::toy();
        config.optimizer.steps = 12;
        config.optimizer.batch_size = 2;
        config.snapshot_every = Some(5);
        let run = synthesize(&target, &backend, &config, 7).unwrap();
        assert_eq!(run.loss_trajectory.len(), 12);
        assert_eq!(
            run.snapshots.iter().map(|s| s.step).collect::<Vec<_>>(),
            vec![5, 10]
        );
        assert!(run.final_image.in_unit_range());
    }

    #[test]
    fn loss_decreases_over_training() {
        let backend = ToyBackend::new();
        let target = toy_direction(&backend, "lion", 1);
        let mut config = SynthesisConfig::toy();
        config.optimizer.steps = 80;
        config.optimizer.batch_size = 2;
        let mut improved = 0;
        let total = 10;
        for seed in 0..total {
            let run = synthesize(&target, &backend, &config, seed).unwrap();
            let k = run.loss_trajectory.len() / 10;
            let first: f64 =
                run.loss_trajectory[..k].iter().sum::<f64>() / k as f64;
            let last: f64 =
                run.loss_trajectory[run.loss_trajectory.len() - k..].iter().sum::<f64>()
                    / k as f64;
            if last < first {
                improved += 1;
            }
        }
        assert!(improved >= total * 95 / 100, "only {improved}/{total} improved");
    }

    #[test]
    fn batch_size_does_not_bias_the_loss() {
        let backend = ToyBackend::new();
        let target = toy_direction(&backend, "parrot", 1);
        let baseline = imrep::compute_image_baseline(&backend, LayerIndex(1)).unwrap();
        let stack = MultiResStack::random(64, 0.2, 17).unwrap();
        let agg = AggregationConfig::attention(0.5, 4.0);
        let aug = AugmentationConfig {
            max_shift: 8,
            noise_sigma: 0.0,
        };
        let single: Vec<f64> = (0..50)
            .map(|i| {
                loss(&stack, &target, &backend, &baseline, &agg, &aug, 1000 + i).unwrap()
            })
            .collect();
        let batched: Vec<f64> = (0..50)
            .map(|i| {
                let seeds: Vec<u64> = (0..8).map(|b| 10_000 + i * 8 + b).collect();
                let (v, _) = batch_loss_and_gradient(
                    &stack, &target, &backend, &baseline, &agg, &aug, &seeds,
                )
                .unwrap();
                v
            })
            .collect();
        let m1 = crate::stats::mean(&single);
        let m8 = crate::stats::mean(&batched);
        let se = (crate::stats::standard_error(&single).powi(2)
            + crate::stats::standard_error(&batched).powi(2))
        .sqrt();
        assert!(
            (m1 - m8).abs() <= 3.0 * se,
            "batch-1 mean {m1}, batch-8 mean {m8}, se {se}"
        );
    }
}
