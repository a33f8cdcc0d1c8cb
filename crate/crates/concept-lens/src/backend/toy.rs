//! A small deterministic backend with planted concepts.
//!
//! The toy backend exists so the full pipeline (direction extraction,
//! aggregation, synthesis, probing, judging) can be exercised end to end in
//! seconds with known ground truth. It is not a trained model; it is a
//! fixed random construction with the properties the pipeline relies on:
//!
//! - Patch pixels map linearly into a `rank`-dimensional subspace of the
//!   hidden space, then pass through smooth orthogonal tanh blocks per layer,
//!   so pixel gradients exist everywhere and activations stay bounded.
//! - Each planted word has a hidden-space target reachable from pixels, and
//!   its text activation carries the image-side axis for that target. A
//!   synthesized image that maximises alignment with the word's direction
//!   therefore reconstructs something patch-equivalent to the word's
//!   prototype texture.
//! - Text activations share a large common component, so cosine similarities
//!   between raw text activations are dominated by it; centering against a
//!   language baseline is required to see the planted structure, mirroring
//!   how real models behave.
//!
//! Everything is derived from one seed; two backends built with the same
//! config are identical.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Activation, Backend, BackendDescriptor, LayerIndex, PatchActivations, PatchVjp};
use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::image::{PixelImage, CHANNELS};
use crate::seeds;

/// Words with planted visual ground truth. None of them appears in the
/// bundled language-baseline word list.
pub const PLANTED_WORDS: [&str; 10] = [
    "apple", "orange", "octopus", "frog", "squirrel", "giraffe", "bee", "lion", "elephant",
    "parrot",
];

/// Norm of a planted patch-embedding target.
const TARGET_NORM: f64 = 0.8;
/// Norm of the common component shared by all text activations.
const COMMON_NORM: f64 = 3.0;
/// Coefficient of the planted axis inside a planted word's text activation.
const TEXT_STRENGTH: f64 = 1.0;
/// Norm of the per-token hash noise added to every text activation.
const TOKEN_NOISE: f64 = 0.02;
/// Standard deviation of block biases.
const BIAS_STD: f64 = 0.03;

/// Construction parameters for [`ToyBackend`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub resolution: usize,
    /// Side length of a square patch in pixels; must divide `resolution`.
    pub patch: usize,
    pub seed: u64,
    pub planted: Vec<String>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            hidden_dim: 16,
            layer_count: 4,
            resolution: 64,
            patch: 8,
            seed: 0x746f79,
            planted: PLANTED_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl ToyConfig {
    /// An 8x8-pixel variant with a 2x2 patch grid, small enough for
    /// finite-difference checks over every pixel.
    pub fn tiny() -> Self {
        ToyConfig {
            resolution: 8,
            patch: 4,
            ..ToyConfig::default()
        }
    }

    /// The standard construction at a custom resolution: an 8x8 patch grid
    /// when the resolution allows it, the tiny 2x2 grid at resolution 8.
    pub fn at_resolution(resolution: usize) -> Result<Self> {
        if resolution == 8 {
            return Ok(ToyConfig::tiny());
        }
        if resolution % 8 != 0 || resolution < 16 {
            return Err(Error::invalid(format!(
                "toy backend resolution must be 8 or a multiple of 8 at least 16, got {resolution}"
            )));
        }
        Ok(ToyConfig {
            resolution,
            patch: resolution / 8,
            ..ToyConfig::default()
        })
    }
}

/// One tanh block: x -> tanh(W x + b).
struct Block {
    w: Arc<Vec<f64>>,
    b: Arc<Vec<f64>>,
}

pub struct ToyBackend {
    config: ToyConfig,
    /// Dimension of the pixel-reachable subspace.
    rank: usize,
    /// Hidden x hidden orthogonal basis, row-major; planted targets sit on
    /// its first `rank` columns, the rest are unreachable from pixels.
    q: Vec<f64>,
    /// Patch embedding matrix, hidden x (3 * patch^2), row-major.
    p: Arc<Vec<f64>>,
    /// Two blocks per layer transition; `blocks[l]` maps layer l to l+1.
    blocks: Vec<[Block; 2]>,
    /// Forward image of the zero embedding at each layer.
    zero_trace: Vec<Vec<f64>>,
    /// Normalised planted axis per layer per word: `axes[layer][word]`.
    axes: Vec<Vec<Vec<f64>>>,
    /// Common text component per layer.
    common: Vec<Vec<f64>>,
    /// Pixel offsets (length 3 * patch^2) whose embedding hits each planted
    /// target exactly.
    prototypes: Vec<Vec<f64>>,
}

impl ToyBackend {
    /// The frozen default: hidden 16, 4 layers, 64x64 input, 8x8 patch grid.
    pub fn new() -> Self {
        Self::with_config(ToyConfig::default()).expect("default config is valid")
    }

    pub fn with_config(config: ToyConfig) -> Result<Self> {
        let h = config.hidden_dim;
        let rank = h * 3 / 4;
        let d = CHANNELS * config.patch * config.patch;
        if h < 8 {
            return Err(Error::invalid("toy hidden_dim must be at least 8"));
        }
        if config.layer_count < 1 {
            return Err(Error::invalid("toy layer_count must be at least 1"));
        }
        if config.resolution % config.patch != 0 {
            return Err(Error::invalid(format!(
                "toy patch size {} must divide resolution {}",
                config.patch, config.resolution
            )));
        }
        if d < rank {
            return Err(Error::invalid(format!(
                "toy patch has {d} channel values, fewer than the {rank}-dimensional embedding subspace"
            )));
        }
        if config.planted.len() > rank {
            return Err(Error::invalid(format!(
                "{} planted words exceed the {rank}-dimensional embedding subspace",
                config.planted.len()
            )));
        }

        let q = random_orthogonal(h, &mut seeds::rng(config.seed, &["toy", "basis"]));

        // G spans the pixel-reachable subspace in rank coordinates.
        let mut g_rng = seeds::rng(config.seed, &["toy", "embed"]);
        let g: Vec<f64> = (0..rank * d)
            .map(|_| g_rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt())
            .collect();
        // P = Q_r G maps pixel offsets into the hidden space.
        let mut p = vec![0.0; h * d];
        for i in 0..h {
            for r in 0..rank {
                let qir = q[i * h + r];
                if qir == 0.0 {
                    continue;
                }
                for j in 0..d {
                    p[i * d + j] += qir * g[r * d + j];
                }
            }
        }

        let blocks: Vec<[Block; 2]> = (0..config.layer_count.saturating_sub(1))
            .map(|l| {
                let make = |half: &str| {
                    let tag = format!("block-{l}-{half}");
                    let mut rng = seeds::rng(config.seed, &["toy", &tag]);
                    let w = random_orthogonal(h, &mut rng);
                    let b: Vec<f64> = (0..h)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) * BIAS_STD)
                        .collect();
                    Block {
                        w: Arc::new(w),
                        b: Arc::new(b),
                    }
                };
                [make("first"), make("second")]
            })
            .collect();

        // Planted targets are scaled columns of Q; solve G G^T y = u for the
        // least-norm pixel preimage of each.
        let ggt = {
            let mut m = vec![0.0; rank * rank];
            for r1 in 0..rank {
                for r2 in 0..rank {
                    m[r1 * rank + r2] = (0..d).map(|j| g[r1 * d + j] * g[r2 * d + j]).sum();
                }
            }
            m
        };
        let mut prototypes = Vec::with_capacity(config.planted.len());
        for k in 0..config.planted.len() {
            let mut u = vec![0.0; rank];
            u[k] = TARGET_NORM;
            let y = solve_linear(&ggt, &u, rank)?;
            let v: Vec<f64> = (0..d)
                .map(|j| (0..rank).map(|r| g[r * d + j] * y[r]).sum())
                .collect();
            let max_offset = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if max_offset > 0.5 {
                return Err(Error::invalid(format!(
                    "planted prototype {k} needs pixel offsets up to {max_offset:.3}, outside [0,1]"
                )));
            }
            prototypes.push(v);
        }

        let mut backend = ToyBackend {
            config,
            rank,
            q,
            p: Arc::new(p),
            blocks,
            zero_trace: Vec::new(),
            axes: Vec::new(),
            common: Vec::new(),
            prototypes,
        };

        backend.zero_trace = (0..backend.config.layer_count)
            .map(|l| backend.apply_blocks(vec![0.0; h], LayerIndex(l)))
            .collect();

        backend.axes = (0..backend.config.layer_count)
            .map(|l| {
                (0..backend.config.planted.len())
                    .map(|k| {
                        let mut target = vec![0.0; h];
                        for i in 0..h {
                            target[i] = TARGET_NORM * backend.q[i * h + k];
                        }
                        let fwd = backend.apply_blocks(target, LayerIndex(l));
                        let mut axis: Vec<f64> = fwd
                            .iter()
                            .zip(&backend.zero_trace[l])
                            .map(|(a, z)| a - z)
                            .collect();
                        let n = crate::stats::norm(&axis);
                        for a in &mut axis {
                            *a /= n;
                        }
                        axis
                    })
                    .collect()
            })
            .collect();

        backend.common = (0..backend.config.layer_count)
            .map(|l| {
                let tag = format!("common-{l}");
                let mut rng = seeds::rng(backend.config.seed, &["toy", &tag]);
                let mut v: Vec<f64> = (0..h).map(|_| rng.sample(StandardNormal)).collect();
                let n = crate::stats::norm(&v);
                for x in &mut v {
                    *x *= COMMON_NORM / n;
                }
                v
            })
            .collect();

        Ok(backend)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn planted_words(&self) -> &[String] {
        &self.config.planted
    }

    /// The normalised hidden-space axis that images of planted word `k`
    /// produce at `layer` after centering.
    pub fn planted_axis(&self, k: usize, layer: LayerIndex) -> Result<&[f64]> {
        self.describe().check_layer(layer)?;
        self.axes[layer.0]
            .get(k)
            .map(|a| a.as_slice())
            .ok_or_else(|| Error::invalid(format!("no planted word {k}")))
    }

    /// A direction at layer 0 that no image can produce; useful for
    /// demonstrating that optimisation against an unreachable target fails.
    pub fn unreachable_direction(&self, j: usize) -> Result<Vec<f64>> {
        let h = self.config.hidden_dim;
        let col = self.rank + j;
        if col >= h {
            return Err(Error::invalid(format!(
                "only {} unreachable directions exist",
                h - self.rank
            )));
        }
        Ok((0..h).map(|i| self.q[i * h + col]).collect())
    }

    /// The exact pixel texture whose patches embed onto planted target `k`.
    pub fn prototype_image(&self, k: usize) -> Result<PixelImage> {
        let v = self
            .prototypes
            .get(k)
            .ok_or_else(|| Error::invalid(format!("no planted word {k}")))?;
        let r = self.config.resolution;
        let patch = self.config.patch;
        let mut img = PixelImage::grey(r);
        for y in 0..r {
            for x in 0..r {
                let within = ((y % patch) * patch + (x % patch)) * CHANNELS;
                let rgb = [
                    0.5 + v[within],
                    0.5 + v[within + 1],
                    0.5 + v[within + 2],
                ];
                img.set_pixel(x, y, rgb);
            }
        }
        Ok(img)
    }

    /// A noisy sample of planted word `k`: the prototype texture plus
    /// clamped Gaussian pixel noise.
    pub fn planted_image(&self, k: usize, noise: f64, seed: u64) -> Result<PixelImage> {
        let mut img = self.prototype_image(k)?;
        let mut rng = seeds::rng(seed, &["toy", "planted-image", &k.to_string()]);
        for v in img.data_mut() {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
        img.clamp_unit();
        Ok(img)
    }

    /// Nearest planted word to an image: the (word, cosine) pair maximising
    /// alignment between the image's centred mean patch activation and a
    /// planted axis, over all layers.
    pub fn classify(&self, image: &PixelImage) -> Result<(String, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for l in 0..self.config.layer_count {
            let layer = LayerIndex(l);
            let patches = self.image_patch_activations_unclamped(image, layer)?;
            let h = self.config.hidden_dim;
            let n = patches.patch_count();
            let mut mean = vec![0.0; h];
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(patches.patch(i)) {
                    *m += v;
                }
            }
            for (m, z) in mean.iter_mut().zip(&self.zero_trace[l]) {
                *m = *m / n as f64 - z;
            }
            for (k, axis) in self.axes[l].iter().enumerate() {
                let c = crate::stats::cosine(&mean, axis);
                if best.map_or(true, |(_, b)| c > b) {
                    best = Some((k, c));
                }
            }
        }
        let (k, score) = best.expect("at least one layer and planted word");
        Ok((self.config.planted[k].clone(), score))
    }

    fn tokenize(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|t| {
                t.chars()
                    .filter(|c| c.is_alphanumeric() || *c == '-')
                    .collect::<String>()
                    .to_lowercase()
            })
            .filter(|t| !t.is_empty())
            .collect()
    }

    fn token_vector(&self, token: &str, layer: LayerIndex) -> Vec<f64> {
        let h = self.config.hidden_dim;
        let l = layer.0;
        let mut v = self.common[l].clone();
        if let Some(k) = self.config.planted.iter().position(|w| w == token) {
            for (x, a) in v.iter_mut().zip(&self.axes[l][k]) {
                *x += TEXT_STRENGTH * a;
            }
        }
        let tag = format!("token-{l}-{token}");
        let mut rng = seeds::rng(self.config.seed, &["toy", &tag]);
        let noise: Vec<f64> = (0..h).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::stats::norm(&noise);
        for (x, e) in v.iter_mut().zip(&noise) {
            *x += TOKEN_NOISE * *e / n;
        }
        v
    }

    /// Applies the blocks that take layer 0 to `layer`.
    fn apply_blocks(&self, mut x: Vec<f64>, layer: LayerIndex) -> Vec<f64> {
        let h = self.config.hidden_dim;
        for l in 0..layer.0 {
            for block in &self.blocks[l] {
                let mut y = vec![0.0; h];
                for i in 0..h {
                    let mut acc = block.b[i];
                    for j in 0..h {
                        acc += block.w[i * h + j] * x[j];
                    }
                    y[i] = acc.tanh();
                }
                x = y;
            }
        }
        x
    }

    /// Builds the differentiable pixels-to-patch-activations graph.
    /// Returns the tape, the pixel leaf, the activation matrix node, and the
    /// patch count.
    fn build_patch_tape(&self, pixels: &[f64], layer: LayerIndex) -> (Tape, VarId, VarId, usize) {
        let r = self.config.resolution;
        let patch = self.config.patch;
        let grid = r / patch;
        let n = grid * grid;
        let d = CHANNELS * patch * patch;
        let h = self.config.hidden_dim;

        let mut idx = Vec::with_capacity(n * d);
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        let base = (y * r + x) * CHANNELS;
                        idx.extend([base, base + 1, base + 2]);
                    }
                }
            }
        }

        let mut tape = Tape::new();
        let leaf = tape.leaf(pixels.to_vec());
        let gathered = tape.gather(leaf, Arc::new(idx));
        let centred = tape.affine_scalar(gathered, 1.0, -0.5);
        let mut acts = tape.rows_matvec_const(centred, n, d, h, Arc::clone(&self.p));
        for l in 0..layer.0 {
            for block in &self.blocks[l] {
                let lin = tape.rows_matvec_const(acts, n, h, h, Arc::clone(&block.w));
                let biased = tape.add_row_const(lin, n, h, Arc::clone(&block.b), 1.0);
                acts = tape.tanh(biased);
            }
        }
        (tape, leaf, acts, n)
    }

    fn check_image_shape(&self, image: &PixelImage) -> Result<()> {
        if image.resolution() != self.config.resolution {
            return Err(Error::shape(format!(
                "image resolution {} does not match toy backend resolution {}",
                image.resolution(),
                self.config.resolution
            )));
        }
        Ok(())
    }

    fn image_patch_activations_unclamped(
        &self,
        image: &PixelImage,
        layer: LayerIndex,
    ) -> Result<PatchActivations> {
        self.describe().check_layer(layer)?;
        self.check_image_shape(image)?;
        let (tape, _, acts, _) = self.build_patch_tape(image.data(), layer);
        let grid = self.config.resolution / self.config.patch;
        PatchActivations::new(
            layer,
            tape.value(acts).to_vec(),
            self.config.hidden_dim,
            (grid, grid),
        )
    }
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl Backend for ToyBackend {
    fn describe(&self) -> BackendDescriptor {
        let grid = self.config.resolution / self.config.patch;
        BackendDescriptor {
            name: "toy".to_string(),
            hidden_dim: self.config.hidden_dim,
            layer_count: self.config.layer_count,
            image_resolution: self.config.resolution,
            patch_grid: (grid, grid),
        }
    }

    fn text_activations(&self, text: &str, layer: LayerIndex) -> Result<Activation> {
        self.describe().check_layer(layer)?;
        let tokens = Self::tokenize(text);
        if tokens.is_empty() {
            return Err(Error::invalid(format!(
                "text {text:?} tokenises to zero tokens"
            )));
        }
        let h = self.config.hidden_dim;
        let mut mean = vec![0.0; h];
        for token in &tokens {
            let v = self.token_vector(token, layer);
            for (m, x) in mean.iter_mut().zip(&v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= tokens.len() as f64;
        }
        Ok(Activation {
            layer,
            values: mean,
        })
    }

    fn image_patch_activations(
        &self,
        image: &PixelImage,
        layer: LayerIndex,
    ) -> Result<PatchActivations> {
        if !image.in_unit_range() {
            return Err(Error::invalid(
                "image channels must lie in [0, 1]; clamp or rescale first".to_string(),
            ));
        }
        self.image_patch_activations_unclamped(image, layer)
    }

    fn supports_gradients(&self) -> bool {
        true
    }

    fn patch_activations_vjp(&self, image: &PixelImage, layer: LayerIndex) -> Result<PatchVjp> {
        self.describe().check_layer(layer)?;
        self.check_image_shape(image)?;
        let (tape, leaf, acts, _) = self.build_patch_tape(image.data(), layer);
        let grid = self.config.resolution / self.config.patch;
        let patches = PatchActivations::new(
            layer,
            tape.value(acts).to_vec(),
            self.config.hidden_dim,
            (grid, grid),
        )?;
        let pullback = Box::new(move |cotangent: &[f64]| {
            tape.backward_seeded(acts, cotangent).wrt(leaf).to_vec()
        });
        Ok(PatchVjp::new(patches, pullback))
    }
}

/// Random orthogonal n x n matrix: Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..n {
        for i in 0..j {
            let proj: f64 = crate::stats::dot(&cols[j], &cols[i]);
            let prev = cols[i].clone();
            for (x, p) in cols[j].iter_mut().zip(&prev) {
                *x -= proj * p;
            }
        }
        let norm = crate::stats::norm(&cols[j]);
        assert!(norm > 1e-9, "Gaussian matrix was numerically singular");
        for x in &mut cols[j] {
            *x /= norm;
        }
    }
    let mut m = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            m[i * n + j] = col[i];
        }
    }
    m
}

/// Solves `a x = b` for a dense n x n system by Gaussian elimination with
/// partial pivoting.
fn solve_linear(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                m[i * n + col]
                    .abs()
                    .partial_cmp(&m[j * n + col].abs())
                    .expect("finite entries")
            })
            .expect("non-empty range");
        if m[pivot * n + col].abs() < 1e-12 {
            return Err(Error::invalid(
                "toy embedding construction produced a singular system".to_string(),
            ));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            x.swap(col, pivot);
        }
        let diag = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[row * n + j] -= factor * m[col * n + j];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for j in col + 1..n {
            acc -= m[col * n + j] * x[j];
        }
        x[col] = acc / m[col * n + col];
    }
    Ok(x)
}
