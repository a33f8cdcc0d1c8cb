//! Model access.
//!
//! Everything the pipeline needs from a vision-language model is behind
//! [`Backend`]: text activations at a layer, per-patch image activations at a
//! layer, and (for synthesis) a vector-Jacobian pullback from patch
//! activations to input pixels. The crate bundles one implementation, the
//! deterministic [`toy::ToyBackend`]; adapters for real models implement the
//! trait and register a constructor in a [`BackendRegistry`].

pub mod toy;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PixelImage;

/// Zero-based index of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerIndex(pub usize);

impl LayerIndex {
    pub fn value(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for LayerIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Static facts about a backend that the pipeline sizes itself around.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    /// Width of activation vectors at every layer.
    pub hidden_dim: usize,
    /// Number of layers exposed; valid indices are `0..layer_count`.
    pub layer_count: usize,
    /// Side length of the square input image in pixels.
    pub image_resolution: usize,
    /// Patch grid as (rows, cols).
    pub patch_grid: (usize, usize),
}

impl BackendDescriptor {
    pub fn patch_count(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    pub(crate) fn check_layer(&self, layer: LayerIndex) -> Result<()> {
        if layer.0 >= self.layer_count {
            return Err(Error::LayerOutOfRange {
                backend: self.name.clone(),
                layer: layer.0,
                layer_count: self.layer_count,
            });
        }
        Ok(())
    }
}

/// A hidden-state vector at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub layer: LayerIndex,
    pub values: Vec<f64>,
}

/// Per-patch activations for one image at one layer: a row-major
/// `patch_count x hidden_dim` matrix plus the grid coordinate of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchActivations {
    layer: LayerIndex,
    values: Vec<f64>,
    hidden_dim: usize,
    grid: (usize, usize),
    coords: Vec<(usize, usize)>,
}

impl PatchActivations {
    /// Builds from a flat row-major matrix. Coordinates are derived row-major
    /// over the grid: patch `i` sits at `(x, y) = (i % cols, i / cols)`.
    pub fn new(
        layer: LayerIndex,
        values: Vec<f64>,
        hidden_dim: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let n = grid.0 * grid.1;
        if values.len() != n * hidden_dim {
            return Err(Error::shape(format!(
                "patch activations have {} values, expected {} ({} patches x {} dims)",
                values.len(),
                n * hidden_dim,
                n,
                hidden_dim
            )));
        }
        let coords = (0..n).map(|i| (i % grid.1, i / grid.1)).collect();
        Ok(PatchActivations {
            layer,
            values,
            hidden_dim,
            grid,
            coords,
        })
    }

    pub fn layer(&self) -> LayerIndex {
        self.layer
    }

    pub fn patch_count(&self) -> usize {
        self.coords.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Patch coordinates as (x, y) grid positions, one per row.
    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.values[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }

    /// The flat row-major matrix.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Patch activations plus a pullback mapping a cotangent on the activation
/// matrix to a cotangent on the input pixels (HWC layout, same as
/// [`PixelImage::data`]).
pub struct PatchVjp {
    pub patches: PatchActivations,
    pullback: Box<dyn Fn(&[f64]) -> Vec<f64> + Send>,
}

impl PatchVjp {
    pub fn new(
        patches: PatchActivations,
        pullback: Box<dyn Fn(&[f64]) -> Vec<f64> + Send>,
    ) -> Self {
        PatchVjp { patches, pullback }
    }

    /// Applies the pullback: `cotangent` must have one value per activation
    /// matrix entry; the result has one value per input-image channel value.
    pub fn pullback(&self, cotangent: &[f64]) -> Vec<f64> {
        (self.pullback)(cotangent)
    }

    pub fn into_parts(self) -> (PatchActivations, Box<dyn Fn(&[f64]) -> Vec<f64> + Send>) {
        (self.patches, self.pullback)
    }
}

/// A vision-language model reduced to the operations the pipeline needs.
pub trait Backend: Send + Sync {
    fn describe(&self) -> BackendDescriptor;

    /// Activation of `text` at `layer`, averaged over token positions.
    /// Text that tokenises to nothing is an input error.
    fn text_activations(&self, text: &str, layer: LayerIndex) -> Result<Activation>;

    /// Per-patch activations for an image at `layer`. The image must match
    /// the backend's resolution and have every channel in `[0, 1]`.
    fn image_patch_activations(
        &self,
        image: &PixelImage,
        layer: LayerIndex,
    ) -> Result<PatchActivations>;

    /// Whether [`Backend::patch_activations_vjp`] is implemented.
    fn supports_gradients(&self) -> bool {
        false
    }

    /// Patch activations together with a pixel pullback, for optimisation.
    /// Unlike [`Backend::image_patch_activations`] this accepts channel
    /// values outside `[0, 1]`, because augmentation noise is unclamped.
    fn patch_activations_vjp(&self, image: &PixelImage, layer: LayerIndex) -> Result<PatchVjp> {
        let _ = (image, layer);
        Err(Error::GradientsUnsupported(self.describe().name))
    }
}

/// How to find and size a backend, as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    /// Filesystem path to model weights, for adapters that need one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    /// Input resolution override; also lets config resolution be computed
    /// without instantiating the backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_resolution: Option<usize>,
}

impl BackendConfig {
    pub fn named(name: &str) -> Self {
        BackendConfig {
            name: name.to_string(),
            model_path: None,
            image_resolution: None,
        }
    }
}

type Constructor = Box<dyn Fn(&BackendConfig) -> Result<Arc<dyn Backend>> + Send + Sync>;

/// Maps backend names to constructors. `toy` is always registered; callers
/// add adapters for real models.
pub struct BackendRegistry {
    constructors: BTreeMap<String, Constructor>,
}

impl BackendRegistry {
    /// A registry containing only the built-in `toy` backend.
    pub fn with_builtins() -> Self {
        let mut registry = BackendRegistry {
            constructors: BTreeMap::new(),
        };
        registry.register("toy", |config| {
            let toy = match config.image_resolution {
                None => toy::ToyBackend::new(),
                Some(r) => toy::ToyBackend::with_config(toy::ToyConfig::at_resolution(r)?)?,
            };
            Ok(Arc::new(toy) as Arc<dyn Backend>)
        });
        registry
    }

    pub fn register(
        &mut self,
        name: &str,
        constructor: impl Fn(&BackendConfig) -> Result<Arc<dyn Backend>> + Send + Sync + 'static,
    ) {
        self.constructors
            .insert(name.to_string(), Box::new(constructor));
    }

    pub fn names(&self) -> Vec<String> {
        self.constructors.keys().cloned().collect()
    }

    pub fn create(&self, config: &BackendConfig) -> Result<Arc<dyn Backend>> {
        match self.constructors.get(&config.name) {
            Some(make) => make(config),
            None => Err(Error::UnknownBackend {
                name: config.name.clone(),
                known: self.names(),
            }),
        }
    }
}
