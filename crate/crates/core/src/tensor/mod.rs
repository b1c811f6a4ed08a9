//! Layer-stacked activation tensors and their on-disk form.
//!
//! An [`ActivationStack`] holds a dense `(L, B, C, H, W)` tensor of
//! activations together with one name per layer. Values are kept as `f64`
//! internally whatever the on-disk element type was; a stack marked
//! [`Precision::F32`] only ever holds values that are exactly representable
//! as `f32`, so a save/load cycle is lossless in both precisions.

mod manifest;
mod npy;

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array5, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use manifest::save_stack_with;
pub use manifest::{load_stack, save_stack, LayerEntry, RunManifest};

/// Shape of a single layer block, `(B, C, H, W)`.
pub type LayerShape = [usize; 4];

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("stack must have at least one layer")]
    NoLayers,
    #[error("dimension {axis} is zero in shape {shape:?}; every axis must be >= 1")]
    EmptyAxis { axis: &'static str, shape: [usize; 5] },
    #[error("expected {expected} layer names, got {actual}")]
    LayerNameCount { expected: usize, actual: usize },
    #[error("duplicate layer name `{0}`")]
    DuplicateLayerName(String),
    #[error("non-finite value {value} at index (l={l}, b={b}, c={c}, h={h}, w={w})")]
    NonFinite {
        value: f64,
        l: usize,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    #[error("layer index {index} out of range for stack with {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("layer `{layer}`: shape mismatch, expected {expected:?} but found {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("layer `{layer}`: non-finite value {value} at index (l={l}, b={b}, c={c}, h={h}, w={w})")]
    LayerNonFinite {
        layer: String,
        value: f64,
        l: usize,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    #[error("layer `{layer}`: unsupported element type ({detail}); expected <f4 or <f8")]
    UnsupportedDtype { layer: String, detail: String },
    #[error("layer `{layer}`: array file {path} does not exist")]
    MissingFile { layer: String, path: String },
    #[error("layer `{layer}`: cannot read array file {path}: {detail}")]
    BadArrayFile {
        layer: String,
        path: String,
        detail: String,
    },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TensorError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        TensorError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// On-disk element precision of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn descr(self) -> &'static str {
        match self {
            Precision::F32 => "<f4",
            Precision::F64 => "<f8",
        }
    }
}

/// How the extractor turned a token sequence with a class token into a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsPolicy {
    /// The class token was discarded; the grid holds the patch tokens only.
    #[default]
    Dropped,
    /// The class token's value was added to every grid cell's mean.
    Folded,
}

impl fmt::Display for ClsPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClsPolicy::Dropped => "dropped",
            ClsPolicy::Folded => "folded",
        })
    }
}

/// A validated `(L, B, C, H, W)` activation tensor with per-layer names.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    data: Array5<f64>,
    layer_names: Vec<String>,
    precision: Precision,
    model: String,
    cls_policy: ClsPolicy,
}

impl ActivationStack {
    /// Validates and wraps `data`.
    ///
    /// With [`Precision::F32`] every value is rounded to the nearest `f32`.
    pub fn new(data: Array5<f64>, layer_names: Vec<String>, precision: Precision) -> Result<Self, TensorError> {
        let shape: [usize; 5] = data.dim().into();
        if shape[0] == 0 {
            return Err(TensorError::NoLayers);
        }
        const AXES: [&str; 5] = ["L", "B", "C", "H", "W"];
        if let Some(i) = shape.iter().position(|&d| d == 0) {
            return Err(TensorError::EmptyAxis { axis: AXES[i], shape });
        }
        if layer_names.len() != shape[0] {
            return Err(TensorError::LayerNameCount {
                expected: shape[0],
                actual: layer_names.len(),
            });
        }
        let mut seen = HashSet::new();
        for name in &layer_names {
            if !seen.insert(name.as_str()) {
                return Err(TensorError::DuplicateLayerName(name.clone()));
            }
        }
        if let Some(((l, b, c, h, w), &value)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { value, l, b, c, h, w });
        }
        let data = match precision {
            Precision::F32 => data.mapv_into(|v| v as f32 as f64),
            Precision::F64 => data,
        };
        // f64 -> f32 can overflow to infinity
        if let Some(((l, b, c, h, w), &value)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { value, l, b, c, h, w });
        }
        Ok(Self {
            data,
            layer_names,
            precision,
            model: String::from("unnamed"),
            cls_policy: ClsPolicy::default(),
        })
    }

    /// Convenience constructor naming layers `layer_0 .. layer_{L-1}`.
    pub fn with_default_names(data: Array5<f64>, precision: Precision) -> Result<Self, TensorError> {
        let names = (0..data.len_of(Axis(0))).map(|l| format!("layer_{l}")).collect();
        Self::new(data, names, precision)
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_cls_policy(mut self, policy: ClsPolicy) -> Self {
        self.cls_policy = policy;
        self
    }

    /// `(L, B, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn num_layers(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn layer_shape(&self) -> LayerShape {
        let (_, b, c, h, w) = self.dims();
        [b, c, h, w]
    }

    pub fn data(&self) -> &Array5<f64> {
        &self.data
    }

    pub fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn cls_policy(&self) -> ClsPolicy {
        self.cls_policy
    }

    /// Borrowed `(B, C, H, W)` view of layer `l`.
    pub fn slice_layer(&self, l: usize) -> Result<ArrayView4<'_, f64>, TensorError> {
        if l >= self.num_layers() {
            return Err(TensorError::LayerOutOfRange {
                index: l,
                layers: self.num_layers(),
            });
        }
        Ok(self.data.index_axis(Axis(0), l))
    }

    /// Copies the channel vector at `(l, b, h, w)` into `out`.
    pub(crate) fn channel_vector_into(&self, l: usize, b: usize, h: usize, w: usize, out: &mut [f64]) {
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.data[[l, b, c, h, w]];
        }
    }
}
