//! JSON run manifests: one `.npy` file per layer plus a manifest naming them.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array5, Axis};
use serde::{Deserialize, Serialize};

use super::npy::{self, NpyError};
use super::{ActivationStack, ClsPolicy, LayerShape, Precision, TensorError};
use crate::io_util::{to_json_bytes, write_atomic, write_atomic_bytes};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    /// Path of the array file, relative to the manifest's directory.
    pub file: String,
    /// Declared `[B, C, H, W]`.
    pub shape: LayerShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: String,
    pub batch: usize,
    /// Token grid `[H, W]`.
    pub grid: [usize; 2],
    pub cls_policy: ClsPolicy,
    pub layers: Vec<LayerEntry>,
    /// Identifier of the random generator used to produce synthetic stacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

impl RunManifest {
    pub fn from_json(text: &str) -> Result<Self, TensorError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Structural checks that need no array files.
    pub fn validate(&self) -> Result<(), TensorError> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| TensorError::InvalidManifest("manifest lists no layers".into()))?;
        for entry in &self.layers {
            if entry.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    layer: entry.name.clone(),
                    expected: first.shape.to_vec(),
                    actual: entry.shape.to_vec(),
                });
            }
        }
        let [b, _, h, w] = first.shape;
        if b != self.batch {
            return Err(TensorError::InvalidManifest(format!(
                "batch is {} but layer shapes declare B={b}",
                self.batch
            )));
        }
        let [gh, gw] = self.grid;
        if gh * gw != h * w {
            return Err(TensorError::InvalidManifest(format!(
                "grid {gh}x{gw} holds {} tokens but layers declare H*W={}",
                gh * gw,
                h * w
            )));
        }
        Ok(())
    }
}

/// Loads and validates the stack described by the manifest at `manifest_path`.
///
/// Layer order follows the manifest. Array files are resolved relative to the
/// manifest's directory.
pub fn load_stack(manifest_path: &Path) -> Result<ActivationStack, TensorError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| TensorError::io(manifest_path, e))?;
    let manifest = RunManifest::from_json(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    load_from_manifest(&manifest, base)
}

pub(crate) fn load_from_manifest(manifest: &RunManifest, base: &Path) -> Result<ActivationStack, TensorError> {
    manifest.validate()?;
    let [b, c, h, w] = manifest.layers[0].shape;
    let l_count = manifest.layers.len();
    let mut data = Array5::<f64>::zeros((l_count, b, c, h, w));
    let mut precisions = Vec::with_capacity(l_count);

    for (l, entry) in manifest.layers.iter().enumerate() {
        let path: PathBuf = base.join(&entry.file);
        if !path.is_file() {
            return Err(TensorError::MissingFile {
                layer: entry.name.clone(),
                path: path.display().to_string(),
            });
        }
        let bytes = fs::read(&path).map_err(|e| TensorError::io(&path, e))?;
        let (array, precision) = npy::decode(&bytes).map_err(|e| match e {
            NpyError::Dtype(detail) => TensorError::UnsupportedDtype {
                layer: entry.name.clone(),
                detail,
            },
            NpyError::Other(detail) => TensorError::BadArrayFile {
                layer: entry.name.clone(),
                path: path.display().to_string(),
                detail,
            },
        })?;
        if array.shape() != entry.shape {
            return Err(TensorError::ShapeMismatch {
                layer: entry.name.clone(),
                expected: entry.shape.to_vec(),
                actual: array.shape().to_vec(),
            });
        }
        if let Some((idx, &value)) = array.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::LayerNonFinite {
                layer: entry.name.clone(),
                value,
                l,
                b: idx[0],
                c: idx[1],
                h: idx[2],
                w: idx[3],
            });
        }
        let array = array
            .into_dimensionality::<ndarray::Ix4>()
            .expect("shape checked against a 4-element declaration");
        data.index_axis_mut(Axis(0), l).assign(&array);
        precisions.push(precision);
    }

    let precision = if precisions.iter().all(|&p| p == Precision::F32) {
        Precision::F32
    } else {
        Precision::F64
    };
    let names = manifest.layers.iter().map(|e| e.name.clone()).collect();
    Ok(ActivationStack::new(data, names, precision)?
        .with_model(manifest.model.clone())
        .with_cls_policy(manifest.cls_policy))
}

fn file_stem_for(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|ch| {
            if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' {
                ch
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:03}_{clean}.npy")
}

/// Writes one array file per layer plus `manifest.json` into `dir`.
pub fn save_stack(stack: &ActivationStack, dir: &Path) -> Result<RunManifest, TensorError> {
    save_stack_with(stack, dir, None)
}

pub(crate) fn save_stack_with(
    stack: &ActivationStack,
    dir: &Path,
    generator: Option<String>,
) -> Result<RunManifest, TensorError> {
    fs::create_dir_all(dir).map_err(|e| TensorError::io(dir, e))?;
    let shape = stack.layer_shape();
    let mut layers = Vec::with_capacity(stack.num_layers());
    for (l, name) in stack.layer_names().iter().enumerate() {
        let file = file_stem_for(l, name);
        let path = dir.join(&file);
        let view = stack.slice_layer(l)?;
        write_atomic(&path, |w| {
            npy::encode(w, view, stack.precision()).map_err(std::io::Error::other)
        })
        .map_err(|e| TensorError::io(&path, e))?;
        layers.push(LayerEntry {
            name: name.clone(),
            file,
            shape,
        });
    }
    let manifest = RunManifest {
        model: stack.model().to_string(),
        batch: shape[0],
        grid: [shape[2], shape[3]],
        cls_policy: stack.cls_policy(),
        layers,
        generator,
    };
    let path = dir.join(MANIFEST_FILE);
    write_atomic_bytes(&path, &to_json_bytes(&manifest)?).map_err(|e| TensorError::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use ndarray_npy::WriteNpyExt;

    fn stack(shape: (usize, usize, usize, usize, usize)) -> ActivationStack {
        let data = Array5::from_shape_fn(shape, |(l, b, c, h, w)| {
            (l * 7 + b * 5 + c * 3 + h * 2 + w) as f64 / 8.0 - 1.0
        });
        ActivationStack::with_default_names(data, Precision::F32).unwrap()
    }

    #[test]
    fn two_layer_manifest_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let s = stack((2, 1, 4, 2, 2));
        let m = save_stack(&s, dir.path()).unwrap();
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.grid, [2, 2]);
        let back = load_stack(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.dims(), (2, 1, 4, 2, 2));
        assert_eq!(back, s);
    }

    #[test]
    fn single_zero_element_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = ActivationStack::with_default_names(Array5::zeros((1, 1, 1, 1, 1)), Precision::F32).unwrap();
        let m = save_stack(&s, dir.path()).unwrap();
        let files: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "npy"))
            .collect();
        assert_eq!(files.len(), 1);
        let bytes = fs::read(dir.path().join(&m.layers[0].file)).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0u8; 4]);
    }

    #[test]
    fn declared_channel_mismatch_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let s = stack((2, 1, 4, 2, 2));
        let mut m = save_stack(&s, dir.path()).unwrap();
        m.layers[1].shape = [1, 8, 2, 2];
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        match load_stack(&dir.path().join(MANIFEST_FILE)) {
            Err(TensorError::ShapeMismatch {
                layer,
                expected,
                actual,
            }) => {
                assert_eq!(layer, "layer_1");
                assert_eq!(expected, vec![1, 4, 2, 2]);
                assert_eq!(actual, vec![1, 8, 2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_shape_disagreeing_with_declaration() {
        let dir = tempfile::tempdir().unwrap();
        let s = stack((2, 1, 4, 2, 2));
        let m = save_stack(&s, dir.path()).unwrap();
        let wrong = Array4::<f32>::zeros((1, 8, 2, 2));
        wrong
            .write_npy(fs::File::create(dir.path().join(&m.layers[1].file)).unwrap())
            .unwrap();
        let err = load_stack(&dir.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(
            matches!(err, TensorError::ShapeMismatch { ref layer, .. } if layer == "layer_1"),
            "{err}"
        );
    }

    #[test]
    fn missing_file_and_bad_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let s = stack((2, 1, 2, 1, 1));
        let m = save_stack(&s, dir.path()).unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);

        ndarray::Array4::<i64>::zeros((1, 2, 1, 1))
            .write_npy(fs::File::create(dir.path().join(&m.layers[0].file)).unwrap())
            .unwrap();
        let err = load_stack(&manifest).unwrap_err();
        assert!(
            matches!(err, TensorError::UnsupportedDtype { ref layer, .. } if layer == "layer_0"),
            "{err}"
        );

        fs::remove_file(dir.path().join(&m.layers[0].file)).unwrap();
        let err = load_stack(&manifest).unwrap_err();
        assert!(matches!(err, TensorError::MissingFile { ref layer, .. } if layer == "layer_0"));
    }

    #[test]
    fn non_finite_in_file_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let s = stack((2, 2, 3, 2, 2));
        let m = save_stack(&s, dir.path()).unwrap();
        let mut bad = Array4::<f32>::zeros((2, 3, 2, 2));
        bad[[1, 2, 0, 1]] = f32::NAN;
        bad.write_npy(fs::File::create(dir.path().join(&m.layers[1].file)).unwrap())
            .unwrap();
        match load_stack(&dir.path().join(MANIFEST_FILE)) {
            Err(TensorError::LayerNonFinite {
                layer, l, b, c, h, w, ..
            }) => {
                assert_eq!(layer, "layer_1");
                assert_eq!((l, b, c, h, w), (1, 1, 2, 0, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grid_and_batch_consistency() {
        let mut m = RunManifest {
            model: "m".into(),
            batch: 1,
            grid: [2, 2],
            cls_policy: ClsPolicy::Dropped,
            layers: vec![LayerEntry {
                name: "a".into(),
                file: "a.npy".into(),
                shape: [1, 4, 2, 2],
            }],
            generator: None,
        };
        assert!(m.validate().is_ok());
        m.grid = [3, 2];
        assert!(matches!(m.validate(), Err(TensorError::InvalidManifest(_))));
        m.grid = [2, 2];
        m.batch = 2;
        assert!(matches!(m.validate(), Err(TensorError::InvalidManifest(_))));
        m.layers.clear();
        assert!(matches!(m.validate(), Err(TensorError::InvalidManifest(_))));
    }

    #[test]
    fn manifest_schema_keys() {
        let json = r#"{ "model": "cait_s24", "batch": 2, "grid": [1, 2], "cls_policy": "folded",
            "layers": [{ "name": "blocks.0", "file": "x.npy", "shape": [2, 3, 1, 2] }] }"#;
        let m = RunManifest::from_json(json).unwrap();
        assert_eq!(m.cls_policy, ClsPolicy::Folded);
        assert_eq!(m.layers[0].shape, [2, 3, 1, 2]);
        let back = serde_json::to_value(&m).unwrap();
        assert!(back.get("generator").is_none());
        assert_eq!(back["cls_policy"], "folded");
    }
}
