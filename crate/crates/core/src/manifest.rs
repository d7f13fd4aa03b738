//! Checkpoint ingestion: a JSON manifest naming raw little-endian `f32`
//! blobs, one per layer.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deploy::{Layer, LayerShape, NetworkModel};
use crate::error::{Error, Result};
use crate::train::normalize_weights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// Weights already lie in [-1, 1] and are used as stored.
    #[serde(default)]
    pub prenormalized: bool,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    /// `"dense"` or `"conv"`.
    pub kind: String,
    /// `[rows, cols]` or `[out, in, kh, kw]`.
    pub shape: Vec<usize>,
    /// Relative to the manifest's directory.
    pub data_file: PathBuf,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
}

fn default_dtype() -> String {
    "f32le".into()
}

impl LayerEntry {
    pub fn layer_shape(&self) -> Result<LayerShape> {
        let bad = |reason: String| Error::BadLayer {
            layer: self.name.clone(),
            reason,
        };
        if self.dtype != "f32le" {
            return Err(bad(format!("dtype `{}` is not supported (expected f32le)", self.dtype)));
        }
        let (want_dims, want_layout) = match self.kind.as_str() {
            "dense" => (2, "row_major"),
            "conv" => (4, "oihw"),
            other => {
                return Err(Error::UnknownKind {
                    layer: self.name.clone(),
                    kind: other.into(),
                })
            }
        };
        if let Some(l) = &self.layout {
            if l != want_layout {
                return Err(bad(format!(
                    "layout `{l}` is not supported for {} layers (expected {want_layout})",
                    self.kind
                )));
            }
        }
        if self.shape.len() != want_dims || self.shape.contains(&0) {
            return Err(bad(format!(
                "shape {:?} must have {want_dims} positive dimensions",
                self.shape
            )));
        }
        let s = &self.shape;
        Ok(if want_dims == 2 {
            LayerShape::Dense {
                rows: s[0],
                cols: s[1],
            }
        } else {
            LayerShape::Conv {
                out_channels: s[0],
                in_channels: s[1],
                kernel_h: s[2],
                kernel_w: s[3],
            }
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_f32le(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn write_f32le(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every layer and maps its weights into [-1, 1] with
/// [`normalize_weights`] unless the manifest says they already are.
pub fn load_model(manifest_path: &Path) -> Result<NetworkModel> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::DuplicateLayer(entry.name.clone()));
        }
        let shape = entry.layer_shape()?;
        let path = dir.join(&entry.data_file);
        let expected = shape.len() * 4;
        let actual = fs::metadata(&path)
            .map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?
            .len() as usize;
        if actual != expected {
            return Err(Error::LengthMismatch {
                layer: entry.name.clone(),
                path,
                expected,
                actual,
            });
        }
        let raw = read_f32le(&path)?;
        if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight {
                layer: entry.name.clone(),
                index,
            });
        }
        let raw: Vec<f64> = raw.into_iter().map(f64::from).collect();
        let weights = if manifest.prenormalized {
            if let Some(i) = raw.iter().position(|v| v.abs() > 1.0) {
                return Err(Error::BadLayer {
                    layer: entry.name.clone(),
                    reason: format!(
                        "value {} at index {i} outside [-1, 1] in a prenormalized checkpoint",
                        raw[i]
                    ),
                });
            }
            raw
        } else {
            normalize_weights(&raw)
        };
        layers.push(Layer {
            name: entry.name.clone(),
            shape,
            weights,
        });
    }
    Ok(NetworkModel {
        name: manifest.name,
        layers,
    })
}

/// Writes `model` as a prenormalized checkpoint into `dir`.
pub fn save_model(model: &NetworkModel, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let file = PathBuf::from(format!("{}.bin", layer.name));
        write_f32le(&dir.join(&file), &layer.weights)?;
        let (kind, shape, layout) = match layer.shape {
            LayerShape::Dense { rows, cols } => ("dense", vec![rows, cols], "row_major"),
            LayerShape::Conv {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
            } => (
                "conv",
                vec![out_channels, in_channels, kernel_h, kernel_w],
                "oihw",
            ),
        };
        layers.push(LayerEntry {
            name: layer.name.clone(),
            kind: kind.into(),
            shape,
            data_file: file,
            dtype: default_dtype(),
            layout: Some(layout.into()),
        });
    }
    let manifest = Manifest {
        name: model.name.clone(),
        prenormalized: true,
        layers,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_case(dir: &Path, manifest: &str, blobs: &[(&str, usize)]) -> PathBuf {
        for (name, n) in blobs {
            let v: Vec<f64> = (0..*n).map(|i| (i as f64 - 3.0) / 10.0).collect();
            write_f32le(&dir.join(name), &v).unwrap();
        }
        let p = dir.join("manifest.json");
        fs::write(&p, manifest).unwrap();
        p
    }

    #[test]
    fn loads_dense_and_conv() {
        let d = tempfile::tempdir().unwrap();
        let p = write_case(
            d.path(),
            r#"{"name":"m","layers":[
                {"name":"fc","kind":"dense","shape":[4,4],"data_file":"fc.bin"},
                {"name":"c","kind":"conv","shape":[2,3,3,3],"data_file":"c.bin","layout":"oihw"}]}"#,
            &[("fc.bin", 16), ("c.bin", 54)],
        );
        assert_eq!(fs::metadata(d.path().join("fc.bin")).unwrap().len(), 64);
        assert_eq!(fs::metadata(d.path().join("c.bin")).unwrap().len(), 216);
        let m = load_model(&p).unwrap();
        assert_eq!(m.layers[1].gemm().unwrap().rows(), 2);
        assert_eq!(m.layers[1].gemm().unwrap().cols(), 27);
        let max = m.layers[0].weights.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert_eq!(max, 1.0);
    }

    #[test]
    fn diagnostics_name_the_layer() {
        let d = tempfile::tempdir().unwrap();
        let p = write_case(
            d.path(),
            r#"{"name":"m","layers":[{"name":"fc1","kind":"dense","shape":[4,4],"data_file":"fc.bin"}]}"#,
            &[("fc.bin", 15)],
        );
        let e = load_model(&p).unwrap_err();
        assert!(matches!(e, Error::LengthMismatch { expected: 64, actual: 60, .. }));
        assert!(e.to_string().contains("fc1"));

        let p = write_case(
            d.path(),
            r#"{"name":"m","layers":[{"name":"x","kind":"lstm","shape":[4,4],"data_file":"fc.bin"}]}"#,
            &[],
        );
        assert!(matches!(load_model(&p), Err(Error::UnknownKind { .. })));

        let p = write_case(
            d.path(),
            r#"{"name":"m","layers":[{"name":"gone","kind":"dense","shape":[1,1],"data_file":"nope.bin"}]}"#,
            &[],
        );
        assert!(matches!(load_model(&p), Err(Error::Io { .. })));

        fs::write(d.path().join("nan.bin"), f32::NAN.to_le_bytes()).unwrap();
        let p = write_case(
            d.path(),
            r#"{"name":"m","layers":[{"name":"n","kind":"dense","shape":[1,1],"data_file":"nan.bin"}]}"#,
            &[],
        );
        assert!(matches!(load_model(&p), Err(Error::NonFiniteWeight { index: 0, .. })));

        let p = write_case(
            d.path(),
            r#"{"name":"m","layers":[
                {"name":"a","kind":"dense","shape":[2,2],"data_file":"a.bin"},
                {"name":"a","kind":"dense","shape":[2,2],"data_file":"a.bin"}]}"#,
            &[("a.bin", 4)],
        );
        assert!(matches!(load_model(&p), Err(Error::DuplicateLayer(_))));
    }

    #[test]
    fn empty_model_and_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = write_case(d.path(), r#"{"name":"empty","layers":[]}"#, &[]);
        assert!(load_model(&p).unwrap().layers.is_empty());

        let m = NetworkModel {
            name: "rt".into(),
            layers: vec![Layer {
                name: "fc".into(),
                shape: LayerShape::Dense { rows: 1, cols: 3 },
                weights: vec![0.5, -0.25, 1.0],
            }],
        };
        let out = d.path().join("out");
        let back = load_model(&save_model(&m, &out).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
