//! On-disk tensor bundle: one directory holding `manifest.json` plus one
//! raw little-endian `f32` blob per tensor.
//!
//! Blobs are row-major; rank-3 tensors are stored as `[U][V][K]` with the unit
//! axis `K` varying fastest.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUNDLE_VERSION: &str = "advise-bundle/1";
pub const MANIFEST_FILE: &str = "manifest.json";

const ACTIVATION: &str = "activation";
const GRADIENT: &str = "gradient";
const LOGITS: &str = "logits";

/// Per-bundle metadata, everything in the manifest except the tensor list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub model: String,
    pub layer: String,
    pub image: String,
    /// `[H, W]` of the input image in pixels.
    pub input_size: [usize; 2],
    pub class_index: usize,
    /// Softmax score of `class_index`, in `(0, 1)`.
    pub class_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub name: String,
    pub dtype: String,
    pub byte_order: String,
    pub shape: Vec<usize>,
    pub file: String,
}

impl TensorDescriptor {
    fn f32_le(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            dtype: "f32".to_string(),
            byte_order: "LE".to_string(),
            shape: shape.to_vec(),
            file: format!("{name}.bin"),
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    #[serde(flatten)]
    pub info: BundleInfo,
    pub tensors: Vec<TensorDescriptor>,
}

/// Activation, gradient and prediction of one image / layer / class.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBundle {
    pub manifest: Manifest,
    /// `A`, shape `[U, V, K]`.
    pub activation: Array3<f32>,
    /// `dy^c/dA`, shape `[U, V, K]`.
    pub gradient: Array3<f32>,
    pub logits: Option<Array1<f32>>,
}

impl TensorBundle {
    /// Builds a bundle with a freshly generated tensor list and validates it.
    pub fn new(
        info: BundleInfo,
        activation: Array3<f32>,
        gradient: Array3<f32>,
        logits: Option<Array1<f32>>,
    ) -> Result<Self> {
        let mut tensors = vec![
            TensorDescriptor::f32_le(ACTIVATION, activation.shape()),
            TensorDescriptor::f32_le(GRADIENT, gradient.shape()),
        ];
        if let Some(l) = &logits {
            tensors.push(TensorDescriptor::f32_le(LOGITS, l.shape()));
        }
        let bundle = Self {
            manifest: Manifest {
                version: BUNDLE_VERSION.to_string(),
                info,
                tensors,
            },
            activation,
            gradient,
            logits,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn info(&self) -> &BundleInfo {
        &self.manifest.info
    }

    /// `(U, V, K)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.activation.dim()
    }

    pub fn units(&self) -> usize {
        self.activation.dim().2
    }

    pub fn gradient_unit(&self, k: usize) -> ArrayView2<'_, f32> {
        self.gradient.index_axis(Axis(2), k)
    }

    pub fn activation_unit(&self, k: usize) -> ArrayView2<'_, f32> {
        self.activation.index_axis(Axis(2), k)
    }

    /// Checks every bundle invariant.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.version != BUNDLE_VERSION {
            return Err(Error::invalid(format!(
                "bundle version {:?}, expected {BUNDLE_VERSION:?}",
                m.version
            )));
        }
        if self.activation.shape() != self.gradient.shape() {
            return Err(Error::invalid(format!(
                "activation shape {:?} differs from gradient shape {:?}",
                self.activation.shape(),
                self.gradient.shape()
            )));
        }
        if self.activation.shape().contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be >= 1, got {:?}",
                self.activation.shape()
            )));
        }
        if m.info.input_size.contains(&0) {
            return Err(Error::invalid("input_size dimensions must be >= 1"));
        }
        check_finite(ACTIVATION, &self.activation)?;
        check_finite(GRADIENT, &self.gradient)?;
        let y = m.info.class_score;
        if !(y > 0.0 && y < 1.0) {
            return Err(Error::invalid(format!("class_score {y} outside (0, 1)")));
        }
        if let Some(top5) = &m.info.top5 {
            if top5.len() != 5 {
                return Err(Error::invalid(format!(
                    "top5 has {} entries, expected 5",
                    top5.len()
                )));
            }
        }
        if let Some(logits) = &self.logits {
            for (i, &v) in logits.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::invalid(format!("non-finite value in {LOGITS}[{i}]")));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!(
                        "{LOGITS}[{i}] = {v} outside [0, 1]"
                    )));
                }
            }
            let c = m.info.class_index;
            let lc = logits.get(c).ok_or_else(|| {
                Error::invalid(format!(
                    "class_index {c} out of range for {} logits",
                    logits.len()
                ))
            })?;
            if (f64::from(*lc) - y).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "logits[{c}] = {lc} inconsistent with class_score {y}"
                )));
            }
        }
        // descriptor list must mirror the tensors
        let expect = |name: &str, shape: &[usize]| -> Result<()> {
            let d = m
                .tensors
                .iter()
                .find(|d| d.name == name)
                .ok_or_else(|| Error::invalid(format!("manifest lacks tensor {name:?}")))?;
            if d.shape != shape {
                return Err(Error::invalid(format!(
                    "descriptor shape {:?} for {name} does not match data {:?}",
                    d.shape, shape
                )));
            }
            Ok(())
        };
        expect(ACTIVATION, self.activation.shape())?;
        expect(GRADIENT, self.gradient.shape())?;
        if let Some(l) = &self.logits {
            expect(LOGITS, l.shape())?;
        }
        Ok(())
    }
}

fn check_finite(name: &str, t: &Array3<f32>) -> Result<()> {
    if let Some(((u, v, k), x)) = t.indexed_iter().find(|(_, x)| !x.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite value {x} in {name}[{u}, {v}, {k}]"
        )));
    }
    Ok(())
}

fn read_blob(dir: &Path, desc: &TensorDescriptor) -> Result<Vec<f32>> {
    if desc.dtype != "f32" {
        return Err(Error::invalid(format!(
            "tensor {:?}: unsupported dtype {:?}",
            desc.name, desc.dtype
        )));
    }
    if desc.byte_order != "LE" {
        return Err(Error::invalid(format!(
            "tensor {:?}: unsupported byte order {:?}",
            desc.name, desc.byte_order
        )));
    }
    let path = dir.join(&desc.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != desc.element_count() {
        return Err(Error::invalid(format!(
            "tensor {:?}: shape {:?} declares {} elements but {} holds {} bytes",
            desc.name,
            desc.shape,
            desc.element_count(),
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn rank3(desc: &TensorDescriptor, data: Vec<f32>) -> Result<Array3<f32>> {
    match desc.shape[..] {
        [u, v, k] => Array3::from_shape_vec((u, v, k), data)
            .map_err(|e| Error::invalid(format!("tensor {:?}: {e}", desc.name))),
        _ => Err(Error::invalid(format!(
            "tensor {:?} must be rank 3, got shape {:?}",
            desc.name, desc.shape
        ))),
    }
}

/// Reads and fully validates the bundle stored in `dir`.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<TensorBundle> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::invalid(format!(
            "{}: version {:?}, expected {BUNDLE_VERSION:?}",
            mpath.display(),
            manifest.version
        )));
    }
    let find = |name: &str| manifest.tensors.iter().find(|d| d.name == name);
    let act_desc = find(ACTIVATION)
        .ok_or_else(|| Error::invalid(format!("{}: no activation tensor", mpath.display())))?;
    let grad_desc = find(GRADIENT)
        .ok_or_else(|| Error::invalid(format!("{}: no gradient tensor", mpath.display())))?;
    let activation = rank3(act_desc, read_blob(dir, act_desc)?)?;
    let gradient = rank3(grad_desc, read_blob(dir, grad_desc)?)?;
    let logits = match find(LOGITS) {
        Some(d) => {
            if d.shape.len() != 1 {
                return Err(Error::invalid(format!(
                    "logits must be rank 1, got shape {:?}",
                    d.shape
                )));
            }
            Some(Array1::from(read_blob(dir, d)?))
        }
        None => None,
    };
    let bundle = TensorBundle {
        manifest,
        activation,
        gradient,
        logits,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` into `dir` (created if needed). The bundle is validated
/// first; nothing is written for an invalid bundle.
pub fn write_bundle(bundle: &TensorBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for desc in &bundle.manifest.tensors {
        let values: Box<dyn Iterator<Item = &f32>> = match desc.name.as_str() {
            ACTIVATION => Box::new(bundle.activation.iter()),
            GRADIENT => Box::new(bundle.gradient.iter()),
            LOGITS => match &bundle.logits {
                Some(l) => Box::new(l.iter()),
                None => continue,
            },
            other => {
                return Err(Error::invalid(format!("unknown tensor name {other:?}")));
            }
        };
        let mut bytes = Vec::with_capacity(desc.element_count() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&desc.file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let mut text = serde_json::to_string_pretty(&bundle.manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    text.push('\n');
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}
