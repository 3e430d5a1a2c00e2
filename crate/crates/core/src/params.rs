//! Named parameter collections and their on-disk archive format.
//!
//! An archive is a directory holding `manifest.json` (names, shapes, dtype,
//! byte offsets and the owning config's hash) and `params.bin`, the raw
//! little-endian `float32` values concatenated in manifest order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, ArrayView1, ArrayView4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// An ordered set of named tensors. Gradients and optimizer moments use the
/// same type with the same layout as the parameters they belong to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        self.entries.push(Param {
            name: name.into(),
            value,
        });
        self.entries.len() - 1
    }

    /// Appends a fan-in scaled (He) normal conv weight plus a zero bias.
    /// Draws are rounded to `f32` so fresh parameters survive an archive
    /// round trip unchanged. Returns `(weight_index, bias_index)`.
    pub fn push_conv<R: Rng>(
        &mut self,
        prefix: &str,
        out_c: usize,
        in_c: usize,
        kernel: usize,
        rng: &mut R,
    ) -> (usize, usize) {
        let fan_in = (in_c * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = ArrayD::from_shape_simple_fn(IxDyn(&[out_c, in_c, kernel, kernel]), || {
            normal.sample(rng) as f32 as f64
        });
        let w = self.push(format!("{prefix}.weight"), weight);
        let b = self.push(format!("{prefix}.bias"), ArrayD::zeros(IxDyn(&[out_c])));
        (w, b)
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: ArrayD::zeros(p.value.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &ArrayD<f64> {
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.entries[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.index_of(name).map(move |i| self.get_mut(i))
    }

    pub(crate) fn conv_weight(&self, idx: usize) -> ArrayView4<'_, f64> {
        self.get(idx)
            .view()
            .into_dimensionality()
            .expect("conv weight is 4-d")
    }

    pub(crate) fn vector(&self, idx: usize) -> ArrayView1<'_, f64> {
        self.get(idx)
            .view()
            .into_dimensionality()
            .expect("bias is 1-d")
    }

    /// Adds a gradient array of any matching-element-count shape into entry `idx`.
    pub(crate) fn accumulate(&mut self, idx: usize, grad: &[f64]) {
        let dst = self.entries[idx]
            .value
            .as_slice_mut()
            .expect("contiguous parameter");
        assert_eq!(dst.len(), grad.len(), "gradient size");
        for (d, g) in dst.iter_mut().zip(grad) {
            *d += g;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.entries {
            p.value.mapv_inplace(|v| v * factor);
        }
    }

    /// `self += other`, entry by entry.
    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value += &b.value;
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact `f64` bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every value through `f32`, the archive storage type.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.entries {
            p.value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut blob = Vec::with_capacity(self.num_scalars() * 4);
        let mut tensors = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            let offset = blob.len();
            for &v in p.value.iter() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                len: p.value.len(),
            });
        }
        let manifest = Manifest {
            format_version: 1,
            dtype: "f32le".to_string(),
            config_hash: config_hash.to_string(),
            params_sha256: hex::encode(Sha256::digest(&blob)),
            tensors,
        };
        let params_path = dir.join(PARAMS_FILE);
        fs::write(&params_path, &blob)
            .map_err(|e| Error::io(format!("writing {}", params_path.display()), e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
        Ok(())
    }

    /// Loads an archive, refusing it unless its config hash equals `expected_hash`.
    pub fn load(dir: &Path, expected_hash: &str) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.config_hash != expected_hash {
            return Err(Error::HashMismatch {
                path: dir.join(MANIFEST_FILE),
                expected: expected_hash.to_string(),
                found: manifest.config_hash,
            });
        }
        let params_path = dir.join(PARAMS_FILE);
        let blob = fs::read(&params_path)
            .map_err(|e| Error::io(format!("reading {}", params_path.display()), e))?;
        let actual = hex::encode(Sha256::digest(&blob));
        if actual != manifest.params_sha256 {
            return Err(Error::Checkpoint {
                path: params_path,
                reason: format!(
                    "params.bin sha256 {actual} does not match manifest {}",
                    manifest.params_sha256
                ),
            });
        }
        if manifest.dtype != "f32le" {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: format!("unsupported dtype {}", manifest.dtype),
            });
        }
        let mut set = ParamSet::new();
        for t in manifest.tensors {
            let end = (t.offset + 4 * t.len).min(blob.len());
            let expected_len: usize = t.shape.iter().product();
            if expected_len != t.len || t.offset > end || end - t.offset != 4 * t.len {
                return Err(Error::Checkpoint {
                    path: dir.to_path_buf(),
                    reason: format!("tensor {} is truncated or mis-shaped", t.name),
                });
            }
            let values: Vec<f64> = blob[t.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&t.shape), values)
                .map_err(|e| Error::Shape(e.to_string()))?;
            set.push(t.name, value);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config_hash: String,
    pub params_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Checkpoint {
        path,
        reason: e.to_string(),
    })
}

/// SHA-256 of an archive's `params.bin`, the hash used for freeze and resume checks.
pub fn archive_hash(dir: &Path) -> Result<String> {
    let path = dir.join(PARAMS_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&blob)))
}

/// Stable hash of any serializable config value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.push_conv("a", 4, 2, 3, &mut rng);
        p.push_conv("b", 2, 4, 1, &mut rng);
        p
    }

    #[test]
    fn save_load_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = sample();
        p.save(dir.path(), "abc").unwrap();
        let q = ParamSet::load(dir.path(), "abc").unwrap();
        p.round_to_f32();
        assert_eq!(p, q);
    }

    #[test]
    fn load_rejects_wrong_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path(), "abc").unwrap();
        let err = ParamSet::load(dir.path(), "xyz").unwrap_err();
        match err {
            Error::HashMismatch { expected, found, .. } => {
                assert_eq!(expected, "xyz");
                assert_eq!(found, "abc");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_tampered_blob() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path(), "abc").unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let mut blob = fs::read(&path).unwrap();
        blob[0] ^= 0xff;
        fs::write(&path, blob).unwrap();
        assert!(matches!(
            ParamSet::load(dir.path(), "abc"),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(sample().fingerprint(), sample().fingerprint());
    }
}
