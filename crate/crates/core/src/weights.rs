//! Named, immutable parameter collection plus its on-disk container.
//!
//! # Weight file layout
//!
//! All integers little-endian.
//!
//! | offset   | size | content                                          |
//! |----------|------|--------------------------------------------------|
//! | 0        | 8    | magic `LTWEIGHT`                                 |
//! | 8        | 4    | format version (`1`)                             |
//! | 12       | 4    | reserved, zero                                   |
//! | 16       | 8    | manifest length `L` in bytes                     |
//! | 24       | L    | manifest, UTF-8 JSON                             |
//! | 24 + L   | ...  | payload: raw `f32` values                        |
//!
//! The manifest is `{"config": {...}, "tensors": [{"name", "shape",
//! "offset"}, ...]}` where `config` echoes [`ModelConfig`] and each `offset`
//! is the byte position of that tensor's data relative to the payload start.
//! Tensors are written in name order, back to back.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LTWEIGHT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Standard deviation of the seeded Gaussian used for every weight matrix.
pub const INIT_STD: f32 = 0.02;

/// The three center-head branches and their output widths.
pub const HEAD_BRANCHES: [(&str, usize); 3] = [("center", 1), ("offset", 2), ("size", 2)];

/// Convolution stages per head branch; all but the last are followed by
/// normalization and a rectifier.
pub const HEAD_STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Gaussian,
    Zeros,
    Ones,
}

fn init_for(name: &str) -> Init {
    if name.ends_with(".bias") {
        Init::Zeros
    } else if name.contains("norm") && name.ends_with(".weight") {
        Init::Ones
    } else {
        Init::Gaussian
    }
}

/// Canonical parameter names and shapes for a configuration.
///
/// Matrices are stored input-major (`in × out`) so tokens multiply on the
/// left; head convolutions are `out × (in·9)`.
pub fn required_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.embed_dim;
    let hidden = config.mlp_hidden();
    let p = config.patch_size;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![3 * p * p, c]),
        ("patch_embed.bias".to_string(), vec![c]),
        ("pos_embed.template".to_string(), vec![config.template_tokens(), c]),
        ("pos_embed.search".to_string(), vec![config.search_tokens(), c]),
    ];
    for i in 0..config.num_layers() {
        let pre = format!("blocks.{i}");
        out.extend([
            (format!("{pre}.norm1.weight"), vec![c]),
            (format!("{pre}.norm1.bias"), vec![c]),
            (format!("{pre}.attn.q.weight"), vec![c, c]),
            (format!("{pre}.attn.q.bias"), vec![c]),
            (format!("{pre}.attn.k.weight"), vec![c, c]),
            (format!("{pre}.attn.k.bias"), vec![c]),
            (format!("{pre}.attn.v.weight"), vec![c, c]),
            (format!("{pre}.attn.v.bias"), vec![c]),
            (format!("{pre}.attn.proj.weight"), vec![c, c]),
            (format!("{pre}.attn.proj.bias"), vec![c]),
            (format!("{pre}.norm2.weight"), vec![c]),
            (format!("{pre}.norm2.bias"), vec![c]),
            (format!("{pre}.mlp.fc1.weight"), vec![c, hidden]),
            (format!("{pre}.mlp.fc1.bias"), vec![hidden]),
            (format!("{pre}.mlp.fc2.weight"), vec![hidden, c]),
            (format!("{pre}.mlp.fc2.bias"), vec![c]),
        ]);
    }
    out.push(("norm.weight".to_string(), vec![c]));
    out.push(("norm.bias".to_string(), vec![c]));
    for (branch, width) in HEAD_BRANCHES {
        for (stage, (cin, cout)) in head_channels(c, width).into_iter().enumerate() {
            let pre = format!("head.{branch}.{stage}");
            out.push((format!("{pre}.conv.weight"), vec![cout, cin * 9]));
            out.push((format!("{pre}.conv.bias"), vec![cout]));
            if stage + 1 < HEAD_STAGES {
                out.push((format!("{pre}.norm.weight"), vec![cout]));
                out.push((format!("{pre}.norm.bias"), vec![cout]));
            }
        }
    }
    out
}

/// `(in, out)` channels of each head stage: C → C/2 → C/4 → C/8 → `width`.
pub fn head_channels(embed_dim: usize, width: usize) -> [(usize, usize); HEAD_STAGES] {
    let c = embed_dim;
    [(c, c / 2), (c / 2, c / 4), (c / 4, c / 8), (c / 8, width)]
}

/// Borrowed parameters of one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerWeights<'a> {
    pub index: usize,
    pub norm1_weight: &'a Tensor,
    pub norm1_bias: &'a Tensor,
    pub q_weight: &'a Tensor,
    pub q_bias: &'a Tensor,
    pub k_weight: &'a Tensor,
    pub k_bias: &'a Tensor,
    pub v_weight: &'a Tensor,
    pub v_bias: &'a Tensor,
    pub proj_weight: &'a Tensor,
    pub proj_bias: &'a Tensor,
    pub norm2_weight: &'a Tensor,
    pub norm2_bias: &'a Tensor,
    pub fc1_weight: &'a Tensor,
    pub fc1_bias: &'a Tensor,
    pub fc2_weight: &'a Tensor,
    pub fc2_bias: &'a Tensor,
}

/// One convolution stage of a head branch.
#[derive(Debug, Clone, Copy)]
pub struct ConvStage<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
    pub norm: Option<(&'a Tensor, &'a Tensor)>,
}

#[derive(Debug, Clone)]
pub struct HeadWeights<'a> {
    pub center: Vec<ConvStage<'a>>,
    pub offset: Vec<ConvStage<'a>>,
    pub size: Vec<ConvStage<'a>>,
}

/// Immutable name → tensor map whose key set is exactly
/// [`required_shapes`] for its configuration.
#[derive(Debug)]
pub struct WeightStore {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    digest: OnceLock<[u8; 32]>,
}

impl Clone for WeightStore {
    fn clone(&self) -> Self {
        WeightStore {
            config: self.config.clone(),
            tensors: self.tensors.clone(),
            digest: self.digest.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn name_stream(name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

impl WeightStore {
    /// Validates that `tensors` holds exactly the parameters `config` needs.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let required = required_shapes(&config);
        for (name, shape) in &required {
            match tensors.get(name) {
                None => return Err(Error::Format(format!("missing tensor {name}"))),
                Some(t) if t.shape() != &shape[..] => {
                    return Err(Error::Format(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if tensors.len() != required.len() {
            let known: std::collections::HashSet<_> = required.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<_> = tensors.keys().filter(|k| !known.contains(k.as_str())).collect();
            return Err(Error::Format(format!("unexpected tensors {extra:?}")));
        }
        Ok(WeightStore {
            config,
            tensors,
            digest: OnceLock::new(),
        })
    }

    /// Seeded initialization: N(0, 0.02) matrices and tables, zero biases,
    /// unit norm gains.
    ///
    /// Every tensor draws from its own ChaCha stream keyed by its name, so a
    /// store generated with fewer layers equals the layer prefix of a deeper
    /// one with the same seed.
    pub fn generate(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let tensors = required_shapes(config)
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = match init_for(&name) {
                    Init::Zeros => vec![0.0; len],
                    Init::Ones => vec![1.0; len],
                    Init::Gaussian => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(name_stream(&name));
                        (0..len).map(|_| normal.sample(&mut rng)).collect()
                    }
                };
                let t = Tensor::new(shape, data).expect("generated shape");
                (name, t)
            })
            .collect();
        WeightStore::from_tensors(config.clone(), tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("no tensor named {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of `f32` parameters.
    pub fn num_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    pub fn layer(&self, index: usize) -> Result<LayerWeights<'_>> {
        if index >= self.config.num_layers() {
            return Err(Error::Range(format!(
                "layer {index} outside 0..{}",
                self.config.num_layers()
            )));
        }
        let g = |suffix: &str| self.get(&format!("blocks.{index}.{suffix}"));
        Ok(LayerWeights {
            index,
            norm1_weight: g("norm1.weight")?,
            norm1_bias: g("norm1.bias")?,
            q_weight: g("attn.q.weight")?,
            q_bias: g("attn.q.bias")?,
            k_weight: g("attn.k.weight")?,
            k_bias: g("attn.k.bias")?,
            v_weight: g("attn.v.weight")?,
            v_bias: g("attn.v.bias")?,
            proj_weight: g("attn.proj.weight")?,
            proj_bias: g("attn.proj.bias")?,
            norm2_weight: g("norm2.weight")?,
            norm2_bias: g("norm2.bias")?,
            fc1_weight: g("mlp.fc1.weight")?,
            fc1_bias: g("mlp.fc1.bias")?,
            fc2_weight: g("mlp.fc2.weight")?,
            fc2_bias: g("mlp.fc2.bias")?,
        })
    }

    pub fn head(&self) -> Result<HeadWeights<'_>> {
        let branch = |name: &str| -> Result<Vec<ConvStage<'_>>> {
            (0..HEAD_STAGES)
                .map(|s| {
                    let pre = format!("head.{name}.{s}");
                    let norm = if s + 1 < HEAD_STAGES {
                        Some((
                            self.get(&format!("{pre}.norm.weight"))?,
                            self.get(&format!("{pre}.norm.bias"))?,
                        ))
                    } else {
                        None
                    };
                    Ok(ConvStage {
                        weight: self.get(&format!("{pre}.conv.weight"))?,
                        bias: self.get(&format!("{pre}.conv.bias"))?,
                        norm,
                    })
                })
                .collect()
        };
        Ok(HeadWeights {
            center: branch("center")?,
            offset: branch("offset")?,
            size: branch("size")?,
        })
    }

    /// Returns a copy with one tensor replaced (same shape required).
    pub fn with_tensor(&self, name: &str, tensor: Tensor) -> Result<Self> {
        let old = self.get(name)?;
        if old.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "replacement for {name} has shape {:?}, expected {:?}",
                tensor.shape(),
                old.shape()
            )));
        }
        let mut tensors = self.tensors.clone();
        tensors.insert(name.to_string(), tensor);
        WeightStore::from_tensors(self.config.clone(), tensors)
    }

    /// Top-down pruning: keeps the first `fe_layers + ai_layers` encoder
    /// layers and re-labels the stage split. Tensor buffers are shared.
    pub fn pruned(&self, fe_layers: usize, ai_layers: usize) -> Result<Self> {
        let keep = fe_layers + ai_layers;
        if keep > self.config.num_layers() {
            return Err(Error::Config(format!(
                "cannot keep {keep} layers of a {}-layer model",
                self.config.num_layers()
            )));
        }
        let config = self.config.with_layers(fe_layers, ai_layers);
        let tensors = self
            .tensors
            .iter()
            .filter(|(name, _)| match name.strip_prefix("blocks.") {
                Some(rest) => {
                    let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
                    idx < keep
                }
                None => true,
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        WeightStore::from_tensors(config, tensors)
    }

    /// SHA-256 over the configuration echo and every tensor's name, shape
    /// and little-endian data. Computed once.
    pub fn digest(&self) -> [u8; 32] {
        *self.digest.get_or_init(|| {
            let mut h = Sha256::new();
            h.update(self.config.to_kv_string().as_bytes());
            for (name, t) in &self.tensors {
                h.update(name.as_bytes());
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
            h.finalize().into()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            config: self.config.clone(),
            tensors: entries,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let manifest_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("manifest length exceeds file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            let len: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start
                .checked_add(4 * len)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Format(format!("tensor {} runs past end of payload", entry.name)))?;
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| Error::Format(e.to_string()))?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", entry.name)));
            }
        }
        WeightStore::from_tensors(manifest.config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        WeightStore::from_bytes(&bytes)
    }
}

/// Digest of a tensor's shape and contents.
pub fn tensor_digest(t: &Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_store_is_complete_and_initialized() {
        let cfg = ModelConfig::toy(1, 1);
        let w = WeightStore::generate(&cfg, 3).unwrap();
        assert_eq!(w.names().count(), required_shapes(&cfg).len());
        assert!(w.get("blocks.1.attn.q.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(w.get("blocks.0.norm2.weight").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(w.get("head.size.1.norm.weight").unwrap().data().iter().all(|&v| v == 1.0));
        let q = w.get("blocks.0.attn.q.weight").unwrap();
        let std = (q.data().iter().map(|v| (v * v) as f64).sum::<f64>() / q.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002, "std {std}");
    }

    #[test]
    fn same_seed_same_bytes_other_seed_differs() {
        let cfg = ModelConfig::toy(2, 1);
        let a = WeightStore::generate(&cfg, 7).unwrap().to_bytes();
        let b = WeightStore::generate(&cfg, 7).unwrap().to_bytes();
        let c = WeightStore::generate(&cfg, 8).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pruning_is_a_layer_prefix() {
        let deep = WeightStore::generate(&ModelConfig::toy(6, 3), 11).unwrap();
        let direct = WeightStore::generate(&ModelConfig::toy(2, 2), 11).unwrap();
        let pruned = deep.pruned(2, 2).unwrap();
        assert_eq!(pruned.to_bytes(), direct.to_bytes());
        assert!(deep.pruned(8, 2).is_err());
    }

    #[test]
    fn missing_and_extra_tensors_are_rejected() {
        let cfg = ModelConfig::toy(1, 0);
        let w = WeightStore::generate(&cfg, 1).unwrap();
        let mut map: BTreeMap<_, _> = w.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        map.insert("stray".into(), Tensor::zeros([1]));
        assert!(WeightStore::from_tensors(cfg.clone(), map.clone()).is_err());
        map.remove("stray");
        map.remove("norm.bias");
        assert!(WeightStore::from_tensors(cfg, map).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let w = WeightStore::generate(&ModelConfig::toy(1, 0), 1).unwrap();
        let bytes = w.to_bytes();
        assert!(WeightStore::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(WeightStore::from_bytes(&bad).is_err());
        assert!(WeightStore::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn with_tensor_checks_shape_and_changes_digest() {
        let w = WeightStore::generate(&ModelConfig::toy(1, 0), 1).unwrap();
        assert!(w.with_tensor("norm.bias", Tensor::zeros([3])).is_err());
        let w2 = w.with_tensor("norm.bias", Tensor::full([64], 0.5)).unwrap();
        assert_ne!(w.digest(), w2.digest());
    }
}
