//! LKMB model files: `"LKMB"`, version (u32 LE), header length (u64 LE),
//! a JSON header, then the concatenated little-endian `f32` tensor blobs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::ops::Mode;
use super::spec::NetworkSpec;
use super::tensor::Tensor4;
use crate::classic::ClassicHead;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LKMB";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;
const PREDICT_CHUNK: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// Early-stopping monitor at `best_epoch`.
    pub best_val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A network spec, its weights and training metadata, optionally with a
/// classical head fitted on the flatten-layer features.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub spec: NetworkSpec,
    /// Keyed `"{layer:03}.{param}"`.
    pub tensors: BTreeMap<String, StoredTensor>,
    pub meta: TrainMeta,
    pub head: Option<ClassicHead>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: NetworkSpec,
    tensors: BTreeMap<String, TensorEntry>,
    meta: TrainMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<ClassicHead>,
}

pub fn tensor_name(layer: usize, param: &str) -> String {
    format!("{layer:03}.{param}")
}

impl ModelBundle {
    pub fn from_network(net: &Network, meta: TrainMeta) -> Self {
        let mut tensors = BTreeMap::new();
        for (i, group) in net.params().iter().enumerate() {
            for p in group {
                tensors.insert(
                    tensor_name(i, p.name),
                    StoredTensor {
                        shape: p.shape.clone(),
                        data: p.data.iter().map(|&v| v as f32).collect(),
                    },
                );
            }
        }
        ModelBundle {
            spec: net.spec().clone(),
            tensors,
            meta,
            head: None,
        }
    }

    /// Rebuilds the network from the stored `f32` weights.
    pub fn to_network(&self) -> Result<Network> {
        let layout = self.spec.param_shapes()?;
        let mut used = 0;
        let mut values = Vec::with_capacity(layout.len());
        for (i, group) in layout.iter().enumerate() {
            let mut vals = Vec::with_capacity(group.len());
            for ps in group {
                let name = tensor_name(i, ps.name);
                let t = self
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::Bundle(format!("missing tensor {name}")))?;
                if t.shape != ps.shape {
                    return Err(Error::Bundle(format!(
                        "tensor {name} has shape {:?}, spec expects {:?}",
                        t.shape, ps.shape
                    )));
                }
                vals.push(t.data.iter().map(|&v| v as f64).collect());
                used += 1;
            }
            values.push(vals);
        }
        if used != self.tensors.len() {
            return Err(Error::Bundle(format!(
                "{} stored tensors, spec uses {used}",
                self.tensors.len()
            )));
        }
        Network::from_params(self.spec.clone(), values)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.data.len() * 4) as u64;
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape.clone(),
                    offset,
                    len,
                },
            );
            offset += len;
        }
        let header = Header {
            spec: self.spec.clone(),
            tensors: entries,
            meta: self.meta.clone(),
            head: self.head.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::MagicMismatch);
        }
        if bytes.len() < PREFIX_LEN {
            return Err(Error::TruncatedPayload);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
        let rest = &bytes[PREFIX_LEN..];
        if header_len > rest.len() as u64 {
            return Err(Error::TruncatedPayload);
        }
        let (json, blob) = rest.split_at(header_len as usize);
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Bundle(format!("header: {e}")))?;
        let mut tensors = BTreeMap::new();
        let mut expected_end = 0u64;
        for (name, entry) in header.tensors {
            let count: usize = entry.shape.iter().product();
            if entry.len != count as u64 * 4 {
                return Err(Error::Bundle(format!(
                    "tensor {name}: shape {:?} needs {} bytes, table says {}",
                    entry.shape,
                    count * 4,
                    entry.len
                )));
            }
            if entry.offset != expected_end {
                return Err(Error::Bundle(format!("tensor {name}: non-contiguous offset {}", entry.offset)));
            }
            let end = entry.offset + entry.len;
            if end > blob.len() as u64 {
                return Err(Error::TruncatedPayload);
            }
            let data = blob[entry.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            tensors.insert(name, StoredTensor { shape: entry.shape, data });
            expected_end = end;
        }
        if expected_end != blob.len() as u64 {
            return Err(Error::Bundle(format!(
                "{} trailing bytes after the last tensor",
                blob.len() as u64 - expected_end
            )));
        }
        let bundle = ModelBundle {
            spec: header.spec,
            tensors,
            meta: header.meta,
            head: header.head,
        };
        bundle.spec.validate()?;
        bundle.to_network()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Inference-mode network outputs: probability masks `[N,1,H,W]` for
/// segmentation, scores `[N,1,1,1]` for classification.
pub fn predict(bundle: &ModelBundle, inputs: &Tensor4) -> Result<Tensor4> {
    predict_with(&bundle.to_network()?, inputs)
}

pub fn predict_with(net: &Network, inputs: &Tensor4) -> Result<Tensor4> {
    let mut parts = Vec::with_capacity(inputs.n.div_ceil(PREDICT_CHUNK));
    let idx: Vec<usize> = (0..inputs.n).collect();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        parts.push(net.infer(&inputs.gather(chunk))?);
    }
    Tensor4::stack(&parts)
}

/// Flatten-layer activations, one row per input.
pub fn extract_features(bundle: &ModelBundle, inputs: &Tensor4) -> Result<Vec<Vec<f64>>> {
    extract_features_with(&bundle.to_network()?, inputs)
}

pub fn extract_features_with(net: &Network, inputs: &Tensor4) -> Result<Vec<Vec<f64>>> {
    let fi = net
        .spec()
        .flatten_index()
        .ok_or_else(|| Error::Shape("network has no flatten layer".into()))?;
    let mut rows = Vec::with_capacity(inputs.n);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let idx: Vec<usize> = (0..inputs.n).collect();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let pass = net.forward(&inputs.gather(chunk), Mode::Infer, &mut rng, Some(fi))?;
        let out = pass.output();
        rows.extend((0..out.n).map(|i| out.sample(i).to_vec()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::spec::build_mini_cnn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_bundle() -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = build_mini_cnn([1, 8, 8], &[2, 3], 4, true).unwrap();
        let net = Network::init(spec, &mut rng).unwrap();
        ModelBundle::from_network(
            &net,
            TrainMeta {
                seed: 9,
                epochs_run: 3,
                best_epoch: 2,
                best_val_loss: Some(0.1 + 0.2),
                notes: BTreeMap::new(),
            },
        )
    }

    #[test]
    fn save_load_save_is_a_fixpoint() {
        let b = sample_bundle();
        let bytes = b.to_bytes().unwrap();
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn predictions_survive_round_trip() {
        let b = sample_bundle();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::from_vec(3, 1, 8, 8, (0..192).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let before = predict(&b, &x).unwrap();
        let after = predict(&ModelBundle::from_bytes(&b.to_bytes().unwrap()).unwrap(), &x).unwrap();
        assert_eq!(before, after);
        assert_eq!(predict(&b, &x).unwrap(), before);
        assert!(before.data.iter().all(|&p| p > 0.0 && p < 1.0));
        let feats = extract_features(&b, &x).unwrap();
        assert_eq!(feats.len(), 3);
        assert_eq!(feats[0].len(), 3 * 2 * 2);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample_bundle().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(ModelBundle::from_bytes(&bad).unwrap_err().to_string(), "magic mismatch");
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(ModelBundle::from_bytes(&bad), Err(Error::UnsupportedVersion(7))));
        let short = &bytes[..bytes.len() - 4];
        assert_eq!(ModelBundle::from_bytes(short).unwrap_err().to_string(), "truncated payload");
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(ModelBundle::from_bytes(&long), Err(Error::Bundle(_))));
        assert!(ModelBundle::from_bytes(&bytes[..10]).is_err());
    }
}
