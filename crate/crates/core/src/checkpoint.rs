//! Single-file model bundles.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a TOML
//! header (configs plus a tensor manifest), the tensors as little-endian
//! `f32`, and a trailing SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::Direction;
use crate::encoder::EncoderConfig;
use crate::error::{CpcError, Result};
use crate::geometry::GridSpec;
use crate::nn::Stateful;
use crate::trainer::{ModelBundle, TrainConfig};

pub const MAGIC: &[u8; 8] = b"CPCADBND";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Value,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    unit: usize,
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    /// Offset into the data section, in floats.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct UnitEntry {
    directions: Vec<Direction>,
    adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    class_name: String,
    epochs_completed: usize,
    loss_history: Vec<Vec<f64>>,
    grid: GridSpec,
    encoder: EncoderConfig,
    train: TrainConfig,
    units: Vec<UnitEntry>,
    tensors: Vec<TensorEntry>,
}

fn format_err(msg: impl Into<String>) -> CpcError {
    CpcError::CheckpointFormat(msg.into())
}

pub fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut tensors = Vec::new();
    let mut data: Vec<f32> = Vec::new();
    let mut push = |unit: usize, name: &str, kind: TensorKind, shape: &[usize], values: &[f32]| {
        tensors.push(TensorEntry {
            unit,
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
            offset: data.len(),
        });
        data.extend_from_slice(values);
    };
    for (u, unit) in bundle.units.iter().enumerate() {
        for (name, p) in unit.named_state() {
            push(u, &name, TensorKind::Value, &p.shape, &p.value);
            if let Some((m, v)) = unit.optimizer.moments.get(&name) {
                push(u, &name, TensorKind::AdamFirst, &p.shape, m);
                push(u, &name, TensorKind::AdamSecond, &p.shape, v);
            }
        }
    }
    let header = Header {
        class_name: bundle.class_name.clone(),
        epochs_completed: bundle.epochs_completed,
        loss_history: bundle.loss_history.clone(),
        grid: bundle.grid,
        encoder: bundle.encoder_config,
        train: bundle.train_config.clone(),
        units: bundle
            .units
            .iter()
            .map(|u| UnitEntry {
                directions: u.directions(),
                adam_step: u.optimizer.step,
            })
            .collect(),
        tensors,
    };
    let text = toml::to_string(&header).map_err(|e| format_err(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + text.len() + data.len() * 4 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in &data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(format_err("not a model bundle (bad magic or too short)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CpcError::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(format_err("checksum mismatch (truncated or corrupted file)"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &body[20..];
    if header_len > rest.len() {
        return Err(format_err("header length exceeds file size"));
    }
    let text = std::str::from_utf8(&rest[..header_len]).map_err(|e| format_err(e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| format_err(format!("header: {e}")))?;
    let raw = &rest[header_len..];
    if raw.len() % 4 != 0 {
        return Err(format_err("data section is not a whole number of floats"));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut bundle = ModelBundle::new(&header.class_name, header.grid, header.encoder, header.train)?;
    if bundle.units.len() != header.units.len() {
        return Err(format_err(format!(
            "header lists {} units, configuration implies {}",
            header.units.len(),
            bundle.units.len()
        )));
    }
    let mut by_key: BTreeMap<(usize, &str, TensorKind), &TensorEntry> = BTreeMap::new();
    for t in &header.tensors {
        let len: usize = t.shape.iter().product();
        if t.offset + len > data.len() {
            return Err(format_err(format!("tensor {} runs past the data section", t.name)));
        }
        by_key.insert((t.unit, t.name.as_str(), t.kind), t);
    }
    let mut used = 0usize;
    for (u, (unit, entry)) in bundle.units.iter_mut().zip(&header.units).enumerate() {
        if unit.directions() != entry.directions {
            return Err(format_err(format!("unit {u} direction mismatch")));
        }
        unit.optimizer.step = entry.adam_step;
        let mut moments = BTreeMap::new();
        for (name, p) in unit.named_state_mut() {
            let slice = |kind| {
                by_key.get(&(u, name.as_str(), kind)).map(|t| {
                    let len: usize = t.shape.iter().product();
                    (t.shape.clone(), data[t.offset..t.offset + len].to_vec())
                })
            };
            let (shape, value) = slice(TensorKind::Value)
                .ok_or_else(|| format_err(format!("missing tensor {name} for unit {u}")))?;
            if shape != p.shape {
                return Err(format_err(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    p.shape
                )));
            }
            p.value = value;
            p.zero_grad();
            used += 1;
            match (slice(TensorKind::AdamFirst), slice(TensorKind::AdamSecond)) {
                (Some((_, m)), Some((_, v))) if m.len() == p.value.len() && v.len() == p.value.len() => {
                    moments.insert(name.clone(), (m, v));
                    used += 2;
                }
                (None, None) => {}
                _ => return Err(format_err(format!("incomplete optimizer state for {name}"))),
            }
        }
        unit.optimizer.moments = moments;
    }
    if used != header.tensors.len() {
        return Err(format_err("bundle contains tensors this model does not have"));
    }
    bundle.epochs_completed = header.epochs_completed;
    bundle.loss_history = header.loss_history;
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = encode_bundle(bundle)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CpcError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CpcError::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| CpcError::io(path, e))?;
    decode_bundle(&bytes)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, DefectKind, SynthDefectConfig, TextureKind};
    use crate::encoder::Backbone;
    use crate::trainer::train_class;

    pub(crate) fn small_bundle(directions: Vec<Direction>, epochs: usize) -> ModelBundle {
        let split = generate_synthetic(
            &SynthDefectConfig {
                texture_kind: TextureKind::Checker,
                defect_kind: DefectKind::IntensityShift,
                defect_size_range: [0.2, 0.3],
                n_train: 3,
                n_test_normal: 1,
                n_test_anomalous: 1,
                seed: 8,
            },
            32,
        )
        .unwrap();
        let grid = GridSpec::new(32, 16, 8, 8, 4);
        let enc = EncoderConfig {
            backbone: Backbone::SmallCnn,
            embedding_dim: 8,
            input_side: 8,
        };
        let cfg = TrainConfig {
            epochs,
            batch_size: 2,
            negatives: 4,
            seed: 21,
            offsets: vec![2],
            directions,
            ..TrainConfig::default()
        };
        train_class(&split, grid, enc, cfg).unwrap()
    }

    fn assert_same(a: &ModelBundle, b: &ModelBundle) {
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.epochs_completed, b.epochs_completed);
        assert_eq!(a.train_config, b.train_config);
        for (ua, ub) in a.units.iter().zip(&b.units) {
            assert_eq!(ua.optimizer, ub.optimizer);
            for ((na, pa), (nb, pb)) in ua.named_state().into_iter().zip(ub.named_state()) {
                assert_eq!(na, nb);
                assert_eq!(pa.value, pb.value);
            }
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let b = small_bundle(Direction::ALL.to_vec(), 1);
        let back = decode_bundle(&encode_bundle(&b).unwrap()).unwrap();
        assert_same(&b, &back);
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = encode_bundle(&small_bundle(vec![Direction::FromLeft], 1)).unwrap();
        for cut in [0, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_bundle(&bytes[..cut]), Err(CpcError::CheckpointFormat(_))));
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x40;
        assert!(matches!(decode_bundle(&flipped), Err(CpcError::CheckpointFormat(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut bytes = encode_bundle(&small_bundle(vec![Direction::FromLeft], 1)).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_bundle(&bytes),
            Err(CpcError::CheckpointVersion { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.cpcad");
        let b = small_bundle(vec![Direction::FromBelow, Direction::FromRight], 1);
        save_bundle(&b, &path).unwrap();
        assert_same(&b, &load_bundle(&path).unwrap());
    }
}
