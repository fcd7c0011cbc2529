//! Named-tensor model archive.
//!
//! Layout: a little-endian u64 manifest length, a JSON manifest, then
//! raw f32 little-endian tensor payloads. The manifest records the
//! model role and network shape plus one entry per tensor with its
//! name, shape, dtype, and byte offset into the payload region.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DebfaceError, Result};
use crate::netcore::{AggregatorParams, EncoderParams, HeadParams, NetConfig};
use crate::nn::Linear;
use crate::trainloop::{Mode, TrainState};

const FORMAT: &str = "debface-checkpoint";
const VERSION: u32 = 1;
const DTYPE_F32: &str = "f32";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    mode: Mode,
    net: NetConfig,
    tensors: Vec<TensorEntry>,
}

/// A trained model as stored on disk: encoder plus heads, and the
/// aggregator when one was trained on top.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub net: NetConfig,
    pub mode: Mode,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
    pub aggregator: Option<AggregatorParams>,
}

impl ModelCheckpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            net: state.net.clone(),
            mode: state.mode,
            encoder: state.encoder.clone(),
            heads: state.heads.clone(),
            aggregator: state.aggregator.clone(),
        }
    }

    /// Error with the stored role when it does not match the expected one.
    pub fn require_mode(&self, expected: Mode) -> Result<()> {
        let ok = match expected {
            Mode::Aggregator => self.mode == Mode::Aggregator,
            other => self.mode == other,
        };
        if !ok {
            return Err(DebfaceError::StateMismatch(format!(
                "checkpoint holds a {} model, expected {}",
                self.mode, expected
            )));
        }
        Ok(())
    }
}

fn collect_linear(tensors: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: &str, l: &Linear) {
    tensors.push((
        format!("{name}.w"),
        l.w.shape().to_vec(),
        l.w.iter().map(|v| *v as f32).collect(),
    ));
    tensors.push((
        format!("{name}.b"),
        l.b.shape().to_vec(),
        l.b.iter().map(|v| *v as f32).collect(),
    ));
}

fn collect_tensors(ckpt: &ModelCheckpoint) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut t = Vec::new();
    for (i, c) in ckpt.encoder.convs.iter().enumerate() {
        t.push((
            format!("encoder.conv{i}.w"),
            c.w.shape().to_vec(),
            c.w.iter().map(|v| *v as f32).collect(),
        ));
        t.push((
            format!("encoder.conv{i}.b"),
            c.b.shape().to_vec(),
            c.b.iter().map(|v| *v as f32).collect(),
        ));
    }
    collect_linear(&mut t, "encoder.fc", &ckpt.encoder.fc);
    collect_linear(&mut t, "heads.gender", &ckpt.heads.gender);
    collect_linear(&mut t, "heads.age", &ckpt.heads.age);
    collect_linear(&mut t, "heads.race", &ckpt.heads.race);
    t.push((
        "heads.identity".into(),
        ckpt.heads.identity.shape().to_vec(),
        ckpt.heads.identity.iter().map(|v| *v as f32).collect(),
    ));
    collect_linear(&mut t, "heads.distr.l1", &ckpt.heads.distr.l1);
    collect_linear(&mut t, "heads.distr.l2", &ckpt.heads.distr.l2);
    if let Some(agg) = &ckpt.aggregator {
        collect_linear(&mut t, "aggregator.proj", &agg.proj);
        for (i, u) in agg.units.iter().enumerate() {
            collect_linear(&mut t, &format!("aggregator.unit{i}.l1"), &u.l1);
            collect_linear(&mut t, &format!("aggregator.unit{i}.l2"), &u.l2);
            t.push((
                format!("aggregator.unit{i}.prelu"),
                vec![],
                vec![u.prelu as f32],
            ));
        }
    }
    t
}

pub fn save_model(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    let tensors = collect_tensors(ckpt);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: DTYPE_F32.into(),
            offset,
        });
        offset += (data.len() * 4) as u64;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        mode: ckpt.mode,
        net: ckpt.net.clone(),
        tensors: entries,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| DebfaceError::Config(e.to_string()))?;
    let mut f = File::create(path).map_err(|e| DebfaceError::io(path, e))?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(|e| DebfaceError::io(path, e))?;
    f.write_all(&manifest_bytes)
        .map_err(|e| DebfaceError::io(path, e))?;
    for (_, _, data) in &tensors {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes).map_err(|e| DebfaceError::io(path, e))?;
    }
    Ok(())
}

struct Payload<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    entries: std::collections::BTreeMap<String, (Vec<usize>, u64)>,
}

impl Payload<'_> {
    fn tensor(&self, name: &str, expect_shape: &[usize]) -> Result<Vec<f64>> {
        let (shape, offset) = self
            .entries
            .get(name)
            .ok_or_else(|| DebfaceError::Malformed {
                path: self.path.to_path_buf(),
                reason: format!("missing tensor `{name}`"),
            })?;
        if shape != expect_shape {
            return Err(DebfaceError::Malformed {
                path: self.path.to_path_buf(),
                reason: format!("tensor `{name}` has shape {shape:?}, expected {expect_shape:?}"),
            });
        }
        let len: usize = shape.iter().product();
        let start = *offset as usize;
        let end = start + len * 4;
        if end > self.bytes.len() {
            return Err(DebfaceError::Malformed {
                path: self.path.to_path_buf(),
                reason: format!("tensor `{name}` extends past end of payload"),
            });
        }
        Ok(self.bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn fill_linear(&self, name: &str, l: &mut Linear) -> Result<()> {
        let w = self.tensor(&format!("{name}.w"), l.w.shape())?;
        let b = self.tensor(&format!("{name}.b"), l.b.shape())?;
        l.w = Array2::from_shape_vec(l.w.raw_dim(), w).unwrap();
        l.b = Array1::from_vec(b);
        Ok(())
    }
}

pub fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    if !path.exists() {
        return Err(DebfaceError::MissingArtifact(path.to_path_buf()));
    }
    let mut f = File::open(path).map_err(|e| DebfaceError::io(path, e))?;
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|e| DebfaceError::io(path, e))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)
        .map_err(|e| DebfaceError::io(path, e))?;
    if rest.len() < manifest_len {
        return Err(DebfaceError::Malformed {
            path: path.to_path_buf(),
            reason: "truncated manifest".into(),
        });
    }
    let manifest: Manifest =
        serde_json::from_slice(&rest[..manifest_len]).map_err(|e| DebfaceError::Malformed {
            path: path.to_path_buf(),
            reason: format!("manifest parse error: {e}"),
        })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(DebfaceError::Malformed {
            path: path.to_path_buf(),
            reason: format!(
                "unsupported format `{}` version {}",
                manifest.format, manifest.version
            ),
        });
    }
    for t in &manifest.tensors {
        if t.dtype != DTYPE_F32 {
            return Err(DebfaceError::Malformed {
                path: path.to_path_buf(),
                reason: format!("tensor `{}` has unsupported dtype `{}`", t.name, t.dtype),
            });
        }
    }
    let payload = Payload {
        path,
        bytes: rest[manifest_len..].to_vec(),
        entries: manifest
            .tensors
            .iter()
            .map(|t| (t.name.clone(), (t.shape.clone(), t.offset)))
            .collect(),
    };

    let out_blocks = match manifest.mode {
        Mode::Baseface => 1,
        _ => 4,
    };
    // Build parameter skeletons with the right shapes, then overwrite.
    let mut encoder = EncoderParams::init(&manifest.net, out_blocks, 0);
    for (i, c) in encoder.convs.iter_mut().enumerate() {
        let w = payload.tensor(&format!("encoder.conv{i}.w"), c.w.shape())?;
        let b = payload.tensor(&format!("encoder.conv{i}.b"), c.b.shape())?;
        c.w = Array2::from_shape_vec(c.w.raw_dim(), w).unwrap();
        c.b = Array1::from_vec(b);
    }
    payload.fill_linear("encoder.fc", &mut encoder.fc)?;

    let mut heads = HeadParams::init(&manifest.net, 0);
    payload.fill_linear("heads.gender", &mut heads.gender)?;
    payload.fill_linear("heads.age", &mut heads.age)?;
    payload.fill_linear("heads.race", &mut heads.race)?;
    let idw = payload.tensor("heads.identity", heads.identity.shape())?;
    heads.identity = Array2::from_shape_vec(heads.identity.raw_dim(), idw).unwrap();
    payload.fill_linear("heads.distr.l1", &mut heads.distr.l1)?;
    payload.fill_linear("heads.distr.l2", &mut heads.distr.l2)?;

    let aggregator = if payload.entries.keys().any(|k| k.starts_with("aggregator.")) {
        let mut agg = AggregatorParams::init(manifest.net.block_dim, 0);
        payload.fill_linear("aggregator.proj", &mut agg.proj)?;
        for (i, u) in agg.units.iter_mut().enumerate() {
            payload.fill_linear(&format!("aggregator.unit{i}.l1"), &mut u.l1)?;
            payload.fill_linear(&format!("aggregator.unit{i}.l2"), &mut u.l2)?;
            u.prelu = payload.tensor(&format!("aggregator.unit{i}.prelu"), &[])?[0];
        }
        Some(agg)
    } else {
        None
    };

    Ok(ModelCheckpoint {
        net: manifest.net,
        mode: manifest.mode,
        encoder,
        heads,
        aggregator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::PoolKind;
    use std::collections::BTreeMap;

    fn tiny_net() -> NetConfig {
        NetConfig {
            in_channels: 3,
            in_height: 8,
            in_width: 8,
            block_dim: 4,
            conv_channels: vec![4],
            pool: PoolKind::Flatten,
            distr_hidden: 6,
            k_gender: 2,
            k_age: 3,
            k_race: 3,
            num_identities: 5,
        }
    }

    fn tiny_state(mode: Mode) -> TrainState {
        let ids: BTreeMap<usize, usize> = (0..5).map(|i| (i, i)).collect();
        TrainState::init(&tiny_net(), mode, 7, ids)
    }

    #[test]
    fn round_trip_preserves_every_tensor_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut state = tiny_state(Mode::Debface);
        state.aggregator = Some(AggregatorParams::init(4, 3));
        let ckpt = ModelCheckpoint::from_state(&state);
        save_model(&path, &ckpt).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.mode, Mode::Debface);
        assert_eq!(loaded.net, ckpt.net);
        let as_f32 = |a: &Array2<f64>| a.mapv(|v| v as f32 as f64);
        assert_eq!(as_f32(&loaded.encoder.fc.w), as_f32(&ckpt.encoder.fc.w));
        assert_eq!(
            as_f32(&loaded.encoder.convs[0].w),
            as_f32(&ckpt.encoder.convs[0].w)
        );
        assert_eq!(as_f32(&loaded.heads.identity), as_f32(&ckpt.heads.identity));
        assert_eq!(
            as_f32(&loaded.aggregator.as_ref().unwrap().proj.w),
            as_f32(&ckpt.aggregator.as_ref().unwrap().proj.w)
        );
        let lp = loaded.aggregator.as_ref().unwrap().units[0].prelu;
        let cp = ckpt.aggregator.as_ref().unwrap().units[0].prelu;
        assert_eq!(lp as f32, cp as f32);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = ModelCheckpoint::from_state(&tiny_state(Mode::Baseface));
        save_model(&p1, &ckpt).unwrap();
        save_model(&p2, &ckpt).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn provenance_mismatch_is_an_error() {
        let ckpt = ModelCheckpoint::from_state(&tiny_state(Mode::Baseface));
        assert!(ckpt.require_mode(Mode::Baseface).is_ok());
        assert!(matches!(
            ckpt.require_mode(Mode::Debface),
            Err(DebfaceError::StateMismatch(_))
        ));
    }

    #[test]
    fn missing_and_corrupt_files_error_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.ckpt");
        assert!(matches!(
            load_model(&missing),
            Err(DebfaceError::MissingArtifact(_))
        ));
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"not a checkpoint at all....").unwrap();
        assert!(load_model(&bad).is_err());
    }
}
