//! Single-file checkpoints: JSON manifest plus named little-endian tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ADRECKPT"  u32 version  u64 manifest_len  manifest JSON
//! u32 tensor_count
//! repeat: u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 values[Π dims]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{AdRec, ModelConfig};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"ADRECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub num_items: usize,
    /// `init`, `stage1`, `stage2` or `stage3`.
    pub stage: String,
    pub seed: u64,
    pub epoch: usize,
    pub val_metric: Option<f64>,
    /// Hash of everything that determines this stage's result.
    pub fingerprint: String,
    pub dataset_hash: String,
}

pub fn encode(manifest: &CheckpointManifest, store: &ParamStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
    let mut out = Vec::with_capacity(store.num_scalars() * 8 + json.len() + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint into its manifest and raw named tensors.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointManifest, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = r.u64()? as usize;
    let manifest: CheckpointManifest =
        serde_json::from_slice(r.take(mlen)?).map_err(|e| Error::json("checkpoint manifest", e))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok((manifest, store))
}

pub fn save(path: &Path, manifest: &CheckpointManifest, store: &ParamStore) -> Result<()> {
    let bytes = encode(manifest, store)?;
    let tmp = path.with_extension("ckpt.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read(path: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Copy the named tensors of `raw` into `store`, checking names and shapes.
pub fn restore_into(store: &mut ParamStore, raw: &ParamStore) -> Result<()> {
    if raw.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, the model has {}",
            raw.len(),
            store.len()
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = raw
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let src = raw.get(src);
        if src.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                src.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = src.clone();
    }
    Ok(())
}

/// Load a checkpoint and rebuild the model it describes.
pub fn load_model(path: &Path) -> Result<(AdRec, ParamStore, CheckpointManifest)> {
    let (manifest, raw) = read(path)?;
    let (model, mut store) = AdRec::new(&manifest.model, manifest.num_items, 0)?;
    restore_into(&mut store, &raw)?;
    Ok((model, store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (CheckpointManifest, ParamStore) {
        let cfg = ModelConfig {
            dim: 4,
            ffn_dim: 8,
            max_len: 3,
            diffusion_steps: 2,
            ..ModelConfig::default()
        };
        let (_, store) = AdRec::new(&cfg, 5, 1).unwrap();
        let m = CheckpointManifest {
            model: cfg,
            num_items: 5,
            stage: "stage1".into(),
            seed: 1,
            epoch: 10,
            val_metric: Some(0.25),
            fingerprint: "abc".into(),
            dataset_hash: "def".into(),
        };
        (m, store)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (m, store) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&p, &m, &store).unwrap();
        let (model, loaded, m2) = load_model(&p).unwrap();
        assert_eq!(m2, m);
        assert_eq!(loaded, store);
        assert_eq!(model.num_items(), 5);
        let q = dir.path().join("b.ckpt");
        save(&q, &m2, &loaded).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (m, store) = tiny();
        let bytes = encode(&m, &store).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (_, store) = tiny();
        let mut raw = store.clone();
        let id = raw.find("tmlp.out.bias").unwrap();
        *raw.get_mut(id) = Tensor::zeros(&[3]);
        let mut target = store.clone();
        let err = restore_into(&mut target, &raw).unwrap_err().to_string();
        assert!(err.contains("tmlp.out.bias"), "{err}");
    }
}
