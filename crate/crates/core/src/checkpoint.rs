//! `SSMR` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSMR"  u16 version
//! u32 config_len, config_len bytes of UTF-8 `key=value` lines
//! u32 tensor_count
//! per tensor: u16 name_len, name, u8 rank, rank x u32 dims, f32 data
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SSMR";
pub const VERSION: u16 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = model.config().to_kv();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::CheckpointTruncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::CheckpointMagic(magic));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config = std::str::from_utf8(r.take(config_len, "config block")?)
        .map_err(|_| Error::CheckpointContent("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(config)
        .map_err(|e| Error::CheckpointContent(format!("config block: {e}")))?;
    let mut model = Model::build(config)?;

    let count = r.u32("tensor count")? as usize;
    let mut table: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::CheckpointContent("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dims")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CheckpointContent(format!("tensor {name:?} dims {dims:?} overflow")))?;
        let raw = r.take(numel, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CheckpointContent(format!("tensor {name:?} holds non-finite values")));
        }
        let tensor = Tensor::new(dims, data)
            .map_err(|e| Error::CheckpointContent(format!("tensor {name:?}: {e}")))?;
        if table.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        table.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointContent(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - r.pos
        )));
    }

    let mut values = Vec::with_capacity(model.params().len());
    for p in model.params() {
        let t = table
            .remove(&p.name)
            .ok_or_else(|| Error::CheckpointContent(format!("missing tensor {:?}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::CheckpointContent(format!(
                "tensor {:?} has shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        values.push(t);
    }
    if let Some(extra) = table.keys().min() {
        return Err(Error::CheckpointContent(format!("unknown tensor {extra:?}")));
    }
    model.set_params(values)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn small() -> Model {
        Model::build(ModelConfig {
            arch: Arch::VssmHier,
            image_size: 8,
            patch_size: 2,
            in_channels: 1,
            depths: vec![1, 1],
            dims: vec![4, 6],
            n_state: 2,
            n_classes: 3,
            window: 2,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
        assert_eq!(to_bytes(&back), to_bytes(&m));
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = to_bytes(&small());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::CheckpointMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
        assert!(matches!(
            from_bytes(&good[..good.len() - 3]),
            Err(Error::CheckpointTruncated("tensor data"))
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::CheckpointContent(_))));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let m = small();
        let mut bytes = to_bytes(&m);
        // Rename a tensor to the name of an earlier one with equal name length and shape.
        let ps = m.params();
        let (first, second) = ps
            .iter()
            .enumerate()
            .flat_map(|(i, a)| ps[i + 1..].iter().map(move |b| (a, b)))
            .find(|(a, b)| a.name.len() == b.name.len() && a.value.shape() == b.value.shape())
            .map(|(a, b)| (a.name.clone(), b.name.clone()))
            .unwrap();
        let at = bytes
            .windows(second.len())
            .position(|w| w == second.as_bytes())
            .unwrap();
        bytes[at..at + first.len()].copy_from_slice(first.as_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::DuplicateTensor(n)) if n == first));
    }
}
