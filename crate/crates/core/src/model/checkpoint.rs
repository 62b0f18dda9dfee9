//! Binary checkpoint format.
//!
//! ```text
//! magic    b"HSSN"
//! version  u16
//! config   u32 byte length, then canonical key-sorted JSON of the ModelConfig
//! count    u32
//! entries  count x { name: u32 length + UTF-8, rank: u32, dims: rank x u32,
//!                    data: product(dims) x f32 }
//! ```
//!
//! All integers and floats are little-endian. Entries are the parameters in
//! model order followed by the running mean/variance of every style head.

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSSN";
pub const CHECKPOINT_VERSION: u16 = 1;

fn running_names(j: usize) -> (String, String) {
    (
        format!("tap{j}.bn.running_mean"),
        format!("tap{j}.bn.running_var"),
    )
}

fn write_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend((*d as u32).to_le_bytes());
    }
    for x in data {
        out.extend(x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))
    }
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.canonical_json();
        out.extend((cfg.len() as u32).to_le_bytes());
        out.extend(cfg.as_bytes());
        let count = self.params.len() + 2 * self.running.len();
        out.extend((count as u32).to_le_bytes());
        for p in &self.params {
            write_entry(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
        }
        for (j, rs) in self.running.iter().enumerate() {
            let (mean, var) = running_names(j);
            write_entry(&mut out, &mean, &[rs.mean.len()], &rs.mean);
            write_entry(&mut out, &var, &[rs.var.len()], &rs.var);
        }
        out
    }

    /// Restores a model, using the embedded config unless `expected` is
    /// given, in which case every stored tensor must fit that config.
    pub fn from_checkpoint_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not an HSSN checkpoint".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let stored: ModelConfig = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let config = expected.cloned().unwrap_or(stored);
        let mut model = Model::zeroed(config)?;
        let count = r.u32()? as usize;
        let expected_count = model.params.len() + 2 * model.running.len();
        let mut seen = vec![false; expected_count];
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (slot, target_shape, target): (usize, Vec<usize>, &mut [f32]) =
                if let Some(i) = model.params.iter().position(|p| p.name == name) {
                    let t = &mut model.params[i].tensor;
                    (i, t.shape().to_vec(), t.data_mut())
                } else if let Some((j, is_var)) = (0..model.running.len()).find_map(|j| {
                    let (m, v) = running_names(j);
                    (name == m).then_some((j, false)).or((name == v).then_some((j, true)))
                }) {
                    let rs = &mut model.running[j];
                    let buf = if is_var { &mut rs.var } else { &mut rs.mean };
                    let slot = model.params.len() + 2 * j + is_var as usize;
                    (slot, vec![buf.len()], buf.as_mut_slice())
                } else {
                    return Err(Error::Checkpoint(format!(
                        "entry {name} has no counterpart in the model config"
                    )));
                };
            if shape != target_shape {
                return Err(Error::Checkpoint(format!(
                    "shape conflict for {name}: checkpoint has {shape:?}, config expects {target_shape:?}"
                )));
            }
            target.copy_from_slice(&data);
            seen[slot] = true;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = if missing < model.params.len() {
                model.params[missing].name.clone()
            } else {
                let j = (missing - model.params.len()) / 2;
                running_names(j).0
            };
            return Err(Error::Checkpoint(format!("missing entry {name}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| Error::DataIo {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_checkpoint_bytes(&bytes, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            blocks: vec![BlockConfig::new(2, 3, true), BlockConfig::new(3, 1, false)],
            tap_indices: vec![0, 1],
            embedding_dim: 4,
            style_out_dim: 3,
            input_shape: [1, 4, 4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::new(cfg(), 5).unwrap();
        m.running_stats_mut()[1].mean[2] = 0.25;
        let bytes = m.to_checkpoint_bytes();
        let back = Model::from_checkpoint_bytes(&bytes, None).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.running_stats(), m.running_stats());
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let m = Model::new(cfg(), 0).unwrap();
        let bytes = m.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"HSSN");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[10..10 + len]).unwrap();
        assert_eq!(json, m.config().canonical_json());
        let count = u32::from_le_bytes(bytes[10 + len..14 + len].try_into().unwrap());
        assert_eq!(count as usize, m.params().len() + 4);
    }

    #[test]
    fn mismatched_config_names_the_conflict() {
        let m = Model::new(cfg(), 0).unwrap();
        let mut other = cfg();
        other.blocks[0].out_channels = 5;
        let err = Model::from_checkpoint_bytes(&m.to_checkpoint_bytes(), Some(&other))
            .unwrap_err()
            .to_string();
        assert!(err.contains("block0.conv.weight") && err.contains("[2, 1, 3, 3]"), "{err}");
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = Model::new(cfg(), 0).unwrap();
        let bytes = m.to_checkpoint_bytes();
        assert!(Model::from_checkpoint_bytes(&bytes[..bytes.len() - 1], None).is_err());
        assert!(Model::from_checkpoint_bytes(b"NOPE\x01\x00", None).is_err());
    }
}
