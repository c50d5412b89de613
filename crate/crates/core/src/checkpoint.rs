//! Binary parameter container.
//!
//! Layout (all integers little-endian `u64`):
//!
//! ```text
//! "DSTR1" | topology length | topology UTF-8 | entry count
//! entry := name length | name bytes | rank | extents[rank] | f32 LE values
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{build_small_cam_net, Model, Topology};

pub const MAGIC: &[u8; 5] = b"DSTR1";

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let params = model.params();
    let topology = model.topology().to_string();
    let mut out = Vec::with_capacity(64 + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, topology.len() as u64);
    out.extend_from_slice(topology.as_bytes());
    put_u64(&mut out, params.len() as u64);
    for (name, tensor) in params {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, tensor.rank() as u64);
        for &d in tensor.shape() {
            put_u64(&mut out, d as u64);
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a DSTR1 checkpoint".into()));
    }
    let topo_len = r.len_field()?;
    let topology: Topology = std::str::from_utf8(r.take(topo_len)?)
        .map_err(|_| Error::Checkpoint("topology is not UTF-8".into()))?
        .parse()?;
    let count = r.len_field()?;
    let mut values = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.len_field()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.len_field()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len_field()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("extents of `{name}` overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        values.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut model = build_small_cam_net(topology.in_channels, topology.num_classes, 0)?;
    if let Some(size) = topology.input_size {
        model.set_input_size(size);
    }
    model.load_params(values)?;
    Ok(model)
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Hex SHA-256 of a byte string; used to compare checkpoints and datasets.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len_field(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }
}
