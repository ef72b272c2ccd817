//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MXCKPT\0\0"
//! version  u32      1
//! desc_len u32, then desc_len bytes of JSON {backbone, exits, class_count}
//! count    u32      number of parameter tensors
//! per tensor: rank u32, rank x u64 dims, prod(dims) x f64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneSpec, MultiExitNet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"MXCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    backbone: BackboneSpec,
    exits: Vec<usize>,
    class_count: usize,
}

impl MultiExitNet {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let desc = serde_json::to_vec(&Descriptor {
            backbone: self.backbone.clone(),
            exits: self.exits.clone(),
            class_count: self.class_count,
        })?;
        let mut out = Vec::with_capacity(
            32 + desc.len() + self.params.iter().map(|p| 8 * p.len() + 40).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(&desc);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(format_error(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_error(8, format!("unsupported version {version}")));
        }
        let desc_len = r.u32()? as usize;
        let desc_at = r.pos;
        let desc: Descriptor = serde_json::from_slice(r.take(desc_len)?)
            .map_err(|e| format_error(desc_at, format!("bad descriptor: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(format_error(r.pos - 4, format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| {
                    format_error(
                        r.pos,
                        format!(
                            "tensor of shape {shape:?} exceeds the {} remaining bytes",
                            bytes.len() - r.pos
                        ),
                    )
                })?;
            let data = (0..n)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(format_error(
                r.pos,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        MultiExitNet::new(desc.backbone, desc.exits, desc.class_count, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

fn format_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_error(
                self.pos,
                format!(
                    "truncated: expected {n} more bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiexit::Activation;

    fn net() -> MultiExitNet {
        let spec = BackboneSpec::dense(5, &[7, 7, 7], Activation::Tanh);
        MultiExitNet::build_evenly_partitioned(spec, 3, 3, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = n.to_checkpoint_bytes().unwrap();
        let back = MultiExitNet::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, n);
        assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let mut bytes = net().to_checkpoint_bytes().unwrap();
        let err = MultiExitNet::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset > 0), "{err}");
        bytes[0] = b'X';
        let err = MultiExitNet::from_checkpoint_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = net().to_checkpoint_bytes().unwrap();
        bytes.push(0);
        assert!(MultiExitNet::from_checkpoint_bytes(&bytes).is_err());
    }
}
