//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DERC"                     magic
//! u32                        format version
//! u32 + bytes                config block (JSON: model config and loss mode)
//! u32                        manifest entry count
//! per entry: u32 + bytes     tensor name
//!            u32             rank
//!            u64 * rank      extents
//! f64 * Σ extents            parameter blob in manifest order
//! ```

use super::{ModelConfig, ModelParams, ParamLayout};
use crate::distributions::LossMode;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DERC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model together with the objective it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub loss_mode: LossMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    model: ModelConfig,
    loss_mode: LossMode,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let block = ConfigBlock { model: self.params.config().clone(), loss_mode: self.loss_mode };
        let json = serde_json::to_vec(&block).expect("config block serializes");
        put_bytes(&mut out, &json);
        let layout = self.params.layout();
        out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
        for (name, t) in layout.names().iter().zip(self.params.tensors()) {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(schema("not a checkpoint (bad magic bytes)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(schema(&format!("unsupported checkpoint version {version}")));
        }
        let json = r.bytes()?;
        let block: ConfigBlock = serde_json::from_slice(json).map_err(|e| schema(&format!("config block: {e}")))?;
        block.model.validate()?;
        let layout = ParamLayout::new(&block.model);
        let count = r.u32()? as usize;
        if count != layout.len() {
            return Err(schema(&format!("manifest lists {count} tensors, config implies {}", layout.len())));
        }
        let mut shapes = Vec::with_capacity(count);
        for i in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| schema("tensor name is not UTF-8"))?;
            if name != layout.names()[i] {
                return Err(schema(&format!("manifest entry {i} is {name:?}, expected {:?}", layout.names()[i])));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (er, ec) = layout.shape(i);
            if dims != [er, ec] {
                return Err(schema(&format!("{name} has shape {dims:?}, expected [{er}, {ec}]")));
            }
            shapes.push(dims);
        }
        let mut tensors = Vec::with_capacity(count);
        for dims in shapes {
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(dims, data));
        }
        if r.pos != bytes.len() {
            return Err(schema(&format!("{} trailing bytes after parameter blob", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { params: ModelParams::from_tensors(&block.model, tensors)?, loss_mode: block.loss_mode })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    crate::corpus::write_atomic(path, |w| w.write_all(&checkpoint.to_bytes()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

fn schema(msg: &str) -> Error {
    Error::Schema { line: 0, message: msg.to_string() }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(schema("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            model_dim: 8,
            heads: 2,
            feedforward_dim: 16,
            encoder_blocks: 1,
            decoder_blocks: 1,
            feature_dim: 4,
            fusion_rank: 3,
            fusion_dim: 5,
            ..ModelConfig::default()
        };
        Checkpoint { params: ModelParams::init(&cfg, &mut RngStream::new(3)).unwrap(), loss_mode: LossMode::DpnKl }
    }

    #[test]
    fn bytes_round_trip() {
        let c = small();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"DERC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_schema_errors() {
        let bytes = small().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Schema { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Schema { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Schema { .. })));
    }
}
