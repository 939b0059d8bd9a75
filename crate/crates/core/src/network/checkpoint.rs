//! Model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "NPTCCKPT" | version u32 | config length u32 | config JSON
//! | blob count u32
//! | per blob: name length u32 | name utf-8 | rank u32 | dims u32 x rank | f32 x prod(dims)
//! ```

use std::path::Path;

use super::model::Model;
use super::NetworkConfig;
use crate::error::{NptcError, Result};

const MAGIC: &[u8; 8] = b"NPTCCKPT";
const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    let put = |buf: &mut Vec<u8>, v: u32| buf.extend_from_slice(&v.to_le_bytes());
    buf.extend_from_slice(MAGIC);
    put(&mut buf, VERSION);
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    put(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(&cfg);
    put(&mut buf, model.param_infos().len() as u32);
    for (info, data) in model.param_infos().iter().zip(model.params()) {
        put(&mut buf, info.name.len() as u32);
        buf.extend_from_slice(info.name.as_bytes());
        put(&mut buf, info.shape.len() as u32);
        for &d in &info.shape {
            put(&mut buf, d as u32);
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(NptcError::Parse {
                line: 0,
                message: "checkpoint is truncated".into(),
            });
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn parse_error(message: impl Into<String>) -> NptcError {
    NptcError::Parse {
        line: 0,
        message: message.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err(parse_error("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(parse_error(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| parse_error(format!("checkpoint config: {e}")))?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| parse_error("parameter name is not utf-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, shape, data));
    }
    if !r.bytes.is_empty() {
        return Err(parse_error("trailing bytes after checkpoint"));
    }
    Model::from_params(config, named)
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}
