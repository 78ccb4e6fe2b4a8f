//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "CRKLCKPT"
//! version   u32      1
//! depth, base_channels, input_channels   u32 x 3
//! count     u32      number of tensors
//! tensor*   name_len u32, name (UTF-8), rank u32, dims u64 x rank, data f64 x prod(dims)
//! ```
//!
//! Tensors are named `<layer>.weight` / `<layer>.bias` in parameter order.

use std::path::Path;

use super::{LayerParams, UNet, UNetConfig};
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"CRKLCKPT";
pub const VERSION: u32 = 1;

pub fn encode(net: &UNet) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [cfg.depth, cfg.base_channels, cfg.input_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(2 * net.params().len() as u32).to_le_bytes());
    for ((name, ..), p) in cfg.layout().iter().zip(net.params()) {
        for (suffix, t) in [("weight", &p.kernels), ("bias", &p.biases)] {
            let name = format!("{name}.{suffix}");
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<UNet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad checkpoint magic".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse { offset: 8, msg: format!("unsupported version {version}") });
    }
    let cfg = UNetConfig {
        depth: r.u32("depth")? as usize,
        base_channels: r.u32("base_channels")? as usize,
        input_channels: r.u32("input_channels")? as usize,
    };
    cfg.validate()?;
    let count = r.u32("tensor count")? as usize;
    let layout = cfg.layout();
    if count != 2 * layout.len() {
        return Err(Error::Parse {
            offset: r.pos - 4,
            msg: format!("expected {} tensors, found {count}", 2 * layout.len()),
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Parse { offset: start + 4, msg: "tensor name is not UTF-8".into() })?;
        let expected = format!("{}.{}", layout[i / 2].0, if i % 2 == 0 { "weight" } else { "bias" });
        if name != expected {
            return Err(Error::Parse { offset: start, msg: format!("expected tensor `{expected}`, found `{name}`") });
        }
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Parse { offset: r.pos - 4, msg: format!("bad rank {rank}") });
        }
        let dims = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Parse {
            offset: r.pos,
            msg: "tensor size overflows".into(),
        })?;
        let raw = r.take(n.saturating_mul(8), "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse { offset: r.pos, msg: "trailing bytes after last tensor".into() });
    }
    let mut it = tensors.into_iter();
    let params = std::iter::from_fn(|| Some(LayerParams { kernels: it.next()?, biases: it.next()? })).collect();
    UNet::from_params(cfg, params)
}

pub fn save(net: &UNet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<UNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
