//! Binary checkpoints.
//!
//! ```text
//! "SVCK"  u32 version
//! u32 len, UNetConfig as JSON
//! u64 completed iterations
//! u32 tensor count, then per tensor:
//!     u32 len, name (UTF-8)
//!     u32 ndim, u32 dims[ndim]
//!     f32 data[numel]
//! u8 optimizer flag; if 1:
//!     u64 adam step, then per tensor f32 m[numel], f32 v[numel]
//! ```
//!
//! Every integer and float is little-endian.

use std::fs;
use std::path::Path;

use strokeseg_core::network::{UNet3d, UNetConfig};
use strokeseg_core::optim::AdamState;
use strokeseg_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: UNet3d<f32>,
    pub iteration: u64,
    pub adam: Option<AdamState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(
    model: &UNet3d<f32>,
    iteration: u64,
    adam: Option<&AdamState<f32>>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(model.config())?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&iteration.to_le_bytes());
    let params = model.params();
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for d in t.shape() {
            put_u32(&mut out, *d as u32);
        }
        put_f32s(&mut out, t.data());
    }
    match adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            for (m, v) in a.m.iter().zip(&a.v) {
                put_f32s(&mut out, m);
                put_f32s(&mut out, v);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.err("tensor too large"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let n = r.u32()? as usize;
    let cfg: UNetConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| r.err(format!("config block: {e}")))?;
    let iteration = r.u64()?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| r.err("tensor name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        named.push((name, Tensor::from_vec(&shape, data)?));
    }
    let model = UNet3d::from_named(cfg, named).map_err(|e| r.err(e.to_string()))?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for t in model.params().tensors() {
                m.push(r.f32s(t.len())?);
                v.push(r.f32s(t.len())?);
            }
            Some(AdamState { step, m, v })
        }
        f => return Err(r.err(format!("bad optimizer flag {f}"))),
    };
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        iteration,
        adam,
    })
}

pub fn save_checkpoint(
    model: &UNet3d<f32>,
    iteration: u64,
    adam: Option<&AdamState<f32>>,
    path: &Path,
) -> Result<()> {
    let bytes = encode(model, iteration, adam)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and checks that its network matches `expected`.
pub fn load_matching(path: &Path, expected: &UNetConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.config() != expected {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!(
                "network config {:?} differs from the requested {:?}",
                ck.model.config(),
                expected
            ),
        });
    }
    Ok(ck)
}
