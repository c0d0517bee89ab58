//! Little-endian binary checkpoints.
//!
//! Layout: magic `SLWSR1`, `u32` config length, config text, `u32` parameter
//! count, then per parameter `u32` name length, name, `u32` rank, rank `u32`
//! dims and the raw `f32` data. A trailer holds the `u64` step counter, a `u8`
//! optimizer flag and, when set, the `u64` optimizer step followed by the first
//! and second moments of every parameter in order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::Model;

pub const MAGIC: &[u8; 6] = b"SLWSR1";

/// Adam moments for every parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub step: u64,
    pub optimizer: Option<OptimizerState>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(model: &Model<f32>, step: u64, optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(model.num_params() * 4 * 3 + 4096);
    buf.extend_from_slice(MAGIC);
    let text = model.config().to_text();
    put_u32(&mut buf, text.len());
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, model.params().len());
    for p in model.params().iter() {
        put_u32(&mut buf, p.name.len());
        buf.extend_from_slice(p.name.as_bytes());
        let dims = p.tensor.shape().dims();
        put_u32(&mut buf, dims.len());
        for d in dims {
            put_u32(&mut buf, d);
        }
        put_f32s(&mut buf, p.tensor.data());
    }
    buf.extend_from_slice(&step.to_le_bytes());
    match optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.t.to_le_bytes());
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_f32s(&mut buf, m);
                put_f32s(&mut buf, v);
            }
        }
    }
    buf
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
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::config("checkpoint is truncated")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::config("checkpoint string is not UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::config("checkpoint size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::config("not a checkpoint: bad magic"));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let config = ModelConfig::parse(r.str()?)?;
    let mut model = Model::<f32>::new(config, 0)?;
    let count = r.u32()?;
    if count != model.params().len() {
        return Err(Error::config(format!(
            "checkpoint holds {count} parameters, config implies {}",
            model.params().len()
        )));
    }
    let mut sizes = Vec::with_capacity(count);
    for p in model.params_mut().iter_mut() {
        let name = r.str()?;
        if name != p.name {
            return Err(Error::config(format!("checkpoint parameter {name} where {} expected", p.name)));
        }
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if dims != p.tensor.shape().dims() {
            return Err(Error::config(format!("checkpoint shape {dims:?} for {name} does not match the config")));
        }
        let data = r.f32s(p.tensor.numel())?;
        p.tensor.data_mut().copy_from_slice(&data);
        sizes.push(p.tensor.numel());
    }
    let step = r.u64()?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for &n in &sizes {
                m.push(r.f32s(n)?);
                v.push(r.f32s(n)?);
            }
            Some(OptimizerState { t, m, v })
        }
        f => return Err(Error::config(format!("bad optimizer flag {f} in checkpoint"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::config("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { model, step, optimizer })
}

pub fn save(path: &Path, model: &Model<f32>, step: u64, optimizer: Option<&OptimizerState>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model, step, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
