//! Binary checkpoint: `CSTACKPT`, version, TOML model config, then every
//! named tensor (`name`, dims, little-endian `f32` data).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{CstaModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CSTACKPT";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    put_u32(w, b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

pub fn write_checkpoint(model: &CstaModel, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let cfg = toml::to_string(model.config())
        .map_err(|e| Error::invalid(format!("cannot serialize model config: {e}")))?;
    put_bytes(w, cfg.as_bytes())?;
    let params = model.named_params();
    put_u32(w, params.len() as u32)?;
    for (name, t) in params {
        put_bytes(w, name.as_bytes())?;
        put_u32(w, t.ndim() as u32)?;
        for &d in t.shape() {
            put_u32(w, d as u32)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<'a, R> {
    inner: &'a mut R,
    path: &'a str,
}

impl<R: Read> Reader<'_, R> {
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            message: msg.into(),
        }
    }

    fn exact(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => self.bad("truncated"),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.exact(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 24 {
            return Err(self.bad("implausible string length"));
        }
        String::from_utf8(self.exact(n)?).map_err(|_| self.bad("string is not UTF-8"))
    }
}

/// Read a checkpoint. `origin` only labels errors.
pub fn read_checkpoint(r: &mut impl Read, origin: &str) -> Result<CstaModel> {
    let mut rd = Reader {
        inner: r,
        path: origin,
    };
    if rd.exact(8)? != MAGIC {
        return Err(rd.bad("not a checkpoint (bad magic)"));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let cfg_text = rd.string()?;
    let config: ModelConfig =
        toml::from_str(&cfg_text).map_err(|e| rd.bad(format!("bad model config: {e}")))?;
    let mut model = CstaModel::new(config)?;
    let expected = model.named_params().len();
    let count = rd.u32()? as usize;
    if count != expected {
        return Err(rd.bad(format!("{count} tensors stored, model has {expected}")));
    }
    for _ in 0..count {
        let name = rd.string()?;
        let ndim = rd.u32()? as usize;
        if ndim > 8 {
            return Err(rd.bad(format!("tensor `{name}` has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd.u32()? as usize);
        }
        let Some(slot) = model.param_mut(&name) else {
            return Err(rd.bad(format!("unknown tensor `{name}`")));
        };
        if slot.shape() != shape.as_slice() {
            let found = slot.shape().to_vec();
            return Err(rd.bad(format!(
                "tensor `{name}` stored as {shape:?}, model expects {found:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = rd.exact(n * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let slot = model.param_mut(&name).expect("checked above");
        *slot = Tensor::new(&shape, data)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &CstaModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CstaModel> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    read_checkpoint(&mut f, &path.display().to_string())
}
