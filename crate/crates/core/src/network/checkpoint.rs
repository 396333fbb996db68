//! Self-describing model container:
//!
//! ```text
//! magic "HEMISEG\0" | u32 version | u64 len + config JSON |
//! u64 count | count x (u32 len + name | u32 ndim | ndim x u64 | f64 values)
//! ```
//!
//! All integers and floats are little-endian. Batch-norm running statistics
//! are stored as `<layer>.running_mean` / `<layer>.running_var`.

use std::collections::HashMap;
use std::path::Path;

use super::{Model, NetworkConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HEMISEG\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn entries(model: &Model) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out: Vec<(String, Vec<usize>, &[f64])> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data()))
        .collect();
    for n in model.norms() {
        let c = n.state.running_mean.len();
        out.push((format!("{}.running_mean", n.name), vec![c], &n.state.running_mean));
        out.push((format!("{}.running_var", n.name), vec![c], &n.state.running_var));
    }
    out
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::format(path, e.to_string()))?;
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&(config.len() as u64).to_le_bytes());
    b.extend_from_slice(&config);
    let items = entries(model);
    b.extend_from_slice(&(items.len() as u64).to_le_bytes());
    for (name, shape, values) in items {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, b).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("implausible length {v}")))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::format(path, "not a model checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let n = c.len()?;
    let config: NetworkConfig =
        serde_json::from_slice(c.take(n)?).map_err(|e| Error::format(path, format!("config: {e}")))?;
    let count = c.len()?;
    let mut stored: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| c.len()).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&k| k.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| Error::format(path, format!("`{name}` has implausible shape {shape:?}")))?;
        let raw = c.take(numel * 8)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("`{name}` holds non-finite values")));
        }
        if stored.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::format(path, format!("`{name}` stored twice")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last parameter"));
    }

    let mut model = Model::new(&config).map_err(|e| Error::format(path, e.to_string()))?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let (s, v) = stored
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing `{name}`")))?;
        if s != shape {
            return Err(Error::format(path, format!("`{name}` has shape {s:?}, expected {shape:?}")));
        }
        Ok(v)
    };
    for p in model.params_mut() {
        let values = take(&p.name, p.value.shape())?;
        p.value.data_mut().copy_from_slice(&values);
    }
    for n in model.norms_mut() {
        let ch = n.state.running_mean.len();
        n.state.running_mean = take(&format!("{}.running_mean", n.name), &[ch])?;
        n.state.running_var = take(&format!("{}.running_var", n.name), &[ch])?;
    }
    if let Some(extra) = stored.keys().min() {
        return Err(Error::format(path, format!("unexpected entry `{extra}`")));
    }
    Ok(model)
}
