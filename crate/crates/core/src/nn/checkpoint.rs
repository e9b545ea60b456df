//! `VCKP` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VCKP"  u16 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u32 extent, f32 × Π extents }
//! ```
//!
//! Optimizer state goes in a sibling file with the `.opt` suffix in the same
//! container, holding `adam.step` and `m.<name>` / `v.<name>` moments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::{Adam, AdamConfig, NdArray, NnError, ParamSet, Real};

pub const MAGIC: &[u8; 4] = b"VCKP";
pub const VERSION: u16 = 1;

pub type Entries = IndexMap<String, NdArray<f32>>;

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn encode(entries: &Entries) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, arr) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(arr.rank() as u32).to_le_bytes());
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Entries, NnError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("bad magic, not a VCKP file"));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = IndexMap::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| bad("extent overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let arr = NdArray::from_vec(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        if entries.insert(name.clone(), arr).is_some() {
            return Err(bad(format!("duplicate parameter {name}")));
        }
    }
    if c.pos != buf.len() {
        return Err(bad("trailing bytes after last parameter"));
    }
    Ok(entries)
}

pub fn params_to_entries<F: Real>(params: &ParamSet<F>) -> Entries {
    params
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.cast()))
        .collect()
}

pub fn save_params<F: Real>(path: &Path, params: &ParamSet<F>) -> Result<(), NnError> {
    write_atomic(path, &encode(&params_to_entries(params)))
}

pub fn load_entries(path: &Path) -> Result<Entries, NnError> {
    decode(&fs::read(path)?)
}

/// Copies every entry into an existing parameter set. The set must contain
/// exactly the checkpoint's names with identical shapes.
pub fn load_into<F: Real>(entries: &Entries, params: &mut ParamSet<F>) -> Result<(), NnError> {
    for name in params.names() {
        if !entries.contains_key(name) {
            return Err(bad(format!("checkpoint lacks parameter {name}")));
        }
    }
    for (name, arr) in entries {
        params
            .set_value(name, arr.cast())
            .map_err(|e| bad(format!("checkpoint does not match model: {e}")))?;
    }
    Ok(())
}

pub fn opt_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

pub fn save_adam<F: Real>(path: &Path, opt: &Adam<F>) -> Result<(), NnError> {
    let mut e = Entries::new();
    e.insert("adam.step".into(), NdArray::scalar(opt.step as f32));
    for (name, m, v) in opt.moments() {
        e.insert(format!("m.{name}"), m.cast());
        e.insert(format!("v.{name}"), v.cast());
    }
    write_atomic(path, &encode(&e))
}

pub fn load_adam<F: Real>(path: &Path, config: AdamConfig) -> Result<Adam<F>, NnError> {
    let e = load_entries(path)?;
    let mut opt = Adam::new(config);
    let step = e.get("adam.step").ok_or_else(|| bad("missing adam.step"))?;
    opt.step = step.data()[0] as u64;
    for (name, m) in &e {
        if let Some(base) = name.strip_prefix("m.") {
            let v = e
                .get(&format!("v.{base}"))
                .ok_or_else(|| bad(format!("missing second moment for {base}")))?;
            opt.insert_moments(base.to_string(), m.cast(), v.cast());
        }
    }
    Ok(opt)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NnError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
