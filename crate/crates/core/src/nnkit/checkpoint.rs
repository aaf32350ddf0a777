//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "JCL1"  version:u8
//! meta_count:u32  { key_len:u32 key  value_len:u32 value }*
//! tensor_count:u32 { name_len:u32 name  ndims:u32  dim:u32*  f32* }*
//! ```
//!
//! Adam moments are stored as extra tensors named `<param>@adam_m` and
//! `<param>@adam_v`; the step count is the `adam_step` metadata key.

use std::collections::BTreeMap;

use super::{Mat, NnError, ParamStore, Precision};

pub const MAGIC: &[u8; 4] = b"JCL1";
pub const VERSION: u8 = 1;
const STEP_KEY: &str = "adam_step";
const M_SUFFIX: &str = "@adam_m";
const V_SUFFIX: &str = "@adam_v";

pub type Meta = BTreeMap<String, String>;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, m: &Mat) {
    put_str(out, name);
    put_u32(out, 2);
    put_u32(out, m.rows);
    put_u32(out, m.cols);
    for &x in &m.data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Serializes values (as 32-bit floats), Adam moments and `meta`.
pub fn save_checkpoint(store: &ParamStore, meta: &Meta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let mut meta = meta.clone();
    meta.insert(STEP_KEY.to_string(), store.step.to_string());
    put_u32(&mut out, meta.len());
    for (k, v) in &meta {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    put_u32(&mut out, store.len() * 3);
    for p in store.params() {
        put_tensor(&mut out, &p.name, &p.value);
        put_tensor(&mut out, &format!("{}{M_SUFFIX}", p.name), &p.adam_m);
        put_tensor(&mut out, &format!("{}{V_SUFFIX}", p.name), &p.adam_v);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Format {
                offset: self.pos,
                message: "truncated data".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String, NnError> {
        let at = self.pos;
        let n = self.u32()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| NnError::Format {
            offset: at,
            message: "invalid UTF-8 string".into(),
        })
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(ParamStore, Meta), NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| bad_magic())? != MAGIC {
        return Err(bad_magic());
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(NnError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let mut meta = Meta::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    let step = match meta.remove(STEP_KEY) {
        Some(s) => s.parse().map_err(|_| NnError::Format {
            offset: 5,
            message: format!("bad {STEP_KEY} `{s}`"),
        })?,
        None => 0,
    };

    let mut store = ParamStore::new(Precision::F32);
    store.step = step;
    let mut moments: Vec<(String, bool, Mat, usize)> = Vec::new();
    for _ in 0..r.u32()? {
        let at = r.pos;
        let name = r.string()?;
        let ndims = r.u32()?;
        if ndims != 2 {
            return Err(NnError::Format {
                offset: at,
                message: format!("tensor `{name}` has {ndims} dims, expected 2"),
            });
        }
        let rows = r.u32()?;
        let cols = r.u32()?;
        let len = rows.checked_mul(cols).ok_or_else(|| NnError::Format {
            offset: at,
            message: "tensor too large".into(),
        })?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| NnError::Format {
            offset: at,
            message: "tensor too large".into(),
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let m = Mat { rows, cols, data };
        if let Some(base) = name.strip_suffix(M_SUFFIX) {
            moments.push((base.to_string(), true, m, at));
        } else if let Some(base) = name.strip_suffix(V_SUFFIX) {
            moments.push((base.to_string(), false, m, at));
        } else {
            store.add(&name, m).map_err(|e| NnError::Format {
                offset: at,
                message: e.to_string(),
            })?;
        }
    }
    if r.pos != bytes.len() {
        return Err(NnError::Format {
            offset: r.pos,
            message: "trailing bytes".into(),
        });
    }
    for (base, is_m, m, at) in moments {
        let id = store.id(&base).ok_or_else(|| NnError::Format {
            offset: at,
            message: format!("optimizer state for unknown tensor `{base}`"),
        })?;
        let p = store.get_mut(id);
        if (m.rows, m.cols) != (p.value.rows, p.value.cols) {
            return Err(NnError::Format {
                offset: at,
                message: format!("optimizer state shape mismatch for `{base}`"),
            });
        }
        if is_m {
            p.adam_m = m;
        } else {
            p.adam_v = m;
        }
    }
    Ok((store, meta))
}

fn bad_magic() -> NnError {
    NnError::Format {
        offset: 0,
        message: "bad magic".into(),
    }
}
