//! Parameter checkpoints: a plain-text header followed by little-endian values.
//!
//! ```text
//! vgt-checkpoint 1
//! params 2
//! fpn.lat2.b f32 32
//! fpn.lat2.w f32 32x32x1x1
//! data
//! <raw little-endian values of every parameter, in header order>
//! ```
//! Parameters are written in sorted name order; a scalar has shape `-`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "vgt-checkpoint 1";

pub fn to_bytes<T: Float>(store: &ParamStore<T>) -> Vec<u8> {
    let mut header = format!("{MAGIC}\nparams {}\n", store.len());
    for (name, p) in store.iter() {
        let shape = if p.value.shape().is_empty() {
            "-".to_string()
        } else {
            p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        };
        header.push_str(&format!("{name} {} {shape}\n", T::DTYPE));
    }
    header.push_str("data\n");
    let mut out = header.into_bytes();
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<T: Float>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn from_bytes<T: Float>(bytes: &[u8], origin: &Path) -> Result<ParamStore<T>> {
    let bad = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
        pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not utf-8".into()))
    };
    if next_line()? != MAGIC {
        return Err(bad("bad magic line".into()));
    }
    let count_line = next_line()?;
    let count: usize = count_line
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad count line `{count_line}`")))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 {
            return Err(bad(format!("bad entry `{line}`")));
        }
        let width = match parts[1] {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("unknown dtype `{other}`"))),
        };
        let shape: Vec<usize> = if parts[2] == "-" {
            vec![]
        } else {
            parts[2]
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape in `{line}`"))))
                .collect::<Result<_>>()?
        };
        entries.push((parts[0].to_string(), width, shape));
    }
    if next_line()? != "data" {
        return Err(bad("missing data marker".into()));
    }
    let mut store = ParamStore::new();
    for (name, width, shape) in entries {
        let n: usize = shape.iter().product();
        let end = pos + n * width;
        if end > bytes.len() {
            return Err(bad(format!("truncated data for `{name}`")));
        }
        let values = bytes[pos..end]
            .chunks_exact(width)
            .map(|ch| {
                let v = if width == 4 {
                    f32::from_le_bytes(ch.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(ch.try_into().unwrap())
                };
                T::from_f64(v)
            })
            .collect();
        pos = end;
        store.insert(name, Tensor::new(shape, values)?);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after data".into()));
    }
    Ok(store)
}

pub fn load<T: Float>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
