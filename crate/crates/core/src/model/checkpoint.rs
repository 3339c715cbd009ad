//! Checkpoint files: a text manifest followed by a little-endian blob.
//!
//! ```text
//! krrmix-checkpoint 1
//! config_digest <hex sha-256>
//! tensors <count>
//! <name> shape=<d0>x<d1>… offset=<byte offset into blob> width=<bytes per element>
//! …
//! end
//! <blob>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::{Model, ModelConfig};

const MAGIC: &str = "krrmix-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config_digest: String,
    pub entries: Vec<ManifestEntry>,
    pub tensors: Vec<Tensor<T>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    let width = (T::BITS / 8) as usize;
    let mut manifest = format!(
        "{MAGIC}\nconfig_digest {}\ntensors {}\n",
        model.config().digest(),
        model.params().len()
    );
    let mut blob = Vec::with_capacity(model.count() * width);
    for (name, t) in model.names().iter().zip(model.params()) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!(
            "{name} shape={} offset={} width={width}\n",
            if shape.is_empty() { "scalar".to_string() } else { shape.join("x") },
            blob.len()
        ));
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    manifest.push_str("end\n");
    let mut f = fs::File::create(path)?;
    f.write_all(manifest.as_bytes())?;
    f.write_all(&blob)?;
    f.flush()?;
    Ok(())
}

pub fn read<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("manifest truncated"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8"))?.to_string();
        pos += end + 1;
        Ok(line)
    };
    if next_line()? != MAGIC {
        return Err(bad("missing header line"));
    }
    let digest = next_line()?
        .strip_prefix("config_digest ")
        .ok_or_else(|| bad("missing config_digest"))?
        .to_string();
    let count: usize = next_line()?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing tensor count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(parse_entry(&next_line()?)?);
    }
    if next_line()? != "end" {
        return Err(bad("manifest not terminated by `end`"));
    }
    let blob = &bytes[pos..];
    let want = (T::BITS / 8) as usize;
    let mut tensors = Vec::with_capacity(count);
    for e in &entries {
        if e.width != want {
            return Err(bad(format!("{}: element width {} but reader expects {want}", e.name, e.width)));
        }
        let n: usize = e.shape.iter().product();
        let slice = blob
            .get(e.offset..e.offset + n * e.width)
            .ok_or_else(|| bad(format!("{}: data past end of file", e.name)))?;
        let data = slice.chunks_exact(e.width).map(T::read_le).collect();
        tensors.push(Tensor::new(&e.shape, data).map_err(|err| bad(format!("{}: {err}", e.name)))?);
    }
    Ok(Checkpoint {
        config_digest: digest,
        entries,
        tensors,
    })
}

fn parse_entry(line: &str) -> Result<ManifestEntry> {
    let mut parts = line.split_whitespace();
    let name = parts.next().ok_or_else(|| bad("empty manifest line"))?.to_string();
    let (mut shape, mut offset, mut width) = (None, None, None);
    for field in parts {
        let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("malformed field `{field}`")))?;
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("{name}: bad number `{s}`")));
        match k {
            "shape" if v == "scalar" => shape = Some(Vec::new()),
            "shape" => shape = Some(v.split('x').map(num).collect::<Result<Vec<_>>>()?),
            "offset" => offset = Some(num(v)?),
            "width" => width = Some(num(v)?),
            _ => return Err(bad(format!("{name}: unknown field `{k}`"))),
        }
    }
    let missing = |f: &str| bad(format!("{name}: missing {f}"));
    Ok(ManifestEntry {
        shape: shape.ok_or_else(|| missing("shape"))?,
        offset: offset.ok_or_else(|| missing("offset"))?,
        width: width.ok_or_else(|| missing("width"))?,
        name,
    })
}

/// Reads a checkpoint written for exactly this configuration.
pub fn load<T: Real>(path: &Path, cfg: &ModelConfig) -> Result<Model<T>> {
    let ck = read::<T>(path)?;
    if ck.config_digest != cfg.digest() {
        return Err(bad("config digest does not match the requested configuration"));
    }
    let names: Vec<&str> = ck.entries.iter().map(|e| e.name.as_str()).collect();
    let expected = super::param_shapes(cfg);
    if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, (b, _))| a != b) {
        return Err(bad("parameter names differ from the configuration's layout"));
    }
    Model::from_params(cfg, ck.tensors)
}
