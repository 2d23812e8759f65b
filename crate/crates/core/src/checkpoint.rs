//! Versioned binary checkpoints.
//!
//! Layout: a text header of `key=value` lines ending in `---`, then every
//! parameter as `name_len:u32 name ndim:u32 dims:u64… data:f64…`, all
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::params::{GroupSet, ParamGroup};
use crate::transformer::ModelConfig;

const MAGIC: &str = "lexcopy-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_END: &str = "---";

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let c = &model.cfg;
    let groups: Vec<&str> = model.store.groups().iter().map(ParamGroup::name).collect();
    let mut out = String::new();
    out.push_str(&format!("{MAGIC} v{FORMAT_VERSION}\n"));
    for (k, v) in [
        ("variant", model.variant.to_string()),
        ("groups", groups.join(",")),
        ("d_model", c.d_model.to_string()),
        ("n_layers", c.n_layers.to_string()),
        ("heads", c.heads.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("vocab_src", c.vocab_src.to_string()),
        ("vocab_tgt", c.vocab_tgt.to_string()),
        ("dropout", format!("{:?}", c.dropout)),
        ("max_len", c.max_len.to_string()),
        ("copy_exclude_special", c.copy_exclude_special.to_string()),
        ("shared_embeddings", "false".into()),
        ("tied_output", "false".into()),
        ("params", model.store.len().to_string()),
    ] {
        out.push_str(&format!("{k}={v}\n"));
    }
    out.push_str(HEADER_END);
    out.push('\n');
    let mut bytes = out.into_bytes();
    for (_, p) in model.store.iter() {
        bytes.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut reader = bytes;
    let header = read_header(&mut reader)?;
    let get = |k: &str| header.get(k).ok_or_else(|| bad(format!("header lacks {k}")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| bad(format!("header value {k}={v} is not a number")))
    }
    let cfg = ModelConfig {
        d_model: num("d_model", get("d_model")?)?,
        n_layers: num("n_layers", get("n_layers")?)?,
        heads: num("heads", get("heads")?)?,
        d_ff: num("d_ff", get("d_ff")?)?,
        vocab_src: num("vocab_src", get("vocab_src")?)?,
        vocab_tgt: num("vocab_tgt", get("vocab_tgt")?)?,
        dropout: num("dropout", get("dropout")?)?,
        max_len: num("max_len", get("max_len")?)?,
        copy_exclude_special: num("copy_exclude_special", get("copy_exclude_special")?)?,
    };
    for key in ["shared_embeddings", "tied_output"] {
        if get(key)? != "false" {
            return Err(bad(format!("{key}={} is not supported", get(key)?)));
        }
    }
    let variant: Variant = get("variant")?.parse()?;
    let mut groups = GroupSet::NONE;
    for g in get("groups")?.split(',') {
        groups = groups.with(g.parse()?);
    }
    let count: usize = num("params", get("params")?)?;

    // The config alone determines every expected name and shape.
    let mut model = Model::new(cfg, Variant::Sentence, 0)?;
    for g in groups.iter() {
        model.add_group(g, 0)?;
    }
    model.set_variant(variant)?;
    if model.store.len() != count {
        return Err(bad(format!(
            "header lists {count} parameters but the configuration defines {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = read_u32(&mut reader)? as usize;
        let name = String::from_utf8(take(&mut reader, name_len)?.to_vec())
            .map_err(|_| bad("parameter name is not UTF-8"))?;
        let ndim = read_u32(&mut reader)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut reader).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .lookup(&name)
            .ok_or_else(|| bad(format!("unexpected parameter {name}")))?;
        let param = model.store.get_mut(id);
        if param.tensor.shape() != shape.as_slice() {
            return Err(bad(format!(
                "parameter {name} has shape {shape:?}, configuration expects {:?}",
                param.tensor.shape()
            )));
        }
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(bad(format!("parameter {name} appears twice")));
        }
        let raw = take(&mut reader, 8 * param.tensor.numel())?;
        for (x, chunk) in param.tensor.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if !reader.is_empty() {
        return Err(bad(format!("{} trailing bytes", reader.len())));
    }
    Ok(model)
}

fn read_header(reader: &mut &[u8]) -> Result<BTreeMap<String, String>> {
    let mut lines = Vec::new();
    loop {
        let end = reader
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&reader[..end]).map_err(|_| bad("header is not UTF-8"))?;
        *reader = &reader[end + 1..];
        if line == HEADER_END {
            break;
        }
        lines.push(line.to_string());
    }
    let first = lines.first().ok_or_else(|| bad("empty header"))?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|r| r.trim().strip_prefix('v'))
        .ok_or_else(|| bad("not a checkpoint file"))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    lines[1..]
        .iter()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| bad(format!("malformed header line {l:?}")))
        })
        .collect()
}

fn take<'a>(reader: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if reader.len() < n {
        return Err(bad("truncated parameter data"));
    }
    let (head, rest) = reader.split_at(n);
    *reader = rest;
    Ok(head)
}

fn read_u32(reader: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(reader, 4)?.try_into().unwrap()))
}

fn read_u64(reader: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(reader, 8)?.try_into().unwrap()))
}

/// Hex SHA-256 of a file, for run manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
