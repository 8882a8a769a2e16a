//! Single-file parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! ELBERT1\n
//! depth=<M>\n            one key=value line per ModelConfig field, in the
//! hidden_dim=<d>\n       order depth, hidden_dim, num_heads, ffn_dim,
//! ...                    vocab_size, max_seq_len, num_classes, embed_dim
//! \n                     blank line ends the header
//! records...             one per tensor, in Parameters::tensors() order
//! ```
//!
//! Each record is `u32 LE name length`, the UTF-8 name, `u64 LE value count`,
//! then that many `f64 LE` values. Matrices are row-major. The `exit_t`
//! record comes last and is the only one whose length depends on depth.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::CONFIG_KEYS;
use super::{Model, ModelConfig, Parameters};
use crate::fsutil::write_atomic;
use crate::{Error, Result};

pub const MAGIC: &str = "ELBERT1";

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    for key in CONFIG_KEYS {
        let v = model.cfg.get(key).expect("known key");
        out.extend_from_slice(format!("{key}={v}\n").as_bytes());
    }
    out.push(b'\n');
    for (name, values) in model.params.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (cfg, records) = parse(bytes)?;
    let mut params = Parameters::zeros(&cfg);
    let mut seen = 0;
    for ((name, slot), rec) in params.tensors_mut().into_iter().zip(&records) {
        if rec.name != name {
            return Err(Error::Checkpoint(format!(
                "expected record {name:?}, found {:?}",
                rec.name
            )));
        }
        if rec.values.len() != slot.len() {
            return Err(Error::Checkpoint(format!(
                "record {name:?} has {} values, config implies {}",
                rec.values.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(&rec.values);
        seen += 1;
    }
    if seen != records.len() || records.len() != super::params::TENSOR_COUNT {
        return Err(Error::Checkpoint(format!(
            "expected {} records, found {}",
            super::params::TENSOR_COUNT,
            records.len()
        )));
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter value".into()));
    }
    Ok(Model { cfg, params })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model))
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

/// Serialized byte length of each record, keyed by tensor name.
pub fn record_sizes(bytes: &[u8]) -> Result<Vec<(String, usize)>> {
    let (_, records) = parse(bytes)?;
    Ok(records
        .into_iter()
        .map(|r| {
            let size = 4 + r.name.len() + 8 + 8 * r.values.len();
            (r.name, size)
        })
        .collect())
}

struct Record {
    name: String,
    values: Vec<f64>,
}

fn parse(bytes: &[u8]) -> Result<(ModelConfig, Vec<Record>)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());

    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("header terminator not found"))?;
    let header =
        std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing ELBERT1 magic"));
    }
    let mut pairs = BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    let cfg = ModelConfig::from_pairs(&pairs).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut rest = &bytes[header_end + 2..];
    let mut records = Vec::new();
    while !rest.is_empty() {
        let name_len = u32::from_le_bytes(take::<4>(&mut rest)?) as usize;
        if rest.len() < name_len {
            return Err(bad("truncated record name"));
        }
        let name = std::str::from_utf8(&rest[..name_len])
            .map_err(|_| bad("record name is not UTF-8"))?
            .to_string();
        rest = &rest[name_len..];
        let count = u64::from_le_bytes(take::<8>(&mut rest)?) as usize;
        if rest.len() / 8 < count {
            return Err(Error::Checkpoint(format!("truncated record {name:?}")));
        }
        let values = rest[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[count * 8..];
        records.push(Record { name, values });
    }
    Ok((cfg, records))
}

fn take<const N: usize>(rest: &mut &[u8]) -> Result<[u8; N]> {
    if rest.len() < N {
        return Err(Error::Checkpoint("truncated record header".into()));
    }
    let (head, tail) = rest.split_at(N);
    *rest = tail;
    Ok(head.try_into().expect("length checked"))
}
