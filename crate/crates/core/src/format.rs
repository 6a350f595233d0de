//! The `OPCM` v1 checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | `0..4`       | magic `b"OPCM"`                          |
//! | `4..8`       | format version, `u32` = 1                |
//! | `8..16`      | header length `H`, `u64`                 |
//! | `16..16+H`   | compact UTF-8 JSON header                |
//! | rest         | row-major payloads, lexicographic by name |
//!
//! The header is `{"metadata":{..},"tensors":{name:{"dtype","kind","offset","shape"}}}`
//! with keys in lexicographic order and no insignificant whitespace. Payload
//! offsets are relative to the first payload byte and must be contiguous.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::marker::PhantomData;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, DType, Param, ParamKind, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"OPCM";
pub const VERSION: u32 = 1;

/// Refuse headers larger than this; a corrupt length field would otherwise
/// trigger a huge allocation.
const MAX_HEADER_LEN: u64 = 1 << 30;

// Field order is the serialization order and must stay lexicographic.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    dtype: DType,
    kind: ParamKind,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    metadata: &'a BTreeMap<String, String>,
    tensors: BTreeMap<&'a str, TensorHeader>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderIn {
    #[serde(default)]
    metadata: Entries<String>,
    tensors: Entries<TensorHeader>,
}

/// JSON object read as an ordered list of entries so repeated keys are
/// visible instead of silently overwritten.
struct Entries<V>(Vec<(String, V)>);

impl<V> Default for Entries<V> {
    fn default() -> Self {
        Entries(Vec::new())
    }
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for Entries<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for EntriesVisitor<V> {
            type Value = Entries<V>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, V>()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor(PhantomData))
    }
}

fn header_bytes(ckpt: &Checkpoint, dtype: DType) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = ckpt
        .iter()
        .map(|(name, p)| {
            let h = TensorHeader {
                dtype,
                kind: p.kind,
                offset,
                shape: p.tensor.shape().to_vec(),
            };
            offset += (p.tensor.numel() * dtype.size_of()) as u64;
            (name.as_str(), h)
        })
        .collect();
    let header = HeaderOut {
        metadata: ckpt.metadata(),
        tensors,
    };
    serde_json::to_vec(&header).expect("header serialization cannot fail")
}

/// Serializes `ckpt` with every payload stored as `dtype`.
pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, dtype: DType, mut w: W) -> io::Result<()> {
    let header = header_bytes(ckpt, dtype);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, p) in ckpt.iter() {
        match dtype {
            DType::F64 => {
                for v in p.tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for v in p.tensor.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()
}

pub fn to_bytes(ckpt: &Checkpoint, dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(ckpt, dtype, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(ckpt, dtype, BufWriter::new(file))?;
    Ok(())
}

fn read_exact_or_malformed<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::MalformedFile(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

/// Parses a checkpoint from a byte stream, reading tensor payloads one at a
/// time (no second copy of the file is held in memory).
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut prefix = [0u8; 16];
    read_exact_or_malformed(&mut r, &mut prefix, "preamble")?;
    if &prefix[0..4] != MAGIC {
        return Err(Error::MalformedFile("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(prefix[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::MalformedFile(format!(
            "unsupported version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(prefix[8..16].try_into().unwrap());
    if header_len > MAX_HEADER_LEN {
        return Err(Error::MalformedFile(format!(
            "header length {header_len} too large"
        )));
    }
    let mut header = vec![0u8; header_len as usize];
    read_exact_or_malformed(&mut r, &mut header, "header")?;
    let header: HeaderIn = serde_json::from_slice(&header)
        .map_err(|e| Error::MalformedFile(format!("bad header: {e}")))?;

    let mut metadata = BTreeMap::new();
    for (k, v) in header.metadata.0 {
        if metadata.insert(k.clone(), v).is_some() {
            return Err(Error::MalformedFile(format!(
                "duplicate metadata key `{k}`"
            )));
        }
    }

    let mut tensors = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (name, h) in header.tensors.0 {
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        tensors.insert(name, h);
    }

    let mut params = BTreeMap::new();
    let mut expected_offset = 0u64;
    for (name, h) in tensors {
        if h.offset != expected_offset {
            return Err(Error::MalformedFile(format!(
                "`{name}` declares offset {} but payload position is {expected_offset}",
                h.offset
            )));
        }
        let numel = h
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(h.dtype.size_of()).is_some())
            .ok_or_else(|| Error::MalformedFile(format!("`{name}` shape overflows")))?;
        let nbytes = numel * h.dtype.size_of();
        let mut raw = vec![0u8; nbytes];
        read_exact_or_malformed(&mut r, &mut raw, "payload")?;
        let data: Vec<f64> = match h.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        drop(raw);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(name));
        }
        let tensor = Tensor::with_dtype(h.dtype, h.shape, data)
            .map_err(|e| Error::MalformedFile(format!("`{name}`: {e}")))?;
        if h.kind == ParamKind::LinearWeight && !tensor.is_projectable() {
            return Err(Error::MalformedFile(format!(
                "`{name}` tagged linear_weight with shape {:?}",
                tensor.shape()
            )));
        }
        expected_offset += nbytes as u64;
        params.insert(
            name,
            Param {
                tensor,
                kind: h.kind,
            },
        );
    }

    let mut trailing = [0u8; 1];
    loop {
        match r.read(&mut trailing) {
            Ok(0) => break,
            Ok(_) => return Err(Error::MalformedFile("trailing bytes after payload".into())),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::Io(e)),
        }
    }

    Ok(Checkpoint::from_parts(params, metadata))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    read_checkpoint(bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file))
}
