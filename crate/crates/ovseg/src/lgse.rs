//! Binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "LGSE"
//! version u32      currently 1
//! count   u32      number of entries
//! entry:  name_len u32, name bytes (UTF-8),
//!         dtype u8 (0 = f32, 1 = f64), rank u8,
//!         extents rank x u64,
//!         payload extents-product scalars, little-endian
//! ```
//!
//! Entries preserve insertion order. The dtype is chosen by each tensor's
//! precision tag: f32-precision tensors round-trip through 4-byte storage
//! (their values are already representable), f64 tensors keep full width.

use crate::tensor::{Precision, Tensor};
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LGSE";

/// Container format version, written after the magic and checked on load.
pub const VERSION: u32 = 1;

/// Serializes entries in order. Names may repeat at this layer; higher layers
/// decide whether that is meaningful.
pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(entries.len()).expect("entry count fits u32").to_le_bytes())?;
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&u32::try_from(name_bytes.len()).expect("name length fits u32").to_le_bytes())?;
        w.write_all(name_bytes)?;
        let dtype: u8 = match t.precision() {
            Precision::F32 => 0,
            Precision::F64 => 1,
        };
        w.write_all(&[dtype, u8::try_from(t.shape().len()).expect("rank fits u8")])?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        match t.precision() {
            Precision::F32 => {
                for &v in t.data() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Precision::F64 => {
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads back every entry in file order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
    }
    let count = read_u32(&mut r, "entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "entry name")?;
        let name = String::from_utf8(name_bytes).map_err(|e| Error::Parse {
            what: "entry name",
            detail: format!("entry {i}: {e}"),
        })?;
        let mut head = [0u8; 2];
        read_exact(&mut r, &mut head, "dtype and rank")?;
        let (dtype, rank) = (head[0], head[1] as usize);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, "extent")?;
            let e = u64::from_le_bytes(buf);
            shape.push(usize::try_from(e).map_err(|_| Error::Parse {
                what: "extent",
                detail: format!("entry '{name}': extent {e} does not fit usize"),
            })?);
        }
        let numel: usize = shape.iter().product();
        let tensor = match dtype {
            0 => {
                let mut data = Vec::with_capacity(numel);
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    read_payload(&mut r, &mut buf, &name, &shape, numel, &mut data)?;
                }
                Tensor::from_vec(&shape, data).with_precision(Precision::F32)
            }
            1 => {
                let mut data = Vec::with_capacity(numel);
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    read_payload(&mut r, &mut buf, &name, &shape, numel, &mut data)?;
                }
                Tensor::from_vec(&shape, data)
            }
            code => {
                return Err(Error::UnknownDtype { name, code });
            }
        };
        entries.push((name, tensor));
    }
    Ok(entries)
}

/// Loads entries and retrieves one by name, erroring when absent.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::MissingEntry(name.to_string()))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated { detail: format!("while reading {what}") }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads one scalar of the entry payload, mapping EOF to a payload-size error
/// that names the offending entry.
fn read_payload<R: Read, const N: usize>(
    r: &mut R,
    buf: &mut [u8; N],
    name: &str,
    shape: &[usize],
    expected: usize,
    data: &mut Vec<f64>,
) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::PayloadMismatch {
                name: name.to_string(),
                shape: shape.iter().map(|&s| s as u64).collect(),
                expected: expected as u64,
                actual: data.len() as u64,
            }
        } else {
            Error::Io(e)
        }
    })?;
    let v = match N {
        4 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
        8 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
        _ => unreachable!("payload scalar width"),
    };
    data.push(v);
    Ok(())
}
