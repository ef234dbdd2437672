//! Little-endian binary framing shared by the versioned file formats.
//!
//! Every on-disk artifact starts with an ASCII magic tag followed by a
//! `u32` format version. Readers reject unknown magics and versions
//! explicitly instead of misreading payload bytes.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_magic<W: Write>(w: &mut W, magic: &[u8], version: u32) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())
}

/// Reads and checks a magic tag + version. Returns the version on success.
pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8], max_version: u32) -> Result<u32> {
    let mut tag = vec![0u8; magic.len()];
    r.read_exact(&mut tag)
        .map_err(|_| Error::Format(format!("file too short for magic {:?}", ascii(magic))))?;
    if tag != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            ascii(magic),
            ascii(&tag)
        )));
    }
    let version = read_u32(r)?;
    if version == 0 || version > max_version {
        return Err(Error::Format(format!(
            "unsupported {:?} format version {version} (max supported {max_version})",
            ascii(magic)
        )));
    }
    Ok(version)
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("unexpected end of file reading u32".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("unexpected end of file reading {n} f32 values")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("unexpected end of file reading string".into()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("invalid UTF-8 string: {e}")))
}

fn ascii(bytes: &[u8]) -> String {
    bytes
        .iter()
        .map(|&b| {
            if b.is_ascii_graphic() {
                (b as char).to_string()
            } else {
                format!("\\x{b:02x}")
            }
        })
        .collect()
}
