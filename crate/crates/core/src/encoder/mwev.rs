//! `MWEV` matrix records: a little-endian header followed by a row-major
//! `f32` payload.
//!
//! ```text
//! "MWEV" | u32 version | u32 rows | u32 cols | u32 n | n bytes name
//!        | (version 2 only) u32 m | m bytes layer | rows*cols f32
//! ```

use std::path::Path;

use super::{EmbeddingSequence, EncoderError};

pub const MAGIC: &[u8; 4] = b"MWEV";

/// One decoded record. For embedding files `name` is the clip id; for
/// checkpoints it is the parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRecord {
    pub version: u32,
    pub name: String,
    pub layer: Option<String>,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<(), EncoderError> {
    let v = u32::try_from(v).map_err(|_| EncoderError::TooLarge(v))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Appends one record. `layer` selects version 2.
pub fn encode_record(
    buf: &mut Vec<u8>,
    name: &str,
    layer: Option<&str>,
    rows: usize,
    cols: usize,
    values: &[f32],
) -> Result<(), EncoderError> {
    if rows == 0 || cols == 0 {
        return Err(EncoderError::ZeroDimension { rows, cols });
    }
    if values.len() != rows * cols {
        return Err(EncoderError::DimensionMismatch {
            rows,
            cols,
            payload_values: values.len(),
        });
    }
    buf.extend_from_slice(MAGIC);
    put_u32(buf, if layer.is_some() { 2 } else { 1 })?;
    put_u32(buf, rows)?;
    put_u32(buf, cols)?;
    put_u32(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    if let Some(layer) = layer {
        put_u32(buf, layer.len())?;
        buf.extend_from_slice(layer.as_bytes());
    }
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], EncoderError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(EncoderError::TruncatedHeader(what));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, EncoderError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &'static str) -> Result<String, EncoderError> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| EncoderError::InvalidUtf8(what))
    }
}

/// Decodes the record starting at `bytes[0]`, returning it and the number of
/// bytes consumed. The payload may be followed by further records.
pub fn decode_record(bytes: &[u8]) -> Result<(MatrixRecord, usize), EncoderError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic").map_err(|_| EncoderError::BadMagic)? != MAGIC {
        return Err(EncoderError::BadMagic);
    }
    let version = c.u32("version")? as u32;
    if version != 1 && version != 2 {
        return Err(EncoderError::UnsupportedVersion(version));
    }
    let rows = c.u32("rows")?;
    let cols = c.u32("cols")?;
    let name = c.string("name")?;
    let layer = if version == 2 { Some(c.string("layer")?) } else { None };
    if rows == 0 || cols == 0 {
        return Err(EncoderError::ZeroDimension { rows, cols });
    }
    let n = rows.checked_mul(cols).ok_or(EncoderError::TooLarge(rows))?;
    let available = bytes.len() - c.pos;
    if available < n * 4 {
        return Err(EncoderError::TruncatedPayload {
            expected_bytes: n * 4,
            found_bytes: available,
        });
    }
    let values: Vec<f32> = bytes[c.pos..c.pos + n * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EncoderError::NonFinite(name));
    }
    Ok((
        MatrixRecord {
            version,
            name,
            layer,
            rows,
            cols,
            values,
        },
        c.pos + n * 4,
    ))
}

/// Decodes a buffer holding exactly one record.
pub fn decode_single(bytes: &[u8]) -> Result<MatrixRecord, EncoderError> {
    let (rec, used) = decode_record(bytes)?;
    if used != bytes.len() {
        return Err(EncoderError::DimensionMismatch {
            rows: rec.rows,
            cols: rec.cols,
            payload_values: (bytes.len() - used) / 4 + rec.values.len(),
        });
    }
    Ok(rec)
}

/// Decodes a buffer of back-to-back records.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<MatrixRecord>, EncoderError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (rec, used) = decode_record(&bytes[pos..])?;
        out.push(rec);
        pos += used;
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, EncoderError> {
    std::fs::read(path).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), EncoderError> {
    std::fs::write(path, bytes).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// An embedding file's header metadata plus its sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub clip_id: String,
    pub version: u32,
    pub layer: Option<String>,
    pub sequence: EmbeddingSequence,
}

pub fn write_embedding_file(
    seq: &EmbeddingSequence,
    clip_id: &str,
    path: &Path,
) -> Result<(), EncoderError> {
    let mut buf = Vec::new();
    encode_record(&mut buf, clip_id, None, seq.frames(), seq.width(), seq.values())?;
    write_bytes(path, &buf)
}

/// Writes the version-2 layout carrying the tapped layer's name.
pub fn write_embedding_file_v2(
    seq: &EmbeddingSequence,
    clip_id: &str,
    layer: &str,
    path: &Path,
) -> Result<(), EncoderError> {
    let mut buf = Vec::new();
    encode_record(&mut buf, clip_id, Some(layer), seq.frames(), seq.width(), seq.values())?;
    write_bytes(path, &buf)
}

pub fn parse_embedding_file(bytes: &[u8]) -> Result<EmbeddingFile, EncoderError> {
    let rec = decode_single(bytes)?;
    Ok(EmbeddingFile {
        clip_id: rec.name,
        version: rec.version,
        layer: rec.layer,
        sequence: EmbeddingSequence::new(rec.rows, rec.cols, rec.values)?,
    })
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingFile, EncoderError> {
    parse_embedding_file(&read_bytes(path)?)
}

pub fn read_records(path: &Path) -> Result<Vec<MatrixRecord>, EncoderError> {
    decode_all(&read_bytes(path)?)
}
