use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Matrix};

pub const SHARD_MAGIC: [u8; 4] = *b"XDSH";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub dtype: DType,
    pub d_model: u32,
    pub n_tokens: u64,
}

impl ShardHeader {
    pub fn f32(d_model: usize, n_tokens: usize) -> Self {
        Self {
            dtype: DType::F32,
            d_model: d_model as u32,
            n_tokens: n_tokens as u64,
        }
    }

    pub fn payload_len(&self) -> u64 {
        self.n_tokens * self.d_model as u64 * self.dtype.size() as u64
    }

    pub fn to_bytes(&self) -> [u8; SHARD_HEADER_LEN] {
        let mut out = [0u8; SHARD_HEADER_LEN];
        out[0..4].copy_from_slice(&SHARD_MAGIC);
        out[4..8].copy_from_slice(&SHARD_VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.dtype.code().to_le_bytes());
        out[12..16].copy_from_slice(&self.d_model.to_le_bytes());
        out[16..24].copy_from_slice(&self.n_tokens.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; SHARD_HEADER_LEN]) -> Result<Self> {
        if b[0..4] != SHARD_MAGIC {
            return Err(Error::Format(format!("bad shard magic {:?}", &b[0..4])));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
        if version != SHARD_VERSION {
            return Err(Error::Format(format!("unsupported shard version {version}")));
        }
        let code = u32::from_le_bytes(b[8..12].try_into().unwrap());
        let dtype = match DType::from_code(code) {
            Some(DType::F32) => DType::F32,
            _ => return Err(Error::Format(format!("unsupported shard dtype code {code}"))),
        };
        Ok(Self {
            dtype,
            d_model: u32::from_le_bytes(b[12..16].try_into().unwrap()),
            n_tokens: u64::from_le_bytes(b[16..24].try_into().unwrap()),
        })
    }
}

/// Writes `header` followed by `rows`. The number of rows must equal
/// `header.n_tokens` and every row must have `d_model` entries.
pub fn write_shard<I, R>(path: &Path, header: &ShardHeader, rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f32]>,
{
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&header.to_bytes()).map_err(Error::io(path))?;

    let width = header.d_model as usize;
    let mut written = 0u64;
    let mut buf = Vec::with_capacity(width * 4);
    for row in rows {
        let row = row.as_ref();
        if row.len() != width {
            return Err(Error::shape("write_shard", width, format!("row {written} has {}", row.len())));
        }
        buf.clear();
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(Error::io(path))?;
        written += 1;
    }
    if written != header.n_tokens {
        return Err(Error::shape("write_shard", header.n_tokens, format!("{written} rows")));
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_matrix_shard(path: &Path, m: &Matrix<f32>) -> Result<()> {
    write_shard(path, &ShardHeader::f32(m.cols(), m.rows()), m.row_iter())
}

pub(crate) fn read_header_from(r: &mut impl Read, path: &Path) -> Result<ShardHeader> {
    let mut buf = [0u8; SHARD_HEADER_LEN];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: truncated shard header", path.display()))
        } else {
            Error::io(path)(e)
        }
    })?;
    ShardHeader::from_bytes(&buf)
}

/// Reads and validates a header, checking the file length against it.
pub fn read_header(path: &Path) -> Result<ShardHeader> {
    let mut f = File::open(path).map_err(Error::io(path))?;
    let header = read_header_from(&mut f, path)?;
    let len = f.metadata().map_err(Error::io(path))?.len();
    let expected = SHARD_HEADER_LEN as u64 + header.payload_len();
    if len != expected {
        return Err(Error::Format(format!(
            "{}: file is {len} bytes, header implies {expected}",
            path.display()
        )));
    }
    Ok(header)
}

pub fn read_shard(path: &Path) -> Result<(ShardHeader, Matrix<f32>)> {
    let header = read_header(path)?;
    let mut r = BufReader::new(File::open(path).map_err(Error::io(path))?);
    read_header_from(&mut r, path)?;
    let mut bytes = vec![0u8; header.payload_len() as usize];
    r.read_exact(&mut bytes).map_err(Error::io(path))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = Matrix::from_vec(header.n_tokens as usize, header.d_model as usize, data)?;
    Ok((header, m))
}
