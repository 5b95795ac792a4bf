use std::fs::File;
use std::io::{BufReader, Read};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::format::read_header_from;
use super::Manifest;

pub type PairBatch = (Matrix<f32>, Matrix<f32>);

/// A rewindable sequence of token-aligned batches.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Option<PairBatch>>;

    /// Restarts from the first token.
    fn rewind(&mut self) -> Result<()>;
}

struct OpenShard {
    path: PathBuf,
    reader: BufReader<File>,
    remaining: u64,
}

impl OpenShard {
    fn open(path: PathBuf) -> Result<Self> {
        let mut reader = BufReader::with_capacity(1 << 20, File::open(&path).map_err(Error::io(&path))?);
        let header = read_header_from(&mut reader, &path)?;
        Ok(Self {
            path,
            reader,
            remaining: header.n_tokens,
        })
    }

    fn read_rows(&mut self, n: usize, out: &mut Vec<f32>, width: usize, scratch: &mut Vec<u8>) -> Result<()> {
        scratch.resize(n * width * 4, 0);
        self.reader.read_exact(scratch).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format(format!("{}: payload shorter than header", self.path.display()))
            } else {
                Error::io(&self.path)(e)
            }
        })?;
        out.extend(scratch.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        self.remaining -= n as u64;
        Ok(())
    }
}

/// Streams token-aligned batches from a validated manifest. Batches cross
/// shard boundaries; only the last batch of a pass may be short.
pub struct PairedReader {
    pairs: Vec<(PathBuf, PathBuf)>,
    d_model: usize,
    total: u64,
    batch_size: usize,
    next_pair: usize,
    current: Option<(OpenShard, OpenShard)>,
    scratch: Vec<u8>,
}

impl PairedReader {
    pub fn new(manifest: &Manifest, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let (d_model, total) = manifest.validate()?;
        Ok(Self {
            pairs: manifest.shard_pairs().collect(),
            d_model,
            total,
            batch_size,
            next_pair: 0,
            current: None,
            scratch: Vec::new(),
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn total_tokens(&self) -> u64 {
        self.total
    }

    fn advance(&mut self) -> Result<bool> {
        while self.next_pair < self.pairs.len() {
            let (pa, pb) = self.pairs[self.next_pair].clone();
            self.next_pair += 1;
            let a = OpenShard::open(pa)?;
            let b = OpenShard::open(pb)?;
            if a.remaining != b.remaining {
                return Err(Error::Pairing(format!(
                    "{} has {} tokens but {} has {}",
                    a.path.display(),
                    a.remaining,
                    b.path.display(),
                    b.remaining
                )));
            }
            if a.remaining > 0 {
                self.current = Some((a, b));
                return Ok(true);
            }
        }
        self.current = None;
        Ok(false)
    }
}

impl BatchSource for PairedReader {
    fn next_batch(&mut self) -> Result<Option<PairBatch>> {
        let width = self.d_model;
        let mut a = Vec::with_capacity(self.batch_size * width);
        let mut b = Vec::with_capacity(self.batch_size * width);
        let mut rows = 0;
        while rows < self.batch_size {
            let exhausted = self.current.as_ref().is_none_or(|(s, _)| s.remaining == 0);
            if exhausted && !self.advance()? {
                break;
            }
            let (sa, sb) = self.current.as_mut().expect("advance opened a shard pair");
            let n = (self.batch_size - rows).min(sa.remaining as usize);
            sa.read_rows(n, &mut a, width, &mut self.scratch)?;
            sb.read_rows(n, &mut b, width, &mut self.scratch)?;
            rows += n;
        }
        if rows == 0 {
            return Ok(None);
        }
        Ok(Some((Matrix::from_vec(rows, width, a)?, Matrix::from_vec(rows, width, b)?)))
    }

    fn rewind(&mut self) -> Result<()> {
        self.next_pair = 0;
        self.current = None;
        Ok(())
    }
}

impl Iterator for PairedReader {
    type Item = Result<PairBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}

/// Validates `manifest` and streams its paired batches.
pub fn read_pair(manifest: &Manifest, batch_size: usize) -> Result<PairedReader> {
    PairedReader::new(manifest, batch_size)
}

/// Batches over activations already held in memory.
pub struct InMemoryPairs {
    a: Matrix<f32>,
    b: Matrix<f32>,
    batch_size: usize,
    pos: usize,
}

impl InMemoryPairs {
    pub fn new(a: Matrix<f32>, b: Matrix<f32>, batch_size: usize) -> Result<Self> {
        a.same_shape(&b, "InMemoryPairs")
            .map_err(|_| Error::Pairing(format!("{} rows vs {} rows", a.rows(), b.rows())))?;
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self { a, b, batch_size, pos: 0 })
    }
}

impl BatchSource for InMemoryPairs {
    fn next_batch(&mut self) -> Result<Option<PairBatch>> {
        if self.pos >= self.a.rows() {
            return Ok(None);
        }
        let end = (self.pos + self.batch_size).min(self.a.rows());
        let out = (self.a.slice_rows(self.pos, end), self.b.slice_rows(self.pos, end));
        self.pos = end;
        Ok(Some(out))
    }

    fn rewind(&mut self) -> Result<()> {
        self.pos = 0;
        Ok(())
    }
}
