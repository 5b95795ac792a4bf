//! Top-N activating documents per latent.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crosscoder::{encode_inference, CrosscoderParams};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::shards::{Manifest, PairedReader};

pub const DEFAULT_EXEMPLARS: usize = 20;
pub const SNIPPET_CHARS: usize = 512;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub latent: usize,
    pub doc_id: u64,
    /// Pooled activation of the latent over the document.
    pub score: f64,
    /// Token offset of the peak activation within the document.
    pub peak_offset: u64,
    #[serde(default)]
    pub snippet: String,
    #[serde(default)]
    pub missing_text: bool,
}

/// At most `capacity` records, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub latent: usize,
    pub capacity: usize,
    pub records: Vec<ExemplarRecord>,
}

/// Heap entry ordered so the heap top is the weakest retained document.
#[derive(Debug, Clone, Copy)]
struct Entry {
    score: f64,
    doc_id: u64,
    peak: u64,
}

impl Entry {
    /// Greater means ranked lower: smaller score, then larger doc id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.doc_id.cmp(&other.doc_id))
    }
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

struct TopN {
    cap: usize,
    heap: BinaryHeap<Entry>,
}

impl TopN {
    fn push(&mut self, e: Entry) {
        if self.cap == 0 {
            return;
        }
        if self.heap.len() < self.cap {
            self.heap.push(e);
        } else if let Some(worst) = self.heap.peek() {
            if e.rank_cmp(worst) == Ordering::Less {
                self.heap.pop();
                self.heap.push(e);
            }
        }
    }
}

/// Running per-latent statistics of the current document.
#[derive(Clone, Copy)]
struct DocStat {
    max: f64,
    sum: f64,
    peak: u64,
}

/// Scans every document of `manifest` and keeps, per latent, the `n`
/// documents with the highest pooled activation (ties to the lower doc id).
/// Codes come from [`encode_inference`]; tokens outside any document are
/// ignored.
pub fn scan<T: Real>(
    manifest: &Manifest,
    params: &CrosscoderParams<T>,
    latents: &[usize],
    n: usize,
    pooling: Pooling,
    batch_size: usize,
) -> Result<BTreeMap<usize, ExemplarSet>> {
    let size = params.latents();
    if latents.is_empty() {
        return Err(Error::Input("no latents to scan".into()));
    }
    let mut slot_of = vec![None; size];
    for (s, &j) in latents.iter().enumerate() {
        if j >= size {
            return Err(Error::Bounds { latent: j, size });
        }
        slot_of[j].get_or_insert(s);
    }
    let mut heaps: Vec<TopN> = latents.iter().map(|_| TopN { cap: n, heap: BinaryHeap::new() }).collect();
    let docs = &manifest.documents;
    let mut reader = PairedReader::new(manifest, batch_size)?;
    let mut di = 0usize;
    let mut current: BTreeMap<usize, DocStat> = BTreeMap::new();
    let mut pos: u64 = 0;

    let flush = |di: usize, current: &mut BTreeMap<usize, DocStat>, heaps: &mut [TopN]| {
        let doc = &docs[di];
        let len = doc.n_tokens().max(1) as f64;
        for (&s, st) in current.iter() {
            let score = match pooling {
                Pooling::Max => st.max,
                Pooling::Mean => st.sum / len,
            };
            heaps[s].push(Entry {
                score,
                doc_id: doc.doc_id,
                peak: st.peak,
            });
        }
        current.clear();
    };

    for batch in &mut reader {
        let (a, b) = batch?;
        let codes = encode_inference(&a.cast::<T>(), &b.cast::<T>(), params)?;
        for t in 0..codes.tokens() {
            let g = pos + t as u64;
            while di < docs.len() && g >= docs[di].end {
                flush(di, &mut current, &mut heaps);
                di += 1;
            }
            if di >= docs.len() || g < docs[di].start {
                continue;
            }
            let off = g - docs[di].start;
            for (j, v) in codes.token(t) {
                let Some(s) = slot_of[j] else { continue };
                let v = v.to_f64().unwrap();
                let st = current.entry(s).or_insert(DocStat { max: v, sum: 0.0, peak: off });
                st.sum += v;
                if v > st.max {
                    st.max = v;
                    st.peak = off;
                }
            }
        }
        pos += codes.tokens() as u64;
    }
    if di < docs.len() {
        flush(di, &mut current, &mut heaps);
    }

    let mut out = BTreeMap::new();
    for (&j, h) in latents.iter().zip(heaps) {
        let mut entries = h.heap.into_vec();
        entries.sort();
        let records = entries
            .into_iter()
            .map(|e| ExemplarRecord {
                latent: j,
                doc_id: e.doc_id,
                score: e.score,
                peak_offset: e.peak,
                snippet: String::new(),
                missing_text: false,
            })
            .collect();
        out.insert(j, ExemplarSet { latent: j, capacity: n, records });
    }
    Ok(out)
}

/// Up to [`SNIPPET_CHARS`] characters of `text` centred on token `peak`.
/// Without per-token offsets the position is estimated proportionally.
pub fn snippet(text: &str, offsets: Option<&[u32]>, n_tokens: u64, peak: u64) -> String {
    let chars: Vec<char> = text.chars().collect();
    let centre = match offsets.and_then(|o| o.get(peak as usize)) {
        Some(&byte) if text.is_char_boundary(byte as usize) => text[..byte as usize].chars().count(),
        _ if n_tokens > 0 => ((peak as f64 + 0.5) / n_tokens as f64 * chars.len() as f64) as usize,
        _ => 0,
    };
    let end = (centre.saturating_sub(SNIPPET_CHARS / 2) + SNIPPET_CHARS).min(chars.len());
    let start = end.saturating_sub(SNIPPET_CHARS);
    chars[start..end].iter().collect()
}

/// Writes one JSON record per line, sets in latent order, with snippets
/// drawn from the manifest's document text.
pub fn export_exemplars(sets: &BTreeMap<usize, ExemplarSet>, manifest: &Manifest, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for set in sets.values() {
        for r in &set.records {
            let doc = manifest
                .document(r.doc_id)
                .ok_or_else(|| Error::Input(format!("document {} not in manifest", r.doc_id)))?;
            let mut rec = r.clone();
            match manifest.document_text(doc) {
                Some(text) => {
                    rec.snippet = snippet(&text, doc.token_char_offsets.as_deref(), doc.n_tokens(), r.peak_offset);
                    rec.missing_text = false;
                }
                None => {
                    log::warn!("document {} has no text; exporting an empty snippet", r.doc_id);
                    rec.snippet.clear();
                    rec.missing_text = true;
                }
            }
            serde_json::to_writer(&mut buf, &rec).map_err(|e| Error::Format(e.to_string()))?;
            buf.push(b'\n');
        }
    }
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&buf).map_err(Error::io(path))
}

/// Reads an export back, grouped by latent in file order.
pub fn read_exemplars(path: &Path) -> Result<BTreeMap<usize, Vec<ExemplarRecord>>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out: BTreeMap<usize, Vec<ExemplarRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ExemplarRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.entry(rec.latent).or_default().push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::shards::{write_matrix_shard, Document};

    /// Identity-like crosscoder over `d = 3`: latent `j` reads coordinate `j`
    /// of model A.
    fn params() -> CrosscoderParams<f32> {
        let mut p = CrosscoderParams::<f32>::zeros(3, 3);
        for j in 0..3 {
            p.enc_a.set(j, j, 1.0);
            p.dec_a.set(j, j, 1.0);
            p.dec_b.set(j, j, 1.0);
        }
        p.threshold = Some(0.0);
        p
    }

    fn corpus(dir: &Path, rows: &[[f32; 3]], docs: &[(u64, u64, u64)], text: bool) -> Manifest {
        let a = Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        write_matrix_shard(&dir.join("a.xdsh"), &a).unwrap();
        write_matrix_shard(&dir.join("b.xdsh"), &a).unwrap();
        let mut m = Manifest::new("a", "b", 0, "t");
        m.shards_a = vec!["a.xdsh".into()];
        m.shards_b = vec!["b.xdsh".into()];
        m.documents = docs
            .iter()
            .map(|&(id, s, e)| Document {
                doc_id: id,
                start: s,
                end: e,
                source: "web".into(),
                text: text.then(|| format!("doc {id} text")),
                text_path: None,
                token_char_offsets: None,
            })
            .collect();
        m.set_base_dir(dir);
        m
    }

    #[test]
    fn single_document_and_zero_capacity() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), &[[1.0, 0.0, 0.0], [0.5, 2.0, 0.0]], &[(7, 0, 2)], true);
        let sets = scan(&m, &params(), &[0, 1, 2], 5, Pooling::Max, 1).unwrap();
        assert_eq!(sets[&0].records.len(), 1);
        assert_eq!(sets[&0].records[0].doc_id, 7);
        assert_eq!(sets[&0].records[0].peak_offset, 0);
        assert_eq!(sets[&1].records[0].peak_offset, 1);
        assert!(sets[&2].records.is_empty());
        let empty = scan(&m, &params(), &[0, 1], 0, Pooling::Max, 1).unwrap();
        assert!(empty.values().all(|s| s.records.is_empty()));
        assert!(matches!(scan(&m, &params(), &[3], 5, Pooling::Max, 1), Err(Error::Bounds { latent: 3, .. })));
    }

    #[test]
    fn ranking_ties_and_pooling() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [[1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        // doc 9: tokens 0..2 (max 3, mean 2); doc 4: token 2 (max 3); doc 5: 3..6 (max 2, mean 4/3)
        let m = corpus(dir.path(), &rows, &[(9, 0, 2), (4, 2, 3), (5, 3, 6)], true);
        let sets = scan(&m, &params(), &[0], 2, Pooling::Max, 4).unwrap();
        let ids: Vec<u64> = sets[&0].records.iter().map(|r| r.doc_id).collect();
        assert_eq!(ids, vec![4, 9]);
        let sets = scan(&m, &params(), &[0], 3, Pooling::Mean, 4).unwrap();
        let got: Vec<(u64, f64)> = sets[&0].records.iter().map(|r| (r.doc_id, r.score)).collect();
        assert_eq!(got, vec![(4, 3.0), (9, 2.0), (5, 4.0 / 3.0)]);
    }

    #[test]
    fn batch_size_does_not_matter() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<[f32; 3]> = (0..50).map(|i| [((i * 7) % 11) as f32, ((i * 3) % 5) as f32, 0.0]).collect();
        let docs: Vec<(u64, u64, u64)> = (0..10).map(|d| (d, d * 5, d * 5 + 5)).collect();
        let m = corpus(dir.path(), &rows, &docs, true);
        let base = scan(&m, &params(), &[0, 1], 4, Pooling::Max, 50).unwrap();
        for bs in [1, 3, 7, 16] {
            assert_eq!(scan(&m, &params(), &[0, 1], 4, Pooling::Max, bs).unwrap(), base);
        }
    }

    #[test]
    fn snippet_bounds() {
        let text: String = (0..2000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let s = snippet(&text, None, 100, 50);
        assert_eq!(s.chars().count(), SNIPPET_CHARS);
        assert!(snippet("short", None, 1, 0) == "short");
        let offsets = vec![0u32, 1000, 1999];
        let s = snippet(&text, Some(&offsets), 3, 2);
        assert!(s.ends_with(&text[1999..]));
        assert_eq!(snippet("", Some(&[]), 0, 0), "");
        let wide = "é".repeat(1000);
        assert_eq!(snippet(&wide, None, 10, 5).chars().count(), SNIPPET_CHARS);
    }

    #[test]
    fn export_round_trip_and_missing_text() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), &[[1.0, 1.0, 0.0], [2.0, 0.0, 0.0]], &[(1, 0, 1), (2, 1, 2)], true);
        let sets = scan(&m, &params(), &[0, 1], 5, Pooling::Max, 2).unwrap();
        let path = dir.path().join("ex.jsonl");
        export_exemplars(&sets, &m, &path).unwrap();
        let back = read_exemplars(&path).unwrap();
        assert_eq!(back[&0].len(), 2);
        assert_eq!(back[&0][0].snippet, "doc 2 text");
        for (j, recs) in &back {
            for (r, orig) in recs.iter().zip(&sets[j].records) {
                assert_eq!((r.doc_id, r.score, r.peak_offset), (orig.doc_id, orig.score, orig.peak_offset));
            }
        }
        let m2 = corpus(dir.path(), &[[1.0, 1.0, 0.0], [2.0, 0.0, 0.0]], &[(1, 0, 1), (2, 1, 2)], false);
        export_exemplars(&sets, &m2, &path).unwrap();
        let back = read_exemplars(&path).unwrap();
        assert!(back[&0].iter().all(|r| r.missing_text && r.snippet.is_empty()));
    }
}
