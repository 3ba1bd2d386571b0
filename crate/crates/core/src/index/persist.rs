//! Little-endian binary persistence for [`VectorIndex`].
//!
//! Layout:
//!
//! ```text
//! magic "RACIDX1" | version u32
//! params: m u32 | ef_construction u32 | ef_search u32 | seed u64
//! rng:    key [u8; 32] | stream u64 | word_pos u128
//! dim u32 (0 = unset) | entry u32 (u32::MAX = none) | max_level u32 | count u32
//! records: { id_len u32, id utf8, meta_len u32, meta json utf8, level u32, vector f32 * dim } * count
//! adjacency: { for layer in 0..=level: { len u32, ids u32 * len } } * count
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HnswParams, IndexError, IndexRecord, Node, RecordMetadata, VectorIndex, MAX_LEVEL};
use crate::providers::EmbeddingVector;

pub const MAGIC: &[u8; 7] = b"RACIDX1";
pub const FORMAT_VERSION: u32 = 1;
const NO_ENTRY: u32 = u32::MAX;

impl VectorIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);

        put_u32(&mut out, self.params.m as u32);
        put_u32(&mut out, self.params.ef_construction as u32);
        put_u32(&mut out, self.params.ef_search as u32);
        out.extend_from_slice(&self.params.seed.to_le_bytes());

        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());

        put_u32(&mut out, self.dim.unwrap_or(0) as u32);
        put_u32(&mut out, self.entry.unwrap_or(NO_ENTRY));
        put_u32(&mut out, self.max_level as u32);
        put_u32(&mut out, self.nodes.len() as u32);

        for node in &self.nodes {
            let r = &node.record;
            put_bytes(&mut out, r.doc_id.as_bytes());
            let meta = serde_json::to_vec(&r.metadata).expect("metadata serializes");
            put_bytes(&mut out, &meta);
            put_u32(&mut out, node.level() as u32);
            for v in r.vector.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for node in &self.nodes {
            for layer in &node.links {
                put_u32(&mut out, layer.len() as u32);
                for &n in layer {
                    put_u32(&mut out, n);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.corrupt_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(IndexError::FormatVersionMismatch { found: version, expected: FORMAT_VERSION });
        }

        let params = HnswParams {
            m: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            ef_search: r.u32()? as usize,
            seed: r.u64()?,
        };
        let params_at = r.pos;
        params.validate().map_err(|e| r.corrupt_at(params_at, &e.to_string()))?;

        let key: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let dim = r.u32()? as usize;
        let entry = r.u32()?;
        let max_level = r.u32()? as usize;
        let count = r.u32()? as usize;
        if max_level > MAX_LEVEL {
            return Err(r.corrupt("max level out of range"));
        }
        if count > 0 && (dim == 0 || entry as usize >= count) {
            return Err(r.corrupt("header inconsistent with record count"));
        }
        if count == 0 && (dim != 0 || entry != NO_ENTRY) {
            return Err(r.corrupt("header inconsistent with empty index"));
        }

        let mut nodes = Vec::with_capacity(count.min(1 << 20));
        let mut by_id = HashMap::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let at = r.pos;
            let doc_id =
                String::from_utf8(r.bytes_prefixed()?.to_vec()).map_err(|_| r.corrupt_at(at, "doc_id is not utf-8"))?;
            let at = r.pos;
            let metadata: RecordMetadata =
                serde_json::from_slice(r.bytes_prefixed()?).map_err(|e| r.corrupt_at(at, &format!("metadata: {e}")))?;
            let level = r.u32()? as usize;
            if level > max_level {
                return Err(r.corrupt("node level above max level"));
            }
            let at = r.pos;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
            }
            let vector = EmbeddingVector::from_stored(values).map_err(|e| r.corrupt_at(at, &e.to_string()))?;
            if by_id.insert(doc_id.clone(), i as u32).is_some() {
                return Err(r.corrupt_at(at, "duplicate doc_id"));
            }
            nodes.push(Node { record: IndexRecord { doc_id, vector, metadata }, links: vec![Vec::new(); level + 1] });
        }
        let levels: Vec<usize> = nodes.iter().map(Node::level).collect();
        for node in nodes.iter_mut() {
            for (layer, links) in node.links.iter_mut().enumerate() {
                let len = r.u32()? as usize;
                if len > params.max_links(layer) {
                    return Err(r.corrupt("neighbor list over capacity"));
                }
                for _ in 0..len {
                    let n = r.u32()?;
                    if n as usize >= count || levels[n as usize] < layer {
                        return Err(r.corrupt("neighbor id out of range"));
                    }
                    links.push(n);
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(Self {
            params,
            dim: (count > 0).then_some(dim),
            nodes,
            by_id,
            entry: (entry != NO_ENTRY).then_some(entry),
            max_level,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: &str) -> IndexError {
        self.corrupt_at(self.pos, reason)
    }

    fn corrupt_at(&self, offset: usize, reason: &str) -> IndexError {
        IndexError::CorruptFile { offset, reason: reason.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt("unexpected end of file")),
        }
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, IndexError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn bytes_prefixed(&mut self) -> Result<&'a [u8], IndexError> {
        let len = self.u32()? as usize;
        self.take(len)
    }
}
