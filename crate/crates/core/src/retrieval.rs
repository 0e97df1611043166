//! Exact k-nearest-neighbour search over unit-norm global descriptors.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::GeoTag;
use crate::representation::GlobalDescriptor;
use crate::tensor::ByteCursor;

pub const INDEX_MAGIC: &[u8; 4] = b"GUIX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub image_id: String,
    pub descriptor: GlobalDescriptor,
    pub geo_tag: GeoTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Row of the entry inside its index.
    pub row: usize,
    pub image_id: String,
    /// Cosine similarity with the query.
    pub score: f32,
    /// Euclidean distance to the query.
    pub distance: f32,
    pub geo_tag: GeoTag,
}

/// Top-k results, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub hits: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.hits.iter().map(|c| c.image_id.clone()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    ids: Vec<String>,
    geo_tags: Vec<GeoTag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Index {
    dim: usize,
    ids: Vec<String>,
    tags: Vec<GeoTag>,
    rows: Vec<f32>,
    sq_norms: Vec<f64>,
}

fn sq_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| v as f64 * v as f64).sum()
}

impl Index {
    pub fn build(entries: Vec<IndexEntry>) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::arg("cannot build an empty index"))?;
        let dim = first.descriptor.dim();
        let mut seen = HashSet::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut tags = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len() * dim);
        for e in entries {
            if e.descriptor.dim() != dim {
                return Err(Error::dim(format!(
                    "entry {} has dimension {}, index has {dim}",
                    e.image_id,
                    e.descriptor.dim()
                )));
            }
            if !seen.insert(e.image_id.clone()) {
                return Err(Error::DuplicateId(e.image_id));
            }
            e.geo_tag.validate()?;
            rows.extend_from_slice(e.descriptor.as_slice());
            ids.push(e.image_id);
            tags.push(e.geo_tag);
        }
        Ok(Self::from_parts(dim, ids, tags, rows))
    }

    fn from_parts(dim: usize, ids: Vec<String>, tags: Vec<GeoTag>, rows: Vec<f32>) -> Self {
        let sq_norms = rows.chunks_exact(dim).map(sq_norm).collect();
        Index { dim, ids, tags, rows, sq_norms }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn geo_tag(&self, i: usize) -> &GeoTag {
        &self.tags[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// The `k` entries nearest to `query`, ties broken by ascending id.
    pub fn knn_query(&self, query: &GlobalDescriptor, k: usize) -> Result<CandidateSet> {
        if query.dim() != self.dim {
            return Err(Error::dim(format!("query has dimension {}, index has {}", query.dim(), self.dim)));
        }
        if k == 0 || k > self.len() {
            return Err(Error::arg(format!("k = {k} must be in 1..={}", self.len())));
        }
        let q = query.as_slice();
        let q_sq = sq_norm(q);
        // (squared distance, cosine) per row, accumulated in f64
        let scored: Vec<(f64, f64)> = self
            .rows
            .chunks_exact(self.dim)
            .zip(&self.sq_norms)
            .map(|(row, &r_sq)| {
                let dot: f64 = row.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum();
                ((q_sq + r_sq - 2.0 * dot).max(0.0), dot)
            })
            .collect();
        let cmp = |a: &usize, b: &usize| -> Ordering {
            scored[*a].0.total_cmp(&scored[*b].0).then_with(|| self.ids[*a].cmp(&self.ids[*b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        let hits = order
            .into_iter()
            .map(|i| Candidate {
                row: i,
                image_id: self.ids[i].clone(),
                score: scored[i].1 as f32,
                distance: scored[i].0.sqrt() as f32,
                geo_tag: self.tags[i],
            })
            .collect();
        Ok(CandidateSet { hits })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.rows.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let meta = serde_json::to_vec(&Metadata { ids: self.ids.clone(), geo_tags: self.tags.clone() })
            .expect("metadata serialises");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes, origin);
        if cur.take(4)? != INDEX_MAGIC {
            return Err(Error::corrupt(origin, "bad magic, not an index file"));
        }
        let version = cur.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Version { expected: INDEX_VERSION, found: version });
        }
        let n = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        if n == 0 || dim == 0 {
            return Err(Error::corrupt(origin, "empty index header"));
        }
        let payload = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::corrupt(origin, "index size overflows"))?;
        let rows: Vec<f32> = cur
            .take(payload)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let meta_len = cur.u64()? as usize;
        let meta: Metadata = serde_json::from_slice(cur.take(meta_len)?)
            .map_err(|e| Error::corrupt(origin, format!("metadata: {e}")))?;
        if !cur.is_empty() {
            return Err(Error::corrupt(origin, "trailing bytes after metadata"));
        }
        if meta.ids.len() != n || meta.geo_tags.len() != n {
            return Err(Error::corrupt(origin, "metadata length does not match header"));
        }
        let mut seen = HashSet::new();
        if !meta.ids.iter().all(|id| seen.insert(id)) {
            return Err(Error::corrupt(origin, "duplicate ids in metadata"));
        }
        Ok(Self::from_parts(dim, meta.ids, meta.geo_tags, rows))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tag() -> GeoTag {
        GeoTag::new((0.0, 0.0), 1.0, 96).unwrap()
    }

    fn entry(id: &str, v: Vec<f32>) -> IndexEntry {
        IndexEntry {
            image_id: id.into(),
            descriptor: GlobalDescriptor::normalized(Tensor::from_vec(v)).unwrap(),
            geo_tag: tag(),
        }
    }

    #[test]
    fn single_entry_and_self_query() {
        let e = entry("a", vec![1.0, 2.0, 2.0]);
        let q = e.descriptor.clone();
        let idx = Index::build(vec![e]).unwrap();
        let c = idx.knn_query(&q, 1).unwrap();
        assert_eq!(c.hits[0].image_id, "a");
        assert!(c.hits[0].distance < 1e-6);
        assert!((c.hits[0].score - 1.0).abs() < 1e-6);
        assert!(idx.knn_query(&q, 2).is_err());
        assert!(idx.knn_query(&q, 0).is_err());
    }

    #[test]
    fn build_errors() {
        assert!(Index::build(vec![]).is_err());
        let dup = Index::build(vec![entry("a", vec![1.0, 0.0]), entry("a", vec![0.0, 1.0])]);
        assert!(matches!(dup, Err(Error::DuplicateId(_))));
        let mixed = Index::build(vec![entry("a", vec![1.0, 0.0]), entry("b", vec![0.0, 1.0, 0.0])]);
        assert!(matches!(mixed, Err(Error::Dimension(_))));
    }

    #[test]
    fn orthonormal_ties_by_id() {
        let basis = |i: usize| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let entries = vec![entry("d", basis(3)), entry("b", basis(1)), entry("a", basis(0)), entry("c", basis(2))];
        let idx = Index::build(entries).unwrap();
        let q = GlobalDescriptor::new(Tensor::from_vec(basis(0))).unwrap();
        let c = idx.knn_query(&q, 4).unwrap();
        assert_eq!(c.ids(), vec!["a", "b", "c", "d"]);
        let q = GlobalDescriptor::new(Tensor::from_vec(basis(2))).unwrap();
        assert_eq!(idx.knn_query(&q, 4).unwrap().ids(), vec!["c", "a", "b", "d"]);
    }

    #[test]
    fn header_errors() {
        let idx = Index::build(vec![entry("a", vec![1.0, 0.0]), entry("b", vec![0.6, 0.8])]).unwrap();
        let bytes = idx.to_bytes();
        let p = Path::new("x.guix");
        assert_eq!(Index::from_bytes(&bytes, p).unwrap(), idx);
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(Index::from_bytes(&bytes[..cut], p), Err(Error::Corrupt { .. })));
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Index::from_bytes(&v2, p), Err(Error::Version { found: 2, .. })));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Index::from_bytes(&magic, p).is_err());
    }
}
