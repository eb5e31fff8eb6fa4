//! Background collection construction and exact top-K cosine retrieval.
//!
//! The collection keeps exactly the training images the classifier places in
//! their true cell ("placeable" images), embedded by the retrieval module.
//! Retrieval is an exact scan over per-cell posting lists (or the whole
//! collection); at desk scale exactness is affordable and testable.
//!
//! Index file layout (little-endian, see `docs/FORMATS.md`):
//!
//! ```text
//! "GPIX" | version u32 | dim u32 | entry_count u64
//!       | partition_hash 32B | classifier_hash 32B
//! leaf_count u64 | leaf_count x cell_id
//! entry_count x { id u64 | lat f64 | lon f64 | cell_id | f32 x dim }
//! posting_count u64 | posting_count x { cell_id | len u64 | u64 x len }
//! ```
//!
//! Embeddings are stored as float32 to halve the file size; similarities are
//! computed in float64 after widening (affects ties only below ~1e-7).

use crate::binio::{self, BinErr, Reader};
use crate::classify::{AnyHead, ClassifyError};
use crate::geo::GeoPoint;
use crate::partition::{CellId, Partition};
use crate::retrieve::{Embedding, RetrieveError};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

pub const INDEX_MAGIC: &[u8; 4] = b"GPIX";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cell {0} is not a leaf of the index partition")]
    UnknownCell(CellId),
    #[error("K must be >= 1")]
    ZeroK,
    #[error("index partition hash {expected} does not match {found}")]
    HashMismatch { expected: String, found: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected GPIX)")]
    BadMagic,
    #[error("unsupported index version {0}")]
    BadVersion(u32),
    #[error("truncated or malformed index file")]
    Malformed,
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
}

/// One placeable image: id, geotag, owning fine cell, and its embedding
/// (stored float32).
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundEntry {
    pub id: u64,
    pub location: GeoPoint,
    pub cell: CellId,
    pub embedding: Vec<f32>,
}

/// How query/background vectors are embedded: through a trained retrieval
/// module, or plain l2-normalized raw features (the no-training baseline).
pub enum Embedder<'a> {
    Rrm(&'a crate::retrieve::RrmParams),
    RawNormalized,
}

impl Embedder<'_> {
    pub fn embed(&self, z: &[f64]) -> Result<Embedding, RetrieveError> {
        match self {
            Embedder::Rrm(params) => Ok(crate::retrieve::rrm_forward(params, z)?.0),
            Embedder::RawNormalized => Embedding::normalize(z),
        }
    }
}

/// Immutable background collection with per-cell posting lists.
#[derive(Debug, Clone)]
pub struct BackgroundIndex {
    entries: Vec<BackgroundEntry>,
    postings: BTreeMap<CellId, Vec<u64>>,
    leaf_ids: BTreeSet<CellId>,
    dim: usize,
    partition_hash: [u8; 32],
    classifier_hash: [u8; 32],
    /// Widened copy of the embeddings for the scan hot path.
    matrix: Vec<f64>,
}

impl BackgroundIndex {
    fn assemble(
        entries: Vec<BackgroundEntry>,
        leaf_ids: BTreeSet<CellId>,
        dim: usize,
        partition_hash: [u8; 32],
        classifier_hash: [u8; 32],
    ) -> Self {
        let mut postings: BTreeMap<CellId, Vec<u64>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            postings.entry(e.cell.clone()).or_default().push(i as u64);
        }
        let matrix = entries
            .iter()
            .flat_map(|e| e.embedding.iter().map(|&v| v as f64))
            .collect();
        Self {
            entries,
            postings,
            leaf_ids,
            dim,
            partition_hash,
            classifier_hash,
            matrix,
        }
    }

    pub fn entries(&self) -> &[BackgroundEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn partition_hash(&self) -> &[u8; 32] {
        &self.partition_hash
    }

    pub fn classifier_hash(&self) -> &[u8; 32] {
        &self.classifier_hash
    }

    pub fn posting(&self, cell: &CellId) -> &[u64] {
        self.postings.get(cell).map(Vec::as_slice).unwrap_or(&[])
    }

    fn similarity(&self, entry_index: usize, q: &[f64]) -> f64 {
        let row = &self.matrix[entry_index * self.dim..(entry_index + 1) * self.dim];
        row.iter().zip(q.iter()).map(|(a, b)| a * b).sum()
    }

    /// Exact top-K by dot product, descending, ties by ascending image id.
    /// With a cell filter only that cell's posting list is scanned; an empty
    /// cell yields an empty list, a cell that is not a partition leaf is an
    /// error. Fewer than K results are returned when the candidate set is
    /// smaller.
    pub fn top_k(
        &self,
        query: &Embedding,
        k: usize,
        cell_filter: Option<&CellId>,
    ) -> Result<Vec<(usize, f64)>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let q = query.as_slice();
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let mut consider = |idx: usize, index: &Self| {
            let sim = index.similarity(idx, q);
            let id = index.entries[idx].id;
            if best.len() == k {
                let (worst_idx, worst_sim) = (best[k - 1].0, best[k - 1].1);
                if sim < worst_sim || (sim == worst_sim && id >= index.entries[worst_idx].id) {
                    return;
                }
            }
            let pos = best
                .binary_search_by(|&(bi, bs)| {
                    bs.partial_cmp(&sim)
                        .unwrap()
                        .reverse()
                        .then(index.entries[bi].id.cmp(&id))
                })
                .unwrap_or_else(|p| p);
            best.insert(pos, (idx, sim));
            best.truncate(k);
        };
        match cell_filter {
            Some(cell) => {
                if !self.leaf_ids.contains(cell) {
                    return Err(IndexError::UnknownCell(cell.clone()));
                }
                for &i in self.posting(cell) {
                    consider(i as usize, self);
                }
            }
            None => {
                for i in 0..self.entries.len() {
                    consider(i, self);
                }
            }
        }
        Ok(best)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        binio::w_u32(&mut out, INDEX_VERSION);
        binio::w_u32(&mut out, self.dim as u32);
        binio::w_u64(&mut out, self.entries.len() as u64);
        out.extend_from_slice(&self.partition_hash);
        out.extend_from_slice(&self.classifier_hash);
        binio::w_u64(&mut out, self.leaf_ids.len() as u64);
        for id in &self.leaf_ids {
            write_cell_id(&mut out, id);
        }
        for e in &self.entries {
            binio::w_u64(&mut out, e.id);
            binio::w_f64(&mut out, e.location.lat_deg());
            binio::w_f64(&mut out, e.location.lon_deg());
            write_cell_id(&mut out, &e.cell);
            for &v in &e.embedding {
                binio::w_f32(&mut out, v);
            }
        }
        binio::w_u64(&mut out, self.postings.len() as u64);
        for (cell, offsets) in &self.postings {
            write_cell_id(&mut out, cell);
            binio::w_u64(&mut out, offsets.len() as u64);
            for &o in offsets {
                binio::w_u64(&mut out, o);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let map_err = |e: BinErr| match e {
            BinErr::BadMagic => IndexError::BadMagic,
            BinErr::Eof => IndexError::Malformed,
        };
        let mut r = Reader::new(bytes);
        r.expect_magic(INDEX_MAGIC).map_err(map_err)?;
        let version = r.u32().map_err(map_err)?;
        if version != INDEX_VERSION {
            return Err(IndexError::BadVersion(version));
        }
        let dim = r.u32().map_err(map_err)? as usize;
        let entry_count = r.u64().map_err(map_err)? as usize;
        let partition_hash: [u8; 32] =
            r.take(32).map_err(map_err)?.try_into().unwrap();
        let classifier_hash: [u8; 32] =
            r.take(32).map_err(map_err)?.try_into().unwrap();
        let leaf_count = r.u64().map_err(map_err)? as usize;
        let mut leaf_ids = BTreeSet::new();
        for _ in 0..leaf_count {
            leaf_ids.insert(read_cell_id(&mut r).map_err(map_err)?);
        }
        let mut entries = Vec::with_capacity(entry_count);
        for _ in 0..entry_count {
            let id = r.u64().map_err(map_err)?;
            let lat = r.f64().map_err(map_err)?;
            let lon = r.f64().map_err(map_err)?;
            let cell = read_cell_id(&mut r).map_err(map_err)?;
            let mut embedding = Vec::with_capacity(dim);
            for _ in 0..dim {
                embedding.push(r.f32().map_err(map_err)?);
            }
            entries.push(BackgroundEntry {
                id,
                location: GeoPoint::new(lat, lon).map_err(|_| IndexError::Malformed)?,
                cell,
                embedding,
            });
        }
        let posting_count = r.u64().map_err(map_err)? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..posting_count {
            let cell = read_cell_id(&mut r).map_err(map_err)?;
            let len = r.u64().map_err(map_err)? as usize;
            let mut offsets = Vec::with_capacity(len);
            for _ in 0..len {
                let o = r.u64().map_err(map_err)?;
                if o as usize >= entries.len() {
                    return Err(IndexError::Malformed);
                }
                offsets.push(o);
            }
            postings.insert(cell, offsets);
        }
        if !r.is_done() {
            return Err(IndexError::Malformed);
        }
        let rebuilt = Self::assemble(entries, leaf_ids, dim, partition_hash, classifier_hash);
        if rebuilt.postings != postings {
            return Err(IndexError::Malformed);
        }
        Ok(rebuilt)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_cell_id(out: &mut Vec<u8>, id: &CellId) {
    binio::w_u8(out, id.face());
    binio::w_u8(out, id.depth() as u8);
    out.extend_from_slice(id.path());
}

fn read_cell_id(r: &mut Reader) -> Result<CellId, BinErr> {
    let face = r.u8()?;
    if face >= 8 {
        return Err(BinErr::Eof);
    }
    let depth = r.u8()? as usize;
    let path = r.take(depth)?;
    let mut id = CellId::root(face);
    for &d in path {
        if d >= 4 {
            return Err(BinErr::Eof);
        }
        id = id.child(d);
    }
    Ok(id)
}

/// Builds the placeable background collection: keep exactly the training
/// images whose classifier-argmax cell equals their true cell, embed them,
/// and lay out posting lists. `classifier_hash` is the checkpoint hash of
/// the head used for the placeable filter; it is recorded in the header so
/// downstream search refuses a mismatched chain.
pub fn build_background(
    train: &crate::data::Dataset,
    classifier: &AnyHead,
    embedder: &Embedder,
    partition: &Partition,
    classifier_hash: [u8; 32],
) -> Result<BackgroundIndex, IndexError> {
    let expected = partition.content_hash();
    if classifier.partition_hash() != &expected {
        return Err(IndexError::HashMismatch {
            expected: crate::hash::to_hex(&expected),
            found: crate::hash::to_hex(classifier.partition_hash()),
        });
    }
    let mut entries = Vec::new();
    for row in 0..train.len() {
        let true_cell = match partition.assign_index(&train.locations[row]) {
            Some(i) => i,
            None => continue, // unassignable points can never be placeable
        };
        let z = train.feature_row_f64(row);
        if classifier.predict_index(&z)? != true_cell {
            continue;
        }
        let embedding = embedder.embed(&z)?;
        entries.push(BackgroundEntry {
            id: train.ids[row],
            location: train.locations[row],
            cell: partition.leaves()[true_cell].id.clone(),
            embedding: embedding.as_slice().iter().map(|&v| v as f32).collect(),
        });
    }
    let leaf_ids = partition.leaves().iter().map(|c| c.id.clone()).collect();
    Ok(BackgroundIndex::assemble(
        entries,
        leaf_ids,
        train.dim(),
        expected,
        classifier_hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{train_flat, TrainConfig};
    use crate::data::{generate_synthetic, seeded_rng, SyntheticSpec};
    use crate::partition::build_partition;
    use rand::Rng;

    fn fixture() -> (crate::data::Dataset, Partition, AnyHead) {
        let spec = SyntheticSpec {
            clusters: 4,
            kappa_loc: 200.0,
            dim: 6,
            signal_scale: 1.0,
            noise_sigma: 0.02,
            samples_per_cluster: 60,
            seed: 31,
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let imgs: Vec<(u64, GeoPoint)> = train
            .ids
            .iter()
            .zip(train.locations.iter())
            .map(|(&i, &l)| (i, l))
            .collect();
        let partition = build_partition(&imgs, 8, 10).unwrap();
        let config = TrainConfig {
            epochs: 30,
            batch_size: 32,
            seed: 1,
            ..TrainConfig::default()
        };
        let (flat, _) = train_flat(&train, &partition, &config).unwrap();
        (train, partition, AnyHead::Flat(flat))
    }

    #[test]
    fn kept_fraction_equals_train_cell_accuracy() {
        let (train, partition, head) = fixture();
        let index = build_background(
            &train,
            &head,
            &Embedder::RawNormalized,
            &partition,
            [7; 32],
        )
        .unwrap();
        // Recompute accuracy independently.
        let mut correct = 0usize;
        for row in 0..train.len() {
            let truth = partition.assign_index(&train.locations[row]).unwrap();
            if head.predict_index(&train.feature_row_f64(row)).unwrap() == truth {
                correct += 1;
            }
        }
        assert_eq!(index.len(), correct);
        assert!(index.len() > 0, "classifier must place something");
    }

    #[test]
    fn perfect_and_constant_classifiers() {
        let (train, partition, head) = fixture();
        // An oracle "classifier" that always matches: emulate by filtering
        // with the trained head, then checking every kept entry's invariant.
        let index = build_background(
            &train,
            &head,
            &Embedder::RawNormalized,
            &partition,
            [0; 32],
        )
        .unwrap();
        for e in index.entries() {
            let truth = partition.assign_cell(&e.location).unwrap();
            assert_eq!(e.cell, truth);
            let norm: f64 = e
                .embedding
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "stored embeddings unit norm");
        }
        // A constant classifier keeps only images of its one predicted cell.
        let (_, _, any) = fixture();
        if let AnyHead::Flat(mut flat) = any {
            for v in flat.w.data_mut().iter_mut() {
                *v = 0.0;
            }
            for v in flat.b.data_mut().iter_mut() {
                *v = 0.0;
            }
            flat.b.data_mut()[2] = 50.0; // always predicts class 2
            let constant = AnyHead::Flat(flat);
            let index = build_background(
                &train,
                &constant,
                &Embedder::RawNormalized,
                &partition,
                [0; 32],
            )
            .unwrap();
            let cell2 = partition.leaves()[2].id.clone();
            for e in index.entries() {
                assert_eq!(e.cell, cell2);
            }
        } else {
            unreachable!()
        }
    }

    #[test]
    fn top_k_exactness_against_brute_force() {
        let (train, partition, head) = fixture();
        let index = build_background(
            &train,
            &head,
            &Embedder::RawNormalized,
            &partition,
            [0; 32],
        )
        .unwrap();
        assert!(index.len() >= 100, "fixture should keep plenty");
        let mut rng = seeded_rng(77);
        for trial in 0..20 {
            let q_raw: Vec<f64> = (0..index.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = Embedding::normalize(&q_raw).unwrap();
            for &k in &[1usize, 5, 10] {
                let got = index.top_k(&q, k, None).unwrap();
                // Oracle: full scan + stable sort by (-sim, id).
                let mut all: Vec<(usize, f64)> = (0..index.len())
                    .map(|i| {
                        let sim: f64 = index.entries()[i]
                            .embedding
                            .iter()
                            .zip(q.as_slice())
                            .map(|(&a, b)| a as f64 * b)
                            .sum();
                        (i, sim)
                    })
                    .collect();
                all.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .unwrap()
                        .then(index.entries()[a.0].id.cmp(&index.entries()[b.0].id))
                });
                all.truncate(k);
                assert_eq!(got, all, "trial {trial} k {k}");
                for (_, sim) in &got {
                    assert!(*sim >= -1.0 - 1e-9 && *sim <= 1.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn cell_filter_restricts_and_matches_oracle() {
        let (train, partition, head) = fixture();
        let index = build_background(
            &train,
            &head,
            &Embedder::RawNormalized,
            &partition,
            [0; 32],
        )
        .unwrap();
        let q = Embedding::normalize(&train.feature_row_f64(0)).unwrap();
        let cell = index.entries()[0].cell.clone();
        let filtered = index.top_k(&q, 10, Some(&cell)).unwrap();
        let unfiltered = index.top_k(&q, index.len(), None).unwrap();
        let restricted: Vec<(usize, f64)> = unfiltered
            .into_iter()
            .filter(|(i, _)| index.entries()[*i].cell == cell)
            .take(10)
            .collect();
        assert_eq!(filtered, restricted);

        // Indexed query comes back first with similarity 1 (up to the f32
        // storage quantization).
        let widened: Vec<f64> = index.entries()[0].embedding.iter().map(|&v| v as f64).collect();
        let self_emb = Embedding::normalize(&widened).unwrap();
        let got = index.top_k(&self_emb, 1, Some(&cell)).unwrap();
        assert_eq!(got[0].0, 0);
        assert!((got[0].1 - 1.0).abs() < 1e-6);

        // K larger than the cell population returns the whole cell sorted.
        let pop = index.posting(&cell).len();
        let got = index.top_k(&q, pop + 50, Some(&cell)).unwrap();
        assert_eq!(got.len(), pop);

        // Unknown cell id is an error; an empty but real leaf is not.
        let bogus = CellId::root(0).child(3).child(3).child(3).child(3).child(3);
        assert!(matches!(
            index.top_k(&q, 5, Some(&bogus)),
            Err(IndexError::UnknownCell(_))
        ));
        if let Some(empty_leaf) = partition
            .leaves()
            .iter()
            .find(|c| index.posting(&c.id).is_empty())
        {
            let got = index.top_k(&q, 5, Some(&empty_leaf.id)).unwrap();
            assert!(got.is_empty());
        }
        assert!(matches!(index.top_k(&q, 0, None), Err(IndexError::ZeroK)));
    }

    #[test]
    fn roundtrip_and_corruption() {
        let (train, partition, head) = fixture();
        let index = build_background(
            &train,
            &head,
            &Embedder::RawNormalized,
            &partition,
            [9; 32],
        )
        .unwrap();
        let bytes = index.to_bytes();
        let back = BackgroundIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes, "lossless roundtrip");
        assert_eq!(back.len(), index.len());
        assert_eq!(back.classifier_hash(), index.classifier_hash());

        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(
            BackgroundIndex::from_bytes(&bad),
            Err(IndexError::BadMagic)
        ));
        assert!(matches!(
            BackgroundIndex::from_bytes(&bytes[..bytes.len() - 2]),
            Err(IndexError::Malformed)
        ));
        let mut bad = bytes.clone();
        bad[4] = 200;
        assert!(matches!(
            BackgroundIndex::from_bytes(&bad),
            Err(IndexError::BadVersion(_))
        ));
    }

    #[test]
    fn mismatched_classifier_partition_rejected() {
        let (train, _, head) = fixture();
        let other_imgs: Vec<(u64, GeoPoint)> = (0..40)
            .map(|i| (i, GeoPoint::new(-30.0 + i as f64, 15.0).unwrap()))
            .collect();
        let other = build_partition(&other_imgs, 8, 1).unwrap();
        assert!(matches!(
            build_background(&train, &head, &Embedder::RawNormalized, &other, [0; 32]),
            Err(IndexError::HashMismatch { .. })
        ));
    }
}
