//! Adaptive hierarchical partitioning of the sphere, driven by training-data
//! density.
//!
//! The sphere is covered by 8 base rectangles (2 latitude bands x 4 longitude
//! quadrants, 90 x 90 degrees each). The most-populated leaf is repeatedly
//! split into 4 children by bisecting both ranges; empty children are pruned
//! and never count as classes. One greedy run can emit nested
//! coarse/mid/fine snapshots whose leaves refine each other by construction.
//!
//! Rectangle semantics are half-open `[lo, hi)` in both axes, except that the
//! `+90` latitude edge is closed on the topmost cells. This is a plain
//! lat/lon quadtree, not cube-face geometry: cells are exactly testable
//! rectangles at the cost of area balance.

use crate::binio::{self, BinErr, Reader};
use crate::geo::{spherical_mean, GeoPoint};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

pub const PARTITION_MAGIC: &[u8; 4] = b"GPRT";
const PARTITION_VERSION: u32 = 1;

/// Bisection stops producing distinct float midpoints near this depth; cells
/// this deep are never selected for splitting.
pub const MAX_DEPTH: usize = 48;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("invalid partition config: {0}")]
    InvalidConfig(String),
    #[error("cell {0} has no ancestor leaf in this partition")]
    NotNested(CellId),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected GPRT)")]
    BadMagic,
    #[error("unsupported partition version {0}")]
    BadVersion(u32),
    #[error("truncated or malformed partition file")]
    Malformed,
}

/// Identifier of a quadtree cell: a base face in `0..8` plus the child index
/// (in `0..4`) taken at every split. Ordering is lexicographic (face first),
/// which is the tie-break order used everywhere.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId {
    face: u8,
    path: Vec<u8>,
}

impl CellId {
    pub fn root(face: u8) -> Self {
        assert!(face < 8);
        Self {
            face,
            path: Vec::new(),
        }
    }

    pub fn face(&self) -> u8 {
        self.face
    }

    pub fn path(&self) -> &[u8] {
        &self.path
    }

    pub fn depth(&self) -> usize {
        self.path.len()
    }

    pub fn child(&self, idx: u8) -> Self {
        assert!(idx < 4);
        let mut path = self.path.clone();
        path.push(idx);
        Self {
            face: self.face,
            path,
        }
    }

    pub fn parent(&self) -> Option<Self> {
        if self.path.is_empty() {
            return None;
        }
        let mut path = self.path.clone();
        path.pop();
        Some(Self {
            face: self.face,
            path,
        })
    }

    /// True when `self` is an ancestor of (or equal to) `other`.
    pub fn is_prefix_of(&self, other: &CellId) -> bool {
        self.face == other.face
            && self.path.len() <= other.path.len()
            && other.path[..self.path.len()] == self.path[..]
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.face)?;
        if !self.path.is_empty() {
            write!(f, ".")?;
            for d in &self.path {
                write!(f, "{d}")?;
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for CellId {
    type Err = PartitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PartitionError::InvalidConfig(format!("invalid cell id `{s}`"));
        let (face_s, path_s) = match s.split_once('.') {
            Some((f, p)) => (f, p),
            None => (s, ""),
        };
        let face: u8 = face_s.parse().map_err(|_| bad())?;
        if face >= 8 {
            return Err(bad());
        }
        let mut path = Vec::with_capacity(path_s.len());
        for c in path_s.chars() {
            let d = c.to_digit(10).ok_or_else(bad)? as u8;
            if d >= 4 {
                return Err(bad());
            }
            path.push(d);
        }
        Ok(Self { face, path })
    }
}

/// A leaf rectangle with its member images and centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: CellId,
    /// `[lo, hi)` degrees; `hi == 90` is closed.
    pub lat_range: (f64, f64),
    /// `[lo, hi)` degrees. Ranges never wrap: faces start at -180 and
    /// bisection keeps them inside `[-180, 180)`.
    pub lon_range: (f64, f64),
    /// Point prediction for this cell: the spherical mean of its images, or
    /// the rectangle midpoint when the mean is degenerate.
    pub center: GeoPoint,
    /// Ids of contained training images. Empty after loading from a file;
    /// `image_count` survives serialization.
    pub image_ids: Vec<u64>,
    pub image_count: u64,
}

impl Cell {
    pub fn contains(&self, p: &GeoPoint) -> bool {
        let lat = p.lat_deg();
        let lon = p.lon_deg();
        let lat_ok = lat >= self.lat_range.0
            && (lat < self.lat_range.1 || (self.lat_range.1 == 90.0 && lat == 90.0));
        lat_ok && lon >= self.lon_range.0 && lon < self.lon_range.1
    }

    fn midpoint(&self) -> GeoPoint {
        let lat = 0.5 * (self.lat_range.0 + self.lat_range.1);
        let lon = 0.5 * (self.lon_range.0 + self.lon_range.1);
        GeoPoint::new(lat, lon).expect("rectangle midpoint is always valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotTag {
    Coarse,
    Mid,
    Fine,
}

impl SnapshotTag {
    fn to_byte(tag: Option<SnapshotTag>) -> u8 {
        match tag {
            None => 0,
            Some(SnapshotTag::Coarse) => 1,
            Some(SnapshotTag::Mid) => 2,
            Some(SnapshotTag::Fine) => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Option<SnapshotTag>, PartitionError> {
        Ok(match b {
            0 => None,
            1 => Some(SnapshotTag::Coarse),
            2 => Some(SnapshotTag::Mid),
            3 => Some(SnapshotTag::Fine),
            _ => return Err(PartitionError::Malformed),
        })
    }
}

/// One entry of the greedy split log: which leaf was split and how many
/// images it held at that moment.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecord {
    pub victim: CellId,
    pub image_count: u64,
}

/// An immutable set of disjoint leaves covering the populated sphere.
#[derive(Debug, Clone)]
pub struct Partition {
    leaves: Vec<Cell>,
    by_id: BTreeMap<CellId, usize>,
    max_leaf_depth: usize,
    pub target_leaf_count: u32,
    pub min_split_size: u32,
    pub snapshot_tag: Option<SnapshotTag>,
    split_log: Vec<SplitRecord>,
}

impl Partition {
    fn from_leaves(
        mut leaves: Vec<Cell>,
        target_leaf_count: u32,
        min_split_size: u32,
        snapshot_tag: Option<SnapshotTag>,
        split_log: Vec<SplitRecord>,
    ) -> Self {
        leaves.sort_by(|a, b| a.id.cmp(&b.id));
        let by_id = leaves
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i))
            .collect();
        let max_leaf_depth = leaves.iter().map(|c| c.id.depth()).max().unwrap_or(0);
        Self {
            leaves,
            by_id,
            max_leaf_depth,
            target_leaf_count,
            min_split_size,
            snapshot_tag,
            split_log,
        }
    }

    pub fn leaves(&self) -> &[Cell] {
        &self.leaves
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_index(&self, id: &CellId) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn split_log(&self) -> &[SplitRecord] {
        &self.split_log
    }

    /// The leaf index containing `p`, or `None` when `p` falls in a pruned
    /// (empty) region.
    pub fn assign_index(&self, p: &GeoPoint) -> Option<usize> {
        let mut rect = base_rect(face_of(p));
        let mut id = CellId::root(face_of(p));
        loop {
            if let Some(&i) = self.by_id.get(&id) {
                return Some(i);
            }
            if id.depth() >= self.max_leaf_depth {
                return None;
            }
            let (child, child_rect) = descend(&rect, p);
            id = id.child(child);
            rect = child_rect;
        }
    }

    /// Like [`Partition::assign_index`] but returning the cell id.
    pub fn assign_cell(&self, p: &GeoPoint) -> Option<CellId> {
        self.assign_index(p).map(|i| self.leaves[i].id.clone())
    }

    /// The unique leaf of this partition whose id is a prefix of (or equal
    /// to) `fine_id`. Fails when the id comes from a different tree.
    pub fn ancestor_index(&self, fine_id: &CellId) -> Result<usize, PartitionError> {
        for len in (0..=fine_id.depth()).rev() {
            let prefix = CellId {
                face: fine_id.face(),
                path: fine_id.path()[..len].to_vec(),
            };
            if let Some(&i) = self.by_id.get(&prefix) {
                return Ok(i);
            }
        }
        Err(PartitionError::NotNested(fine_id.clone()))
    }

    pub fn ancestor_in(&self, fine_id: &CellId) -> Result<CellId, PartitionError> {
        Ok(self.leaves[self.ancestor_index(fine_id)?].id.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARTITION_MAGIC);
        binio::w_u32(&mut out, PARTITION_VERSION);
        binio::w_u8(&mut out, SnapshotTag::to_byte(self.snapshot_tag));
        binio::w_u32(&mut out, self.target_leaf_count);
        binio::w_u32(&mut out, self.min_split_size);
        let depths: Vec<usize> = self.leaves.iter().map(|c| c.id.depth()).collect();
        binio::w_u32(&mut out, depths.iter().copied().min().unwrap_or(0) as u32);
        binio::w_u32(&mut out, depths.iter().copied().max().unwrap_or(0) as u32);
        binio::w_u64(&mut out, self.leaves.len() as u64);
        for cell in &self.leaves {
            binio::w_u8(&mut out, cell.id.face());
            binio::w_u8(&mut out, cell.id.depth() as u8);
            out.extend_from_slice(cell.id.path());
            binio::w_f64(&mut out, cell.lat_range.0);
            binio::w_f64(&mut out, cell.lat_range.1);
            binio::w_f64(&mut out, cell.lon_range.0);
            binio::w_f64(&mut out, cell.lon_range.1);
            binio::w_f64(&mut out, cell.center.lat_deg());
            binio::w_f64(&mut out, cell.center.lon_deg());
            binio::w_u64(&mut out, cell.image_count);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PartitionError> {
        let map_err = |e: BinErr| match e {
            BinErr::BadMagic => PartitionError::BadMagic,
            BinErr::Eof => PartitionError::Malformed,
        };
        let mut r = Reader::new(bytes);
        r.expect_magic(PARTITION_MAGIC).map_err(map_err)?;
        let version = r.u32().map_err(map_err)?;
        if version != PARTITION_VERSION {
            return Err(PartitionError::BadVersion(version));
        }
        let tag = SnapshotTag::from_byte(r.u8().map_err(map_err)?)?;
        let target = r.u32().map_err(map_err)?;
        let min_split = r.u32().map_err(map_err)?;
        let _depth_min = r.u32().map_err(map_err)?;
        let _depth_max = r.u32().map_err(map_err)?;
        let count = r.u64().map_err(map_err)?;
        let mut leaves = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let face = r.u8().map_err(map_err)?;
            if face >= 8 {
                return Err(PartitionError::Malformed);
            }
            let depth = r.u8().map_err(map_err)? as usize;
            let path = r.take(depth).map_err(map_err)?.to_vec();
            if path.iter().any(|&d| d >= 4) {
                return Err(PartitionError::Malformed);
            }
            let lat_lo = r.f64().map_err(map_err)?;
            let lat_hi = r.f64().map_err(map_err)?;
            let lon_lo = r.f64().map_err(map_err)?;
            let lon_hi = r.f64().map_err(map_err)?;
            let c_lat = r.f64().map_err(map_err)?;
            let c_lon = r.f64().map_err(map_err)?;
            let image_count = r.u64().map_err(map_err)?;
            leaves.push(Cell {
                id: CellId { face, path },
                lat_range: (lat_lo, lat_hi),
                lon_range: (lon_lo, lon_hi),
                center: GeoPoint::new(c_lat, c_lon).map_err(|_| PartitionError::Malformed)?,
                image_ids: Vec::new(),
                image_count,
            });
        }
        if !r.is_done() {
            return Err(PartitionError::Malformed);
        }
        Ok(Self::from_leaves(leaves, target, min_split, tag, Vec::new()))
    }

    pub fn save(&self, path: &Path) -> Result<(), PartitionError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PartitionError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized partition; downstream artifacts embed this
    /// to refuse silently inconsistent chains.
    pub fn content_hash(&self) -> [u8; 32] {
        crate::hash::sha256(&self.to_bytes())
    }
}

fn face_of(p: &GeoPoint) -> u8 {
    let band = if p.lat_deg() >= 0.0 { 1u8 } else { 0u8 };
    let quad = (((p.lon_deg() + 180.0) / 90.0) as u8).min(3);
    band * 4 + quad
}

fn base_rect(face: u8) -> ((f64, f64), (f64, f64)) {
    let band = face / 4;
    let quad = face % 4;
    let lat = if band == 0 { (-90.0, 0.0) } else { (0.0, 90.0) };
    let lon_lo = -180.0 + 90.0 * quad as f64;
    (lat, (lon_lo, lon_lo + 90.0))
}

/// Child index of `p` within `rect` and the child's rectangle. The child
/// index is `lat_half * 2 + lon_half` with 0 = lower half.
fn descend(rect: &((f64, f64), (f64, f64)), p: &GeoPoint) -> (u8, ((f64, f64), (f64, f64))) {
    let (lat, lon) = *rect;
    let lat_mid = 0.5 * (lat.0 + lat.1);
    let lon_mid = 0.5 * (lon.0 + lon.1);
    let lat_half = if p.lat_deg() >= lat_mid { 1u8 } else { 0u8 };
    let lon_half = if p.lon_deg() >= lon_mid { 1u8 } else { 0u8 };
    let child_lat = if lat_half == 0 {
        (lat.0, lat_mid)
    } else {
        (lat_mid, lat.1)
    };
    let child_lon = if lon_half == 0 {
        (lon.0, lon_mid)
    } else {
        (lon_mid, lon.1)
    };
    (lat_half * 2 + lon_half, (child_lat, child_lon))
}

struct BuildCell {
    id: CellId,
    lat_range: (f64, f64),
    lon_range: (f64, f64),
    members: Vec<usize>,
}

impl BuildCell {
    fn splittable(&self) -> bool {
        let lat_mid = 0.5 * (self.lat_range.0 + self.lat_range.1);
        let lon_mid = 0.5 * (self.lon_range.0 + self.lon_range.1);
        self.id.depth() < MAX_DEPTH
            && lat_mid > self.lat_range.0
            && lat_mid < self.lat_range.1
            && lon_mid > self.lon_range.0
            && lon_mid < self.lon_range.1
    }
}

struct GreedyBuilder<'a> {
    images: &'a [(u64, GeoPoint)],
    cells: Vec<BuildCell>,
    min_split_size: usize,
    split_log: Vec<SplitRecord>,
}

impl<'a> GreedyBuilder<'a> {
    fn new(images: &'a [(u64, GeoPoint)], min_split_size: usize) -> Self {
        let mut cells: Vec<BuildCell> = (0..8)
            .map(|face| {
                let (lat_range, lon_range) = base_rect(face);
                BuildCell {
                    id: CellId::root(face),
                    lat_range,
                    lon_range,
                    members: Vec::new(),
                }
            })
            .collect();
        for (i, (_, p)) in images.iter().enumerate() {
            cells[face_of(p) as usize].members.push(i);
        }
        cells.retain(|c| !c.members.is_empty());
        Self {
            images,
            cells,
            min_split_size,
            split_log: Vec::new(),
        }
    }

    /// Index of the next split victim: strict maximum member count among
    /// splittable over-threshold leaves, ties broken by smallest id.
    fn pick_victim(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, c) in self.cells.iter().enumerate() {
            if c.members.len() <= self.min_split_size || !c.splittable() {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (bc, cc) = (self.cells[b].members.len(), c.members.len());
                    if cc > bc || (cc == bc && c.id < self.cells[b].id) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    }

    fn split(&mut self, victim: usize) {
        let cell = self.cells.swap_remove(victim);
        self.split_log.push(SplitRecord {
            victim: cell.id.clone(),
            image_count: cell.members.len() as u64,
        });
        let rect = (cell.lat_range, cell.lon_range);
        let mut children: Vec<BuildCell> = (0..4u8)
            .map(|c| {
                let (_, child_rect) = descend_to_child(&rect, c);
                BuildCell {
                    id: cell.id.child(c),
                    lat_range: child_rect.0,
                    lon_range: child_rect.1,
                    members: Vec::new(),
                }
            })
            .collect();
        for &m in &cell.members {
            let (child, _) = descend(&rect, &self.images[m].1);
            children[child as usize].members.push(m);
        }
        self.cells
            .extend(children.into_iter().filter(|c| !c.members.is_empty()));
    }

    fn snapshot(&self, target: u32, min_split: u32, tag: Option<SnapshotTag>) -> Partition {
        let leaves = self
            .cells
            .iter()
            .map(|c| {
                let locations: Vec<GeoPoint> =
                    c.members.iter().map(|&m| self.images[m].1).collect();
                let ids: Vec<u64> = c.members.iter().map(|&m| self.images[m].0).collect();
                let rect_cell = Cell {
                    id: c.id.clone(),
                    lat_range: c.lat_range,
                    lon_range: c.lon_range,
                    center: GeoPoint::new(0.0, 0.0).unwrap(),
                    image_ids: ids,
                    image_count: c.members.len() as u64,
                };
                let center = spherical_mean(&locations).unwrap_or_else(|_| rect_cell.midpoint());
                Cell { center, ..rect_cell }
            })
            .collect();
        Partition::from_leaves(leaves, target, min_split, tag, self.split_log.clone())
    }
}

fn descend_to_child(
    rect: &((f64, f64), (f64, f64)),
    child: u8,
) -> (u8, ((f64, f64), (f64, f64))) {
    let (lat, lon) = *rect;
    let lat_mid = 0.5 * (lat.0 + lat.1);
    let lon_mid = 0.5 * (lon.0 + lon.1);
    let child_lat = if child / 2 == 0 {
        (lat.0, lat_mid)
    } else {
        (lat_mid, lat.1)
    };
    let child_lon = if child % 2 == 0 {
        (lon.0, lon_mid)
    } else {
        (lon_mid, lon.1)
    };
    (child, (child_lat, child_lon))
}

fn validate_inputs(images: &[(u64, GeoPoint)], target_leaves: u32) -> Result<(), PartitionError> {
    if target_leaves < 8 {
        return Err(PartitionError::InvalidConfig(format!(
            "target_leaves must be >= 8, got {target_leaves}"
        )));
    }
    if images.is_empty() {
        return Err(PartitionError::InvalidConfig(
            "at least one image is required".into(),
        ));
    }
    Ok(())
}

/// Greedy build: split the most-populated leaf until the leaf count reaches
/// `target_leaves` or no leaf holds more than `min_split_size` images.
pub fn build_partition(
    images: &[(u64, GeoPoint)],
    target_leaves: u32,
    min_split_size: u32,
) -> Result<Partition, PartitionError> {
    if min_split_size < 1 {
        return Err(PartitionError::InvalidConfig(
            "min_split_size must be >= 1".into(),
        ));
    }
    validate_inputs(images, target_leaves)?;
    let mut builder = GreedyBuilder::new(images, min_split_size as usize);
    while builder.cells.len() < target_leaves as usize {
        match builder.pick_victim() {
            Some(v) => builder.split(v),
            None => break,
        }
    }
    Ok(builder.snapshot(target_leaves, min_split_size, None))
}

/// One greedy run with leaf-set snapshots taken the first time the count
/// reaches each of the three targets. Thresholds never reached snapshot the
/// final state. Every fine leaf has exactly one ancestor-or-self leaf in the
/// mid and coarse snapshots.
pub fn nested_snapshots(
    images: &[(u64, GeoPoint)],
    counts: (u32, u32, u32),
    min_split_size: u32,
) -> Result<(Partition, Partition, Partition), PartitionError> {
    let (n_coarse, n_mid, n_fine) = counts;
    if !(n_coarse < n_mid && n_mid < n_fine) && !(n_coarse == n_mid && n_mid == n_fine) {
        return Err(PartitionError::InvalidConfig(format!(
            "snapshot counts must be strictly increasing (or all equal), got {counts:?}"
        )));
    }
    if min_split_size < 1 {
        return Err(PartitionError::InvalidConfig(
            "min_split_size must be >= 1".into(),
        ));
    }
    validate_inputs(images, n_coarse)?;

    let mut builder = GreedyBuilder::new(images, min_split_size as usize);
    let mut coarse = None;
    let mut mid = None;
    let take = |b: &GreedyBuilder, coarse: &mut Option<Partition>, mid: &mut Option<Partition>| {
        if coarse.is_none() && b.cells.len() >= n_coarse as usize {
            *coarse = Some(b.snapshot(n_coarse, min_split_size, Some(SnapshotTag::Coarse)));
        }
        if mid.is_none() && b.cells.len() >= n_mid as usize {
            *mid = Some(b.snapshot(n_mid, min_split_size, Some(SnapshotTag::Mid)));
        }
    };
    take(&builder, &mut coarse, &mut mid);
    while builder.cells.len() < n_fine as usize {
        match builder.pick_victim() {
            Some(v) => builder.split(v),
            None => break,
        }
        take(&builder, &mut coarse, &mut mid);
    }
    let fine = builder.snapshot(n_fine, min_split_size, Some(SnapshotTag::Fine));
    let coarse =
        coarse.unwrap_or_else(|| builder.snapshot(n_coarse, min_split_size, Some(SnapshotTag::Coarse)));
    let mid = mid.unwrap_or_else(|| builder.snapshot(n_mid, min_split_size, Some(SnapshotTag::Mid)));
    Ok((coarse, mid, fine))
}
