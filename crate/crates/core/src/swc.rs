//! Search-within-Cell inference: classify a query into a cell, retrieve the
//! most similar background images inside that cell, and aggregate their
//! locations with geodesic density clustering (or plain averaging).

use crate::classify::{AnyHead, ClassifyError};
use crate::geo::{gcd_km, spherical_mean, GeoPoint};
use crate::hash::to_hex;
use crate::index::{BackgroundIndex, Embedder, IndexError};
use crate::partition::{CellId, Partition};
use crate::retrieve::RetrieveError;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SwcError {
    #[error("artifact chain mismatch: {0}")]
    HashMismatch(String),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("malformed prediction record at line {0}")]
    MalformedRecord(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    SpatialClustering,
    Average,
}

impl Aggregator {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::SpatialClustering => "spatial",
            Aggregator::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SwcError> {
        match s {
            "spatial" => Ok(Aggregator::SpatialClustering),
            "average" => Ok(Aggregator::Average),
            other => Err(SwcError::InvalidConfig(format!(
                "unknown aggregator `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwcConfig {
    /// Neighbors retrieved per query.
    pub k: usize,
    /// DBSCAN neighborhood radius in kilometres.
    pub epsilon_km: f64,
    pub min_samples: usize,
    pub aggregator: Aggregator,
}

impl Default for SwcConfig {
    fn default() -> Self {
        Self {
            k: 10,
            epsilon_km: 1.0,
            min_samples: 1,
            aggregator: Aggregator::SpatialClustering,
        }
    }
}

impl SwcConfig {
    pub fn validate(&self) -> Result<(), SwcError> {
        if self.k == 0 {
            return Err(SwcError::InvalidConfig("k must be >= 1".into()));
        }
        if !(self.epsilon_km > 0.0) {
            return Err(SwcError::InvalidConfig("epsilon_km must be > 0".into()));
        }
        if self.min_samples == 0 {
            return Err(SwcError::InvalidConfig("min_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// DBSCAN over great-circle distance. Returns one label per point in input
/// order; noise is -1. Clusters are numbered by the first core point visited
/// in input order. With `min_samples = 1` every point is a core point and
/// the clusters are exactly the connected components of the epsilon graph.
///
/// Neighborhoods use `distance <= epsilon` and include the point itself.
/// The candidate sets here are tiny (K <= 20 retrieved neighbors), so the
/// plain O(n^2) distance matrix is the right tool.
pub fn dbscan_geo(points: &[GeoPoint], epsilon_km: f64, min_samples: usize) -> Vec<i64> {
    let n = points.len();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        neighbors[i].push(i);
        for j in (i + 1)..n {
            if gcd_km(points[i], points[j]) <= epsilon_km {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    let mut labels = vec![-1i64; n];
    let mut visited = vec![false; n];
    let mut cluster = 0i64;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        if neighbors[i].len() < min_samples {
            continue; // noise unless adopted as a border point later
        }
        labels[i] = cluster;
        let mut queue: std::collections::VecDeque<usize> = neighbors[i].iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == -1 {
                labels[j] = cluster;
            }
            if !visited[j] {
                visited[j] = true;
                if neighbors[j].len() >= min_samples {
                    queue.extend(neighbors[j].iter().copied());
                }
            }
        }
        cluster += 1;
    }
    labels
}

/// Index of the highest-similarity point; ties go to the lowest index.
fn best_similarity(similarities: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in similarities.iter().enumerate() {
        if *s > similarities[best] {
            best = i;
        }
    }
    best
}

/// Picks the winning cluster and returns the spherical mean of its members.
///
/// The largest cluster wins; among equal-size clusters the one holding the
/// highest-similarity member wins (a deterministic, similarity-respecting
/// reading of "the first one"), then the lowest label. A degenerate mean
/// falls back to the selected cluster's highest-similarity member. Noise
/// points never form the winning cluster; if everything is noise the single
/// highest-similarity point wins outright.
pub fn aggregate_cluster(
    points: &[GeoPoint],
    similarities: &[f64],
    labels: &[i64],
) -> GeoPoint {
    assert!(!points.is_empty());
    let max_label = labels.iter().copied().max().unwrap_or(-1);
    if max_label < 0 {
        return points[best_similarity(similarities)];
    }
    let mut chosen: Option<(usize, f64, i64)> = None; // (size, best_sim, label)
    for label in 0..=max_label {
        let size = labels.iter().filter(|&&l| l == label).count();
        if size == 0 {
            continue;
        }
        let best_sim = labels
            .iter()
            .zip(similarities.iter())
            .filter(|(&l, _)| l == label)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let better = match chosen {
            None => true,
            Some((cs, cb, _)) => size > cs || (size == cs && best_sim > cb),
        };
        if better {
            chosen = Some((size, best_sim, label));
        }
    }
    let (_, _, label) = chosen.expect("at least one non-noise cluster");
    let members: Vec<GeoPoint> = points
        .iter()
        .zip(labels.iter())
        .filter(|(_, &l)| l == label)
        .map(|(p, _)| *p)
        .collect();
    match spherical_mean(&members) {
        Ok(m) => m,
        Err(_) => {
            // Degenerate member spread: take the best member instead.
            let mut best: Option<(f64, usize)> = None;
            for (i, (&l, &s)) in labels.iter().zip(similarities.iter()).enumerate() {
                if l == label && best.map_or(true, |(bs, _)| s > bs) {
                    best = Some((s, i));
                }
            }
            points[best.unwrap().1]
        }
    }
}

/// Spherical mean of every retrieved neighbor (no clustering); a degenerate
/// mean falls back to the highest-similarity point.
pub fn aggregate_average(points: &[GeoPoint], similarities: &[f64]) -> GeoPoint {
    assert!(!points.is_empty());
    spherical_mean(points).unwrap_or_else(|_| points[best_similarity(similarities)])
}

/// One query's outcome: the estimate plus retrieval diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub estimate: GeoPoint,
    /// Predicted cell; `None` for whole-collection retrieval runs.
    pub cell: Option<CellId>,
    /// Retrieved `(image id, similarity)` pairs, best first.
    pub neighbors: Vec<(u64, f64)>,
    /// Cluster label per retrieved neighbor (-1 = noise). All zeros under
    /// the averaging aggregator.
    pub labels: Vec<i64>,
    /// Set when the predicted cell held no background images and the
    /// estimate fell back to the cell center.
    pub fallback: bool,
}

fn aggregate_hits(
    locations: &[GeoPoint],
    similarities: &[f64],
    config: &SwcConfig,
) -> (GeoPoint, Vec<i64>) {
    match config.aggregator {
        Aggregator::SpatialClustering => {
            let labels = dbscan_geo(locations, config.epsilon_km, config.min_samples);
            let estimate = aggregate_cluster(locations, similarities, &labels);
            (estimate, labels)
        }
        Aggregator::Average => {
            let estimate = aggregate_average(locations, similarities);
            (estimate, vec![0; locations.len()])
        }
    }
}

/// Full search-within-cell inference for one query feature vector.
///
/// The classifier picks the cell, the embedder maps the query into the
/// index's embedding space, retrieval is restricted to the predicted cell,
/// and the aggregator turns neighbor locations into the estimate. A cell
/// with no background entries falls back to the cell center.
pub fn predict_swc(
    z: &[f64],
    classifier: &AnyHead,
    embedder: &Embedder,
    index: &BackgroundIndex,
    partition: &Partition,
    config: &SwcConfig,
) -> Result<Prediction, SwcError> {
    config.validate()?;
    let phash = partition.content_hash();
    if index.partition_hash() != &phash {
        return Err(SwcError::HashMismatch(format!(
            "index built for partition {}, given {}",
            to_hex(index.partition_hash()),
            to_hex(&phash)
        )));
    }
    if classifier.partition_hash() != &phash {
        return Err(SwcError::HashMismatch(format!(
            "classifier trained for partition {}, given {}",
            to_hex(classifier.partition_hash()),
            to_hex(&phash)
        )));
    }

    let cell_index = classifier.predict_index(z)?;
    let cell_id = partition.leaves()[cell_index].id.clone();
    let query = embedder.embed(z)?;
    let hits = index.top_k(&query, config.k, Some(&cell_id))?;
    if hits.is_empty() {
        return Ok(Prediction {
            estimate: partition.leaves()[cell_index].center,
            cell: Some(cell_id),
            neighbors: Vec::new(),
            labels: Vec::new(),
            fallback: true,
        });
    }
    let locations: Vec<GeoPoint> = hits.iter().map(|&(i, _)| index.entries()[i].location).collect();
    let similarities: Vec<f64> = hits.iter().map(|&(_, s)| s).collect();
    let (estimate, labels) = aggregate_hits(&locations, &similarities, config);
    Ok(Prediction {
        estimate,
        cell: Some(cell_id),
        neighbors: hits
            .iter()
            .map(|&(i, s)| (index.entries()[i].id, s))
            .collect(),
        labels,
        fallback: false,
    })
}

/// Retrieval-only inference: top-K over the whole background collection,
/// aggregated exactly like search-within-cell but with no cell restriction.
pub fn predict_retrieval_only(
    z: &[f64],
    embedder: &Embedder,
    index: &BackgroundIndex,
    config: &SwcConfig,
) -> Result<Prediction, SwcError> {
    config.validate()?;
    let query = embedder.embed(z)?;
    let hits = index.top_k(&query, config.k, None)?;
    if hits.is_empty() {
        return Err(SwcError::InvalidConfig(
            "retrieval over an empty background collection".into(),
        ));
    }
    let locations: Vec<GeoPoint> = hits.iter().map(|&(i, _)| index.entries()[i].location).collect();
    let similarities: Vec<f64> = hits.iter().map(|&(_, s)| s).collect();
    let (estimate, labels) = aggregate_hits(&locations, &similarities, config);
    Ok(Prediction {
        estimate,
        cell: None,
        neighbors: hits
            .iter()
            .map(|&(i, s)| (index.entries()[i].id, s))
            .collect(),
        labels,
        fallback: false,
    })
}

/// Writes predictions as line-delimited text. Field order per line,
/// tab-separated:
/// `id  lat  lon  cell  fallback  neighbors`
/// where `cell` is the cell id or `-`, `fallback` is 0/1, and `neighbors`
/// is a comma-joined list of `image_id:similarity:cluster_label` (or `-`
/// when empty). Floats use shortest round-trip formatting, so the file is
/// lossless and byte-stable for identical runs.
pub fn write_predictions<W: Write>(
    out: &mut W,
    records: &[(u64, Prediction)],
) -> Result<(), SwcError> {
    writeln!(out, "# id\tlat\tlon\tcell\tfallback\tneighbors")?;
    for (id, p) in records {
        let cell = p
            .cell
            .as_ref()
            .map(|c| c.to_string())
            .unwrap_or_else(|| "-".into());
        let neighbors = if p.neighbors.is_empty() {
            "-".to_string()
        } else {
            p.neighbors
                .iter()
                .zip(p.labels.iter())
                .map(|(&(nid, sim), &label)| format!("{nid}:{sim}:{label}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(
            out,
            "{id}\t{}\t{}\t{cell}\t{}\t{neighbors}",
            p.estimate.lat_deg(),
            p.estimate.lon_deg(),
            u8::from(p.fallback),
        )?;
    }
    Ok(())
}

/// Reads back the `(id, estimate)` pairs of a prediction file.
pub fn read_prediction_estimates<R: BufRead>(
    input: R,
) -> Result<Vec<(u64, GeoPoint)>, SwcError> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let id: u64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(SwcError::MalformedRecord(lineno + 1))?;
        let lat: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(SwcError::MalformedRecord(lineno + 1))?;
        let lon: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(SwcError::MalformedRecord(lineno + 1))?;
        let point =
            GeoPoint::new(lat, lon).map_err(|_| SwcError::MalformedRecord(lineno + 1))?;
        out.push((id, point));
    }
    Ok(out)
}
