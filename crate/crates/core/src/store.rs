//! Prototype storage, ingestion, persistence, and exact K-nearest-neighbor
//! queries.
//!
//! A [`PrototypeDatabase`] is an immutable, ordered collection of labeled
//! feature vectors sharing one dimension and one distance metric. Every
//! other part of the crate treats it as read-only: queries from any number
//! of threads return identical results.
//!
//! Queries are exact. Above [`INDEX_THRESHOLD`] rows a spatial index is
//! built lazily to accelerate full-database queries, but it is behaviorally
//! invisible: results always equal a linear scan ordered by
//! `(distance, id)`, with distance ties broken by ascending id.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::index::{Candidate, KdTree, TopK};

/// Identifier of a prototype within its database.
///
/// Ids are assigned by ingestion order starting at zero and are stable
/// across save/load round trips.
pub type PrototypeId = u64;

/// Database size above which full-database queries build a spatial index.
pub const INDEX_THRESHOLD: usize = 4096;

const MAGIC: &[u8; 4] = b"PDB1";
const FORMAT_VERSION: u32 = 1;

/// Distance metric registry. Euclidean is the only implemented entry; the
/// identifier is kept in the persisted format so other metrics can be added
/// without breaking old files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[non_exhaustive]
pub enum Metric {
    Euclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
        }
    }

    pub fn from_name(name: &str) -> Result<Metric> {
        match name {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric identifier: {other:?}"
            ))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Metric::Euclidean => 0,
        }
    }

    fn from_tag(tag: u8) -> Result<Metric> {
        match tag {
            0 => Ok(Metric::Euclidean),
            other => Err(Error::Corrupt(format!("unknown metric tag {other}"))),
        }
    }
}

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub id: PrototypeId,
    pub features: Vec<f64>,
    pub class_code: u32,
}

/// Result of a K-nearest-neighbor query.
///
/// Entries are ordered by ascending distance, with exact ties broken by
/// ascending prototype id. The result is shorter than `k` only when the
/// searchable set had fewer than `k` members.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborResult {
    pub ids: Vec<PrototypeId>,
    pub distances: Vec<f64>,
}

impl NeighborResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Immutable indexed collection of prototypes with a distance metric.
pub struct PrototypeDatabase {
    dimension: usize,
    /// Row-major feature matrix, `len() * dimension` values.
    features: Vec<f64>,
    /// Class code per row.
    classes: Vec<u32>,
    /// Sorted distinct class codes.
    class_registry: Vec<u32>,
    metric: Metric,
    index: OnceLock<KdTree>,
}

impl std::fmt::Debug for PrototypeDatabase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PrototypeDatabase")
            .field("len", &self.len())
            .field("dimension", &self.dimension)
            .field("classes", &self.class_registry)
            .field("metric", &self.metric.name())
            .finish()
    }
}

impl PrototypeDatabase {
    /// Builds a database from `(class_code, features)` rows. Ids are assigned
    /// by row order starting at zero.
    pub fn from_rows(
        dimension: usize,
        metric: Metric,
        rows: impl IntoIterator<Item = (u32, Vec<f64>)>,
    ) -> Result<PrototypeDatabase> {
        if dimension == 0 {
            return Err(Error::InvalidArgument(
                "feature dimension must be at least 1".into(),
            ));
        }
        let mut features = Vec::new();
        let mut classes = Vec::new();
        for (class, feat) in rows {
            if feat.len() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    actual: feat.len(),
                });
            }
            if let Some(bad) = feat.iter().find(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite feature value {bad}"
                )));
            }
            features.extend_from_slice(&feat);
            classes.push(class);
        }
        if classes.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut registry = classes.clone();
        registry.sort_unstable();
        registry.dedup();
        Ok(PrototypeDatabase {
            dimension,
            features,
            classes,
            class_registry: registry,
            metric,
            index: OnceLock::new(),
        })
    }

    /// Streams a CSV with header `id,class,f0,...,f{J-1}` into a database.
    ///
    /// The dimension is inferred from the header and ids are assigned by row
    /// order starting at zero; the file's `id` column is validated as numeric
    /// but not trusted for numbering. The stream is read exactly once.
    pub fn ingest_csv<R: BufRead>(reader: R, metric: Metric) -> Result<PrototypeDatabase> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            None => return Err(Error::EmptyInput),
            Some(h) => h?,
        };
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "id" || cols[1] != "class" {
            return Err(Error::Format {
                line: 1,
                message: "header must be `id,class,f0,...` with at least one feature column"
                    .into(),
            });
        }
        let dimension = cols.len() - 2;

        let mut features: Vec<f64> = Vec::new();
        let mut classes: Vec<u32> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dimension + 2 {
                return Err(Error::Format {
                    line: line_no,
                    message: format!(
                        "expected {} fields, found {}",
                        dimension + 2,
                        fields.len()
                    ),
                });
            }
            fields[0].parse::<u64>().map_err(|_| Error::Format {
                line: line_no,
                message: format!("invalid id {:?}", fields[0]),
            })?;
            let class = fields[1].parse::<u32>().map_err(|_| Error::Format {
                line: line_no,
                message: format!("invalid class code {:?}", fields[1]),
            })?;
            for f in &fields[2..] {
                let v: f64 = f.parse().map_err(|_| Error::Format {
                    line: line_no,
                    message: format!("invalid feature value {f:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Format {
                        line: line_no,
                        message: format!("non-finite feature value {f:?}"),
                    });
                }
                features.push(v);
            }
            classes.push(class);
        }
        if classes.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut registry = classes.clone();
        registry.sort_unstable();
        registry.dedup();
        Ok(PrototypeDatabase {
            dimension,
            features,
            classes,
            class_registry: registry,
            metric,
            index: OnceLock::new(),
        })
    }

    pub fn ingest_csv_path(path: &Path, metric: Metric) -> Result<PrototypeDatabase> {
        let file = File::open(path)?;
        Self::ingest_csv(BufReader::new(file), metric)
    }

    /// Number of prototypes `M`.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Feature dimension `J`.
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Sorted distinct class codes.
    pub fn class_registry(&self) -> &[u32] {
        &self.class_registry
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn features_of(&self, id: PrototypeId) -> &[f64] {
        let row = id as usize;
        &self.features[row * self.dimension..(row + 1) * self.dimension]
    }

    pub fn class_of(&self, id: PrototypeId) -> u32 {
        self.classes[id as usize]
    }

    /// Owned copy of one prototype.
    pub fn prototype(&self, id: PrototypeId) -> Prototype {
        Prototype {
            id,
            features: self.features_of(id).to_vec(),
            class_code: self.class_of(id),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Prototype> + '_ {
        (0..self.len() as u64).map(move |id| self.prototype(id))
    }

    /// Ids of all prototypes carrying `class`.
    pub fn ids_of_class(&self, class: u32) -> Vec<PrototypeId> {
        (0..self.len() as u64)
            .filter(|&id| self.classes[id as usize] == class)
            .collect()
    }

    fn spatial_index(&self) -> Option<&KdTree> {
        if self.len() < INDEX_THRESHOLD && self.index.get().is_none() {
            return None;
        }
        self.force_spatial_index();
        self.index.get()
    }

    /// Builds the spatial index regardless of database size. Exposed so
    /// equivalence tests can exercise the indexed path on small inputs.
    #[doc(hidden)]
    pub fn force_spatial_index(&self) {
        self.index.get_or_init(|| {
            KdTree::build(
                self.dimension,
                (0..self.len() as u64).map(|id| (id, self.features_of(id))),
            )
        });
    }

    /// Exact K-nearest-neighbor query.
    ///
    /// `subset` restricts the searchable ids (`None` searches the whole
    /// database); `exclude` removes ids from the searchable set. Results are
    /// ordered by `(distance, id)` and exact: any internal acceleration
    /// returns the same neighbors as a linear scan.
    pub fn knn(
        &self,
        subset: Option<&[PrototypeId]>,
        query: &[f64],
        k: usize,
        exclude: &[PrototypeId],
    ) -> Result<NeighborResult> {
        if query.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut excl: Vec<PrototypeId> = exclude.to_vec();
        excl.sort_unstable();
        excl.dedup();

        let candidates = match subset {
            None => {
                if self.len() > excl.iter().filter(|&&id| (id as usize) < self.len()).count() {
                    // non-empty after exclusion
                } else {
                    return Err(Error::EmptySearchSet);
                }
                if let Some(tree) = self.spatial_index() {
                    tree.knn(query, k, &excl)
                } else {
                    self.linear_knn((0..self.len() as u64).filter(|id| excl.binary_search(id).is_err()), query, k)
                }
            }
            Some(ids) => {
                for &id in ids {
                    if id as usize >= self.len() {
                        return Err(Error::InvalidArgument(format!(
                            "subset id {id} out of range (database has {} prototypes)",
                            self.len()
                        )));
                    }
                }
                let mut searchable: Vec<PrototypeId> = ids
                    .iter()
                    .copied()
                    .filter(|id| excl.binary_search(id).is_err())
                    .collect();
                searchable.sort_unstable();
                searchable.dedup();
                if searchable.is_empty() {
                    return Err(Error::EmptySearchSet);
                }
                self.linear_knn(searchable.into_iter(), query, k)
            }
        };

        Ok(NeighborResult {
            ids: candidates.iter().map(|c| c.id).collect(),
            distances: candidates.iter().map(|c| c.d2.sqrt()).collect(),
        })
    }

    fn linear_knn(
        &self,
        ids: impl Iterator<Item = PrototypeId>,
        query: &[f64],
        k: usize,
    ) -> Vec<Candidate> {
        let mut top = TopK::new(k);
        for id in ids {
            let feat = self.features_of(id);
            let d2 = crate::index::squared_distance(feat, query);
            top.offer(Candidate { d2, id });
        }
        top.into_sorted()
    }

    /// Writes the versioned binary format (magic `PDB1`, little-endian).
    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.metric.tag()])?;
        w.write_all(&(self.dimension as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.class_registry.len() as u32).to_le_bytes())?;
        for &c in &self.class_registry {
            w.write_all(&c.to_le_bytes())?;
        }
        for row in 0..self.len() {
            w.write_all(&self.classes[row].to_le_bytes())?;
            for &f in self.features_of(row as u64) {
                w.write_all(&f.to_bits().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        self.save(File::create(path)?)
    }

    /// Loads a database produced by [`PrototypeDatabase::save`].
    pub fn load<R: Read>(reader: R) -> Result<PrototypeDatabase> {
        let mut r = BufReader::new(reader);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag)?;
        let metric = Metric::from_tag(tag[0])?;
        let dimension = read_u32(&mut r)? as usize;
        if dimension == 0 {
            return Err(Error::Corrupt("dimension must be at least 1".into()));
        }
        let m = read_u64(&mut r)? as usize;
        if m == 0 {
            return Err(Error::Corrupt("database holds no prototypes".into()));
        }
        let reg_len = read_u32(&mut r)? as usize;
        let mut registry = Vec::with_capacity(reg_len);
        for _ in 0..reg_len {
            registry.push(read_u32(&mut r)?);
        }
        if registry.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Corrupt("class registry not sorted/unique".into()));
        }
        let reg_set: HashSet<u32> = registry.iter().copied().collect();
        let mut classes = Vec::with_capacity(m);
        let mut features = Vec::with_capacity(m * dimension);
        for _ in 0..m {
            let class = read_u32(&mut r)?;
            if !reg_set.contains(&class) {
                return Err(Error::Corrupt(format!(
                    "class code {class} missing from registry"
                )));
            }
            classes.push(class);
            for _ in 0..dimension {
                let bits = read_u64(&mut r)?;
                let v = f64::from_bits(bits);
                if !v.is_finite() {
                    return Err(Error::Corrupt("non-finite feature value".into()));
                }
                features.push(v);
            }
        }
        Ok(PrototypeDatabase {
            dimension,
            features,
            classes,
            class_registry: registry,
            metric,
            index: OnceLock::new(),
        })
    }

    pub fn load_path(path: &Path) -> Result<PrototypeDatabase> {
        Self::load(File::open(path)?)
    }

    /// Writes rows in the ingest CSV schema. `ids` selects and orders the
    /// rows; `None` writes the whole database. Feature values round-trip
    /// bit-exactly through the shortest decimal representation.
    pub fn write_csv<W: Write>(&self, writer: W, ids: Option<&[PrototypeId]>) -> Result<()> {
        let mut w = BufWriter::new(writer);
        write!(w, "id,class")?;
        for d in 0..self.dimension {
            write!(w, ",f{d}")?;
        }
        writeln!(w)?;
        let all: Vec<PrototypeId>;
        let ids = match ids {
            Some(ids) => ids,
            None => {
                all = (0..self.len() as u64).collect();
                &all
            }
        };
        for &id in ids {
            write!(w, "{id},{}", self.class_of(id))?;
            for f in self.features_of(id) {
                write!(w, ",{f}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Structural equality down to feature bits; used by round-trip tests.
    pub fn same_contents(&self, other: &PrototypeDatabase) -> bool {
        self.dimension == other.dimension
            && self.metric == other.metric
            && self.classes == other.classes
            && self.class_registry == other.class_registry
            && self.features.len() == other.features.len()
            && self
                .features
                .iter()
                .zip(other.features.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Euclidean distance between two prototypes.
pub fn distance(a: &Prototype, b: &Prototype) -> Result<f64> {
    if a.features.len() != b.features.len() {
        return Err(Error::DimensionMismatch {
            expected: a.features.len(),
            actual: b.features.len(),
        });
    }
    Ok(crate::index::squared_distance(&a.features, &b.features).sqrt())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt("unexpected end of file".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
