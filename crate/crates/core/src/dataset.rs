//! Proprioceptive samples, datasets, input normalization, class encoding,
//! stratified splits and the line-oriented dataset file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::kinematics::{KinematicsError, Robot, SurfacePoint};
use crate::scalar::Real;

pub const SCHEMA: &str = "proprio-v1";
/// Default tolerance for mapping a location onto a sampled point, meters.
pub const DEFAULT_ENCODE_TOL: f64 = 0.02;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("{k} samples cannot fill both sides of a {ratio} split")]
    TooSmall { k: usize, ratio: f64 },
    #[error("location is {distance:.4} m from the nearest sampled point (tolerance {tol} m)")]
    Unmappable { distance: f64, tol: f64 },
    #[error("class {index} out of range for {n_points} points")]
    ClassOutOfRange { index: usize, n_points: usize },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("non-finite value in sample {0}")]
    NonFinite(usize),
    #[error("k = {k} needs between 1 and {n} neighbors")]
    BadNeighborCount { k: usize, n: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// One `(p, q, τ)` tuple. `point_id == None` marks a no-contact sample,
/// whose location is the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ProprioSample {
    pub p: [f64; 3],
    pub q: Vec<f64>,
    pub tau: Vec<f64>,
    pub point_id: Option<usize>,
    pub t: f64,
}

impl ProprioSample {
    pub fn is_contact(&self) -> bool {
        self.point_id.is_some()
    }

    /// Network input in the fixed `[q; τ]` order.
    pub fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.q.len() * 2);
        x.extend_from_slice(&self.q);
        x.extend_from_slice(&self.tau);
        x
    }

    pub fn location(&self) -> Vec3<f64> {
        Vec3::from(self.p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub robot: String,
    pub dof: usize,
    pub points: Vec<SurfacePoint<f64>>,
    pub samples: Vec<ProprioSample>,
    /// Generation parameters, echoed verbatim into the file header.
    pub protocol: serde_json::Value,
}

impl Dataset {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn contact_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_contact()).count()
    }

    /// A dataset sharing this one's metadata but holding `samples`.
    pub fn with_samples(&self, samples: Vec<ProprioSample>) -> Dataset {
        Dataset {
            robot: self.robot.clone(),
            dof: self.dof,
            points: self.points.clone(),
            samples,
            protocol: self.protocol.clone(),
        }
    }

    /// Class index used for training: the point id, or `n` for no contact.
    pub fn class_of(&self, sample: &ProprioSample) -> usize {
        sample.point_id.unwrap_or(self.n_points())
    }

    pub fn check(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(DatasetError::Empty);
        }
        for (i, s) in self.samples.iter().enumerate() {
            for len in [s.q.len(), s.tau.len()] {
                if len != self.dof {
                    return Err(DatasetError::DimensionMismatch { expected: self.dof, got: len });
                }
            }
            match s.point_id {
                Some(id) if id >= self.n_points() => {
                    return Err(DatasetError::ClassOutOfRange { index: id, n_points: self.n_points() })
                }
                None if s.p != [0.0; 3] => {
                    return Err(DatasetError::Schema { line: i + 2, message: "no-contact sample with p != 0".into() })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-dimension extrema of the `[q; τ]` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats<T> {
    pub min: Vec<T>,
    pub max: Vec<T>,
}

impl<T: Real> NormalizationStats<T> {
    /// Stats that leave inputs in `[-1, 1]` unchanged.
    pub fn identity(dim: usize) -> Self {
        Self { min: vec![-T::one(); dim], max: vec![T::one(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn is_constant(&self, d: usize) -> bool {
        self.min[d] == self.max[d]
    }

    pub fn constant_dims(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&d| self.is_constant(d)).collect()
    }

    /// `2 (x - min) / (max - min) - 1` per dimension; constant dimensions map to 0.
    pub fn normalize_into(&self, x: &[T], out: &mut [T]) -> Result<()> {
        if x.len() != self.dim() || out.len() != self.dim() {
            return Err(DatasetError::DimensionMismatch { expected: self.dim(), got: x.len().min(out.len()) });
        }
        let two = T::lit(2.0);
        for d in 0..self.dim() {
            let range = self.max[d] - self.min[d];
            out[d] = if range == T::zero() { T::zero() } else { two * (x[d] - self.min[d]) / range - T::one() };
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim()];
        self.normalize_into(x, &mut out)?;
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> NormalizationStats<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::lit(x.to_f64_lossy())).collect();
        NormalizationStats { min: c(&self.min), max: c(&self.max) }
    }
}

/// Exact per-dimension extrema of `[q; τ]` over every sample.
pub fn fit_normalization(dataset: &Dataset) -> Result<NormalizationStats<f64>> {
    if dataset.samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    let dim = 2 * dataset.dof;
    let mut min = vec![f64::INFINITY; dim];
    let mut max = vec![f64::NEG_INFINITY; dim];
    for s in &dataset.samples {
        if s.q.len() != dataset.dof || s.tau.len() != dataset.dof {
            return Err(DatasetError::DimensionMismatch { expected: dataset.dof, got: s.q.len().max(s.tau.len()) });
        }
        for (d, &v) in s.q.iter().chain(&s.tau).enumerate() {
            min[d] = min[d].min(v);
            max[d] = max[d].max(v);
        }
    }
    Ok(NormalizationStats { min, max })
}

/// Stratified split by point id: every stratum contributes `⌊ratio·n⌋`
/// samples to the training side and the remaining slots up to `⌊ratio·k⌋`
/// go to the strata with the largest fractional remainders.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::BadRatio(ratio));
    }
    let k = dataset.len();
    let n_train = (ratio * k as f64).floor() as usize;
    if n_train == 0 || n_train == k {
        return Err(DatasetError::TooSmall { k, ratio });
    }

    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        strata.entry(dataset.class_of(s)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut quota = Vec::with_capacity(strata.len());
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let exact = ratio * members.len() as f64;
        quota.push((exact.floor() as usize, exact - exact.floor()));
    }
    let assigned: usize = quota.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| quota[b].1.total_cmp(&quota[a].1).then(a.cmp(&b)));
    for &s in order.iter().cycle().take(n_train.saturating_sub(assigned)) {
        quota[s].0 += 1;
    }

    let mut in_train = vec![false; k];
    for (members, (take, _)) in strata.values().zip(&quota) {
        for &i in members.iter().take(*take) {
            in_train[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::with_capacity(n_train), Vec::with_capacity(k - n_train));
    for (s, keep) in dataset.samples.iter().zip(in_train) {
        if keep {
            train.push(s.clone());
        } else {
            val.push(s.clone());
        }
    }
    Ok((dataset.with_samples(train), dataset.with_samples(val)))
}

/// Class index in `0..=n`; `n` is the no-contact class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassLabel(pub usize);

impl ClassLabel {
    pub fn is_no_contact(&self, n_points: usize) -> bool {
        self.0 == n_points
    }

    pub fn one_hot<T: Real>(&self, n_points: usize) -> Vec<T> {
        let mut v = vec![T::zero(); n_points + 1];
        v[self.0.min(n_points)] = T::one();
        v
    }
}

/// Maps a location onto the nearest sampled point (world positions at the
/// current configuration), or onto the no-contact class for the origin.
pub fn encode_class(p: &Vec3<f64>, world_points: &[Vec3<f64>], tol: f64) -> Result<ClassLabel> {
    let n = world_points.len();
    if p.is_zero() {
        return Ok(ClassLabel(n));
    }
    let (best, dist) = world_points
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w.distance(p)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(DatasetError::Empty)?;
    if dist <= tol {
        Ok(ClassLabel(best))
    } else {
        Err(DatasetError::Unmappable { distance: dist, tol })
    }
}

/// Location of a class at configuration `q`; the no-contact class decodes to the origin.
pub fn decode_class<T: Real>(robot: &Robot<T>, label: ClassLabel, q: &[T]) -> Result<Vec3<T>> {
    let n = robot.points.len();
    match label.0 {
        i if i < n => Ok(robot.point_world(q, i)?),
        i if i == n => Ok(Vec3::zeros()),
        i => Err(DatasetError::ClassOutOfRange { index: i, n_points: n }),
    }
}

// File format.

#[derive(Debug, Serialize, Deserialize)]
struct PointRecord {
    id: usize,
    link: usize,
    xyz: [f64; 3],
    normal: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    robot: String,
    dof: usize,
    n_points: usize,
    protocol: serde_json::Value,
    #[serde(default)]
    points: Vec<PointRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    p: [f64; 3],
    q: Vec<f64>,
    tau: Vec<f64>,
    point_id: i64,
    t: f64,
}

/// Writes every float with 17 significant digits so files round-trip exactly.
struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

fn write_line<W: Write, S: Serialize>(w: &mut W, value: &S) -> io::Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(&mut *w, ExactFloats);
    value.serialize(&mut ser).map_err(io::Error::other)?;
    w.write_all(b"\n")
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        schema: SCHEMA.to_string(),
        robot: dataset.robot.clone(),
        dof: dataset.dof,
        n_points: dataset.n_points(),
        protocol: dataset.protocol.clone(),
        points: dataset
            .points
            .iter()
            .map(|p| PointRecord { id: p.id, link: p.link, xyz: p.local.into(), normal: p.normal.into() })
            .collect(),
    };
    write_line(&mut w, &header)?;
    for (i, s) in dataset.samples.iter().enumerate() {
        if !s.p.iter().chain(&s.q).chain(&s.tau).chain([&s.t]).all(|v| v.is_finite()) {
            return Err(DatasetError::NonFinite(i));
        }
        let rec = SampleRecord {
            p: s.p,
            q: s.q.clone(),
            tau: s.tau.clone(),
            point_id: s.point_id.map_or(-1, |id| id as i64),
            t: s.t,
        };
        write_line(&mut w, &rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines.next().ok_or(DatasetError::Parse { line: 1, message: "missing header".into() })?;
    let header: Header =
        serde_json::from_str(&first?).map_err(|e| DatasetError::Parse { line: 1, message: e.to_string() })?;
    if header.schema != SCHEMA {
        return Err(DatasetError::Schema { line: 1, message: format!("unknown schema {:?}", header.schema) });
    }
    if !header.points.is_empty() && header.points.len() != header.n_points {
        return Err(DatasetError::Schema { line: 1, message: "n_points disagrees with point registry".into() });
    }
    let points = header
        .points
        .iter()
        .map(|p| SurfacePoint { id: p.id, link: p.link, local: Vec3::from(p.xyz), normal: Vec3::from(p.normal) })
        .collect();
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse { line: line_no, message: e.to_string() })?;
        let schema = |message: String| DatasetError::Schema { line: line_no, message };
        if rec.q.len() != header.dof {
            return Err(schema(format!("{} joint positions, header declares dof={}", rec.q.len(), header.dof)));
        }
        if rec.tau.len() != header.dof {
            return Err(schema(format!("{} torques, header declares dof={}", rec.tau.len(), header.dof)));
        }
        let point_id = match rec.point_id {
            -1 => None,
            id if id >= 0 && (id as usize) < header.n_points => Some(id as usize),
            id => return Err(schema(format!("point_id {id} outside 0..{}", header.n_points))),
        };
        if point_id.is_none() && rec.p != [0.0; 3] {
            return Err(schema("no-contact sample must have p = (0,0,0)".into()));
        }
        samples.push(ProprioSample { p: rec.p, q: rec.q, tau: rec.tau, point_id, t: rec.t });
    }
    Ok(Dataset { robot: header.robot, dof: header.dof, points, samples, protocol: header.protocol })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
