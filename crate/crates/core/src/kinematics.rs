//! Kinematic trees of revolute joints: validation, forward kinematics,
//! world-frame surface points and point Jacobians.
//!
//! Link and joint ids are dense (`0..n`), so an id doubles as an index. The
//! joint id is also the position of that joint's angle in a configuration
//! vector.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Transform, Vec3};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown link {0}")]
    UnknownLink(usize),
    #[error("unknown surface point {0}")]
    UnknownPoint(usize),
    #[error("joint {joint} angle {value} outside limits [{min}, {max}]")]
    OutOfLimits { joint: usize, value: f64, min: f64, max: f64 },
    #[error("invalid chain: {0}")]
    InvalidChain(ValidationReport),
    #[error("chain file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown robot preset {0:?}")]
    UnknownPreset(String),
    #[error("posture model: {0}")]
    Posture(String),
}

pub type Result<T, E = KinematicsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint<T> {
    pub id: usize,
    pub name: String,
    pub parent: usize,
    pub child: usize,
    /// Pose of the joint frame in the parent link frame.
    pub origin: Transform<T>,
    /// Rotation axis in the joint frame.
    pub axis: Vec3<T>,
    pub limits: [T; 2],
}

/// A point through which the robot is held by the environment (e.g. a foot).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportPoint<T> {
    pub link: usize,
    pub local: Vec3<T>,
}

/// Unvalidated chain description.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec<T> {
    pub name: String,
    pub base: Option<usize>,
    pub links: Vec<Link>,
    pub joints: Vec<Joint<T>>,
    pub supports: Vec<SupportPoint<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateLinkId(usize),
    DuplicateJointId(usize),
    NonDenseLinkIds,
    NonDenseJointIds,
    UnknownLink { joint: usize, link: usize },
    NoRoot,
    MultipleRoots(Vec<usize>),
    BaseMismatch { declared: usize, root: usize },
    MultipleParents(usize),
    Cycle(usize),
    Orphan(usize),
    NonUnitAxis { joint: usize, norm: f64 },
    BadLimits { joint: usize },
    UnknownSupportLink(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateLinkId(id) => write!(f, "duplicate link id {id}"),
            Violation::DuplicateJointId(id) => write!(f, "duplicate joint id {id}"),
            Violation::NonDenseLinkIds => write!(f, "link ids are not 0..n"),
            Violation::NonDenseJointIds => write!(f, "joint ids are not 0..dof"),
            Violation::UnknownLink { joint, link } => write!(f, "joint {joint} references unknown link {link}"),
            Violation::NoRoot => write!(f, "no root link"),
            Violation::MultipleRoots(r) => write!(f, "multiple root links {r:?}"),
            Violation::BaseMismatch { declared, root } => {
                write!(f, "declared base {declared} is not the root link {root}")
            }
            Violation::MultipleParents(l) => write!(f, "link {l} has more than one parent joint"),
            Violation::Cycle(l) => write!(f, "cycle through link {l}"),
            Violation::Orphan(l) => write!(f, "orphan link {l}"),
            Violation::NonUnitAxis { joint, norm } => write!(f, "non-unit axis on joint {joint} (norm {norm})"),
            Violation::BadLimits { joint } => write!(f, "bad limits on joint {joint}"),
            Violation::UnknownSupportLink(l) => write!(f, "support on unknown link {l}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, pred: impl Fn(&Violation) -> bool) -> bool {
        self.violations.iter().any(pred)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

const AXIS_TOLERANCE: f64 = 1e-9;

/// Checks the structural invariants of a chain description.
pub fn validate_chain<T: Real>(spec: &ChainSpec<T>) -> ValidationReport {
    let mut v = Vec::new();
    let n_links = spec.links.len();

    let mut seen = HashSet::new();
    for l in &spec.links {
        if !seen.insert(l.id) {
            v.push(Violation::DuplicateLinkId(l.id));
        }
    }
    if seen.len() != n_links || seen.iter().any(|&id| id >= n_links) {
        v.push(Violation::NonDenseLinkIds);
    }
    let mut seen = HashSet::new();
    for j in &spec.joints {
        if !seen.insert(j.id) {
            v.push(Violation::DuplicateJointId(j.id));
        }
    }
    if seen.len() != spec.joints.len() || seen.iter().any(|&id| id >= spec.joints.len()) {
        v.push(Violation::NonDenseJointIds);
    }

    let link_ok = |id: usize| spec.links.iter().any(|l| l.id == id);
    let mut edges_ok = true;
    for j in &spec.joints {
        for link in [j.parent, j.child] {
            if !link_ok(link) {
                v.push(Violation::UnknownLink { joint: j.id, link });
                edges_ok = false;
            }
        }
        let norm = j.axis.norm().to_f64_lossy();
        if !((norm - 1.0).abs() <= AXIS_TOLERANCE) {
            v.push(Violation::NonUnitAxis { joint: j.id, norm });
        }
        let (lo, hi) = (j.limits[0], j.limits[1]);
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            v.push(Violation::BadLimits { joint: j.id });
        }
    }
    for s in &spec.supports {
        if !link_ok(s.link) {
            v.push(Violation::UnknownSupportLink(s.link));
        }
    }

    if edges_ok {
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n_links.max(1)];
        let pos = |id: usize| spec.links.iter().position(|l| l.id == id).unwrap();
        for j in &spec.joints {
            parents[pos(j.child)].push(pos(j.parent));
        }
        let roots: Vec<usize> = (0..n_links).filter(|&i| parents[i].is_empty()).collect();
        match roots.len() {
            0 => v.push(Violation::NoRoot),
            1 => {
                let root_id = spec.links[roots[0]].id;
                if let Some(b) = spec.base {
                    if b != root_id {
                        v.push(Violation::BaseMismatch { declared: b, root: root_id });
                    }
                }
            }
            _ => v.push(Violation::MultipleRoots(roots.iter().map(|&i| spec.links[i].id).collect())),
        }
        for (i, p) in parents.iter().enumerate().take(n_links) {
            if p.len() > 1 {
                v.push(Violation::MultipleParents(spec.links[i].id));
            }
        }

        // Cycle detection over the directed parent -> child graph.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_links];
        for j in &spec.joints {
            children[pos(j.parent)].push(pos(j.child));
        }
        let mut state = vec![0u8; n_links];
        let mut cycle_links = Vec::new();
        for start in 0..n_links {
            if state[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            state[start] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if *next < children[node].len() {
                    let c = children[node][*next];
                    *next += 1;
                    match state[c] {
                        0 => {
                            state[c] = 1;
                            stack.push((c, 0));
                        }
                        1 => cycle_links.push(spec.links[c].id),
                        _ => {}
                    }
                } else {
                    state[node] = 2;
                    stack.pop();
                }
            }
        }
        cycle_links.sort_unstable();
        cycle_links.dedup();
        for l in &cycle_links {
            v.push(Violation::Cycle(*l));
        }

        if roots.len() == 1 {
            let mut reached = vec![false; n_links];
            let mut stack = vec![roots[0]];
            reached[roots[0]] = true;
            while let Some(n) = stack.pop() {
                for &c in &children[n] {
                    if !reached[c] {
                        reached[c] = true;
                        stack.push(c);
                    }
                }
            }
            for (i, r) in reached.iter().enumerate() {
                if !r && !cycle_links.contains(&spec.links[i].id) {
                    v.push(Violation::Orphan(spec.links[i].id));
                }
            }
        }
    }

    ValidationReport { violations: v }
}

/// A validated kinematic tree.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain<T> {
    spec: ChainSpec<T>,
    base: usize,
    /// Joint ids ordered so every parent link is posed before its children.
    order: Vec<usize>,
    /// Joint ids from the base to each link, base first.
    paths: Vec<Vec<usize>>,
}

impl<T: Real> KinematicChain<T> {
    pub fn new(mut spec: ChainSpec<T>) -> Result<Self> {
        let report = validate_chain(&spec);
        if !report.is_ok() {
            return Err(KinematicsError::InvalidChain(report));
        }
        spec.links.sort_by_key(|l| l.id);
        spec.joints.sort_by_key(|j| j.id);
        let n = spec.links.len();
        let mut parent_joint = vec![None; n];
        for j in &spec.joints {
            parent_joint[j.child] = Some(j.id);
        }
        let base = (0..n).find(|&l| parent_joint[l].is_none()).expect("validated root");
        let mut paths = vec![Vec::new(); n];
        for (link, path) in paths.iter_mut().enumerate() {
            let mut cur = link;
            while let Some(j) = parent_joint[cur] {
                path.push(j);
                cur = spec.joints[j].parent;
            }
            path.reverse();
        }
        let mut order: Vec<usize> = (0..spec.joints.len()).collect();
        order.sort_by_key(|&j| (paths[spec.joints[j].child].len(), j));
        Ok(Self { spec, base, order, paths })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn dof(&self) -> usize {
        self.spec.joints.len()
    }

    pub fn base_link(&self) -> usize {
        self.base
    }

    pub fn links(&self) -> &[Link] {
        &self.spec.links
    }

    pub fn joints(&self) -> &[Joint<T>] {
        &self.spec.joints
    }

    pub fn supports(&self) -> &[SupportPoint<T>] {
        &self.spec.supports
    }

    pub fn spec(&self) -> &ChainSpec<T> {
        &self.spec
    }

    pub fn link_by_name(&self, name: &str) -> Option<usize> {
        self.spec.links.iter().find(|l| l.name == name).map(|l| l.id)
    }

    /// Joint ids on the path from the base to `link`.
    pub fn path_to(&self, link: usize) -> Result<&[usize]> {
        self.paths.get(link).map(Vec::as_slice).ok_or(KinematicsError::UnknownLink(link))
    }

    /// Same geometry with each joint origin translated by `offsets[joint]`.
    pub fn with_origin_offsets(&self, offsets: &[Vec3<T>]) -> Result<Self> {
        self.check_len(offsets.len())?;
        let mut out = self.clone();
        for (j, off) in out.spec.joints.iter_mut().zip(offsets) {
            j.origin.translation += *off;
        }
        Ok(out)
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.dof() {
            return Err(KinematicsError::DimensionMismatch { expected: self.dof(), got });
        }
        Ok(())
    }

    /// Uniform random configuration inside the joint limits.
    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        self.spec
            .joints
            .iter()
            .map(|j| {
                let u: f64 = rng.random();
                j.limits[0] + (j.limits[1] - j.limits[0]) * T::lit(u)
            })
            .collect()
    }

    /// Configuration at the centre of every joint's limits.
    pub fn mid_config(&self) -> Vec<T> {
        self.spec.joints.iter().map(|j| (j.limits[0] + j.limits[1]) * T::lit(0.5)).collect()
    }

    /// World pose of every link, indexed by link id. The base link is the identity.
    pub fn forward_kinematics(&self, q: &[T]) -> Result<Vec<Transform<T>>> {
        Ok(self.frames(q)?.0)
    }

    /// Link poses plus, for each joint, its world origin and world axis.
    pub fn frames(&self, q: &[T]) -> Result<(Vec<Transform<T>>, Vec<(Vec3<T>, Vec3<T>)>)> {
        self.check_len(q.len())?;
        let mut poses = vec![Transform::identity(); self.spec.links.len()];
        let mut axes = vec![(Vec3::zeros(), Vec3::zeros()); self.dof()];
        for &j in &self.order {
            let joint = &self.spec.joints[j];
            let frame = poses[joint.parent].compose(&joint.origin);
            axes[j] = (frame.translation, frame.rotation.mul_vec(&joint.axis));
            poses[joint.child] = frame.compose(&Transform::rotation_about(&joint.axis, q[j]));
        }
        Ok((poses, axes))
    }

    /// World position of a point given in a link frame.
    pub fn world_point(&self, q: &[T], link: usize, local: &Vec3<T>) -> Result<Vec3<T>> {
        if link >= self.spec.links.len() {
            return Err(KinematicsError::UnknownLink(link));
        }
        let poses = self.forward_kinematics(q)?;
        Ok(poses[link].apply(local))
    }

    /// 3 x dof translational Jacobian of a point fixed to `link`.
    ///
    /// Column `j` is `axis_j × (p − origin_j)` for joints between the base and
    /// the link and zero for every other joint.
    pub fn point_jacobian(&self, q: &[T], link: usize, local: &Vec3<T>) -> Result<PointJacobian<T>> {
        let path = self.path_to(link)?;
        let (poses, axes) = self.frames(q)?;
        let p = poses[link].apply(local);
        let mut cols = vec![Vec3::zeros(); self.dof()];
        for &j in path {
            let (o, a) = axes[j];
            cols[j] = a.cross(&(p - o));
        }
        Ok(PointJacobian { cols })
    }

    /// Upper bound on the distance from the base origin to any point fixed on
    /// the chain: the longest sum of joint offsets along a base-to-link path
    /// plus the given local offset on that link.
    pub fn reach_with(&self, points: &[SurfacePoint<T>]) -> T {
        let path_len = |link: usize| -> T {
            self.paths[link].iter().map(|&j| self.spec.joints[j].origin.translation.norm()).sum()
        };
        let mut best = T::zero();
        for p in points {
            best = best.max(path_len(p.link) + p.local.norm());
        }
        for l in 0..self.spec.links.len() {
            best = best.max(path_len(l));
        }
        best
    }
}

/// Column-major 3 x dof matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PointJacobian<T> {
    pub cols: Vec<Vec3<T>>,
}

impl<T: Real> PointJacobian<T> {
    pub fn get(&self, row: usize, col: usize) -> T {
        self.cols[col].get(row)
    }

    pub fn dof(&self) -> usize {
        self.cols.len()
    }

    /// `Jᵀ f`
    pub fn transpose_mul(&self, f: &Vec3<T>) -> Vec<T> {
        self.cols.iter().map(|c| c.dot(f)).collect()
    }
}

/// Joint angles validated against a chain's limits.
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig<T>(Vec<T>);

impl<T: Real> JointConfig<T> {
    pub fn new(chain: &KinematicChain<T>, q: Vec<T>) -> Result<Self> {
        chain.check_len(q.len())?;
        for (j, (&v, joint)) in q.iter().zip(chain.joints()).enumerate() {
            if !(v >= joint.limits[0] && v <= joint.limits[1]) {
                return Err(KinematicsError::OutOfLimits {
                    joint: j,
                    value: v.to_f64_lossy(),
                    min: joint.limits[0].to_f64_lossy(),
                    max: joint.limits[1].to_f64_lossy(),
                });
            }
        }
        Ok(Self(q))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// A sampled contact location fixed to a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint<T> {
    pub id: usize,
    pub link: usize,
    pub local: Vec3<T>,
    /// Outward surface normal in the link frame.
    pub normal: Vec3<T>,
}

/// How data-collection postures are drawn. Joints not listed in `coupled`
/// are uniform within their limits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PostureModel {
    /// Shared posture variables, each uniform over its range.
    #[serde(default)]
    pub variables: Vec<[f64; 2]>,
    #[serde(default)]
    pub coupled: Vec<CoupledJoint>,
    /// Half-width of the uniform jitter added to coupled joints, radians.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Anchor>,
}

/// `q[joint] = offset + Σ weights[k] · variables[k]`, plus jitter, clamped to the limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledJoint {
    pub joint: usize,
    #[serde(default)]
    pub offset: f64,
    pub weights: Vec<f64>,
}

/// Rejects postures that move a body point more than `radius` from where it
/// sits at the `nominal` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub link: usize,
    pub xyz: [f64; 3],
    pub nominal: Vec<f64>,
    pub radius: f64,
}

/// Rejection attempts before posture sampling gives up.
pub const MAX_POSTURE_ATTEMPTS: usize = 100_000;

impl PostureModel {
    pub fn validate<T: Real>(&self, chain: &KinematicChain<T>) -> Result<()> {
        let bad = |m: String| Err(KinematicsError::Posture(m));
        if self.variables.iter().any(|r| !(r[0] <= r[1])) || !(self.jitter >= 0.0) {
            return bad("variable ranges must be ordered and jitter non-negative".into());
        }
        for c in &self.coupled {
            if c.joint >= chain.dof() {
                return bad(format!("unknown joint {}", c.joint));
            }
            if c.weights.len() != self.variables.len() {
                return bad(format!("joint {} has {} weights for {} variables", c.joint, c.weights.len(), self.variables.len()));
            }
        }
        if let Some(a) = &self.anchor {
            if a.link >= chain.links().len() {
                return Err(KinematicsError::UnknownLink(a.link));
            }
            if a.nominal.len() != chain.dof() {
                return Err(KinematicsError::DimensionMismatch { expected: chain.dof(), got: a.nominal.len() });
            }
            if !(a.radius > 0.0) {
                return bad("anchor radius must be positive".into());
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, chain: &KinematicChain<f64>, rng: &mut R) -> Result<Vec<f64>> {
        let target = match &self.anchor {
            Some(a) => Some(chain.world_point(&a.nominal, a.link, &Vec3::from(a.xyz))?),
            None => None,
        };
        for _ in 0..MAX_POSTURE_ATTEMPTS {
            let mut q = chain.random_config(rng);
            let v: Vec<f64> = self.variables.iter().map(|r| r[0] + rng.random::<f64>() * (r[1] - r[0])).collect();
            for c in &self.coupled {
                let jitter = self.jitter * (2.0 * rng.random::<f64>() - 1.0);
                let value = c.offset + c.weights.iter().zip(&v).map(|(w, x)| w * x).sum::<f64>() + jitter;
                let [lo, hi] = chain.joints()[c.joint].limits;
                q[c.joint] = value.clamp(lo, hi);
            }
            match (&self.anchor, target) {
                (Some(a), Some(t)) if chain.world_point(&q, a.link, &Vec3::from(a.xyz))?.distance(&t) > a.radius => continue,
                _ => return Ok(q),
            }
        }
        Err(KinematicsError::Posture("anchor constraint rejected every sample".into()))
    }
}

/// A chain together with its registry of sampled surface points.
#[derive(Debug, Clone, PartialEq)]
pub struct Robot<T> {
    pub chain: KinematicChain<T>,
    pub points: Vec<SurfacePoint<T>>,
    pub posture: Option<PostureModel>,
}

impl<T: Real> Robot<T> {
    pub fn name(&self) -> &str {
        self.chain.name()
    }

    pub fn point(&self, id: usize) -> Result<&SurfacePoint<T>> {
        self.points.get(id).ok_or(KinematicsError::UnknownPoint(id))
    }

    pub fn point_world(&self, q: &[T], id: usize) -> Result<Vec3<T>> {
        let p = self.point(id)?;
        self.chain.world_point(q, p.link, &p.local)
    }

    /// World positions of all surface points at `q`.
    pub fn points_world(&self, q: &[T]) -> Result<Vec<Vec3<T>>> {
        let poses = self.chain.forward_kinematics(q)?;
        Ok(self.points.iter().map(|p| poses[p.link].apply(&p.local)).collect())
    }

    pub fn reach(&self) -> T {
        self.chain.reach_with(&self.points)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ChainFile = serde_json::from_str(text)?;
        file.into_robot()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ChainFile::from_robot(self)).expect("serializable chain")
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> Robot<U> {
        ChainFile::from_robot(self).into_robot().expect("already validated")
    }
}

impl Robot<f64> {
    /// A data-collection configuration: the posture model when there is one,
    /// otherwise uniform within the joint limits.
    pub fn sample_config<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match &self.posture {
            Some(p) => p.sample(&self.chain, rng),
            None => Ok(self.chain.random_config(rng)),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "spotlike" => SPOTLIKE_CHAIN,
            "frankalike" => FRANKALIKE_CHAIN,
            other => return Err(KinematicsError::UnknownPreset(other.to_string())),
        };
        Self::from_json(text)
    }
}

pub const SPOTLIKE_CHAIN: &str = include_str!("../presets/spotlike.chain.json");
pub const FRANKALIKE_CHAIN: &str = include_str!("../presets/frankalike.chain.json");
pub const PRESETS: [&str; 2] = ["spotlike", "frankalike"];

// On-disk chain description.

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OriginFile {
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JointFile {
    id: usize,
    #[serde(default)]
    name: String,
    parent: usize,
    child: usize,
    origin: OriginFile,
    axis: [f64; 3],
    limits: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SupportFile {
    link: usize,
    xyz: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PointFile {
    id: usize,
    link: usize,
    xyz: [f64; 3],
    #[serde(default)]
    normal: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainFile {
    #[serde(default)]
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<usize>,
    links: Vec<Link>,
    joints: Vec<JointFile>,
    #[serde(default)]
    supports: Vec<SupportFile>,
    #[serde(default)]
    surface_points: Vec<PointFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    posture: Option<PostureModel>,
}

fn arr<T: Real>(v: Vec3<T>) -> [f64; 3] {
    v.to_f64().into()
}

impl ChainFile {
    fn from_robot<T: Real>(robot: &Robot<T>) -> Self {
        let spec = robot.chain.spec();
        ChainFile {
            name: spec.name.clone(),
            base: Some(robot.chain.base_link()),
            links: spec.links.clone(),
            joints: spec
                .joints
                .iter()
                .map(|j| JointFile {
                    id: j.id,
                    name: j.name.clone(),
                    parent: j.parent,
                    child: j.child,
                    origin: OriginFile { xyz: arr(j.origin.translation), rpy: rotation_to_rpy(&j.origin) },
                    axis: arr(j.axis),
                    limits: [j.limits[0].to_f64_lossy(), j.limits[1].to_f64_lossy()],
                })
                .collect(),
            supports: spec.supports.iter().map(|s| SupportFile { link: s.link, xyz: arr(s.local) }).collect(),
            surface_points: robot
                .points
                .iter()
                .map(|p| PointFile { id: p.id, link: p.link, xyz: arr(p.local), normal: Some(arr(p.normal)) })
                .collect(),
            posture: robot.posture.clone(),
        }
    }

    fn into_robot<T: Real>(self) -> Result<Robot<T>> {
        let spec = ChainSpec {
            name: self.name,
            base: self.base,
            links: self.links,
            joints: self
                .joints
                .into_iter()
                .map(|j| Joint {
                    id: j.id,
                    name: j.name,
                    parent: j.parent,
                    child: j.child,
                    origin: Transform::from_xyz_rpy(Vec3::from_f64(j.origin.xyz), Vec3::from_f64(j.origin.rpy)),
                    axis: Vec3::from_f64(j.axis),
                    limits: [T::lit(j.limits[0]), T::lit(j.limits[1])],
                })
                .collect(),
            supports: self
                .supports
                .into_iter()
                .map(|s| SupportPoint { link: s.link, local: Vec3::from_f64(s.xyz) })
                .collect(),
        };
        let chain = KinematicChain::new(spec)?;
        let mut points: Vec<SurfacePoint<T>> = Vec::with_capacity(self.surface_points.len());
        for (i, p) in self.surface_points.into_iter().enumerate() {
            if p.id != i {
                return Err(KinematicsError::UnknownPoint(p.id));
            }
            if p.link >= chain.links().len() {
                return Err(KinematicsError::UnknownLink(p.link));
            }
            let local = Vec3::from_f64(p.xyz);
            let normal = match p.normal {
                Some(n) => Vec3::from_f64(n).normalized(),
                None if !local.is_zero() => local.normalized(),
                None => Vec3::new(T::zero(), T::zero(), T::one()),
            };
            points.push(SurfacePoint { id: p.id, link: p.link, local, normal });
        }
        if let Some(posture) = &self.posture {
            posture.validate(&chain)?;
        }
        Ok(Robot { chain, points, posture: self.posture })
    }
}

/// Extracts roll/pitch/yaw from a transform built with [`Transform::from_xyz_rpy`].
fn rotation_to_rpy<T: Real>(t: &Transform<T>) -> [f64; 3] {
    let m = t.rotation.m.map(|r| r.map(|v| v.to_f64_lossy()));
    let pitch = (-m[2][0]).clamp(-1.0, 1.0).asin();
    if m[2][0].abs() < 1.0 - 1e-12 {
        [m[2][1].atan2(m[2][2]), pitch, m[1][0].atan2(m[0][0])]
    } else {
        [0.0, pitch, (-m[0][1]).atan2(m[1][1])]
    }
}

#[cfg(test)]
pub(crate) mod test_chains {
    use super::*;

    /// Two revolute joints about +z, unit links along +x, tip frame on link 2.
    /// Links: 0 base, 1 first arm, 2 second arm, 3 tip.
    pub fn planar2() -> KinematicChain<f64> {
        KinematicChain::new(planar2_spec()).unwrap()
    }

    pub fn planar2_spec() -> ChainSpec<f64> {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let lim = [-std::f64::consts::PI, std::f64::consts::PI];
        ChainSpec {
            name: "planar2".into(),
            base: Some(0),
            links: (0..3).map(|i| Link { id: i, name: format!("l{i}") }).collect(),
            joints: vec![
                Joint { id: 0, name: "j0".into(), parent: 0, child: 1, origin: Transform::identity(), axis: z, limits: lim },
                Joint {
                    id: 1,
                    name: "j1".into(),
                    parent: 1,
                    child: 2,
                    origin: Transform::new(crate::geometry::Mat3::identity(), Vec3::new(1.0, 0.0, 0.0)),
                    axis: z,
                    limits: lim,
                },
            ],
            supports: vec![],
        }
    }

    pub fn tip() -> Vec3<f64> {
        Vec3::new(1.0, 0.0, 0.0)
    }
}
