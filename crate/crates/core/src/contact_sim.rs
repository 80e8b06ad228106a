//! Synthetic proprioception: joint torque residuals produced by a single
//! contact force, plus dataset generation following a touch-collection
//! protocol (random configurations, repeated touches per sampled point with
//! varied force, and a share of no-contact captures).
//!
//! Torques are gravity-compensated residuals. For a fixed-base chain the
//! residual is `Jᵀ F`. A chain that declares support points (a legged robot
//! standing on its feet) additionally carries the contact wrench down to the
//! supports: the reaction forces are the minimum-norm set that balances the
//! wrench, and each support contributes `J_supportᵀ g` to the joints of its
//! own branch.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, ProprioSample};
use crate::geometry::{Transform, Vec3};
use crate::kinematics::{KinematicChain, KinematicsError, Robot};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("robot has no surface points")]
    NoPoints,
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("support reactions are undetermined: supports are degenerate")]
    DegenerateSupports,
    #[error("instance has {got} gains for a {expected}-joint chain")]
    InstanceMismatch { expected: usize, got: usize },
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

/// Where a contact is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContactSite {
    Point(usize),
    Free { link: usize, local: Vec3<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactEvent {
    pub site: ContactSite,
    /// Force applied to the robot, world frame, Newtons.
    pub force: Vec3<f64>,
}

/// Linear map from a contact force to joint torques, one row per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct TorqueMap {
    pub rows: Vec<Vec3<f64>>,
}

impl TorqueMap {
    pub fn apply(&self, force: &Vec3<f64>) -> Vec<f64> {
        self.rows.iter().map(|r| r.dot(force)).collect()
    }

    pub fn apply_into(&self, force: &Vec3<f64>, out: &mut [f64]) {
        for (o, r) in out.iter_mut().zip(&self.rows) {
            *o = r.dot(force);
        }
    }

    /// Largest possible |τ_j| over joints for a force of magnitude `f`.
    pub fn max_abs_torque(&self, f: f64) -> f64 {
        self.rows.iter().map(|r| r.norm() * f).fold(0.0, f64::max)
    }
}

/// Everything about a configuration that does not depend on the contact site.
pub struct ContactModel<'a> {
    chain: &'a KinematicChain<f64>,
    poses: Vec<Transform<f64>>,
    axes: Vec<(Vec3<f64>, Vec3<f64>)>,
    /// Per support: its world position, Jacobian columns, and the 3x6 block of
    /// `Gᵀ (G Gᵀ)⁻¹` mapping a wrench to that support's reaction.
    supports: Vec<SupportTerm>,
}

struct SupportTerm {
    jac: Vec<Vec3<f64>>,
    to_reaction: DMatrix<f64>,
}

impl<'a> ContactModel<'a> {
    pub fn new(chain: &'a KinematicChain<f64>, q: &[f64]) -> Result<Self> {
        let (poses, axes) = chain.frames(q)?;
        let mut model = ContactModel { chain, poses, axes, supports: Vec::new() };
        let sups = chain.supports();
        if !sups.is_empty() {
            let m = sups.len();
            let positions: Vec<Vec3<f64>> = sups.iter().map(|s| model.poses[s.link].apply(&s.local)).collect();
            // Grasp matrix: wrench about the base origin produced by unit support forces.
            let mut g = DMatrix::zeros(6, 3 * m);
            for (i, f) in positions.iter().enumerate() {
                for a in 0..3 {
                    let mut e = Vec3::zeros();
                    match a {
                        0 => e.x = 1.0,
                        1 => e.y = 1.0,
                        _ => e.z = 1.0,
                    }
                    let moment = f.cross(&e);
                    g[(a, 3 * i + a)] = 1.0;
                    g[(3, 3 * i + a)] = moment.x;
                    g[(4, 3 * i + a)] = moment.y;
                    g[(5, 3 * i + a)] = moment.z;
                }
            }
            let ggt = &g * g.transpose();
            let inv = ggt.cholesky().ok_or(SimError::DegenerateSupports)?.inverse();
            let s = g.transpose() * inv;
            for (i, sup) in sups.iter().enumerate() {
                let jac = model.jacobian(sup.link, &positions[i])?;
                model.supports.push(SupportTerm { jac, to_reaction: s.rows(3 * i, 3).into_owned() });
            }
        }
        Ok(model)
    }

    fn jacobian(&self, link: usize, world: &Vec3<f64>) -> Result<Vec<Vec3<f64>>> {
        let mut cols = vec![Vec3::zeros(); self.chain.dof()];
        for &j in self.chain.path_to(link)? {
            let (o, a) = self.axes[j];
            cols[j] = a.cross(&(*world - o));
        }
        Ok(cols)
    }

    pub fn world(&self, link: usize, local: &Vec3<f64>) -> Result<Vec3<f64>> {
        let pose = self.poses.get(link).ok_or(KinematicsError::UnknownLink(link))?;
        Ok(pose.apply(local))
    }

    /// Torque map for a contact on `link` at `local`.
    pub fn torque_map(&self, link: usize, local: &Vec3<f64>) -> Result<TorqueMap> {
        let r = self.world(link, local)?;
        let direct = self.jacobian(link, &r)?;
        let mut rows: Vec<Vec3<f64>> = direct;
        if !self.supports.is_empty() {
            // wrench = W F with W = [I; [r]×]
            let mut w = DMatrix::zeros(6, 3);
            for a in 0..3 {
                w[(a, a)] = 1.0;
            }
            let skew = [[0.0, -r.z, r.y], [r.z, 0.0, -r.x], [-r.y, r.x, 0.0]];
            for (i, row) in skew.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    w[(3 + i, j)] = v;
                }
            }
            for sup in &self.supports {
                // reaction g = -S_i W F
                let k = -(&sup.to_reaction * &w);
                for (j, col) in sup.jac.iter().enumerate() {
                    if col.is_zero() {
                        continue;
                    }
                    let c = DVector::from_row_slice(&[col.x, col.y, col.z]);
                    let contrib = k.transpose() * c;
                    rows[j] += Vec3::new(contrib[0], contrib[1], contrib[2]);
                }
            }
        }
        Ok(TorqueMap { rows })
    }
}

fn resolve(robot: &Robot<f64>, site: &ContactSite) -> Result<(usize, Vec3<f64>)> {
    match *site {
        ContactSite::Point(id) => {
            let p = robot.point(id)?;
            Ok((p.link, p.local))
        }
        ContactSite::Free { link, local } => {
            if link >= robot.chain.links().len() {
                return Err(KinematicsError::UnknownLink(link).into());
            }
            Ok((link, local))
        }
    }
}

/// Noise-free torque residual produced by one contact.
pub fn contact_torques(robot: &Robot<f64>, q: &[f64], contact: &ContactEvent) -> Result<Vec<f64>> {
    let (link, local) = resolve(robot, &contact.site)?;
    let model = ContactModel::new(&robot.chain, q)?;
    Ok(model.torque_map(link, &local)?.apply(&contact.force))
}

/// Per-instance deviation from the nominal robot: joint origin offsets and
/// per-joint torque sensor gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotInstance {
    pub scale: f64,
    pub seed: u64,
    pub gains: Vec<f64>,
    pub origin_offsets: Vec<[f64; 3]>,
}

/// Smallest gain an instance may draw.
pub const MIN_GAIN: f64 = 0.05;

impl RobotInstance {
    pub fn identity(dof: usize) -> Self {
        Self { scale: 0.0, seed: 0, gains: vec![1.0; dof], origin_offsets: vec![[0.0; 3]; dof] }
    }

    pub fn is_identity(&self) -> bool {
        self.gains.iter().all(|&g| g == 1.0) && self.origin_offsets.iter().all(|o| *o == [0.0; 3])
    }

    /// The instance's true geometry.
    pub fn apply(&self, chain: &KinematicChain<f64>) -> Result<KinematicChain<f64>> {
        if self.gains.len() != chain.dof() || self.origin_offsets.len() != chain.dof() {
            return Err(SimError::InstanceMismatch { expected: chain.dof(), got: self.gains.len() });
        }
        let offsets: Vec<Vec3<f64>> = self.origin_offsets.iter().map(|&o| Vec3::from(o)).collect();
        Ok(chain.with_origin_offsets(&offsets)?)
    }
}

/// Draws a robot instance: joint origins jittered by `N(0, scale·|offset|)`
/// per axis and gains `1 + N(0, scale)` (floored at [`MIN_GAIN`]).
pub fn perturb_instance(chain: &KinematicChain<f64>, scale: f64, seed: u64) -> RobotInstance {
    let dof = chain.dof();
    if scale <= 0.0 {
        return RobotInstance { seed, ..RobotInstance::identity(dof) };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let origin_offsets = chain
        .joints()
        .iter()
        .map(|j| {
            let sd = scale * j.origin.translation.norm();
            [unit.sample(&mut rng) * sd, unit.sample(&mut rng) * sd, unit.sample(&mut rng) * sd]
        })
        .collect();
    let gains = (0..dof).map(|_| (1.0 + scale * unit.sample(&mut rng)).max(MIN_GAIN)).collect();
    RobotInstance { scale, seed, gains, origin_offsets }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionProtocol {
    pub n_configs: usize,
    pub reps_per_point: usize,
    /// Extra no-contact samples as a fraction of the contact sample count.
    pub no_contact_fraction: f64,
    /// Torque noise, N·m. `None` resolves to 1% of the robot's largest
    /// single-joint response to a maximal force.
    pub noise_sigma_torque: Option<f64>,
    pub noise_sigma_position: f64,
    pub force_min: f64,
    pub force_max: f64,
    /// Largest angle between the applied force and the inward normal, degrees.
    pub max_tilt_deg: f64,
    /// Recording rate used to timestamp samples.
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for CollectionProtocol {
    fn default() -> Self {
        Self {
            n_configs: 50,
            reps_per_point: 1,
            no_contact_fraction: 0.1,
            noise_sigma_torque: None,
            noise_sigma_position: 0.002,
            force_min: 1.0,
            force_max: 30.0,
            max_tilt_deg: 60.0,
            sample_rate_hz: 60.0,
            seed: 0,
        }
    }
}

impl CollectionProtocol {
    /// Defaults for a preset: 50 configurations at 60 Hz for the quadruped,
    /// 25 configurations at 30 Hz for the arm.
    pub fn for_robot(name: &str) -> Self {
        match name {
            "frankalike" => Self { n_configs: 25, sample_rate_hz: 30.0, ..Self::default() },
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::Protocol(m.to_string()));
        if self.n_configs == 0 || self.reps_per_point == 0 {
            return bad("counts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.no_contact_fraction) {
            return bad("no_contact_fraction must lie in [0, 1]");
        }
        if self.noise_sigma_torque.is_some_and(|s| !(s >= 0.0)) || !(self.noise_sigma_position >= 0.0) {
            return bad("noise sigmas must be non-negative");
        }
        if !(self.force_min > 0.0 && self.force_min <= self.force_max) {
            return bad("force bounds must satisfy 0 < min <= max");
        }
        if !(0.0..=90.0).contains(&self.max_tilt_deg) {
            return bad("max_tilt_deg must lie in [0, 90]");
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive");
        }
        Ok(())
    }
}

/// Default torque noise for a robot: 1% of the largest single-joint torque a
/// maximal force at any sampled point produces, over a fixed set of
/// configurations.
pub fn default_torque_noise(robot: &Robot<f64>, force_max: f64) -> Result<f64> {
    const CONFIGS: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    for _ in 0..CONFIGS {
        let q = robot.sample_config(&mut rng)?;
        let model = ContactModel::new(&robot.chain, &q)?;
        for p in &robot.points {
            worst = worst.max(model.torque_map(p.link, &p.local)?.max_abs_torque(force_max));
        }
    }
    Ok(0.01 * worst)
}

/// Uniform direction on the spherical cap of half-angle `max_tilt` around `axis`.
pub fn sample_cone<R: Rng + ?Sized>(rng: &mut R, axis: &Vec3<f64>, max_tilt: f64) -> Vec3<f64> {
    let cos_min = max_tilt.cos();
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - cos_min);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let u = axis.any_orthogonal();
    let v = axis.cross(&u);
    *axis * cos_t + (u * phi.cos() + v * phi.sin()) * sin_t
}

/// Resolved generation parameters, recorded in the dataset header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    #[serde(flatten)]
    pub protocol: CollectionProtocol,
    pub resolved_noise_sigma_torque: f64,
    pub instance: RobotInstance,
}

impl GenerationRecord {
    pub fn from_dataset(dataset: &Dataset) -> Option<Self> {
        serde_json::from_value(dataset.protocol.clone()).ok()
    }
}

/// Generates a dataset. Samples are emitted per configuration, no-contact
/// captures first, then points in id order with their repetitions.
pub fn synthesize_dataset(robot: &Robot<f64>, protocol: &CollectionProtocol, instance: &RobotInstance) -> Result<Dataset> {
    protocol.validate()?;
    if robot.points.is_empty() {
        return Err(SimError::NoPoints);
    }
    let dof = robot.chain.dof();
    let true_chain = instance.apply(&robot.chain)?;
    let sigma_tau = match protocol.noise_sigma_torque {
        Some(s) => s,
        None => default_torque_noise(robot, protocol.force_max)?,
    };
    let tau_noise = Normal::new(0.0, sigma_tau).map_err(|e| SimError::Protocol(e.to_string()))?;
    let q_noise = Normal::new(0.0, protocol.noise_sigma_position).map_err(|e| SimError::Protocol(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);

    let n_contact = protocol.n_configs * robot.points.len() * protocol.reps_per_point;
    let n_free = (protocol.no_contact_fraction * n_contact as f64).round() as usize;
    let dt = 1.0 / protocol.sample_rate_hz;
    let mut samples = Vec::with_capacity(n_contact + n_free);
    let max_tilt = protocol.max_tilt_deg.to_radians();
    let mut tau = vec![0.0; dof];

    for c in 0..protocol.n_configs {
        let q_true = robot.sample_config(&mut rng)?;
        let model = ContactModel::new(&true_chain, &q_true)?;
        let free_here = n_free / protocol.n_configs + usize::from(c < n_free % protocol.n_configs);
        let measure_q = |rng: &mut ChaCha8Rng| -> Vec<f64> { q_true.iter().map(|&v| v + q_noise.sample(rng)).collect() };

        for _ in 0..free_here {
            let q = measure_q(&mut rng);
            let tau: Vec<f64> = (0..dof).map(|_| tau_noise.sample(&mut rng)).collect();
            let t = samples.len() as f64 * dt;
            samples.push(ProprioSample { p: [0.0; 3], q, tau, point_id: None, t });
        }
        for point in &robot.points {
            let map = model.torque_map(point.link, &point.local)?;
            let p = model.world(point.link, &point.local)?;
            let inward = -model.poses[point.link].rotation.mul_vec(&point.normal);
            for _ in 0..protocol.reps_per_point {
                let dir = sample_cone(&mut rng, &inward, max_tilt);
                let magnitude = protocol.force_min + rng.random::<f64>() * (protocol.force_max - protocol.force_min);
                map.apply_into(&(dir * magnitude), &mut tau);
                let measured: Vec<f64> =
                    tau.iter().zip(&instance.gains).map(|(&t, &g)| g * t + tau_noise.sample(&mut rng)).collect();
                let q = measure_q(&mut rng);
                let t = samples.len() as f64 * dt;
                samples.push(ProprioSample { p: p.into(), q, tau: measured, point_id: Some(point.id), t });
            }
        }
    }

    let record = GenerationRecord {
        protocol: protocol.clone(),
        resolved_noise_sigma_torque: sigma_tau,
        instance: instance.clone(),
    };
    Ok(Dataset {
        robot: robot.name().to_string(),
        dof,
        points: robot.points.clone(),
        samples,
        protocol: serde_json::to_value(record).expect("serializable record"),
    })
}
