//! One simulated robot and its live inference loop, independent of transport.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;
use unitac::contact_sim::{default_torque_noise, CollectionProtocol, ContactModel, TorqueMap};
use unitac::geometry::Vec3;
use unitac::kinematics::{JointConfig, KinematicsError, Robot};
use unitac::live::{LiveError, LiveState};
use unitac::model::MlpModel;
use unitac::phri::{DwellTracker, PhriError, RuleSet};

use crate::protocol::{ClientMsg, ServerMsg, Telemetry};

pub const DEFAULT_TICK_HZ: f64 = 60.0;
/// Force used when a touch on a registered point names none, Newtons.
pub const DEFAULT_TOUCH_FORCE_N: f64 = 15.0;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("a free touch needs link, local and force")]
    IncompleteTouch,
    #[error("force must be finite")]
    BadForce,
    #[error("model expects {model} joints, robot has {robot}")]
    DofMismatch { model: usize, robot: usize },
    #[error("tick rate must be positive")]
    TickRate,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Sim(#[from] unitac::contact_sim::SimError),
    #[error(transparent)]
    Live(#[from] LiveError),
    #[error(transparent)]
    Rules(#[from] PhriError),
}

pub type Result<T, E = SessionError> = std::result::Result<T, E>;

/// Immutable state shared by every session on a server.
#[derive(Debug)]
pub struct Shared {
    pub robot: Robot<f64>,
    pub model: MlpModel<f64>,
    pub rules: RuleSet,
    pub tick_hz: f64,
    pub noise_sigma_torque: f64,
    pub noise_sigma_position: f64,
}

impl Shared {
    /// Noise levels follow the robot's default collection protocol.
    pub fn new(robot: Robot<f64>, model: MlpModel<f64>, rules: RuleSet, tick_hz: f64) -> Result<Self> {
        if model.dof != robot.chain.dof() {
            return Err(SessionError::DofMismatch { model: model.dof, robot: robot.chain.dof() });
        }
        if !(tick_hz > 0.0 && tick_hz.is_finite()) {
            return Err(SessionError::TickRate);
        }
        rules.validate(&robot.chain)?;
        let proto = CollectionProtocol::for_robot(robot.name());
        let noise_sigma_torque = match proto.noise_sigma_torque {
            Some(s) => s,
            None => default_torque_noise(&robot, proto.force_max)?,
        };
        Ok(Self { robot, model, rules, tick_hz, noise_sigma_torque, noise_sigma_position: proto.noise_sigma_position })
    }
}

#[derive(Debug, Clone)]
struct Touch {
    link: usize,
    local: Vec3<f64>,
    force: Vec3<f64>,
    map: TorqueMap,
}

pub struct Session {
    shared: Arc<Shared>,
    rules: RuleSet,
    q: Vec<f64>,
    touch: Option<Touch>,
    live: LiveState<f64>,
    tracker: DwellTracker,
    rng: ChaCha8Rng,
    tick: u64,
    q_meas: Vec<f64>,
    tau: Vec<f64>,
}

impl Session {
    /// Starts at the middle of the joint ranges with no touch.
    pub fn new(shared: Arc<Shared>, seed: u64) -> Self {
        let dof = shared.robot.chain.dof();
        Self {
            rules: shared.rules.clone(),
            q: shared.robot.chain.mid_config(),
            touch: None,
            live: LiveState::new(&shared.model),
            tracker: DwellTracker::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            tick: 0,
            q_meas: vec![0.0; dof],
            tau: vec![0.0; dof],
            shared,
        }
    }

    pub fn shared(&self) -> &Shared {
        &self.shared
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    /// Time stamp of the next telemetry frame.
    pub fn t(&self) -> f64 {
        self.tick as f64 / self.shared.tick_hz
    }

    /// World position of the active touch.
    pub fn touch_world(&self) -> Result<Option<Vec3<f64>>> {
        match &self.touch {
            Some(t) => Ok(Some(self.shared.robot.chain.world_point(&self.q, t.link, &t.local)?)),
            None => Ok(None),
        }
    }

    /// Handles one line of client text. Errors are reported, never fatal.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMsg> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .filter_map(|line| {
                let result = serde_json::from_str::<ClientMsg>(line).map_err(SessionError::from).and_then(|m| self.handle(m));
                result.err().map(|e| ServerMsg::Error { message: e.to_string() })
            })
            .collect()
    }

    /// Applies a command. On error the session state is unchanged.
    pub fn handle(&mut self, msg: ClientMsg) -> Result<()> {
        match msg {
            ClientMsg::TouchApply { point_id, link, local, force } => {
                let robot = &self.shared.robot;
                let (link, local, force) = match point_id {
                    Some(id) => {
                        let p = robot.point(id)?;
                        let force = match force {
                            Some(f) => Vec3::from(f),
                            None => {
                                let poses = robot.chain.forward_kinematics(&self.q)?;
                                poses[p.link].rotation.mul_vec(&p.normal).scale(-DEFAULT_TOUCH_FORCE_N)
                            }
                        };
                        (p.link, p.local, force)
                    }
                    None => match (link, local, force) {
                        (Some(l), Some(x), Some(f)) => (l, Vec3::from(x), Vec3::from(f)),
                        _ => return Err(SessionError::IncompleteTouch),
                    },
                };
                if !(force.x.is_finite() && force.y.is_finite() && force.z.is_finite()) {
                    return Err(SessionError::BadForce);
                }
                if local.to_array().iter().any(|v| !v.is_finite()) {
                    return Err(SessionError::IncompleteTouch);
                }
                let map = ContactModel::new(&robot.chain, &self.q)?.torque_map(link, &local)?;
                self.touch = Some(Touch { link, local, force, map });
            }
            ClientMsg::TouchRelease => self.touch = None,
            ClientMsg::SetConfig { q } => {
                let q = JointConfig::new(&self.shared.robot.chain, q)?.into_inner();
                let touch = match &self.touch {
                    Some(t) => {
                        let map = ContactModel::new(&self.shared.robot.chain, &q)?.torque_map(t.link, &t.local)?;
                        Some(Touch { map, ..t.clone() })
                    }
                    None => None,
                };
                self.q = q;
                self.touch = touch;
            }
            ClientMsg::SetRules { preset } => {
                let rules = RuleSet::preset(&preset)?;
                rules.validate(&self.shared.robot.chain)?;
                self.rules = rules;
                self.tracker.reset();
            }
        }
        Ok(())
    }

    /// Advances one telemetry period: synthesizes the measured joint state,
    /// runs filtered inference and dwell dispatch.
    pub fn tick(&mut self) -> Result<Vec<ServerMsg>> {
        let shared = Arc::clone(&self.shared);
        let t = self.t();
        let tau_noise = Normal::new(0.0, shared.noise_sigma_torque).expect("finite sigma");
        let q_noise = Normal::new(0.0, shared.noise_sigma_position).expect("finite sigma");
        match &self.touch {
            Some(touch) => touch.map.apply_into(&touch.force, &mut self.tau),
            None => self.tau.iter_mut().for_each(|v| *v = 0.0),
        }
        for v in &mut self.tau {
            *v += tau_noise.sample(&mut self.rng);
        }
        for (m, q) in self.q_meas.iter_mut().zip(&self.q) {
            *m = q + q_noise.sample(&mut self.rng);
        }
        let frame = self.live.step(&shared.model, &shared.robot, t, &self.q_meas, &self.tau)?;
        let smoothed = Vec3::from(frame.smoothed);
        let rule = if frame.contact { self.rules.locate(&shared.robot.chain, &self.q_meas, &smoothed)? } else { None };
        let mut out = Vec::with_capacity(2);
        let dof = shared.model.dof;
        let stats = &shared.model.stats;
        let tau_normalized = self
            .tau
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let (lo, hi) = (stats.min[dof + j], stats.max[dof + j]);
                if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 }
            })
            .collect();
        out.push(ServerMsg::Telemetry(Telemetry {
            t,
            q: self.q_meas.clone(),
            tau: self.tau.clone(),
            tau_normalized,
            p_raw: frame.raw,
            p_smoothed: if frame.contact { frame.smoothed } else { [0.0; 3] },
            contact: frame.contact,
            region: rule.map(|r| r.region.clone()),
        }));
        if let Some(ev) = self.tracker.observe(t, rule, frame.smoothed)? {
            out.push(ServerMsg::Action { label: ev.action, region: ev.region, t: ev.t });
        }
        self.tick += 1;
        Ok(out)
    }
}
