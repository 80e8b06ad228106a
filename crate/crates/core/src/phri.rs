//! Touch-triggered interaction: body regions attached to links, and a dwell
//! tracker that turns a stream of region observations into action events.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::kinematics::{KinematicChain, KinematicsError};
use crate::scalar::Real;

pub const DEFAULT_DWELL_S: f64 = 0.3;
pub const DEFAULT_GAP_TOLERANCE_S: f64 = 0.1;

pub const SPOTLIKE_RULES: &str = include_str!("../presets/spotlike.rules.json");
pub const FRANKALIKE_RULES: &str = include_str!("../presets/frankalike.rules.json");

pub const SPOTLIKE_ACTIONS: [&str; 10] = [
    "turn_on_forehand",
    "turn_on_haunches",
    "shift_forehand",
    "shift_haunches",
    "sidepass",
    "leg_lift",
    "lie_down",
    "sit",
    "wiggle",
    "play_bow",
];
pub const FRANKALIKE_ACTIONS: [&str; 3] = ["pick_green", "pick_red", "pick_yellow"];

#[derive(Debug, Error)]
pub enum PhriError {
    #[error("unknown rule preset {0:?}")]
    UnknownPreset(String),
    #[error("rule file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("region {region:?}: {reason}")]
    InvalidRule { region: String, reason: String },
    #[error("timestamp {t} precedes previous timestamp {last}")]
    NonMonotone { t: f64, last: f64 },
    #[error("dwell and gap tolerance must be finite and non-negative")]
    Timing,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

pub type Result<T, E = PhriError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Motion,
    Posture,
    Expression,
    Button,
}

/// A sphere fixed to a link; `center` is in the link frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRule {
    pub region: String,
    pub link: usize,
    pub center: [f64; 3],
    pub radius: f64,
    pub action: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleSet {
    pub rules: Vec<RegionRule>,
}

impl RuleSet {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(Self { rules: serde_json::from_str(text)? })
    }

    pub fn to_json(&self) -> String {
        let lines: Vec<String> = self.rules.iter().map(|r| format!(" {}", serde_json::to_string(r).expect("rule serializes"))).collect();
        format!("[\n{}\n]\n", lines.join(",\n"))
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "spotlike" => Self::from_json(SPOTLIKE_RULES),
            "frankalike" => Self::from_json(FRANKALIKE_RULES),
            other => Err(PhriError::UnknownPreset(other.to_string())),
        }
    }

    pub fn get(&self, region: &str) -> Option<&RegionRule> {
        self.rules.iter().find(|r| r.region == region)
    }

    /// Links exist, radii are positive, region ids and action labels are unique.
    pub fn validate<T: Real>(&self, chain: &KinematicChain<T>) -> Result<()> {
        let mut regions = HashSet::new();
        let mut actions = HashSet::new();
        for r in &self.rules {
            let bad = |reason: &str| Err(PhriError::InvalidRule { region: r.region.clone(), reason: reason.into() });
            if r.link >= chain.links().len() {
                return bad("unknown link");
            }
            if !(r.radius > 0.0 && r.radius.is_finite()) || r.center.iter().any(|c| !c.is_finite()) {
                return bad("radius must be positive and the center finite");
            }
            if !regions.insert(r.region.as_str()) {
                return bad("duplicate region id");
            }
            if !actions.insert(r.action.as_str()) {
                return bad("action label used by more than one region");
            }
        }
        Ok(())
    }

    /// The region whose sphere contains `p` (boundary inclusive). Overlaps go
    /// to the nearest center, then to the lowest region id.
    pub fn locate<T: Real>(&self, chain: &KinematicChain<T>, q: &[T], p: &Vec3<T>) -> Result<Option<&RegionRule>> {
        let poses = chain.forward_kinematics(q)?;
        let mut best: Option<(&RegionRule, T)> = None;
        for r in &self.rules {
            let pose = poses.get(r.link).ok_or(KinematicsError::UnknownLink(r.link))?;
            let d = pose.apply(&Vec3::from_f64(r.center)).distance(p);
            if d > T::lit(r.radius) {
                continue;
            }
            let closer = match best {
                None => true,
                Some((b, bd)) => match d.partial_cmp(&bd) {
                    Some(Ordering::Less) => true,
                    Some(Ordering::Equal) => r.region < b.region,
                    _ => false,
                },
            };
            if closer {
                best = Some((r, d));
            }
        }
        Ok(best.map(|(r, _)| r))
    }
}

pub fn locate_region<'r, T: Real>(rules: &'r RuleSet, chain: &KinematicChain<T>, q: &[T], p: &Vec3<T>) -> Result<Option<&'r RegionRule>> {
    rules.locate(chain, q, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub action: String,
    pub region: String,
    pub t: f64,
    pub estimate: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct Episode {
    region: String,
    start: f64,
    last_seen: f64,
    fired: bool,
}

/// Fires once per continuous stay in a region lasting at least `dwell`.
/// Gaps without a region shorter than `gap_tolerance` do not break a stay.
#[derive(Debug, Clone, PartialEq)]
pub struct DwellTracker {
    pub dwell: f64,
    pub gap_tolerance: f64,
    episode: Option<Episode>,
    last_t: Option<f64>,
}

impl Default for DwellTracker {
    fn default() -> Self {
        Self::new(DEFAULT_DWELL_S, DEFAULT_GAP_TOLERANCE_S).expect("default timing")
    }
}

impl DwellTracker {
    pub fn new(dwell: f64, gap_tolerance: f64) -> Result<Self> {
        if !(dwell >= 0.0 && dwell.is_finite() && gap_tolerance >= 0.0 && gap_tolerance.is_finite()) {
            return Err(PhriError::Timing);
        }
        Ok(Self { dwell, gap_tolerance, episode: None, last_t: None })
    }

    /// Region of the ongoing stay, if any.
    pub fn current(&self) -> Option<&str> {
        self.episode.as_ref().map(|e| e.region.as_str())
    }

    pub fn reset(&mut self) {
        self.episode = None;
    }

    pub fn observe(&mut self, t: f64, rule: Option<&RegionRule>, estimate: [f64; 3]) -> Result<Option<ActionEvent>> {
        if let Some(last) = self.last_t {
            if !(t >= last) {
                return Err(PhriError::NonMonotone { t, last });
            }
        }
        self.last_t = Some(t);
        let Some(rule) = rule else {
            if self.episode.as_ref().is_some_and(|e| t - e.last_seen > self.gap_tolerance) {
                self.episode = None;
            }
            return Ok(None);
        };
        let continuing = self
            .episode
            .as_ref()
            .is_some_and(|e| e.region == rule.region && t - e.last_seen <= self.gap_tolerance);
        if !continuing {
            self.episode = Some(Episode { region: rule.region.clone(), start: t, last_seen: t, fired: false });
        }
        let e = self.episode.as_mut().expect("episode set above");
        e.last_seen = t;
        if !e.fired && t - e.start >= self.dwell {
            e.fired = true;
            return Ok(Some(ActionEvent { action: rule.action.clone(), region: rule.region.clone(), t, estimate }));
        }
        Ok(None)
    }
}

/// Runs a timestamped sequence of region observations through a fresh tracker.
pub fn dispatch<'r>(
    rules: &'r RuleSet,
    observations: impl IntoIterator<Item = (f64, Option<&'r str>)>,
    dwell: f64,
    gap_tolerance: f64,
) -> Result<Vec<ActionEvent>> {
    let mut tracker = DwellTracker::new(dwell, gap_tolerance)?;
    let mut events = Vec::new();
    for (t, region) in observations {
        let rule = match region {
            Some(id) => Some(rules.get(id).ok_or_else(|| PhriError::InvalidRule { region: id.into(), reason: "not in rule set".into() })?),
            None => None,
        };
        events.extend(tracker.observe(t, rule, [0.0; 3])?);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Robot;

    fn timeline(segments: &[(Option<&'static str>, f64)], hz: f64) -> Vec<(f64, Option<&'static str>)> {
        let mut out = Vec::new();
        let mut t = 0.0;
        let dt = 1.0 / hz;
        for &(region, dur) in segments {
            let n = (dur * hz).round() as usize;
            for _ in 0..n {
                out.push((t, region));
                t += dt;
            }
        }
        out
    }

    #[test]
    fn dwell_examples() {
        let rules = RuleSet::preset("spotlike").unwrap();
        let held = timeline(&[(Some("top_rear"), 0.4)], 60.0);
        let ev = dispatch(&rules, held, 0.3, 0.1).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].action, "sit");
        // 60 Hz frames: the first at t = 0, the event at the first frame with t >= 0.3.
        assert!((ev[0].t - 18.0 / 60.0).abs() < 1e-9);

        let short = timeline(&[(Some("top_rear"), 0.2), (None, 0.5)], 60.0);
        assert!(dispatch(&rules, short, 0.3, 0.1).unwrap().is_empty());

        let flicker = timeline(&[(Some("top_rear"), 0.2), (Some("top_middle"), 0.2), (Some("top_rear"), 0.2)], 60.0);
        assert!(dispatch(&rules, flicker, 0.3, 0.1).unwrap().is_empty());
    }

    #[test]
    fn gaps_within_tolerance_do_not_break_a_stay() {
        let rules = RuleSet::preset("spotlike").unwrap();
        let bridged = timeline(&[(Some("arm"), 0.2), (None, 0.05), (Some("arm"), 0.2)], 100.0);
        assert_eq!(dispatch(&rules, bridged, 0.3, 0.1).unwrap().len(), 1);
        let broken = timeline(&[(Some("arm"), 0.2), (None, 0.2), (Some("arm"), 0.2)], 100.0);
        assert!(dispatch(&rules, broken, 0.3, 0.1).unwrap().is_empty());
    }

    #[test]
    fn no_retrigger_until_exit() {
        let rules = RuleSet::preset("frankalike").unwrap();
        let long = timeline(&[(Some("red_sticker"), 3.0)], 60.0);
        assert_eq!(dispatch(&rules, long, 0.3, 0.1).unwrap().len(), 1);
        let twice = timeline(&[(Some("red_sticker"), 0.5), (None, 0.5), (Some("red_sticker"), 0.5)], 60.0);
        let ev = dispatch(&rules, twice, 0.3, 0.1).unwrap();
        assert_eq!(ev.iter().map(|e| e.action.as_str()).collect::<Vec<_>>(), ["pick_red", "pick_red"]);
    }

    #[test]
    fn time_must_not_run_backwards() {
        let mut tr = DwellTracker::default();
        tr.observe(1.0, None, [0.0; 3]).unwrap();
        assert!(matches!(tr.observe(0.5, None, [0.0; 3]), Err(PhriError::NonMonotone { .. })));
        assert!(matches!(DwellTracker::new(-1.0, 0.1), Err(PhriError::Timing)));
    }

    #[test]
    fn presets_carry_the_action_vocabularies() {
        for (name, vocab) in [("spotlike", &SPOTLIKE_ACTIONS[..]), ("frankalike", &FRANKALIKE_ACTIONS[..])] {
            let rules = RuleSet::preset(name).unwrap();
            let robot = Robot::preset(name).unwrap();
            rules.validate(&robot.chain).unwrap();
            let mut got: Vec<&str> = rules.rules.iter().map(|r| r.action.as_str()).collect();
            let mut want = vocab.to_vec();
            got.sort();
            want.sort();
            assert_eq!(got, want);
        }
        assert!(RuleSet::preset("atlas").is_err());
        let spot = RuleSet::preset("spotlike").unwrap();
        assert_eq!(RuleSet::from_json(&spot.to_json()).unwrap(), spot);
    }

    #[test]
    fn locate_examples() {
        let robot = Robot::preset("spotlike").unwrap();
        let rules = RuleSet::preset("spotlike").unwrap();
        let q = robot.chain.mid_config();
        let poses = robot.chain.forward_kinematics(&q).unwrap();
        for r in &rules.rules {
            let c = poses[r.link].apply(&Vec3::from(r.center));
            assert_eq!(rules.locate(&robot.chain, &q, &c).unwrap().unwrap().region, r.region);
        }
        assert!(rules.locate(&robot.chain, &q, &Vec3::new(10.0, 0.0, 0.0)).unwrap().is_none());

        // Sit sits on the rear of the top face, play bow near the gripper.
        let sit = rules.rules.iter().find(|r| r.action == "sit").unwrap();
        assert!(sit.link == 0 && sit.center[0] < -0.3 && sit.center[2] > 0.05);
        assert_eq!(rules.rules.iter().find(|r| r.action == "play_bow").unwrap().link, robot.chain.links().len() - 1);
    }

    #[test]
    fn equidistant_overlap_goes_to_lower_region_id() {
        let robot = Robot::preset("frankalike").unwrap();
        let mk = |id: &str, x: f64| RegionRule {
            region: id.into(),
            link: 0,
            center: [x, 0.0, 0.0],
            radius: 0.5,
            action: id.into(),
            category: Category::Button,
        };
        let rules = RuleSet { rules: vec![mk("b", 0.2), mk("a", -0.2)] };
        let q = robot.chain.mid_config();
        assert_eq!(rules.locate(&robot.chain, &q, &Vec3::zeros()).unwrap().unwrap().region, "a");
        let boundary = Vec3::new(0.7, 0.0, 0.0);
        assert_eq!(rules.locate(&robot.chain, &q, &boundary).unwrap().unwrap().region, "b");
        let dup = RuleSet { rules: vec![mk("a", 0.0), mk("a", 1.0)] };
        assert!(matches!(dup.validate(&robot.chain), Err(PhriError::InvalidRule { .. })));
    }
}
