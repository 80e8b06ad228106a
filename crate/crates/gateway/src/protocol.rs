//! Messages exchanged with the touch console, one JSON object per line.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    /// `point_id: null` applies the touch at `link`/`local`. A missing force
    /// on a registered point presses along its inward normal.
    TouchApply {
        #[serde(default)]
        point_id: Option<usize>,
        #[serde(default)]
        link: Option<usize>,
        #[serde(default)]
        local: Option<[f64; 3]>,
        #[serde(default)]
        force: Option<[f64; 3]>,
    },
    TouchRelease,
    SetConfig {
        q: Vec<f64>,
    },
    SetRules {
        preset: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub t: f64,
    pub q: Vec<f64>,
    pub tau: Vec<f64>,
    pub tau_normalized: Vec<f64>,
    pub p_raw: [f64; 3],
    pub p_smoothed: [f64; 3],
    pub contact: bool,
    pub region: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Telemetry(Telemetry),
    Action { label: String, region: String, t: f64 },
    Error { message: String },
}

impl ServerMsg {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server message serializes")
    }
}
