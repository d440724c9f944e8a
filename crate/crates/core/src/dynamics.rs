//! Air-taxi kinematics, pairwise relative dynamics, corridor geometry, and
//! the physical parameter set.
//!
//! The vehicle is a planar nonholonomic model: state `(p_x, p_y, theta, v)`,
//! control `(omega, a)`, uniform wind `(w, phi)`. The corridor is aligned
//! with the +x axis with its entry at the origin; the entry region is a box
//! in state space and the downstream region is an avoid box in position
//! space for vehicles that have not yet entered.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("control ({omega}, {accel}) outside control bounds")]
    ControlOutOfBounds { omega: f64, accel: f64 },
    #[error("bad parameter file: {0}")]
    ParamFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Physical parameters of the vehicle and corridor. Defaults follow common
/// eVTOL air-taxi specifications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// Minimum airspeed (m/s); positive because the vehicle cannot hover.
    pub v_min: f64,
    /// Maximum airspeed (m/s).
    pub v_max: f64,
    /// Nominal cruise speed (m/s).
    pub v_nom: f64,
    /// Deceleration limit (m/s^2), negative.
    pub a_min: f64,
    /// Acceleration limit (m/s^2).
    pub a_max: f64,
    /// Turn-rate limit (rad/s).
    pub omega_max: f64,
    /// Control sampling time (s).
    pub dt: f64,
    /// Corridor width d (m).
    pub corridor_width: f64,
    /// Entry heading threshold (rad).
    pub entry_heading: f64,
    /// Entry speed threshold (m/s).
    pub entry_speed: f64,
    /// Required pairwise separation distance delta (m).
    pub separation: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            v_min: 30.0,
            v_max: 90.0,
            v_nom: 70.0,
            a_min: -1.0,
            a_max: 2.0,
            omega_max: 0.1,
            dt: 0.1,
            corridor_width: 1000.0,
            entry_heading: 45.0_f64.to_radians(),
            entry_speed: 20.0,
            separation: 500.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = self.v_min > 0.0
            && self.v_min < self.v_max
            && self.v_nom >= self.v_min
            && self.v_nom <= self.v_max
            && self.a_min < 0.0
            && self.a_max > 0.0
            && self.omega_max > 0.0
            && self.dt > 0.0
            && self.corridor_width > 0.0
            && self.entry_heading > 0.0
            && self.entry_speed > 0.0
            && self.separation > 0.0;
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::ParamFile("parameter constraints violated".into()))
        }
    }

    pub fn control_in_bounds(&self, u: Control) -> bool {
        let eps = 1e-9;
        u.omega.abs() <= self.omega_max + eps && u.accel >= self.a_min - eps && u.accel <= self.a_max + eps
    }

    pub fn clamp_control(&self, u: Control) -> Control {
        Control {
            omega: u.omega.clamp(-self.omega_max, self.omega_max),
            accel: u.accel.clamp(self.a_min, self.a_max),
        }
    }

    /// Loads parameter overrides from a file: JSON object or `key = value`
    /// lines (`#` comments allowed). Unknown keys are rejected.
    pub fn load_overrides<P: AsRef<Path>>(path: P) -> Result<Self, DynamicsError> {
        let text = std::fs::read_to_string(path)?;
        let params = if text.trim_start().starts_with('{') {
            serde_json::from_str(&text).map_err(|e| DynamicsError::ParamFile(e.to_string()))?
        } else {
            Self::from_key_values(&text)?
        };
        params.validate()?;
        Ok(params)
    }

    fn from_key_values(text: &str) -> Result<Self, DynamicsError> {
        let mut p = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DynamicsError::ParamFile(format!("line {}: expected key = value", lineno + 1)))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| DynamicsError::ParamFile(format!("line {}: bad number {:?}", lineno + 1, value.trim())))?;
            match key.trim() {
                "v_min" => p.v_min = v,
                "v_max" => p.v_max = v,
                "v_nom" => p.v_nom = v,
                "a_min" => p.a_min = v,
                "a_max" => p.a_max = v,
                "omega_max" => p.omega_max = v,
                "dt" => p.dt = v,
                "corridor_width" => p.corridor_width = v,
                "entry_heading" => p.entry_heading = v,
                "entry_speed" => p.entry_speed = v,
                "separation" => p.separation = v,
                other => return Err(DynamicsError::ParamFile(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        Ok(p)
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t >= PI {
        t -= 2.0 * PI;
    }
    t
}

/// Vehicle state `(p_x, p_y, theta, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(px: f64, py: f64, theta: f64, v: f64) -> Self {
        Self { px, py, theta: wrap_angle(theta), v }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.px, self.py, self.theta, self.v]
    }
}

/// Control input `(omega, a)`: turn rate and longitudinal acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub omega: f64,
    pub accel: f64,
}

impl Control {
    pub fn new(omega: f64, accel: f64) -> Self {
        Self { omega, accel }
    }
}

/// Uniform constant wind, magnitude `speed` >= 0 toward direction `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Wind {
    pub speed: f64,
    pub phi: f64,
}

impl Default for Wind {
    fn default() -> Self {
        Self { speed: 0.0, phi: 0.0 }
    }
}

impl Wind {
    pub fn new(speed: f64, phi: f64) -> Self {
        Self { speed, phi }
    }

    pub fn calm() -> Self {
        Self::default()
    }
}

/// Relative state of vehicle j in vehicle i's heading-aligned frame:
/// `(p_x_rel, p_y_rel, theta_rel, v_i, v_j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeState {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
    pub v_i: f64,
    pub v_j: f64,
}

impl RelativeState {
    pub fn as_array(&self) -> [f64; 5] {
        [self.px, self.py, self.theta, self.v_i, self.v_j]
    }
}

/// State derivative under the air-taxi kinematics.
///
/// Errors when the control is outside the admissible set; safety filters
/// clamp before calling.
pub fn flow(x: &VehicleState, u: Control, wind: Wind, p: &VehicleParams) -> Result<[f64; 4], DynamicsError> {
    if !p.control_in_bounds(u) {
        return Err(DynamicsError::ControlOutOfBounds { omega: u.omega, accel: u.accel });
    }
    Ok(flow_unchecked(x, u, wind))
}

#[inline]
pub(crate) fn flow_unchecked(x: &VehicleState, u: Control, wind: Wind) -> [f64; 4] {
    [
        x.v * x.theta.cos() + wind.speed * wind.phi.cos(),
        x.v * x.theta.sin() + wind.speed * wind.phi.sin(),
        u.omega,
        u.accel,
    ]
}

/// One RK4 step of the vehicle dynamics; wraps heading and clamps speed to
/// `[v_min, v_max]` afterwards.
pub fn step(x: &VehicleState, u: Control, wind: Wind, p: &VehicleParams, dt: f64) -> VehicleState {
    debug_assert!(dt > 0.0);
    let eval = |s: [f64; 4]| {
        let st = VehicleState { px: s[0], py: s[1], theta: s[2], v: s[3] };
        flow_unchecked(&st, u, wind)
    };
    let s0 = x.as_array();
    let k1 = eval(s0);
    let k2 = eval(add_scaled(s0, k1, dt / 2.0));
    let k3 = eval(add_scaled(s0, k2, dt / 2.0));
    let k4 = eval(add_scaled(s0, k3, dt));
    let mut s = s0;
    for i in 0..4 {
        s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    VehicleState {
        px: s[0],
        py: s[1],
        theta: wrap_angle(s[2]),
        v: s[3].clamp(p.v_min, p.v_max),
    }
}

fn add_scaled(s: [f64; 4], k: [f64; 4], h: f64) -> [f64; 4] {
    [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2], s[3] + h * k[3]]
}

/// Relative state of `j` with respect to `i`: displacement rotated into i's
/// heading frame, wrapped relative heading, both speeds carried along.
pub fn relative_state(xi: &VehicleState, xj: &VehicleState) -> RelativeState {
    let dx = xj.px - xi.px;
    let dy = xj.py - xi.py;
    let (s, c) = xi.theta.sin_cos();
    RelativeState {
        px: c * dx + s * dy,
        py: -s * dx + c * dy,
        theta: wrap_angle(xj.theta - xi.theta),
        v_i: xi.v,
        v_j: xj.v,
    }
}

/// Derivative of the relative state. Uniform wind cancels in relative
/// coordinates and does not appear.
pub fn relative_flow(
    r: &RelativeState,
    ui: Control,
    uj: Control,
    p: &VehicleParams,
) -> Result<[f64; 5], DynamicsError> {
    for u in [ui, uj] {
        if !p.control_in_bounds(u) {
            return Err(DynamicsError::ControlOutOfBounds { omega: u.omega, accel: u.accel });
        }
    }
    Ok(relative_flow_unchecked(r, ui, uj))
}

#[inline]
pub(crate) fn relative_flow_unchecked(r: &RelativeState, ui: Control, uj: Control) -> [f64; 5] {
    let (s, c) = r.theta.sin_cos();
    [
        -r.v_i + r.v_j * c + ui.omega * r.py,
        r.v_j * s - ui.omega * r.px,
        uj.omega - ui.omega,
        ui.accel,
        uj.accel,
    ]
}

/// Signed margin of the corridor entry region: `>= 0` iff the state is inside
/// the entry box (position, heading, and speed windows all satisfied).
///
/// Computed as the min of per-coordinate margins, so it is 1-Lipschitz in
/// each coordinate.
pub fn entry_margin(x: &VehicleState, p: &VehicleParams) -> f64 {
    let half = 0.5 * p.corridor_width;
    let mx = (x.px).min(half - x.px);
    let my = half - x.py.abs();
    let mth = p.entry_heading - x.theta.abs();
    let mv = p.entry_speed - (x.v - p.v_nom).abs();
    mx.min(my).min(mth).min(mv)
}

/// Signed margin of the downstream-region constraint: `>= 0` iff the
/// position is outside the downstream box (the avoid set for vehicles that
/// have not entered). Equals minus the signed box distance to the downstream
/// region in position coordinates.
pub fn downstream_margin(x: &VehicleState, p: &VehicleParams) -> f64 {
    downstream_margin_xy(x.px, x.py, p)
}

pub fn downstream_margin_xy(px: f64, py: f64, p: &VehicleParams) -> f64 {
    let half = 0.5 * p.corridor_width;
    // signed distance to the box {px >= half, |py| <= half}: negative inside
    let dx = half - px; // > 0 when west of the box face
    let dy = py.abs() - half; // > 0 when outside laterally
    if dx <= 0.0 && dy <= 0.0 {
        // inside the downstream region
        -(-dx).min(-dy)
    } else {
        // outside: Euclidean distance to the box
        let ox = dx.max(0.0);
        let oy = dy.max(0.0);
        (ox * ox + oy * oy).sqrt()
    }
}

/// Planar Euclidean distance between two vehicles.
pub fn pair_distance(xi: &VehicleState, xj: &VehicleState) -> f64 {
    ((xi.px - xj.px).powi(2) + (xi.py - xj.py).powi(2)).sqrt()
}
