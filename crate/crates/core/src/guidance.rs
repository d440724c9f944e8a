//! Strategic guidance layer.
//!
//! Priority is assigned from initial time-to-reach values (smallest TTR =
//! highest priority, first-come-first-served), targets are spaced by a fixed
//! temporal separation behind the leader's live TTR, and each vehicle tracks
//! its target with a bang-bang law on the TTR gradient. A short-horizon
//! rollout guard keeps TTR-raising vehicles from wandering into the
//! downstream region or out of the reachable tube.

use crate::dynamics::{downstream_margin, step, Control, VehicleParams, VehicleState, Wind};
use crate::grid::GridError;
use crate::reachability::TtrField;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("vehicle {id} starts outside the reachable tube (infinite time-to-reach)")]
    InfeasibleStart { id: usize },
    #[error("state has infinite time-to-reach; the downstream guard should prevent this")]
    InfiniteTtr,
    #[error("time-to-reach field must be 4-dimensional, got {0}")]
    WrongGrid(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Active vehicles in priority order (ascending initial TTR, ties by id).
/// Vehicles are removed when they enter the corridor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorityOrder {
    order: Vec<usize>,
}

impl PriorityOrder {
    /// Sorts vehicle ids `0..ttrs.len()` by initial TTR, ties by id. Any
    /// non-finite TTR rejects the scenario as infeasible.
    pub fn assign(initial_ttrs: &[f64]) -> Result<Self, GuidanceError> {
        for (id, t) in initial_ttrs.iter().enumerate() {
            if !t.is_finite() {
                return Err(GuidanceError::InfeasibleStart { id });
            }
        }
        let mut order: Vec<usize> = (0..initial_ttrs.len()).collect();
        order.sort_by(|&a, &b| {
            initial_ttrs[a]
                .partial_cmp(&initial_ttrs[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        Ok(Self { order })
    }

    pub fn remove(&mut self, id: usize) {
        self.order.retain(|&v| v != id);
    }

    pub fn leader(&self) -> Option<usize> {
        self.order.first().copied()
    }

    /// 1-based rank of an active vehicle.
    pub fn rank(&self, id: usize) -> Option<usize> {
        self.order.iter().position(|&v| v == id).map(|p| p + 1)
    }

    pub fn ids(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// True when `a` outranks `b` (appears earlier in the order).
    pub fn outranks(&self, a: usize, b: usize) -> bool {
        match (self.rank(a), self.rank(b)) {
            (Some(ra), Some(rb)) => ra < rb,
            _ => false,
        }
    }
}

/// Target TTR for a vehicle at 1-based priority `rank` behind a leader whose
/// current TTR is `leader_ttr`.
pub fn target_ttr(rank: usize, leader_ttr: f64, delta_t: f64) -> f64 {
    debug_assert!(rank >= 1);
    leader_ttr + (rank - 1) as f64 * delta_t
}

/// Smallest temporal separation that still yields the required spatial
/// separation at nominal cruise speed.
pub fn min_separation_time(params: &VehicleParams) -> f64 {
    params.separation / params.v_nom
}

/// Which side of its target TTR a vehicle is currently tracking from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeparationBranch {
    /// TTR at or below target: maximize TTR to fall back in the sequence.
    RaiseTtr,
    /// TTR above target: fly time-optimally toward the corridor.
    LowerTtr,
}

/// Whether the downstream guard replaced a candidate control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardAction {
    Passed,
    Replaced,
}

/// Time-to-reach field with precomputed node gradients, plus the control
/// laws driven by it.
#[derive(Debug, Clone)]
pub struct TtrGuidance {
    params: VehicleParams,
    wind: Wind,
    ttr: TtrField,
    grad: Vec<TtrField>,
}

impl TtrGuidance {
    pub fn new(params: VehicleParams, wind: Wind, ttr: TtrField) -> Result<Self, GuidanceError> {
        if ttr.spec().dim() != 4 {
            return Err(GuidanceError::WrongGrid(ttr.spec().dim()));
        }
        let grad = ttr.node_gradient();
        Ok(Self { params, wind, ttr, grad })
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn wind(&self) -> Wind {
        self.wind
    }

    pub fn field(&self) -> &TtrField {
        &self.ttr
    }

    /// Interpolated TTR at a state; `+inf` outside the reachable tube.
    pub fn ttr_at(&self, x: &VehicleState) -> f64 {
        self.ttr
            .interpolate(&x.as_array(), None)
            .expect("4-d state matches 4-d field")
    }

    /// Interpolated TTR gradient at a state.
    pub fn gradient_at(&self, x: &VehicleState) -> [f64; 4] {
        let q = x.as_array();
        let mut g = [0.0f64; 4];
        for (k, comp) in self.grad.iter().enumerate() {
            let v = comp.interpolate(&q, None).expect("dims match");
            g[k] = if v.is_finite() { v } else { 0.0 };
        }
        g
    }

    /// Time-optimal control: minimizes `grad(T) . f(x, u)` over the control
    /// box. The flow is affine in the control with independent bounds, so the
    /// optimum is bang-bang in the heading and speed partials; zero partials
    /// tie-break to straight flight and acceleration toward nominal speed.
    pub fn optimal_control(&self, x: &VehicleState) -> Result<Control, GuidanceError> {
        if !self.ttr_at(x).is_finite() {
            return Err(GuidanceError::InfiniteTtr);
        }
        let g = self.gradient_at(x);
        Ok(self.bang_bang(x, g[2], g[3], false))
    }

    /// TTR-separation control: at or below the target TTR, maximize
    /// `grad(T) . f` to fall back; above it, fly time-optimally.
    ///
    /// `prev` enables a deadband around the switching surface: the previous
    /// branch is held until the TTR error exceeds `deadband`. Stateless calls
    /// (`prev = None`) switch exactly at the target.
    pub fn separation_control(
        &self,
        x: &VehicleState,
        target: f64,
        deadband: f64,
        prev: Option<SeparationBranch>,
    ) -> Result<(Control, SeparationBranch), GuidanceError> {
        let t = self.ttr_at(x);
        if !t.is_finite() {
            return Err(GuidanceError::InfiniteTtr);
        }
        let threshold = match prev {
            None => target,
            Some(SeparationBranch::RaiseTtr) => target + deadband,
            Some(SeparationBranch::LowerTtr) => target - deadband,
        };
        let branch = if t <= threshold { SeparationBranch::RaiseTtr } else { SeparationBranch::LowerTtr };
        let g = self.gradient_at(x);
        let u = self.bang_bang(x, g[2], g[3], branch == SeparationBranch::RaiseTtr);
        Ok((u, branch))
    }

    fn bang_bang(&self, x: &VehicleState, d_theta: f64, d_v: f64, maximize: bool) -> Control {
        let p = &self.params;
        let sign = if maximize { 1.0 } else { -1.0 };
        let omega = if d_theta == 0.0 { 0.0 } else { sign * p.omega_max * d_theta.signum() };
        let accel = if d_v == 0.0 {
            // steer speed toward nominal
            if x.v < p.v_nom {
                p.a_max.min((p.v_nom - x.v) / p.dt)
            } else if x.v > p.v_nom {
                p.a_min.max((p.v_nom - x.v) / p.dt)
            } else {
                0.0
            }
        } else if (d_v > 0.0) ^ maximize {
            p.a_min
        } else {
            p.a_max
        };
        Control::new(omega, accel)
    }

    /// Rolls the candidate control forward under frozen control; if any
    /// rolled state enters the downstream region or leaves the finite-TTR
    /// tube, the candidate is replaced by the time-optimal control.
    pub fn downstream_guard(
        &self,
        x: &VehicleState,
        candidate: Control,
        horizon_steps: usize,
    ) -> Result<(Control, GuardAction), GuidanceError> {
        let mut s = *x;
        for _ in 0..horizon_steps {
            s = step(&s, candidate, self.wind, &self.params, self.params.dt);
            if downstream_margin(&s, &self.params) < 0.0 || !self.ttr_at(&s).is_finite() {
                return Ok((self.optimal_control(x)?, GuardAction::Replaced));
            }
        }
        Ok((candidate, GuardAction::Passed))
    }
}
