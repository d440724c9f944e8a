//! Tactical safety layer: CBF constraint assembly from the pairwise safety
//! value function and the filter architectures around it.
//!
//! Every filter minimally modifies reference controls subject to barrier
//! rows `grad V . f_rel + gamma * V >= 0` built against the most critical
//! neighbor (the pair minimizing the safety value):
//!
//! * `Dec`  — per-vehicle pairwise QP with the neighbor's control fixed to a
//!   locally computable estimate; relaxed (slack) fallback when infeasible.
//! * `Prio` — sequential resolution in priority order with a three-stage
//!   protocol: priority-assigned QP, symmetric joint QP, relaxed joint QP.
//!   Resolved controls propagate into later vehicles' constraints.
//! * `Cent` — one joint QP over all active vehicles with per-pair slack.

pub mod qp;

use crate::dynamics::{pair_distance, relative_state, Control, RelativeState, VehicleParams, VehicleState};
use crate::grid::{GridError, GridField};
use crate::guidance::PriorityOrder;
use qp::{solve_qp, QpProblem, QpStatus};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("pairwise value function must be 5-dimensional, got {0}")]
    WrongGrid(usize),
    #[error(transparent)]
    Qp(#[from] qp::QpError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Safety filter architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    None,
    Dec,
    Prio,
    Cent,
}

impl FilterMode {
    pub const ALL: [FilterMode; 4] = [FilterMode::None, FilterMode::Dec, FilterMode::Prio, FilterMode::Cent];

    pub fn name(&self) -> &'static str {
        match self {
            FilterMode::None => "none",
            FilterMode::Dec => "dec",
            FilterMode::Prio => "prio",
            FilterMode::Cent => "cent",
        }
    }
}

impl std::str::FromStr for FilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(FilterMode::None),
            "dec" => Ok(FilterMode::Dec),
            "prio" => Ok(FilterMode::Prio),
            "cent" => Ok(FilterMode::Cent),
            other => Err(format!("unknown filter mode {other:?} (expected none|dec|prio|cent)")),
        }
    }
}

/// How a Dec-mode vehicle models its neighbor's control inside the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborControlModel {
    /// Time-optimal control recomputed from the neighbor's shared state.
    TtrOptimal,
    /// Worst case: the neighbor control minimizing the row over its box.
    WorstCase,
}

/// Filter tuning parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// Linear class-kappa slope (1/s) in the barrier condition.
    pub gamma: f64,
    /// Linear slack penalty; large enough for the exact-penalty property.
    pub lambda: f64,
    /// Quadratic slack penalty.
    pub epsilon: f64,
    /// Neighbor visibility radius (m); infinite keeps every pair active.
    pub comm_range: f64,
    /// Row-assembly cutoff distance (m). `None` derives
    /// `separation + 2 v_max / gamma` from the vehicle parameters.
    pub prune_distance: Option<f64>,
    pub neighbor_control: NeighborControlModel,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lambda: 1e3,
            epsilon: 1.0,
            comm_range: f64::INFINITY,
            prune_distance: None,
            neighbor_control: NeighborControlModel::TtrOptimal,
        }
    }
}

impl FilterParams {
    pub fn prune_distance(&self, vehicle: &VehicleParams) -> f64 {
        self.prune_distance
            .unwrap_or(vehicle.separation + 2.0 * vehicle.v_max / self.gamma)
    }
}

/// Which solve produced a vehicle's control this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    Passthrough,
    Stage1,
    Stage2,
    Stage3,
    DecMain,
    DecRelaxed,
    Cent,
}

impl FilterStage {
    pub fn name(&self) -> &'static str {
        match self {
            FilterStage::Passthrough => "passthrough",
            FilterStage::Stage1 => "stage1",
            FilterStage::Stage2 => "stage2",
            FilterStage::Stage3 => "stage3",
            FilterStage::DecMain => "dec_main",
            FilterStage::DecRelaxed => "dec_relaxed",
            FilterStage::Cent => "cent",
        }
    }
}

impl std::str::FromStr for FilterStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "passthrough" => Ok(FilterStage::Passthrough),
            "stage1" => Ok(FilterStage::Stage1),
            "stage2" => Ok(FilterStage::Stage2),
            "stage3" => Ok(FilterStage::Stage3),
            "dec_main" => Ok(FilterStage::DecMain),
            "dec_relaxed" => Ok(FilterStage::DecRelaxed),
            "cent" => Ok(FilterStage::Cent),
            other => Err(format!("unknown filter stage {other:?}")),
        }
    }
}

/// One active vehicle as the filters see it.
#[derive(Debug, Clone, Copy)]
pub struct FilterVehicle {
    pub id: usize,
    pub state: VehicleState,
    pub reference: Control,
}

/// Per-vehicle filter result.
#[derive(Debug, Clone, Copy)]
pub struct VehicleOutcome {
    pub control: Control,
    pub stage: FilterStage,
    pub slack: f64,
    /// Wall-clock spent inside QP solves (summed over stages).
    pub qp_time_ns: u64,
    /// Wall-clock including neighbor search and row assembly.
    pub total_time_ns: u64,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Indexed like the `vehicles` slice passed to the filter.
    pub per_vehicle: Vec<VehicleOutcome>,
}

/// Barrier row for a vehicle pair, split by control affinity:
/// `coeff_i . u_i + coeff_j . u_j + bias >= 0`.
#[derive(Debug, Clone, Copy)]
pub struct CbfRow {
    pub coeff_i: [f64; 2],
    pub coeff_j: [f64; 2],
    pub bias: f64,
}

impl CbfRow {
    pub fn value(&self, ui: Control, uj: Control) -> f64 {
        self.coeff_i[0] * ui.omega
            + self.coeff_i[1] * ui.accel
            + self.coeff_j[0] * uj.omega
            + self.coeff_j[1] * uj.accel
            + self.bias
    }
}

/// Pairwise safety value function with precomputed gradients plus the filter
/// implementations.
#[derive(Debug, Clone)]
pub struct SafetyFilter {
    vehicle: VehicleParams,
    params: FilterParams,
    value: GridField,
    grad: Vec<GridField>,
}

impl SafetyFilter {
    pub fn new(vehicle: VehicleParams, params: FilterParams, value: GridField) -> Result<Self, FilterError> {
        if value.spec().dim() != 5 {
            return Err(FilterError::WrongGrid(value.spec().dim()));
        }
        let grad = value.node_gradient();
        Ok(Self { vehicle, params, value, grad })
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn vehicle_params(&self) -> &VehicleParams {
        &self.vehicle
    }

    pub fn value_field(&self) -> &GridField {
        &self.value
    }

    /// Interpolated safety value at a relative state.
    pub fn value_at(&self, r: &RelativeState) -> f64 {
        self.value.interpolate(&r.as_array(), None).expect("5-d state")
    }

    fn gradient_at(&self, r: &RelativeState) -> [f64; 5] {
        let q = r.as_array();
        let mut g = [0.0f64; 5];
        for (k, comp) in self.grad.iter().enumerate() {
            g[k] = comp.interpolate(&q, None).expect("dims match");
        }
        g
    }

    /// Assembles the barrier row for relative state `r` (vehicle j expressed
    /// in vehicle i's frame).
    pub fn cbf_row(&self, r: &RelativeState) -> CbfRow {
        let g = self.gradient_at(r);
        let v = self.value_at(r);
        let (sin_th, cos_th) = r.theta.sin_cos();
        CbfRow {
            coeff_i: [g[0] * r.py - g[1] * r.px - g[2], g[3]],
            coeff_j: [g[2], g[4]],
            bias: g[0] * (-r.v_i + r.v_j * cos_th) + g[1] * (r.v_j * sin_th) + self.params.gamma * v,
        }
    }

    /// Index (into `vehicles`) of the neighbor minimizing the safety value,
    /// among active vehicles within communication range; ties break toward
    /// the smaller vehicle id.
    pub fn most_critical_neighbor(&self, i: usize, vehicles: &[FilterVehicle]) -> Option<usize> {
        let mut best: Option<(f64, usize, usize)> = None; // (value, id, index)
        for (j, vj) in vehicles.iter().enumerate() {
            if j == i {
                continue;
            }
            if pair_distance(&vehicles[i].state, &vj.state) > self.params.comm_range {
                continue;
            }
            let v = self.value_at(&relative_state(&vehicles[i].state, &vj.state));
            let key = (v, vj.id);
            if best.map_or(true, |(bv, bid, _)| key < (bv, bid)) {
                best = Some((v, vj.id, j));
            }
        }
        best.map(|(_, _, j)| j)
    }

    fn passthrough(&self, reference: Control) -> VehicleOutcome {
        VehicleOutcome {
            control: self.vehicle.clamp_control(reference),
            stage: FilterStage::Passthrough,
            slack: 0.0,
            qp_time_ns: 0,
            total_time_ns: 0,
        }
    }

    /// Dispatch by mode. `estimates` are per-vehicle locally computable
    /// control estimates (the Dec row fixes the neighbor's control to its
    /// entry); `order` is required for `Prio`.
    pub fn apply(
        &self,
        mode: FilterMode,
        vehicles: &[FilterVehicle],
        estimates: &[Control],
        order: &PriorityOrder,
    ) -> Result<FilterOutcome, FilterError> {
        match mode {
            FilterMode::None => Ok(FilterOutcome {
                per_vehicle: vehicles.iter().map(|v| self.passthrough(v.reference)).collect(),
            }),
            FilterMode::Dec => self.filter_dec(vehicles, estimates),
            FilterMode::Prio => self.filter_prio(vehicles, order),
            FilterMode::Cent => self.filter_cent(vehicles),
        }
    }

    /// Decentralized: each vehicle solves a pairwise QP against its most
    /// critical neighbor with the neighbor's control fixed; relaxed fallback
    /// when the hard QP is infeasible.
    pub fn filter_dec(&self, vehicles: &[FilterVehicle], estimates: &[Control]) -> Result<FilterOutcome, FilterError> {
        debug_assert_eq!(vehicles.len(), estimates.len());
        let prune = self.params.prune_distance(&self.vehicle);
        let mut out = Vec::with_capacity(vehicles.len());
        for (i, v) in vehicles.iter().enumerate() {
            let started = Instant::now();
            let Some(j) = self.most_critical_neighbor(i, vehicles) else {
                out.push(self.passthrough(v.reference));
                continue;
            };
            if pair_distance(&v.state, &vehicles[j].state) > prune {
                out.push(self.passthrough(v.reference));
                continue;
            }
            let row = self.cbf_row(&relative_state(&v.state, &vehicles[j].state));
            let uj = match self.params.neighbor_control {
                NeighborControlModel::TtrOptimal => estimates[j],
                NeighborControlModel::WorstCase => self.worst_case_neighbor(&row),
            };
            let fixed = row.coeff_j[0] * uj.omega + row.coeff_j[1] * uj.accel + row.bias;

            let mut qp_time = 0u64;
            // hard pairwise QP over u_i
            let mut p = QpProblem::new();
            self.add_control(&mut p, v.reference);
            p.add_row(vec![row.coeff_i[0], row.coeff_i[1]], fixed);
            let t0 = Instant::now();
            let sol = solve_qp(&p)?;
            qp_time += t0.elapsed().as_nanos() as u64;
            let outcome = if sol.status == QpStatus::Optimal {
                VehicleOutcome {
                    control: self.vehicle.clamp_control(Control::new(sol.x[0], sol.x[1])),
                    stage: FilterStage::DecMain,
                    slack: 0.0,
                    qp_time_ns: qp_time,
                    total_time_ns: started.elapsed().as_nanos() as u64,
                }
            } else {
                // relaxed fallback, always feasible
                let mut p = QpProblem::new();
                self.add_control(&mut p, v.reference);
                let xi = p.add_slack_var(self.params.lambda, self.params.epsilon);
                let mut coeffs = vec![row.coeff_i[0], row.coeff_i[1], 0.0];
                coeffs[xi] = 1.0;
                p.add_row(coeffs, fixed);
                let t0 = Instant::now();
                let sol = solve_qp(&p)?;
                qp_time += t0.elapsed().as_nanos() as u64;
                debug_assert_eq!(sol.status, QpStatus::Optimal);
                VehicleOutcome {
                    control: self.vehicle.clamp_control(Control::new(sol.x[0], sol.x[1])),
                    stage: FilterStage::DecRelaxed,
                    slack: sol.x[xi],
                    qp_time_ns: qp_time,
                    total_time_ns: started.elapsed().as_nanos() as u64,
                }
            };
            out.push(outcome);
        }
        Ok(FilterOutcome { per_vehicle: out })
    }

    /// Priority-coordinated multi-stage filter. Vehicles resolve in priority
    /// order; resolved controls replace references in later constraints.
    pub fn filter_prio(&self, vehicles: &[FilterVehicle], order: &PriorityOrder) -> Result<FilterOutcome, FilterError> {
        let prune = self.params.prune_distance(&self.vehicle);
        let n = vehicles.len();
        let index_of = |id: usize| vehicles.iter().position(|v| v.id == id);
        let mut resolved: Vec<Option<Control>> = vec![None; n];
        let mut outcomes: Vec<Option<VehicleOutcome>> = vec![None; n];

        for &id in order.ids() {
            let Some(i) = index_of(id) else { continue };
            let started = Instant::now();
            let vi = &vehicles[i];
            let Some(j) = self.most_critical_neighbor(i, vehicles) else {
                let mut o = self.passthrough(vi.reference);
                o.stage = FilterStage::Passthrough;
                resolved[i] = Some(o.control);
                outcomes[i] = Some(o);
                continue;
            };
            if pair_distance(&vi.state, &vehicles[j].state) > prune {
                let o = self.passthrough(vi.reference);
                resolved[i] = Some(o.control);
                outcomes[i] = Some(o);
                continue;
            }
            let row = self.cbf_row(&relative_state(&vi.state, &vehicles[j].state));
            let uj_fixed = resolved[j].unwrap_or(vehicles[j].reference);
            let fixed_term = row.coeff_j[0] * uj_fixed.omega + row.coeff_j[1] * uj_fixed.accel + row.bias;
            let i_has_priority = order.outranks(vi.id, vehicles[j].id);
            let j_resolved = resolved[j].is_some();
            let mut qp_time = 0u64;

            // Stage 1: priority-assigned
            let mut control: Option<(Control, FilterStage, f64)> = None;
            if i_has_priority {
                let val = row.coeff_i[0] * vi.reference.omega + row.coeff_i[1] * vi.reference.accel + fixed_term;
                if val >= -qp::KKT_TOL {
                    control = Some((vi.reference, FilterStage::Stage1, 0.0));
                }
            } else {
                let mut p = QpProblem::new();
                self.add_control(&mut p, vi.reference);
                p.add_row(vec![row.coeff_i[0], row.coeff_i[1]], fixed_term);
                let t0 = Instant::now();
                let sol = solve_qp(&p)?;
                qp_time += t0.elapsed().as_nanos() as u64;
                if sol.status == QpStatus::Optimal {
                    control = Some((Control::new(sol.x[0], sol.x[1]), FilterStage::Stage1, 0.0));
                }
            }

            // Stage 2: symmetric joint hard QP (coordinates already resolved
            // stay fixed; with j resolved this degenerates to the stage-1
            // problem for the non-priority branch and is skipped there)
            if control.is_none() && !(j_resolved && !i_has_priority) {
                let mut p = QpProblem::new();
                self.add_control(&mut p, vi.reference);
                if j_resolved {
                    p.add_row(vec![row.coeff_i[0], row.coeff_i[1]], fixed_term);
                } else {
                    self.add_control(&mut p, vehicles[j].reference);
                    p.add_row(
                        vec![row.coeff_i[0], row.coeff_i[1], row.coeff_j[0], row.coeff_j[1]],
                        row.bias,
                    );
                }
                let t0 = Instant::now();
                let sol = solve_qp(&p)?;
                qp_time += t0.elapsed().as_nanos() as u64;
                if sol.status == QpStatus::Optimal {
                    control = Some((Control::new(sol.x[0], sol.x[1]), FilterStage::Stage2, 0.0));
                }
            }

            // Stage 3: relaxed symmetric QP, always feasible
            if control.is_none() {
                let mut p = QpProblem::new();
                self.add_control(&mut p, vi.reference);
                let (coeffs, bias) = if j_resolved {
                    (vec![row.coeff_i[0], row.coeff_i[1]], fixed_term)
                } else {
                    self.add_control(&mut p, vehicles[j].reference);
                    (
                        vec![row.coeff_i[0], row.coeff_i[1], row.coeff_j[0], row.coeff_j[1]],
                        row.bias,
                    )
                };
                let xi = p.add_slack_var(self.params.lambda, self.params.epsilon);
                let mut full = coeffs;
                full.resize(xi, 0.0);
                full.push(1.0);
                p.add_row(full, bias);
                let t0 = Instant::now();
                let sol = solve_qp(&p)?;
                qp_time += t0.elapsed().as_nanos() as u64;
                debug_assert_eq!(sol.status, QpStatus::Optimal);
                control = Some((Control::new(sol.x[0], sol.x[1]), FilterStage::Stage3, sol.x[xi]));
            }

            let (u, stage, slack) = control.unwrap();
            let u = self.vehicle.clamp_control(u);
            resolved[i] = Some(u);
            outcomes[i] = Some(VehicleOutcome {
                control: u,
                stage,
                slack,
                qp_time_ns: qp_time,
                total_time_ns: started.elapsed().as_nanos() as u64,
            });
        }

        // vehicles missing from the order (should not happen) pass through
        let per_vehicle = outcomes
            .into_iter()
            .enumerate()
            .map(|(i, o)| o.unwrap_or_else(|| self.passthrough(vehicles[i].reference)))
            .collect();
        Ok(FilterOutcome { per_vehicle })
    }

    /// Centralized: one joint QP over all active controls with a barrier row
    /// and an independent slack per active pair.
    pub fn filter_cent(&self, vehicles: &[FilterVehicle]) -> Result<FilterOutcome, FilterError> {
        let started = Instant::now();
        let prune = self.params.prune_distance(&self.vehicle);
        let n = vehicles.len();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let d = pair_distance(&vehicles[a].state, &vehicles[b].state);
                if d <= self.params.comm_range && d <= prune {
                    // orient the pair by vehicle id: the row is expressed in
                    // the lower id's frame
                    let (i, j) = if vehicles[a].id < vehicles[b].id { (a, b) } else { (b, a) };
                    pairs.push((i, j));
                }
            }
        }
        if pairs.is_empty() {
            return Ok(FilterOutcome {
                per_vehicle: vehicles.iter().map(|v| self.passthrough(v.reference)).collect(),
            });
        }

        let mut p = QpProblem::new();
        for v in vehicles {
            self.add_control(&mut p, v.reference);
        }
        let slack_base = 2 * n;
        for _ in &pairs {
            p.add_slack_var(self.params.lambda, self.params.epsilon);
        }
        let m = p.dim();
        for (pi, &(i, j)) in pairs.iter().enumerate() {
            let row = self.cbf_row(&relative_state(&vehicles[i].state, &vehicles[j].state));
            let mut coeffs = vec![0.0f64; m];
            coeffs[2 * i] = row.coeff_i[0];
            coeffs[2 * i + 1] = row.coeff_i[1];
            coeffs[2 * j] = row.coeff_j[0];
            coeffs[2 * j + 1] = row.coeff_j[1];
            coeffs[slack_base + pi] = 1.0;
            p.add_row(coeffs, row.bias);
        }
        let t0 = Instant::now();
        let sol = solve_qp(&p)?;
        let qp_time = t0.elapsed().as_nanos() as u64;
        debug_assert_eq!(sol.status, QpStatus::Optimal);

        let total = started.elapsed().as_nanos() as u64;
        let per_vehicle = (0..n)
            .map(|i| {
                let slack = pairs
                    .iter()
                    .enumerate()
                    .filter(|(_, &(a, b))| a == i || b == i)
                    .map(|(pi, _)| sol.x[slack_base + pi])
                    .fold(0.0f64, f64::max);
                VehicleOutcome {
                    control: self.vehicle.clamp_control(Control::new(sol.x[2 * i], sol.x[2 * i + 1])),
                    stage: FilterStage::Cent,
                    slack,
                    qp_time_ns: qp_time,
                    total_time_ns: total,
                }
            })
            .collect();
        Ok(FilterOutcome { per_vehicle })
    }

    fn add_control(&self, p: &mut QpProblem, reference: Control) {
        let v = &self.vehicle;
        p.add_control_var(reference.omega, -v.omega_max, v.omega_max);
        p.add_control_var(reference.accel, v.a_min, v.a_max);
    }

    /// Neighbor control minimizing the row contribution over its box.
    fn worst_case_neighbor(&self, row: &CbfRow) -> Control {
        let v = &self.vehicle;
        Control::new(
            if row.coeff_j[0] >= 0.0 { -v.omega_max } else { v.omega_max },
            if row.coeff_j[1] >= 0.0 { v.a_min } else { v.a_max },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::relative_flow;
    use crate::grid::{AxisSpec, GridSpec};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn rel_spec() -> GridSpec {
        GridSpec::new(vec![
            AxisSpec::new(-2000.0, 2000.0, 21),
            AxisSpec::new(-2000.0, 2000.0, 21),
            AxisSpec::periodic(-PI, PI, 24),
            AxisSpec::new(30.0, 90.0, 5),
            AxisSpec::new(30.0, 90.0, 5),
        ])
        .unwrap()
    }

    /// Smooth stand-in for the safety value: grows with distance, penalizes
    /// closing geometry through the relative heading.
    fn smooth_value_filter(params: FilterParams) -> SafetyFilter {
        let field = GridField::sample(rel_spec(), |r| {
            let dist = (r[0] * r[0] + r[1] * r[1] + 1.0).sqrt();
            dist - 500.0 + 100.0 * (1.0 + (r[2] - 0.3).cos()) + 0.5 * (r[3] - r[4])
        });
        SafetyFilter::new(VehicleParams::default(), params, field).unwrap()
    }

    /// Value affine in the speeds only; rows reduce to accel coefficients,
    /// handy for staging the QP protocols exactly.
    fn accel_only_filter(offset: f64, params: FilterParams) -> SafetyFilter {
        let field = GridField::sample(rel_spec(), move |r| 10.0 * r[3] + 10.0 * r[4] - offset);
        SafetyFilter::new(VehicleParams::default(), params, field).unwrap()
    }

    fn fv(id: usize, px: f64, py: f64, theta: f64, v: f64, reference: Control) -> FilterVehicle {
        FilterVehicle { id, state: VehicleState::new(px, py, theta, v), reference }
    }

    #[test]
    fn cbf_row_matches_directional_derivative() {
        let f = smooth_value_filter(FilterParams::default());
        let cases = [
            (RelativeState { px: 700.0, py: -200.0, theta: 2.0, v_i: 60.0, v_j: 80.0 },
             Control::new(0.05, 1.0), Control::new(-0.08, -0.5)),
            (RelativeState { px: -400.0, py: 900.0, theta: -1.2, v_i: 45.0, v_j: 70.0 },
             Control::new(-0.1, 2.0), Control::new(0.02, 0.3)),
        ];
        for (r, ui, uj) in cases {
            let row = f.cbf_row(&r);
            let gamma_v = f.params.gamma * f.value_at(&r);
            let got = row.value(ui, uj);
            // finite-difference along the flow
            let h = 1e-4;
            let dot = relative_flow(&r, ui, uj, &f.vehicle).unwrap();
            let q = r.as_array();
            let ahead: Vec<f64> = (0..5).map(|k| q[k] + h * dot[k]).collect();
            let fd = (f.value.interpolate(&ahead, None).unwrap() - f.value_at(&r)) / h + gamma_v;
            assert!(
                (got - fd).abs() < 2e-2 * (1.0 + got.abs()),
                "row {got} vs finite difference {fd}"
            );
        }
    }

    #[test]
    fn cbf_row_coefficients_follow_affine_structure() {
        let f = smooth_value_filter(FilterParams::default());
        let r = RelativeState { px: 650.0, py: 150.0, theta: 1.1, v_i: 55.0, v_j: 75.0 };
        let g = f.gradient_at(&r);
        let row = f.cbf_row(&r);
        assert_relative_eq!(row.coeff_j[0], g[2], epsilon = 1e-12);
        assert_relative_eq!(row.coeff_j[1], g[4], epsilon = 1e-12);
        assert_relative_eq!(row.coeff_i[0], g[0] * r.py - g[1] * r.px - g[2], epsilon = 1e-12);
        assert_relative_eq!(row.coeff_i[1], g[3], epsilon = 1e-12);
    }

    #[test]
    fn far_pair_row_is_inactive() {
        let f = smooth_value_filter(FilterParams::default());
        let r = RelativeState { px: 1900.0, py: 0.0, theta: 0.0, v_i: 70.0, v_j: 70.0 };
        let row = f.cbf_row(&r);
        // even the worst admissible controls keep the row positive
        let p = VehicleParams::default();
        let worst = |c: [f64; 2]| (c[0] * -p.omega_max).min(c[0] * p.omega_max) + (c[1] * p.a_min).min(c[1] * p.a_max);
        assert!(row.bias + worst(row.coeff_i) + worst(row.coeff_j) > 0.0);
    }

    #[test]
    fn most_critical_neighbor_selection() {
        let f = smooth_value_filter(FilterParams::default());
        let me = fv(0, 0.0, 0.0, 0.0, 70.0, Control::default());
        // head-on at 600 m vs co-heading at 600 m: head-on has lower value
        let head_on = fv(1, 600.0, 0.0, PI, 70.0, Control::default());
        let parallel = fv(2, -600.0, 0.0, 0.0, 70.0, Control::default());
        let fleet = [me, head_on, parallel];
        assert_eq!(f.most_critical_neighbor(0, &fleet), Some(1));

        // single neighbor
        assert_eq!(f.most_critical_neighbor(0, &fleet[..2]), Some(1));

        // nobody in range
        let short_range = smooth_value_filter(FilterParams { comm_range: 100.0, ..Default::default() });
        assert_eq!(short_range.most_critical_neighbor(0, &fleet), None);
    }

    #[test]
    fn dec_distant_fleet_passes_through() {
        let f = smooth_value_filter(FilterParams::default());
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::new(0.05, 1.0)),
            fv(1, 0.0, 1500.0, 0.0, 70.0, Control::new(-0.02, 0.4)),
        ];
        let est = [Control::default(), Control::default()];
        let out = f.filter_dec(&fleet, &est).unwrap();
        for (o, v) in out.per_vehicle.iter().zip(&fleet) {
            assert_eq!(o.control, v.reference);
            assert_eq!(o.stage, FilterStage::Passthrough);
        }
    }

    #[test]
    fn dec_inactive_row_returns_reference_exactly() {
        // force row assembly (no pruning) with a benign pair
        let f = smooth_value_filter(FilterParams { prune_distance: Some(f64::INFINITY), ..Default::default() });
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::new(0.05, 1.0)),
            fv(1, 0.0, 1500.0, 0.0, 70.0, Control::new(-0.02, 0.4)),
        ];
        let est = [Control::default(), Control::default()];
        let out = f.filter_dec(&fleet, &est).unwrap();
        for (o, v) in out.per_vehicle.iter().zip(&fleet) {
            assert_eq!(o.stage, FilterStage::DecMain);
            assert_relative_eq!(o.control.omega, v.reference.omega, epsilon = 1e-8);
            assert_relative_eq!(o.control.accel, v.reference.accel, epsilon = 1e-8);
        }
    }

    #[test]
    fn dec_symmetric_head_on_pair_mirrors() {
        let f = smooth_value_filter(FilterParams::default());
        // both vehicles see the identical relative state, so their QPs and
        // controls coincide (each turns the same way in its own frame)
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::default()),
            fv(1, 600.0, 0.0, PI, 70.0, Control::default()),
        ];
        let est = [Control::default(), Control::default()];
        let out = f.filter_dec(&fleet, &est).unwrap();
        let a = out.per_vehicle[0].control;
        let b = out.per_vehicle[1].control;
        assert_relative_eq!(a.omega, b.omega, epsilon = 1e-6);
        assert_relative_eq!(a.accel, b.accel, epsilon = 1e-6);
        // the constraint binds in this geometry
        assert!(a != Control::default() || out.per_vehicle[0].slack > 0.0);
    }

    #[test]
    fn dec_relaxed_returns_boundary_control_with_residual_slack() {
        // joint value so low the row cannot be met inside the box
        let f = accel_only_filter(1800.0, FilterParams::default());
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::default()),
            fv(1, 400.0, 0.0, 0.0, 70.0, Control::default()),
        ];
        let est = [Control::default(), Control::default()];
        let out = f.filter_dec(&fleet, &est).unwrap();
        let o = &out.per_vehicle[0];
        assert_eq!(o.stage, FilterStage::DecRelaxed);
        // row: 10 a_i + (10 * 0 + gamma V) >= 0 with V = 1400 - 1800 = -400
        // => 10 a_i - 200 + xi >= 0; best control a_i = 2 leaves xi = 180
        assert_relative_eq!(o.control.accel, 2.0, epsilon = 1e-6);
        assert_relative_eq!(o.slack, 180.0, epsilon = 1e-4);
    }

    #[test]
    fn prio_no_conflict_passes_references() {
        let f = smooth_value_filter(FilterParams::default());
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::new(0.01, 0.5)),
            fv(1, 0.0, 1800.0, 0.0, 70.0, Control::new(-0.04, 1.5)),
        ];
        let order = PriorityOrder::assign(&[10.0, 20.0]).unwrap();
        let out = f.filter_prio(&fleet, &order).unwrap();
        for (o, v) in out.per_vehicle.iter().zip(&fleet) {
            assert_eq!(o.control, v.reference);
        }
    }

    #[test]
    fn prio_higher_priority_keeps_reference_lower_absorbs() {
        // value odd in the relative heading: the leader's frame sees a safe
        // margin while the follower's frame sees a violated row, so the
        // leader's stage-1 check passes untouched and the follower corrects
        // alone against the leader's resolved (unchanged) reference
        let field = GridField::sample(rel_spec(), |r| 10.0 * r[3] + 10.0 * r[4] - 1400.0 + 30.0 * r[2].sin());
        let f = SafetyFilter::new(VehicleParams::default(), FilterParams::default(), field).unwrap();
        let refs = [Control::new(0.0, 0.0), Control::new(0.0, 0.0)];
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, refs[0]),
            fv(1, 500.0, 0.0, PI / 2.0, 70.0, refs[1]),
        ];
        // vehicle 0 outranks vehicle 1
        let order = PriorityOrder::assign(&[10.0, 20.0]).unwrap();
        let out = f.filter_prio(&fleet, &order).unwrap();
        let o0 = &out.per_vehicle[0];
        let o1 = &out.per_vehicle[1];
        assert_eq!(o0.stage, FilterStage::Stage1);
        assert_eq!(o0.control, refs[0], "the priority holder emits its reference");
        assert_eq!(o1.stage, FilterStage::Stage1);
        // follower's row: 10 a + gamma*(-30) >= 0 needs a >= 1.5
        assert_relative_eq!(o1.control.accel, 1.5, epsilon = 1e-6);
        let row = f.cbf_row(&relative_state(&fleet[1].state, &fleet[0].state));
        assert!(row.value(o1.control, o0.control) >= -1e-6);
    }

    #[test]
    fn prio_leader_reference_respected_when_feasible() {
        // joint value comfortably positive: the leader's reference passes
        // stage 1 untouched even with the row assembled
        let f = accel_only_filter(800.0, FilterParams { prune_distance: Some(f64::INFINITY), ..Default::default() });
        let refs = [Control::new(0.03, 1.0), Control::new(-0.06, 0.5)];
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, refs[0]),
            fv(1, 700.0, 0.0, 0.0, 70.0, refs[1]),
        ];
        let order = PriorityOrder::assign(&[10.0, 20.0]).unwrap();
        let out = f.filter_prio(&fleet, &order).unwrap();
        assert_eq!(out.per_vehicle[0].stage, FilterStage::Stage1);
        assert_eq!(out.per_vehicle[0].control, refs[0]);
    }

    #[test]
    fn prio_stage2_moves_both_when_single_side_infeasible() {
        // V = 10 v_i + 10 v_j - 1460 => V = -60 at 70/70, gamma V = -30.
        // one accel alone reaches only +20 - 30 < 0; both reach +40 - 30 >= 0
        let f = accel_only_filter(1460.0, FilterParams::default());
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::default()),
            fv(1, 400.0, 0.0, 0.0, 70.0, Control::default()),
        ];
        // vehicle 1 has priority; vehicle 0 resolves first? no: order is by
        // initial ttr, vehicle 1 first
        let order = PriorityOrder::assign(&[20.0, 10.0]).unwrap();
        let out = f.filter_prio(&fleet, &order).unwrap();
        // the first resolved vehicle (id 1, priority) finds its reference
        // infeasible at stage 1 and lands in stage 2 with both moved
        let o1 = &out.per_vehicle[1];
        assert_eq!(o1.stage, FilterStage::Stage2);
        assert!(o1.control.accel > 1.0);
        // committed controls satisfy the hard row
        let row = f.cbf_row(&relative_state(&fleet[1].state, &fleet[0].state));
        let o0 = &out.per_vehicle[0];
        assert!(row.value(o1.control, o0.control) >= -1e-6);
    }

    #[test]
    fn prio_stage3_when_joint_infeasible() {
        let f = accel_only_filter(1800.0, FilterParams::default());
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::default()),
            fv(1, 400.0, 0.0, 0.0, 70.0, Control::default()),
        ];
        let order = PriorityOrder::assign(&[10.0, 20.0]).unwrap();
        let out = f.filter_prio(&fleet, &order).unwrap();
        let o0 = &out.per_vehicle[0];
        assert_eq!(o0.stage, FilterStage::Stage3);
        // gamma V = -200, joint best 10*2 + 10*2 = 40 => slack 160
        assert_relative_eq!(o0.slack, 160.0, epsilon = 1e-4);
    }

    #[test]
    fn cent_empty_pair_set_clips_references() {
        let f = smooth_value_filter(FilterParams::default());
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::new(0.5, 5.0)), // out-of-box reference
            fv(1, 0.0, 1900.0, 0.0, 70.0, Control::new(0.01, 0.2)),
        ];
        let out = f.filter_cent(&fleet).unwrap();
        assert_eq!(out.per_vehicle[0].control, Control::new(0.1, 2.0));
        assert_eq!(out.per_vehicle[1].control, Control::new(0.01, 0.2));
        assert_eq!(out.per_vehicle[0].stage, FilterStage::Passthrough);
    }

    #[test]
    fn cent_matches_dec_on_single_sided_active_row() {
        // value depending on v_i only: the pair row constrains exactly one
        // vehicle, so the dec and centralized solves face the identical QP
        let field = GridField::sample(rel_spec(), |r| 10.0 * r[3] - 725.0);
        let f = SafetyFilter::new(VehicleParams::default(), FilterParams::default(), field).unwrap();
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::default()),
            fv(1, 600.0, 0.0, PI, 70.0, Control::default()),
        ];
        let est = [Control::default(), Control::default()];
        let dec = f.filter_dec(&fleet, &est).unwrap();
        let cent = f.filter_cent(&fleet).unwrap();
        assert_eq!(dec.per_vehicle[0].stage, FilterStage::DecMain);
        // V = -25, gamma V = -12.5: both must land on 10 a = 12.5
        assert_relative_eq!(dec.per_vehicle[0].control.accel, 1.25, epsilon = 1e-6);
        assert_relative_eq!(
            cent.per_vehicle[0].control.accel,
            dec.per_vehicle[0].control.accel,
            epsilon = 1e-6
        );
        assert_relative_eq!(
            cent.per_vehicle[0].control.omega,
            dec.per_vehicle[0].control.omega,
            epsilon = 1e-6
        );
        assert!(cent.per_vehicle.iter().all(|o| o.slack < 1e-6));
        let row = f.cbf_row(&relative_state(&fleet[0].state, &fleet[1].state));
        assert!(row.value(cent.per_vehicle[0].control, cent.per_vehicle[1].control) >= -1e-6);
    }

    #[test]
    fn cent_resolves_chain_the_pairwise_filters_cannot() {
        // value odd in the speed difference: every pair row wants the
        // lower-id vehicle faster and the higher-id vehicle slower. The dec
        // solves each push their own accel up against an assumed-static
        // neighbor and jointly violate the rows; the joint QP separates the
        // accelerations and satisfies every row with zero slack.
        let field = GridField::sample(rel_spec(), |r| 10.0 * (r[3] - r[4]) - 28.0);
        let f = SafetyFilter::new(VehicleParams::default(), FilterParams::default(), field).unwrap();
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::default()),
            fv(1, 420.0, 0.0, 0.0, 70.0, Control::default()),
            fv(2, 840.0, 0.0, 0.0, 70.0, Control::default()),
        ];
        let est = [Control::default(); 3];
        let dec = f.filter_dec(&fleet, &est).unwrap();
        let cent = f.filter_cent(&fleet).unwrap();
        let mut dec_violation = false;
        let mut cent_violation = false;
        for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let row = f.cbf_row(&relative_state(&fleet[a].state, &fleet[b].state));
            if row.value(dec.per_vehicle[a].control, dec.per_vehicle[b].control) < -1e-6 {
                dec_violation = true;
            }
            if row.value(cent.per_vehicle[a].control, cent.per_vehicle[b].control) < -1e-6 {
                cent_violation = true;
            }
        }
        assert!(dec_violation, "expected the pairwise-only filter to leave a row violated");
        assert!(!cent_violation, "joint solve must satisfy every row");
        assert!(cent.per_vehicle.iter().all(|o| o.slack < 1e-6));
    }

    #[test]
    fn all_filter_outputs_respect_control_bounds() {
        let f = smooth_value_filter(FilterParams::default());
        let p = VehicleParams::default();
        let order = PriorityOrder::assign(&[5.0, 10.0, 15.0]).unwrap();
        let fleet = [
            fv(0, 0.0, 0.0, 0.0, 70.0, Control::new(0.1, 2.0)),
            fv(1, 520.0, 10.0, PI, 70.0, Control::new(-0.1, -1.0)),
            fv(2, 100.0, 520.0, -PI / 2.0, 60.0, Control::new(0.0, 0.0)),
        ];
        let est = [Control::default(); 3];
        for mode in FilterMode::ALL {
            let out = f.apply(mode, &fleet, &est, &order).unwrap();
            for o in &out.per_vehicle {
                assert!(p.control_in_bounds(o.control), "{mode:?} emitted {:?}", o.control);
            }
        }
    }
}
