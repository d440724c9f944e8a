//! Offline Hamilton-Jacobi level-set solves.
//!
//! Two problems are solved on sampled grids with a first-order
//! Lax-Friedrichs scheme and explicit Euler pseudo-time stepping:
//!
//! * the finite-horizon reach-avoid value function `W(x, t)` for the
//!   corridor entry region with the downstream region as the avoid set,
//!   from which the minimum time-to-reach field is reconstructed, and
//! * the infinite-horizon pairwise safety value function `V` over relative
//!   states, used by the CBF safety filters.
//!
//! Value iteration, forward in horizon `tau`:
//!
//! ```text
//! reach-avoid:  W_0 = min(l, c),  W' = min(c, max(l, W + dtau * H))
//! avoid-only:   V_0 = c,          V' = min(c, V + dtau * H)
//! ```
//!
//! with `H = max_u grad . f(x, u)` evaluated with Lax-Friedrichs dissipation
//! on upwind gradient pairs. Both updates are monotone under the CFL bound,
//! so `W` is nondecreasing in horizon at every node.

use crate::dynamics::{VehicleParams, Wind};
use crate::grid::{GridError, GridField, GridSpec};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver settings: {0}")]
    BadSettings(String),
    #[error("non-finite value appeared at pseudo-time step {step}")]
    NonFinite { step: usize },
    #[error("avoid solve did not converge: residual {residual:.3e} after {iters} iterations (tolerance {tolerance:.3e})")]
    NotConverged { residual: f64, iters: usize, tolerance: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Settings for the level-set solves.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// CFL number in (0, 1]. The pseudo-time step is
    /// `cfl * min_k(h_k / alpha_k)`; with `cfl <= 1/d` this satisfies the
    /// Lax-Friedrichs stability bound on a d-dimensional grid.
    pub cfl: f64,
    /// Reach-avoid horizon (s).
    pub horizon: f64,
    /// Snapshot spacing of the stored reach-avoid value function (s).
    pub snapshot_interval: f64,
    /// Avoid-only convergence threshold: max node change per sweep.
    pub tolerance: f64,
    /// Avoid-only iteration cap.
    pub max_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { cfl: 0.2, horizon: 150.0, snapshot_interval: 1.0, tolerance: 1e-3, max_iters: 50_000 }
    }
}

impl SolverSettings {
    fn validate(&self) -> Result<(), SolveError> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(SolveError::BadSettings(format!("cfl must be in (0, 1], got {}", self.cfl)));
        }
        if !(self.horizon > 0.0) || !(self.snapshot_interval > 0.0) {
            return Err(SolveError::BadSettings("horizon and snapshot_interval must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(SolveError::BadSettings("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Provenance of one solve, written as a JSON sidecar next to field files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub kind: String,
    pub grid_nodes: Vec<usize>,
    pub cfl: f64,
    pub dtau: f64,
    pub steps: usize,
    pub residual: f64,
    pub dissipation: Vec<f64>,
    pub wall_clock_s: f64,
}

/// Upper bound `H = max_u grad . f(x, u)` of a control-affine flow family,
/// plus the per-axis dissipation bounds `max |f_k|` the Lax-Friedrichs
/// scheme needs.
pub trait HamiltonianModel: Sync {
    fn dim(&self) -> usize;
    fn hamiltonian(&self, coords: &[f64], grad: &[f64]) -> f64;
    fn dissipation(&self, spec: &GridSpec) -> Vec<f64>;
}

/// Single-vehicle air-taxi flow with wind; the control maximizes.
#[derive(Debug, Clone, Copy)]
pub struct VehicleReachModel {
    pub params: VehicleParams,
    pub wind: Wind,
}

impl HamiltonianModel for VehicleReachModel {
    fn dim(&self) -> usize {
        4
    }

    #[inline]
    fn hamiltonian(&self, x: &[f64], p: &[f64]) -> f64 {
        let (sin_th, cos_th) = x[2].sin_cos();
        let v = x[3];
        let wx = self.wind.speed * self.wind.phi.cos();
        let wy = self.wind.speed * self.wind.phi.sin();
        let drift = p[0] * (v * cos_th + wx) + p[1] * (v * sin_th + wy);
        let turn = self.params.omega_max * p[2].abs();
        let accel = (p[3] * self.params.a_min).max(p[3] * self.params.a_max);
        drift + turn + accel
    }

    fn dissipation(&self, _spec: &GridSpec) -> Vec<f64> {
        let p = &self.params;
        let vw = p.v_max + self.wind.speed;
        vec![vw, vw, p.omega_max, (-p.a_min).max(p.a_max)]
    }
}

/// Relative-pair flow with both vehicles' controls maximizing (cooperative
/// avoidance); used for the pairwise safety value function.
#[derive(Debug, Clone, Copy)]
pub struct PairAvoidModel {
    pub params: VehicleParams,
}

impl HamiltonianModel for PairAvoidModel {
    fn dim(&self) -> usize {
        5
    }

    #[inline]
    fn hamiltonian(&self, x: &[f64], p: &[f64]) -> f64 {
        let (sin_th, cos_th) = x[2].sin_cos();
        let (v_i, v_j) = (x[3], x[4]);
        let drift = p[0] * (-v_i + v_j * cos_th) + p[1] * (v_j * sin_th);
        // omega_i multiplies (p1*py - p2*px - p3), omega_j multiplies p3
        let ci = p[0] * x[1] - p[1] * x[0] - p[2];
        let turn = self.params.omega_max * (ci.abs() + p[2].abs());
        let accel = (p[3] * self.params.a_min).max(p[3] * self.params.a_max)
            + (p[4] * self.params.a_min).max(p[4] * self.params.a_max);
        drift + turn + accel
    }

    fn dissipation(&self, spec: &GridSpec) -> Vec<f64> {
        let p = &self.params;
        let max_abs = |k: usize| {
            let ax = spec.axis(k);
            ax.lo.abs().max(ax.hi.abs())
        };
        let a = (-p.a_min).max(p.a_max);
        vec![
            2.0 * p.v_max + p.omega_max * max_abs(1),
            p.v_max + p.omega_max * max_abs(0),
            2.0 * p.omega_max,
            a,
            a,
        ]
    }
}

/// Time-to-reach field: a plain grid field whose unreachable nodes carry the
/// `+inf` sentinel.
pub type TtrField = GridField;

struct Stepper<'a, M: HamiltonianModel> {
    spec: &'a GridSpec,
    model: &'a M,
    alphas: Vec<f64>,
    spacings: Vec<f64>,
    strides: Vec<usize>,
    coords: Vec<Vec<f64>>,
    dtau: f64,
}

impl<'a, M: HamiltonianModel> Stepper<'a, M> {
    fn new(spec: &'a GridSpec, model: &'a M, settings: &SolverSettings) -> Result<Self, SolveError> {
        settings.validate()?;
        if model.dim() != spec.dim() {
            return Err(SolveError::BadSettings(format!(
                "model dimension {} does not match grid dimension {}",
                model.dim(),
                spec.dim()
            )));
        }
        let alphas = model.dissipation(spec);
        let spacings: Vec<f64> = spec.axes().iter().map(|a| a.spacing()).collect();
        let mut dtau_max = f64::INFINITY;
        for (h, a) in spacings.iter().zip(&alphas) {
            if *a > 0.0 {
                dtau_max = dtau_max.min(h / a);
            }
        }
        let coords = (0..spec.dim())
            .map(|k| (0..spec.axis(k).n).map(|i| spec.axis(k).coord(i)).collect())
            .collect();
        Ok(Self {
            spec,
            model,
            alphas,
            spacings,
            strides: spec.strides(),
            coords,
            dtau: settings.cfl * dtau_max,
        })
    }

    /// One explicit-Euler sweep producing `out`; returns the max node change.
    ///
    /// `target` is `Some(l)` for the reach-avoid update (freeze-at-target max
    /// with `l`), `None` for the avoid-only update.
    fn sweep(&self, w: &[f64], constraint: &[f64], target: Option<&[f64]>, out: &mut [f64]) -> f64 {
        let d = self.spec.dim();
        let chunk = 4096;
        out.par_chunks_mut(chunk)
            .enumerate()
            .map(|(ci, outc)| {
                let base = ci * chunk;
                let mut multi = vec![0usize; d];
                self.spec.multi_index_into(base, &mut multi);
                let mut x = vec![0.0f64; d];
                let mut grad = vec![0.0f64; d];
                let mut max_change = 0.0f64;
                for (j, slot) in outc.iter_mut().enumerate() {
                    let flat = base + j;
                    let wc = w[flat];
                    // Lax-Friedrichs Hamiltonian on upwind pairs
                    let mut dissip = 0.0f64;
                    for k in 0..d {
                        let ax = self.spec.axis(k);
                        let stride = self.strides[k];
                        let i = multi[k];
                        x[k] = self.coords[k][i];
                        let h = self.spacings[k];
                        let wm = if i > 0 {
                            w[flat - stride]
                        } else if ax.periodic {
                            w[flat + (ax.n - 1) * stride]
                        } else {
                            2.0 * wc - w[flat + stride]
                        };
                        let wp = if i + 1 < ax.n {
                            w[flat + stride]
                        } else if ax.periodic {
                            w[flat - (ax.n - 1) * stride]
                        } else {
                            2.0 * wc - w[flat - stride]
                        };
                        let left = (wc - wm) / h;
                        let right = (wp - wc) / h;
                        grad[k] = 0.5 * (left + right);
                        dissip += 0.5 * self.alphas[k] * (right - left);
                    }
                    let ham = self.model.hamiltonian(&x, &grad) - dissip;
                    let mut val = wc + self.dtau * ham;
                    if let Some(l) = target {
                        val = val.max(l[flat]);
                    }
                    val = val.min(constraint[flat]);
                    max_change = max_change.max((val - wc).abs());
                    *slot = val;
                    // odometer increment
                    for k in (0..d).rev() {
                        multi[k] += 1;
                        if multi[k] < self.spec.axis(k).n {
                            break;
                        }
                        multi[k] = 0;
                    }
                }
                max_change
            })
            .reduce(|| 0.0, f64::max)
    }
}

fn check_finite(values: &[f64], step: usize) -> Result<(), SolveError> {
    if values.par_iter().any(|v| v.is_nan() || v.is_infinite()) {
        return Err(SolveError::NonFinite { step });
    }
    Ok(())
}

/// Solves the finite-horizon reach-avoid problem and returns the time-indexed
/// value function `W` with snapshots every `settings.snapshot_interval`
/// seconds starting at horizon 0.
pub fn solve_reach_avoid<M, L, C>(
    spec: &GridSpec,
    model: &M,
    target: L,
    constraint: C,
    settings: &SolverSettings,
) -> Result<(GridField, SolveReport), SolveError>
where
    M: HamiltonianModel,
    L: Fn(&[f64]) -> f64 + Sync,
    C: Fn(&[f64]) -> f64 + Sync,
{
    let start = Instant::now();
    let stepper = Stepper::new(spec, model, settings)?;
    let l_vals = GridField::sample(spec.clone(), target);
    let c_vals = GridField::sample(spec.clone(), constraint);
    let (l_vals, c_vals) = (l_vals.values(), c_vals.values());

    let substeps = (settings.snapshot_interval / stepper.dtau).ceil().max(1.0) as usize;
    let dtau = settings.snapshot_interval / substeps as f64;
    let stepper = Stepper { dtau, ..stepper };
    let n_snapshots = (settings.horizon / settings.snapshot_interval).round().max(1.0) as usize;

    let mut w: Vec<f64> = l_vals.iter().zip(c_vals).map(|(l, c)| l.min(*c)).collect();
    let mut buf = vec![0.0f64; w.len()];
    let mut snapshots = Vec::with_capacity(n_snapshots + 1);
    snapshots.push(w.clone());
    let mut steps = 0usize;
    let mut residual = f64::INFINITY;
    for _ in 0..n_snapshots {
        for _ in 0..substeps {
            residual = stepper.sweep(&w, c_vals, Some(l_vals), &mut buf);
            std::mem::swap(&mut w, &mut buf);
            steps += 1;
        }
        check_finite(&w, steps)?;
        snapshots.push(w.clone());
    }
    let report = SolveReport {
        kind: "reach_avoid".into(),
        grid_nodes: spec.axes().iter().map(|a| a.n).collect(),
        cfl: settings.cfl,
        dtau,
        steps,
        residual,
        dissipation: stepper.alphas.clone(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let field = GridField::from_snapshots(spec.clone(), snapshots, settings.snapshot_interval)?;
    Ok((field, report))
}

/// Solves the infinite-horizon avoid problem (maximal safe set value) by
/// iterating the avoid update to a fixed point.
pub fn solve_avoid<M, C>(
    spec: &GridSpec,
    model: &M,
    constraint: C,
    settings: &SolverSettings,
) -> Result<(GridField, SolveReport), SolveError>
where
    M: HamiltonianModel,
    C: Fn(&[f64]) -> f64 + Sync,
{
    let start = Instant::now();
    let stepper = Stepper::new(spec, model, settings)?;
    let c_field = GridField::sample(spec.clone(), constraint);
    let c_vals = c_field.values();

    let mut v: Vec<f64> = c_vals.to_vec();
    let mut buf = vec![0.0f64; v.len()];
    let mut residual = f64::INFINITY;
    let mut iters = 0usize;
    while iters < settings.max_iters {
        residual = stepper.sweep(&v, c_vals, None, &mut buf);
        std::mem::swap(&mut v, &mut buf);
        iters += 1;
        if iters % 50 == 0 {
            check_finite(&v, iters)?;
        }
        if residual < settings.tolerance {
            break;
        }
    }
    check_finite(&v, iters)?;
    if residual >= settings.tolerance {
        return Err(SolveError::NotConverged { residual, iters, tolerance: settings.tolerance });
    }
    let report = SolveReport {
        kind: "avoid".into(),
        grid_nodes: spec.axes().iter().map(|a| a.n).collect(),
        cfl: settings.cfl,
        dtau: stepper.dtau,
        steps: iters,
        residual,
        dissipation: stepper.alphas.clone(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let field = GridField::from_values(spec.clone(), v)?;
    Ok((field, report))
}

/// Reconstructs the minimum time-to-reach field from the time-indexed
/// reach-avoid value function: per node, the first time `W >= 0`, linearly
/// interpolated between the bracketing snapshots; `+inf` if never reached
/// within the horizon.
pub fn extract_ttr(w: &GridField) -> Result<TtrField, SolveError> {
    if w.snapshot_count() < 2 {
        return Err(SolveError::BadSettings("time-to-reach extraction needs at least two snapshots".into()));
    }
    let dt = w.snapshot_dt();
    let n_snap = w.snapshot_count();
    let n = w.values().len();
    let mut ttr = vec![f64::INFINITY; n];
    ttr.par_iter_mut().enumerate().for_each(|(i, out)| {
        if w.snapshot(0)[i] >= 0.0 {
            *out = 0.0;
            return;
        }
        let mut prev = w.snapshot(0)[i];
        for s in 1..n_snap {
            let cur = w.snapshot(s)[i];
            if cur >= 0.0 {
                // prev < 0 <= cur: linear root in the snapshot interval
                *out = dt * ((s - 1) as f64 + (0.0 - prev) / (cur - prev));
                return;
            }
            prev = cur;
        }
    });
    Ok(GridField::from_values(w.spec().clone(), ttr)?)
}

/// Self-consistency audit of the reconstructed time-to-reach field against
/// the value function it came from: at sampled finite-TTR nodes with
/// `t* = T_min(x)`, `W(x, t*)` must be nonnegative (to tolerance) and
/// `W(x, t* - dt)` must still be negative.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub checked: usize,
    pub violations: usize,
}

impl ConsistencyReport {
    pub fn violation_fraction(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.violations as f64 / self.checked as f64
        }
    }
}

pub fn verify_ttr_consistency<R: Rng>(
    w: &GridField,
    ttr: &TtrField,
    samples: usize,
    rng: &mut R,
) -> Result<ConsistencyReport, SolveError> {
    if w.spec() != ttr.spec() {
        return Err(SolveError::BadSettings("value function and TTR field are on different grids".into()));
    }
    let tol = 1e-7;
    let dt = w.snapshot_dt();
    let n = ttr.values().len();
    let d = w.spec().dim();
    let mut coords = vec![0.0f64; d];
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut attempts = 0usize;
    while checked < samples && attempts < samples * 100 {
        attempts += 1;
        let i = rng.gen_range(0..n);
        let t_star = ttr.values()[i];
        if !t_star.is_finite() {
            continue;
        }
        checked += 1;
        w.spec().node_coords_into(i, &mut coords);
        let at_star = w.interpolate(&coords, Some(t_star))?;
        let mut ok = at_star >= -tol;
        if t_star > 0.0 {
            let before = w.interpolate(&coords, Some((t_star - dt).max(0.0)))?;
            ok = ok && before < tol;
        }
        if !ok {
            violations += 1;
        }
    }
    Ok(ConsistencyReport { checked, violations })
}

/// Level-set functions for the corridor problem in grid coordinates
/// `(p_x, p_y, theta, v)`.
pub fn corridor_level_sets(params: VehicleParams) -> (impl Fn(&[f64]) -> f64 + Sync, impl Fn(&[f64]) -> f64 + Sync) {
    use crate::dynamics::{downstream_margin_xy, entry_margin, VehicleState};
    let l = move |x: &[f64]| {
        entry_margin(&VehicleState { px: x[0], py: x[1], theta: x[2], v: x[3] }, &params)
    };
    let c = move |x: &[f64]| downstream_margin_xy(x[0], x[1], &params);
    (l, c)
}

/// Pairwise constraint level function over relative states: distance minus
/// required separation.
pub fn pair_constraint(params: VehicleParams) -> impl Fn(&[f64]) -> f64 + Sync {
    move |r: &[f64]| (r[0] * r[0] + r[1] * r[1]).sqrt() - params.separation
}
