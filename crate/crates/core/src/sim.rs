//! Closed-loop multi-vehicle episodes.
//!
//! Each step runs the same pipeline on a synchronous state snapshot:
//! priority refresh over active vehicles, per-vehicle reference control from
//! the guidance mode and target-TTR schedule, the downstream guard, the
//! scenario's safety filter, then one RK4 step for every vehicle. Entries
//! are detected post-integration; arrived vehicles leave the priority order
//! and all pairwise constraints. Everything is deterministic given the
//! scenario seed.

use crate::dynamics::{entry_margin, pair_distance, Control, VehicleParams, VehicleState, Wind};
use crate::grid::GridError;
use crate::guidance::{
    GuardAction, GuidanceError, PriorityOrder, SeparationBranch, TtrGuidance,
};
use crate::reachability::TtrField;
use crate::safety::{
    FilterError, FilterMode, FilterParams, FilterStage, FilterVehicle, SafetyFilter,
};
use crate::grid::GridField;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("field set mismatch: {0}")]
    FieldMismatch(String),
    #[error("scenario sampling exhausted its rejection budget ({0} attempts)")]
    SamplingBudget(usize),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("bad trajectory file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Strategic guidance mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Greedy time-optimal control: every vehicle minimizes its own TTR.
    TtrMin,
    /// TTR-separation guidance toward the target-TTR schedule.
    TtrSep,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 2] = [GuidanceMode::TtrMin, GuidanceMode::TtrSep];

    pub fn name(&self) -> &'static str {
        match self {
            GuidanceMode::TtrMin => "ttr_min",
            GuidanceMode::TtrSep => "ttr_sep",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ttr_min" | "min" => Ok(GuidanceMode::TtrMin),
            "ttr_sep" | "sep" => Ok(GuidanceMode::TtrSep),
            other => Err(format!("unknown guidance mode {other:?} (expected ttr_min|ttr_sep)")),
        }
    }
}

/// Precomputed fields a simulation consumes.
#[derive(Debug, Clone)]
pub struct FieldSet {
    /// Minimum time-to-reach field (4-d, `+inf` outside the tube).
    pub ttr: TtrField,
    /// Reach-avoid value function snapshots (optional at simulation time).
    pub reach: Option<GridField>,
    /// Pairwise safety value function (5-d).
    pub safety_value: GridField,
    /// Wind the vehicle fields were solved under.
    pub wind: Wind,
}

impl FieldSet {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.ttr.spec().dim() != 4 {
            return Err(SimError::FieldMismatch(format!(
                "time-to-reach field must be 4-d, got {}",
                self.ttr.spec().dim()
            )));
        }
        if self.safety_value.spec().dim() != 5 {
            return Err(SimError::FieldMismatch(format!(
                "pairwise value function must be 5-d, got {}",
                self.safety_value.spec().dim()
            )));
        }
        if let Some(w) = &self.reach {
            if w.spec() != self.ttr.spec() {
                return Err(SimError::FieldMismatch(
                    "reach-avoid value function and TTR field are on different grids".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One episode definition. The paired batch design shares `initial_states`,
/// `wind`, and `seed` across method combinations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub n: usize,
    pub initial_states: Vec<VehicleState>,
    pub wind: Wind,
    pub guidance: GuidanceMode,
    pub filter: FilterMode,
    pub delta_t: f64,
    pub seed: u64,
    pub t_max: f64,
}

/// Scenario sampling geometry: an annulus sector upstream of the corridor
/// entry. Invented plumbing, configurable so other distributions can be
/// swapped in.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub radius_min: f64,
    pub radius_max: f64,
    /// Sector of position angles (radians, measured from the +x axis).
    pub angle_min: f64,
    pub angle_max: f64,
    /// Extra spacing above the separation distance required at t = 0.
    pub spacing_margin: f64,
    pub rejection_budget: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            radius_min: 2000.0,
            radius_max: 5000.0,
            angle_min: std::f64::consts::FRAC_PI_2,
            angle_max: 3.0 * std::f64::consts::FRAC_PI_2,
            spacing_margin: 200.0,
            rejection_budget: 10_000,
        }
    }
}

/// Per-episode knobs that are not part of the scenario identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    /// Deadband (s) around the target TTR for the separation branch switch.
    pub deadband: f64,
    /// Downstream-guard rollout length in control steps.
    pub guard_steps: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self { deadband: 0.5, guard_steps: 10 }
    }
}

/// One logged row: the state a vehicle stepped from at `time` and the
/// filtered control applied over `[time, time + dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub id: usize,
    pub state: VehicleState,
    pub control: Control,
    pub stage: FilterStage,
    /// False only on the terminal row written at a vehicle's arrival time.
    pub active: bool,
    pub guard_fired: bool,
    pub slack: f64,
    pub qp_time_ns: u64,
    pub filter_time_ns: u64,
    pub min_pair_dist: f64,
}

/// Complete episode log.
#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub scenario: Scenario,
    pub dt: f64,
    /// Static priority order (vehicle ids, highest priority first).
    pub priority: Vec<usize>,
    /// Interpolated initial TTR per vehicle id.
    pub initial_ttrs: Vec<f64>,
    pub records: Vec<StepRecord>,
    /// Arrival time per vehicle id; `+inf` for non-arrivals.
    pub arrivals: Vec<f64>,
    pub episode_end: f64,
}

impl TrajectoryLog {
    /// Number of conflict samples (vehicle active at a sampled time with some
    /// other active vehicle closer than the separation distance).
    pub fn violation_count(&self, separation: f64) -> usize {
        let mut count = 0usize;
        for group in self.records_by_time() {
            for (k, r) in group.iter().enumerate() {
                if !r.active || r.time == 0.0 {
                    continue;
                }
                let conflict = group.iter().enumerate().any(|(j, o)| {
                    j != k && o.active && pair_distance(&r.state, &o.state) < separation
                });
                if conflict {
                    count += 1;
                }
            }
        }
        count
    }

    /// Records grouped by identical timestamps, in time order.
    pub fn records_by_time(&self) -> Vec<&[StepRecord]> {
        let mut groups = Vec::new();
        let mut start = 0usize;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].time != self.records[start].time {
                groups.push(&self.records[start..i]);
                start = i;
            }
        }
        groups
    }
}

/// Episode engine: fields, guidance, and filter assembled once and shared
/// across runs (read-only, safe to use from parallel batch workers).
pub struct SimContext {
    params: VehicleParams,
    settings: SimSettings,
    guidance: TtrGuidance,
    filter: SafetyFilter,
}

impl SimContext {
    pub fn new(
        params: VehicleParams,
        filter_params: FilterParams,
        fields: &FieldSet,
        settings: SimSettings,
    ) -> Result<Self, SimError> {
        fields.validate()?;
        let guidance = TtrGuidance::new(params, fields.wind, fields.ttr.clone())?;
        let filter = SafetyFilter::new(params, filter_params, fields.safety_value.clone())?;
        Ok(Self { params, settings, guidance, filter })
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn guidance(&self) -> &TtrGuidance {
        &self.guidance
    }

    pub fn filter(&self) -> &SafetyFilter {
        &self.filter
    }

    pub fn ttr_at(&self, x: &VehicleState) -> f64 {
        self.guidance.ttr_at(x)
    }

    /// Rejection-samples a feasible scenario: positions uniform over the
    /// annulus sector, headings uniform, speed nominal; accepted when every
    /// vehicle starts inside the grid with finite TTR and all pairwise
    /// distances clear the separation margin.
    pub fn sample_scenario(
        &self,
        seed: u64,
        n: usize,
        sampler: &SamplerConfig,
        guidance: GuidanceMode,
        filter: FilterMode,
        delta_t: f64,
        t_max: f64,
    ) -> Result<Scenario, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = self.guidance.field().spec();
        let (px_ax, py_ax) = (spec.axis(0), spec.axis(1));
        let min_dist = self.params.separation + sampler.spacing_margin;
        let mut states: Vec<VehicleState> = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while states.len() < n {
            if attempts >= sampler.rejection_budget {
                return Err(SimError::SamplingBudget(attempts));
            }
            attempts += 1;
            // area-uniform radius over the annulus
            let u: f64 = rng.gen();
            let r = (sampler.radius_min.powi(2) + u * (sampler.radius_max.powi(2) - sampler.radius_min.powi(2))).sqrt();
            let ang = rng.gen_range(sampler.angle_min..sampler.angle_max);
            let (px, py) = (r * ang.cos(), r * ang.sin());
            if px < px_ax.lo || px > px_ax.hi || py < py_ax.lo || py > py_ax.hi {
                continue;
            }
            let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let cand = VehicleState::new(px, py, theta, self.params.v_nom);
            if !self.ttr_at(&cand).is_finite() {
                continue;
            }
            if states.iter().any(|s| pair_distance(s, &cand) < min_dist) {
                continue;
            }
            states.push(cand);
        }
        Ok(Scenario {
            n,
            initial_states: states,
            wind: self.guidance.wind(),
            guidance,
            filter,
            delta_t,
            seed,
            t_max,
        })
    }

    /// Runs one episode.
    pub fn run(&self, scenario: &Scenario) -> Result<TrajectoryLog, SimError> {
        if scenario.initial_states.len() != scenario.n {
            return Err(SimError::FieldMismatch("scenario vehicle count mismatch".into()));
        }
        if (scenario.wind.speed - self.guidance.wind().speed).abs() > 1e-9
            || (scenario.wind.speed > 0.0
                && (scenario.wind.phi - self.guidance.wind().phi).abs() > 1e-9)
        {
            return Err(SimError::FieldMismatch(
                "scenario wind differs from the wind the fields were solved under".into(),
            ));
        }
        let n = scenario.n;
        let p = &self.params;
        let dt = p.dt;

        let initial_ttrs: Vec<f64> = scenario.initial_states.iter().map(|x| self.ttr_at(x)).collect();
        let mut order = PriorityOrder::assign(&initial_ttrs)?;
        let static_priority: Vec<usize> = order.ids().to_vec();

        let mut states = scenario.initial_states.clone();
        let mut active = vec![true; n];
        let mut arrivals = vec![f64::INFINITY; n];
        let mut branches: Vec<Option<SeparationBranch>> = vec![None; n];
        let mut records: Vec<StepRecord> = Vec::new();

        let max_steps = (scenario.t_max / dt).round() as usize;
        let mut final_time = 0.0;
        for k in 0..=max_steps {
            let t = k as f64 * dt;
            final_time = t;
            let ids: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
            if ids.is_empty() {
                break;
            }
            let last_step = k == max_steps;

            // reference controls (and per-vehicle guard) on the shared snapshot
            let leader_ttr = order.leader().map(|id| self.ttr_at(&states[id]));
            let mut refs: Vec<Control> = Vec::with_capacity(ids.len());
            let mut guard_flags: Vec<bool> = Vec::with_capacity(ids.len());
            let mut estimates: Vec<Control> = Vec::with_capacity(ids.len());
            for &id in &ids {
                let x = &states[id];
                let finite = self.ttr_at(x).is_finite();
                let (reference, guard_fired) = if !finite {
                    // outside the tube (a filter pushed it there): hold course
                    // toward nominal speed until the episode ends
                    branches[id] = None;
                    (self.hold_control(x), false)
                } else {
                    let raw = match scenario.guidance {
                        GuidanceMode::TtrMin => self.guidance.optimal_control(x)?,
                        GuidanceMode::TtrSep => {
                            let rank = order.rank(id).expect("active vehicle is ranked");
                            let target =
                                crate::guidance::target_ttr(rank, leader_ttr.expect("leader exists"), scenario.delta_t);
                            let (u, branch) =
                                self.guidance
                                    .separation_control(x, target, self.settings.deadband, branches[id])?;
                            branches[id] = Some(branch);
                            u
                        }
                    };
                    let (guarded, action) = self.guidance.downstream_guard(x, raw, self.settings.guard_steps)?;
                    (guarded, action == GuardAction::Replaced)
                };
                refs.push(reference);
                guard_flags.push(guard_fired);
                estimates.push(if finite {
                    self.guidance.optimal_control(x).unwrap_or_else(|_| self.hold_control(x))
                } else {
                    self.hold_control(x)
                });
            }

            let vehicles: Vec<FilterVehicle> = ids
                .iter()
                .zip(&refs)
                .map(|(&id, &reference)| FilterVehicle { id, state: states[id], reference })
                .collect();
            let outcome = if last_step {
                // terminal snapshot: no step follows, log zero controls
                None
            } else {
                Some(self.filter.apply(scenario.filter, &vehicles, &estimates, &order)?)
            };

            // log the snapshot
            for (slot, &id) in ids.iter().enumerate() {
                let min_pair = ids
                    .iter()
                    .filter(|&&j| j != id)
                    .map(|&j| pair_distance(&states[id], &states[j]))
                    .fold(f64::INFINITY, f64::min);
                let (control, stage, slack, qp_ns, total_ns) = match &outcome {
                    Some(o) => {
                        let v = &o.per_vehicle[slot];
                        (v.control, v.stage, v.slack, v.qp_time_ns, v.total_time_ns)
                    }
                    None => (Control::default(), FilterStage::Passthrough, 0.0, 0, 0),
                };
                records.push(StepRecord {
                    time: t,
                    id,
                    state: states[id],
                    control,
                    stage,
                    active: true,
                    guard_fired: guard_flags[slot],
                    slack,
                    qp_time_ns: qp_ns,
                    filter_time_ns: total_ns,
                    min_pair_dist: min_pair,
                });
            }
            if last_step {
                break;
            }
            let outcome = outcome.expect("non-terminal step filtered");

            // synchronous integration
            for (slot, &id) in ids.iter().enumerate() {
                states[id] = crate::dynamics::step(
                    &states[id],
                    outcome.per_vehicle[slot].control,
                    scenario.wind,
                    p,
                    dt,
                );
            }

            // entry detection (post-integration)
            let t_next = (k + 1) as f64 * dt;
            for &id in &ids {
                if entry_margin(&states[id], p) >= 0.0 {
                    active[id] = false;
                    arrivals[id] = t_next;
                    order.remove(id);
                    let min_pair = (0..n)
                        .filter(|&j| j != id && active[j])
                        .map(|j| pair_distance(&states[id], &states[j]))
                        .fold(f64::INFINITY, f64::min);
                    records.push(StepRecord {
                        time: t_next,
                        id,
                        state: states[id],
                        control: Control::default(),
                        stage: FilterStage::Passthrough,
                        active: false,
                        guard_fired: false,
                        slack: 0.0,
                        qp_time_ns: 0,
                        filter_time_ns: 0,
                        min_pair_dist: min_pair,
                    });
                }
            }
        }

        // stable ordering: records were pushed per step, arrivals interleave
        // at their timestamps; sort by (time, id) for the by-time grouping
        records.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap().then(a.id.cmp(&b.id)));

        Ok(TrajectoryLog {
            scenario: scenario.clone(),
            dt,
            priority: static_priority,
            initial_ttrs,
            records,
            arrivals,
            episode_end: final_time,
        })
    }

    fn hold_control(&self, x: &VehicleState) -> Control {
        let p = &self.params;
        let accel = ((p.v_nom - x.v) / p.dt).clamp(p.a_min, p.a_max);
        Control::new(0.0, accel)
    }

    /// Runs the method matrix over a seed list with one shared scenario per
    /// seed (paired design). Episodes execute in parallel; per-run failures
    /// are recorded without aborting the batch.
    pub fn run_batch(
        &self,
        seeds: &[u64],
        combos: &[(GuidanceMode, FilterMode)],
        n: usize,
        sampler: &SamplerConfig,
        delta_t: f64,
        t_max: f64,
    ) -> Vec<BatchRun> {
        let base: Vec<(u64, Result<Scenario, String>)> = seeds
            .iter()
            .map(|&seed| {
                let s = self
                    .sample_scenario(seed, n, sampler, GuidanceMode::TtrMin, FilterMode::None, delta_t, t_max)
                    .map_err(|e| e.to_string());
                (seed, s)
            })
            .collect();

        let mut jobs: Vec<(usize, usize)> = Vec::new();
        for si in 0..base.len() {
            for ci in 0..combos.len() {
                jobs.push((si, ci));
            }
        }
        let mut results: Vec<BatchRun> = jobs
            .into_par_iter()
            .map(|(si, ci)| {
                let (seed, scenario) = &base[si];
                let (guidance, filter) = combos[ci];
                let result = match scenario {
                    Ok(s) => {
                        let mut s = s.clone();
                        s.guidance = guidance;
                        s.filter = filter;
                        self.run(&s).map_err(|e| e.to_string())
                    }
                    Err(e) => Err(e.clone()),
                };
                BatchRun { seed: *seed, seed_index: si, guidance, filter, result }
            })
            .collect();
        results.sort_by_key(|r| (r.seed_index, r.guidance.name(), r.filter.name()));
        results
    }
}

/// One run of a batch: scenario seed plus the method combination.
#[derive(Debug)]
pub struct BatchRun {
    pub seed: u64,
    pub seed_index: usize,
    pub guidance: GuidanceMode,
    pub filter: FilterMode,
    pub result: Result<TrajectoryLog, String>,
}

// ---------------------------------------------------------------------------
// trajectory CSV + summary JSON
// ---------------------------------------------------------------------------

const CSV_HEADER: &str = "t,id,p_x,p_y,theta,v,omega,a,stage,active,guard,slack,qp_time_ns,filter_time_ns,min_pair_dist";

/// Run summary serialized next to the trajectory CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub dt: f64,
    pub priority: Vec<usize>,
    pub initial_ttrs: Vec<f64>,
    pub arrivals: Vec<f64>,
    pub episode_end: f64,
    pub violations: usize,
}

impl TrajectoryLog {
    pub fn summary(&self, separation: f64) -> RunSummary {
        RunSummary {
            scenario: self.scenario.clone(),
            dt: self.dt,
            priority: self.priority.clone(),
            initial_ttrs: self.initial_ttrs.clone(),
            arrivals: self.arrivals.clone(),
            episode_end: self.episode_end,
            violations: self.violation_count(separation),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 96 + 128);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.time,
                r.id,
                r.state.px,
                r.state.py,
                r.state.theta,
                r.state.v,
                r.control.omega,
                r.control.accel,
                r.stage.name(),
                r.active as u8,
                r.guard_fired as u8,
                r.slack,
                r.qp_time_ns,
                r.filter_time_ns,
                r.min_pair_dist
            );
        }
        out
    }

    pub fn write_files<P: AsRef<Path>>(&self, csv_path: P, summary_path: P, separation: f64) -> Result<(), SimError> {
        std::fs::write(csv_path, self.to_csv())?;
        let summary = serde_json::to_string_pretty(&self.summary(separation))
            .map_err(|e| SimError::Format(e.to_string()))?;
        std::fs::write(summary_path, summary)?;
        Ok(())
    }

    /// Reconstructs a log from its serialized form. Float fields round-trip
    /// exactly (shortest-representation formatting), so metrics recomputed
    /// from disk match the in-memory values bit for bit.
    pub fn read_files<P: AsRef<Path>>(csv_path: P, summary_path: P) -> Result<Self, SimError> {
        let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(summary_path)?)
            .map_err(|e| SimError::Format(e.to_string()))?;
        let csv = std::fs::read_to_string(csv_path)?;
        let mut lines = csv.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => return Err(SimError::Format(format!("bad csv header: {other:?}"))),
        }
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 15 {
                return Err(SimError::Format(format!("line {}: expected 15 fields", lineno + 2)));
            }
            let num = |s: &str| -> Result<f64, SimError> {
                s.parse().map_err(|_| SimError::Format(format!("line {}: bad number {s:?}", lineno + 2)))
            };
            records.push(StepRecord {
                time: num(f[0])?,
                id: f[1].parse().map_err(|_| SimError::Format(format!("line {}: bad id", lineno + 2)))?,
                state: VehicleState {
                    px: num(f[2])?,
                    py: num(f[3])?,
                    theta: num(f[4])?,
                    v: num(f[5])?,
                },
                control: Control::new(num(f[6])?, num(f[7])?),
                stage: f[8].parse().map_err(SimError::Format)?,
                active: f[9] == "1",
                guard_fired: f[10] == "1",
                slack: num(f[11])?,
                qp_time_ns: f[12].parse().map_err(|_| SimError::Format(format!("line {}: bad ns", lineno + 2)))?,
                filter_time_ns: f[13]
                    .parse()
                    .map_err(|_| SimError::Format(format!("line {}: bad ns", lineno + 2)))?,
                min_pair_dist: num(f[14])?,
            });
        }
        Ok(TrajectoryLog {
            scenario: summary.scenario,
            dt: summary.dt,
            priority: summary.priority,
            initial_ttrs: summary.initial_ttrs,
            records,
            arrivals: summary.arrivals,
            episode_end: summary.episode_end,
        })
    }
}
