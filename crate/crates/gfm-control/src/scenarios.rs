//! Canned study scenarios and the fixed-step runner that drives a controller
//! against a plant: grid faults and frequency events on the single-converter
//! bench, the two-converter island timeline, parameter-mismatch and
//! voltage-support sweeps, and the overload-margin search.
//!
//! The runner holds each switch-node command over one control period and
//! applies it one simulation step late, standing in for modulation and
//! computation delay. Metric extraction is a pure function of the logged
//! rows, so re-running it on a saved log reproduces the report.

use std::f64::consts::PI;

use thiserror::Error;

use crate::baselines::{BaselineController, BaselineParams, BaselineVariant};
use crate::config::{Config, ConfigError, SchemeKind};
use crate::constraints::{ConstraintError, ConverterRatings, FeasibleSet};
use crate::controller::{
    ControllerError, DampingParams, DroopParams, GfmController, Measurements,
};
use crate::frames::{power_pu, PlanarVector};
use crate::plant::{
    scr_to_grid_impedance, BreakerId, Event, EventKind, EventQueue, IbPlant, InfiniteBusParams,
    PlantError, SourceState, TwoBusParams, TwoBusPlant, TwoBusSwitches,
};
use crate::projection::{AdmmConfig, ProjectionError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error("scenario setup: {0}")]
    Config(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("no feasible voltage for more than two cycles, tripped at t = {t:.4} s")]
    InfeasibleTrip { t: f64 },
}

impl From<ConfigError> for ScenarioError {
    fn from(e: ConfigError) -> Self {
        ScenarioError::Config(e.to_string())
    }
}

/// One logged sample at the control rate. Columns match the CSV layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub i_f_alpha: f64,
    pub i_f_beta: f64,
    pub i_f_mag: f64,
    pub v_f_alpha: f64,
    pub v_f_beta: f64,
    pub v_f_mag: f64,
    pub theta: f64,
    pub v: f64,
    pub omega_pu: f64,
    pub p_pu: f64,
    pub q_pu: f64,
    pub limiter_active: bool,
    pub feasible: bool,
}

pub const CSV_HEADER: &str = "t,i_f_alpha,i_f_beta,i_f_mag,v_f_alpha,v_f_beta,v_f_mag,theta,V,omega_pu,P_pu,Q_pu,limiter_active,feasible";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.i_f_alpha,
            self.i_f_beta,
            self.i_f_mag,
            self.v_f_alpha,
            self.v_f_beta,
            self.v_f_mag,
            self.theta,
            self.v,
            self.omega_pu,
            self.p_pu,
            self.q_pu,
            self.limiter_active as u8,
            self.feasible as u8,
        )
    }

    pub fn from_csv_line(line: &str) -> Option<LogRow> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 14 {
            return None;
        }
        let num = |i: usize| parts[i].trim().parse::<f64>().ok();
        let flag = |i: usize| match parts[i].trim() {
            "1" | "true" => Some(true),
            "0" | "false" => Some(false),
            _ => None,
        };
        Some(LogRow {
            t: num(0)?,
            i_f_alpha: num(1)?,
            i_f_beta: num(2)?,
            i_f_mag: num(3)?,
            v_f_alpha: num(4)?,
            v_f_beta: num(5)?,
            v_f_mag: num(6)?,
            theta: num(7)?,
            v: num(8)?,
            omega_pu: num(9)?,
            p_pu: num(10)?,
            q_pu: num(11)?,
            limiter_active: flag(12)?,
            feasible: flag(13)?,
        })
    }
}

/// Scalar summary of one run. Settle times are `None` when the series never
/// stays inside the band through the end of the event window.
#[derive(Clone, Copy, Debug)]
pub struct Metrics {
    pub peak_current: f64,
    pub steady_current: f64,
    pub settle_time_current: Option<f64>,
    pub settle_time_voltage: Option<f64>,
    pub freq_mean_during_event: f64,
    pub freq_error_vs_droop: f64,
    pub limit_violation_integral: f64,
    pub lost_sync: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum Scheme {
    ConstraintAware(AdmmConfig),
    Baseline(BaselineParams),
}

/// Thevenin link parameters of the single-converter bench.
#[derive(Clone, Copy, Debug)]
pub struct GridLink {
    pub scr: f64,
    pub x_over_r: f64,
    pub source_mag: f64,
    pub source_phase: f64,
    pub breaker_closed: bool,
}

#[derive(Clone, Debug)]
pub struct IbScenario {
    pub name: String,
    pub ratings: ConverterRatings,
    pub droop: DroopParams,
    pub damping: DampingParams,
    pub scheme: Scheme,
    pub grid: GridLink,
    pub events: Vec<Event>,
    /// Interval the summary metrics describe (fault-on span, sag span, ...).
    pub event_window: (f64, f64),
    pub t_end: f64,
    /// Scale factors on the filter values the controller believes in,
    /// relative to the plant. 1.0 means matched.
    pub l_ctrl_scale: f64,
    pub r_ctrl_scale: f64,
}

#[derive(Clone, Debug)]
pub struct TwoBusScenario {
    pub name: String,
    pub ratings: ConverterRatings,
    pub droop: DroopParams,
    pub damping: DampingParams,
    pub scheme: Scheme,
    pub plant: TwoBusParams,
    pub switches0: TwoBusSwitches,
    pub cpl_cutoff: f64,
    pub events: Vec<Event>,
    pub event_window: (f64, f64),
    pub t_end: f64,
}

#[derive(Clone, Debug)]
pub enum Scenario {
    InfiniteBus(IbScenario),
    TwoBus(TwoBusScenario),
}

/// Names `Scenario::canned` accepts.
pub const SIMULATE_SCENARIOS: &[&str] = &[
    "ib_fault",
    "ib_robustness",
    "ib_freq_drop",
    "comparison_timeline",
    "two_bus",
];

/// Names the sweep driver accepts.
pub const SWEEP_SCENARIOS: &[&str] = &[
    "ib_robustness",
    "voltage_support_sweep",
    "overload_margin",
];

fn scheme_from(cfg: &Config) -> Scheme {
    match cfg.scheme.kind.baseline_variant() {
        None => Scheme::ConstraintAware(cfg.admm()),
        Some(v) => Scheme::Baseline(cfg.baseline_params(v)),
    }
}

impl Scenario {
    pub fn name(&self) -> &str {
        match self {
            Scenario::InfiniteBus(s) => &s.name,
            Scenario::TwoBus(s) => &s.name,
        }
    }

    /// The preset a scenario is normally run on when none is given.
    pub fn default_preset(name: &str) -> &'static str {
        match name {
            "two_bus" | "overload_margin" => "twobus_4160V",
            _ => "vsc_208V_2kW",
        }
    }

    /// Solver settings a scenario pins down unless overridden, applied
    /// before any command-line overrides so those still win.
    pub fn solver_defaults(name: &str, cfg: &mut Config) {
        if name == "ib_robustness" {
            // The mismatch study runs the cheap solver budget on purpose.
            cfg.controller.rho = 1.0;
            cfg.controller.n_it = 10;
        }
    }

    pub fn canned(name: &str, cfg: &Config) -> Result<Scenario, ScenarioError> {
        let ratings = cfg.ratings()?;
        let droop = cfg.droop_params();
        let damping = cfg.damping_params();
        let scheme = scheme_from(cfg);
        let grid = GridLink {
            scr: cfg.grid.scr,
            x_over_r: cfg.grid.x_over_r,
            source_mag: 1.0,
            source_phase: 0.0,
            breaker_closed: true,
        };
        match name {
            "ib_fault" | "ib_robustness" => Ok(Scenario::InfiniteBus(IbScenario {
                name: name.into(),
                ratings,
                droop,
                damping,
                scheme,
                grid,
                events: vec![
                    Event { time: 0.4, kind: EventKind::FaultApply },
                    Event { time: 0.9, kind: EventKind::FaultClear },
                ],
                event_window: (0.4, 0.9),
                t_end: if name == "ib_fault" { 1.5 } else { 1.0 },
                l_ctrl_scale: 1.0,
                r_ctrl_scale: 1.0,
            })),
            "ib_freq_drop" => Ok(Scenario::InfiniteBus(IbScenario {
                name: name.into(),
                ratings,
                droop,
                damping,
                scheme,
                grid,
                events: vec![
                    Event { time: 0.4, kind: EventKind::GridFrequencySet(0.95) },
                    Event { time: 1.1, kind: EventKind::GridFrequencySet(1.0) },
                ],
                event_window: (0.4, 1.1),
                t_end: 1.3,
                l_ctrl_scale: 1.0,
                r_ctrl_scale: 1.0,
            })),
            "comparison_timeline" => {
                // Start disconnected and half a turn out of phase, at zero
                // power setpoint; the timeline exercises synchronization,
                // loading, a frequency excursion, and a bolted fault.
                let mut droop = droop;
                droop.p_star = 0.0;
                droop.q_star = 0.0;
                let t_clear = 1.2 + 10.0 / 60.0;
                Ok(Scenario::InfiniteBus(IbScenario {
                    name: name.into(),
                    ratings,
                    droop,
                    damping,
                    scheme,
                    grid: GridLink {
                        source_phase: PI,
                        breaker_closed: false,
                        ..grid
                    },
                    events: vec![
                        Event { time: 0.1, kind: EventKind::BreakerClose(BreakerId::Grid) },
                        Event { time: 0.6, kind: EventKind::SetpointChange { p_star: 0.5, q_star: 0.0 } },
                        Event { time: 0.7, kind: EventKind::GridFrequencySet(0.95) },
                        Event { time: 0.9, kind: EventKind::GridFrequencySet(1.0) },
                        Event { time: 1.2, kind: EventKind::FaultApply },
                        Event { time: t_clear, kind: EventKind::FaultClear },
                    ],
                    event_window: (1.2, t_clear),
                    t_end: 1.8,
                    l_ctrl_scale: 1.0,
                    r_ctrl_scale: 1.0,
                }))
            }
            "two_bus" => {
                let plant = cfg.two_bus_params()?;
                let tb = cfg
                    .two_bus
                    .as_ref()
                    .ok_or_else(|| ScenarioError::Config("two_bus needs the [two_bus] section".into()))?;
                let p_cpl_pu = tb.p_cpl_end / tb.s_grid;
                Ok(Scenario::TwoBus(TwoBusScenario {
                    name: name.into(),
                    ratings,
                    droop,
                    damping,
                    scheme,
                    plant,
                    switches0: TwoBusSwitches::default(),
                    cpl_cutoff: 0.3,
                    events: vec![
                        Event { time: 0.2, kind: EventKind::BreakerClose(BreakerId::Vsc2) },
                        Event { time: 0.3, kind: EventKind::BreakerClose(BreakerId::Load1) },
                        Event { time: 0.5, kind: EventKind::BreakerClose(BreakerId::Load2) },
                        Event { time: 0.5, kind: EventKind::SetpointChange { p_star: 0.55, q_star: 0.0 } },
                        Event { time: 0.6, kind: EventKind::FaultApply },
                        Event { time: 0.76, kind: EventKind::FaultClear },
                        Event {
                            time: 1.0,
                            kind: EventKind::LoadRamp { p_start: 0.0, p_end: p_cpl_pu, t_end: 1.4 },
                        },
                    ],
                    event_window: (0.6, 0.76),
                    t_end: 1.8,
                }))
            }
            other => Err(ScenarioError::Unknown(other.into())),
        }
    }
}

/// Uniform view over the constraint-aware controller and the baselines.
pub enum AnyController {
    Ca(GfmController),
    Base(BaselineController),
}

/// What one control step produced, however it was computed.
#[derive(Clone, Copy, Debug)]
pub struct CtrlOut {
    pub v_sw: PlanarVector,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
    pub p_lp: f64,
    pub q_lp: f64,
    pub active: bool,
    pub feasible: bool,
    pub v_hat: f64,
    pub set: Option<FeasibleSet>,
}

impl AnyController {
    pub fn build(
        scheme: &Scheme,
        droop: DroopParams,
        damping: DampingParams,
        ratings: &ConverterRatings,
        l_scale: f64,
        r_scale: f64,
    ) -> Result<Self, ScenarioError> {
        match scheme {
            Scheme::ConstraintAware(adm) => {
                let mut believed = *ratings;
                believed.l_f = ratings.l_f * l_scale;
                // A zero-resistance controller model is represented by a
                // vanishing value; the disc geometry needs r > 0.
                believed.r_f = (ratings.r_f * r_scale).max(ratings.r_f * 1e-12);
                Ok(AnyController::Ca(GfmController::new(droop, damping, believed, Some(*adm))?))
            }
            Scheme::Baseline(bp) => {
                let c_f = ratings.c_f.unwrap_or(0.0);
                Ok(AnyController::Base(BaselineController::new(
                    droop,
                    *bp,
                    ratings.l_f,
                    c_f,
                    ratings.v_max,
                )?))
            }
        }
    }

    pub fn step(&mut self, meas: &Measurements) -> Result<CtrlOut, ControllerError> {
        match self {
            AnyController::Ca(c) => {
                let (v_sw, d) = c.step(meas)?;
                Ok(CtrlOut {
                    v_sw,
                    theta: d.theta,
                    v: d.v,
                    omega: d.omega,
                    p_lp: d.p_lp,
                    q_lp: d.q_lp,
                    active: d.active,
                    feasible: d.feasible,
                    v_hat: d.v_hat,
                    set: d.set,
                })
            }
            AnyController::Base(b) => {
                let (v_sw, d) = b.step(meas);
                Ok(CtrlOut {
                    v_sw,
                    theta: d.theta,
                    v: d.v,
                    omega: d.omega,
                    p_lp: d.p_lp,
                    q_lp: d.q_lp,
                    active: d.active,
                    feasible: true,
                    v_hat: d.v,
                    set: None,
                })
            }
        }
    }

    /// Output used while the projection reports an empty set: keep the last
    /// command and freeze the announced operating point.
    fn hold_output(&self, held: PlanarVector) -> CtrlOut {
        let s = match self {
            AnyController::Ca(c) => &c.state,
            AnyController::Base(b) => &b.state,
        };
        CtrlOut {
            v_sw: held,
            theta: s.theta,
            v: s.v,
            omega: 0.0,
            p_lp: s.p_lp,
            q_lp: s.q_lp,
            active: true,
            feasible: false,
            v_hat: s.v,
            set: None,
        }
    }

    pub fn set_setpoints(&mut self, p_star: f64, q_star: f64) {
        let d = match self {
            AnyController::Ca(c) => &mut c.droop,
            AnyController::Base(b) => &mut b.droop,
        };
        d.p_star = p_star;
        d.q_star = q_star;
    }

    pub fn droop(&self) -> &DroopParams {
        match self {
            AnyController::Ca(c) => &c.droop,
            AnyController::Base(b) => &b.droop,
        }
    }
}

pub struct RunOutput {
    /// One row per control period.
    pub rows: Vec<LogRow>,
    /// One row per simulation step; empty unless full logging was requested.
    pub full_rows: Vec<LogRow>,
    pub metrics: Metrics,
    pub aux: Option<TwoBusAux>,
}

pub struct TwoBusAux {
    pub rows_vsc2: Vec<LogRow>,
    pub metrics_vsc2: Metrics,
    /// Common-bus voltage magnitude, one sample per control period.
    pub v_pcc: Vec<f64>,
}

pub fn run_scenario(sc: &Scenario, tau_sim: f64, log_full: bool) -> Result<RunOutput, ScenarioError> {
    match sc {
        Scenario::InfiniteBus(s) => run_ib(s, tau_sim, log_full, &mut |_, _| {}),
        Scenario::TwoBus(s) => run_two_bus(s, tau_sim, log_full),
    }
}

fn substeps_per_period(tau_ctr: f64, tau_sim: f64) -> Result<usize, ScenarioError> {
    let ratio = tau_ctr / tau_sim;
    let n = ratio.round();
    if !(n >= 1.0) || (ratio - n).abs() > 1e-6 * ratio {
        return Err(ScenarioError::Config(format!(
            "control period {tau_ctr} s is not an integer multiple of the simulation step {tau_sim} s"
        )));
    }
    Ok(n as usize)
}

fn make_row(t: f64, meas: &Measurements, out: &CtrlOut, omega_0: f64) -> LogRow {
    let (p, q) = power_pu(meas.v_f.x, meas.v_f.y, meas.i_f.x, meas.i_f.y);
    LogRow {
        t,
        i_f_alpha: meas.i_f.x,
        i_f_beta: meas.i_f.y,
        i_f_mag: meas.i_f.norm(),
        v_f_alpha: meas.v_f.x,
        v_f_beta: meas.v_f.y,
        v_f_mag: meas.v_f.norm(),
        theta: out.theta,
        v: out.v,
        omega_pu: out.omega / omega_0,
        p_pu: p,
        q_pu: q,
        limiter_active: out.active,
        feasible: out.feasible,
    }
}

fn is_empty_set(e: &ControllerError) -> bool {
    matches!(
        e,
        ControllerError::Constraint(ConstraintError::EmptySet(_))
            | ControllerError::Projection(ProjectionError::EmptySet | ProjectionError::ZeroVector)
    )
}

/// Step the controller; on an empty feasible set hold the last command, and
/// trip once that has gone on for more than two fundamental cycles.
fn step_or_hold(
    ctrl: &mut AnyController,
    meas: &Measurements,
    held: PlanarVector,
    t: f64,
    f_0: f64,
    infeasible_since: &mut Option<f64>,
) -> Result<CtrlOut, ScenarioError> {
    let out = match ctrl.step(meas) {
        Ok(o) => o,
        Err(e) if is_empty_set(&e) => ctrl.hold_output(held),
        Err(e) => return Err(e.into()),
    };
    if out.feasible {
        *infeasible_since = None;
    } else {
        let since = *infeasible_since.get_or_insert(t);
        if t - since >= 2.0 / f_0 {
            return Err(ScenarioError::InfeasibleTrip { t });
        }
    }
    Ok(out)
}

/// Effective end of the last disturbance: ramps end at their own horizon.
fn post_event_time(events: &[Event], fallback: f64) -> f64 {
    events
        .iter()
        .map(|e| match e.kind {
            EventKind::LoadRamp { t_end, .. } => t_end,
            _ => e.time,
        })
        .fold(fallback, f64::max)
}

fn apply_ib_event(
    ev: &Event,
    plant: &mut IbPlant,
    ctrl: &mut AnyController,
    saved_mag: &mut f64,
    omega_0: f64,
) -> Result<(), ScenarioError> {
    match ev.kind {
        EventKind::BreakerClose(BreakerId::Grid) => plant.set_breaker(true)?,
        EventKind::BreakerOpen(BreakerId::Grid) => plant.set_breaker(false)?,
        EventKind::GridVoltageSet { mag, phase_jump } => {
            plant.source.mag = mag;
            plant.source.phase += phase_jump;
            if mag > 0.0 {
                *saved_mag = mag;
            }
        }
        EventKind::GridFrequencySet(pu) => plant.source.omega = pu * omega_0,
        EventKind::FaultApply => {
            *saved_mag = plant.source.mag;
            plant.source.mag = 0.0;
        }
        EventKind::FaultClear => plant.source.mag = *saved_mag,
        EventKind::SetpointChange { p_star, q_star } => ctrl.set_setpoints(p_star, q_star),
        EventKind::LoadRamp { .. } => {
            return Err(ScenarioError::Config(
                "constant-power-load ramps only exist in the two-bus network".into(),
            ));
        }
        EventKind::BreakerClose(_) | EventKind::BreakerOpen(_) => {
            return Err(ScenarioError::Config(
                "no such breaker on the single-converter bench".into(),
            ));
        }
    }
    Ok(())
}

fn run_ib(
    sc: &IbScenario,
    tau_sim: f64,
    log_full: bool,
    observe: &mut dyn FnMut(f64, &CtrlOut),
) -> Result<RunOutput, ScenarioError> {
    let c_f = sc.ratings.c_f.ok_or_else(|| {
        ScenarioError::Config("single-converter runs need the filter capacitance".into())
    })?;
    let (l_g, r_g) = scr_to_grid_impedance(sc.grid.scr, sc.grid.x_over_r);
    let plant_p = InfiniteBusParams {
        l_f: sc.ratings.l_f,
        r_f: sc.ratings.r_f,
        c_f,
        l_g,
        r_g,
        omega_b: sc.droop.omega_0,
    };
    let mut plant = IbPlant::new(plant_p, tau_sim)?;
    plant.source = SourceState {
        mag: sc.grid.source_mag,
        phase: sc.grid.source_phase,
        omega: sc.droop.omega_0,
    };
    plant.set_breaker(sc.grid.breaker_closed)?;
    let mut ctrl = AnyController::build(
        &sc.scheme,
        sc.droop,
        sc.damping,
        &sc.ratings,
        sc.l_ctrl_scale,
        sc.r_ctrl_scale,
    )?;

    let tau_ctr = sc.droop.tau_ctr;
    let n_sub = substeps_per_period(tau_ctr, tau_sim)?;
    let steps = (sc.t_end / tau_ctr).round() as usize;
    let f_0 = sc.droop.omega_0 / (2.0 * PI);
    let mut queue = EventQueue::new(sc.events.clone());
    let mut rows = Vec::with_capacity(steps);
    let mut full_rows = Vec::new();
    let mut held = PlanarVector::stationary(sc.droop.v_star, 0.0);
    let mut saved_mag = plant.source.mag;
    let mut infeasible_since = None;

    for k in 0..steps {
        let t = k as f64 * tau_ctr;
        let due: Vec<Event> = queue.due(t).to_vec();
        for ev in &due {
            apply_ib_event(ev, &mut plant, &mut ctrl, &mut saved_mag, sc.droop.omega_0)?;
        }
        let meas = plant.measurements();
        let out = step_or_hold(&mut ctrl, &meas, held, t, f_0, &mut infeasible_since)?;
        observe(t, &out);
        rows.push(make_row(t, &meas, &out, sc.droop.omega_0));
        let cmd = if out.feasible { out.v_sw } else { held };
        for s in 0..n_sub {
            // The command computed from this period's measurement reaches the
            // plant one simulation step into the period.
            let v = if s == 0 { held } else { cmd };
            plant.substep(&v);
            if log_full {
                full_rows.push(make_row(plant.t, &plant.measurements(), &out, sc.droop.omega_0));
            }
        }
        held = cmd;
        plant.check_finite()?;
    }

    let t_post = post_event_time(&sc.events, sc.event_window.1);
    let metrics = extract_metrics(&rows, sc.event_window, ctrl.droop(), sc.ratings.i_max, t_post);
    Ok(RunOutput { rows, full_rows, metrics, aux: None })
}

fn apply_tb_event(
    ev: &Event,
    plant: &mut TwoBusPlant,
    sw: &mut TwoBusSwitches,
    c1: &mut AnyController,
    c2: &mut AnyController,
) -> Result<(), ScenarioError> {
    match ev.kind {
        EventKind::BreakerClose(id) | EventKind::BreakerOpen(id) => {
            let closed = matches!(ev.kind, EventKind::BreakerClose(_));
            match id {
                BreakerId::Vsc2 => sw.vsc2 = closed,
                BreakerId::Load1 => sw.load1 = closed,
                BreakerId::Load2 => sw.load2 = closed,
                BreakerId::Grid => {
                    return Err(ScenarioError::Config(
                        "the two-bus island has no external grid breaker".into(),
                    ));
                }
            }
            plant.set_switches(*sw)?;
        }
        EventKind::FaultApply | EventKind::FaultClear => {
            sw.fault = matches!(ev.kind, EventKind::FaultApply);
            plant.set_switches(*sw)?;
        }
        EventKind::SetpointChange { p_star, q_star } => {
            c1.set_setpoints(p_star, q_star);
            c2.set_setpoints(p_star, q_star);
        }
        // Sampled from the queue every control period.
        EventKind::LoadRamp { .. } => {}
        EventKind::GridVoltageSet { .. } | EventKind::GridFrequencySet(_) => {
            return Err(ScenarioError::Config(
                "no thevenin source in the two-bus island".into(),
            ));
        }
    }
    Ok(())
}

fn run_two_bus(sc: &TwoBusScenario, tau_sim: f64, log_full: bool) -> Result<RunOutput, ScenarioError> {
    let mut plant = TwoBusPlant::new(sc.plant, sc.switches0, tau_sim)?;
    plant.cpl_cutoff = sc.cpl_cutoff;
    let mut c1 = AnyController::build(&sc.scheme, sc.droop, sc.damping, &sc.ratings, 1.0, 1.0)?;
    let mut c2 = AnyController::build(&sc.scheme, sc.droop, sc.damping, &sc.ratings, 1.0, 1.0)?;

    let tau_ctr = sc.droop.tau_ctr;
    let n_sub = substeps_per_period(tau_ctr, tau_sim)?;
    let steps = (sc.t_end / tau_ctr).round() as usize;
    let f_0 = sc.droop.omega_0 / (2.0 * PI);
    let mut queue = EventQueue::new(sc.events.clone());
    let mut rows1 = Vec::with_capacity(steps);
    let mut rows2 = Vec::with_capacity(steps);
    let mut v_pcc = Vec::with_capacity(steps);
    let mut full_rows = Vec::new();
    let mut held1 = PlanarVector::stationary(sc.droop.v_star, 0.0);
    let mut held2 = held1;
    let (mut inf1, mut inf2) = (None, None);
    let mut sw = sc.switches0;

    for k in 0..steps {
        let t = k as f64 * tau_ctr;
        let due: Vec<Event> = queue.due(t).to_vec();
        for ev in &due {
            apply_tb_event(ev, &mut plant, &mut sw, &mut c1, &mut c2)?;
        }
        plant.p_cpl = queue.load_ramp_value(t);
        let meas1 = plant.measurements(0);
        let meas2 = plant.measurements(1);
        let out1 = step_or_hold(&mut c1, &meas1, held1, t, f_0, &mut inf1)?;
        let out2 = step_or_hold(&mut c2, &meas2, held2, t, f_0, &mut inf2)?;
        rows1.push(make_row(t, &meas1, &out1, sc.droop.omega_0));
        rows2.push(make_row(t, &meas2, &out2, sc.droop.omega_0));
        v_pcc.push(plant.pcc_voltage().norm());
        let cmd1 = if out1.feasible { out1.v_sw } else { held1 };
        let cmd2 = if out2.feasible { out2.v_sw } else { held2 };
        for s in 0..n_sub {
            let (v1, v2) = if s == 0 { (held1, held2) } else { (cmd1, cmd2) };
            plant.substep(&v1, &v2)?;
            if log_full {
                full_rows.push(make_row(plant.t, &plant.measurements(0), &out1, sc.droop.omega_0));
            }
        }
        held1 = cmd1;
        held2 = cmd2;
        plant.check_finite()?;
    }

    let t_post = post_event_time(&sc.events, sc.event_window.1);
    let metrics = extract_metrics(&rows1, sc.event_window, c1.droop(), sc.ratings.i_max, t_post);
    let metrics_vsc2 = extract_metrics(&rows2, sc.event_window, c2.droop(), sc.ratings.i_max, t_post);
    Ok(RunOutput {
        rows: rows1,
        full_rows,
        metrics,
        aux: Some(TwoBusAux { rows_vsc2: rows2, metrics_vsc2, v_pcc }),
    })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Difference b - a wrapped to (-pi, pi], robust to stored-angle wrapping.
fn angle_diff(a: f64, b: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut d = (b - a).rem_euclid(two_pi);
    if d > PI {
        d -= two_pi;
    }
    d
}

/// Rows with t0 <= t < t1. Half-open on the right so a sample taken right at
/// an event boundary (events apply before measurement) stays outside the
/// window of the preceding interval.
fn window_slice(rows: &[LogRow], t0: f64, t1: f64) -> &[LogRow] {
    let lo = rows.partition_point(|r| r.t < t0);
    let hi = rows.partition_point(|r| r.t < t1);
    &rows[lo.min(hi)..hi]
}

/// Per-sample frequency in pu of nominal: centered difference of the phase
/// angle, then a boxcar average over `window` seconds.
pub fn estimate_frequency(theta: &[f64], tau: f64, omega_0: f64, window: f64) -> Vec<f64> {
    let n = theta.len();
    if n < 2 {
        return vec![1.0; n];
    }
    let mut raw = vec![0.0; n];
    for k in 0..n {
        let (a, b) = if k == 0 {
            (0, 1)
        } else if k == n - 1 {
            (n - 2, n - 1)
        } else {
            (k - 1, k + 1)
        };
        // Per-step angle increments stay far below half a turn, so summing
        // wrapped one-step differences unwraps the span exactly.
        let mut span = 0.0;
        for j in a..b {
            span += angle_diff(theta[j], theta[j + 1]);
        }
        raw[k] = span / ((b - a) as f64 * tau * omega_0);
    }
    let half = ((window / tau / 2.0).round() as usize).max(1);
    boxcar_mean(&raw, half)
}

/// Centered moving average with windows clamped at the slice edges.
fn boxcar_mean(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for k in 0..n {
        prefix[k + 1] = prefix[k] + x[k];
    }
    (0..n)
        .map(|k| {
            let lo = k.saturating_sub(half);
            let hi = (k + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// First time the series enters the band around `target` and stays inside
/// through the end, measured from the start of the slice. `None` when it
/// never settles.
pub fn settling_time(t: &[f64], x: &[f64], target: f64, band: f64) -> Option<f64> {
    assert!(band > 0.0 && t.len() == x.len());
    if t.is_empty() {
        return None;
    }
    let tol = band * target.abs();
    let mut last_violation = None;
    for (k, &v) in x.iter().enumerate() {
        if (v - target).abs() > tol {
            last_violation = Some(k);
        }
    }
    match last_violation {
        None => Some(0.0),
        Some(k) if k + 1 < t.len() => Some(t[k + 1] - t[0]),
        Some(_) => None,
    }
}

fn longest_true_run(it: impl Iterator<Item = bool>) -> usize {
    let (mut best, mut run) = (0usize, 0usize);
    for b in it {
        if b {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

/// Frequency excursion beyond 0.15 pu sustained for more than two cycles.
fn freq_unsynced(rows: &[LogRow], droop: &DroopParams) -> bool {
    if rows.len() < 3 {
        return false;
    }
    let f_0 = droop.omega_0 / (2.0 * PI);
    let theta: Vec<f64> = rows.iter().map(|r| r.theta).collect();
    let freq = estimate_frequency(&theta, droop.tau_ctr, droop.omega_0, 1.0 / f_0);
    let run = longest_true_run(freq.iter().map(|f| (f - 1.0).abs() > 0.15));
    run as f64 * droop.tau_ctr > 2.0 / f_0
}

/// Loss of synchronism: a sustained frequency excursion anywhere, or a power
/// error above half the setpoint sustained for more than ten cycles after
/// the last disturbance has ended.
pub fn lost_sync_detected(rows: &[LogRow], droop: &DroopParams, t_post: f64) -> bool {
    if freq_unsynced(rows, droop) {
        return true;
    }
    if droop.p_star.abs() > 1e-9 {
        let f_0 = droop.omega_0 / (2.0 * PI);
        let post = &rows[rows.partition_point(|r| r.t < t_post)..];
        let band = 0.5 * droop.p_star.abs();
        let run = longest_true_run(post.iter().map(|r| (r.p_pu - droop.p_star).abs() > band));
        if run as f64 * droop.tau_ctr > 10.0 / f_0 {
            return true;
        }
    }
    false
}

/// Sustained current-envelope ripple over the last five cycles of the event
/// window, the signature of a marginally unstable constraint loop.
pub fn oscillation_detected(rows: &[LogRow], window: (f64, f64), f_0: f64) -> bool {
    let tail = window_slice(rows, window.1 - 5.0 / f_0, window.1);
    if tail.len() < 2 {
        return false;
    }
    let hi = tail.iter().map(|r| r.i_f_mag).fold(f64::MIN, f64::max);
    let lo = tail.iter().map(|r| r.i_f_mag).fold(f64::MAX, f64::min);
    hi - lo > 0.1
}

/// Pure summary of a logged run; everything comes from the rows.
pub fn extract_metrics(
    rows: &[LogRow],
    window: (f64, f64),
    droop: &DroopParams,
    i_max: f64,
    t_post: f64,
) -> Metrics {
    let f_0 = droop.omega_0 / (2.0 * PI);
    let tau = droop.tau_ctr;
    let win = window_slice(rows, window.0, window.1);
    let tail = window_slice(rows, window.1 - 5.0 / f_0, window.1);
    let peak = win.iter().map(|r| r.i_f_mag).fold(0.0, f64::max);
    let steady = mean(tail.iter().map(|r| r.i_f_mag));
    let steady_v = mean(tail.iter().map(|r| r.v_f_mag));

    // Settling is judged on the cycle-averaged magnitude: the instantaneous
    // norm of a post-fault waveform beats at the fundamental while the dc
    // offset decays with the grid L/R, which says nothing about how fast the
    // controller reached its new operating level. Peaks and violation
    // integrals stay raw.
    let t_series: Vec<f64> = win.iter().map(|r| r.t).collect();
    let half = (1.0 / (2.0 * f_0 * tau)).round() as usize;
    let i_series = boxcar_mean(&win.iter().map(|r| r.i_f_mag).collect::<Vec<_>>(), half);
    let v_series = boxcar_mean(&win.iter().map(|r| r.v_f_mag).collect::<Vec<_>>(), half);
    let settle_i = if t_series.is_empty() {
        None
    } else {
        settling_time(&t_series, &i_series, steady, 0.05)
    };
    let settle_v = if t_series.is_empty() {
        None
    } else {
        settling_time(&t_series, &v_series, steady_v, 0.05)
    };

    // Frequency is estimated from the windowed angle series alone so the
    // boxcar smoother cannot reach across an event boundary into whatever
    // transient follows. The tail of the window is a suffix of it.
    let theta: Vec<f64> = win.iter().map(|r| r.theta).collect();
    let freq = estimate_frequency(&theta, tau, droop.omega_0, 1.0 / f_0);
    let n_tail = tail.len().min(freq.len());
    let freq_mean = mean(freq[freq.len() - n_tail..].iter().copied());
    let p_mean = mean(tail.iter().map(|r| r.p_pu));
    let droop_freq = 1.0 + droop.m_p * (droop.p_star - p_mean);
    let freq_error = (freq_mean - droop_freq).abs() / droop_freq.abs().max(1e-12);

    let violation = rows
        .iter()
        .map(|r| (r.i_f_mag - i_max).max(0.0) * tau)
        .sum();

    Metrics {
        peak_current: peak,
        steady_current: steady,
        settle_time_current: settle_i,
        settle_time_voltage: settle_v,
        freq_mean_during_event: freq_mean,
        freq_error_vs_droop: freq_error,
        limit_violation_integral: violation,
        lost_sync: lost_sync_detected(rows, droop, t_post),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RobustnessRow {
    pub l_ratio: f64,
    pub r_ratio: f64,
    pub peak_current: f64,
    pub steady_current: f64,
    pub oscillation: bool,
}

/// Fault response across a grid of controller-model filter errors. One run
/// per grid point, fanned out across threads.
pub fn robustness_sweep(
    base: &IbScenario,
    l_ratios: &[f64],
    r_ratios: &[f64],
    tau_sim: f64,
) -> Result<Vec<RobustnessRow>, ScenarioError> {
    let mut points = Vec::new();
    for &l in l_ratios {
        for &r in r_ratios {
            points.push((l, r));
        }
    }
    let f_0 = base.droop.omega_0 / (2.0 * PI);
    std::thread::scope(|s| {
        let handles: Vec<_> = points
            .iter()
            .map(|&(l, r)| {
                s.spawn(move || -> Result<RobustnessRow, ScenarioError> {
                    let mut sc = base.clone();
                    sc.l_ctrl_scale = l;
                    sc.r_ctrl_scale = r;
                    let out = run_ib(&sc, tau_sim, false, &mut |_, _| {})?;
                    Ok(RobustnessRow {
                        l_ratio: l,
                        r_ratio: r,
                        peak_current: out.metrics.peak_current,
                        steady_current: out.metrics.steady_current,
                        oscillation: oscillation_detected(&out.rows, sc.event_window, f_0),
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

#[derive(Clone, Copy, Debug)]
pub struct VoltageSupportRow {
    pub x_over_r: f64,
    /// Mean in-sag voltage under the constraint-aware controller.
    pub v_constraint_aware: f64,
    /// Virtual impedance with its X/R matched to the grid.
    pub v_vi_matched: f64,
    /// Purely resistive virtual impedance.
    pub v_vi_flat: f64,
}

fn support_run(base: &IbScenario, x_over_r: f64, scheme: Scheme, tau_sim: f64) -> Result<f64, ScenarioError> {
    let mut sc = base.clone();
    sc.grid.x_over_r = x_over_r;
    sc.scheme = scheme;
    let out = run_ib(&sc, tau_sim, false, &mut |_, _| {})?;
    let f_0 = sc.droop.omega_0 / (2.0 * PI);
    let tail = window_slice(&out.rows, sc.event_window.1 - 5.0 / f_0, sc.event_window.1);
    Ok(mean(tail.iter().map(|r| r.v_f_mag)))
}

/// Retained voltage while the grid source sags to 0.2 pu, swept over the
/// grid X/R ratio, comparing the constraint-aware controller against virtual
/// impedance with matched and with flat X/R.
pub fn voltage_support_sweep(
    cfg: &Config,
    x_over_r: &[f64],
    tau_sim: f64,
) -> Result<Vec<VoltageSupportRow>, ScenarioError> {
    let base = IbScenario {
        name: "voltage_support".into(),
        ratings: cfg.ratings()?,
        droop: cfg.droop_params(),
        damping: cfg.damping_params(),
        scheme: Scheme::ConstraintAware(cfg.admm()),
        grid: GridLink {
            scr: cfg.grid.scr,
            x_over_r: cfg.grid.x_over_r,
            source_mag: 1.0,
            source_phase: 0.0,
            breaker_closed: true,
        },
        events: vec![
            Event { time: 0.4, kind: EventKind::GridVoltageSet { mag: 0.2, phase_jump: 0.0 } },
            Event { time: 1.0, kind: EventKind::GridVoltageSet { mag: 1.0, phase_jump: 0.0 } },
        ],
        event_window: (0.4, 1.0),
        t_end: 1.1,
        l_ctrl_scale: 1.0,
        r_ctrl_scale: 1.0,
    };
    let vvi = cfg.baseline_params(BaselineVariant::VariableVi);
    std::thread::scope(|s| {
        let handles: Vec<_> = x_over_r
            .iter()
            .map(|&x| {
                let base = &base;
                s.spawn(move || -> Result<VoltageSupportRow, ScenarioError> {
                    let ca = support_run(base, x, base.scheme, tau_sim)?;
                    let mut matched = vvi;
                    matched.rho_xr = x;
                    matched.rho_xr_transient = x;
                    let v_matched = support_run(base, x, Scheme::Baseline(matched), tau_sim)?;
                    let mut flat = vvi;
                    flat.rho_xr = 0.0;
                    flat.rho_xr_transient = 0.0;
                    let v_flat = support_run(base, x, Scheme::Baseline(flat), tau_sim)?;
                    Ok(VoltageSupportRow {
                        x_over_r: x,
                        v_constraint_aware: ca,
                        v_vi_matched: v_matched,
                        v_vi_flat: v_flat,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

#[derive(Clone, Copy, Debug)]
pub struct MarginProbe {
    pub p_cpl_w: f64,
    pub total_load_w: f64,
    pub sustained: bool,
}

#[derive(Clone, Debug)]
pub struct MarginResult {
    /// Largest total load (switched + constant-power) the island carried
    /// through the full timeline.
    pub max_total_load_w: f64,
    pub probes: Vec<MarginProbe>,
}

/// Survival test for one overload probe. Power-error detection is skipped on
/// purpose: a heavy but healthy island runs far from the droop setpoint by
/// design. Collapse shows up as a slipping frequency or a depressed bus.
fn margin_sustained(out: &RunOutput, droop: &DroopParams) -> bool {
    let aux = match &out.aux {
        Some(a) => a,
        None => return false,
    };
    if freq_unsynced(&out.rows, droop) || freq_unsynced(&aux.rows_vsc2, droop) {
        return false;
    }
    let f_0 = droop.omega_0 / (2.0 * PI);
    let n_tail = ((5.0 / f_0) / droop.tau_ctr).round() as usize;
    let tail = &aux.v_pcc[aux.v_pcc.len().saturating_sub(n_tail)..];
    mean(tail.iter().copied()) >= 0.7
}

/// Largest constant-power load the two-bus island sustains on top of its
/// switched loads, found by bisection on a fixed wattage grid.
pub fn overload_margin(cfg: &Config, tau_sim: f64) -> Result<MarginResult, ScenarioError> {
    let tb = cfg
        .two_bus
        .as_ref()
        .ok_or_else(|| ScenarioError::Config("overload margin needs the [two_bus] section".into()))?;
    let fixed = tb.p_load1 + tb.p_load2;
    let res = tb.margin_resolution;
    if !(res > 0.0) {
        return Err(ScenarioError::Config("margin resolution must be positive".into()));
    }
    let droop = cfg.droop_params();
    let mut probes = Vec::new();
    let probe = |k: usize, probes: &mut Vec<MarginProbe>| -> Result<bool, ScenarioError> {
        let p = k as f64 * res;
        let mut c = cfg.clone();
        c.two_bus.as_mut().expect("checked above").p_cpl_end = p;
        let sc = Scenario::canned("two_bus", &c)?;
        let sustained = match run_scenario(&sc, tau_sim, false) {
            Ok(out) => margin_sustained(&out, &droop),
            Err(ScenarioError::Plant(_)) | Err(ScenarioError::InfeasibleTrip { .. }) => false,
            Err(e) => return Err(e),
        };
        probes.push(MarginProbe { p_cpl_w: p, total_load_w: fixed + p, sustained });
        Ok(sustained)
    };

    if !probe(0, &mut probes)? {
        return Ok(MarginResult { max_total_load_w: 0.0, probes });
    }
    let mut lo = 0usize;
    let mut hi = ((1.5e6 / res).ceil() as usize).max(1);
    while probe(hi, &mut probes)? {
        lo = hi;
        hi *= 2;
        if hi > 2048 {
            return Err(ScenarioError::Config(
                "overload margin search never found a collapsing load".into(),
            ));
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if probe(mid, &mut probes)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MarginResult { max_total_load_w: fixed + lo as f64 * res, probes })
}

/// Size the virtual-impedance gain so the steady current during a bolted
/// fault at the converter terminal lands exactly on the current limit.
///
/// With the terminal shorted the measured powers vanish, the droop voltage
/// sits at its setpoint, the transient branch has washed out, and the
/// current obeys ||i|| ||z_f + k (||i|| - i_thr) (1 + j rho)|| = V at nominal
/// frequency. Both the per-gain current and the gain itself are monotone, so
/// two nested bisections solve the stated condition without guessing the
/// closed form of the cited tuning rule.
pub fn size_variable_vi_gain(cfg: &Config) -> Result<f64, ScenarioError> {
    let ratings = cfg.ratings()?;
    let droop = cfg.droop_params();
    let (i_max, r_f, x_f) = (ratings.i_max, ratings.r_f, ratings.l_f);
    let v = droop.v_star + droop.m_q * droop.q_star;
    let (i_thr, rho) = (cfg.baseline.i_thr, cfg.baseline.rho_xr);
    if i_thr >= i_max {
        return Err(ScenarioError::Config(
            "virtual-impedance sizing: activation threshold at or above the current limit".into(),
        ));
    }
    // ||i|| for a given gain; the left side of the phasor equation grows
    // monotonically in ||i||.
    let steady_current = |k: f64| -> f64 {
        let volts = |i: f64| {
            let g = k * (i - i_thr).max(0.0);
            i * ((r_f + g).powi(2) + (x_f + rho * g).powi(2)).sqrt()
        };
        let (mut lo, mut hi) = (0.0, v / x_f.hypot(r_f) + i_thr);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if volts(mid) < v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while steady_current(hi) > i_max {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(ScenarioError::Config(
                "virtual-impedance sizing: no gain reaches the current limit".into(),
            ));
        }
    }
    if steady_current(lo) < i_max {
        return Err(ScenarioError::Config(
            "virtual-impedance sizing: the filter alone already limits the fault".into(),
        ));
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if steady_current(mid) > i_max {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One recorded projection problem: the constraint set a controller step
/// built, and the droop magnitude that formed the candidate.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionInstance {
    pub set: FeasibleSet,
    pub v_hat: f64,
}

/// Replay the bolted-fault study with the constraint-aware controller and
/// collect every in-fault step where the projection actually moved the
/// candidate.
pub fn record_fault_snapshots(
    cfg: &Config,
    min_n: usize,
    tau_sim: f64,
) -> Result<Vec<ProjectionInstance>, ScenarioError> {
    let mut c = cfg.clone();
    c.scheme.kind = SchemeKind::ConstraintAware;
    let sc = match Scenario::canned("ib_fault", &c)? {
        Scenario::InfiniteBus(s) => s,
        Scenario::TwoBus(_) => unreachable!(),
    };
    let (w0, w1) = sc.event_window;
    let mut snaps = Vec::new();
    run_ib(&sc, tau_sim, false, &mut |t, out: &CtrlOut| {
        if t >= w0 && t < w1 && out.active {
            if let Some(set) = out.set {
                snaps.push(ProjectionInstance { set, v_hat: out.v_hat });
            }
        }
    })?;
    if snaps.len() < min_n {
        return Err(ScenarioError::Config(format!(
            "only {} active projection steps recorded, need at least {min_n}",
            snaps.len()
        )));
    }
    Ok(snaps)
}
