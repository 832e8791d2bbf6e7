//! Fixed-step averaged-model EMT simulation: LC-filtered converters against
//! a Thevenin grid or a two-converter islanded network.
//!
//! All balanced RLC dynamics in the stationary frame decouple into two
//! identical real subsystems (one per axis), so the engine factors the
//! trapezoidal update matrices once and steps both axes with them. Topology
//! changes (breakers, faults) rebuild and refactor, which keeps every
//! configuration A-stable regardless of how stiff the fault case is.

use nalgebra::{DMatrix, DVector};

use crate::frames::PlanarVector;

#[derive(Debug, thiserror::Error)]
pub enum PlantError {
    #[error("state became non-finite at t = {t} s")]
    NonFinite { t: f64 },
    #[error("trapezoidal factor is singular (check element values)")]
    Singular,
    #[error("invalid plant parameters: {0}")]
    BadParams(&'static str),
}

/// Trapezoidal integrator for x' = A x + B u with identical dynamics on both
/// stationary-frame axes.
pub struct LinearNetwork {
    m1: DMatrix<f64>,
    m2: DMatrix<f64>,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    tau: f64,
}

impl LinearNetwork {
    pub fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, tau: f64) -> Result<Self, PlantError> {
        let n = a.nrows();
        assert_eq!(a.ncols(), n);
        assert_eq!(b.nrows(), n);
        if !(tau > 0.0) {
            return Err(PlantError::BadParams("tau_sim must be positive"));
        }
        let eye = DMatrix::identity(n, n);
        let lhs = &eye - a * (tau / 2.0);
        let lu = lhs.lu();
        let m1 = lu
            .solve(&(&eye + a * (tau / 2.0)))
            .ok_or(PlantError::Singular)?;
        let m2 = lu.solve(&(b * tau)).ok_or(PlantError::Singular)?;
        Ok(LinearNetwork {
            m1,
            m2,
            x: DVector::zeros(n),
            y: DVector::zeros(n),
            tau,
        })
    }

    /// Swap in new dynamics, keeping the state (breaker events).
    pub fn refactor(&mut self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(), PlantError> {
        let mut next = LinearNetwork::new(a, b, self.tau)?;
        next.x = std::mem::take(&mut self.x);
        next.y = std::mem::take(&mut self.y);
        *self = next;
        Ok(())
    }

    /// Advance one step with inputs averaged over the interval.
    pub fn step(&mut self, u_x: &DVector<f64>, u_y: &DVector<f64>) {
        self.x = &self.m1 * &self.x + &self.m2 * u_x;
        self.y = &self.m1 * &self.y + &self.m2 * u_y;
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// Current drawn by a constant-power load at voltage `v`, per-unit form with
/// p = v^T i. Below the cutoff magnitude the load degrades to the constant
/// impedance matched at the cutoff, so a collapsing bus sheds load instead of
/// demanding unbounded current.
pub fn constant_power_load_current(v: &PlanarVector, p_load: f64, cutoff: f64) -> PlanarVector {
    let n2 = (v.x * v.x + v.y * v.y).max(cutoff * cutoff);
    PlanarVector { x: p_load * v.x / n2, y: p_load * v.y / n2, frame: v.frame }
}

/// Grid inductance and resistance, in pu, from the short-circuit ratio and
/// an X/R ratio: the Thevenin reactance is 1/scr at nominal frequency.
pub fn scr_to_grid_impedance(scr: f64, x_over_r: f64) -> (f64, f64) {
    assert!(scr > 0.0 && x_over_r > 0.0);
    let l_g = 1.0 / scr;
    (l_g, l_g / x_over_r)
}

/// Thevenin source with magnitude, phase, and frequency events.
#[derive(Clone, Copy, Debug)]
pub struct SourceState {
    pub mag: f64,
    pub phase: f64,
    pub omega: f64,
}

impl SourceState {
    fn sample(&self) -> (f64, f64) {
        (self.mag * self.phase.cos(), self.mag * self.phase.sin())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InfiniteBusParams {
    pub l_f: f64,
    pub r_f: f64,
    pub c_f: f64,
    pub l_g: f64,
    pub r_g: f64,
    pub omega_b: f64,
}

/// One converter with an LC filter behind a Thevenin grid branch. States per
/// axis: filter current, capacitor voltage, grid branch current.
pub struct IbPlant {
    net: LinearNetwork,
    pub source: SourceState,
    pub breaker_closed: bool,
    p: InfiniteBusParams,
    tau_sim: f64,
    pub t: f64,
}

const IDX_IF: usize = 0;
const IDX_VC: usize = 1;
const IDX_IG: usize = 2;

impl IbPlant {
    pub fn new(p: InfiniteBusParams, tau_sim: f64) -> Result<Self, PlantError> {
        if !(p.l_f > 0.0 && p.c_f > 0.0 && p.l_g > 0.0 && p.r_f >= 0.0 && p.r_g >= 0.0) {
            return Err(PlantError::BadParams("impedances must be positive"));
        }
        let (a, b) = Self::matrices(&p, true);
        Ok(IbPlant {
            net: LinearNetwork::new(&a, &b, tau_sim)?,
            source: SourceState { mag: 1.0, phase: 0.0, omega: p.omega_b },
            breaker_closed: true,
            p,
            tau_sim,
            t: 0.0,
        })
    }

    fn matrices(p: &InfiniteBusParams, closed: bool) -> (DMatrix<f64>, DMatrix<f64>) {
        let w = p.omega_b;
        let mut a = DMatrix::zeros(3, 3);
        a[(0, 0)] = -p.r_f * w / p.l_f;
        a[(0, 1)] = -w / p.l_f;
        a[(1, 0)] = w / p.c_f;
        let mut b = DMatrix::zeros(3, 2);
        b[(0, 0)] = w / p.l_f;
        if closed {
            a[(1, 2)] = -w / p.c_f;
            a[(2, 1)] = w / p.l_g;
            a[(2, 2)] = -p.r_g * w / p.l_g;
            b[(2, 1)] = -w / p.l_g;
        } else {
            // Open grid breaker: the branch current decays on its own and no
            // longer loads the capacitor.
            a[(2, 2)] = -p.r_g.max(1e-3) * w / p.l_g;
        }
        (a, b)
    }

    pub fn set_breaker(&mut self, closed: bool) -> Result<(), PlantError> {
        if closed != self.breaker_closed {
            self.breaker_closed = closed;
            let (a, b) = Self::matrices(&self.p, closed);
            self.net.refactor(&a, &b)?;
        }
        Ok(())
    }

    pub fn measurements(&self) -> crate::controller::Measurements {
        crate::controller::Measurements {
            i_f: PlanarVector::stationary(self.net.x[IDX_IF], self.net.y[IDX_IF]),
            v_f: PlanarVector::stationary(self.net.x[IDX_VC], self.net.y[IDX_VC]),
            i_g: PlanarVector::stationary(self.net.x[IDX_IG], self.net.y[IDX_IG]),
        }
    }

    pub fn i_f_mag(&self) -> f64 {
        self.net.x[IDX_IF].hypot(self.net.y[IDX_IF])
    }

    /// Advance one simulation step with the switch-node voltage held.
    pub fn substep(&mut self, v_sw: &PlanarVector) {
        let (g0x, g0y) = self.source.sample();
        self.source.phase += self.source.omega * self.tau_sim;
        let (g1x, g1y) = self.source.sample();
        let u_x = DVector::from_column_slice(&[v_sw.x, 0.5 * (g0x + g1x)]);
        let u_y = DVector::from_column_slice(&[v_sw.y, 0.5 * (g0y + g1y)]);
        self.net.step(&u_x, &u_y);
        self.t += self.tau_sim;
    }

    pub fn check_finite(&self) -> Result<(), PlantError> {
        if self.net.is_finite() {
            Ok(())
        } else {
            Err(PlantError::NonFinite { t: self.t })
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TwoBusParams {
    /// Filter elements per converter, grid pu.
    pub l_f: f64,
    pub r_f: f64,
    pub c_f: f64,
    /// Transformer series impedance, grid pu.
    pub l_t: f64,
    pub r_t: f64,
    /// Line series impedance and total shunt capacitance, grid pu.
    pub l_line: f64,
    pub r_line: f64,
    pub c_line: f64,
    /// Resistive loads at the common bus, pu impedance.
    pub r_l1: f64,
    pub r_l2: f64,
    /// Fault resistance when the fault switch closes, pu.
    pub r_fault: f64,
    pub omega_b: f64,
    /// Ratio converter-base current / grid-base current, used by callers to
    /// convert measurements into each converter's own pu system.
    pub base_scale: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TwoBusSwitches {
    pub vsc2: bool,
    pub load1: bool,
    pub load2: bool,
    pub fault: bool,
}

/// Two converters, each behind a transformer and a pi-line, meeting at a
/// common bus that carries two switchable resistive loads, a fault switch,
/// and a constant-power load. States per axis:
/// [i_f1, v_c1, i_t1, v_b1, i_l1, i_f2, v_c2, i_t2, v_b2, i_l2, v_pcc].
pub struct TwoBusPlant {
    net: LinearNetwork,
    pub p: TwoBusParams,
    pub switches: TwoBusSwitches,
    /// Constant-power load at the common bus, grid pu (positive consumes).
    pub p_cpl: f64,
    pub cpl_cutoff: f64,
    /// Current drawn by the constant-power load. A direct algebraic load on
    /// the nearly capacitance-free common bus is numerically (and physically)
    /// ill posed, so the drawn current tracks its target through a first
    /// order lag that stands in for the load electronics' control bandwidth.
    /// The lag acts in a frame rotating at nominal frequency: the phasor spins
    /// freely and only envelope changes are smoothed, so steady-state power
    /// tracking is exact.
    i_cpl: PlanarVector,
    tau_sim: f64,
    pub t: f64,
}

/// Response time of the constant-power load's current regulation, seconds.
const TAU_CPL: f64 = 1e-3;

const TB_IF1: usize = 0;
const TB_VC1: usize = 1;
const TB_IT1: usize = 2;
const TB_VB1: usize = 3;
const TB_IL1: usize = 4;
const TB_IF2: usize = 5;
const TB_VC2: usize = 6;
const TB_IT2: usize = 7;
const TB_VB2: usize = 8;
const TB_IL2: usize = 9;
const TB_VPCC: usize = 10;
const TB_IN_VSW1: usize = 0;
const TB_IN_VSW2: usize = 1;
const TB_IN_CPL: usize = 2;

impl TwoBusPlant {
    pub fn new(p: TwoBusParams, switches: TwoBusSwitches, tau_sim: f64) -> Result<Self, PlantError> {
        let (a, b) = Self::matrices(&p, &switches);
        Ok(TwoBusPlant {
            net: LinearNetwork::new(&a, &b, tau_sim)?,
            p,
            switches,
            p_cpl: 0.0,
            cpl_cutoff: 0.3,
            i_cpl: PlanarVector::stationary(0.0, 0.0),
            tau_sim,
            t: 0.0,
        })
    }

    fn matrices(p: &TwoBusParams, s: &TwoBusSwitches) -> (DMatrix<f64>, DMatrix<f64>) {
        let w = p.omega_b;
        let c_bus = p.c_line / 2.0;
        let c_pcc = p.c_line; // half from each of the two lines
        let mut a = DMatrix::zeros(11, 11);
        let mut b = DMatrix::zeros(11, 3);

        let filter = |i_f: usize, v_c: usize, i_t: usize, v_b: usize, i_l: usize,
                          vsw_in: usize, connected: bool, a: &mut DMatrix<f64>, b: &mut DMatrix<f64>| {
            a[(i_f, i_f)] = -p.r_f * w / p.l_f;
            a[(i_f, v_c)] = -w / p.l_f;
            b[(i_f, vsw_in)] = w / p.l_f;
            a[(v_c, i_f)] = w / p.c_f;
            if connected {
                a[(v_c, i_t)] = -w / p.c_f;
                a[(i_t, v_c)] = w / p.l_t;
                a[(i_t, v_b)] = -w / p.l_t;
                a[(i_t, i_t)] = -p.r_t * w / p.l_t;
                a[(v_b, i_t)] = w / c_bus;
            } else {
                a[(i_t, i_t)] = -p.r_t.max(1e-3) * w / p.l_t;
            }
            a[(v_b, i_l)] = -w / c_bus;
            a[(i_l, v_b)] = w / p.l_line;
            a[(i_l, TB_VPCC)] = -w / p.l_line;
            a[(i_l, i_l)] = -p.r_line * w / p.l_line;
        };
        filter(TB_IF1, TB_VC1, TB_IT1, TB_VB1, TB_IL1, TB_IN_VSW1, true, &mut a, &mut b);
        filter(TB_IF2, TB_VC2, TB_IT2, TB_VB2, TB_IL2, TB_IN_VSW2, s.vsc2, &mut a, &mut b);

        a[(TB_VPCC, TB_IL1)] = w / c_pcc;
        a[(TB_VPCC, TB_IL2)] = w / c_pcc;
        let mut g = 0.0;
        if s.load1 {
            g += 1.0 / p.r_l1;
        }
        if s.load2 {
            g += 1.0 / p.r_l2;
        }
        if s.fault {
            g += 1.0 / p.r_fault;
        }
        a[(TB_VPCC, TB_VPCC)] = -g * w / c_pcc;
        // Constant-power load draws current out of the common bus.
        b[(TB_VPCC, TB_IN_CPL)] = -w / c_pcc;
        (a, b)
    }

    pub fn set_switches(&mut self, switches: TwoBusSwitches) -> Result<(), PlantError> {
        if switches != self.switches {
            self.switches = switches;
            let (a, b) = Self::matrices(&self.p, &switches);
            self.net.refactor(&a, &b)?;
        }
        Ok(())
    }

    /// Measurements for one converter, scaled into converter pu.
    pub fn measurements(&self, vsc: usize) -> crate::controller::Measurements {
        let (i_f, v_c, i_t) = match vsc {
            0 => (TB_IF1, TB_VC1, TB_IT1),
            _ => (TB_IF2, TB_VC2, TB_IT2),
        };
        let k = self.p.base_scale;
        crate::controller::Measurements {
            i_f: PlanarVector::stationary(k * self.net.x[i_f], k * self.net.y[i_f]),
            v_f: PlanarVector::stationary(self.net.x[v_c], self.net.y[v_c]),
            i_g: PlanarVector::stationary(k * self.net.x[i_t], k * self.net.y[i_t]),
        }
    }

    pub fn pcc_voltage(&self) -> PlanarVector {
        PlanarVector::stationary(self.net.x[TB_VPCC], self.net.y[TB_VPCC])
    }

    /// Power delivered by converter `vsc` through its transformer branch, in
    /// grid pu (v_c . i_t).
    pub fn vsc_power(&self, vsc: usize) -> f64 {
        let (v_c, i_t) = match vsc {
            0 => (TB_VC1, TB_IT1),
            _ => (TB_VC2, TB_IT2),
        };
        self.net.x[v_c] * self.net.x[i_t] + self.net.y[v_c] * self.net.y[i_t]
    }

    /// Advance one simulation step; switch-node voltages are in grid pu.
    pub fn substep(&mut self, v_sw1: &PlanarVector, v_sw2: &PlanarVector) -> Result<(), PlantError> {
        let target = constant_power_load_current(&self.pcc_voltage(), self.p_cpl, self.cpl_cutoff);
        let spun = crate::frames::rotate(&self.i_cpl, self.p.omega_b * self.tau_sim);
        let a = self.tau_sim / TAU_CPL;
        self.i_cpl = PlanarVector::stationary(
            spun.x + a * (target.x - spun.x),
            spun.y + a * (target.y - spun.y),
        );
        let u_x = DVector::from_column_slice(&[v_sw1.x, v_sw2.x, self.i_cpl.x]);
        let u_y = DVector::from_column_slice(&[v_sw1.y, v_sw2.y, self.i_cpl.y]);
        self.net.step(&u_x, &u_y);
        self.t += self.tau_sim;
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), PlantError> {
        if self.net.is_finite() {
            Ok(())
        } else {
            Err(PlantError::NonFinite { t: self.t })
        }
    }
}

/// Timed scenario events.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventKind {
    BreakerClose(BreakerId),
    BreakerOpen(BreakerId),
    GridVoltageSet { mag: f64, phase_jump: f64 },
    /// Source frequency in pu of nominal.
    GridFrequencySet(f64),
    FaultApply,
    FaultClear,
    SetpointChange { p_star: f64, q_star: f64 },
    /// Linear constant-power-load ramp from this event's time to `t_end`.
    LoadRamp { p_start: f64, p_end: f64, t_end: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BreakerId {
    Grid,
    Vsc2,
    Load1,
    Load2,
}

/// Hands out each event exactly once, in order, as simulation time passes.
pub struct EventQueue {
    events: Vec<Event>,
    next: usize,
}

impl EventQueue {
    pub fn new(mut events: Vec<Event>) -> Self {
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        EventQueue { events, next: 0 }
    }

    /// All events due at or before `t` that have not been handed out yet.
    pub fn due(&mut self, t: f64) -> &[Event] {
        let start = self.next;
        while self.next < self.events.len() && self.events[self.next].time <= t {
            self.next += 1;
        }
        &self.events[start..self.next]
    }

    /// Current value of the latest load ramp at time `t` (0 before any ramp).
    pub fn load_ramp_value(&self, t: f64) -> f64 {
        let mut val = 0.0;
        for e in &self.events {
            if let EventKind::LoadRamp { p_start, p_end, t_end } = e.kind {
                if t >= e.time {
                    let frac = if t >= t_end {
                        1.0
                    } else {
                        (t - e.time) / (t_end - e.time)
                    };
                    val = p_start + frac * (p_end - p_start);
                }
            }
        }
        val
    }
}
