//! Discrete-time grid-forming droop controller with the disc-projection
//! current limiter in the reference path.
//!
//! Each control period the droop law produces a candidate angle and
//! magnitude; the candidate is projected onto the feasible voltage set built
//! from the latest measurements, and the droop integrators advance from the
//! projected values. Saturation therefore cannot wind up the state: the
//! integrated angle and magnitude are always the constrained ones.

use serde::{Deserialize, Serialize};

use crate::constraints::{
    build_feasible_set_with, discretized_filter_matrices, ConstraintError, ConverterRatings,
    FeasibleSet, FilterDiscretization,
};
use crate::frames::{power_pu, Frame, PlanarVector};
use crate::projection::{admm_project, recover_polar, AdmmConfig, ProjectionError};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DroopParams {
    /// Frequency droop slope, pu frequency per pu power.
    pub m_p: f64,
    /// Voltage droop slope, pu voltage per pu reactive power.
    pub m_q: f64,
    /// Nominal frequency in rad/s.
    pub omega_0: f64,
    pub v_star: f64,
    pub p_star: f64,
    pub q_star: f64,
    /// Voltage-magnitude filter time constant.
    pub tau_v: f64,
    /// Power measurement low-pass time constant.
    pub tau_lp: f64,
    /// Control period.
    pub tau_ctr: f64,
    /// Fundamental period, the long prediction horizon.
    pub tau_cyc: f64,
}

impl DroopParams {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let ok = self.m_p > 0.0
            && self.m_q > 0.0
            && self.omega_0 > 0.0
            && self.tau_v > 0.0
            && self.tau_lp > 0.0
            && self.tau_ctr > 0.0
            && self.tau_cyc > self.tau_ctr;
        if ok {
            Ok(())
        } else {
            Err(ControllerError::BadParams)
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DampingParams {
    /// Virtual damping resistance, pu. Zero disables the damper.
    pub k_rc: f64,
    /// High-pass corner of the damping branch, rad/s.
    pub omega_rc: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ControllerError {
    #[error("droop parameters out of range")]
    BadParams,
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

/// Integrator and filter state of one droop controller.
#[derive(Clone, Copy, Debug)]
pub struct ControllerState {
    /// Unwrapped voltage angle, rad.
    pub theta: f64,
    /// Voltage magnitude, pu.
    pub v: f64,
    pub p_lp: f64,
    pub q_lp: f64,
    /// Internal state of the damping high-pass, stationary frame.
    pub damp_state: PlanarVector,
    /// Frequency applied on the last step, rad/s. Diagnostic only.
    pub omega_out: f64,
}

impl ControllerState {
    pub fn at(theta: f64, v: f64) -> Self {
        ControllerState {
            theta,
            v,
            p_lp: 0.0,
            q_lp: 0.0,
            damp_state: PlanarVector::zero(Frame::Stationary),
            omega_out: 0.0,
        }
    }
}

/// Stationary-frame measurement snapshot consumed by one control step.
#[derive(Clone, Copy, Debug)]
pub struct Measurements {
    pub i_f: PlanarVector,
    pub v_f: PlanarVector,
    pub i_g: PlanarVector,
}

/// Per-step controller diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepDiagnostics {
    /// The projection moved the candidate.
    pub active: bool,
    /// False when a diagnostic-length solve still shows a large residual.
    pub feasible: bool,
    pub residual: f64,
    /// Applied frequency, rad/s.
    pub omega: f64,
    pub v: f64,
    pub theta: f64,
    pub p_lp: f64,
    pub q_lp: f64,
    /// Unconstrained droop magnitude, before projection.
    pub v_hat: f64,
    /// Constraint set the step projected onto, when limiting ran.
    pub set: Option<FeasibleSet>,
}

pub fn droop_references(p_lp: f64, q_lp: f64, p: &DroopParams) -> (f64, f64) {
    let omega_dr = p.omega_0 * (1.0 + p.m_p * (p.p_star - p_lp));
    let v_dr = p.v_star + p.m_q * (p.q_star - q_lp);
    (omega_dr, v_dr)
}

/// One step of the exact discrete first-order low-pass.
pub fn lowpass_update(prev: f64, input: f64, tau_lp: f64, tau_ctr: f64) -> f64 {
    let a = (-tau_ctr / tau_lp).exp();
    a * prev + (1.0 - a) * input
}

/// Droop candidate: integrate the reference frequency, filter the magnitude.
pub fn candidate_voltage(
    state: &ControllerState,
    omega_dr: f64,
    v_dr: f64,
    p: &DroopParams,
) -> (f64, f64) {
    let theta_hat = state.theta + p.tau_ctr * omega_dr;
    let a_v = (-p.tau_ctr / p.tau_v).exp();
    let v_hat = a_v * state.v + (1.0 - a_v) * v_dr;
    (theta_hat, v_hat)
}

/// Shared droop front end: update the power filters from the stationary-frame
/// measurements and form the candidate (theta_hat, v_hat). Returns the
/// reference frequency as well for diagnostics.
pub(crate) fn droop_pipeline(
    droop: &DroopParams,
    state: &mut ControllerState,
    v_f: &PlanarVector,
    i_f: &PlanarVector,
) -> (f64, f64, f64) {
    let (p, q) = power_pu(v_f.x, v_f.y, i_f.x, i_f.y);
    state.p_lp = lowpass_update(state.p_lp, p, droop.tau_lp, droop.tau_ctr);
    state.q_lp = lowpass_update(state.q_lp, q, droop.tau_lp, droop.tau_ctr);
    let (omega_dr, v_dr) = droop_references(state.p_lp, state.q_lp, droop);
    let (theta_hat, v_hat) = candidate_voltage(state, omega_dr, v_dr, droop);
    (theta_hat, v_hat, omega_dr)
}

/// Bilinear discretization of the damping high-pass k_rc s / (s + omega_rc),
/// no prewarping. Input is the capacitor branch current i_f - i_g; the output
/// voltage opposes changes in that current and leaves the fundamental alone.
pub fn rc_damping(
    i_c: &PlanarVector,
    state: &PlanarVector,
    p: &DampingParams,
    tau_ctr: f64,
) -> (PlanarVector, PlanarVector) {
    let b0 = 2.0 * p.k_rc / (2.0 + p.omega_rc * tau_ctr);
    let a1 = (2.0 - p.omega_rc * tau_ctr) / (2.0 + p.omega_rc * tau_ctr);
    let sx = i_c.x + a1 * state.x;
    let sy = i_c.y + a1 * state.y;
    let v_ad = PlanarVector { x: b0 * (sx - state.x), y: b0 * (sy - state.y), frame: i_c.frame };
    (v_ad, PlanarVector { x: sx, y: sy, frame: i_c.frame })
}

/// The constraint-aware controller: droop core, damping branch, and the
/// projection configured for a fixed converter rating.
#[derive(Clone, Debug)]
pub struct GfmController {
    pub droop: DroopParams,
    pub damping: DampingParams,
    pub ratings: ConverterRatings,
    /// None runs the plain droop law with no limiter (reference behavior).
    pub solver: Option<AdmmConfig>,
    pub state: ControllerState,
    disc_step: FilterDiscretization,
    disc_cycle: FilterDiscretization,
}

impl GfmController {
    /// Build the controller and precompute the two prediction discretizations
    /// at nominal frequency.
    pub fn new(
        droop: DroopParams,
        damping: DampingParams,
        ratings: ConverterRatings,
        solver: Option<AdmmConfig>,
    ) -> Result<Self, ControllerError> {
        droop.validate()?;
        ratings.validate()?;
        if let Some(cfg) = &solver {
            cfg.validate()?;
        }
        let disc_step = discretized_filter_matrices(&ratings, droop.omega_0, droop.tau_ctr)?;
        let disc_cycle = discretized_filter_matrices(&ratings, droop.omega_0, droop.tau_cyc)?;
        Ok(GfmController {
            droop,
            damping,
            ratings,
            solver,
            state: ControllerState::at(0.0, droop.v_star),
            disc_step,
            disc_cycle,
        })
    }

    pub fn reset(&mut self, theta0: f64, v0: f64) {
        self.state = ControllerState::at(theta0, v0);
    }

    /// One control period: filter powers, form the droop candidate, project
    /// it onto the feasible set, and emit the switch-node voltage reference
    /// in the stationary frame.
    pub fn step(
        &mut self,
        meas: &Measurements,
    ) -> Result<(PlanarVector, StepDiagnostics), ControllerError> {
        debug_assert_eq!(meas.i_f.frame, Frame::Stationary);
        let i_c = PlanarVector {
            x: meas.i_f.x - meas.i_g.x,
            y: meas.i_f.y - meas.i_g.y,
            frame: Frame::Stationary,
        };
        let (v_ad, damp_next) = rc_damping(&i_c, &self.state.damp_state, &self.damping, self.droop.tau_ctr);
        self.state.damp_state = damp_next;
        let (theta_hat, v_hat, _) = droop_pipeline(&self.droop, &mut self.state, &meas.v_f, &meas.i_f);

        let mut active = false;
        let mut feasible = true;
        let mut residual = 0.0;
        let mut used_set = None;
        let (theta, v) = match &self.solver {
            None => (theta_hat, v_hat),
            Some(cfg) => {
                let set = build_feasible_set_with(
                    &self.disc_step,
                    &self.disc_cycle,
                    &meas.i_f,
                    &meas.v_f,
                    &v_ad,
                    theta_hat,
                    &self.ratings,
                )?;
                let cand = PlanarVector::rotating(v_hat, 0.0);
                let out = admm_project(&cand, &set, cfg, v_hat);
                used_set = Some(set);
                active = out.active;
                feasible = out.feasible;
                residual = out.residual;
                if out.active {
                    recover_polar(&out.v_dq, theta_hat)?
                } else {
                    (theta_hat, v_hat)
                }
            }
        };

        let omega_out = (theta - self.state.theta) / self.droop.tau_ctr;
        self.state.theta = theta;
        self.state.v = v;
        self.state.omega_out = omega_out;

        let v_sw = PlanarVector::stationary(
            v * theta.cos() - v_ad.x,
            v * theta.sin() - v_ad.y,
        );
        let diag = StepDiagnostics {
            active,
            feasible,
            residual,
            omega: omega_out,
            v,
            theta,
            p_lp: self.state.p_lp,
            q_lp: self.state.q_lp,
            v_hat,
            set: used_set,
        };
        Ok((v_sw, diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::build_feasible_set;
    use crate::projection::admm_project;

    fn params() -> DroopParams {
        DroopParams {
            m_p: 0.03,
            m_q: 0.03,
            omega_0: 2.0 * std::f64::consts::PI * 60.0,
            v_star: 1.0,
            p_star: 0.5,
            q_star: 0.0,
            tau_v: 8e-3,
            tau_lp: 5.3e-3,
            tau_ctr: 1e-4,
            tau_cyc: 20e-3,
        }
    }

    fn vsc_ratings() -> ConverterRatings {
        ConverterRatings::from_dc_link(
            0.075,
            0.0076,
            Some(0.09),
            1.2,
            1.2,
            400.0,
            (2.0f64 / 3.0).sqrt() * 208.0,
            2.0 * std::f64::consts::PI * 60.0,
        )
        .unwrap()
    }

    #[test]
    fn droop_reference_examples() {
        let p = params();
        let (om, v) = droop_references(p.p_star, p.q_star, &p);
        assert_eq!(om, p.omega_0);
        assert_eq!(v, p.v_star);
        // Full load rejection at m_p = 0.03 lifts the reference by 1.5%.
        let (om2, _) = droop_references(0.0, 0.0, &p);
        assert!((om2 / p.omega_0 - 1.015).abs() < 1e-12);
        // And a 0.8 pu setpoint at m_p = 0.05 gives 1.04 pu.
        let p3 = DroopParams { m_p: 0.05, p_star: 0.8, ..p };
        let (om3, _) = droop_references(0.0, 0.0, &p3);
        assert!((om3 / p.omega_0 - 1.04).abs() < 1e-12);
    }

    #[test]
    fn lowpass_fixed_point_and_step_response() {
        assert_eq!(lowpass_update(0.7, 0.7, 5.3e-3, 1e-4), 0.7);
        // Step 0 -> 1 reaches 1 - 1/e after tau_lp worth of samples.
        let (tau_lp, tau_ctr) = (5.3e-3f64, 1e-4f64);
        let n = (tau_lp / tau_ctr).round() as usize;
        let mut y = 0.0;
        for _ in 0..n {
            y = lowpass_update(y, 1.0, tau_lp, tau_ctr);
        }
        let target = 1.0 - (-1.0f64).exp();
        assert!((y - target).abs() < 0.02, "y = {y}");
        let a = (-tau_ctr / tau_lp).exp();
        assert!((lowpass_update(0.0, 1.0, tau_lp, tau_ctr) - (1.0 - a)).abs() < 1e-15);
    }

    #[test]
    fn candidate_advances_and_filters() {
        let p = params();
        let st = ControllerState::at(1.0, 1.0);
        let (th, v) = candidate_voltage(&st, p.omega_0, 1.0, &p);
        assert!((th - (1.0 + p.tau_ctr * p.omega_0)).abs() < 1e-15);
        assert_eq!(v, 1.0);
        // Magnitude step response has time constant tau_v.
        let mut st2 = ControllerState::at(0.0, 0.0);
        let n = (p.tau_v / p.tau_ctr).round() as usize;
        for _ in 0..n {
            let (_, vh) = candidate_voltage(&st2, p.omega_0, 1.0, &p);
            st2.v = vh;
        }
        assert!((st2.v - (1.0 - (-1.0f64).exp())).abs() < 0.01, "v = {}", st2.v);
    }

    #[test]
    fn damping_is_high_pass() {
        let p = DampingParams { k_rc: 0.1, omega_rc: 1e4 };
        let tau = 1e-4;
        let mut s = PlanarVector::zero(Frame::Stationary);
        let u = PlanarVector::stationary(1.0, -0.5);
        let mut last = PlanarVector::zero(Frame::Stationary);
        for _ in 0..200 {
            let (v, sn) = rc_damping(&u, &s, &p, tau);
            s = sn;
            last = v;
        }
        assert!(last.norm() < 1e-8, "constant input must wash out");
        let off = DampingParams { k_rc: 0.0, omega_rc: 1e4 };
        let (v0, _) = rc_damping(&u, &s, &off, tau);
        assert_eq!(v0.norm(), 0.0);
    }

    #[test]
    fn damping_passband_gain_matches_discrete_response() {
        // Corner well below the drive frequency, drive well below Nyquist:
        // the band-pass plateau sits at k_rc.
        let p = DampingParams { k_rc: 0.1, omega_rc: 100.0 };
        let tau = 1e-4;
        let w = 1e4;
        let mut s = PlanarVector::zero(Frame::Stationary);
        let mut peak = 0.0f64;
        let steps = 20_000;
        for k in 0..steps {
            let t = k as f64 * tau;
            let u = PlanarVector::stationary((w * t).sin(), 0.0);
            let (v, sn) = rc_damping(&u, &s, &p, tau);
            s = sn;
            if k > steps / 2 {
                peak = peak.max(v.x.abs());
            }
        }
        assert!((peak - p.k_rc).abs() < 0.05 * p.k_rc, "peak = {peak}");
    }

    #[test]
    fn inactive_projection_matches_plain_droop_exactly() {
        let ratings = vsc_ratings();
        let damping = DampingParams { k_rc: 0.1, omega_rc: 1e4 };
        let cfg = AdmmConfig { rho: 5.0, n_it: 5, alpha: 1.6, w_theta: 83.33 };
        let mut ca = GfmController::new(params(), damping, ratings, Some(cfg)).unwrap();
        let mut plain = GfmController::new(params(), damping, ratings, None).unwrap();
        for _ in 0..4000 {
            // Open-circuit measurements consistent with the controller's own
            // voltage: no current, terminal voltage tracking the reference.
            // The cycle disc then contains the one-step candidate advance and
            // the projection never engages.
            let (th, v) = (ca.state.theta, ca.state.v);
            let meas = Measurements {
                i_f: PlanarVector::zero(Frame::Stationary),
                v_f: PlanarVector::stationary(v * th.cos(), v * th.sin()),
                i_g: PlanarVector::zero(Frame::Stationary),
            };
            let (v1, d1) = ca.step(&meas).unwrap();
            let (v2, _) = plain.step(&meas).unwrap();
            assert!(!d1.active);
            assert_eq!(v1, v2);
            assert_eq!(ca.state.theta, plain.state.theta);
            assert_eq!(ca.state.v, plain.state.v);
        }
    }

    #[test]
    fn frequency_tradeoff_set_by_w_theta_times_tau() {
        // One binding off-center disc. The single-step projected frequency
        // omega* = (theta* - theta_prev)/tau depends on w_theta and tau only
        // through their product, to first order in tau.
        let om0 = 2.0 * std::f64::consts::PI * 60.0;
        let om_dr = 1.03 * om0;
        let (theta_prev, v_hat) = (0.2, 1.15);
        let discs_ab = [
            (PlanarVector::stationary(0.4, 0.3), 0.55),
            (PlanarVector::stationary(0.35, 0.25), 0.75),
            (PlanarVector::stationary(0.0, 0.05), 1.178),
        ];
        let run = |w_theta: f64, tau: f64| -> f64 {
            let theta_hat = theta_prev + tau * om_dr;
            let set = crate::constraints::FeasibleSet {
                modulation: rotated(&discs_ab[2], theta_hat),
                cur_step: rotated(&discs_ab[0], theta_hat),
                cur_cycle: rotated(&discs_ab[1], theta_hat),
                frame_angle: theta_hat,
            };
            let cfg = AdmmConfig { rho: 1.0, n_it: 400, alpha: 1.6, w_theta };
            let out = admm_project(&PlanarVector::rotating(v_hat, 0.0), &set, &cfg, v_hat);
            assert!(out.active);
            let (theta, _) = recover_polar(&out.v_dq, theta_hat).unwrap();
            (theta - theta_prev) / tau / om0
        };
        let base = run(83.33, 1e-4);
        let halved = run(2.0 * 83.33, 0.5e-4);
        let broken = run(83.33, 2e-4);
        assert!((base - halved).abs() < 0.01, "pair gap {}", (base - halved).abs());
        assert!((base - broken).abs() > 0.015, "contrast {}", (base - broken).abs());
    }

    fn rotated(disc: &(PlanarVector, f64), theta: f64) -> crate::constraints::DiscConstraint {
        let mut c = crate::frames::rotate(&disc.0, -theta);
        c.frame = Frame::Rotating;
        crate::constraints::DiscConstraint { center: c, radius: disc.1 }
    }

    #[test]
    fn fault_candidate_is_clipped_toward_limits() {
        // A deep-sag measurement with overcurrent: the projection must engage
        // and return a voltage whose one-step current prediction respects the
        // limit on the binding disc.
        let ratings = vsc_ratings();
        let p = params();
        // At-limit current and a collapsed terminal voltage; the precondition
        // holds, so the set is nonempty and the long diagnostic run must not
        // flag it as empty.
        let i_f = PlanarVector::stationary(1.15 * (-1.2f64).cos(), 1.15 * (-1.2f64).sin());
        let v_f = PlanarVector::stationary(0.06 * 0.25f64.cos(), 0.06 * 0.25f64.sin());
        let v_ad = PlanarVector::zero(Frame::Stationary);
        let set = build_feasible_set(&i_f, &v_f, &v_ad, 0.3, p.omega_0, &ratings, p.tau_ctr, p.tau_cyc)
            .unwrap();
        let cfg = AdmmConfig { rho: 1.0, n_it: 200, alpha: 1.6, w_theta: 83.33 };
        let out = admm_project(&PlanarVector::rotating(1.0, 0.0), &set, &cfg, 1.0);
        assert!(out.active);
        assert!(out.feasible);
        for d in set.discs() {
            assert!(d.signed_distance(&out.v_dq) <= 1e-6);
        }
    }
}
