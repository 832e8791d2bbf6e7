//! Comparison current limiters around the same droop core: threshold virtual
//! impedance, variable virtual impedance, and a cascaded dual-loop controller
//! with a current-reference limiter.
//!
//! These controllers integrate the unconstrained droop candidate directly;
//! limiting happens downstream of the voltage reference, which is exactly the
//! windup-prone structure the projection-based controller avoids.

use serde::{Deserialize, Serialize};

use crate::controller::{droop_pipeline, ControllerError, ControllerState, DroopParams, Measurements};
use crate::frames::{rotate, Frame, PlanarVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineVariant {
    ThresholdVi,
    VariableVi,
    CurrentRefLimit,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BaselineParams {
    pub variant: BaselineVariant,
    /// Virtual resistance gain, pu voltage per pu excess current.
    pub k_vi: f64,
    /// Activation threshold for the virtual impedance variants, pu.
    pub i_thr: f64,
    /// Steady-state X/R ratio of the virtual impedance.
    pub rho_xr: f64,
    /// Transient X/R ratio (VariableVi only), blended in through the
    /// high-pass branch.
    pub rho_xr_transient: f64,
    /// High-pass corner of the transient branch, rad/s.
    pub hpf_cutoff: f64,
    /// Current-reference limit for the dual-loop variant, pu.
    pub i_lim: f64,
    /// (k_p, k_i) of the inner current loop, pu gains.
    pub pi_current: (f64, f64),
    /// (k_p, k_i) of the outer voltage loop, pu gains.
    pub pi_voltage: (f64, f64),
}

impl BaselineParams {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let ok = match self.variant {
            BaselineVariant::ThresholdVi => {
                self.k_vi >= 0.0 && self.i_thr >= 0.0 && self.i_thr < self.i_lim
            }
            BaselineVariant::VariableVi => {
                self.k_vi >= 0.0 && self.i_thr >= 0.0 && self.hpf_cutoff > 0.0
            }
            BaselineVariant::CurrentRefLimit => self.i_lim > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ControllerError::BadParams)
        }
    }
}

/// Per-step diagnostics shared by all baseline variants.
#[derive(Clone, Copy, Debug, Default)]
pub struct BaselineDiagnostics {
    /// Limiter engaged this step (impedance active or reference saturated).
    pub active: bool,
    pub omega: f64,
    pub v: f64,
    pub theta: f64,
    pub p_lp: f64,
    pub q_lp: f64,
}

#[derive(Clone, Debug)]
pub struct BaselineController {
    pub droop: DroopParams,
    pub params: BaselineParams,
    pub state: ControllerState,
    /// High-pass state of the transient impedance branch, stationary frame.
    hpf_state: PlanarVector,
    /// Voltage-loop integrator, dq frame.
    int_v: PlanarVector,
    /// Current-loop integrator, dq frame.
    int_c: PlanarVector,
    /// Per-unit filter constants needed by the dual-loop feedforward terms.
    l_f: f64,
    c_f: f64,
    /// Modulation limit: none of these schemes reasons about it, but the
    /// converter still cannot realize more voltage than the dc link allows.
    v_max: f64,
}

impl BaselineController {
    pub fn new(
        droop: DroopParams,
        params: BaselineParams,
        l_f: f64,
        c_f: f64,
        v_max: f64,
    ) -> Result<Self, ControllerError> {
        droop.validate()?;
        params.validate()?;
        if !(v_max > 0.0) {
            return Err(ControllerError::BadParams);
        }
        Ok(BaselineController {
            droop,
            params,
            state: ControllerState::at(0.0, droop.v_star),
            hpf_state: PlanarVector::zero(Frame::Stationary),
            int_v: PlanarVector::zero(Frame::Rotating),
            int_c: PlanarVector::zero(Frame::Rotating),
            l_f,
            c_f,
            v_max,
        })
    }

    pub fn reset(&mut self, theta0: f64, v0: f64) {
        self.state = ControllerState::at(theta0, v0);
        self.hpf_state = PlanarVector::zero(Frame::Stationary);
        self.int_v = PlanarVector::zero(Frame::Rotating);
        self.int_c = PlanarVector::zero(Frame::Rotating);
    }

    pub fn step(&mut self, meas: &Measurements) -> (PlanarVector, BaselineDiagnostics) {
        let (theta_hat, v_hat, _) = droop_pipeline(&self.droop, &mut self.state, &meas.v_f, &meas.i_f);
        // The droop integrators always advance from the unconstrained
        // candidate; none of these limiters feeds back into the droop state.
        let omega = (theta_hat - self.state.theta) / self.droop.tau_ctr;
        self.state.theta = theta_hat;
        self.state.v = v_hat;
        self.state.omega_out = omega;
        let v_gfm = PlanarVector::stationary(v_hat * theta_hat.cos(), v_hat * theta_hat.sin());

        let (mut v_sw, mut active) = match self.params.variant {
            BaselineVariant::ThresholdVi => self.threshold_vi(&v_gfm, &meas.i_f),
            BaselineVariant::VariableVi => self.variable_vi(&v_gfm, &meas.i_f),
            BaselineVariant::CurrentRefLimit => self.dual_loop(theta_hat, v_hat, meas),
        };
        let mag = v_sw.norm();
        if mag > self.v_max {
            v_sw = v_sw.scale(self.v_max / mag);
            active = true;
        }
        let diag = BaselineDiagnostics {
            active,
            omega,
            v: v_hat,
            theta: theta_hat,
            p_lp: self.state.p_lp,
            q_lp: self.state.q_lp,
        };
        (v_sw, diag)
    }

    /// v_sw = v_gfm - k_vi max(0, ||i|| - i_thr) (I + rho J) i  with J the
    /// quarter-turn rotation.
    fn threshold_vi(&self, v_gfm: &PlanarVector, i_f: &PlanarVector) -> (PlanarVector, bool) {
        let excess = (i_f.norm() - self.params.i_thr).max(0.0);
        if excess == 0.0 {
            return (*v_gfm, false);
        }
        let g = self.params.k_vi * excess;
        let drop = PlanarVector::stationary(
            g * (i_f.x - self.params.rho_xr * i_f.y),
            g * (i_f.y + self.params.rho_xr * i_f.x),
        );
        (PlanarVector::stationary(v_gfm.x - drop.x, v_gfm.y - drop.y), true)
    }

    /// Threshold impedance with the steady X/R ratio, plus a high-passed
    /// transient branch at a lower X/R that shapes the first instants of a
    /// fault. The high-pass state advances every step so the branch washes
    /// out regardless of activation.
    fn variable_vi(&mut self, v_gfm: &PlanarVector, i_f: &PlanarVector) -> (PlanarVector, bool) {
        let p = &self.params;
        let excess = (i_f.norm() - p.i_thr).max(0.0);
        let g = p.k_vi * excess;
        let u_tr = PlanarVector::stationary(
            g * (i_f.x - p.rho_xr_transient * i_f.y),
            g * (i_f.y + p.rho_xr_transient * i_f.x),
        );
        // Tustin high-pass s/(s + w) on the transient branch.
        let t = self.droop.tau_ctr;
        let b0 = 2.0 / (2.0 + p.hpf_cutoff * t);
        let a1 = (2.0 - p.hpf_cutoff * t) / (2.0 + p.hpf_cutoff * t);
        let sx = u_tr.x + a1 * self.hpf_state.x;
        let sy = u_tr.y + a1 * self.hpf_state.y;
        let v_tr = PlanarVector::stationary(b0 * (sx - self.hpf_state.x), b0 * (sy - self.hpf_state.y));
        self.hpf_state = PlanarVector::stationary(sx, sy);
        if excess == 0.0 && v_tr.norm() < 1e-12 {
            return (*v_gfm, false);
        }
        let v_ss = PlanarVector::stationary(
            g * (i_f.x - p.rho_xr * i_f.y),
            g * (i_f.y + p.rho_xr * i_f.x),
        );
        let v_sw = PlanarVector::stationary(
            v_gfm.x - v_ss.x - v_tr.x,
            v_gfm.y - v_ss.y - v_tr.y,
        );
        (v_sw, excess > 0.0)
    }

    /// Cascaded voltage/current PI loops in the droop dq frame with a
    /// circular limit on the current reference. The voltage-loop integrator
    /// freezes while the reference is saturated (conditional integration);
    /// integral gains are scaled by the nominal frequency so the pu gain
    /// values carry their usual meaning.
    fn dual_loop(&mut self, theta: f64, v_hat: f64, meas: &Measurements) -> (PlanarVector, bool) {
        let p = &self.params;
        let w0 = self.droop.omega_0;
        let t = self.droop.tau_ctr;
        let to_dq = |v: &PlanarVector| -> PlanarVector {
            let mut r = rotate(v, -theta);
            r.frame = Frame::Rotating;
            r
        };
        let v_f = to_dq(&meas.v_f);
        let i_f = to_dq(&meas.i_f);
        let i_g = to_dq(&meas.i_g);

        let e_v = PlanarVector::rotating(v_hat - v_f.x, -v_f.y);
        let (kp_v, ki_v) = p.pi_voltage;
        // Load current and capacitor admittance feedforward.
        let raw = PlanarVector::rotating(
            kp_v * e_v.x + self.int_v.x + i_g.x - self.c_f * v_f.y,
            kp_v * e_v.y + self.int_v.y + i_g.y + self.c_f * v_f.x,
        );
        let mag = raw.norm();
        let saturated = mag > p.i_lim;
        let i_ref = if saturated { raw.scale(p.i_lim / mag) } else { raw };
        if !saturated {
            self.int_v = PlanarVector::rotating(
                self.int_v.x + t * w0 * ki_v * e_v.x,
                self.int_v.y + t * w0 * ki_v * e_v.y,
            );
        }

        let e_c = PlanarVector::rotating(i_ref.x - i_f.x, i_ref.y - i_f.y);
        let (kp_c, ki_c) = p.pi_current;
        // Terminal voltage and inductor cross-coupling feedforward.
        let v_sw_dq = PlanarVector::rotating(
            kp_c * e_c.x + self.int_c.x + v_f.x - self.l_f * i_f.y,
            kp_c * e_c.y + self.int_c.y + v_f.y + self.l_f * i_f.x,
        );
        self.int_c = PlanarVector::rotating(
            self.int_c.x + t * w0 * ki_c * e_c.x,
            self.int_c.y + t * w0 * ki_c * e_c.y,
        );
        let mut out = rotate(&v_sw_dq, theta);
        out.frame = Frame::Stationary;
        (out, saturated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn droop() -> DroopParams {
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

    fn vi_params(variant: BaselineVariant) -> BaselineParams {
        BaselineParams {
            variant,
            k_vi: 0.2,
            i_thr: 0.5,
            rho_xr: 2.0,
            rho_xr_transient: 0.8,
            hpf_cutoff: 1000.0,
            i_lim: 1.2,
            pi_current: (1.0, 0.24),
            pi_voltage: (0.55, 0.23),
        }
    }

    #[test]
    fn threshold_vi_inactive_below_threshold() {
        let mut c = BaselineController::new(droop(), vi_params(BaselineVariant::ThresholdVi), 0.075, 0.09, 1.3)
            .unwrap();
        let meas = Measurements {
            i_f: PlanarVector::stationary(0.3, -0.2),
            v_f: PlanarVector::stationary(1.0, 0.0),
            i_g: PlanarVector::stationary(0.3, -0.2),
        };
        let (v_sw, d) = c.step(&meas);
        assert!(!d.active);
        let expect = PlanarVector::stationary(d.v * d.theta.cos(), d.v * d.theta.sin());
        assert_eq!(v_sw, expect);
    }

    #[test]
    fn threshold_vi_drop_formula() {
        let mut c = BaselineController::new(droop(), vi_params(BaselineVariant::ThresholdVi), 0.075, 0.09, 1.3)
            .unwrap();
        let i = PlanarVector::stationary(0.8, -0.3);
        let meas = Measurements { i_f: i, v_f: PlanarVector::stationary(0.2, 0.0), i_g: i };
        let (v_sw, d) = c.step(&meas);
        assert!(d.active);
        let excess = i.norm() - 0.5;
        let g = 0.2 * excess;
        let drop = (g * (i.x - 2.0 * i.y), g * (i.y + 2.0 * i.x));
        let v_gfm = (d.v * d.theta.cos(), d.v * d.theta.sin());
        assert!((v_sw.x - (v_gfm.0 - drop.0)).abs() < 1e-15);
        assert!((v_sw.y - (v_gfm.1 - drop.1)).abs() < 1e-15);
    }

    #[test]
    fn variable_vi_transient_branch_washes_out() {
        let mut c = BaselineController::new(droop(), vi_params(BaselineVariant::VariableVi), 0.075, 0.09, 1.3)
            .unwrap();
        let i = PlanarVector::stationary(1.3, 0.0);
        let meas = Measurements { i_f: i, v_f: PlanarVector::stationary(0.1, 0.0), i_g: i };
        let mut last = PlanarVector::zero(Frame::Stationary);
        let mut d = BaselineDiagnostics::default();
        // Hold a frozen measurement long past the 1 ms high-pass horizon.
        for _ in 0..2000 {
            let (v, dd) = c.step(&meas);
            last = v;
            d = dd;
        }
        assert!(d.active);
        let excess = i.norm() - 0.5;
        let g = 0.2 * excess;
        let v_ss = (g * (i.x - 2.0 * i.y), g * (i.y + 2.0 * i.x));
        let v_gfm = (d.v * d.theta.cos(), d.v * d.theta.sin());
        assert!((last.x - (v_gfm.0 - v_ss.0)).abs() < 1e-6);
        assert!((last.y - (v_gfm.1 - v_ss.1)).abs() < 1e-6);
    }

    #[test]
    fn dual_loop_saturation_freezes_voltage_integrator() {
        let mut c =
            BaselineController::new(droop(), vi_params(BaselineVariant::CurrentRefLimit), 0.075, 0.09, 1.3)
                .unwrap();
        // Collapsed terminal voltage: the voltage loop demands far more than
        // i_lim, so the reference saturates at the circular limit.
        let meas = Measurements {
            i_f: PlanarVector::stationary(1.0, 0.0),
            v_f: PlanarVector::stationary(0.02, 0.0),
            i_g: PlanarVector::stationary(1.0, 0.0),
        };
        let (_, d1) = c.step(&meas);
        assert!(d1.active);
        let frozen = c.int_v;
        let (_, d2) = c.step(&meas);
        assert!(d2.active);
        assert_eq!(c.int_v, frozen);
    }

    #[test]
    fn dual_loop_tracks_at_equilibrium() {
        // Feed measurements that already match the droop reference: terminal
        // voltage on the reference phasor and the filter current carrying
        // exactly the capacitor current of an unloaded converter. Neither the
        // reference limit nor the modulation clamp may engage.
        let c_f = 0.09;
        let dp = droop();
        let mut c =
            BaselineController::new(dp, vi_params(BaselineVariant::CurrentRefLimit), 0.075, c_f, 1.3)
                .unwrap();
        // Measured power is zero (pure capacitor current), so the droop runs
        // at a constant 1 + m_p p* per unit; the feed anticipates the angle
        // the controller will hold this step.
        let w = dp.omega_0 * (1.0 + dp.m_p * dp.p_star);
        for _ in 0..3000 {
            let th = c.state.theta + w * dp.tau_ctr;
            let v = c.state.v;
            let meas = Measurements {
                i_f: PlanarVector::stationary(-c_f * v * th.sin(), c_f * v * th.cos()),
                v_f: PlanarVector::stationary(v * th.cos(), v * th.sin()),
                i_g: PlanarVector::zero(Frame::Stationary),
            };
            let (v_sw, d) = c.step(&meas);
            assert!(!d.active);
            assert!(v_sw.norm() < 1.3);
        }
    }
}
